import numpy as np
import pytest

from fewshot_sed.encoder import (ClassificationHead, Encoder, ShapeError, head_loss_and_grads, load_checkpoint,
                                 save_checkpoint, train_base)
from fewshot_sed.functional import l2_normalize
from fewshot_sed.optim import AdamState, NonFiniteGradientError, adam_step

from oracles import fd_check

SMALL = dict(channels=(2, 3, 4, 5), in_shape=(16, 16))


def naive_forward(enc: Encoder, seg: np.ndarray) -> np.ndarray:
    """Straight nested-loop conv / relu / pool / mean."""
    x = seg[:, :, None].astype(np.float64)
    for i in range(len(enc.channels)):
        w, b = enc.params[f"conv{i}.w"], enc.params[f"conv{i}.b"]
        h, wd, cin = x.shape
        cout = w.shape[-1]
        xp = np.zeros((h + 2, wd + 2, cin))
        xp[1:-1, 1:-1] = x
        y = np.zeros((h, wd, cout))
        for r in range(h):
            for c in range(wd):
                for o in range(cout):
                    acc = b[o]
                    for di in range(3):
                        for dj in range(3):
                            for ci in range(cin):
                                acc += xp[r + di, c + dj, ci] * w[di, dj, ci, o]
                    y[r, c, o] = acc
        y = np.maximum(y, 0)
        h2, w2 = h // 2, wd // 2
        p = np.zeros((h2, w2, cout))
        for r in range(h2):
            for c in range(w2):
                p[r, c] = y[2 * r:2 * r + 2, 2 * c:2 * c + 2].max(axis=(0, 1))
        x = p
    return x.mean(axis=(0, 1))


def test_forward_matches_nested_loop_oracle():
    enc = Encoder.init(seed=3, **SMALL)
    rng = np.random.default_rng(0)
    for p in enc.params.values():
        p += rng.normal(0, 0.05, size=p.shape)
    seg = rng.normal(size=(16, 16))
    np.testing.assert_allclose(enc.forward(seg), naive_forward(enc, seg), rtol=1e-5, atol=1e-12)


def test_forward_default_architecture_oracle_odd_height():
    enc = Encoder.init(channels=(3, 4, 4, 6), in_shape=(17, 20), seed=1)
    seg = np.random.default_rng(2).normal(size=(17, 20))
    np.testing.assert_allclose(enc.forward(seg), naive_forward(enc, seg), rtol=1e-5)


def test_zero_weights_bias_passthrough():
    enc = Encoder.init(seed=0)
    for k in enc.params:
        enc.params[k][...] = 0.0
    b = np.abs(np.random.default_rng(0).normal(size=64))
    enc.params["conv3.b"][...] = b
    np.testing.assert_allclose(enc.forward(np.random.default_rng(1).normal(size=(17, 128))), b)


def test_forward_deterministic_and_shape():
    enc = Encoder.init(seed=0)
    seg = np.random.default_rng(0).normal(size=(17, 128))
    a = enc.forward(seg)
    assert a.shape == (64,)
    assert np.array_equal(a, enc.forward(seg.copy()))
    batch = enc.forward(np.stack([seg, seg]))
    assert np.array_equal(batch[0], batch[1])


def test_shape_mismatch():
    enc = Encoder.init(seed=0)
    with pytest.raises(ShapeError):
        enc.forward(np.zeros((16, 128)))


def test_input_too_small_for_pooling():
    with pytest.raises(ValueError):
        Encoder.init(in_shape=(8, 128))


# --- l2 normalize -----------------------------------------------------------

def test_l2_normalize_examples():
    v = np.zeros(64)
    v[:2] = (3, 4)
    out = l2_normalize(v)
    assert out[0] == pytest.approx(0.6) and out[1] == pytest.approx(0.8)
    u = l2_normalize(np.random.default_rng(0).normal(size=64))
    np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)
    np.testing.assert_allclose(l2_normalize(7.5 * u), u, atol=1e-6)


def test_l2_normalize_zero_flagged():
    out, flag = l2_normalize(np.zeros((2, 4)) + np.array([[0.0], [1.0]]), return_flag=True)
    assert flag.tolist() == [True, False]
    assert np.all(out[0] == 0)
    assert np.linalg.norm(out[1]) == pytest.approx(1.0, abs=1e-6)


# --- backward ---------------------------------------------------------------

@pytest.mark.parametrize("channels,shape", [((2, 3, 4, 5), (16, 16)), ((3, 2, 4, 3), (17, 20)),
                                            ((4, 4, 6, 8), (16, 32))])
def test_backward_finite_differences(channels, shape):
    for seed in range(3):
        enc = Encoder.init(channels=channels, in_shape=shape, seed=seed)
        rng = np.random.default_rng(seed + 10)
        for p in enc.params.values():
            p += rng.normal(0, 0.05, size=p.shape)
        segs = rng.normal(size=(3, *shape))
        up = rng.normal(size=(3, channels[-1]))
        _, cache = enc.forward(segs, cache=True)
        grads = enc.backward(cache, up)
        f = lambda: float((enc.forward(segs) * up).sum())
        for name, p in enc.params.items():
            ok, err, _ = fd_check(grads[name], f, p, 1e-4)
            assert ok, (name, err)


def test_backward_zero_upstream():
    enc = Encoder.init(**SMALL)
    segs = np.random.default_rng(0).normal(size=(2, 16, 16))
    _, cache = enc.forward(segs, cache=True)
    grads = enc.backward(cache, np.zeros((2, 5)))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_linear_in_batch():
    enc = Encoder.init(**SMALL, seed=4)
    rng = np.random.default_rng(1)
    segs = rng.normal(size=(2, 16, 16))
    up = rng.normal(size=(2, 5))
    _, c = enc.forward(segs, cache=True)
    both = enc.backward(c, up)
    parts = []
    for i in range(2):
        _, ci = enc.forward(segs[i:i + 1], cache=True)
        parts.append(enc.backward(ci, up[i:i + 1]))
    for k in both:
        np.testing.assert_allclose(both[k], parts[0][k] + parts[1][k], rtol=1e-10, atol=1e-12)


def test_head_loss_gradient_matches_fd():
    enc = Encoder.init(**SMALL, seed=2)
    head = ClassificationHead.init(3, 5, seed=1)
    rng = np.random.default_rng(3)
    segs = rng.normal(size=(4, 16, 16))
    labels = np.array([0, 1, 2, 1])
    _, eg, hg, _ = head_loss_and_grads(enc, head, segs, labels)
    h = 1e-5
    for name in ("head.w", "head.b"):
        arr = head.weights if name == "head.w" else head.bias
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + h
            up = head_loss_and_grads(enc, head, segs, labels)[0]
            flat[idx] = old - h
            down = head_loss_and_grads(enc, head, segs, labels)[0]
            flat[idx] = old
            assert hg[name].reshape(-1)[idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)
    flat = enc.params["conv0.w"].reshape(-1)
    for idx in range(0, flat.size, 3):
        old = flat[idx]
        flat[idx] = old + h
        up = head_loss_and_grads(enc, head, segs, labels)[0]
        flat[idx] = old - h
        down = head_loss_and_grads(enc, head, segs, labels)[0]
        flat[idx] = old
        assert eg["conv0.w"].reshape(-1)[idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)


# --- adam ---------------------------------------------------------------------

def test_adam_zero_grad_fresh_state():
    p = {"a": np.arange(3.0)}
    new, st = adam_step(p, {"a": np.zeros(3)}, AdamState(), 0.1)
    np.testing.assert_array_equal(new["a"], p["a"])
    assert st.step == 1


def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -2.0, 1e-3])
    new, _ = adam_step({"a": np.zeros(3)}, {"a": g}, AdamState(), 0.01)
    # m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps)
    np.testing.assert_allclose(new["a"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(new["a"], -0.01 * np.sign(g), rtol=1e-5)


def test_adam_constant_gradient_asymptote():
    p = {"a": np.zeros(2)}
    st = AdamState()
    g = {"a": np.array([0.5, -4.0])}
    for _ in range(500):
        prev = p["a"].copy()
        p, st = adam_step(p, g, st, 1e-3)
    np.testing.assert_allclose(p["a"] - prev, [-1e-3, 1e-3], rtol=1e-6)


def test_adam_rejects_non_finite():
    st = AdamState()
    with pytest.raises(NonFiniteGradientError):
        adam_step({"a": np.zeros(2)}, {"a": np.array([np.nan, 0.0])}, st, 0.1)
    assert st.step == 0 and not st.m


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, AdamState(), 0.1)


# --- base training ------------------------------------------------------------

def toy_dataset(n=48, seed=0, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    segs = rng.normal(size=(n, *shape)) + np.where(labels == 1, 1.5, -1.5)[:, None, None]
    return segs, labels


def test_train_base_separable_toy():
    segs, labels = toy_dataset()
    enc = Encoder.init(channels=(4, 4, 8, 8), in_shape=(16, 16), seed=0)
    head = ClassificationHead.init(2, 8, seed=0)
    res = train_base(enc, head, segs, labels, epochs=15, lr=1e-3, batch_size=16, seed=0)
    assert res.accuracies[-1] >= 0.95
    assert res.losses[-1] < res.losses[0]
    # inputs not mutated
    assert enc.checksum() == Encoder.init(channels=(4, 4, 8, 8), in_shape=(16, 16), seed=0).checksum()


def test_train_base_zero_lr_is_noop():
    segs, labels = toy_dataset(16)
    enc = Encoder.init(**SMALL)
    head = ClassificationHead.init(2, 5)
    res = train_base(enc, head, segs, labels, epochs=2, lr=0.0)
    assert res.encoder.checksum() == enc.checksum()
    np.testing.assert_array_equal(res.head.weights, head.weights)


def test_train_base_head_dimension_and_single_class():
    segs, _ = toy_dataset(12)
    labels = np.arange(12) % 4
    enc = Encoder.init(**SMALL)
    res = train_base(enc, ClassificationHead.init(4, 5), segs, labels, epochs=1)
    assert res.head.logits(res.encoder.embed(segs)).shape == (12, 4)
    with pytest.raises(ValueError):
        train_base(enc, ClassificationHead.init(2, 5), segs, np.zeros(12, dtype=int), epochs=1)


def test_train_base_deterministic():
    segs, labels = toy_dataset(24)
    runs = [train_base(Encoder.init(**SMALL, seed=1), ClassificationHead.init(2, 5, seed=1), segs, labels,
                       epochs=3, seed=7) for _ in range(2)]
    assert runs[0].encoder.checksum() == runs[1].encoder.checksum()


def test_checkpoint_roundtrip(tmp_path):
    enc = Encoder.init(**SMALL, seed=5)
    head = ClassificationHead.init(3, 5, seed=2)
    save_checkpoint(tmp_path / "c.bin", enc, head)
    enc2, head2 = load_checkpoint(tmp_path / "c.bin")
    assert enc2.checksum() == enc.checksum()
    assert enc2.channels == enc.channels and enc2.in_shape == enc.in_shape
    np.testing.assert_array_equal(head2.weights, head.weights)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")
