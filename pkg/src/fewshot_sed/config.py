"""Run configuration: defaults, flat ``key = value`` files, and overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .transductive import LOSS_MODES


class ConfigError(ValueError):
    pass


# Overrides used on the synthetic corpus. Prototype norms there run from 10 to
# a few hundred, so a step size of 1e-5 moves W by a negligible fraction; 20
# Adam steps at 1.0 can move each coordinate by about its own size. See README.
SYNTH_PRESET = {"base_background": True, "lr_W": 1.0, "ft_batch_size": 64}


@dataclass
class RunConfig:
    # front end
    sr: int = 22050
    window: int = 1024
    hop: int = 256
    n_mels: int = 128
    seg_frames: int = 17
    seg_hop: int = 4
    # base training
    lr_base: float = 1e-3
    epochs_base: int = 15
    batch_size: int = 32
    base_background: bool = False
    # transductive classifier update
    lambda_ce: float = 0.1
    lr_W: float = 1e-5
    epochs_W: int = 20
    # per-audio epoch counts, "name.wav:12, other.wav:25"; files not listed use epochs_W
    epochs_W_per_file: str = ""
    loss: str = "ce+mi"
    normalize_prototypes: bool = False
    # encoder fine-tuning
    lambda1: float = 0.5
    lambda2: float = 0.5
    lr_ft: float = 1e-4
    lr_head: float = 1e-3
    epochs_ft: int = 5
    iterations: int = 1
    tau: float = 0.8
    negatives_cap: int = 64
    ft_batch_size: int = 32
    ft_include_support: bool = True
    # episodes and scoring
    neg_count: int = 16
    neg_region: str = "before_fifth"
    threshold: float = 0.5
    min_dur: float = 0.06
    merge_gap: float = 0.05
    iou_min: float = 0.3
    seed: int = 0
    override: bool = False

    def validate(self) -> "RunConfig":
        for name in ("lr_base", "lr_W", "lr_ft", "lr_head", "sr", "window", "hop", "n_mels"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        per_file = self.per_file_epochs()
        if not self.override and not all(5 <= e <= 30 for e in (self.epochs_W, *per_file.values())):
            raise ConfigError("epochs_W must lie in [5, 30] (set override = true to bypass)")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}")
        if not 0.5 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0.5, 1]")
        if self.iterations < 0 or self.neg_count < 1 or self.negatives_cap < 1:
            raise ConfigError("iterations >= 0, neg_count >= 1 and negatives_cap >= 1 required")
        if self.neg_region not in ("before_fifth", "anywhere"):
            raise ConfigError("neg_region must be 'before_fifth' or 'anywhere'")
        return self

    def per_file_epochs(self) -> dict:
        out = {}
        for item in filter(None, (x.strip() for x in self.epochs_W_per_file.split(","))):
            name, sep, n = item.rpartition(":")
            if not sep or not name.strip() or not n.strip().isdigit():
                raise ConfigError(f"epochs_W_per_file: expected 'name:epochs', got {item!r}")
            out[name.strip()] = int(n)
        return out

    def epochs_for(self, audio: str) -> int:
        """Transductive epochs for one file, matched on its base name."""
        return self.per_file_epochs().get(Path(audio).name, self.epochs_W)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**{**asdict(self), **changes})

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, val in raw.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, val, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        raw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        return cls.from_mapping(raw)

    def dumps(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in asdict(self).items())


def _coerce(key, val, typ):
    if not isinstance(val, str):
        return val
    try:
        if typ in ("bool", bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(val)
        if typ in ("float", float):
            return float(val)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return val
