"""Transductive loss ablation: raw prototypes vs CE, MI and CE+MI refinement.

Trains one base encoder on the seed-0 synthetic corpus and scores each loss
mode with iteration 0 only (no encoder fine-tuning).

    python demos/loss_ablation.py
"""
import tempfile

from fewshot_sed.config import SYNTH_PRESET, RunConfig
from fewshot_sed.corpus import SynthSpec, synth_corpus
from fewshot_sed.pipeline import mean_file_f, run_detection, train_base_encoder

with tempfile.TemporaryDirectory() as tmp:
    manifest = synth_corpus(SynthSpec(seed=0), tmp)
    base_cfg = RunConfig().replace(**{**SYNTH_PRESET, "iterations": 0})
    result, stats, _ = train_base_encoder(manifest, base_cfg)

    print(f"{'loss':>6}  {'mean F':>7}  {'agg P':>6}  {'agg R':>6}  {'agg F':>6}")
    for loss in ("none", "ce", "mi", "ce+mi"):
        rep = run_detection(base_cfg.replace(loss=loss), manifest, result.encoder, stats)
        a = rep["aggregate"]
        print(f"{loss:>6}  {mean_file_f(rep):7.2f}  {a['precision']:6.1f}  {a['recall']:6.1f}  {a['f_score']:6.1f}")
