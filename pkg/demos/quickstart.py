"""Synthesize a small corpus, train the base encoder, detect with and without
one round of mutual learning.

    python demos/quickstart.py [out_dir]

Takes about two minutes on one CPU core.
"""
import sys
import tempfile
from pathlib import Path

from fewshot_sed.config import SYNTH_PRESET, RunConfig
from fewshot_sed.corpus import SynthSpec, synth_corpus
from fewshot_sed.pipeline import mean_file_f, run_detection, train_base_encoder


def main(out):
    manifest = synth_corpus(SynthSpec(n_files=3, seed=0), out)
    print(f"corpus: {len(manifest.files('base'))} base files, {len(manifest.files('test'))} test files in {out}")

    cfg = RunConfig().replace(**{**SYNTH_PRESET, "iterations": 1})
    result, stats, classes = train_base_encoder(manifest, cfg)
    print(f"base encoder: {len(classes)} classes, training accuracy {result.accuracies[-1]:.3f}")

    report = run_detection(cfg, manifest, result.encoder, stats)
    for f in report["files"]:
        its = "  ".join(f"it{r['iteration']} F={r['metrics']['f_score']:5.1f}" for r in f["iterations"])
        print(f"  {f['audio']:22s} {its}")
    for it in (0, 1):
        agg = report["aggregate_per_iteration"][it]
        print(f"iteration {it}: mean F {mean_file_f(report, it):5.1f}  aggregate P {agg['precision']:5.1f} "
              f"R {agg['recall']:5.1f} F {agg['f_score']:5.1f}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
