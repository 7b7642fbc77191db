"""Record the full-precision W2 baseline that the end-to-end thresholds derive from.

Trains the FP toy model once with the default config (seed 0), then samples
it with three sampling seeds at 100 and 10 DDIM steps and writes the scores
to ``expected_results.txt`` at the repository root.

    python benchmarks/fp_baseline.py [--out runs/baseline]
"""

from __future__ import annotations

import argparse
import shutil
import time
from pathlib import Path

import numpy as np

from tdq.cli import main
from tdq.metrics import parse_report

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2)


def fp_scores(out: Path, n_steps: int) -> list[float]:
    scores = []
    for seed in SEEDS:
        d = out / f"s{seed}"
        d.mkdir(parents=True, exist_ok=True)
        shutil.copy(out / "fp.ckpt", d / "fp.ckpt")
        assert main(["eval", "--out", str(d), "--seed", str(seed), "--mode", "fp", "--n-steps", str(n_steps), "--force"]) == 0
        (row,) = parse_report((d / f"report_qat_w4a4_n{n_steps}.txt").read_text())
        scores.append(float(row["w2"]))
    return scores


def run(out: Path) -> dict:
    t0 = time.perf_counter()
    assert main(["train-fp", "--out", str(out), "--seed", "0", "--force"]) == 0
    train_s = time.perf_counter() - t0
    return {"fp_train_seconds": train_s, "fp_w2_n100": fp_scores(out, 100), "fp_w2_n10": fp_scores(out, 10)}


def write(res: dict, path: Path) -> None:
    lines = [
        "# full-precision baseline, default config, FP seed 0, sampling seeds 0 1 2",
        "# written by benchmarks/fp_baseline.py; thresholds in the end-to-end checks derive from fp_w2_n100_mean",
        f"fp_train_seconds = {res['fp_train_seconds']:.1f}",
    ]
    for key in ("fp_w2_n100", "fp_w2_n10"):
        vals = res[key]
        lines.append(f"{key} = {' '.join(f'{v:.6f}' for v in vals)}")
        lines.append(f"{key}_mean = {np.mean(vals):.6f}")
    path.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/baseline"))
    args = ap.parse_args()
    res = run(args.out)
    write(res, ROOT / "expected_results.txt")
    print((ROOT / "expected_results.txt").read_text())
