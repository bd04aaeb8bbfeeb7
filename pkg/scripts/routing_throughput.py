"""Measure training throughput with and without token routing.

Runs the same config at each bypass rate and reports median step time,
kept tokens per step, and tokens/sec through the routed blocks. The
speedup from rate 0.5 is the practical payoff of routing; the quality
cost is invisible here and belongs to full training runs.
"""

from __future__ import annotations

import argparse
import statistics

from crossu.config import RunConfig, ScheduleConfig
from crossu.datapipe import DatasetSpec
from crossu.model import PRESETS
from crossu.training import TrainState, train_step


def measure(preset: str, rate: float, steps: int, batch: int, seed: int):
    cfg = RunConfig(
        model=PRESETS[preset],
        data=DatasetSpec(source="procedural:0", train_size=32, patch=2),
        schedule=ScheduleConfig(steps=steps, batch=batch, tread_rate=rate),
        seed=seed,
    )
    state = TrainState(cfg)
    metrics = [train_step(state) for _ in range(steps)]
    tail = metrics[len(metrics) // 4:]  # drop warmup quarter
    return {
        "rate": rate,
        "ms_per_step": 1000 * statistics.median(m.step_time for m in tail),
        "kept_tokens": int(statistics.median(m.kept_tokens for m in tail)),
        "tokens_per_sec": statistics.median(m.tokens_per_sec for m in tail),
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.5])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'rate':>6} {'ms/step':>9} {'kept tok':>9} {'tok/s':>10}")
    baseline = None
    for rate in args.rates:
        row = measure(args.preset, rate, args.steps, args.batch, args.seed)
        if baseline is None:
            baseline = row["ms_per_step"]
        rel = baseline / row["ms_per_step"]
        print(f"{row['rate']:>6.2f} {row['ms_per_step']:>9.1f} "
              f"{row['kept_tokens']:>9d} {row['tokens_per_sec']:>10.0f} "
              f"({rel:.2f}x vs first row)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
