"""Lane-change trajectory comparison: LSTM regressor vs ANP vs ANP-LSTM.

Trains one model per variant and axis on generated lane-change scenes, then
prints per-axis horizon tables and writes the full reports as JSON.
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from ranp.experiments import TRAFFIC_TRAIN, traffic_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=TRAFFIC_TRAIN.iterations)
    ap.add_argument("--out", type=Path, default=Path("runs/traffic"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outcome = traffic_experiment(args.seed, replace(TRAFFIC_TRAIN, iterations=args.iterations))
    for axis in ("lateral", "longitudinal"):
        print(f"\n[{axis}]")
        print(outcome.table(axis))
    print()
    for name, rep in outcome.reports.items():
        print(f"{name:10s} mse={rep.mse:.4f} nll={rep.nll:.4f}")
    print(f"ANP-LSTM best on both: {outcome.anp_lstm_wins}  ({time.perf_counter() - t0:.0f}s)")
    report = {name: json.loads(rep.to_json()) for name, rep in outcome.reports.items()}
    (args.out / "report.json").write_text(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
