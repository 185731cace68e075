"""Pilot run behind the frozen synthetic thresholds.

Runs the end-to-end benchmark at the fixed seed and the ablation sweep over
several seeds, then writes everything to results/pilot.json.

    python3 scripts/pilot.py [--seeds 8] [--out results/pilot.json]
"""

import argparse
import json
import time
from pathlib import Path

from fgzsl.bench import ablation_sweep, synth_bench
from fgzsl.data import SyntheticSpec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=8)
    p.add_argument("--rows", default="ABCDEF")
    p.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "results" / "pilot.json")
    args = p.parse_args()

    t0 = time.time()
    bench = synth_bench(SyntheticSpec(), seed=0)
    bench_time = time.time() - t0
    top1 = {m: r["topk"]["1"] for m, r in bench["methods"].items()}
    print(f"bench seed 0 ({bench_time:.1f}s): " + json.dumps(top1))

    t0 = time.time()
    sweep = ablation_sweep(range(args.seeds), args.rows,
                           log=lambda r: print(f"seed {r['seed']} row {r['row']}: "
                                               f"S={r['S']:.1f} U={r['U']:.1f} H={r['H']:.1f}", flush=True))
    sweep_time = time.time() - t0
    margins = {
        row: [sweep[s]["F"]["U"] - sweep[s][row]["U"] for s in sweep]
        for row in args.rows if row != "F"
    }
    result = {
        "benchmark": {"seed": 0, "chance": bench["chance"], "top1": top1,
                      "top5": {m: r["topk"]["5"] for m, r in bench["methods"].items()},
                      "hops_top1": {m: r["hops"]["1"] for m, r in bench["methods"].items()},
                      "spec": bench["spec"], "pa_config": bench["pa_config"],
                      "seconds": round(bench_time, 1)},
        "ablation": {"seeds": list(sweep), "top1": {str(s): v for s, v in sweep.items()},
                     "unseen_margin_F_minus_row": margins, "seconds": round(sweep_time, 1)},
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
