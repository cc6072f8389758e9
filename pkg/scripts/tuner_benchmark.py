#!/usr/bin/env python3
"""Tuner efficacy on the 288-configuration benchmark surface.

For each seed: build the lookup surface, run the search for ``--trials``
trials and record whether the best configuration found is in the top 5%.
Optionally writes the surfaces and per-seed traces to ``--out``.
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from ctxengage import tuner


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--trials", type=int, default=60)
    ap.add_argument("--n-init", type=int, default=3)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    space = tuner.benchmark_space()
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    hits, first_hit = 0, []
    for seed in range(args.seeds):
        surf = tuner.benchmark_surface(seed)
        cut = sorted(surf.values())[math.ceil(0.05 * len(surf)) - 1]
        best, hist = tuner.run_search(space, lambda c: surf[tuner.config_key(c)], n_init=args.n_init,
                                      n_iter=args.trials, seed=seed)
        trace = np.minimum.accumulate([t.objective for t in hist])
        when = int(np.argmax(trace <= cut)) + 1 if (trace <= cut).any() else None
        hits += when is not None
        first_hit.append(when)
        print(f"seed {seed:2d}: best {best.objective:.4f} (top-5% cut {cut:.4f}), first top-5% trial: {when}")
        if out:
            (out / f"surface_{seed}.json").write_text(json.dumps(surf, indent=0, sort_keys=True))
            (out / f"trace_{seed}.jsonl").write_text("".join(t.to_json() + "\n" for t in hist))
    print(f"{hits}/{args.seeds} seeds reached the top 5% within {args.trials} trials "
          f"(|space| = {space.size})")


if __name__ == "__main__":
    main()
