#!/usr/bin/env python3
"""Run the whole experiment suite on one synthetic cohort at desk scale.

Models 1-7 (bracket ablation), Models 8-9 (cross-sectional), both
sequence-length sweeps, the zeroed-context diagnostic and a Shapley summary.
Everything lands in ``--out`` as CSV/JSON plus SVG figures.

    python3 scripts/run_desk_suite.py --out runs/desk --users 2000 --reps 5
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import pandas as pd

from ctxengage import bench, explain, nnet, plots, synthgen
from ctxengage.pipeline import dataset as ds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--days", type=int, default=30)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--hpo-budget", type=int, default=0, help="search trials per model (0 = preset)")
    ap.add_argument("--preset", default="desk", choices=["desk", "paper"])
    ap.add_argument("--lengths", default="1,5,10,25,50")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--skip-sweep", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    sc = synthgen.SynthConfig(n_users=args.users, span_days=args.days, seed=args.seed)
    cohort = synthgen.generate_cohort(sc.n_users, sc.seed, sc)
    tables = synthgen.generate_context_tables(sc.n_zips, sc.span_days * 24, sc.seed, sc)
    log = synthgen.simulate(cohort, tables, sc.span_days, sc.seed, sc, n_jobs=args.jobs)
    bundle = ds.prepare(log, tables)
    del log
    logging.info("data ready in %.0fs: %d rows", time.perf_counter() - t0, len(bundle.target))

    cfg = bench.BenchConfig(preset=args.preset, n_jobs=args.jobs)
    data = bench.DataCache(bundle, cfg)
    plans = [bench.model_plan(m, repetitions=args.reps, hpo_budget=args.hpo_budget) for m in range(1, 8)]
    rep = bench.run_model_suite(plans, bundle, 0, cfg, out / "ablation", data)
    bench.write_report(rep, out / "ablation")
    plots.plot_models(rep.summary, out / "models.svg")
    print(rep.summary.to_string(index=False))

    cross = bench.run_cross_sectional(bundle, 0, cfg, args.reps, args.hpo_budget, out / "cross", data)
    bench.write_report(cross, out / "cross")
    plots.plot_models(cross.summary, out / "cross.svg")
    print(cross.summary.to_string(index=False))

    diag = bench.zeroed_context_diagnostic(bundle, 0, cfg, repetitions=3, data=data)
    (out / "zeroed_context.json").write_text(json.dumps(diag, indent=2) + "\n")

    if not args.skip_sweep:
        lengths = [int(x) for x in args.lengths.split(",")]
        sw = pd.concat([bench.sweep_sequence_length(lengths, ch, bundle, 0, cfg, args.reps, data=data)
                        for ch in ("behavioral", "context")], ignore_index=True)
        bench.write_sweep(sw, out)
        plots.plot_sweep(sw, out / "sweep.svg")
        print(sw.drop(columns="r2_values").to_string(index=False))

    # Shapley summary for the cross-sectional context model
    tr, va, te = data.splits(bench.model_plan(9).brackets, 1, "dense")
    model = nnet.train(bench._spec(bench.REFERENCE_HPARAMS[9], "dense", cfg, 0), tr, va)
    Xtr, _ = tr.arrays()
    Xte, _ = te.arrays()
    names = tr.design.names
    conn = names.index("connectivity_fraction")
    bg = Xtr[explain.stratified_background(Xtr, Xtr[:, conn] >= 0.5, 100, 0)]
    pick = np.random.default_rng(0).choice(len(Xte), min(100, len(Xte)), replace=False)
    group_of = {n: ("weather_label" if n.startswith("weather_label_") else "location")
                for n, b, k in bundle.schema.columns if (b == "weather" and k == "onehot") or b == "location"}
    res = explain.shap_values(lambda Z: model.network.predict(Z.astype(np.float32)), Xte[pick],
                              explain.ShapConfig(bg, 500, "sampled", explain.Groups.from_map(names, group_of)))
    imp = explain.importance_summary(res)
    imp.to_csv(out / "importance.csv", index=False, float_format="%.6f")
    plots.plot_importance(imp, out / "importance.svg")
    print(imp.head(10).to_string(index=False))
    logging.info("suite finished in %.1f min", (time.perf_counter() - t0) / 60)


if __name__ == "__main__":
    main()
