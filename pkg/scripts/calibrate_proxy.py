#!/usr/bin/env python3
"""Quick look at the planted signal without training recurrent networks.

Fits a gradient-boosted tree proxy on flattened behavioral histories of
several lengths (plus momentary context for the context variant) and prints
test R2 per length.  Useful when changing generator defaults: the shape of
the proxy curve tracks the shape of the recurrent sweep at a fraction of the
cost.
"""

import argparse

import numpy as np
from sklearn.ensemble import HistGradientBoostingRegressor
from sklearn.metrics import r2_score

from ctxengage import bench, synthgen
from ctxengage.pipeline import dataset as ds


def flat(bundle, seqs, cols, ctx_cols):
    idx = np.where(seqs.beh_idx >= 0, seqs.beh_idx, 0)
    x = bundle.features[idx][:, :, cols] * (seqs.beh_idx >= 0)[:, :, None]
    parts = [x.reshape(len(x), -1)]
    if len(ctx_cols):
        parts.append(bundle.features[seqs.focal_rows][:, ctx_cols])
    return np.hstack(parts), bundle.target[seqs.focal_rows]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--users", type=int, default=600)
    ap.add_argument("--days", type=int, default=30)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--lengths", default="1,5,10,25,50")
    ap.add_argument("--bias-sd", type=float, default=None)
    ap.add_argument("--mood-sd", type=float, default=None)
    ap.add_argument("--cell", type=float, default=None, help="planted mobile-connectivity coefficient")
    ap.add_argument("--n-focal", type=int, default=8000)
    args = ap.parse_args()

    kw = {}
    if args.bias_sd is not None:
        kw["bias_sd"] = args.bias_sd
    if args.mood_sd is not None:
        kw["mood_sd"] = args.mood_sd
    sc = synthgen.SynthConfig(n_users=args.users, span_days=args.days, seed=args.seed, **kw)
    if args.cell is not None:
        sc.coefficients["cell"] = args.cell
    cohort = synthgen.generate_cohort(sc.n_users, sc.seed, sc)
    tables = synthgen.generate_context_tables(sc.n_zips, sc.span_days * 24, sc.seed, sc)
    bundle = ds.prepare(synthgen.simulate(cohort, tables, sc.span_days, sc.seed, sc), tables)
    br = bench.feature_brackets(bundle.schema)
    # a compact behavioral summary keeps the flattened width manageable
    beh = np.array([c for c in br["behavioral"].columns
                    if bundle.schema.names[c].startswith("log_") and not bundle.schema.names[c].endswith("_norm")])
    ctx = np.array([c for b in bench.CONTEXT_BRACKETS for c in br[b].columns])
    for with_ctx in (False, True):
        r2 = {}
        for L in (int(x) for x in args.lengths.split(",")):
            tr = ds.build_sequences(bundle, "train", L, False, args.n_focal, 0)
            te = ds.build_sequences(bundle, "test", L, False, args.n_focal // 2, 0)
            Xtr, ytr = flat(bundle, tr, beh, ctx if with_ctx else [])
            Xte, yte = flat(bundle, te, beh, ctx if with_ctx else [])
            m = HistGradientBoostingRegressor(max_iter=200, random_state=0).fit(Xtr, ytr)
            r2[L] = r2_score(yte, m.predict(Xte))
        top = max(r2.values())
        label = "behavior + context t0" if with_ctx else "behavior only"
        print(label + ": " + "  ".join(f"L{L}={v:.3f} ({v / top:.2f})" for L, v in r2.items()))


if __name__ == "__main__":
    main()
