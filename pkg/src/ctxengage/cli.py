"""Command-line entry point: datagen, prepare, run {train,tune,ablate,sweep,cross,explain}, plot.

Every command resolves one configuration, writes it next to its outputs, and
emits a manifest with hashes and stage wall times.  Outputs of a stage are
written to ``<stage>.partial`` and renamed when the stage succeeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, bench, explain, nnet, plots, synthgen, tuner
from . import config as cfgmod
from .config import ConfigError
from .pipeline import dataset as ds
from .pipeline.features import discrepancy_note
from .pipeline.sessionize import EnrichmentError, InvalidInputError
from .schema import BRACKETS, CONNECTIVITY_FIELD, SCHEMA_VERSION

log = logging.getLogger("ctxengage")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4, 5


class InvariantError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run directory helpers


def run_dir(cfg: cfgmod.RunConfig) -> Path:
    if cfg.output.dir:
        return Path(cfg.output.dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(cfg.output.root) / f"{stamp}-{cfgmod.config_hash(cfg)[:8]}"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Collects outputs in ``<name>.partial`` and publishes them on success."""

    def __init__(self, root: Path, name: str):
        self.final = root / name
        self.tmp = root / f"{name}.partial"

    def __enter__(self) -> Path:
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if self.final.exists():
                shutil.rmtree(self.final)
            self.tmp.rename(self.final)
        return False


class Timer:
    def __init__(self):
        self.times = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        yield
        self.times[name] = round(time.perf_counter() - t0, 3)


def write_manifest(root: Path, command: str, cfg, inputs, outputs, timer: Timer, extra=None) -> None:
    man = {
        "tool": "ctxengage",
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": cfgmod.config_hash(cfg),
        "inputs": {str(Path(p).relative_to(root)): file_hash(p) for p in sorted(inputs)},
        "outputs": {str(Path(p).relative_to(root)): file_hash(p) for p in sorted(outputs)},
        "wall_times": timer.times,
    }
    if extra:
        man.update(extra)
    d = root / "manifests"
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{command}.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def write_resolved(root: Path, cfg) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.resolved.txt").write_text(cfgmod.dump(cfg))


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _n(v: int):
    return None if v <= 0 else v


def synth_config(cfg) -> synthgen.SynthConfig:
    s = cfg.synthgen
    return synthgen.SynthConfig(n_users=s.users, span_days=s.days, n_zips=s.zips, seed=s.seed, mood_ar=s.mood_ar,
                                mood_sd=s.mood_sd, bias_sd=s.bias_sd, context_carry=s.context_carry,
                                carry_decay=s.carry_decay, coefficients=dict(s.coef),
                                missingness_rate=s.missingness_rate, contamination=s.contamination)


def pipeline_config(cfg) -> ds.PipelineConfig:
    p = cfg.pipeline
    return ds.PipelineConfig(split_fractions=tuple(p.split_fractions), split_seed=p.split_seed,
                             trim_quantile=p.trim_quantile, ratio_eps=p.ratio_eps, target_eps=p.target_eps,
                             extended_schema=p.extended_schema)


def bench_config(cfg, jobs: int = 1) -> bench.BenchConfig:
    t = cfg.training
    return bench.BenchConfig(n_train=_n(t.n_train), n_val=_n(t.n_val), n_test=_n(t.n_test), data_seed=t.data_seed,
                             batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience,
                             hpo_max_epochs=cfg.tuner.max_epochs, hpo_n_init=cfg.tuner.n_init,
                             preset=cfg.bench.preset,
                             include_momentary_context=cfg.pipeline.include_momentary_context, n_jobs=jobs)


# ---------------------------------------------------------------------------
# commands


def cmd_datagen(cfg, root: Path, jobs: int = 1) -> dict:
    timer = Timer()
    sc = synth_config(cfg)
    with Stage(root, "data") as out:
        with timer("cohort"):
            cohort = synthgen.generate_cohort(sc.n_users, sc.seed, sc)
        with timer("context_tables"):
            tables = synthgen.generate_context_tables(sc.n_zips, sc.span_days * 24, sc.seed, sc)
        with timer("simulate"):
            log_ = synthgen.simulate(cohort, tables, sc.span_days, sc.seed, sc, n_jobs=jobs)
        with timer("write"):
            synthgen.write_event_log(log_, out / "events.csv")
            synthgen.write_tables(tables, out / "weather.csv", out / "census.csv")
    files = [root / "data" / f for f in ("events.csv", "weather.csv", "census.csv")]
    write_manifest(root, "datagen", cfg, [], files, timer,
                   {"rows": {"events": len(log_), "weather": len(tables.weather), "census": len(tables.census)}})
    print(f"events: {len(log_)} rows\nweather: {len(tables.weather)} rows\ncensus: {len(tables.census)} rows")
    return {"events": len(log_)}


def load_bundle(root: Path) -> ds.FeatureMatrixBundle:
    return ds.read_bundle(_need(root / "prepared" / "bundle.ctxb", "prepared bundle (run `prepare` first)"))


def cmd_prepare(cfg, root: Path) -> dict:
    timer = Timer()
    data = root / "data"
    ev = _need(data / "events.csv", "event log")
    we = _need(data / "weather.csv", "weather table")
    ce = _need(data / "census.csv", "census table")
    with timer("read"):
        log_ = synthgen.read_event_log(ev)
        tables = synthgen.read_tables(we, ce)
    with timer("prepare"):
        bundle = ds.prepare(log_, tables, pipeline_config(cfg))
    try:
        bundle.schema.validate(extended=cfg.pipeline.extended_schema)
    except (AssertionError, ValueError) as e:
        raise InvariantError(f"schema check failed: {e}") from e
    counts = bundle.schema.counts()
    with Stage(root, "prepared") as out:
        with timer("write"):
            ds.write_bundle(bundle, out / "bundle.ctxb")
            manifest = {"counts": counts, "note": discrepancy_note(bundle.schema),
                        "fingerprint": bundle.fingerprint(), "schema_fingerprint": bundle.schema.fingerprint(),
                        "splits": {s: int(len(bundle.rows(s))) for s in ds.SPLITS},
                        "columns": [{"name": n, "bracket": b, "kind": k} for n, b, k in bundle.schema.columns]}
            (out / "schema.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    outs = [root / "prepared" / "bundle.ctxb", root / "prepared" / "schema.json"]
    write_manifest(root, "prepare", cfg, [ev, we, ce], outs, timer, {"counts": counts})
    for b in BRACKETS:
        print(f"{b}: {counts[b]}")
    print(f"total: {counts['total']}")
    print(discrepancy_note(bundle.schema))
    return counts


def _train_one(cfg, root, jobs):
    t = cfg.training
    bcfg = bench_config(cfg, jobs)
    bundle = load_bundle(root)
    data = bench.DataCache(bundle, bcfg)
    plan = bench.model_plan(t.model, seq_len=cfg.pipeline.max_len, repetitions=1, hpo_budget=0)
    hp = bench.preset_hparams(t.model, plan.architecture, bcfg.preset)
    tr, va, te = data.splits(plan.brackets, plan.seq_len, plan.architecture)
    spec = bench._spec(hp, plan.architecture, bcfg, t.seed)
    spec = replace(spec, clip_norm=t.clip_norm, beta1=t.beta1, beta2=t.beta2, adam_eps=t.adam_eps)
    model = nnet.train(spec, tr, va, fingerprint=bundle.fingerprint())
    return model, nnet.evaluate(model, te), plan


def cmd_run(cfg, root: Path, sub: str, jobs: int = 1) -> None:
    timer = Timer()
    bundle_path = root / "prepared" / "bundle.ctxb"
    inputs = [bundle_path] if bundle_path.exists() else []
    outs = []
    bcfg = bench_config(cfg, jobs)
    b = cfg.bench
    name = {"train": "train", "tune": "tune", "ablate": "reports", "sweep": "sweep", "cross": "cross",
            "explain": "explain"}[sub]
    if sub == "explain":
        _check_explain(cfg, root)
    with Stage(root, name) as out:
        if sub == "train":
            with timer("train"):
                model, m, plan = _train_one(cfg, root, jobs)
            nnet.save_checkpoint(model, out / f"model{plan.model_id}.ckpt")
            (out / "metrics.json").write_text(json.dumps(
                {"model": plan.model_id, "r2": m.r2, "rmse": m.rmse, "n": m.n, "best_epoch": model.best_epoch,
                 "trace": model.trace, "spec": model.spec.to_dict()}, indent=2, sort_keys=True) + "\n")
            print(f"model {plan.model_id}: r2={m.r2:.4f} rmse={m.rmse:.4f} best_epoch={model.best_epoch}")
        elif sub == "tune":
            bundle = load_bundle(root)
            plan = bench.model_plan(cfg.training.model, seq_len=cfg.pipeline.max_len, repetitions=1,
                                    hpo_budget=max(1, cfg.tuner.budget), seed=b.seed)
            with timer("tune"):
                best, history = bench.tune_plan(plan, bench.DataCache(bundle, bcfg), out / "history.jsonl")
            (out / "best.json").write_text(json.dumps({"model": plan.model_id, "config": json.loads(
                tuner.config_key(best)), "trials": len(history)}, indent=2, sort_keys=True) + "\n")
            print(f"best configuration: {tuner.config_key(best)}")
        elif sub in ("ablate", "cross"):
            bundle = load_bundle(root)
            ids = b.models if sub == "ablate" else b.cross_models
            plans = [bench.model_plan(m, seq_len=cfg.pipeline.max_len, repetitions=b.repetitions,
                                      hpo_budget=cfg.tuner.budget) for m in ids]
            with timer(sub):
                rep = bench.run_model_suite(plans, bundle, b.seed, bcfg, out_dir=out)
            bench.write_report(rep, out, "report")
            print(rep.summary.to_string(index=False))
        elif sub == "sweep":
            bundle = load_bundle(root)
            frames = []
            with timer("sweep"):
                for ch in b.channels:
                    frames.append(bench.sweep_sequence_length(b.lengths, ch, bundle, b.seed, bcfg, b.repetitions))
            df = pd.concat(frames, ignore_index=True)
            bench.write_sweep(df, out)
            print(df.drop(columns=["r2_values"]).to_string(index=False))
        elif sub == "explain":
            with timer("explain"):
                run_explain(cfg, root, out, bcfg)
        outs = sorted(p for p in out.rglob("*") if p.is_file())
    outs = [root / name / p.relative_to(root / f"{name}.partial") for p in outs]
    write_manifest(root, f"run-{sub}", cfg, inputs, outs, timer)


def _check_explain(cfg, root: Path) -> None:
    e = cfg.explain
    if e.mode == "exact":
        bundle = load_bundle(root)
        groups = _explain_groups(bundle.schema)
        if len(groups) > explain.MAX_EXACT:
            raise explain.ShapSizeError(
                f"exact Shapley enumeration supports at most {explain.MAX_EXACT} feature groups but the "
                f"manifest yields {len(groups)}; set explain.mode=sampled")


def _explain_groups(schema, names=None):
    """Every column is its own group except the weather-label one-hot family and the location family."""
    group_of = {}
    for n, bracket, kind in schema.columns:
        if bracket == "weather" and kind == "onehot":
            group_of[n] = "weather_label"
        elif bracket == "location":
            group_of[n] = "location"
    return explain.Groups.from_map(schema.names if names is None else names, group_of)


def run_explain(cfg, root: Path, out: Path, bcfg) -> None:
    """Train the cross-sectional context model and attribute its test predictions."""
    e = cfg.explain
    bundle = load_bundle(root)
    data = bench.DataCache(bundle, bcfg)
    plan = bench.model_plan(e.model if e.model in (8, 9) else 9, repetitions=1, hpo_budget=0)
    tr, va, te = data.splits(plan.brackets, 1, "dense")
    spec = bench._spec(bench.preset_hparams(plan.model_id, "dense", bcfg.preset), "dense", bcfg, e.seed)
    model = nnet.train(spec, tr, va)
    Xtr, _ = tr.arrays()
    Xte, _ = te.arrays()
    names = tr.design.names
    conn = names.index(CONNECTIVITY_FIELD) if CONNECTIVITY_FIELD in names else None
    strata = (Xtr[:, conn] >= 0.5) if conn is not None else np.zeros(len(Xtr))
    bg = Xtr[explain.stratified_background(Xtr, strata, e.background, e.seed)]
    n = min(e.n_samples, len(Xte))
    pick = np.sort(np.random.default_rng(e.seed).choice(len(Xte), n, replace=False))
    X = Xte[pick]
    groups = _explain_groups(bundle.schema, names)
    net = model.network
    sc = explain.ShapConfig(bg, e.n_permutations, e.mode, groups, e.seed)
    res = explain.shap_values(lambda Z: net.predict(Z.astype(np.float32)), X, sc)
    fmt = dict(index=False, float_format="%.6f", lineterminator="\n")
    res.to_frame().to_csv(out / "shap_values.csv", **fmt)
    imp = explain.importance_summary(res)
    imp.to_csv(out / "importance.csv", **fmt)
    corr = explain.value_shap_correlations(res, X, te.target[pick], names, groups)
    corr.to_csv(out / "correlations.csv", **fmt)
    plots.plot_importance(imp, out / "importance.svg")
    print(imp.head(10).to_string(index=False))


def cmd_plot(cfg, root: Path) -> list:
    timer = Timer()
    made, inputs = [], []
    with Stage(root, "figures") as out:
        with timer("plot"):
            rep = root / "reports" / "report.csv"
            if rep.exists():
                df = plots.read_table(rep, {"model": "int", "r2_mean": "float", "r2_std": "float"})
                plots.plot_models(df, out / "models.svg")
                made.append("models.svg")
                inputs.append(rep)
            cross = root / "cross" / "report.csv"
            if cross.exists():
                df = plots.read_table(cross, {"model": "int", "r2_mean": "float", "r2_std": "float"})
                plots.plot_models(df, out / "cross.svg")
                made.append("cross.svg")
                inputs.append(cross)
            sw = root / "sweep" / "sweep.csv"
            if sw.exists():
                df = plots.read_table(sw, {"channel": "str", "length": "int", "mean_r2": "float", "std": "float"})
                if len(df) == 0:
                    raise plots.CSVParseError(f"{sw}: sweep has no rows")
                plots.plot_sweep(df, out / "sweep.svg")
                made.append("sweep.svg")
                inputs.append(sw)
            imp = root / "explain" / "importance.csv"
            if imp.exists():
                df = plots.read_table(imp, {"group": "str", "mean_abs_shap": "float"})
                plots.plot_importance(df, out / "importance.svg")
                made.append("importance.svg")
                inputs.append(imp)
        if not made:
            raise FileNotFoundError(f"no reports found under {root}")
    write_manifest(root, "plot", cfg, inputs, [root / "figures" / m for m in made], timer)
    for m in made:
        print(f"figures/{m}")
    return made


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxengage", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"ctxengage {__version__}")

    def common(p):
        p.add_argument("-c", "--config", help="flat section.key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a key")
        p.add_argument("--run-dir", help="run directory (default: output.dir or a timestamped directory)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes where stages allow it")
        p.add_argument("--deterministic", action="store_true", help="force sequential execution")
        p.add_argument("--paper-scale", action="store_true", help="use the full-scale preset")
        p.add_argument("-v", "--verbose", action="store_true")

    sub = ap.add_subparsers(dest="command", required=True)
    common(sub.add_parser("datagen", help="generate synthetic event log and context tables"))
    common(sub.add_parser("prepare", help="build the feature bundle"))
    r = sub.add_parser("run", help="train / tune / ablate / sweep / cross / explain")
    r.add_argument("what", choices=["train", "tune", "ablate", "sweep", "cross", "explain"])
    common(r)
    common(sub.add_parser("plot", help="render SVG figures from reports"))
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.set, args.paper_scale)
        if args.run_dir:
            cfg.output.dir = args.run_dir
        jobs = 1 if args.deterministic else max(1, args.jobs)
        root = run_dir(cfg)
        write_resolved(root, cfg)
        if args.command == "datagen":
            cmd_datagen(cfg, root, jobs)
        elif args.command == "prepare":
            cmd_prepare(cfg, root)
        elif args.command == "run":
            cmd_run(cfg, root, args.what, jobs)
        elif args.command == "plot":
            cmd_plot(cfg, root)
        print(f"run directory: {root}")
        return EXIT_OK
    except (ConfigError, bench.PlanError, explain.ShapSizeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantError, InvalidInputError, EnrichmentError, nnet.ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (nnet.DivergenceError, FloatingPointError) as e:
        print(f"error: numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, plots.CSVParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
