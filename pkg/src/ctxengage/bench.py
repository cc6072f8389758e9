"""Experiment harness: bracket ablation (Models 1-7), sequence-length sweeps,
and cross-sectional dense models (Models 8-9), with repeated runs.

Bracket ablation works by column selection on one prepared bundle.  Each plan
gets its hyperparameters from a fresh search (``hpo_budget > 0``) or from a
preset table, then trains ``repetitions`` networks that differ only in seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import nnet, tuner
from .pipeline import dataset as ds
from .schema import BRACKETS, CONNECTIVITY_FIELD, CONTEXT_BRACKETS

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["model", "architecture", "specification"] + [f"has_{b}" for b in BRACKETS] + \
    ["r2_mean", "r2_std", "paper_anchor"]

# Reference results: (R2 mean, R2 std) per model
REFERENCE_ANCHORS = {1: (0.345, 0.0006), 2: (0.342, 0.003), 3: (0.354, 0.0022), 4: (0.357, 0.0073),
                 5: (0.380, 0.0018), 6: (0.504, 0.0017), 7: (0.522, 0.0038), 8: (0.256, 0.005),
                 9: (0.442, 0.0012)}
SWEEP_ANCHORS = {"behavioral": 0.73, "context": 0.88}  # length-1 share of the maximum

# Hyperparameters chosen by the reference search for each model
REFERENCE_HPARAMS = {
    1: dict(layer_dims=(32,), top_dim=32, dropout=0.0, recurrent_dropout=0.6, learning_rate=1e-3),
    2: dict(layer_dims=(64, 32), top_dim=32, dropout=0.0, recurrent_dropout=0.6, learning_rate=1e-4),
    3: dict(layer_dims=(256, 128, 64, 32), top_dim=64, dropout=0.0, recurrent_dropout=0.6, learning_rate=1e-3),
    4: dict(layer_dims=(128, 64, 32), top_dim=32, dropout=0.0, recurrent_dropout=0.6, learning_rate=1e-2),
    5: dict(layer_dims=(64, 32), top_dim=32, dropout=0.2, recurrent_dropout=0.4, learning_rate=1e-3),
    6: dict(layer_dims=(256, 128, 64, 32), top_dim=32, dropout=0.0, recurrent_dropout=0.6, learning_rate=1e-2),
    7: dict(layer_dims=(128, 64, 32), top_dim=32, dropout=0.0, recurrent_dropout=0.6, learning_rate=1e-3),
    8: dict(layer_dims=(32,), top_dim=64, dropout=0.0, recurrent_dropout=0.0, learning_rate=1e-3),
    9: dict(layer_dims=(64, 32), top_dim=64, dropout=0.0, recurrent_dropout=0.0, learning_rate=1e-3),
}


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureBracket:
    name: str
    columns: tuple

    def __len__(self):
        return len(self.columns)


def feature_brackets(schema) -> dict:
    return {b: FeatureBracket(b, tuple(int(i) for i in schema.indices(b))) for b in BRACKETS}


@dataclass(frozen=True)
class ExperimentPlan:
    model_id: int
    architecture: str  # recurrent | dense
    brackets: tuple
    seq_len: int = 25
    repetitions: int = 5
    hpo_budget: int = 15
    seed: int = 0

    def validate(self) -> None:
        unknown = [b for b in self.brackets if b not in BRACKETS]
        if unknown:
            raise PlanError(f"unknown bracket(s) {unknown}; expected names from {BRACKETS}")
        if "behavioral" not in self.brackets:
            raise PlanError("every plan includes the behavioral bracket")
        if self.architecture not in nnet.KINDS:
            raise PlanError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "dense" and self.seq_len != 1:
            raise PlanError("dense plans use a single time step")
        if self.repetitions < 1 or self.seq_len < 1:
            raise PlanError("repetitions and seq_len must be >= 1")

    @property
    def specification(self) -> str:
        extra = [b for b in self.brackets if b != "behavioral"]
        hist = "t-1" if self.architecture == "dense" else f"history {self.seq_len}"
        ctx = ""
        if extra:
            ctx = " + " + ("all context" if len(extra) == len(CONTEXT_BRACKETS) else " + ".join(extra))
            if self.architecture == "dense":
                ctx += " (t0)"
        return f"behavioral ({hist}){ctx}"


def model_plan(model_id: int, seq_len: int = 25, repetitions: int = 5, hpo_budget: int = 15,
               seed: int = 0) -> ExperimentPlan:
    """The standard plan for Models 1-9."""
    if model_id == 1:
        br = ("behavioral",)
    elif 2 <= model_id <= 6:
        br = ("behavioral", CONTEXT_BRACKETS[model_id - 2])
    elif model_id == 7:
        br = ("behavioral",) + tuple(CONTEXT_BRACKETS)
    elif model_id == 8:
        return ExperimentPlan(8, "dense", ("behavioral",), 1, repetitions, hpo_budget, seed)
    elif model_id == 9:
        return ExperimentPlan(9, "dense", ("behavioral",) + tuple(CONTEXT_BRACKETS), 1, repetitions, hpo_budget, seed)
    else:
        raise PlanError(f"model_id must be in 1..9, got {model_id}")
    return ExperimentPlan(model_id, "recurrent", br, seq_len, repetitions, hpo_budget, seed)


@dataclass(frozen=True)
class BenchConfig:
    """Data sizes and training settings shared by all plans.

    ``n_train``/``n_val``/``n_test`` subsample focal hours per split (None
    keeps all).  With ``hpo_budget = 0`` hyperparameters come from
    ``preset``: "paper" uses the reference table per model, "desk" uses the
    Model 1 setting for every recurrent plan.
    """

    n_train: int | None = 10_000
    n_val: int | None = 2_000
    n_test: int | None = 4_000
    data_seed: int = 0
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    hpo_max_epochs: int = 20
    hpo_n_init: int = 3
    preset: str = "paper"
    include_momentary_context: bool = True
    n_jobs: int = 1


def preset_hparams(model_id: int, architecture: str, preset: str) -> dict:
    if preset == "paper":
        return dict(REFERENCE_HPARAMS[model_id])
    if preset == "desk":
        return dict(REFERENCE_HPARAMS[1 if architecture == "recurrent" else model_id])
    raise PlanError(f"unknown preset {preset!r}")


# ---------------------------------------------------------------------------
# data views


class SequenceData:
    """Batches from a (Design, SequenceSet) pair, materialized on first use."""

    def __init__(self, design: ds.Design, seqs: ds.SequenceSet, flat: bool = False):
        self.design, self.seqs, self.flat = design, seqs, flat
        self._x = self._m = None

    def __len__(self):
        return len(self.seqs)

    @property
    def target(self):
        return self.seqs.target

    def _materialize(self):
        if self._x is None:
            self._x, self._m = self.design.batch(self.seqs)
            if self.flat:
                self._x = self._x[:, -1, :]
        return self._x, self._m

    def batch(self, idx):
        x, m = self._materialize()
        return x[idx], (None if self.flat else m[idx])

    def arrays(self):
        return self._materialize()


class DataCache:
    """Sequence sets and column designs shared across plans on one bundle."""

    def __init__(self, bundle: ds.FeatureMatrixBundle, cfg: BenchConfig):
        self.bundle, self.cfg = bundle, cfg
        self.brackets = feature_brackets(bundle.schema)
        self._seqs = {}

    def columns(self, brackets) -> tuple[np.ndarray, np.ndarray]:
        beh = np.array(self.brackets["behavioral"].columns, dtype=np.int64) if "behavioral" in brackets \
            else np.array([], dtype=np.int64)
        ctx = [c for b in CONTEXT_BRACKETS if b in brackets for c in self.brackets[b].columns]
        return beh, np.array(ctx, dtype=np.int64)

    def sequences(self, split: str, max_len: int, momentary: bool):
        n = {"train": self.cfg.n_train, "validation": self.cfg.n_val, "test": self.cfg.n_test}[split]
        key = (split, max_len, momentary)
        if key not in self._seqs:
            self._seqs[key] = ds.build_sequences(self.bundle, split, max_len, momentary, n, self.cfg.data_seed)
        return self._seqs[key]

    def splits(self, brackets, seq_len: int, architecture: str, beh_cols=None, ctx_cols=None):
        beh, ctx = self.columns(brackets)
        beh = beh if beh_cols is None else beh_cols
        ctx = ctx if ctx_cols is None else ctx_cols
        design = ds.Design.from_bundle(self.bundle, beh, ctx)
        momentary = self.cfg.include_momentary_context or architecture == "dense"
        flat = architecture == "dense"
        return tuple(SequenceData(design, self.sequences(s, seq_len, momentary), flat) for s in ds.SPLITS)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _spec(hp: dict, architecture: str, cfg: BenchConfig, seed: int, max_epochs=None) -> nnet.NetworkSpec:
    return nnet.NetworkSpec(kind=architecture, layer_dims=tuple(hp["layer_dims"]), top_dim=int(hp["top_dim"]),
                            dropout=float(hp["dropout"]),
                            recurrent_dropout=float(hp["recurrent_dropout"]) if architecture == "recurrent" else 0.0,
                            learning_rate=float(hp["learning_rate"]), batch_size=cfg.batch_size,
                            max_epochs=cfg.max_epochs if max_epochs is None else max_epochs,
                            patience=cfg.patience, seed=seed)


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunReport:
    rows: pd.DataFrame  # one row per (model, repetition)
    summary: pd.DataFrame  # reference-table shape, one row per model
    provenance: dict = field(default_factory=dict)


def _train_eval(spec, tr, va, te, fingerprint=""):
    model = nnet.train(spec, tr, va, fingerprint=fingerprint)
    m = nnet.evaluate(model, te)
    return model, m


def tune_plan(plan: ExperimentPlan, data: DataCache, history_path=None):
    """Hyperparameter search for one plan; returns (best config, history)."""
    cfg = data.cfg
    tr, va, _ = data.splits(plan.brackets, plan.seq_len, plan.architecture)
    space = tuner.full_space(plan.architecture)

    def objective(config, seed):
        spec = _spec(config, plan.architecture, cfg, seed, max_epochs=cfg.hpo_max_epochs)
        model = nnet.train(spec, tr, va)
        return min(r["val_rmse"] for r in model.trace)

    best, history = tuner.run_search(space, objective, n_init=cfg.hpo_n_init, n_iter=plan.hpo_budget,
                                     seed=_seed(plan.seed, plan.model_id, 7), history_path=history_path)
    return best.config, history


def run_plan(plan: ExperimentPlan, data: DataCache, out_dir=None) -> tuple[list, dict]:
    plan.validate()
    cfg = data.cfg
    if plan.hpo_budget > 0:
        hist_path = Path(out_dir) / f"hpo_model{plan.model_id}.jsonl" if out_dir else None
        if hist_path and hist_path.exists():
            hist_path.unlink()
        hp, history = tune_plan(plan, data, hist_path)
        source = f"search ({len(history)} trials)"
    else:
        hp, source = preset_hparams(plan.model_id, plan.architecture, cfg.preset), f"preset:{cfg.preset}"
    tr, va, te = data.splits(plan.brackets, plan.seq_len, plan.architecture)
    rows = []
    for rep in range(plan.repetitions):
        seed = _seed(plan.seed, plan.model_id, rep)
        spec = _spec(hp, plan.architecture, cfg, seed)
        model, m = _train_eval(spec, tr, va, te, data.bundle.fingerprint())
        log.info("model %d rep %d: r2=%.4f rmse=%.4f best_epoch=%d", plan.model_id, rep, m.r2, m.rmse,
                 model.best_epoch)
        rows.append({"model": plan.model_id, "repetition": rep, "seed": seed, "r2": m.r2, "rmse": m.rmse,
                     "n_test": m.n, "best_epoch": model.best_epoch, "epochs_run": len(model.trace),
                     "hyperparameters": json.dumps(json.loads(tuner.config_key(hp)), sort_keys=True)})
    return rows, {"hyperparameters": json.loads(tuner.config_key(hp)), "source": source}


def _std(x) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else float("nan")


def summarize(rows: pd.DataFrame, plans) -> pd.DataFrame:
    out = []
    for p in sorted(plans, key=lambda p: p.model_id):
        r2 = rows.loc[rows["model"] == p.model_id, "r2"].to_numpy()
        rec = {"model": p.model_id, "architecture": p.architecture, "specification": p.specification}
        for b in BRACKETS:
            rec[f"has_{b}"] = int(b in p.brackets)
        rec["r2_mean"] = float(r2.mean())
        rec["r2_std"] = _std(r2)
        rec["paper_anchor"] = REFERENCE_ANCHORS[p.model_id][0]
        out.append(rec)
    return pd.DataFrame(out, columns=REPORT_COLUMNS)


def run_model_suite(plans, bundle: ds.FeatureMatrixBundle, seed: int = 0, cfg: BenchConfig | None = None,
                    out_dir=None, data: DataCache | None = None) -> RunReport:
    """Tune, train and evaluate every plan; rows ordered by (model, repetition)."""
    cfg = cfg or BenchConfig()
    plans = [replace(p, seed=seed) for p in plans]
    for p in plans:
        p.validate()
    data = data or DataCache(bundle, cfg)
    all_rows, prov = [], {}

    def one(p):
        return p.model_id, run_plan(p, data, out_dir)

    if cfg.n_jobs > 1 and len(plans) > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=cfg.n_jobs, backend="threading")(delayed(one)(p) for p in plans)
    else:
        results = [one(p) for p in plans]
    for mid, (rows, info) in results:
        all_rows += rows
        prov[str(mid)] = info
    rows = pd.DataFrame(all_rows).sort_values(["model", "repetition"], kind="mergesort").reset_index(drop=True)
    provenance = {
        "seed": seed,
        "bench_config": asdict(cfg),
        "plans": [dict(asdict(p), brackets=list(p.brackets), specification=p.specification) for p in plans],
        "models": prov,
        "pipeline_fingerprint": bundle.fingerprint(),
        "schema_fingerprint": bundle.schema.fingerprint(),
        "optimizer": {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "clip_norm": 5.0},
    }
    return RunReport(rows, summarize(rows, plans), provenance)


def run_cross_sectional(bundle, seed: int = 0, cfg: BenchConfig | None = None, repetitions: int = 5,
                        hpo_budget: int = 0, out_dir=None, data: DataCache | None = None) -> RunReport:
    """Models 8 and 9: dense networks on t-1 behavior, without and with t0 context."""
    plans = [model_plan(m, repetitions=repetitions, hpo_budget=hpo_budget) for m in (8, 9)]
    return run_model_suite(plans, bundle, seed, cfg, out_dir, data)


def sweep_sequence_length(lengths, channel: str, bundle, seed: int = 0, cfg: BenchConfig | None = None,
                          repetitions: int = 5, hparams: dict | None = None,
                          data: DataCache | None = None) -> pd.DataFrame:
    """Mean test R2 per history length for one input channel.

    ``channel="behavioral"`` feeds behavioral columns ending at t-1;
    ``channel="context"`` feeds all context columns ending at t0.  Every
    length uses the same focal hours, the same fixed hyperparameters and the
    same per-repetition seeds (common random numbers), so differences between
    lengths are not swamped by initialization noise.
    """
    lengths = sorted({int(L) for L in lengths})
    if not lengths or lengths[0] < 1:
        raise ValueError("lengths must be non-empty and >= 1")
    if channel not in ("behavioral", "context"):
        raise ValueError(f"channel must be 'behavioral' or 'context', got {channel!r}")
    cfg = cfg or BenchConfig()
    if channel == "context":
        cfg = replace(cfg, include_momentary_context=True)
    data = data if data is not None and data.cfg == cfg else DataCache(bundle, cfg)
    hp = hparams or dict(REFERENCE_HPARAMS[1])
    beh, ctx = data.columns(BRACKETS)
    if channel == "behavioral":
        ctx = ctx[:0]
    else:
        beh = beh[:0]
    # focal sampling ignores max_len, so every length sees the same focal hours
    rows = []
    for L in lengths:
        design = ds.Design.from_bundle(bundle, beh, ctx)
        splits = [SequenceData(design, data.sequences(s, L, True)) for s in ds.SPLITS]
        r2s = []
        for rep in range(repetitions):
            spec = _spec(hp, "recurrent", cfg, _seed(seed, 100, rep))
            _, m = _train_eval(spec, *splits)
            r2s.append(m.r2)
            log.info("sweep %s L=%d rep %d: r2=%.4f", channel, L, rep, m.r2)
        rows.append({"channel": channel, "length": L, "mean_r2": float(np.mean(r2s)), "std": _std(r2s),
                     "n_reps": repetitions, "r2_values": json.dumps([round(v, 10) for v in r2s])})
    df = pd.DataFrame(rows)
    best = df["mean_r2"].max()
    # a share of a non-positive maximum is meaningless
    df["fraction_of_max"] = df["mean_r2"] / best if best > 0 else np.nan
    df["paper_anchor_len1"] = SWEEP_ANCHORS[channel]
    return df[["channel", "length", "mean_r2", "std", "fraction_of_max", "n_reps", "r2_values", "paper_anchor_len1"]]


class ZeroColumns:
    """View of a dense SequenceData whose columns from ``start`` on are zero."""

    def __init__(self, base: SequenceData, start: int):
        self.base, self.start = base, start

    def __len__(self):
        return len(self.base)

    @property
    def target(self):
        return self.base.target

    def batch(self, idx):
        x, m = self.base.batch(idx)
        x = x.copy()
        x[..., self.start:] = 0.0
        return x, m


def zeroed_context_diagnostic(bundle, seed: int = 0, cfg: BenchConfig | None = None, repetitions: int = 3,
                              data: DataCache | None = None) -> dict:
    """Model 9 trained and evaluated with all context columns zeroed, next to Model 8.

    Zeroed columns are constant so the two runs should agree within noise.
    """
    cfg = cfg or BenchConfig()
    data = data or DataCache(bundle, cfg)
    out = {}
    for name, plan in (("model8", model_plan(8)), ("model9_zeroed", model_plan(9))):
        tr, va, te = data.splits(plan.brackets, 1, "dense")
        if name == "model9_zeroed":
            n_beh = len(data.brackets["behavioral"])
            tr, va, te = (ZeroColumns(d, n_beh) for d in (tr, va, te))
        hp = REFERENCE_HPARAMS[8]
        r2 = []
        for rep in range(repetitions):
            _, m = _train_eval(_spec(hp, "dense", cfg, _seed(seed, 8, rep)), tr, va, te)
            r2.append(m.r2)
        out[name] = r2
    return out


# ---------------------------------------------------------------------------
# output


def _fmt(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format="%.6f", lineterminator="\n")


def write_report(report: RunReport, out_dir, name: str = "report") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.csv").write_text(_fmt(report.summary))
    payload = {
        "provenance": report.provenance,
        "summary": json.loads(report.summary.to_json(orient="records", double_precision=10)),
        "rows": json.loads(report.rows.to_json(orient="records", double_precision=10)),
    }
    (out / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_sweep(df: pd.DataFrame, out_dir, name: str = "sweep") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.csv").write_text(_fmt(df))
