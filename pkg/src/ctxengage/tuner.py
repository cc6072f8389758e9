"""Bayesian optimization over a discrete network search space.

Proposals start with a few uniform-random configurations; afterwards a
random-forest surrogate (mean and spread across trees) scores every untried
configuration by expected improvement over the best observed objective.
"""

from __future__ import annotations

import functools
import inspect
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm
from sklearn.ensemble import RandomForestRegressor

DIMS = (32, 64, 128, 256)
TOP_DIMS = (32, 64, 128)
DROPOUTS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
LEARNING_RATES = (0.01, 0.001, 0.0001)
AXES = ("layer_dims", "top_dim", "dropout", "recurrent_dropout", "learning_rate")


class SpaceExhausted(Exception):
    """Every configuration of the space has been tried or is pending."""


def config_key(config: dict) -> str:
    """Canonical JSON for a configuration (so 0 and 0.0 compare equal)."""
    c = {}
    for k, v in config.items():
        if k == "layer_dims":
            v = [int(d) for d in v]
        elif k in ("dropout", "recurrent_dropout", "learning_rate"):
            v = float(v)
        elif k == "top_dim":
            v = int(v)
        c[k] = v
    return json.dumps(c, sort_keys=True)


def _tapered(dims, depth, taper):
    dims = sorted(dims, reverse=True)
    if taper == "halving":
        # widest first layer that halves down to the smallest width
        lo = dims[-1]
        out = []
        for d in dims:
            arch = tuple(d // 2 ** k for k in range(depth))
            if arch[-1] == lo and all(a in dims for a in arch):
                out.append(arch)
        return out
    return [tuple(c) for c in itertools.combinations_with_replacement(dims, depth)]


@dataclass(frozen=True)
class SearchSpace:
    """Discrete grid of network hyperparameters.

    ``taper="nonincreasing"`` admits every non-increasing width sequence;
    ``taper="halving"`` admits only sequences that halve down to the smallest
    width (one architecture per depth).
    """

    depths: tuple = (1, 2, 3, 4)
    dims: tuple = DIMS
    top_dims: tuple = TOP_DIMS
    dropouts: tuple = DROPOUTS
    recurrent_dropouts: tuple = DROPOUTS
    learning_rates: tuple = LEARNING_RATES
    taper: str = "nonincreasing"

    def __post_init__(self):
        if self.taper not in ("nonincreasing", "halving"):
            raise ValueError(f"unknown taper {self.taper!r}")
        for name in ("depths", "dims", "top_dims", "dropouts", "recurrent_dropouts", "learning_rates"):
            v = tuple(getattr(self, name))
            if not v:
                raise ValueError(f"axis {name} is empty")
            object.__setattr__(self, name, v)

    def architectures(self) -> list:
        return [a for d in self.depths for a in _tapered(self.dims, d, self.taper)]

    def configs(self) -> list:
        """All configurations, in a fixed enumeration order."""
        return [dict(c) for c in _enumerate(self)]

    def _configs(self) -> list:
        out = []
        for arch, top, dr, rd, lr in itertools.product(self.architectures(), self.top_dims, self.dropouts,
                                                       self.recurrent_dropouts, self.learning_rates):
            out.append({"layer_dims": arch, "top_dim": top, "dropout": dr,
                        "recurrent_dropout": rd, "learning_rate": lr})
        return out

    @property
    def size(self) -> int:
        return len(self.architectures()) * len(self.top_dims) * len(self.dropouts) * \
            len(self.recurrent_dropouts) * len(self.learning_rates)

    def contains(self, config: dict) -> bool:
        arch = tuple(config["layer_dims"])
        return (arch in self.architectures() and config["top_dim"] in self.top_dims
                and config["dropout"] in self.dropouts and config["recurrent_dropout"] in self.recurrent_dropouts
                and config["learning_rate"] in self.learning_rates)

    def encode(self, configs) -> np.ndarray:
        """One-hot encoding of every axis (layer widths per depth position)."""
        max_depth = max(self.depths)
        width_levels = list(self.dims) + [0]
        cols = []
        for c in configs:
            arch = tuple(c["layer_dims"])
            row = [float(len(arch) == d) for d in self.depths]
            for pos in range(max_depth):
                w = arch[pos] if pos < len(arch) else 0
                row += [float(w == lv) for lv in width_levels]
            row += [float(c["top_dim"] == v) for v in self.top_dims]
            row += [float(c["dropout"] == v) for v in self.dropouts]
            row += [float(c["recurrent_dropout"] == v) for v in self.recurrent_dropouts]
            row += [float(c["learning_rate"] == v) for v in self.learning_rates]
            cols.append(row)
        return np.asarray(cols, dtype=np.float64)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@functools.lru_cache(maxsize=16)
def _enumerate(space: SearchSpace) -> tuple:
    return tuple(space._configs())


@functools.lru_cache(maxsize=16)
def _grid(space: SearchSpace):
    configs = _enumerate(space)
    keys = [config_key(c) for c in configs]
    return configs, keys, space.encode(configs)


def full_space(kind: str = "recurrent") -> SearchSpace:
    """The full grid; dense networks have no recurrent dropout axis."""
    if kind == "dense":
        return SearchSpace(recurrent_dropouts=(0.0,))
    return SearchSpace()


@dataclass
class Trial:
    index: int
    config: dict
    objective: float
    status: str = "ok"  # ok | failed
    seed: int = 0
    wall_time: float = 0.0
    started: float = 0.0
    finished: float = 0.0
    error: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["config"] = json.loads(config_key(self.config))
        d["objective"] = None if not math.isfinite(self.objective) else self.objective
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Trial":
        d = json.loads(line)
        d["config"]["layer_dims"] = tuple(d["config"]["layer_dims"])
        d["objective"] = math.inf if d["objective"] is None else float(d["objective"])
        return cls(**d)


def _surrogate_targets(history) -> tuple[list, np.ndarray]:
    finite = [t.objective for t in history if math.isfinite(t.objective)]
    worst = max(finite) if finite else 1.0
    penalty = abs(worst) * 1.5 if worst != 0 else 1.0
    ys = [t.objective if math.isfinite(t.objective) else penalty for t in history]
    return [t.config for t in history], np.asarray(ys, dtype=np.float64)


def expected_improvement(mu, sigma, best, xi: float = 0.0):
    """EI for minimization; reduces to max(best - mu, 0) where sigma = 0."""
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    imp = best - mu - xi
    out = np.maximum(imp, 0.0)
    pos = sigma > 1e-12
    z = imp[pos] / sigma[pos]
    out[pos] = imp[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
    return out


def propose_next(history, space: SearchSpace, seed: int = 0, n_init: int = 3, pending=(),
                 n_trees: int = 50, max_depth: int = 8) -> dict:
    """Next configuration to evaluate.

    The first ``n_init`` proposals are uniform over untried configurations;
    later ones maximize expected improvement under the forest surrogate.
    Raises ``SpaceExhausted`` once nothing untried remains.
    """
    configs, keys, enc = _grid(space)
    seen = {config_key(t.config) for t in history} | {config_key(c) for c in pending}
    free = [i for i, k in enumerate(keys) if k not in seen]
    untried = [dict(configs[i]) for i in free]
    if not untried:
        raise SpaceExhausted(f"all {len(configs)} configurations tried")
    rng = np.random.default_rng([seed, len(history) + len(pending)])
    if len(history) + len(pending) < n_init or len(history) < 2:
        return untried[int(rng.integers(len(untried)))]
    X_cfg, y = _surrogate_targets(history)
    rf = RandomForestRegressor(n_estimators=n_trees, max_depth=max_depth, random_state=int(rng.integers(2**31)),
                               n_jobs=1)
    rf.fit(space.encode(X_cfg), y)
    Xu = enc[free]
    per_tree = np.stack([t.predict(Xu) for t in rf.estimators_])
    mu, sigma = per_tree.mean(axis=0), per_tree.std(axis=0)
    ei = expected_improvement(mu, sigma, float(y.min()))
    # ties (e.g. all-zero EI) fall back to the lowest predicted objective
    order = np.lexsort((np.arange(len(untried)), mu, -ei))
    return untried[int(order[0])]


def load_history(path) -> list:
    p = Path(path)
    if not p.exists():
        return []
    return [Trial.from_json(line) for line in p.read_text().splitlines() if line.strip()]


def _call(train_fn, config, seed):
    try:
        params = inspect.signature(train_fn).parameters
        takes_seed = "seed" in params or len(params) >= 2
    except (TypeError, ValueError):
        takes_seed = False
    return train_fn(config, seed) if takes_seed else train_fn(config)


def _evaluate(train_fn, config, index, seed) -> Trial:
    started = time.time()
    t0 = time.perf_counter()
    try:
        obj = float(_call(train_fn, config, seed))
        status, err = ("ok", "") if math.isfinite(obj) else ("failed", "non-finite objective")
        if status == "failed":
            obj = math.inf
    except (ArithmeticError, RuntimeError, FloatingPointError) as e:
        obj, status, err = math.inf, "failed", f"{type(e).__name__}: {e}"
    return Trial(index, config, obj, status, seed, time.perf_counter() - t0, started, time.time(), err)


def best_trial(history) -> Trial:
    """Lowest objective; ties go to the earlier trial."""
    return min(history, key=lambda t: (t.objective, t.index))


def run_search(space: SearchSpace, train_fn, n_init: int = 3, n_iter: int = 100, seed: int = 0,
               history_path=None, n_jobs: int = 1, log=None):
    """Evaluate up to ``n_iter`` configurations (never more than the space holds).

    ``train_fn(config)`` or ``train_fn(config, seed)`` returns the validation
    RMSE.  Divergent trials are kept as failed with objective +inf.  With
    ``history_path`` every trial is appended as one JSON line and an existing
    file resumes the search.  ``n_jobs > 1`` evaluates batches of proposals
    concurrently (pending ones are excluded from proposals).
    """
    history = load_history(history_path) if history_path else []
    budget = min(n_iter, space.size)
    fh = open(history_path, "a") if history_path else None
    try:
        while len(history) < budget:
            k = min(max(1, n_jobs), budget - len(history))
            batch = []
            for _ in range(k):
                try:
                    batch.append(propose_next(history, space, seed, n_init, pending=batch))
                except SpaceExhausted:
                    break
            if not batch:
                break
            seeds = [int(np.random.SeedSequence([seed, len(history) + j]).generate_state(1)[0]) for j in range(len(batch))]
            idx = [len(history) + j for j in range(len(batch))]
            if n_jobs > 1 and len(batch) > 1:
                from joblib import Parallel, delayed
                trials = Parallel(n_jobs=n_jobs)(delayed(_evaluate)(train_fn, c, i, s)
                                                 for c, i, s in zip(batch, idx, seeds))
            else:
                trials = [_evaluate(train_fn, c, i, s) for c, i, s in zip(batch, idx, seeds)]
            for t in trials:
                history.append(t)
                if fh:
                    fh.write(t.to_json() + "\n")
                    fh.flush()
                if log:
                    log(t)
    finally:
        if fh:
            fh.close()
    if not history:
        raise SpaceExhausted("no trials were run")
    return best_trial(history), history


# ---------------------------------------------------------------------------
# benchmark surface


def benchmark_space() -> SearchSpace:
    """288 configurations: 4 halving architectures x 3 top x 3 lr x 4 dropout x 2 recurrent dropout."""
    return SearchSpace(depths=(1, 2, 3, 4), dims=DIMS, top_dims=TOP_DIMS, dropouts=(0.0, 0.2, 0.4, 0.6),
                       recurrent_dropouts=(0.0, 0.6), learning_rates=LEARNING_RATES, taper="halving")


def benchmark_surface(seed: int = 0) -> dict:
    """Lookup table config_key -> validation RMSE for ``benchmark_space()``.

    A smooth response (learning-rate valley whose optimum shifts with depth,
    dropout trade-offs, mild width effect) plus small deterministic noise.
    """
    rng = np.random.default_rng(seed)
    table = {}
    for c in benchmark_space().configs():
        depth = len(c["layer_dims"])
        llr = math.log10(c["learning_rate"])
        lr_opt = -3.0 + 0.35 * (depth - 2.5)
        v = 0.60
        v += 0.030 * (llr - lr_opt) ** 2
        v += 0.020 * (c["dropout"] - 0.2) ** 2 / 0.16 + 0.010 * c["dropout"] * (depth - 1)
        v += 0.012 * (c["recurrent_dropout"] == 0.0) * (1 + 0.5 * (depth > 2))
        v += 0.006 * abs(math.log2(c["top_dim"] / 64))
        v -= 0.008 * math.log2(c["layer_dims"][0] / 32) / 3
        table[config_key(c)] = v + float(rng.normal(0, 0.004))
    return table
