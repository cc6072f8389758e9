"""Shapley-value attributions for tabular model inputs.

The value of a coalition ``S`` is the mean model output over background rows
whose ``S`` columns are replaced by the explained sample (interventional
replacement).  ``exact_shap`` enumerates every coalition; ``sampled_shap``
averages marginal contributions along random permutations, each used forward
and reversed with the same background row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

MAX_EXACT = 15


class ShapSizeError(ValueError):
    pass


@dataclass
class Groups:
    """Columns partitioned into named atomic groups."""

    names: list
    members: list  # list of int arrays (column indices)

    @classmethod
    def singletons(cls, n_features: int, names=None) -> "Groups":
        names = list(names) if names is not None else [f"x{j}" for j in range(n_features)]
        return cls(names, [np.array([j]) for j in range(n_features)])

    @classmethod
    def from_map(cls, columns, group_of: dict | None = None) -> "Groups":
        """Groups from column names; ``group_of`` maps a column to its group (default: itself)."""
        group_of = group_of or {}
        order, members = [], {}
        for j, c in enumerate(columns):
            g = group_of.get(c, c)
            if g not in members:
                order.append(g)
                members[g] = []
            members[g].append(j)
        return cls(order, [np.array(members[g]) for g in order])

    def __len__(self):
        return len(self.names)

    def column_mask(self, n_features: int) -> np.ndarray:
        """(n_groups, n_features) 0/1 membership matrix."""
        m = np.zeros((len(self), n_features), dtype=bool)
        for g, cols in enumerate(self.members):
            m[g, cols] = True
        return m


@dataclass
class ShapConfig:
    background: np.ndarray
    n_permutations: int = 500
    mode: str = "sampled"
    groups: Groups | None = None
    seed: int = 0
    chunk_rows: int = 200_000


@dataclass
class ShapResult:
    values: np.ndarray  # (n_samples, n_groups)
    base_value: float
    group_names: list
    predictions: np.ndarray  # f(x) per sample
    std_errors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def mean_abs(self) -> np.ndarray:
        return np.abs(self.values).mean(axis=0)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=self.group_names)
        df.insert(0, "sample", np.arange(len(df)))
        return df


def _evaluate(model_fn, rows: np.ndarray, chunk: int) -> np.ndarray:
    out = np.empty(len(rows), dtype=np.float64)
    for s in range(0, len(rows), chunk):
        out[s:s + chunk] = np.asarray(model_fn(rows[s:s + chunk]), dtype=np.float64).reshape(-1)
    return out


def _shapley_weights(d: int) -> np.ndarray:
    """w[k] = k!(d-k-1)!/d! for coalitions of size k not containing the feature."""
    return np.array([math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d) for k in range(d)])


def exact_shap(model_fn, x, background, groups: Groups | None = None, chunk_rows: int = 200_000) -> ShapResult:
    """Shapley values of one sample by enumerating all 2^d group coalitions."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if len(bg) == 0:
        raise ValueError("background must be non-empty")
    F = len(x)
    groups = groups or Groups.singletons(F)
    d = len(groups)
    if d > MAX_EXACT:
        raise ShapSizeError(f"exact enumeration needs at most {MAX_EXACT} feature groups, got {d}; "
                            "use sampled mode (mode='sampled') instead")
    gmask = groups.column_mask(F)
    n_coal = 1 << d
    bits = (np.arange(n_coal)[:, None] >> np.arange(d)[None, :]) & 1  # (2^d, d)
    colmask = (bits.astype(np.float64) @ gmask) > 0  # (2^d, F)
    rows = np.where(colmask[:, None, :], x[None, None, :], bg[None, :, :]).reshape(-1, F)
    v = _evaluate(model_fn, rows, chunk_rows).reshape(n_coal, len(bg)).mean(axis=1)
    sizes = bits.sum(axis=1)
    w = _shapley_weights(d)
    phi = np.zeros(d)
    for g in range(d):
        without = np.flatnonzero(bits[:, g] == 0)
        phi[g] = np.sum(w[sizes[without]] * (v[without | (1 << g)] - v[without]))
    return ShapResult(phi[None, :], float(v[0]), list(groups.names), np.array([v[-1]]),
                      meta={"mode": "exact", "background_rows": len(bg)})


def exact_shap_batch(model_fn, X, background, groups: Groups | None = None) -> ShapResult:
    rows = [exact_shap(model_fn, x, background, groups) for x in np.atleast_2d(X)]
    return ShapResult(np.vstack([r.values for r in rows]), rows[0].base_value, rows[0].group_names,
                      np.concatenate([r.predictions for r in rows]), meta=rows[0].meta)


def _sampled_one(model_fn, x, bg, gmask, n_perm, rng, chunk_rows):
    d, F = gmask.shape
    perms = np.argsort(rng.random((n_perm, d)), axis=1)
    bg_rows = bg[rng.integers(len(bg), size=n_perm)]
    contrib = np.zeros((2, n_perm, d))
    per_chunk = max(1, chunk_rows // (2 * (d + 1)))
    for s in range(0, n_perm, per_chunk):
        P = perms[s:s + per_chunk]
        R = bg_rows[s:s + per_chunk]
        n = len(P)
        for direction in range(2):
            order = P if direction == 0 else P[:, ::-1]
            # included[p, k, g]: group g among the first k of the ordering
            rank = np.empty_like(order)
            rank[np.arange(n)[:, None], order] = np.arange(d)[None, :]
            included = rank[:, None, :] < np.arange(d + 1)[None, :, None]  # (n, d+1, d)
            cols = (included.astype(np.float64) @ gmask) > 0  # (n, d+1, F)
            rows = np.where(cols, x[None, None, :], R[:, None, :]).reshape(-1, F)
            f = _evaluate(model_fn, rows, chunk_rows).reshape(n, d + 1)
            delta = np.diff(f, axis=1)  # contribution of order[:, k]
            c = np.zeros((n, d))
            c[np.arange(n)[:, None], order] = delta
            contrib[direction, s:s + n] = c
    pair = contrib.mean(axis=0)  # (n_perm, d): antithetic pair means
    est = pair.mean(axis=0)
    se = pair.std(axis=0, ddof=1) / math.sqrt(n_perm) if n_perm > 1 else np.full(d, np.nan)
    return est, se


def sampled_shap(model_fn, samples, config: ShapConfig) -> ShapResult:
    """Permutation-sampling Shapley estimates with antithetic (reversed) pairs.

    ``n_permutations`` counts pairs.  Sample ``i`` draws from its own stream
    ``(seed, i)`` so results do not depend on processing order.  Standard
    errors are computed from the pair means.
    """
    if config.n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    bg = np.atleast_2d(np.asarray(config.background, dtype=np.float64))
    if len(bg) == 0:
        raise ValueError("background must be non-empty")
    F = X.shape[1]
    groups = config.groups or Groups.singletons(F)
    gmask = groups.column_mask(F).astype(np.float64)
    vals, ses = [], []
    for i, x in enumerate(X):
        rng = np.random.default_rng([config.seed, i])
        est, se = _sampled_one(model_fn, x, bg, gmask, config.n_permutations, rng, config.chunk_rows)
        vals.append(est)
        ses.append(se)
    base = float(_evaluate(model_fn, bg, config.chunk_rows).mean())
    preds = _evaluate(model_fn, X, config.chunk_rows)
    return ShapResult(np.vstack(vals), base, list(groups.names), preds, np.vstack(ses),
                      meta={"mode": "sampled", "n_permutations": config.n_permutations,
                            "background_rows": len(bg), "seed": config.seed})


def shap_values(model_fn, samples, config: ShapConfig) -> ShapResult:
    if config.mode == "exact":
        return exact_shap_batch(model_fn, samples, config.background, config.groups)
    if config.mode == "sampled":
        return sampled_shap(model_fn, samples, config)
    raise ValueError(f"unknown mode {config.mode!r}")


def stratified_background(X, strata, size: int = 100, seed: int = 0) -> np.ndarray:
    """Row indices drawn proportionally from each stratum (largest remainder)."""
    strata = np.asarray(strata)
    rng = np.random.default_rng(seed)
    levels, counts = np.unique(strata, return_counts=True)
    size = min(size, len(strata))
    quota = counts / counts.sum() * size
    take = np.floor(quota).astype(int)
    for k in np.argsort(-(quota - take), kind="stable")[: size - take.sum()]:
        take[k] += 1
    idx = [rng.choice(np.flatnonzero(strata == lv), size=t, replace=False) for lv, t in zip(levels, take) if t > 0]
    return np.sort(np.concatenate(idx)) if idx else np.array([], dtype=int)


def importance_summary(result: ShapResult) -> pd.DataFrame:
    """Groups ranked by mean |phi|; ties ordered by name."""
    if result.values.size == 0:
        raise ValueError("empty Shapley result")
    df = pd.DataFrame({"group": result.group_names, "mean_abs_shap": result.mean_abs})
    df = df.sort_values(["mean_abs_shap", "group"], ascending=[False, True], kind="mergesort")
    df.insert(0, "rank", np.arange(1, len(df) + 1))
    return df.reset_index(drop=True)


def _pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else float("nan")


def value_shap_correlations(result: ShapResult, X, targets, columns, groups: Groups | None = None) -> pd.DataFrame:
    """Per column: correlation of its value with its group's phi and with the target.

    Binary 0/1 columns get the point-biserial coefficient (Pearson on the 0/1
    coding).  Constant columns are reported as undefined (NaN).
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 3:
        raise ValueError("need at least 3 samples")
    groups = groups or Groups.singletons(X.shape[1], columns)
    g_of = np.empty(X.shape[1], dtype=int)
    for g, cols in enumerate(groups.members):
        g_of[cols] = g
    rows = []
    for j, name in enumerate(columns):
        v = X[:, j]
        binary = bool(np.isin(np.unique(v), (0.0, 1.0)).all())
        defined = bool(np.ptp(v) > 0)
        rows.append({
            "feature": name,
            "group": groups.names[g_of[j]],
            "r_value_shap": _pearson(v, result.values[:, g_of[j]]) if defined else float("nan"),
            "r_value_target": _pearson(v, targets) if defined else float("nan"),
            "kind": "point_biserial" if binary else "pearson",
            "defined": defined,
        })
    return pd.DataFrame(rows)
