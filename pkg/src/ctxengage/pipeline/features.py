"""Feature engineering: trimming, behavioral expansion, target, context encoding, min-max scaling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .. import schema


class ScalerStateError(RuntimeError):
    pass


class EncodingError(ValueError):
    pass


@dataclass
class FeatureSchema:
    """Ordered predictor manifest: ``(name, bracket, kind)`` per column."""

    columns: list = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [c[0] for c in self.columns]

    def counts(self) -> dict[str, int]:
        out = {b: 0 for b in schema.BRACKETS}
        for _, bracket, _ in self.columns:
            out[bracket] += 1
        out["total"] = len(self.columns)
        return out

    def indices(self, bracket: str) -> np.ndarray:
        if bracket not in schema.BRACKETS:
            raise KeyError(f"unknown bracket {bracket!r}")
        return np.array([i for i, c in enumerate(self.columns) if c[1] == bracket], dtype=np.int64)

    def __add__(self, other: "FeatureSchema") -> "FeatureSchema":
        return FeatureSchema(self.columns + other.columns)

    def validate(self, extended: bool = False) -> None:
        names = self.names
        if len(set(names)) != len(names):
            raise AssertionError("duplicate feature names in manifest")
        c = self.counts()
        want = 129 if extended else 127
        if c["behavioral"] != want:
            raise AssertionError(f"behavioral bracket has {c['behavioral']} columns, expected {want}")
        if c["weather"] and c["weather"] != 19:
            raise AssertionError(f"weather bracket has {c['weather']} columns, expected 19")

    def to_json(self) -> dict:
        return {
            "schema_version": schema.SCHEMA_VERSION,
            "columns": [list(c) for c in self.columns],
            "counts": self.counts(),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "FeatureSchema":
        return cls([tuple(c) for c in d["columns"]])

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256("|".join(f"{a}:{b}:{k}" for a, b, k in self.columns).encode()).hexdigest()[:16]


def discrepancy_note(s: FeatureSchema) -> str:
    c = s.counts()
    ctx = c["total"] - c["behavioral"]
    return (f"manifest: {c['total']} predictors ({c['behavioral']} behavioral + {ctx} context); "
            f"the published totals are {schema.PUBLISHED_PREDICTOR_COUNT} predictors / {schema.PUBLISHED_CONTEXT_COUNT} "
            f"context features, but the listed context features add up to "
            f"19 weather + 19 census + 5 temporal + 11 location + 1 connectivity = 55")


# ---------------------------------------------------------------- min-max

@dataclass
class ScalerState:
    """Per-column (min, max) fitted on training rows, plus trim thresholds."""

    names: list = field(default_factory=list)
    mins: np.ndarray | None = None
    maxs: np.ndarray | None = None
    trim_thresholds: dict = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        return self.mins is not None

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "mins": [float(v) for v in self.mins] if self.fitted else None,
            "maxs": [float(v) for v in self.maxs] if self.fitted else None,
            "trim_thresholds": {k: float(v) for k, v in self.trim_thresholds.items()},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ScalerState":
        mins = None if d["mins"] is None else np.asarray(d["mins"], dtype=np.float64)
        maxs = None if d["maxs"] is None else np.asarray(d["maxs"], dtype=np.float64)
        return cls(list(d["names"]), mins, maxs, dict(d.get("trim_thresholds", {})))


def fit_scaler(train_rows: pd.DataFrame | np.ndarray, names=None) -> ScalerState:
    """Column-wise min and max of the training partition (NaNs ignored)."""
    if isinstance(train_rows, pd.DataFrame):
        names = list(train_rows.columns) if names is None else list(names)
        arr = train_rows[names].to_numpy(dtype=np.float64)
    else:
        arr = np.asarray(train_rows, dtype=np.float64)
        names = list(names) if names is not None else [f"x{i}" for i in range(arr.shape[1])]
    if arr.shape[0] == 0:
        raise ValueError("cannot fit a scaler on zero rows")
    return ScalerState(names, np.nanmin(arr, axis=0), np.nanmax(arr, axis=0))


def apply_scaler(rows: pd.DataFrame | np.ndarray, state: ScalerState):
    """``(x - min) / (max - min)``; constant columns map to 0; no clipping."""
    if state is None or not state.fitted:
        raise ScalerStateError("scaler applied before it was fitted")
    arr = rows[state.names].to_numpy(dtype=np.float64) if isinstance(rows, pd.DataFrame) \
        else np.asarray(rows, dtype=np.float64)
    span = state.maxs - state.mins
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (arr - state.mins) / safe, 0.0)
    if isinstance(rows, pd.DataFrame):
        return pd.DataFrame(out, columns=state.names, index=rows.index)
    return out


def scale_columns(values: np.ndarray, state: ScalerState, names) -> np.ndarray:
    """Scale the named columns of ``values`` with the matching entries of ``state``."""
    if not state.fitted:
        raise ScalerStateError("scaler applied before it was fitted")
    pos = [state.names.index(n) for n in names]
    mn, mx = state.mins[pos], state.maxs[pos]
    span = mx - mn
    return np.where(span > 0, (values - mn) / np.where(span > 0, span, 1.0), 0.0)


# ---------------------------------------------------------------- trimming

def trim_thresholds(train_hours: pd.DataFrame, q: float = 0.999, columns=schema.COUNT_FIELDS) -> dict:
    """Per-column empirical ``q``-quantile (linear interpolation) of the training rows."""
    arr = train_hours[list(columns)].to_numpy(dtype=np.float64)
    if len(arr) == 0:
        return {c: np.inf for c in columns}
    qs = np.quantile(arr, q, axis=0, method="linear")
    return {c: float(v) for c, v in zip(columns, qs)}


def trim_outliers(hours: pd.DataFrame, q: float = 0.999, thresholds: dict | None = None,
                  train_mask: np.ndarray | None = None):
    """Drop rows where any behavioral count strictly exceeds its ``q``-quantile.

    Thresholds come from ``thresholds`` if given, else from the rows selected by
    ``train_mask`` (all rows when ``None``).  Returns ``(kept_rows, thresholds)``.
    """
    if thresholds is None:
        cols = [c for c in schema.COUNT_FIELDS if c in hours.columns]
        ref = hours if train_mask is None else hours[np.asarray(train_mask, dtype=bool)]
        thresholds = trim_thresholds(ref, q, cols)
    cols = list(thresholds)
    if len(hours) == 0:
        return hours, thresholds
    lim = np.array([thresholds[c] for c in cols])
    over = (hours[cols].to_numpy(dtype=np.float64) > lim).any(axis=1)
    return hours.loc[~over], thresholds


# ---------------------------------------------------------------- behavioral features

PASSIVE_SUM = "passive_sum"


def component_scaler(train_hours: pd.DataFrame) -> ScalerState:
    """Min-max ranges of the raw counts (and the passive-use sum) used by composites and the target."""
    frame = train_hours[list(schema.COUNT_FIELDS)].copy()
    frame[PASSIVE_SUM] = train_hours[list(schema.PASSIVE_COMPONENTS)].sum(axis=1)
    return fit_scaler(frame)


def _ratio(a, b, eps):
    return (a + eps) / (b + eps)


def behavioral_schema(extended: bool = False) -> FeatureSchema:
    base = list(schema.COUNT_FIELDS) + (["session_time"] if extended else [])
    cols = [(n, "behavioral", "raw") for n in base]
    cols += [(f"{n}_norm", "behavioral", "normalized") for n in schema.COUNT_FIELDS]
    cols += [(f"log_{n}", "behavioral", "log") for n in base]
    cols += [(f"log_{n}_norm", "behavioral", "log") for n in schema.COUNT_FIELDS]
    cols += [(n, "behavioral", "derived") for n in schema.DERIVED_FIELDS]
    return FeatureSchema(cols)


def derive_behavioral_features(hours: pd.DataFrame, comp_scaler: ScalerState, ratio_eps: float = 1.0,
                               composite_eps: float = 0.05, extended: bool = False):
    """Expand the 28 hourly counts into the 127-column behavioral block.

    Raw counts, counts per active second, ``ln(1 + x)`` of both, and 15 derived
    scores.  Count ratios use ``(a + ratio_eps) / (b + ratio_eps)``; ratios of
    composite scores (which live on the 0..1 scale) use ``composite_eps``.
    """
    st = hours["session_time"].to_numpy(dtype=np.float64)
    if (st <= 0).any():
        raise ValueError(f"session_time must be > 0; row {int(np.argmax(st <= 0))} has {st[st <= 0][0]}")
    raw = hours[list(schema.COUNT_FIELDS)].to_numpy(dtype=np.float64)
    norm = raw / st[:, None]
    g = {n: raw[:, i] for i, n in enumerate(schema.COUNT_FIELDS)}

    def scaled_mean(names):
        return scale_columns(raw[:, [schema.COUNT_FIELDS.index(n) for n in names]], comp_scaler, names).mean(axis=1)

    act = scaled_mean(schema.ACTIVE_COMPONENTS)
    pas = scaled_mean(schema.PASSIVE_COMPONENTS)
    cre = scaled_mean(schema.CREATIVE_COMPONENTS)
    actcre = (act + cre) / 2.0
    derived = np.column_stack([
        _ratio(g["chat_send_cnt"], g["chat_view_cnt"], ratio_eps),
        g["chat_send_cnt"] - g["chat_view_cnt"],
        _ratio(g["direct_snap_send_cnt"], g["direct_snap_view_cnt"], ratio_eps),
        g["direct_snap_send_cnt"] - g["direct_snap_view_cnt"],
        _ratio(g["story_snap_post_cnt"], g["story_story_view_cnt"], ratio_eps),
        g["story_snap_post_cnt"] - g["story_story_view_cnt"],
        act, pas, cre,
        _ratio(act, pas, composite_eps), act - pas,
        _ratio(cre, pas, composite_eps), cre - pas,
        _ratio(actcre, pas, composite_eps), actcre - pas,
    ])
    if extended:
        raw_block, log_base = np.column_stack([raw, st]), np.column_stack([raw, st])
    else:
        raw_block, log_base = raw, raw
    block = np.column_stack([raw_block, norm, np.log1p(log_base), np.log1p(norm), derived])
    sch = behavioral_schema(extended)
    return pd.DataFrame(block, columns=sch.names, index=hours.index), sch


def active_passive_score(active: np.ndarray, passive: np.ndarray, eps: float = 0.05) -> np.ndarray:
    """Smoothed log-ratio ``ln((A + eps) / (P + eps))``.

    Written as a difference of logs so that swapping A and P negates the
    result exactly in floating point.
    """
    return np.log(np.asarray(active, dtype=np.float64) + eps) - np.log(np.asarray(passive, dtype=np.float64) + eps)


def compute_target(hours, target_scaler: ScalerState | None, eps: float = 0.05):
    """Active-passive score of one session hour (mapping) or of every row of a frame."""
    if target_scaler is None or not target_scaler.fitted:
        raise ScalerStateError("target scaler is not fitted")
    single = isinstance(hours, Mapping) or isinstance(hours, pd.Series)
    frame = pd.DataFrame([dict(hours)]) if single else hours
    act_raw = frame[list(schema.ACTIVE_COMPONENTS)].to_numpy(dtype=np.float64)
    a = scale_columns(act_raw, target_scaler, schema.ACTIVE_COMPONENTS).mean(axis=1)
    psum = frame[list(schema.PASSIVE_COMPONENTS)].to_numpy(dtype=np.float64).sum(axis=1)
    p = scale_columns(psum[:, None], target_scaler, [PASSIVE_SUM])[:, 0]
    y = active_passive_score(a, p, eps)
    return float(y[0]) if single else y


# ---------------------------------------------------------------- context

def context_schema() -> FeatureSchema:
    cols = [(n, "census", "numeric") for n in schema.CENSUS_FIELDS]
    cols += [(n, "weather", "numeric") for n in schema.WEATHER_NUMERIC]
    cols += [(f"{schema.WEATHER_LABEL}_{lab}", "weather", "onehot") for lab in schema.WEATHER_LABELS]
    cols += [(n, "temporal", "numeric") for n in schema.TEMPORAL_FIELDS]
    cols += [(n, "location", "numeric") for n in schema.LOCATION_FIELDS]
    cols += [(schema.CONNECTIVITY_FIELD, "connectivity", "numeric")]
    return FeatureSchema(cols)


def one_hot_labels(labels) -> np.ndarray:
    cat = pd.Categorical(np.asarray(labels, dtype=object), categories=list(schema.WEATHER_LABELS))
    codes = np.asarray(cat.codes)
    if (codes < 0).any():
        bad = np.asarray(labels, dtype=object)[codes < 0][0]
        raise EncodingError(f"unknown weather label {bad!r}")
    out = np.zeros((len(codes), len(schema.WEATHER_LABELS)))
    out[np.arange(len(codes)), codes] = 1.0
    return out


def decode_labels(onehot: np.ndarray) -> list[str]:
    return [schema.WEATHER_LABELS[i] for i in np.argmax(np.asarray(onehot), axis=1)]


def encode_context(hours: pd.DataFrame):
    """55 context columns: census 19, weather 9 + 10 one-hot, temporal 5, location 11, connectivity 1."""
    sch = context_schema()
    block = np.column_stack([
        hours[list(schema.CENSUS_FIELDS)].to_numpy(dtype=np.float64),
        hours[list(schema.WEATHER_NUMERIC)].to_numpy(dtype=np.float64),
        one_hot_labels(hours[schema.WEATHER_LABEL].to_numpy()),
        hours[list(schema.TEMPORAL_FIELDS)].to_numpy(dtype=np.float64),
        hours[list(schema.LOCATION_FIELDS)].to_numpy(dtype=np.float64),
        hours[[schema.CONNECTIVITY_FIELD]].to_numpy(dtype=np.float64),
    ]) if len(hours) else np.zeros((0, len(sch.columns)))
    return pd.DataFrame(block, columns=sch.names, index=hours.index), sch


def impute_weather(hours: pd.DataFrame, train_mask: np.ndarray) -> dict:
    """Fill missing weather cells in place with training means (numeric) and training mode (label)."""
    train = hours[np.asarray(train_mask, dtype=bool)]
    fill = {c: float(train[c].mean()) for c in schema.WEATHER_NUMERIC}
    mode = train[schema.WEATHER_LABEL].dropna()
    fill[schema.WEATHER_LABEL] = str(mode.mode().iloc[0]) if len(mode) else schema.WEATHER_LABELS[0]
    for c, v in fill.items():
        if hours[c].isna().any():
            hours[c] = hours[c].fillna(v)
    return fill
