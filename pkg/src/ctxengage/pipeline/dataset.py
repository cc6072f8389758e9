"""Person-level splits, the prepared feature bundle and sequence samples."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .. import schema
from ..synthgen import ContextTables, EventLog
from . import features as F
from .sessionize import add_temporal, enrich_context, sessionize_hourly

SPLITS = ("train", "validation", "test")
MAGIC = b"CTXB"


@dataclass(frozen=True)
class PipelineConfig:
    split_fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    trim_quantile: float = 0.999
    ratio_eps: float = 1.0
    target_eps: float = 0.05
    extended_schema: bool = False
    impute_weather: bool = True
    time_delta_cap: float = 168.0


@dataclass
class DatasetSplit:
    """User-disjoint assignment; ``focal_counts`` is filled once sequences are built."""

    train: list
    validation: list
    test: list
    focal_counts: dict = field(default_factory=dict)

    def users(self, name: str) -> list:
        return getattr(self, name)

    def assignment(self) -> dict:
        return {u: i for i, name in enumerate(SPLITS) for u in getattr(self, name)}


def split_by_user(user_ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffle the distinct users and cut them by ``fractions`` (largest remainder)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {tuple(fractions)}")
    users = sorted({str(u) for u in user_ids})
    if len(users) < len(fr):
        raise ValueError(f"need at least {len(fr)} users to split, got {len(users)}")
    raw = fr * len(users)
    n = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - n), kind="stable")[: len(users) - n.sum()]:
        n[i] += 1
    order = np.random.default_rng(seed).permutation(len(users))
    shuffled = [users[i] for i in order]
    cut = np.cumsum(n)
    return DatasetSplit(sorted(shuffled[: cut[0]]), sorted(shuffled[cut[0]: cut[1]]), sorted(shuffled[cut[1]:]))


@dataclass
class FeatureMatrixBundle:
    """All surviving session hours, sorted by (user, hour), scaled with training statistics."""

    features: np.ndarray  # (n_rows, n_features) float32
    target: np.ndarray  # (n_rows,) float32
    user_ids: np.ndarray  # (n_rows,) str
    hour_index: np.ndarray  # (n_rows,) int64
    split: np.ndarray  # (n_rows,) int8 index into SPLITS
    schema: F.FeatureSchema
    scaler: F.ScalerState
    component_scaler: F.ScalerState
    meta: dict = field(default_factory=dict)

    def rows(self, split_name: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split_name))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.target).tobytes())
        h.update(self.split.tobytes())
        h.update(self.hour_index.tobytes())
        h.update("|".join(self.user_ids.tolist()).encode())
        h.update(self.schema.fingerprint().encode())
        return h.hexdigest()[:16]


def prepare(log: EventLog, tables: ContextTables, config: PipelineConfig | None = None) -> FeatureMatrixBundle:
    """Event log + context tables -> scaled feature bundle with targets and split assignment."""
    cfg = config or PipelineConfig()
    hourly = sessionize_hourly(log)
    hours = enrich_context(hourly, tables, impute=cfg.impute_weather)
    split = split_by_user(hours["user_id"].unique(), cfg.split_fractions, cfg.split_seed)
    assign = split.assignment()
    split_code = hours["user_id"].map(assign).to_numpy().astype(np.int8)
    is_train = split_code == 0
    n_before = len(hours)

    hours, thresholds = F.trim_outliers(hours, cfg.trim_quantile, train_mask=is_train)
    hours = hours.reset_index(drop=True)
    split_code = hours["user_id"].map(assign).to_numpy().astype(np.int8)
    is_train = split_code == 0
    # time since the previous surviving session hour
    add_temporal(hours, cfg.time_delta_cap)

    weather_fill = F.impute_weather(hours, is_train)
    comp = F.component_scaler(hours[is_train])
    beh, beh_schema = F.derive_behavioral_features(hours, comp, cfg.ratio_eps, cfg.target_eps, cfg.extended_schema)
    ctx, ctx_schema = F.encode_context(hours)
    sch = beh_schema + ctx_schema
    sch.validate(cfg.extended_schema)
    raw = np.column_stack([beh.to_numpy(), ctx.to_numpy()])
    scaler = F.fit_scaler(raw[is_train], sch.names)
    scaler.trim_thresholds = thresholds
    scaled = F.apply_scaler(raw, scaler).astype(np.float32)
    target = F.compute_target(hours, comp, cfg.target_eps).astype(np.float32)
    meta = {
        "schema_version": schema.SCHEMA_VERSION,
        "rows_before_trim": int(n_before),
        "rows": int(len(hours)),
        "weather_fill": weather_fill,
        "users_per_split": {s: len(split.users(s)) for s in SPLITS},
        "rows_per_split": {s: int((split_code == i).sum()) for i, s in enumerate(SPLITS)},
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()},
    }
    return FeatureMatrixBundle(scaled, target, hours["user_id"].astype(str).to_numpy(),
                               hours["hour_index"].to_numpy().astype(np.int64), split_code, sch, scaler, comp, meta)


# ---------------------------------------------------------------- bundle file

def write_bundle(bundle: FeatureMatrixBundle, path: str | Path, csv_path: str | Path | None = None) -> None:
    """Binary layout: ``MAGIC``, uint64 LE header length, UTF-8 JSON header,
    then the feature matrix and the target as little-endian float32, row-major."""
    n, f = bundle.features.shape
    users, inv = np.unique(bundle.user_ids, return_inverse=True)
    header = {
        "schema_version": schema.SCHEMA_VERSION,
        "layout": {"features": [n, f], "target": [n], "dtype": "<f4", "order": "row-major"},
        "manifest": bundle.schema.to_json(),
        "discrepancy_note": F.discrepancy_note(bundle.schema),
        "scaler": bundle.scaler.to_json(),
        "component_scaler": bundle.component_scaler.to_json(),
        "users": users.tolist(),
        "rows": {"user": inv.astype(int).tolist(), "hour_index": bundle.hour_index.astype(int).tolist(),
                 "split": bundle.split.astype(int).tolist()},
        "splits": list(SPLITS),
        "meta": bundle.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(bundle.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.target, dtype="<f4").tobytes())
    if csv_path is not None:
        df = pd.DataFrame(bundle.features, columns=bundle.schema.names)
        df.insert(0, "target", bundle.target)
        df.insert(0, "split", np.asarray(SPLITS)[bundle.split])
        df.insert(0, "hour_index", bundle.hour_index)
        df.insert(0, "user_id", bundle.user_ids)
        df.to_csv(csv_path, index=False, lineterminator="\n", float_format="%.7g")


def read_bundle(path: str | Path) -> FeatureMatrixBundle:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a feature bundle")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n, f = header["layout"]["features"]
        feats = np.frombuffer(fh.read(4 * n * f), dtype="<f4").reshape(n, f).astype(np.float32)
        target = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float32)
    users = np.asarray(header["users"], dtype=object)
    rows = header["rows"]
    return FeatureMatrixBundle(
        feats, target, users[np.asarray(rows["user"], dtype=np.int64)].astype(str),
        np.asarray(rows["hour_index"], dtype=np.int64), np.asarray(rows["split"], dtype=np.int8),
        F.FeatureSchema.from_json(header["manifest"]), F.ScalerState.from_json(header["scaler"]),
        F.ScalerState.from_json(header["component_scaler"]), header["meta"])


# ---------------------------------------------------------------- sequences

@dataclass
class SequenceSample:
    target: float
    history: np.ndarray  # (max_len, n_features)
    mask: np.ndarray  # (max_len,)
    user_id: str


@dataclass
class SequenceSet:
    """Index-based histories for focal hours of one split.

    Row ``j`` of a history holds behavioral columns from ``beh_idx[:, j]`` and
    context columns from ``ctx_idx[:, j]`` (bundle row numbers, -1 for padding).
    Behavior always ends at t-1.  With momentary context, context is shifted one
    step later so the last row pairs behavior at t-1 with context at t0.
    """

    beh_idx: np.ndarray
    ctx_idx: np.ndarray
    target: np.ndarray
    user_ids: np.ndarray
    focal_rows: np.ndarray
    include_momentary_context: bool

    def __len__(self):
        return len(self.target)

    @property
    def max_len(self) -> int:
        return self.beh_idx.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return (self.beh_idx >= 0).astype(np.float32)

    def truncate(self, length: int) -> "SequenceSet":
        return SequenceSet(self.beh_idx[:, -length:], self.ctx_idx[:, -length:], self.target, self.user_ids,
                           self.focal_rows, self.include_momentary_context)


@dataclass
class Design:
    """Column selection over a bundle; materializes batches ``(B, L, F)`` from a SequenceSet."""

    beh: np.ndarray  # (n_rows + 1, n_beh) float32, last row zero
    ctx: np.ndarray  # (n_rows + 1, n_ctx)
    names: list

    @classmethod
    def from_bundle(cls, bundle: FeatureMatrixBundle, beh_cols, ctx_cols) -> "Design":
        beh_cols = np.asarray(beh_cols, dtype=np.int64)
        ctx_cols = np.asarray(ctx_cols, dtype=np.int64)
        zero = lambda k: np.zeros((1, k), dtype=np.float32)
        beh = np.vstack([bundle.features[:, beh_cols], zero(len(beh_cols))])
        ctx = np.vstack([bundle.features[:, ctx_cols], zero(len(ctx_cols))])
        names = [bundle.schema.names[i] for i in beh_cols] + [bundle.schema.names[i] for i in ctx_cols]
        return cls(beh, ctx, names)

    @property
    def n_features(self) -> int:
        return self.beh.shape[1] + self.ctx.shape[1]

    def batch(self, seqs: SequenceSet, idx=None) -> tuple[np.ndarray, np.ndarray]:
        bi = seqs.beh_idx if idx is None else seqs.beh_idx[idx]
        ci = seqs.ctx_idx if idx is None else seqs.ctx_idx[idx]
        x = np.concatenate([self.beh[bi], self.ctx[ci]], axis=2)
        return x, (bi >= 0).astype(np.float32)


def eligible_focal_rows(bundle: FeatureMatrixBundle, split_name: str) -> np.ndarray:
    """Rows of the split whose user has at least one earlier session hour."""
    rows = bundle.rows(split_name)
    u = bundle.user_ids
    has_prev = np.r_[False, u[1:] == u[:-1]]
    return rows[has_prev[rows]]


def build_sequences(bundle: FeatureMatrixBundle, split_name: str, max_len: int,
                    include_momentary_context: bool = True, n_focal: int | None = None,
                    seed: int = 0) -> SequenceSet:
    """Histories of up to ``max_len`` preceding session hours for sampled focal hours.

    Focal sampling depends only on ``(split_name, n_focal, seed)`` so sets built
    with different ``max_len`` share their focal hours.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    focal = eligible_focal_rows(bundle, split_name)
    if n_focal is not None and n_focal < len(focal):
        rng = np.random.default_rng([seed, SPLITS.index(split_name)])
        focal = np.sort(rng.choice(focal, size=n_focal, replace=False))
    u = bundle.user_ids
    same = np.r_[False, u[1:] == u[:-1]]
    # position of each row within its user's history
    starts = np.flatnonzero(~same)
    pos = np.arange(len(u)) - np.repeat(starts, np.diff(np.r_[starts, len(u)]))
    fpos = pos[focal]
    beh_off = max_len - np.arange(max_len)  # L .. 1
    beh_idx = focal[:, None] - beh_off[None, :]
    valid = fpos[:, None] >= beh_off[None, :]
    beh_idx = np.where(valid, beh_idx, -1)
    ctx_off = beh_off - 1 if include_momentary_context else beh_off
    ctx_idx = np.where(valid, focal[:, None] - ctx_off[None, :], -1)
    return SequenceSet(beh_idx, ctx_idx, bundle.target[focal].astype(np.float64), u[focal], focal,
                       include_momentary_context)


def sample_at(bundle: FeatureMatrixBundle, seqs: SequenceSet, i: int, design: Design) -> SequenceSample:
    x, m = design.batch(seqs, np.array([i]))
    return SequenceSample(float(seqs.target[i]), x[0], m[0], str(seqs.user_ids[i]))
