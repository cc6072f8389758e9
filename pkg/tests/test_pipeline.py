import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxengage import schema, synthgen
from ctxengage.pipeline import dataset as ds
from ctxengage.pipeline import features as F
from ctxengage.pipeline.sessionize import EnrichmentError, InvalidInputError, enrich_context, sessionize_hourly
from ctxengage.synthgen import EventLog, EventRecord

T0 = synthgen.START_TS  # midnight UTC


def _log(events, span_days=1):
    recs = [EventRecord(u, T0 + t, e, z, c, loc) for (u, t, e, z, c, loc) in
            [(*ev, None) if len(ev) == 5 else ev for ev in events]]
    return EventLog.from_records(recs, span_days)


def _tables(n_zips=2, n_hours=24):
    return synthgen.generate_context_tables(n_zips, n_hours, 0)


# ---------------------------------------------------------------- sessionize


def test_two_events_same_hour():
    log = _log([("u1", 10 * 3600 + 300, "app_open", "10001", "wifi"),
                ("u1", 10 * 3600 + 2400, "app_open", "10001", "wifi")])
    hours = sessionize_hourly(log).hours
    assert len(hours) == 1
    assert hours["app_open_cnt"].iloc[0] == 2


def test_hour_boundary_splits():
    log = _log([("u1", 10 * 3600 - 1, "chat_send", "10001", "wifi"),
                ("u1", 10 * 3600, "chat_send", "10001", "wifi")])
    hours = sessionize_hourly(log).hours
    assert list(hours["hour_index"] - T0 // 3600) == [9, 10]


@given(st.lists(st.integers(0, 4 * 3600 - 1), min_size=1, max_size=30))
def test_hour_assignment_matches_floor(offsets):
    offsets = sorted(offsets)
    log = _log([("u1", t, "chat_view", "10001", "wifi") for t in offsets])
    hours = sessionize_hourly(log).hours
    expect = pd.Series([t // 3600 for t in offsets]).value_counts().sort_index()
    got = hours.set_index(hours["hour_index"] - T0 // 3600)["chat_view_cnt"]
    assert dict(expect) == {int(k): int(v) for k, v in got.items()}


def test_empty_log():
    hourly = sessionize_hourly(_log([]))
    assert len(hourly.hours) == 0


def test_unsorted_rejected():
    log = _log([("u1", 500, "chat_send", "10001", "wifi"), ("u1", 100, "chat_send", "10001", "wifi")])
    with pytest.raises(InvalidInputError):
        sessionize_hourly(log)


def test_session_split_across_hours_and_connectivity():
    log = _log([("u1", 10 * 3600 + 1800, "raw_session", "10001", "cell"),
                ("u1", 11 * 3600 + 600, "session_time", "10001", "cell"),
                ("u1", 11 * 3600 + 1200, "raw_session", "10001", "wifi"),
                ("u1", 11 * 3600 + 1500, "session_time", "10001", "wifi")])
    h = sessionize_hourly(log).hours
    assert list(h["session_time"]) == [1800.0, 900.0]
    assert h["raw_session_cnt"].tolist() == [1.0, 1.0]
    assert h["connectivity_fraction"].tolist() == [1.0, 0.5]


def test_wifi_only_hour_connectivity_zero():
    log = _log([("u1", 3600, "raw_session", "10001", "wifi"), ("u1", 3700, "session_time", "10001", "wifi")])
    assert sessionize_hourly(log).hours["connectivity_fraction"].iloc[0] == 0.0


def test_users_not_mixed():
    events = []
    for k in range(5):
        for u in ("a", "b"):
            events.append((u, k * 3600 + (10 if u == "a" else 20), "chat_send", "10001", "wifi"))
    events.sort(key=lambda e: (e[0], e[1]))
    h = sessionize_hourly(_log(events)).hours
    assert h.groupby("user_id").size().tolist() == [5, 5]


# ---------------------------------------------------------------- enrich


def _weighted_setup():
    z = synthgen.zip_codes(2)
    tables = _tables(2)
    w = tables.weather
    w.loc[(w["zip"] == z[0]) & (w["hour_index"] == T0 // 3600 + 10), "temp"] = 290.0
    w.loc[(w["zip"] == z[1]) & (w["hour_index"] == T0 // 3600 + 10), "temp"] = 299.0
    log = _log([("u1", 36000, "raw_session", z[0], "wifi"), ("u1", 36000 + 2400, "session_time", z[0], "wifi"),
                ("u1", 36000 + 2400, "raw_session", z[1], "wifi"), ("u1", 39600, "session_time", z[1], "wifi")])
    return log, tables, z


def test_time_weighted_weather():
    log, tables, _ = _weighted_setup()
    hours = enrich_context(sessionize_hourly(log), tables)
    assert len(hours) == 1
    assert hours["temp"].iloc[0] == pytest.approx(293.0, abs=1e-9)


def test_single_zip_copied():
    log, tables, z = _weighted_setup()
    one = _log([("u1", 36000, "raw_session", z[1], "wifi"), ("u1", 37000, "session_time", z[1], "wifi")])
    hours = enrich_context(sessionize_hourly(one), tables)
    row = tables.weather[(tables.weather["zip"] == z[1]) & (tables.weather["hour_index"] == T0 // 3600 + 10)]
    for c in schema.WEATHER_NUMERIC:
        assert hours[c].iloc[0] == pytest.approx(row[c].iloc[0], abs=1e-12)
    assert hours[schema.WEATHER_LABEL].iloc[0] == row[schema.WEATHER_LABEL].iloc[0]
    census = tables.census.set_index("zip").loc[z[1]]
    for c in schema.CENSUS_FIELDS:
        assert hours[c].iloc[0] == pytest.approx(census[c], abs=1e-12)


def test_no_location_scores_imputed():
    log, tables, _ = _weighted_setup()
    hours = enrich_context(sessionize_hourly(log), tables)
    cats = [f for f in schema.LOCATION_FIELDS if f != "missing"]
    assert (hours[cats].to_numpy() == 0).all()
    assert hours["missing"].iloc[0] == 1.0


def test_location_max_per_hour():
    z = synthgen.zip_codes(1)[0]
    p1 = tuple([0.1] * 10 + [0.0])
    p2 = tuple([0.3] + [0.05] * 9 + [0.2])
    log = _log([("u1", 100, "raw_session", z, "wifi", p1), ("u1", 200, "session_time", z, "wifi"),
                ("u1", 300, "raw_session", z, "wifi", p2), ("u1", 400, "session_time", z, "wifi")])
    hours = enrich_context(sessionize_hourly(log), _tables(1))
    got = hours[list(schema.LOCATION_FIELDS)].iloc[0].to_numpy()
    np.testing.assert_allclose(got, np.maximum(p1, p2), atol=1e-7)


def test_missing_weather_raises_without_imputation():
    log, tables, z = _weighted_setup()
    tables.weather = tables.weather[~((tables.weather["zip"] == z[1])
                                      & (tables.weather["hour_index"] == T0 // 3600 + 10))]
    with pytest.raises(EnrichmentError, match=z[1]):
        enrich_context(sessionize_hourly(log), tables, impute=False)


# ---------------------------------------------------------------- trimming


def test_trim_single_outlier():
    rng = np.random.default_rng(0)
    df = pd.DataFrame({c: rng.integers(0, 5, 1000).astype(float) for c in schema.COUNT_FIELDS})
    df.loc[417, "chat_send_cnt"] = 1e6
    kept, thr = F.trim_outliers(df, 0.999, thresholds={"chat_send_cnt": np.quantile(df["chat_send_cnt"], 0.999)})
    assert len(kept) == 999 and 417 not in kept.index


def test_trim_brute_force_oracle(rng):
    x = rng.exponential(size=1000)
    x[5] = 1e3
    df = pd.DataFrame({"chat_send_cnt": x})
    kept, thr = F.trim_outliers(df, 0.999, thresholds=F.trim_thresholds(df, 0.999, ["chat_send_cnt"]))
    # brute-force linear-interpolation quantile
    s = np.sort(x)
    pos = 0.999 * (len(s) - 1)
    q = s[int(math.floor(pos))] + (pos - math.floor(pos)) * (s[int(math.ceil(pos))] - s[int(math.floor(pos))])
    assert thr["chat_send_cnt"] == pytest.approx(q)
    assert set(df.index) - set(kept.index) == set(np.flatnonzero(x > q))
    assert 5 not in kept.index


def test_trim_all_equal_and_q1():
    df = pd.DataFrame({c: np.full(50, 3.0) for c in schema.COUNT_FIELDS})
    assert len(F.trim_outliers(df, 0.999)[0]) == 50
    df2 = pd.DataFrame({c: np.arange(50.0) for c in schema.COUNT_FIELDS})
    assert len(F.trim_outliers(df2, 1.0)[0]) == 50


def test_trim_thresholds_train_only():
    df = pd.DataFrame({c: np.r_[np.zeros(10), np.full(10, 100.0)] for c in schema.COUNT_FIELDS})
    train = np.r_[np.ones(10, bool), np.zeros(10, bool)]
    kept, thr = F.trim_outliers(df, 0.999, train_mask=train)
    assert thr["chat_send_cnt"] == 0.0
    assert len(kept) == 10


# ---------------------------------------------------------------- behavioral features


def _hours(**counts):
    row = {c: 0.0 for c in schema.COUNT_FIELDS}
    row.update(counts)
    row.setdefault("session_time", 60.0)
    return pd.DataFrame([row])


def _comp(rows=None):
    rows = rows if rows is not None else pd.concat([_hours(), _hours(**{c: 10.0 for c in schema.COUNT_FIELDS})])
    return F.component_scaler(rows)


def test_behavioral_count_127():
    sch = F.behavioral_schema()
    assert len(sch.columns) == 127 == 28 + 28 + 56 + 15
    assert len(F.behavioral_schema(extended=True).columns) == 129


def test_chat_ratio_formula():
    beh, _ = F.derive_behavioral_features(_hours(chat_send_cnt=4, chat_view_cnt=2), _comp(), ratio_eps=1.0)
    assert beh["chat_act_pass_ratio"].iloc[0] == pytest.approx(5 / 3, abs=1e-12)
    assert beh["chat_act_pass_diff"].iloc[0] == 2


def test_all_zero_counts():
    beh, _ = F.derive_behavioral_features(_hours(), _comp())
    diffs = [c for c in schema.DERIVED_FIELDS if c.endswith("_diff")]
    ratios = [c for c in schema.DERIVED_FIELDS if c.endswith("_ratio")]
    assert (beh[diffs].to_numpy() == 0).all()
    assert (beh[ratios].to_numpy() == 1).all()


def test_normalized_and_log_columns():
    beh, _ = F.derive_behavioral_features(_hours(chat_send_cnt=6, session_time=120.0), _comp())
    assert beh["chat_send_cnt_norm"].iloc[0] == pytest.approx(0.05)
    assert beh["log_chat_send_cnt"].iloc[0] == pytest.approx(math.log(7))
    assert beh["log_chat_send_cnt_norm"].iloc[0] == pytest.approx(math.log(1.05))


def test_zero_session_time_rejected():
    with pytest.raises(ValueError):
        F.derive_behavioral_features(_hours(session_time=0.0), _comp())


# ---------------------------------------------------------------- target


def _target_scaler():
    rows = pd.concat([_hours(), _hours(**{c: 1.0 for c in schema.ACTIVE_COMPONENTS}),
                      _hours(story_story_view_cnt=1.0)])
    return F.component_scaler(rows)


def test_target_formula_oracles():
    sc = _target_scaler()
    assert F.compute_target(_hours().iloc[0], sc) == 0.0
    a0p1 = F.compute_target(_hours(story_story_view_cnt=1.0).iloc[0], sc)
    assert a0p1 == pytest.approx(math.log(0.05 / 1.05), abs=1e-12)
    assert a0p1 == pytest.approx(-3.0445, abs=1e-4)
    a1p0 = F.compute_target(_hours(**{c: 1.0 for c in schema.ACTIVE_COMPONENTS}).iloc[0], sc)
    assert a1p0 == pytest.approx(-a0p1, abs=1e-12)


def test_target_unfitted_scaler():
    with pytest.raises(F.ScalerStateError):
        F.compute_target(_hours().iloc[0], F.ScalerState())


@given(st.floats(0, 5), st.floats(0, 5))
def test_target_antisymmetry(a, p):
    assert F.active_passive_score(a, p) == -F.active_passive_score(p, a)


@given(st.floats(0, 5), st.floats(0, 5), st.floats(1e-3, 5))
def test_target_monotone_in_active(a, p, d):
    assert F.active_passive_score(a + d, p) > F.active_passive_score(a, p)


# ---------------------------------------------------------------- context encoding


def test_rain_one_hot():
    oh = F.one_hot_labels(["rain"])
    names = [f"{schema.WEATHER_LABEL}_{lab}" for lab in schema.WEATHER_LABELS]
    assert dict(zip(names, oh[0]))["weather_label_rain"] == 1 and oh.sum() == 1


def test_one_hot_roundtrip():
    assert F.decode_labels(F.one_hot_labels(schema.WEATHER_LABELS)) == list(schema.WEATHER_LABELS)


def test_unknown_label():
    with pytest.raises(F.EncodingError):
        F.one_hot_labels(["tornado"])


def test_context_schema_counts():
    c = F.context_schema().counts()
    assert (c["weather"], c["census"], c["temporal"], c["location"], c["connectivity"]) == (19, 19, 5, 11, 1)
    assert c["total"] == 55


# ---------------------------------------------------------------- scaler


def test_scaler_examples():
    st_ = F.fit_scaler(np.array([[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]]))
    out = F.apply_scaler(np.array([[2.0, 5.0], [4.0, 5.0], [6.0, 5.0], [8.0, 5.0]]), st_)
    np.testing.assert_allclose(out[:, 0], [0, 0.5, 1, 1.5])
    assert (out[:, 1] == 0).all()


def test_scaler_unfitted():
    with pytest.raises(F.ScalerStateError):
        F.apply_scaler(np.zeros((2, 2)), F.ScalerState())


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_scaler_train_range(vals):
    x = np.array(vals)[:, None]
    out = F.apply_scaler(x, F.fit_scaler(x))
    assert out.min() >= 0 and out.max() <= 1 + 1e-12


def test_bundle_scaler_train_only(small_bundle):
    b = small_bundle
    tr = b.features[b.rows("train")]
    assert np.allclose(tr.min(axis=0), 0, atol=1e-6)
    span = b.scaler.maxs - b.scaler.mins
    assert np.allclose(tr.max(axis=0)[span > 0], 1, atol=1e-5)
    # refitting on all rows gives a different scaler, so the stored one is train-only
    raw_all_max = b.scaler.mins + b.features.max(axis=0) * span
    assert (raw_all_max >= b.scaler.maxs - 1e-6).all()


# ---------------------------------------------------------------- split


def test_split_counts():
    s = ds.split_by_user([f"u{i}" for i in range(10)], (0.8, 0.1, 0.1), 0)
    assert (len(s.train), len(s.validation), len(s.test)) == (8, 1, 1)


@given(st.integers(3, 200), st.integers(0, 1000))
def test_split_disjoint(n, seed):
    s = ds.split_by_user([f"u{i}" for i in range(n)], (0.8, 0.1, 0.1), seed)
    a, b, c = set(s.train), set(s.validation), set(s.test)
    assert not (a & b or a & c or b & c)
    assert len(a | b | c) == n
    assert s.train == ds.split_by_user([f"u{i}" for i in range(n)], (0.8, 0.1, 0.1), seed).train


def test_split_too_few_users():
    with pytest.raises(ValueError):
        ds.split_by_user(["a", "b"])


def test_bundle_splits_user_disjoint(small_bundle):
    b = small_bundle
    users = [set(b.user_ids[b.rows(s)]) for s in ds.SPLITS]
    assert not (users[0] & users[1] or users[0] & users[2] or users[1] & users[2])


# ---------------------------------------------------------------- bundle


def test_bundle_schema(small_bundle):
    c = small_bundle.schema.counts()
    assert c["behavioral"] == 127 and c["weather"] == 19 and c["total"] == 182
    assert len(set(small_bundle.schema.names)) == 182
    assert "183" in F.discrepancy_note(small_bundle.schema)


def test_bundle_deterministic(small_world, small_bundle):
    _, tables, log = small_world
    again = ds.prepare(log, tables)
    assert again.fingerprint() == small_bundle.fingerprint()


def test_bundle_roundtrip(tmp_path, small_bundle):
    p = tmp_path / "b.ctxb"
    ds.write_bundle(small_bundle, p, tmp_path / "b.csv")
    raw = p.read_bytes()
    assert raw[:4] == b"CTXB"
    back = ds.read_bundle(p)
    assert back.fingerprint() == small_bundle.fingerprint()
    assert back.schema.columns == small_bundle.schema.columns
    head = (tmp_path / "b.csv").read_text().splitlines()[0].split(",")
    assert head[:4] == ["user_id", "hour_index", "split", "target"]


def test_bundle_targets_finite(small_bundle):
    assert np.isfinite(small_bundle.target).all()
    assert np.isfinite(small_bundle.features).all()


def test_extended_schema(small_world):
    _, tables, log = small_world
    b = ds.prepare(log, tables, ds.PipelineConfig(extended_schema=True))
    assert b.schema.counts()["behavioral"] == 129


# ---------------------------------------------------------------- sequences


def _bundle_from_hours(hours_per_user):
    """Tiny hand-made bundle: user u has hours_per_user[u] consecutive session hours."""
    users, hrs = [], []
    for u, n in hours_per_user.items():
        users += [u] * n
        hrs += list(range(n))
    n = len(users)
    sch = F.behavioral_schema() + F.context_schema()
    feats = np.tile(np.arange(n, dtype=np.float32)[:, None], (1, len(sch.columns)))
    return ds.FeatureMatrixBundle(feats, np.arange(n, dtype=np.float32), np.array(users), np.array(hrs),
                                  np.zeros(n, dtype=np.int8), sch, F.ScalerState(), F.ScalerState())


def test_sequence_mask_counts():
    b = _bundle_from_hours({"a": 4})
    seqs = ds.build_sequences(b, "train", 100)
    last = np.flatnonzero(seqs.focal_rows == 3)[0]
    m = seqs.mask[last]
    assert m.sum() == 3 and (m[:97] == 0).all()


def test_length_one_is_previous_row():
    b = _bundle_from_hours({"a": 5})
    seqs = ds.build_sequences(b, "train", 1, include_momentary_context=False)
    np.testing.assert_array_equal(seqs.beh_idx[:, 0], seqs.focal_rows - 1)
    np.testing.assert_array_equal(seqs.ctx_idx[:, 0], seqs.focal_rows - 1)


def test_momentary_context_row():
    b = _bundle_from_hours({"a": 5})
    seqs = ds.build_sequences(b, "train", 3, include_momentary_context=True)
    np.testing.assert_array_equal(seqs.ctx_idx[:, -1], seqs.focal_rows)
    np.testing.assert_array_equal(seqs.beh_idx[:, -1], seqs.focal_rows - 1)
    assert (seqs.beh_idx < seqs.focal_rows[:, None]).all()


def test_sequences_never_mix_users():
    b = _bundle_from_hours({"a": 6, "b": 3, "c": 7})
    seqs = ds.build_sequences(b, "train", 10)
    for i in range(len(seqs)):
        idx = seqs.beh_idx[i][seqs.beh_idx[i] >= 0]
        assert set(b.user_ids[idx]) == {seqs.user_ids[i]}
        cidx = seqs.ctx_idx[i][seqs.ctx_idx[i] >= 0]
        assert set(b.user_ids[cidx]) == {seqs.user_ids[i]}


def test_padding_is_zero():
    b = _bundle_from_hours({"a": 3})
    seqs = ds.build_sequences(b, "train", 5)
    design = ds.Design.from_bundle(b, b.schema.indices("behavioral"), [])
    x, m = design.batch(seqs)
    assert (x[m == 0] == 0).all()


def test_focal_sampling_shared_across_lengths(small_bundle):
    a = ds.build_sequences(small_bundle, "train", 5, n_focal=200, seed=1)
    b = ds.build_sequences(small_bundle, "train", 25, n_focal=200, seed=1)
    np.testing.assert_array_equal(a.focal_rows, b.focal_rows)
    np.testing.assert_array_equal(a.beh_idx, b.beh_idx[:, -5:])


def test_max_len_validation(small_bundle):
    with pytest.raises(ValueError):
        ds.build_sequences(small_bundle, "train", 0)
