"""Hourly aggregation of event logs and context enrichment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .. import schema
from ..synthgen import ContextTables, EventLog

KEY = ["user_id", "hour_index"]


class InvalidInputError(ValueError):
    pass


class EnrichmentError(ValueError):
    pass


@dataclass
class HourlyLog:
    """Session hours plus the per-hour ZIP exposure needed for enrichment.

    ``hours`` has one row per (user_id, hour_index) with the 28 counts,
    ``session_time``, session connectivity tallies and the 11 location maxima
    (NaN when the hour has no location scores).  ``zip_time`` has one row per
    (user_id, hour_index, zip) with the seconds spent there.
    """

    hours: pd.DataFrame
    zip_time: pd.DataFrame


def sessionize_hourly(log: EventLog) -> HourlyLog:
    """Aggregate a sorted event log into session hours.

    A session spans from a ``raw_session`` event to the next ``session_time``
    event of the same user; its duration is split over the clock hours it
    overlaps (half-open).  A session hour is any hour with positive session
    overlap or at least one counted event.  Hours with counted events but no
    session overlap get ``session_time = max(1, last - first)`` seconds.
    """
    r = log.records
    n = len(r)
    if n == 0:
        return HourlyLog(_empty_hours(), pd.DataFrame(columns=[*KEY, "zip", "seconds"]))
    ucat = pd.Categorical(r["user_id"].astype(str)) if not isinstance(r["user_id"].dtype, pd.CategoricalDtype) \
        else r["user_id"].cat.remove_unused_categories().array
    ucodes = np.asarray(ucat.codes).astype(np.int64)
    unames = np.asarray(ucat.categories, dtype=object).astype(str)
    name_rank = np.argsort(np.argsort(unames))
    ukey = name_rank[ucodes]
    ts = r["ts"].to_numpy().astype(np.int64)
    if n > 1:
        du = np.diff(ukey)
        bad = (du < 0) | ((du == 0) & (np.diff(ts) < 0))
        if bad.any():
            i = int(np.argmax(bad)) + 1
            raise InvalidInputError(f"event log not sorted by (user_id, ts) at record {i}")

    etype = pd.Categorical(r["event_type"], categories=list(schema.EVENT_TYPES))
    if (etype.codes < 0).any():
        bad = r["event_type"][etype.codes < 0].iloc[0]
        raise InvalidInputError(f"unknown event type {bad!r}")
    ecode = etype.codes.astype(np.int64)
    zcat = pd.Categorical(r["zip"].astype(str))
    zcode = zcat.codes.astype(np.int64)
    zips = np.asarray(zcat.categories, dtype=object)
    cell = (r["conn"].astype(str).to_numpy() == "cell")
    hour = ts // 3600
    open_code = schema.EVENT_TYPES.index(schema.SESSION_OPEN)
    close_code = schema.EVENT_TYPES.index(schema.SESSION_CLOSE)

    # pair each close with the latest open of the same user not yet closed
    is_open = ecode == open_code
    is_close = ecode == close_code
    pos = np.where(is_open, np.arange(n), -1)
    last_open = np.maximum.accumulate(pos)
    user_start = np.r_[0, np.flatnonzero(np.diff(ukey)) + 1]
    first_of_user = np.repeat(user_start, np.diff(np.r_[user_start, n]))
    close_idx = np.flatnonzero(is_close)
    o = last_open[close_idx]
    valid = o >= first_of_user[close_idx]
    close_idx, o = close_idx[valid], o[valid]
    # an open can only be closed once: keep the first close after it
    keep = np.r_[True, o[1:] != o[:-1]] if len(o) else np.zeros(0, bool)
    close_idx, o = close_idx[keep], o[keep]
    s_open, s_close = ts[o], ts[close_idx]
    s_user, s_zip, s_cell = ucodes[o], zcode[o], cell[o]

    # split sessions over clock hours
    h0 = s_open // 3600
    h1 = np.maximum((s_close - 1) // 3600, h0)
    span = h1 - h0 + 1
    rep = np.repeat(np.arange(len(o)), span)
    hh = h0[rep] + (np.arange(len(rep)) - np.repeat(np.cumsum(span) - span, span))
    lo = np.maximum(s_open[rep], hh * 3600)
    hi = np.minimum(s_close[rep], (hh + 1) * 3600)
    secs = np.maximum(hi - lo, 0)
    pos_secs = secs > 0
    seg = pd.DataFrame({"u": s_user[rep][pos_secs], "h": hh[pos_secs], "z": s_zip[rep][pos_secs],
                        "cell": s_cell[rep][pos_secs], "secs": secs[pos_secs]})

    # counted events
    counted = ~is_close
    cidx = np.flatnonzero(counted)
    count_col = np.array([schema.COUNT_FIELDS.index(schema.EVENT_TO_COUNT[e]) if e != schema.SESSION_CLOSE else -1
                          for e in schema.EVENT_TYPES])
    ev = pd.DataFrame({"u": ucodes[cidx], "h": hour[cidx], "c": count_col[ecode[cidx]],
                       "ts": ts[cidx], "z": zcode[cidx], "cell": cell[cidx], "li": r["loc_row"].to_numpy()[cidx]})

    keys = pd.concat([seg[["u", "h"]], ev[["u", "h"]]]).drop_duplicates()
    hours_idx = pd.MultiIndex.from_frame(keys[["u", "h"]]).sort_values()
    # sort by user name then hour
    order = np.lexsort((hours_idx.get_level_values(1), name_rank[hours_idx.get_level_values(0)]))
    hours_idx = hours_idx[order]
    nh = len(hours_idx)
    row_of = pd.Series(np.arange(nh), index=hours_idx)

    counts = np.zeros((nh, len(schema.COUNT_FIELDS)), dtype=np.float64)
    ev_row = row_of.reindex(pd.MultiIndex.from_arrays([ev["u"], ev["h"]])).to_numpy()
    np.add.at(counts, (ev_row, ev["c"].to_numpy()), 1.0)

    seg_row = row_of.reindex(pd.MultiIndex.from_arrays([seg["u"], seg["h"]])).to_numpy() if len(seg) else \
        np.zeros(0, dtype=np.int64)
    session_time = np.bincount(seg_row, weights=seg["secs"].to_numpy(), minlength=nh).astype(np.float64)
    cell_sessions = np.bincount(seg_row, weights=seg["cell"].to_numpy().astype(float), minlength=nh)
    all_sessions = np.bincount(seg_row, minlength=nh).astype(float)
    wifi_sessions = all_sessions - cell_sessions

    # fallbacks for hours with events but no session overlap
    ev_first = pd.Series(ev["ts"].to_numpy()).groupby(ev_row).min()
    ev_last = pd.Series(ev["ts"].to_numpy()).groupby(ev_row).max()
    ev_cell = pd.Series(ev["cell"].to_numpy().astype(float)).groupby(ev_row).mean()
    stray = np.flatnonzero(session_time == 0)
    if len(stray):
        session_time[stray] = np.maximum(1, (ev_last - ev_first).reindex(stray).fillna(0).to_numpy())
    conn_frac = np.where(all_sessions > 0, cell_sessions / np.maximum(all_sessions, 1),
                         ev_cell.reindex(np.arange(nh)).fillna(0).to_numpy())

    # location maxima over scored events in the hour
    loc = np.full((nh, schema.N_LOC_PROBS), np.nan)
    has = ev["li"].to_numpy() >= 0
    if has.any():
        lp = pd.DataFrame(log.loc_probs[ev["li"].to_numpy()[has]].astype(np.float64))
        mx = lp.groupby(ev_row[has]).max()
        loc[mx.index.to_numpy()] = mx.to_numpy()

    # zip exposure: session seconds, else event counts
    zt = seg.assign(row=seg_row).groupby(["row", "z"], sort=True)["secs"].sum().reset_index()
    covered = set(zt["row"])
    zev = ev.assign(row=ev_row)
    zev = zev[~zev["row"].isin(covered)].groupby(["row", "z"], sort=True).size().rename("secs").reset_index()
    zt = pd.concat([zt, zev]).sort_values(["row", "z"]).reset_index(drop=True)

    u_level = hours_idx.get_level_values(0).to_numpy()
    h_level = hours_idx.get_level_values(1).to_numpy().astype(np.int64)
    hours = pd.DataFrame({"user_id": unames[u_level].astype(str), "hour_index": h_level})
    hours = pd.concat([hours, pd.DataFrame(counts, columns=list(schema.COUNT_FIELDS))], axis=1)
    hours["session_time"] = session_time
    hours["cell_sessions"] = cell_sessions
    hours["wifi_sessions"] = wifi_sessions
    hours[schema.CONNECTIVITY_FIELD] = conn_frac
    for j, name in enumerate(schema.LOCATION_FIELDS):
        hours[f"raw_{name}"] = loc[:, j]
    zip_time = pd.DataFrame({
        "user_id": unames[u_level[zt["row"].to_numpy()]].astype(str),
        "hour_index": h_level[zt["row"].to_numpy()],
        "zip": zips[zt["z"].to_numpy()].astype(str),
        "seconds": zt["secs"].to_numpy().astype(float),
    })
    return HourlyLog(hours, zip_time)


def _empty_hours() -> pd.DataFrame:
    cols = [*KEY, *schema.COUNT_FIELDS, "session_time", "cell_sessions", "wifi_sessions",
            schema.CONNECTIVITY_FIELD, *[f"raw_{n}" for n in schema.LOCATION_FIELDS]]
    return pd.DataFrame({c: pd.Series(dtype=object if c == "user_id" else float) for c in cols})


def enrich_context(hourly: HourlyLog, tables: ContextTables, impute: bool = False) -> pd.DataFrame:
    """Attach weather, census, temporal and location context to each session hour.

    ZIP-level numeric fields are averaged with the seconds spent in each ZIP as
    weights; the weather label is taken from the ZIP with the most time.  With
    ``impute=False`` a missing weather cell raises; otherwise it is left NaN for
    the training-set imputation downstream.
    """
    hours = hourly.hours.copy()
    zt = hourly.zip_time
    if len(hours) == 0:
        for c in [*schema.WEATHER_NUMERIC, schema.WEATHER_LABEL, *schema.CENSUS_FIELDS, *schema.TEMPORAL_FIELDS,
                  *schema.LOCATION_FIELDS]:
            hours[c] = pd.Series(dtype=object if c == schema.WEATHER_LABEL else float)
        return hours

    w = tables.weather.set_index(["zip", "hour_index"])
    idx = pd.MultiIndex.from_arrays([zt["zip"].astype(str), zt["hour_index"].astype(np.int64)])
    wz = w.reindex(idx)
    miss = wz[list(schema.WEATHER_NUMERIC)].isna().any(axis=1).to_numpy()
    if miss.any() and not impute:
        i = int(np.argmax(miss))
        raise EnrichmentError(f"no weather row for (zip={zt['zip'].iloc[i]}, hour={int(zt['hour_index'].iloc[i])})")
    census = tables.census.set_index("zip")
    cz = census.reindex(zt["zip"].astype(str))
    if cz[list(schema.CENSUS_FIELDS)].isna().any(axis=1).any():
        bad = zt["zip"].astype(str)[cz[list(schema.CENSUS_FIELDS)].isna().any(axis=1).to_numpy()].iloc[0]
        raise EnrichmentError(f"no census row for zip {bad}")

    grp = pd.MultiIndex.from_arrays([zt["user_id"].astype(str), zt["hour_index"].astype(np.int64)])
    secs = zt["seconds"].to_numpy()
    key = pd.MultiIndex.from_frame(hours[KEY].astype({"user_id": str, "hour_index": np.int64}))

    def weighted(frame: pd.DataFrame, cols) -> pd.DataFrame:
        vals = frame[list(cols)].to_numpy(dtype=float)
        ok = ~np.isnan(vals)
        num = pd.DataFrame(np.where(ok, vals, 0.0) * secs[:, None], index=grp).groupby(level=[0, 1]).sum()
        den = pd.DataFrame(ok * secs[:, None], index=grp).groupby(level=[0, 1]).sum()
        out = num / den.where(den > 0)
        out.columns = list(cols)
        return out.reindex(key)

    wmean = weighted(wz, schema.WEATHER_NUMERIC)
    cmean = weighted(cz, schema.CENSUS_FIELDS)
    for c in schema.WEATHER_NUMERIC:
        hours[c] = wmean[c].to_numpy()
    for c in schema.CENSUS_FIELDS:
        hours[c] = cmean[c].to_numpy()

    # dominant zip's label (ties: first zip in sort order)
    lab = pd.DataFrame({"secs": secs, "label": wz[schema.WEATHER_LABEL].to_numpy()}, index=grp)
    lab = lab[lab["label"].notna()]
    lab = lab.sort_values("secs", ascending=False, kind="stable")
    dom = lab[~lab.index.duplicated(keep="first")]["label"]
    hours[schema.WEATHER_LABEL] = dom.reindex(key).to_numpy()

    add_temporal(hours)

    raw_loc = hours[[f"raw_{n}" for n in schema.LOCATION_FIELDS]].to_numpy()
    none = np.isnan(raw_loc).all(axis=1)
    loc = np.nan_to_num(raw_loc, nan=0.0)
    loc[none, -1] = 1.0
    for j, name in enumerate(schema.LOCATION_FIELDS):
        hours[name] = loc[:, j]
    hours = hours.drop(columns=[f"raw_{n}" for n in schema.LOCATION_FIELDS])
    return hours


def add_temporal(hours: pd.DataFrame, cap_hours: float = 168.0) -> None:
    """Temporal context in place: gap since the user's previous session hour (capped) and calendar fields."""
    h = hours["hour_index"].to_numpy().astype(np.int64)
    u = hours["user_id"].astype(str).to_numpy()
    prev_same = np.r_[False, u[1:] == u[:-1]]
    delta = np.full(len(h), cap_hours)
    delta[1:] = np.where(prev_same[1:], h[1:] - h[:-1], cap_hours)
    hours["time_delta"] = np.minimum(delta, cap_hours)
    dt = pd.to_datetime(h * 3600, unit="s", utc=True)
    hours["session_hourofday"] = dt.hour.to_numpy().astype(float)
    hours["session_weekday_num"] = (dt.weekday + 1).to_numpy().astype(float)
    hours["session_dayofmonth"] = dt.day.to_numpy().astype(float)
    hours["session_dayofyear"] = dt.dayofyear.to_numpy().astype(float)
