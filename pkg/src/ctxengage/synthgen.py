"""Synthetic users, context tables and in-app event logs with planted structure.

Every user-hour carries a latent active-vs-passive propensity

    s = bias + mood + sum(coefficient * cue) + carry * ewma(past context terms)

where ``mood`` is an AR(1) process and the cues are the hour's connectivity,
location category, time of day, weekday, weather and census profile.  The
carry-over term is an exponentially weighted average of the context part of
``s`` over the user's previous session hours, so recent context has a short,
decaying after-effect.  Event
counts are Poisson with log-linear rates: active event types are scaled by
``exp(+s/2)``, passive ones by ``exp(-s/2)``.  With the default coefficients the
mobile-data cue dominates, so downstream models that see connectivity should
recover a large share of explained variance.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.signal import lfilter

from . import schema

START_TS = 1625529600  # 2021-07-06 00:00:00 UTC
START_HOUR = START_TS // 3600

ACTIVE_EVENTS = (
    "chat_send",
    "chat_create",
    "direct_snap_create",
    "direct_snap_send",
    "direct_snap_send_feed",
    "direct_snap_send_camera",
    "direct_snap_send_reply",
    "direct_snap_send_chat",
    "story_snap_post",
)
PASSIVE_EVENTS = (
    "story_snap_view",
    "story_story_view",
    "story_snap_feed_view",
    "discover_snap_feed_view",
    "discover_snap_for_you_view",
    "discover_snap_subscription_view",
    "discover_snap_friends_view",
    "discover_snap_view",
    "spotlight_view",
)

# population mean of the expected count per session hour at neutral propensity
POPULATION_RATES = {
    "raw_session": 0.22,  # session-hour onset rate per clock hour (diurnally reweighted)
    "session_time": 0.0,  # close markers follow sessions, no rate of their own
    "app_open": 1.2,
    "app_open_from_notify": 0.5,
    "chat_view": 2.0,
    "chat_send": 2.2,
    "chat_create": 0.4,
    "chat_snap_view": 0.5,
    "direct_snap_create": 1.0,
    "direct_snap_send": 1.3,
    "direct_snap_view": 1.0,
    "direct_snap_send_feed": 0.2,
    "direct_snap_send_camera": 0.3,
    "direct_snap_send_reply": 0.2,
    "direct_snap_send_chat": 0.15,
    "story_snap_post": 0.25,
    "story_snap_view": 0.5,
    "story_story_view": 2.0,
    "story_snap_feed_view": 0.3,
    "discover_snap_feed_view": 0.2,
    "discover_snap_for_you_view": 0.2,
    "discover_snap_subscription_view": 0.15,
    "discover_snap_friends_view": 0.15,
    "discover_snap_view": 1.2,
    "spotlight_view": 1.6,
    "creative_tools_open": 0.3,
    "creative_tools_pick": 0.2,
    "filter_lens_swipe": 0.4,
    "filter_filter_swipe": 0.2,
}

PLACES = ("home", "work", "out")
OUT_CATEGORIES = (
    "event",
    "travel",
    "nightlife",
    "food_beverage",
    "shops_services",
    "arts_entertainment",
    "outdoors_recreation",
)
WORK_CATEGORIES = ("education", "shops_services", "other")

DEFAULT_COEFFICIENTS = {
    "cell": 1.1,
    "loc_event": 0.5,
    "loc_travel": -0.3,
    "loc_education": -0.4,
    "loc_nightlife": 0.7,
    "loc_residence": -0.3,
    "loc_food_beverage": 0.4,
    "loc_shops_services": 0.0,
    "loc_arts_entertainment": 0.3,
    "loc_outdoors_recreation": 0.3,
    "loc_other": 0.0,
    "hour_cos": 0.35,
    "hour_sin": 0.15,
    "weekend": 0.25,
    "temp": 0.2,
    "rain": -0.35,
    "census_youth": 0.05,
}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generative model; defaults give the desk-scale cohort."""

    n_users: int = 2000
    span_days: int = 30
    n_zips: int = 60
    seed: int = 42
    mood_ar: float = 0.8
    mood_sd: float = 0.4
    bias_sd: float = 1.3
    context_carry: float = 0.6  # weight of the after-effect of previous session hours' context
    carry_decay: float = 0.5  # per-session-hour decay of that after-effect
    coefficient_sd: float = 0.2
    coefficients: dict = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    rate_sd: float = 0.35
    location_share_prob: float = 0.75
    second_zip_prob: float = 0.25
    missingness_rate: float = 0.0
    contamination: float = 0.0005  # fraction of session hours hit by Pareto bursts
    pareto_shape: float = 1.2


@dataclass
class UserProfile:
    user_id: str
    base_rates: dict
    context_coefficients: dict
    diurnal_phase: np.ndarray
    home_zip: str
    work_zip: str
    propensity: float = 0.0
    shares_location: bool = True
    work_category: str = "other"

    def __eq__(self, other):
        if not isinstance(other, UserProfile):
            return NotImplemented
        return profile_to_dict(self) == profile_to_dict(other)


def profile_to_dict(p: UserProfile) -> dict:
    d = dataclasses.asdict(p)
    d["diurnal_phase"] = [float(v) for v in p.diurnal_phase]
    return d


@dataclass
class ContextTables:
    """Weather grid per (zip, hour_index) and census row per zip.

    ``deleted`` lists weather cells removed by the missingness knob; they are
    absent from ``weather`` but excused from the simulator's coverage check.
    """

    weather: pd.DataFrame
    census: pd.DataFrame
    zip_universe: list
    start_hour: int = START_HOUR
    n_hours: int = 0
    deleted: frozenset = frozenset()

    def weather_grid(self):
        """Dense (zip, hour) arrays; missing cells forward-filled from the previous hour."""
        zi = {z: i for i, z in enumerate(self.zip_universe)}
        n_z = len(self.zip_universe)
        num = np.full((n_z, self.n_hours, len(schema.WEATHER_NUMERIC)), np.nan)
        lab = np.full((n_z, self.n_hours), -1, dtype=np.int16)
        w = self.weather
        r = w["zip"].map(zi).to_numpy()
        c = w["hour_index"].to_numpy() - self.start_hour
        ok = (c >= 0) & (c < self.n_hours) & ~pd.isna(r)
        r = r[ok].astype(int)
        c = c[ok]
        num[r, c] = w.loc[ok, list(schema.WEATHER_NUMERIC)].to_numpy(dtype=float)
        lab[r, c] = pd.Categorical(w.loc[ok, schema.WEATHER_LABEL], categories=schema.WEATHER_LABELS).codes
        for h in range(1, self.n_hours):
            gap = lab[:, h] < 0
            if gap.any():
                num[gap, h] = num[gap, h - 1]
                lab[gap, h] = lab[gap, h - 1]
        return num, lab


@dataclass
class EventRecord:
    user_id: str
    ts: int
    event_type: str
    zip: str
    conn: str
    loc_probs: tuple | None = None


@dataclass
class EventLog:
    """Columnar event log sorted by (user_id, ts).

    ``records`` holds one row per event; ``loc_row`` indexes ``loc_probs`` (an
    ``(n, 11)`` array) or is -1 when the event carries no location scores.
    """

    records: pd.DataFrame
    loc_probs: np.ndarray
    span_days: int
    start_hour: int = START_HOUR

    def __len__(self):
        return len(self.records)

    def iter_records(self) -> Iterator[EventRecord]:
        r = self.records
        for u, t, e, z, c, li in zip(r.user_id, r.ts, r.event_type, r.zip, r.conn, r.loc_row):
            yield EventRecord(str(u), int(t), str(e), str(z), str(c),
                              None if li < 0 else tuple(float(v) for v in self.loc_probs[li]))

    @classmethod
    def from_records(cls, records: Iterable[EventRecord], span_days: int = 1,
                     start_hour: int = START_HOUR) -> "EventLog":
        rows, locs = [], []
        for rec in records:
            li = -1
            if rec.loc_probs is not None:
                li = len(locs)
                locs.append(rec.loc_probs)
            rows.append((rec.user_id, rec.ts, rec.event_type, rec.zip, rec.conn, li))
        df = pd.DataFrame(rows, columns=["user_id", "ts", "event_type", "zip", "conn", "loc_row"])
        df["ts"] = df["ts"].astype(np.int64)
        df["loc_row"] = df["loc_row"].astype(np.int64)
        loc = np.asarray(locs, dtype=np.float32).reshape(-1, schema.N_LOC_PROBS)
        return cls(df, loc, span_days, start_hour)


def zip_codes(n_zips: int) -> list[str]:
    return [f"{10001 + 37 * i:05d}" for i in range(n_zips)]


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def generate_cohort(n_users: int, seed: int, config: SynthConfig | None = None) -> list[UserProfile]:
    """Draw ``n_users`` profiles; user ``i`` depends only on ``(seed, i)``."""
    if n_users < 1:
        raise ValueError(f"n_users must be >= 1, got {n_users}")
    cfg = config or SynthConfig()
    zips = zip_codes(cfg.n_zips)
    return [_draw_profile(i, seed, cfg, zips) for i in range(n_users)]


def _draw_profile(i: int, seed: int, cfg: SynthConfig, zips: Sequence[str]) -> UserProfile:
    rng = _substream(seed, 0, i)
    rates = {}
    for ev, mu in POPULATION_RATES.items():
        rates[ev] = float(mu * math.exp(rng.normal(0.0, cfg.rate_sd) - cfg.rate_sd**2 / 2)) if mu > 0 else 0.0
    coefs = {}
    for cue, mu in cfg.coefficients.items():
        coefs[cue] = float(mu + (rng.normal(0.0, cfg.coefficient_sd * abs(mu)) if mu else 0.0))
    # two activity peaks (midday and evening) with per-user offsets
    hours = np.arange(24)
    peaks = [12 + rng.normal(0, 1.5), 20 + rng.normal(0, 1.5)]
    w = 0.15 + sum(a * np.exp(np.cos(2 * np.pi * (hours - p) / 24) * 3.0 - 3.0)
                   for a, p in zip(rng.uniform(0.5, 1.0, 2), peaks))
    w[(hours >= 1) & (hours <= 6)] *= 0.15
    w = w / w.sum()
    home, work = rng.choice(len(zips), 2, replace=len(zips) < 2)
    return UserProfile(
        user_id=f"u{i:06d}",
        base_rates=rates,
        context_coefficients=coefs,
        diurnal_phase=w,
        home_zip=zips[home],
        work_zip=zips[work],
        propensity=float(rng.normal(0.0, cfg.bias_sd)),
        shares_location=bool(rng.random() < cfg.location_share_prob),
        work_category=str(WORK_CATEGORIES[rng.integers(len(WORK_CATEGORIES))]),
    )


def generate_context_tables(n_zips: int, n_hours: int, seed: int, config: SynthConfig | None = None,
                            start_hour: int = START_HOUR) -> ContextTables:
    """Weather for every (zip, hour) and one census row per zip."""
    if n_zips < 1 or n_hours < 1:
        raise ValueError(f"n_zips and n_hours must be >= 1, got {n_zips}, {n_hours}")
    cfg = config or SynthConfig()
    rng = _substream(seed, 1)
    zips = zip_codes(n_zips)
    census = _draw_census(rng, zips)

    hours = start_hour + np.arange(n_hours)
    hod = hours % 24
    base = rng.normal(296.0, 4.0, n_zips)[:, None]
    diurnal = 5.0 * np.cos(2 * np.pi * (hod - 21) / 24)[None, :]  # warmest ~21:00 UTC

    def ar_field(rho, sd):
        out = np.empty((n_zips, n_hours))
        out[:, 0] = rng.normal(0, sd, n_zips)
        innov = rng.normal(0, sd * math.sqrt(1 - rho**2), (n_zips, n_hours))
        for h in range(1, n_hours):
            out[:, h] = rho * out[:, h - 1] + innov[:, h]
        return out

    front = ar_field(0.97, 3.0)
    wet = ar_field(0.9, 1.0)
    temp = base + diurnal + front
    humidity = np.clip(60 + 18 * wet - 1.2 * (temp - 296) + rng.normal(0, 4, temp.shape), 5, 100)
    clouds = np.clip(45 + 35 * wet + rng.normal(0, 10, temp.shape), 0, 100)
    wind = np.abs(3.5 + 1.5 * ar_field(0.9, 1.0) + rng.normal(0, 0.5, temp.shape))
    wind_deg = np.mod(180 + 90 * ar_field(0.95, 1.0), 360)
    pressure = 1013 + 6 * ar_field(0.98, 1.0) - 3 * wet
    spread = np.abs(rng.normal(0, 1.5, temp.shape))
    temp_min = temp - spread
    temp_max = temp + np.abs(rng.normal(0, 1.5, temp.shape))
    feels = temp + 0.04 * (humidity - 50) - 0.3 * wind

    label = np.where(wet > 1.1, schema.WEATHER_LABELS.index("rain"),
                     np.where(wet > 0.7, schema.WEATHER_LABELS.index("drizzle"),
                              np.where(clouds > 60, schema.WEATHER_LABELS.index("clouds"),
                                       schema.WEATHER_LABELS.index("clear"))))
    rare = [schema.WEATHER_LABELS.index(x) for x in ("haze", "mist", "smoke", "snow", "fog", "dust")]
    flip = rng.random(temp.shape) < 0.04
    label = np.where(flip, np.asarray(rare)[rng.integers(0, len(rare), temp.shape)], label)

    grid = {
        "temp": temp, "feels_like": feels, "pressure": pressure, "humidity": humidity,
        "temp_min": temp_min, "temp_max": temp_max, "wind_speed": wind, "wind_deg": wind_deg,
        "clouds": clouds,
    }
    weather = pd.DataFrame({
        "zip": np.repeat(zips, n_hours),
        "hour_index": np.tile(hours, n_zips),
        **{k: np.round(v.ravel(), 3) for k, v in grid.items()},
        schema.WEATHER_LABEL: np.asarray(schema.WEATHER_LABELS)[label.ravel()],
    })
    # rounding may break temp_min <= temp <= temp_max by one ulp of the grid
    weather["temp_min"] = np.minimum(weather["temp_min"], weather["temp"])
    weather["temp_max"] = np.maximum(weather["temp_max"], weather["temp"])

    deleted = frozenset()
    if cfg.missingness_rate > 0:
        drop = rng.random(len(weather)) < cfg.missingness_rate
        deleted = frozenset(zip(weather.loc[drop, "zip"], weather.loc[drop, "hour_index"].astype(int)))
        weather = weather.loc[~drop].reset_index(drop=True)
    return ContextTables(weather, census, zips, start_hour, n_hours, deleted)


def _draw_census(rng: np.random.Generator, zips: Sequence[str]) -> pd.DataFrame:
    n = len(zips)
    ppu = rng.uniform(1.8, 3.4, n)
    race = rng.dirichlet([6, 1.5, 0.3, 1.0, 2.0, 0.5], n) * 100
    ages = rng.dirichlet([6, 6, 7, 8, 14, 13, 13], n) * rng.uniform(65, 80, n)[:, None]
    married = rng.uniform(30, 60, n)
    never = rng.uniform(20, 95 - married)
    cols = {
        "zip": list(zips),
        "people_per_unit": ppu,
        "male_perc": np.clip(rng.normal(49.5, 2.0, n), 0, 100),
        "race_white_perc": race[:, 0],
        "race_black_perc": race[:, 1],
        "race_native_perc": race[:, 2],
        "race_asian_perc": race[:, 3],
        "race_hispanic_perc": race[:, 4],
        "race_more_perc": race[:, 5],
        **{name: ages[:, j] for j, name in enumerate(schema.CENSUS_FIELDS[8:15])},
        "avg_household_size": ppu * rng.uniform(0.95, 1.05, n),
        "med_inc": np.round(np.exp(rng.normal(math.log(62000), 0.35, n))),
        "marriage_married": married,
        "marriage_never_married": never,
    }
    df = pd.DataFrame(cols)
    num = list(schema.CENSUS_FIELDS)
    df[num] = df[num].round(4)
    return df


def _youth_score(census: pd.DataFrame, zips: Sequence[str]) -> np.ndarray:
    c = census.set_index("zip").loc[list(zips)]
    youth = c["age_15_to_19_perc"] + c["age_20_to_24_perc"]
    sd = youth.std(ddof=0)
    return ((youth - youth.mean()) / (sd if sd > 0 else 1.0)).to_numpy()


def _check_coverage(tables: ContextTables, n_hours: int, cohort: Sequence[UserProfile]) -> None:
    zi = {z: i for i, z in enumerate(tables.zip_universe)}
    for z in sorted({p.home_zip for p in cohort} | {p.work_zip for p in cohort}):
        if z not in zi:
            raise ValueError(f"context tables do not cover (zip={z}, hour={tables.start_hour})")
    missing_census = set(tables.zip_universe) - set(tables.census["zip"])
    if missing_census:
        raise ValueError(f"context tables have no census row for zip {sorted(missing_census)[0]}")
    present = np.zeros((len(zi), n_hours), dtype=bool)
    w = tables.weather
    r = w["zip"].map(zi).to_numpy(dtype=float)
    c = w["hour_index"].to_numpy() - tables.start_hour
    ok = ~np.isnan(r) & (c >= 0) & (c < n_hours)
    present[r[ok].astype(int), c[ok]] = True
    for z, h in tables.deleted:
        if z in zi and 0 <= h - tables.start_hour < n_hours:
            present[zi[z], h - tables.start_hour] = True
    if not present.all():
        i, j = np.argwhere(~present)[0]
        raise ValueError(f"context tables do not cover (zip={tables.zip_universe[i]}, hour={tables.start_hour + j})")


def simulate(cohort: Sequence[UserProfile], tables: ContextTables, span_days: int, seed: int,
             config: SynthConfig | None = None, n_jobs: int = 1) -> EventLog:
    """Simulate ``span_days`` of events for every profile in ``cohort``.

    Per user-hour the count of event type ``k`` is Poisson with rate
    ``base_rate_k * exposure * exp(sign_k * s / 2)``; session onsets follow
    ``base_rate_raw_session * 24 * diurnal_weight``.  Output does not depend on
    ``n_jobs``.
    """
    if span_days < 1:
        raise ValueError(f"span_days must be >= 1, got {span_days}")
    cfg = config or SynthConfig()
    n_hours = span_days * 24
    _check_coverage(tables, n_hours, cohort)
    num, lab = tables.weather_grid()
    num, lab = num[:, :n_hours], lab[:, :n_hours]
    zi = {z: i for i, z in enumerate(tables.zip_universe)}
    world = _World(
        start_hour=tables.start_hour,
        n_hours=n_hours,
        temp_z=(num[:, :, 0] - 296.0) / 5.0,
        rain=np.isin(lab, [schema.WEATHER_LABELS.index("rain"), schema.WEATHER_LABELS.index("drizzle")]),
        youth=_youth_score(tables.census, tables.zip_universe),
        zip_index=zi,
    )
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_simulate_user)(p, world, seed, cfg, idx) for idx, p in enumerate(cohort)
    ) if n_jobs != 1 else [_simulate_user(p, world, seed, cfg, idx) for idx, p in enumerate(cohort)]
    return _assemble(parts, cohort, tables.zip_universe, span_days, tables.start_hour)


@dataclass
class _World:
    start_hour: int
    n_hours: int
    temp_z: np.ndarray
    rain: np.ndarray
    youth: np.ndarray
    zip_index: dict


_EV_INDEX = {e: i for i, e in enumerate(schema.EVENT_TYPES)}
_COUNT_EVENTS = [e for e in schema.EVENT_TYPES if e not in (schema.SESSION_CLOSE,)]
_SIGN = np.array([1.0 if e in ACTIVE_EVENTS else -1.0 if e in PASSIVE_EVENTS else 0.0
                  for e in _COUNT_EVENTS if e != schema.SESSION_OPEN])
_NON_SESSION = [e for e in _COUNT_EVENTS if e != schema.SESSION_OPEN]


def _place_chain(rng, n_hours, start_hour):
    """Home/work/out per clock hour from a time-of-day dependent Markov chain."""
    hod = (start_hour + np.arange(n_hours)) % 24
    dow = ((start_hour + np.arange(n_hours)) // 24 + 3) % 7  # 1970-01-01 was a Thursday
    place = np.zeros(n_hours, dtype=np.int8)
    u = rng.random(n_hours)
    cur = 0
    for h in range(n_hours):
        weekend = dow[h] >= 5
        if 8 <= hod[h] < 17 and not weekend:
            probs = {0: (0.55, 0.4, 0.05), 1: (0.03, 0.9, 0.07), 2: (0.1, 0.3, 0.6)}[cur]
        elif 17 <= hod[h] or hod[h] < 1 or (weekend and 10 <= hod[h]):
            probs = {0: (0.8, 0.0, 0.2), 1: (0.4, 0.35, 0.25), 2: (0.3, 0.0, 0.7)}[cur]
        else:
            probs = {0: (0.97, 0.0, 0.03), 1: (0.5, 0.45, 0.05), 2: (0.5, 0.0, 0.5)}[cur]
        cur = 0 if u[h] < probs[0] else 1 if u[h] < probs[0] + probs[1] else 2
        place[h] = cur
    return place, hod, dow


def _simulate_user(p: UserProfile, world: _World, seed: int, cfg: SynthConfig, idx: int):
    rng = _substream(seed, 2, idx)
    H = world.n_hours
    place, hod, dow = _place_chain(rng, H, world.start_hour)
    n_z = len(world.zip_index)
    home_i, work_i = world.zip_index[p.home_zip], world.zip_index[p.work_zip]
    out_zip = rng.integers(0, n_z, H)
    zip_main = np.where(place == 0, home_i, np.where(place == 1, work_i, out_zip))
    out_cat = rng.integers(0, len(OUT_CATEGORIES), H)
    # out-visits keep their category while the user stays out
    for h in range(1, H):
        if place[h] == 2 and place[h - 1] == 2 and rng.random() < 0.7:
            out_cat[h] = out_cat[h - 1]
            out_zip[h] = out_zip[h - 1]
    zip_main = np.where(place == 0, home_i, np.where(place == 1, work_i, out_zip))
    category = np.where(place == 0, schema.LOCATION_CATEGORIES.index("residence"),
                        np.where(place == 1, schema.LOCATION_CATEGORIES.index(p.work_category),
                                 np.array([schema.LOCATION_CATEGORIES.index(c) for c in OUT_CATEGORIES])[out_cat]))
    p_cell = np.array([0.08, 0.2, 0.85])[place]

    # activity: session-hour onsets and session counts
    rate = p.base_rates[schema.SESSION_OPEN] * 24.0 * p.diurnal_phase[hod] * np.where(place == 2, 1.2, 1.0)
    active = rng.random(H) < 1.0 - np.exp(-rate)
    hrs = np.flatnonzero(active)
    n = len(hrs)
    if n == 0:
        return None
    n_sess = 1 + rng.poisson(1.6, n)

    # per-session connectivity; the hour's cue is the fraction of cell sessions
    sess_hour = np.repeat(np.arange(n), n_sess)
    cell_s = rng.random(len(sess_hour)) < p_cell[hrs][sess_hour]
    cell_frac = np.bincount(sess_hour, weights=cell_s, minlength=n) / n_sess

    mood = np.empty(H)
    mood[0] = rng.normal(0, cfg.mood_sd)
    innov = rng.normal(0, cfg.mood_sd * math.sqrt(1 - cfg.mood_ar**2), H)
    for h in range(1, H):
        mood[h] = cfg.mood_ar * mood[h - 1] + innov[h]

    c = p.context_coefficients
    cat = category[hrs]
    loc_coef = np.array([c.get(f"loc_{k}", 0.0) for k in schema.LOCATION_CATEGORIES])
    zh = zip_main[hrs]
    ctx = (c["cell"] * (cell_frac - 0.3)
           + loc_coef[cat]
           + c["hour_cos"] * np.cos(2 * np.pi * (hod[hrs] - 21) / 24)
           + c["hour_sin"] * np.sin(2 * np.pi * (hod[hrs] - 21) / 24)
           + c["weekend"] * (dow[hrs] >= 5)
           + c["temp"] * world.temp_z[zh, hrs]
           + c["rain"] * world.rain[zh, hrs]
           + c["census_youth"] * world.youth[zh])
    # carry[i] = decay * carry[i-1] + (1 - decay) * ctx[i-1]
    d = cfg.carry_decay
    carry = lfilter([0.0, 1.0 - d], [1.0, -d], ctx)
    s = p.propensity + mood[hrs] + ctx + cfg.context_carry * carry

    base = np.array([p.base_rates[e] for e in _NON_SESSION])
    exposure = n_sess / 2.6
    lam = base[None, :] * exposure[:, None] * np.exp(_SIGN[None, :] * s[:, None] / 2.0)
    counts = rng.poisson(lam)
    if cfg.contamination > 0:
        hit = rng.random(n) < cfg.contamination
        if hit.any():
            burst = 1.0 + 20.0 * rng.pareto(cfg.pareto_shape, (int(hit.sum()), counts.shape[1]))
            counts[hit] = np.round(counts[hit] * burst + burst).astype(counts.dtype)

    # sessions: consecutive, non-overlapping, inside the hour
    dur = np.clip(np.round(rng.lognormal(math.log(70), 0.8, len(sess_hour))), 5, 600).astype(np.int64)
    sess_zip = zip_main[hrs][sess_hour].copy()
    second = rng.random(len(sess_hour)) < cfg.second_zip_prob * (place[hrs][sess_hour] != 0)
    sess_zip[second] = rng.integers(0, n_z, int(second.sum()))
    first_in_hour = np.r_[0, np.cumsum(n_sess)[:-1]]
    rank = np.arange(len(sess_hour)) - first_in_hour[sess_hour]
    slots = 3600 // n_sess[sess_hour]
    dur = np.minimum(dur, slots - 1)
    offset = rank * slots + (rng.random(len(sess_hour)) * (slots - dur)).astype(np.int64)
    hour_ts = (world.start_hour + hrs).astype(np.int64) * 3600
    open_ts = hour_ts[sess_hour] + offset
    close_ts = open_ts + dur

    # location scores on session opens
    loc = None
    if p.shares_location:
        k = len(sess_hour)
        loc = rng.dirichlet(np.full(schema.N_LOC_PROBS, 0.3), k) * 0.4
        true_cat = cat[sess_hour]
        unsure = rng.random(k) < 0.15
        dom = np.where(unsure, schema.N_LOC_PROBS - 1, true_cat)
        loc[np.arange(k), dom] += rng.uniform(0.5, 0.6, k)
        loc = (loc / loc.sum(axis=1, keepdims=True)).astype(np.float32)

    # count events spread uniformly over the sessions of their hour
    ev_rows, ev_types = np.nonzero(counts)
    reps = counts[ev_rows, ev_types]
    ev_hour = np.repeat(ev_rows, reps)
    ev_type = np.repeat(np.array([_EV_INDEX[e] for e in _NON_SESSION])[ev_types], reps)
    pick = first_in_hour[ev_hour] + (rng.random(len(ev_hour)) * n_sess[ev_hour]).astype(np.int64)
    ev_ts = open_ts[pick] + (rng.random(len(ev_hour)) * (dur[pick] + 1)).astype(np.int64)
    ev_ts = np.minimum(ev_ts, close_ts[pick])

    ns = len(sess_hour)
    ts = np.concatenate([open_ts, ev_ts, close_ts])
    typ = np.concatenate([np.full(ns, _EV_INDEX[schema.SESSION_OPEN]), ev_type,
                          np.full(ns, _EV_INDEX[schema.SESSION_CLOSE])])
    zp = np.concatenate([sess_zip, sess_zip[pick], sess_zip])
    cl = np.concatenate([cell_s, cell_s[pick], cell_s])
    li = np.concatenate([np.arange(ns) if loc is not None else np.full(ns, -1),
                         np.full(len(ev_ts) + ns, -1)])
    # opens first, closes last within equal timestamps
    prio = np.concatenate([np.zeros(ns), np.ones(len(ev_ts)), np.full(ns, 2)])
    order = np.lexsort((prio, ts))
    return ts[order], typ[order], zp[order], cl[order], li[order], loc


def _assemble(parts, cohort, zips, span_days, start_hour) -> EventLog:
    ts_l, ty_l, zp_l, cl_l, li_l, us_l, loc_l = [], [], [], [], [], [], []
    n_loc = 0
    order = sorted(range(len(cohort)), key=lambda i: cohort[i].user_id)
    for i in order:
        part = parts[i]
        if part is None:
            continue
        ts, ty, zp, cl, li, loc = part
        ts_l.append(ts)
        ty_l.append(ty)
        zp_l.append(zp)
        cl_l.append(cl)
        li_l.append(np.where(li >= 0, li + n_loc, -1))
        us_l.append(np.full(len(ts), i, dtype=np.int32))
        if loc is not None:
            loc_l.append(loc)
            n_loc += len(loc)
    user_ids = [p.user_id for p in cohort]
    if ts_l:
        cat = lambda codes, cats: pd.Categorical.from_codes(np.concatenate(codes).astype(np.int32), categories=cats)
        df = pd.DataFrame({
            "user_id": cat(us_l, user_ids),
            "ts": np.concatenate(ts_l).astype(np.int64),
            "event_type": cat(ty_l, list(schema.EVENT_TYPES)),
            "zip": cat(zp_l, list(zips)),
            "conn": pd.Categorical.from_codes(np.concatenate(cl_l).astype(np.int8), categories=["wifi", "cell"]),
            "loc_row": np.concatenate(li_l).astype(np.int64),
        })
    else:
        df = pd.DataFrame({"user_id": pd.Categorical([], categories=user_ids),
                           "ts": np.array([], dtype=np.int64),
                           "event_type": pd.Categorical([], categories=list(schema.EVENT_TYPES)),
                           "zip": pd.Categorical([], categories=list(zips)),
                           "conn": pd.Categorical([], categories=["wifi", "cell"]),
                           "loc_row": np.array([], dtype=np.int64)})
    loc = np.concatenate(loc_l) if loc_l else np.zeros((0, schema.N_LOC_PROBS), dtype=np.float32)
    return EventLog(df, loc, span_days, start_hour)


# ---------------------------------------------------------------- file formats

EVENT_COLUMNS = ("user_id", "unix_ts_seconds", "event_type", "zip", "conn", "loc_probs")


def write_event_log(log: EventLog, path: str | Path) -> None:
    """One event per line: ``user_id,unix_ts_seconds,event_type,zip,conn,"p1,...,p11"``."""
    r = log.records
    loc_txt = np.array([",".join(f"{v:.6g}" for v in row) for row in log.loc_probs], dtype=object)
    li = r["loc_row"].to_numpy()
    loc_col = np.where(li >= 0, loc_txt[np.maximum(li, 0)] if len(loc_txt) else "", "")
    df = pd.DataFrame({
        "user_id": r["user_id"].astype(str),
        "unix_ts_seconds": r["ts"],
        "event_type": r["event_type"].astype(str),
        "zip": r["zip"].astype(str),
        "conn": r["conn"].astype(str),
        "loc_probs": loc_col,
    })
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# span_days={log.span_days} start_hour={log.start_hour}\n")
        df.to_csv(fh, index=False, header=True, lineterminator="\n")


def read_event_log(path: str | Path) -> EventLog:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    meta = dict(kv.split("=") for kv in first.lstrip("# ").split())
    df = pd.read_csv(path, skiprows=1, dtype={"user_id": "category", "zip": "category", "event_type": "category",
                                              "conn": "category", "loc_probs": str},
                     keep_default_na=False)
    missing = [c for c in EVENT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    has = (df["loc_probs"] != "").to_numpy()
    loc = np.array([[float(v) for v in s.split(",")] for s in df.loc[has, "loc_probs"]],
                   dtype=np.float32).reshape(-1, schema.N_LOC_PROBS)
    loc_row = np.full(len(df), -1, dtype=np.int64)
    loc_row[has] = np.arange(int(has.sum()))
    records = pd.DataFrame({
        "user_id": df["user_id"],
        "ts": df["unix_ts_seconds"].astype(np.int64),
        "event_type": df["event_type"],
        "zip": df["zip"],
        "conn": df["conn"],
        "loc_row": loc_row,
    })
    return EventLog(records, loc, int(meta["span_days"]), int(meta["start_hour"]))


def write_tables(tables: ContextTables, weather_path: str | Path, census_path: str | Path) -> None:
    cols = ["zip", "hour_index", *schema.WEATHER_NUMERIC, schema.WEATHER_LABEL]
    tables.weather[cols].to_csv(weather_path, index=False, lineterminator="\n", float_format="%.6g")
    tables.census[["zip", *schema.CENSUS_FIELDS]].to_csv(census_path, index=False, lineterminator="\n",
                                                         float_format="%.8g")


def read_tables(weather_path: str | Path, census_path: str | Path) -> ContextTables:
    weather = pd.read_csv(weather_path, dtype={"zip": str})
    census = pd.read_csv(census_path, dtype={"zip": str})
    for path, df, need in ((weather_path, weather, ["zip", "hour_index", *schema.WEATHER_NUMERIC, schema.WEATHER_LABEL]),
                           (census_path, census, ["zip", *schema.CENSUS_FIELDS])):
        missing = [c for c in need if c not in df.columns]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
    zips = list(census["zip"])
    start = int(weather["hour_index"].min())
    n_hours = int(weather["hour_index"].max()) - start + 1
    return ContextTables(weather, census, zips, start, n_hours)
