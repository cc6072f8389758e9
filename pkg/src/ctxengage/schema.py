"""Feature names, enumerations and the column manifest shared by every stage."""

from __future__ import annotations

# The 29 behavioral quantities, in the order of the feature listing.  Events in a
# log carry the name without the ``_cnt`` suffix; ``session_time`` events mark the
# close of a session opened by the preceding ``raw_session`` event.
BEHAVIOR_FIELDS = (
    "raw_session_cnt",
    "session_time",
    "app_open_cnt",
    "app_open_from_notify_cnt",
    "chat_view_cnt",
    "chat_send_cnt",
    "chat_create_cnt",
    "chat_snap_view_cnt",
    "direct_snap_create_cnt",
    "direct_snap_send_cnt",
    "direct_snap_view_cnt",
    "direct_snap_send_feed_cnt",
    "direct_snap_send_camera_cnt",
    "direct_snap_send_reply_cnt",
    "direct_snap_send_chat_cnt",
    "story_snap_post_cnt",
    "story_snap_view_cnt",
    "story_story_view_cnt",
    "story_snap_feed_view_cnt",
    "discover_snap_feed_view_cnt",
    "discover_snap_for_you_view_cnt",
    "discover_snap_subscription_view_cnt",
    "discover_snap_friends_view_cnt",
    "discover_snap_view_cnt",
    "spotlight_view_cnt",
    "creative_tools_open_cnt",
    "creative_tools_pick_cnt",
    "filter_lens_swipe_cnt",
    "filter_filter_swipe_cnt",
)
COUNT_FIELDS = tuple(f for f in BEHAVIOR_FIELDS if f != "session_time")
EVENT_TYPES = tuple(f[: -len("_cnt")] if f.endswith("_cnt") else f for f in BEHAVIOR_FIELDS)
SESSION_OPEN = "raw_session"
SESSION_CLOSE = "session_time"
# event type -> count column (session close markers are not counted)
EVENT_TO_COUNT = {e: f for e, f in zip(EVENT_TYPES, BEHAVIOR_FIELDS) if f != "session_time"}

ACTIVE_COMPONENTS = ("chat_send_cnt", "direct_snap_create_cnt", "direct_snap_send_cnt", "story_snap_post_cnt")
PASSIVE_COMPONENTS = ("story_story_view_cnt", "discover_snap_view_cnt", "spotlight_view_cnt")
CREATIVE_COMPONENTS = (
    "creative_tools_open_cnt",
    "creative_tools_pick_cnt",
    "filter_lens_swipe_cnt",
    "filter_filter_swipe_cnt",
)

DERIVED_FIELDS = (
    "chat_act_pass_ratio",
    "chat_act_pass_diff",
    "snap_act_pass_ratio",
    "snap_act_pass_diff",
    "story_act_pass_ratio",
    "story_act_pass_diff",
    "comp_score_act",
    "comp_score_pass",
    "comp_score_create",
    "act_pass_ratio",
    "act_pass_diff",
    "create_pass_ratio",
    "create_pass_diff",
    "act_create_pass_ratio",
    "act_create_pass_diff",
)

WEATHER_NUMERIC = (
    "temp",
    "feels_like",
    "pressure",
    "humidity",
    "temp_min",
    "temp_max",
    "wind_speed",
    "wind_deg",
    "clouds",
)
WEATHER_LABEL = "weather_label"
WEATHER_LABELS = ("clear", "haze", "rain", "mist", "smoke", "snow", "clouds", "fog", "drizzle", "dust")

CENSUS_FIELDS = (
    "people_per_unit",
    "male_perc",
    "race_white_perc",
    "race_black_perc",
    "race_native_perc",
    "race_asian_perc",
    "race_hispanic_perc",
    "race_more_perc",
    "age_5_to_9_perc",
    "age_10_to_14_perc",
    "age_15_to_19_perc",
    "age_20_to_24_perc",
    "age_25_to_34_perc",
    "age_35_to_44_perc",
    "age_45_to_54_perc",
    "avg_household_size",
    "med_inc",
    "marriage_married",
    "marriage_never_married",
)
CENSUS_PERCENT_FIELDS = tuple(f for f in CENSUS_FIELDS if f.endswith("_perc") or f.startswith("marriage_"))

TEMPORAL_FIELDS = (
    "time_delta",
    "session_hourofday",
    "session_weekday_num",
    "session_dayofmonth",
    "session_dayofyear",
)

LOCATION_CATEGORIES = (
    "event",
    "travel",
    "education",
    "nightlife",
    "residence",
    "food_beverage",
    "shops_services",
    "arts_entertainment",
    "outdoors_recreation",
    "other",
)
LOCATION_FIELDS = tuple(f"loc_{c}_prob" for c in LOCATION_CATEGORIES) + ("missing",)
N_LOC_PROBS = len(LOCATION_FIELDS)  # 10 categories + the classifier's "missing" class

CONNECTIVITY_FIELD = "connectivity_fraction"

BRACKETS = ("behavioral", "census", "weather", "temporal", "location", "connectivity")
CONTEXT_BRACKETS = BRACKETS[1:]

SCHEMA_VERSION = 1
PUBLISHED_PREDICTOR_COUNT = 183
PUBLISHED_CONTEXT_COUNT = 56
