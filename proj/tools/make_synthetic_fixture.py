#!/usr/bin/env python3
"""Writes the synthetic sensing fixture under data/fixtures/.

Two small cohorts with day-level summaries: a campus-style dataset with
academic context notes and a multi-year-style dataset that encodes missing
values as NA or -1. Values follow per-participant routines with noise and a
few injected low days so every anomaly type yields flags.

The output is committed; rerun only to change the fixture:
    python3 tools/make_synthetic_fixture.py
"""

import csv
import datetime as dt
import json
import pathlib
import random

ROOT = pathlib.Path(__file__).resolve().parent.parent / "data" / "fixtures"
START = dt.date(2018, 3, 26)
DAYS = 70

NOTES = [
    "",
    "",
    "",
    "midterm, chem 101",
    "project \"milestone\" due",
    "lab report due",
    "career fair",
    "spring break",
]


def maybe(rng, p_missing, value):
    return None if rng.random() < p_missing else value


def campus(rng):
    rows = []
    for p in range(1, 7):
        pid = f"u{p:02d}"
        steps_mu = rng.uniform(5000, 11000)
        sleep_mu = rng.uniform(6.2, 8.0)
        affect_mu = rng.uniform(2.5, 3.8)
        for d in range(DAYS):
            day = START + dt.timedelta(days=d)
            dip = rng.random() < 0.08
            steps = max(0, rng.gauss(steps_mu, steps_mu * 0.18) * (0.45 if dip else 1.0))
            sleep = max(0.5, rng.gauss(sleep_mu, 0.7) - (2.0 if rng.random() < 0.07 else 0.0))
            affect = min(5, max(1, rng.gauss(affect_mu, 0.5) - (1.0 if rng.random() < 0.07 else 0.0)))
            rows.append({
                "participant_id": pid,
                "date": day.isoformat(),
                "steps": maybe(rng, 0.05, round(steps)),
                "sleep_hours": maybe(rng, 0.08, round(sleep, 2)),
                "affect_score": maybe(rng, 0.45, round(affect, 1)),
                "conversation_minutes": maybe(rng, 0.1, round(max(0, rng.gauss(95, 30)), 1)),
                "phone_unlocks": maybe(rng, 0.05, max(0, round(rng.gauss(70, 20)))),
                "screen_minutes": maybe(rng, 0.05, round(max(0, rng.gauss(210, 60)), 1)),
                "ambient_light_lux": maybe(rng, 0.2, round(max(0, rng.gauss(180, 70)), 1)),
                "deadline_today": rng.choice(["yes", "no", "no", "no"]),
                "calendar_note": rng.choice(NOTES),
            })
    return rows


def multiyear(rng):
    rows = []
    for p in range(1, 7):
        pid = f"g{p:03d}"
        steps_mu = rng.uniform(4000, 9000)
        sleep_mu = rng.uniform(380, 470)
        affect_mu = rng.uniform(8, 14)
        for d in range(DAYS):
            day = START + dt.timedelta(days=d)
            if rng.random() < 0.03:
                continue  # no row at all for this day
            dip = rng.random() < 0.08
            steps = max(0, rng.gauss(steps_mu, steps_mu * 0.2) * (0.4 if dip else 1.0))
            sleep = max(30, rng.gauss(sleep_mu, 40) - (120 if rng.random() < 0.07 else 0))
            affect = max(0, rng.gauss(affect_mu, 2.0) - (5 if rng.random() < 0.07 else 0))
            rows.append({
                "pid": pid,
                "day": day.isoformat(),
                "steps": maybe(rng, 0.06, round(steps)),
                "sleep_minutes": maybe(rng, 0.08, round(sleep)),
                "pa_score": maybe(rng, 0.4, round(affect, 1)),
                "call_count": maybe(rng, 0.1, max(0, round(rng.gauss(4, 2)))),
                "screen_unlocks": maybe(rng, 0.06, max(0, round(rng.gauss(60, 18)))),
                "bluetooth_devices": maybe(rng, 0.15, max(0, round(rng.gauss(12, 5)))),
                "wifi_locations": maybe(rng, 0.15, max(0, round(rng.gauss(3, 1.2)))),
                "location_entropy": maybe(rng, 0.15, round(max(0, rng.gauss(1.2, 0.4)), 3)),
            })
    return rows


def write_csv(path, rows, missing_cell):
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for i, r in enumerate(rows):
            cells = []
            for k in fields:
                v = r[k]
                cells.append(missing_cell(i, k) if v is None else v)
            w.writerow(cells)


def channel(name, kind="numeric", units="", sampling="daily"):
    return {"name": name, "value_kind": kind, "units": units, "sampling": sampling}


def main():
    rng = random.Random(20180326)
    (ROOT / "profiles").mkdir(parents=True, exist_ok=True)

    campus_profile = {
        "dataset_name": "StudentLife-like",
        "participant_column": "participant_id",
        "date_column": "date",
        "channel_specs": [
            channel("steps", units="steps/day"),
            channel("sleep_hours", units="hours"),
            channel("affect_score", units="1-5 EMA", sampling="intermittent"),
            channel("conversation_minutes", units="minutes"),
            channel("phone_unlocks", units="count"),
            channel("screen_minutes", units="minutes"),
            channel("ambient_light_lux", units="lux"),
            channel("deadline_today", kind="categorical"),
            channel("calendar_note", kind="text"),
        ],
        "tier_map": {
            "E1": ["steps", "sleep_hours", "affect_score"],
            "E2": ["steps", "sleep_hours", "affect_score", "conversation_minutes", "phone_unlocks", "screen_minutes"],
            "E3": ["steps", "sleep_hours", "affect_score", "conversation_minutes", "phone_unlocks", "screen_minutes",
                   "ambient_light_lux", "deadline_today", "calendar_note"],
        },
        "anomaly_metrics": [
            {"metric_name": "activity", "source_channel": "steps"},
            {"metric_name": "sleep", "source_channel": "sleep_hours"},
            {"metric_name": "affect", "source_channel": "affect_score"},
        ],
        "context_kind": "participant_linked",
    }
    multiyear_profile = {
        "dataset_name": "GLOBEM-like",
        "participant_column": "pid",
        "date_column": "day",
        "channel_specs": [
            channel("steps", units="steps/day"),
            channel("sleep_minutes", units="minutes"),
            channel("pa_score", units="PANAS positive affect", sampling="intermittent"),
            channel("call_count", units="count"),
            channel("screen_unlocks", units="count"),
            channel("bluetooth_devices", units="unique devices"),
            channel("wifi_locations", units="unique access points"),
            channel("location_entropy", units="nats"),
        ],
        "tier_map": {
            "E1": ["steps", "sleep_minutes", "pa_score"],
            "E2": ["steps", "sleep_minutes", "pa_score", "call_count", "screen_unlocks"],
            "E3": ["steps", "sleep_minutes", "pa_score", "call_count", "screen_unlocks", "bluetooth_devices",
                   "wifi_locations", "location_entropy"],
        },
        "anomaly_metrics": [
            {"metric_name": "activity", "source_channel": "steps"},
            {"metric_name": "sleep", "source_channel": "sleep_minutes"},
            {"metric_name": "affect", "source_channel": "pa_score"},
        ],
        "context_kind": "cohort_level",
        "missing_sentinels": [-1],
    }
    for name, prof in [("studentlife_like", campus_profile), ("globem_like", multiyear_profile)]:
        (ROOT / "profiles" / f"{name}.json").write_text(json.dumps(prof, indent=2) + "\n")

    write_csv(ROOT / "studentlife_like.csv", campus(rng), lambda i, k: "")
    write_csv(ROOT / "globem_like.csv", multiyear(rng), lambda i, k: "NA" if (i + len(k)) % 2 else "-1")


if __name__ == "__main__":
    main()
