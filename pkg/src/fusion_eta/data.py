"""Synthetic trip data: generator, file format, filters, splits, batching.

A trip is a departure context plus an ordered sequence of road links.  The
generator draws per-link latent free-flow speeds and lengths, a time-of-day
congestion profile with two rush-hour dips, and per-driver speed factors;
travel time is the sum of per-link traversals and intersection delays with
multiplicative trip noise.  The observed ``speed_est_mps`` is the link's
road-condition speed (free flow times congestion) under observation noise —
deliberately blind to the driver factor, the way a historical road-speed
estimate would be.

Records serialize one JSON object per line with exact field names
``trip_id, driver_id, depart_ts, links[{link_id, length_m, speed_est_mps,
delay_s}], y_seconds``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .config import GeneratorConfig
from .errors import ValidationError
from .linalg import make_rng, spawn_rngs

SECONDS_PER_DAY = 86400
SLICE_SECONDS = 300
SLICES_PER_DAY = 288
# drop thresholds: keep y >= 60 s and overall speed <= 120 km/h
MIN_TRIP_SECONDS = 60.0
MAX_SPEED_MPS = 120.0 / 3.6
# per-link real features fed to models, in order
LINK_FEATURE_NAMES = ("length_m", "speed_est_mps", "delay_s", "naive_traversal_s")


@dataclass(slots=True)
class LinkObs:
    link_id: int
    length_m: float
    speed_est_mps: float
    delay_s: float

    def validate(self, num_links: int | None = None) -> None:
        if self.length_m <= 0 or self.speed_est_mps <= 0:
            raise ValidationError(f"link {self.link_id}: length and speed must be > 0")
        if self.delay_s < 0:
            raise ValidationError(f"link {self.link_id}: delay must be >= 0")
        if self.link_id < 0 or (num_links is not None and self.link_id >= num_links):
            raise ValidationError(f"link id {self.link_id} outside [0, {num_links})")


@dataclass(slots=True)
class TripRecord:
    trip_id: str
    driver_id: int
    depart_ts: int
    links: list[LinkObs]
    y_seconds: float

    def validate(self, num_links: int | None = None) -> None:
        if not self.links:
            raise ValidationError(f"trip {self.trip_id}: empty link sequence")
        if self.y_seconds <= 0:
            raise ValidationError(f"trip {self.trip_id}: y_seconds must be > 0")
        if self.driver_id < 0:
            raise ValidationError(f"trip {self.trip_id}: negative driver id")
        for link in self.links:
            link.validate(num_links)

    def total_length_m(self) -> float:
        return sum(l.length_m for l in self.links)


# ---------------------------------------------------------------------------
# calendar helpers


def time_slice(depart_ts: int, tz_offset_s: int = 0) -> int:
    """Index of the 5-minute bin of the local day, in [0, 288)."""
    return int(((depart_ts + tz_offset_s) % SECONDS_PER_DAY) // SLICE_SECONDS)


def weekday(depart_ts: int, tz_offset_s: int = 0) -> int:
    """Day of the local week, 0 = Monday ... 6 = Sunday."""
    day = (depart_ts + tz_offset_s) // SECONDS_PER_DAY
    return int((day + 3) % 7)  # epoch day 0 was a Thursday


def overall_speed_mps(trip: TripRecord) -> float:
    return trip.total_length_m() / trip.y_seconds


# ---------------------------------------------------------------------------
# generator


def congestion_factor(cfg: GeneratorConfig, local_second: float) -> float:
    """Speed multiplier in [congestion_floor, 1]: two gaussian rush-hour dips."""
    dip = 0.0
    for peak in (cfg.morning_peak_s, cfg.evening_peak_s):
        z = (local_second - peak) / cfg.rush_width_s
        dip += math.exp(-0.5 * z * z)
    return max(cfg.congestion_floor, 1.0 - cfg.rush_depth * dip)


def generate_dataset(cfg: GeneratorConfig) -> Iterator[TripRecord]:
    """Deterministic stream of synthetic trips; same config ⇒ same records."""
    links_rng, drivers_rng, trips_rng = spawn_rngs(cfg.seed, 3)
    free_speed = np.clip(
        links_rng.lognormal(cfg.free_speed_log_mu, cfg.free_speed_log_sigma, cfg.num_links),
        cfg.speed_clip_low_mps, cfg.speed_clip_high_mps)
    lengths = np.round(np.clip(
        links_rng.lognormal(cfg.length_log_mu, cfg.length_log_sigma, cfg.num_links),
        cfg.length_clip_low_m, cfg.length_clip_high_m), 1)
    driver_factor = drivers_rng.lognormal(0.0, cfg.driver_sigma, cfg.num_drivers)

    for day in range(cfg.weeks * 7):
        for k in range(cfg.trips_per_day):
            tod = int(trips_rng.integers(0, SECONDS_PER_DAY))
            depart_ts = cfg.start_ts + day * SECONDS_PER_DAY + tod
            driver = int(trips_rng.integers(0, cfg.num_drivers))
            n_links = int(trips_rng.integers(cfg.min_links, cfg.max_links + 1))
            ids = trips_rng.integers(0, cfg.num_links, size=n_links)
            cong = congestion_factor(cfg, (depart_ts + cfg.tz_offset_s) % SECONDS_PER_DAY)
            effective = free_speed[ids] * cong * driver_factor[driver]
            delays = np.round(np.minimum(
                trips_rng.exponential(cfg.delay_mean_s, size=n_links), cfg.delay_cap_s), 1)
            speed_obs = np.round(
                free_speed[ids] * cong * trips_rng.lognormal(0.0, cfg.obs_noise_sigma, n_links), 3)
            trip_noise = trips_rng.lognormal(0.0, cfg.trip_noise_sigma)
            y = (float((lengths[ids] / effective).sum()) + float(delays.sum())) * trip_noise
            links = [LinkObs(int(i), float(l), float(s), float(d))
                     for i, l, s, d in zip(ids, lengths[ids], speed_obs, delays)]
            yield TripRecord(trip_id=f"t{day:03d}x{k:05d}", driver_id=driver,
                             depart_ts=depart_ts, links=links, y_seconds=round(y, 3))


# ---------------------------------------------------------------------------
# file format


def record_to_json(trip: TripRecord) -> str:
    obj = {
        "trip_id": trip.trip_id,
        "driver_id": trip.driver_id,
        "depart_ts": trip.depart_ts,
        "links": [{"link_id": l.link_id, "length_m": l.length_m,
                   "speed_est_mps": l.speed_est_mps, "delay_s": l.delay_s}
                  for l in trip.links],
        "y_seconds": trip.y_seconds,
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_json(line: str) -> TripRecord:
    try:
        obj = json.loads(line)
        links = [LinkObs(int(l["link_id"]), float(l["length_m"]),
                         float(l["speed_est_mps"]), float(l["delay_s"]))
                 for l in obj["links"]]
        return TripRecord(trip_id=str(obj["trip_id"]), driver_id=int(obj["driver_id"]),
                          depart_ts=int(obj["depart_ts"]), links=links,
                          y_seconds=float(obj["y_seconds"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed trip record: {exc}") from exc


def write_jsonl(records: Iterable[TripRecord], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for trip in records:
            fh.write(record_to_json(trip) + "\n")
            count += 1
    return count


def read_jsonl(path: str) -> list[TripRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_json(line))
    return out


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class DropSummary:
    kept: int
    dropped_short_time: int
    dropped_fast_speed: int

    def to_json(self) -> str:
        return json.dumps({"kept": self.kept, "dropped_short_time": self.dropped_short_time,
                           "dropped_fast_speed": self.dropped_fast_speed},
                          separators=(",", ":"))


def preprocess_filter(records: Iterable[TripRecord]) -> tuple[list[TripRecord], DropSummary]:
    """Drop trips shorter than 60 s or faster overall than 120 km/h.

    Boundary values (exactly 60 s, exactly 120 km/h) are kept.
    """
    kept: list[TripRecord] = []
    short = fast = 0
    for trip in records:
        if trip.y_seconds < MIN_TRIP_SECONDS:
            short += 1
        elif overall_speed_mps(trip) > MAX_SPEED_MPS:
            fast += 1
        else:
            kept.append(trip)
    return kept, DropSummary(kept=len(kept), dropped_short_time=short, dropped_fast_speed=fast)


def split_by_weeks(records: list[TripRecord],
                   tz_offset_s: int = 0) -> tuple[list[TripRecord], list[TripRecord], list[TripRecord]]:
    """Partition into weeks [0,16) / [16,18) / [18,20) counted from the Monday
    on or before the earliest departure.  Requires a span of >= 20 weeks."""
    if not records:
        raise ValidationError("cannot split an empty dataset")
    first_day = min((t.depart_ts + tz_offset_s) // SECONDS_PER_DAY for t in records)
    origin_day = first_day - (first_day + 3) % 7  # back up to Monday
    week_of = lambda t: ((t.depart_ts + tz_offset_s) // SECONDS_PER_DAY - origin_day) // 7  # noqa: E731
    span = max(week_of(t) for t in records) + 1
    if span < 20:
        raise ValidationError(f"dataset spans {span} weeks; the 16/2/2 split needs >= 20")
    train = [t for t in records if week_of(t) < 16]
    val = [t for t in records if 16 <= week_of(t) < 18]
    test = [t for t in records if 18 <= week_of(t) < 20]
    return train, val, test


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded, masked arrays for one optimization step.

    ``link_feats`` holds raw per-link reals ordered as LINK_FEATURE_NAMES;
    rows beyond a trip's length are zero and masked out.
    """

    link_ids: np.ndarray  # (B, T) int64
    link_feats: np.ndarray  # (B, T, len(LINK_FEATURE_NAMES)) float64
    driver_ids: np.ndarray  # (B,) int64
    slice_ids: np.ndarray  # (B,) int64
    weekday_ids: np.ndarray  # (B,) int64
    total_dist_m: np.ndarray  # (B,) float64
    mask: np.ndarray  # (B, T) float64, contiguous 1-prefix per row
    targets: np.ndarray  # (B,) float64
    lengths: np.ndarray  # (B,) int64

    @property
    def size(self) -> int:
        return self.link_ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.link_ids.shape[1]


def make_batch(trips: list[TripRecord], tz_offset_s: int = 0) -> Batch:
    if not trips:
        raise ValidationError("cannot build a batch from zero trips")
    for t in trips:
        t.validate()
    B = len(trips)
    lengths = np.array([len(t.links) for t in trips], dtype=np.int64)
    T = int(lengths.max())
    link_ids = np.zeros((B, T), dtype=np.int64)
    link_feats = np.zeros((B, T, len(LINK_FEATURE_NAMES)), dtype=np.float64)
    mask = np.zeros((B, T), dtype=np.float64)
    for b, trip in enumerate(trips):
        for j, link in enumerate(trip.links):
            link_ids[b, j] = link.link_id
            link_feats[b, j, 0] = link.length_m
            link_feats[b, j, 1] = link.speed_est_mps
            link_feats[b, j, 2] = link.delay_s
            link_feats[b, j, 3] = link.length_m / link.speed_est_mps
        mask[b, :len(trip.links)] = 1.0
    return Batch(
        link_ids=link_ids,
        link_feats=link_feats,
        driver_ids=np.array([t.driver_id for t in trips], dtype=np.int64),
        slice_ids=np.array([time_slice(t.depart_ts, tz_offset_s) for t in trips], dtype=np.int64),
        weekday_ids=np.array([weekday(t.depart_ts, tz_offset_s) for t in trips], dtype=np.int64),
        total_dist_m=np.array([t.total_length_m() for t in trips], dtype=np.float64),
        mask=mask,
        targets=np.array([t.y_seconds for t in trips], dtype=np.float64),
        lengths=lengths,
    )


def make_batches(records: list[TripRecord], batch_size: int,
                 rng: np.random.Generator | None = None,
                 tz_offset_s: int = 0) -> Iterator[Batch]:
    """Yield padded batches; shuffled when an rng is given, in order otherwise."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(records))
    if rng is not None:
        order = rng.permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        yield make_batch(chunk, tz_offset_s)


def dataset_rng(seed: int) -> np.random.Generator:
    """Convenience re-export so callers need not import linalg for seeding."""
    return make_rng(seed)
