"""Durable, indexed, tiered storage of frames, detections, tracks and activities.

On-disk layout under the store root:

    manifest.json     versioned manifest; lists the live segment files and
                      tier boundaries. Written atomically (tmp + rename).
    segments/NNNN.seg append-only binary record log (source of truth)
    index/labels.idx  label -> postings, derived, rebuildable
    index/time.idx    (ts, frame_id) pairs, derived, rebuildable
    summaries.json    warm (hourly) and cold (daily) tier summaries
    tracks.json       refinement state (cursor + fused tracks)
    coverage.json     which (subject, activity, range) triples were analyzed
    lock              advisory writer lock

Segments plus the json sidecars are authoritative; everything under index/
can be deleted and rebuilt. Appends buffer in memory and become durable at
flush(); a crash before flush loses only unflushed records. Readers load a
consistent snapshot at open and are never blocked by a writer.
"""

from __future__ import annotations

import json
import os
from bisect import bisect_left, bisect_right, insort
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Optional

from . import segment as segcodec
from .errors import (
    CorruptSegment,
    InvalidRecord,
    MigrationConflict,
    ReadOnlyStore,
    StoreLocked,
    StoreVersionError,
)
from .model import (
    ActivityEvent,
    Detection,
    FeedRecord,
    FrameMeta,
    Interval,
    LocationEstimate,
    TimeRange,
    Track,
    loc_from_json,
    loc_to_json,
    ts_from_micros,
    ts_to_micros,
    validate_record,
)
from .refine import RefinePolicy, fuse, observation_from_detection

FORMAT_VERSION = 1
DEFAULT_SEGMENT_RECORDS = 8192

HOUR_US = 3_600_000_000
DAY_US = 24 * HOUR_US


@dataclass(frozen=True)
class TierPolicy:
    hot_window: timedelta = timedelta(days=7)
    warm_window: timedelta = timedelta(days=90)
    obs_sigma_m: float = 2.0


@dataclass
class LabelSummary:
    """Rolled-up sightings of one label within one hour (warm) or day (cold)."""
    label: str
    kind: str
    tier: str  # "hourly" | "daily"
    bucket_us: int
    count: int
    first_frame: int
    last_frame: int
    first_ts_us: int
    last_ts_us: int
    loc: LocationEstimate
    detect_prob: float

    def to_json(self) -> dict:
        return {
            "label": self.label, "kind": self.kind, "tier": self.tier,
            "bucket_us": self.bucket_us, "count": self.count,
            "first_frame": self.first_frame, "last_frame": self.last_frame,
            "first_ts_us": self.first_ts_us, "last_ts_us": self.last_ts_us,
            "loc": loc_to_json(self.loc), "detect_prob": self.detect_prob,
        }

    @staticmethod
    def from_json(d: dict) -> "LabelSummary":
        return LabelSummary(
            label=d["label"], kind=d["kind"], tier=d["tier"],
            bucket_us=d["bucket_us"], count=d["count"],
            first_frame=d["first_frame"], last_frame=d["last_frame"],
            first_ts_us=d["first_ts_us"], last_ts_us=d["last_ts_us"],
            loc=loc_from_json(d["loc"]), detect_prob=d["detect_prob"],
        )


@dataclass
class ActivitySummary:
    subject: str
    name: str
    tier: str
    bucket_us: int
    seconds: float
    count: int
    prob: float
    loc: Optional[LocationEstimate] = None

    def to_json(self) -> dict:
        out = {
            "subject": self.subject, "name": self.name, "tier": self.tier,
            "bucket_us": self.bucket_us, "seconds": self.seconds,
            "count": self.count, "prob": self.prob,
        }
        if self.loc is not None:
            out["loc"] = loc_to_json(self.loc)
        return out

    @staticmethod
    def from_json(d: dict) -> "ActivitySummary":
        return ActivitySummary(
            subject=d["subject"], name=d["name"], tier=d["tier"],
            bucket_us=d["bucket_us"], seconds=d["seconds"],
            count=d["count"], prob=d["prob"],
            loc=loc_from_json(d["loc"]) if "loc" in d else None,
        )


@dataclass(frozen=True)
class LabelHit:
    """One result of find_by_label: a raw sighting, or a summary stand-in."""
    frame: FrameMeta
    detection: Detection
    coarse: bool = False
    count: int = 1
    loc: Optional[LocationEstimate] = None
    summary: Optional[LabelSummary] = None

    @property
    def ts(self) -> datetime:
        return self.frame.ts


@dataclass
class MigrationReport:
    detections_migrated: int = 0
    activities_migrated: int = 0
    hourly_created: int = 0
    daily_created: int = 0
    hourly_rolled: int = 0
    bytes_before: int = 0
    bytes_after: int = 0


@dataclass
class StoreStats:
    bytes_on_disk: int
    frames: int
    detections: int
    tracks: int
    bytes_per_frame: float


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _atomic_write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, separators=(",", ":")).encode("utf-8"))


class Store:
    """Embedded perception-event store. One writer at a time (advisory lock);
    read-only opens take a snapshot and never block."""

    def __init__(self, root: str, mode: str):
        self.root = root
        self.mode = mode
        self._segments: list[str] = []          # live segment file names
        self._segment_counts: list[int] = []    # record count per live segment
        self._next_segment_no = 0
        self._segment_max = DEFAULT_SEGMENT_RECORDS
        self._pending: list[bytes] = []         # encoded but unflushed records
        self._pending_count = 0

        self._frames: dict[int, FrameMeta] = {}
        self._frame_order: list[int] = []       # ascending frame ids
        self._time_index: list[int] = []        # ts_us aligned with _frame_order
        self._detections: list[Detection] = []  # global append order (seq = index)
        self._postings: dict[str, list[tuple[int, int]]] = {}  # label -> [(frame_id, seq)]
        self._frame_ts_us: dict[int, int] = {}
        self._activities: list[ActivityEvent] = []
        self._max_frame_id = -1

        self._label_summaries: list[LabelSummary] = []
        self._activity_summaries: list[ActivitySummary] = []
        self._coverage: list[dict] = []
        self._refine_state: Optional[dict] = None
        self._track_cache: Optional[list[Track]] = None  # decoded _refine_state tracks

        self._lock_fd: Optional[int] = None
        self._active_role: Optional[str] = None
        self._closed = False

    # ------------------------------------------------------------------ open

    @classmethod
    def create(cls, root: str) -> "Store":
        os.makedirs(os.path.join(root, "segments"), exist_ok=True)
        os.makedirs(os.path.join(root, "index"), exist_ok=True)
        manifest = {
            "version": FORMAT_VERSION,
            "segment_max_records": DEFAULT_SEGMENT_RECORDS,
            "segments": [],
            "next_segment_no": 0,
        }
        _atomic_write_json(os.path.join(root, "manifest.json"), manifest)
        return cls.open(root, mode="rw")

    @classmethod
    def open(cls, root: str, mode: str = "rw") -> "Store":
        if mode not in ("rw", "ro"):
            raise ValueError("mode must be 'rw' or 'ro'")
        manifest_path = os.path.join(root, "manifest.json")
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"not a store: {root}")
        with open(manifest_path, "rb") as fh:
            manifest = json.load(fh)
        if manifest["version"] > FORMAT_VERSION:
            raise StoreVersionError(
                f"store version {manifest['version']} newer than supported {FORMAT_VERSION}")
        store = cls(root, mode)
        store._segment_max = manifest.get("segment_max_records", DEFAULT_SEGMENT_RECORDS)
        store._next_segment_no = manifest.get("next_segment_no", 0)
        if mode == "rw":
            store._acquire_lock()
        try:
            store._load(manifest)
        except BaseException:
            store._release_lock()
            raise
        return store

    def _acquire_lock(self) -> None:
        path = os.path.join(self.root, "lock")
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreLocked(f"writer lock held: {path}") from None
        os.write(fd, str(os.getpid()).encode())
        self._lock_fd = fd

    def _release_lock(self) -> None:
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            try:
                os.unlink(os.path.join(self.root, "lock"))
            except FileNotFoundError:
                pass
            self._lock_fd = None

    def _load(self, manifest: dict) -> None:
        self._segments = list(manifest["segments"])
        for i, name in enumerate(self._segments):
            path = os.path.join(self.root, "segments", name)
            is_last = i == len(self._segments) - 1
            records, good = segcodec.read_segment(path, tolerate_tail=is_last)
            if is_last and good != os.path.getsize(path) and self.mode == "rw":
                with open(path, "r+b") as fh:  # drop the torn tail once, up front
                    fh.truncate(good)
            self._segment_counts.append(len(records))
            for rec in records:
                self._index_record(rec, durable=True)
        self._load_sidecars()

    def _load_sidecars(self) -> None:
        p = os.path.join(self.root, "summaries.json")
        if os.path.exists(p):
            with open(p, "rb") as fh:
                d = json.load(fh)
            self._label_summaries = [LabelSummary.from_json(x) for x in d.get("labels", [])]
            self._activity_summaries = [ActivitySummary.from_json(x) for x in d.get("activities", [])]
        p = os.path.join(self.root, "coverage.json")
        if os.path.exists(p):
            with open(p, "rb") as fh:
                self._coverage = json.load(fh)
        p = os.path.join(self.root, "tracks.json")
        if os.path.exists(p):
            with open(p, "rb") as fh:
                self._refine_state = json.load(fh)

    # --------------------------------------------------------------- indexing

    def _index_record(self, rec: FeedRecord, durable: bool) -> None:
        if isinstance(rec, FrameMeta):
            self._frames[rec.frame_id] = rec
            self._frame_order.append(rec.frame_id)
            ts_us = ts_to_micros(rec.ts)
            self._time_index.append(ts_us)
            self._frame_ts_us[rec.frame_id] = ts_us
            self._max_frame_id = max(self._max_frame_id, rec.frame_id)
        elif isinstance(rec, Detection):
            seq = len(self._detections)
            self._detections.append(rec)
            insort(self._postings.setdefault(rec.label, []), (rec.frame_id, seq))
        elif isinstance(rec, ActivityEvent):
            self._activities.append(rec)
            if rec.provenance == "ingested":
                # an ingested event is itself evidence of analyzed time
                self._coverage.append({
                    "subject": rec.subject, "activity": rec.name,
                    "from_us": ts_to_micros(rec.start), "to_us": ts_to_micros(rec.end),
                })

    # ----------------------------------------------------------------- writes

    def append(self, record: FeedRecord) -> None:
        if self.mode != "rw":
            raise ReadOnlyStore("store opened read-only")
        frame_exists = lambda f: f in self._frames
        validate_record(record, frame_exists=frame_exists)
        if isinstance(record, FrameMeta):
            if record.frame_id <= self._max_frame_id:
                raise InvalidRecord("frame_id", "frame ids must be strictly increasing")
            if self._time_index and ts_to_micros(record.ts) < self._time_index[-1]:
                raise InvalidRecord("ts", "timestamps must be non-decreasing")
        data = segcodec.encode_record(record)
        self._pending.append(data)
        self._pending_count += 1
        # index the decoded form so in-memory state always equals what a
        # reopened store would see (pose z/angles quantize through f32)
        self._index_record(segcodec.decode_payload(data[0], data[3:-4]), durable=False)

    def flush(self) -> None:
        """Make all pending appends durable and persist derived indexes."""
        if self.mode != "rw":
            raise ReadOnlyStore("store opened read-only")
        if self._pending:
            buf = iter(self._pending)
            remaining = self._pending_count
            chunk: list[bytes] = []
            while remaining > 0:
                if not self._segments or self._segment_counts[-1] >= self._segment_max:
                    name = f"{self._next_segment_no:04d}.seg"
                    self._next_segment_no += 1
                    self._segments.append(name)
                    self._segment_counts.append(0)
                    open(os.path.join(self.root, "segments", name), "wb").close()
                room = self._segment_max - self._segment_counts[-1]
                take = min(room, remaining)
                chunk = [next(buf) for _ in range(take)]
                path = os.path.join(self.root, "segments", self._segments[-1])
                with open(path, "ab") as fh:
                    fh.write(b"".join(chunk))
                    fh.flush()
                    os.fsync(fh.fileno())
                self._segment_counts[-1] += take
                remaining -= take
            self._pending = []
            self._pending_count = 0
        self._write_manifest()
        self._write_indexes()
        self._write_sidecars()

    def _write_manifest(self) -> None:
        _atomic_write_json(os.path.join(self.root, "manifest.json"), {
            "version": FORMAT_VERSION,
            "segment_max_records": self._segment_max,
            "segments": self._segments,
            "next_segment_no": self._next_segment_no,
        })

    def _write_indexes(self) -> None:
        if self._postings:
            _atomic_write_json(os.path.join(self.root, "index", "labels.idx"),
                               {lbl: [[f, s] for f, s in pl] for lbl, pl in self._postings.items()})
        if self._frame_order:
            _atomic_write_json(os.path.join(self.root, "index", "time.idx"),
                               [[us, f] for us, f in zip(self._time_index, self._frame_order)])

    def _write_sidecars(self) -> None:
        if self._label_summaries or self._activity_summaries:
            _atomic_write_json(os.path.join(self.root, "summaries.json"), {
                "labels": [s.to_json() for s in self._label_summaries],
                "activities": [s.to_json() for s in self._activity_summaries],
            })
        if self._coverage:
            _atomic_write_json(os.path.join(self.root, "coverage.json"), self._coverage)
        if self._refine_state is not None:
            _atomic_write_json(os.path.join(self.root, "tracks.json"), self._refine_state)

    def rebuild_indexes(self) -> None:
        """Drop index files and rewrite them from segment contents."""
        for name in ("labels.idx", "time.idx"):
            p = os.path.join(self.root, "index", name)
            if os.path.exists(p):
                os.unlink(p)
        self._write_indexes()

    def close(self, flush: bool = True) -> None:
        if self._closed:
            return
        if flush and self.mode == "rw":
            self.flush()
        self._release_lock()
        self._closed = True

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        # on error, drop unflushed records rather than persisting a bad batch
        self.close(flush=exc[0] is None and self.mode == "rw")

    # ------------------------------------------------------------------ roles

    @contextmanager
    def writer_role(self, role: str):
        """Single writer OR migrator at a time within this process."""
        if self.mode != "rw":
            raise ReadOnlyStore("store opened read-only")
        if self._active_role is not None:
            if role == "migrate" or self._active_role == "migrate":
                raise MigrationConflict(
                    f"{role} requested while {self._active_role} active")
            raise StoreLocked(f"writer role {self._active_role} already active")
        self._active_role = role
        try:
            yield self
        finally:
            self._active_role = None

    # ------------------------------------------------------------------ reads

    def frame_by_id(self, frame_id: int) -> FrameMeta:
        return self._frames[frame_id]

    @property
    def max_frame_id(self) -> int:
        return self._max_frame_id

    def frame_count(self) -> int:
        return len(self._frames)

    def labels(self) -> list[str]:
        out = set(self._postings)
        out.update(s.label for s in self._label_summaries)
        return sorted(out)

    def time_bounds(self) -> Optional[TimeRange]:
        if not self._frame_order:
            return None
        return TimeRange(ts_from_micros(self._time_index[0]),
                         ts_from_micros(self._time_index[-1]))

    def frames_in_range(self, rng: TimeRange) -> list[int]:
        """Frame ids with ts in the closed range, ascending."""
        lo = bisect_left(self._time_index, ts_to_micros(rng.start))
        hi = bisect_right(self._time_index, ts_to_micros(rng.end))
        return self._frame_order[lo:hi]

    def _frame_id_window(self, rng: Optional[TimeRange]) -> tuple[int, int]:
        """Inclusive frame-id window covering a time range (or everything)."""
        if rng is None:
            return (0, self._max_frame_id if self._max_frame_id >= 0 else -1)
        ids = self.frames_in_range(rng)
        if not ids:
            return (1, 0)  # empty window
        return (ids[0], ids[-1])

    def find_by_label(self, label: str, rng: Optional[TimeRange] = None,
                      order: str = "asc", limit: Optional[int] = None) -> list[LabelHit]:
        """Sightings of a label ordered by frame timestamp.

        Raw detections supply exact hits; sightings that were migrated to
        warm/cold summaries come back as one coarse hit per summary bucket,
        anchored at the bucket's last sighting frame.
        """
        hits: list[tuple[int, int, LabelHit]] = []
        lo_f, hi_f = self._frame_id_window(rng)
        postings = self._postings.get(label, [])
        i = bisect_left(postings, (lo_f, -1))
        j = bisect_right(postings, (hi_f, len(self._detections)))
        frames = self._frames
        ts_us = self._frame_ts_us
        for frame_id, seq in postings[i:j]:
            hits.append((ts_us[frame_id], frame_id,
                         LabelHit(frame=frames[frame_id],
                                  detection=self._detections[seq])))
        lo_us = ts_to_micros(rng.start) if rng else None
        hi_us = ts_to_micros(rng.end) if rng else None
        for s in self._label_summaries:
            if s.label != label:
                continue
            if lo_us is not None and (s.last_ts_us < lo_us or s.first_ts_us > hi_us):
                continue
            fm = self._frames[s.last_frame]
            det = Detection(frame_id=s.last_frame, label=s.label, kind=s.kind,
                            confidence=s.detect_prob)
            hits.append((s.last_ts_us, s.last_frame,
                         LabelHit(frame=fm, detection=det, coarse=True,
                                  count=s.count, loc=s.loc, summary=s)))
        hits.sort(key=lambda h: (h[0], h[1]), reverse=(order == "desc"))
        out = [h[2] for h in hits]
        return out[:limit] if limit is not None else out

    def detections_from(self, seq: int) -> list[tuple[int, Detection]]:
        return list(enumerate(self._detections[seq:], start=seq))

    def detection_count(self) -> int:
        return len(self._detections)

    def activities(self, name: Optional[str] = None, subject: Optional[str] = None,
                   rng: Optional[TimeRange] = None) -> list[ActivityEvent]:
        out = []
        for ev in self._activities:
            if name is not None and ev.name != name:
                continue
            if subject is not None and ev.subject != subject:
                continue
            if rng is not None and (ev.end < rng.start or ev.start > rng.end):
                continue
            out.append(ev)
        out.sort(key=lambda e: (e.start, e.end, e.subject))
        return out

    def activity_summaries(self, name: Optional[str] = None,
                           subject: Optional[str] = None,
                           rng: Optional[TimeRange] = None) -> list[ActivitySummary]:
        out = []
        for s in self._activity_summaries:
            if name is not None and s.name != name:
                continue
            if subject is not None and s.subject != subject:
                continue
            if rng is not None:
                width = HOUR_US if s.tier == "hourly" else DAY_US
                if s.bucket_us + width <= ts_to_micros(rng.start) or s.bucket_us >= ts_to_micros(rng.end):
                    continue
            out.append(s)
        out.sort(key=lambda s: (s.bucket_us, s.subject, s.name))
        return out

    def label_summaries(self, label: Optional[str] = None) -> list[LabelSummary]:
        return [s for s in self._label_summaries if label is None or s.label == label]

    # --------------------------------------------------------------- coverage

    def mark_covered(self, subject: Optional[str], activity: str, rng: TimeRange) -> None:
        if self.mode != "rw":
            raise ReadOnlyStore("store opened read-only")
        self._coverage.append({
            "subject": subject, "activity": activity,
            "from_us": ts_to_micros(rng.start), "to_us": ts_to_micros(rng.end),
        })

    def is_covered(self, subject: Optional[str], activity: str, rng: TimeRange) -> bool:
        """True iff the union of matching coverage spans contains the range.

        A span recorded without a subject covers any subject; a query without
        a subject needs subject-agnostic (or all-subject) spans, so only
        subjectless spans count for it.
        """
        spans = []
        for c in self._coverage:
            if c["activity"] != activity:
                continue
            if c["subject"] is not None and subject is not None and c["subject"] != subject:
                continue
            if c["subject"] is not None and subject is None:
                continue
            spans.append((c["from_us"], c["to_us"]))
        if not spans:
            return False
        spans.sort()
        need_lo, need_hi = ts_to_micros(rng.start), ts_to_micros(rng.end)
        covered_to = need_lo
        for lo, hi in spans:
            if lo > covered_to:
                break
            covered_to = max(covered_to, hi)
            if covered_to >= need_hi:
                return True
        return covered_to >= need_hi

    # ------------------------------------------------------------ refinement

    def load_refine_state(self) -> dict:
        if self._refine_state is None:
            return {"cursor": 0, "next_track_id": 0, "tracks": []}
        raw = self._refine_state
        if self._track_cache is None:
            self._track_cache = [_track_from_json(t) for t in raw["tracks"]]
        return {
            "cursor": raw["cursor"],
            "next_track_id": raw["next_track_id"],
            "tracks": list(self._track_cache),
        }

    def save_refine_state(self, state: dict) -> None:
        if self.mode != "rw":
            raise ReadOnlyStore("store opened read-only")
        self._refine_state = {
            "cursor": state["cursor"],
            "next_track_id": state["next_track_id"],
            "tracks": [_track_to_json(t) for t in state["tracks"]],
        }
        self._track_cache = list(state["tracks"])

    def tracks(self) -> list[Track]:
        return self.load_refine_state()["tracks"]

    def track_for(self, label: str, frame_id: int) -> Optional[Track]:
        """The track whose presence intervals include this sighting frame."""
        for t in self.tracks():
            if t.label != label:
                continue
            for iv in t.intervals:
                if iv.first_frame <= frame_id <= iv.last_frame:
                    return t
        return None

    # ------------------------------------------------------------- migration

    def migrate_tiers(self, now: datetime, policy: TierPolicy = TierPolicy()) -> MigrationReport:
        """Roll raw detections/activities older than the hot window into hourly
        summaries, and hourly summaries older than the warm window into daily
        ones. Frame metadata survives in every tier so reprocessing can still
        target frames. Rewrites segments; raw records in migrated ranges are
        gone afterwards."""
        report = MigrationReport(bytes_before=self._bytes_on_disk())
        hot_us = ts_to_micros(now - policy.hot_window)
        warm_us = ts_to_micros(now - policy.warm_window)
        with self.writer_role("migrate"):
            if self._pending:
                self.flush()

            keep_detections: list[tuple[int, Detection]] = []
            groups: dict[tuple[str, str, int], list[Detection]] = {}
            for seq, det in enumerate(self._detections):
                ts_us = ts_to_micros(self._frames[det.frame_id].ts)
                if ts_us < hot_us:
                    key = (det.label, det.kind, ts_us - ts_us % HOUR_US)
                    groups.setdefault(key, []).append(det)
                else:
                    keep_detections.append((seq, det))
            for (label, kind, bucket_us), dets in sorted(groups.items()):
                self._label_summaries.append(self._summarize(label, kind, bucket_us, "hourly",
                                                             dets, policy))
                report.detections_migrated += len(dets)
                report.hourly_created += 1

            keep_activities: list[ActivityEvent] = []
            for ev in self._activities:
                if ts_to_micros(ev.end) < hot_us:
                    self._summarize_activity(ev)
                    report.activities_migrated += 1
                else:
                    keep_activities.append(ev)

            # roll old hourly summaries to daily
            fresh: list[LabelSummary] = []
            daily: dict[tuple[str, str, int], LabelSummary] = {}
            for s in self._label_summaries:
                if s.tier == "hourly" and s.bucket_us < warm_us:
                    day = s.bucket_us - s.bucket_us % DAY_US
                    cur = daily.get((s.label, s.kind, day))
                    daily[(s.label, s.kind, day)] = self._merge_summaries(cur, s, day)
                    report.hourly_rolled += 1
                else:
                    fresh.append(s)
            report.daily_created = len(daily)
            self._label_summaries = fresh + [daily[k] for k in sorted(daily)]

            fresh_act: list[ActivitySummary] = []
            daily_act: dict[tuple[str, str, int], ActivitySummary] = {}
            for s in self._activity_summaries:
                if s.tier == "hourly" and s.bucket_us < warm_us:
                    day = s.bucket_us - s.bucket_us % DAY_US
                    cur = daily_act.get((s.subject, s.name, day))
                    if cur is None:
                        daily_act[(s.subject, s.name, day)] = ActivitySummary(
                            subject=s.subject, name=s.name, tier="daily", bucket_us=day,
                            seconds=s.seconds, count=s.count, prob=s.prob, loc=s.loc)
                    else:
                        cur.seconds += s.seconds
                        cur.count += s.count
                        cur.prob = max(cur.prob, s.prob)
                else:
                    fresh_act.append(s)
            self._activity_summaries = fresh_act + [daily_act[k] for k in sorted(daily_act)]

            # check conservation before dropping raw records
            migrated = report.detections_migrated
            summarized = sum(len(d) for d in groups.values())
            if migrated != summarized:
                raise CorruptSegment("migration count mismatch")

            if migrated or report.activities_migrated:
                self._rewrite_segments([d for _, d in keep_detections], keep_activities)
            else:
                self._write_sidecars()
        report.bytes_after = self._bytes_on_disk()
        return report

    def _summarize(self, label: str, kind: str, bucket_us: int, tier: str,
                   dets: list[Detection], policy: TierPolicy) -> LabelSummary:
        rp = RefinePolicy(obs_sigma_m=policy.obs_sigma_m)
        loc = None
        miss = 1.0
        first = min(dets, key=lambda d: (ts_to_micros(self._frames[d.frame_id].ts), d.frame_id))
        last = max(dets, key=lambda d: (ts_to_micros(self._frames[d.frame_id].ts), d.frame_id))
        for d in dets:
            obs = observation_from_detection(d, self._frames[d.frame_id], rp)
            loc = obs if loc is None else fuse(loc, obs)
            miss *= (1.0 - d.confidence)
        return LabelSummary(
            label=label, kind=kind, tier=tier, bucket_us=bucket_us, count=len(dets),
            first_frame=first.frame_id, last_frame=last.frame_id,
            first_ts_us=ts_to_micros(self._frames[first.frame_id].ts),
            last_ts_us=ts_to_micros(self._frames[last.frame_id].ts),
            loc=loc, detect_prob=1.0 - miss,
        )

    def _merge_summaries(self, cur: Optional[LabelSummary], s: LabelSummary,
                         day_us: int) -> LabelSummary:
        if cur is None:
            return LabelSummary(
                label=s.label, kind=s.kind, tier="daily", bucket_us=day_us,
                count=s.count, first_frame=s.first_frame, last_frame=s.last_frame,
                first_ts_us=s.first_ts_us, last_ts_us=s.last_ts_us,
                loc=s.loc, detect_prob=s.detect_prob)
        first_frame, first_ts = ((cur.first_frame, cur.first_ts_us)
                                 if cur.first_ts_us <= s.first_ts_us
                                 else (s.first_frame, s.first_ts_us))
        last_frame, last_ts = ((cur.last_frame, cur.last_ts_us)
                               if cur.last_ts_us >= s.last_ts_us
                               else (s.last_frame, s.last_ts_us))
        return LabelSummary(
            label=s.label, kind=s.kind, tier="daily", bucket_us=day_us,
            count=cur.count + s.count,
            first_frame=first_frame, last_frame=last_frame,
            first_ts_us=first_ts, last_ts_us=last_ts,
            loc=fuse(cur.loc, s.loc),
            detect_prob=1.0 - (1.0 - cur.detect_prob) * (1.0 - s.detect_prob),
        )

    def _summarize_activity(self, ev: ActivityEvent) -> None:
        """Split one event's seconds across hourly buckets."""
        start_us, end_us = ts_to_micros(ev.start), ts_to_micros(ev.end)
        bucket = start_us - start_us % HOUR_US
        while bucket <= end_us:
            lo = max(start_us, bucket)
            hi = min(end_us, bucket + HOUR_US)
            secs = max(hi - lo, 0) / 1e6
            if secs > 0 or start_us == end_us:
                existing = next(
                    (s for s in self._activity_summaries
                     if s.tier == "hourly" and s.subject == ev.subject
                     and s.name == ev.name and s.bucket_us == bucket), None)
                if existing is None:
                    self._activity_summaries.append(ActivitySummary(
                        subject=ev.subject, name=ev.name, tier="hourly",
                        bucket_us=bucket, seconds=secs, count=1, prob=ev.prob, loc=ev.loc))
                else:
                    existing.seconds += secs
                    existing.count += 1
                    existing.prob = max(existing.prob, ev.prob)
                    if existing.loc is None:
                        existing.loc = ev.loc
            bucket += HOUR_US

    def _rewrite_segments(self, detections: list[Detection],
                          activities: list[ActivityEvent]) -> None:
        """Write a fresh segment generation holding frames + surviving records."""
        records: list[FeedRecord] = []
        for f in self._frame_order:
            records.append(self._frames[f])
        records.extend(detections)
        records.extend(activities)

        old = list(self._segments)
        new_names: list[str] = []
        new_counts: list[int] = []
        for i in range(0, max(len(records), 1), self._segment_max):
            chunk = records[i:i + self._segment_max]
            name = f"{self._next_segment_no:04d}.seg"
            self._next_segment_no += 1
            path = os.path.join(self.root, "segments", name)
            with open(path, "wb") as fh:
                fh.write(b"".join(segcodec.encode_record(r) for r in chunk))
                fh.flush()
                os.fsync(fh.fileno())
            new_names.append(name)
            new_counts.append(len(chunk))
        self._segments = new_names
        self._segment_counts = new_counts

        # rebuild in-memory derived state from the surviving records
        self._frames.clear()
        self._frame_order.clear()
        self._time_index.clear()
        self._frame_ts_us.clear()
        self._detections.clear()
        self._postings.clear()
        self._activities.clear()
        self._max_frame_id = -1
        saved_cov = self._coverage
        self._coverage = []
        for rec in records:
            self._index_record(rec, durable=True)
        self._coverage = saved_cov  # coverage is historical fact, not re-derived

        self._write_manifest()
        self.rebuild_indexes()
        self._write_sidecars()
        for name in old:
            try:
                os.unlink(os.path.join(self.root, "segments", name))
            except FileNotFoundError:
                pass

    # ------------------------------------------------------------------ stats

    def _bytes_on_disk(self) -> int:
        total = 0
        for dirpath, _dirs, files in os.walk(self.root):
            for f in files:
                if f == "lock" or f.endswith(".tmp"):
                    continue
                total += os.path.getsize(os.path.join(dirpath, f))
        return total

    def stats(self) -> StoreStats:
        nbytes = self._bytes_on_disk()
        frames = len(self._frames)
        return StoreStats(
            bytes_on_disk=nbytes,
            frames=frames,
            detections=len(self._detections),
            tracks=len(self.tracks()),
            bytes_per_frame=nbytes / max(frames, 1),
        )


# ---------------------------------------------------------------------------
# track (de)serialization for tracks.json

def _track_to_json(t: Track) -> dict:
    return {
        "track_id": t.track_id, "label": t.label, "kind": t.kind,
        "loc": loc_to_json(t.loc),
        "intervals": [[ts_to_micros(iv.start), ts_to_micros(iv.end),
                       iv.first_frame, iv.last_frame] for iv in t.intervals],
        "observation_count": t.observation_count,
        "existence_prob": t.existence_prob,
        "miss_prob": t.miss_prob,
    }


def _track_from_json(d: dict) -> Track:
    return Track(
        track_id=d["track_id"], label=d["label"], kind=d["kind"],
        loc=loc_from_json(d["loc"]),
        intervals=tuple(Interval(start=ts_from_micros(a), end=ts_from_micros(b),
                                 first_frame=f0, last_frame=f1)
                        for a, b, f0, f1 in d["intervals"]),
        observation_count=d["observation_count"],
        existence_prob=d["existence_prob"],
        miss_prob=d["miss_prob"],
    )
