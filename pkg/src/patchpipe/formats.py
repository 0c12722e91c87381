"""Parsers and writers for every on-disk and on-wire format the toolkit uses.

Formats: binary PPM rasters (P5/P6, maxval 255), NDJSON pose and event
streams, CSV dataset indices and embedding tables, and the JSON assay
config. All parsers reject trailing garbage and unknown keys; all writers
emit canonical output that their parser round-trips exactly.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Iterator, Mapping

import csv

from .core import (
    DimensionError,
    EmbeddingVector,
    FrameDetections,
    ImageBuffer,
    PatchpipeError,
    Point2,
    Pose,
    Track,
    ValidationError,
    VisitEvent,
    KEYPOINT_NAMES,
)


class FormatError(PatchpipeError, ValueError):
    """Malformed input; message carries a byte offset or line number."""


# ---------------------------------------------------------------------------
# PPM rasters


def parse_ppm(data: bytes) -> ImageBuffer:
    """Parse a binary PPM (P6, RGB) or PGM (P5, grayscale) with maxval 255."""
    magic = data[:2]
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise FormatError(f"bad magic {magic!r} at byte 0 (expected P5 or P6)")

    pos = 2
    values: list[int] = []
    while len(values) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError(f"expected integer header field at byte {start}")
        values.append(int(data[start:pos]))

    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid dimensions {width}x{height} in header (byte {pos})")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {pos} (only 255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"expected single whitespace after maxval at byte {pos}")
    pos += 1

    n_bytes = width * height * channels
    raster = data[pos : pos + n_bytes]
    if len(raster) < n_bytes:
        raise FormatError(
            f"truncated raster at byte {pos + len(raster)}: "
            f"expected {n_bytes} bytes, got {len(raster)}"
        )
    if pos + n_bytes != len(data):
        raise FormatError(f"trailing garbage at byte {pos + n_bytes}")
    return ImageBuffer(width=width, height=height, channels=channels, data=raster)


def write_ppm(img: ImageBuffer) -> bytes:
    """Serialize to canonical binary PPM/PGM: single-space header, newline, raster."""
    if img.channels == 3:
        magic = "P6"
    elif img.channels == 1:
        magic = "P5"
    else:
        raise FormatError(f"unsupported channel count {img.channels}")
    header = f"{magic} {img.width} {img.height} 255\n".encode("ascii")
    return header + img.data


# ---------------------------------------------------------------------------
# NDJSON pose streams

_POSE_KEYS = set(KEYPOINT_NAMES) | {"score"}


def _parse_point(value: object, name: str, line_no: int) -> Point2 | None:
    if value is None:
        return None
    if not isinstance(value, list) or len(value) != 2:
        raise FormatError(f"line {line_no}: keypoint {name!r} must be [x, y] or null")
    x, y = value
    if not isinstance(x, (int, float)) or not isinstance(y, (int, float)):
        raise FormatError(f"line {line_no}: keypoint {name!r} coordinates must be numbers")
    try:
        return Point2(float(x), float(y))
    except ValidationError as exc:
        raise FormatError(f"line {line_no}: {exc}") from exc


def parse_pose_stream(lines: Iterable[str]) -> Iterator[FrameDetections]:
    """Parse a pose NDJSON stream, enforcing strictly increasing frame indices."""
    last_frame = -1
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {line_no}: malformed JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise FormatError(f"line {line_no}: expected a JSON object")
        unknown = set(obj) - {"frame", "detections"}
        if unknown:
            raise FormatError(f"line {line_no}: unknown key {sorted(unknown)[0]!r}")
        if "frame" not in obj or "detections" not in obj:
            raise FormatError(f"line {line_no}: missing 'frame' or 'detections'")
        frame = obj["frame"]
        if not isinstance(frame, int) or frame < 0:
            raise FormatError(f"line {line_no}: frame must be a nonnegative integer")
        if frame <= last_frame:
            raise FormatError(
                f"line {line_no}: frame index {frame} not greater than previous {last_frame}"
            )
        last_frame = frame
        if not isinstance(obj["detections"], list):
            raise FormatError(f"line {line_no}: detections must be a list")
        poses = []
        for det in obj["detections"]:
            if not isinstance(det, dict):
                raise FormatError(f"line {line_no}: detection must be an object")
            unknown = set(det) - _POSE_KEYS
            if unknown:
                raise FormatError(f"line {line_no}: unknown key {sorted(unknown)[0]!r}")
            score = det.get("score", 1.0)
            if not isinstance(score, (int, float)):
                raise FormatError(f"line {line_no}: score must be a number")
            points = {
                name: _parse_point(det.get(name), name, line_no) for name in KEYPOINT_NAMES
            }
            try:
                poses.append(Pose(score=float(score), **points))
            except ValidationError as exc:
                raise FormatError(f"line {line_no}: {exc}") from exc
        yield FrameDetections(frame_index=frame, poses=tuple(poses))


def _point_json(p: Point2 | None) -> list[float] | None:
    return None if p is None else [p.x, p.y]


def write_pose_stream(frames: Iterable[FrameDetections]) -> Iterator[str]:
    """Serialize frames to pose NDJSON lines (no trailing newlines)."""
    for frame in frames:
        detections = [
            {
                "head": _point_json(pose.head),
                "neck": _point_json(pose.neck),
                "waist": _point_json(pose.waist),
                "abdomen": _point_json(pose.abdomen),
                "score": pose.score,
            }
            for pose in frame.poses
        ]
        yield json.dumps(
            {"frame": frame.frame_index, "detections": detections}, separators=(",", ":")
        )


# ---------------------------------------------------------------------------
# NDJSON event streams

EVENT_SORT_KEY = lambda e: (e.start_frame, e.flower_id, e.track_id, e.end_frame)  # noqa: E731


def event_to_json(event: VisitEvent) -> str:
    return json.dumps(
        {
            "type": "visit",
            "flower_id": event.flower_id,
            "track_id": event.track_id,
            "start_frame": event.start_frame,
            "end_frame": event.end_frame,
            "n_frames": event.n_frames,
        },
        separators=(",", ":"),
    )


def write_event_stream(events: Iterable[VisitEvent]) -> list[str]:
    """One JSON object per visit, ordered by start frame then flower id."""
    return [event_to_json(e) for e in sorted(events, key=EVENT_SORT_KEY)]


_EVENT_KEYS = {"type", "flower_id", "track_id", "start_frame", "end_frame", "n_frames"}


def parse_event_stream(lines: Iterable[str]) -> list[VisitEvent]:
    """Parse a visit-event NDJSON stream (any order accepted)."""
    events = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {line_no}: malformed JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise FormatError(f"line {line_no}: expected a JSON object")
        unknown = set(obj) - _EVENT_KEYS
        if unknown:
            raise FormatError(f"line {line_no}: unknown key {sorted(unknown)[0]!r}")
        if obj.get("type") != "visit":
            raise FormatError(f"line {line_no}: expected type 'visit'")
        try:
            ints = {
                k: obj[k] for k in ("flower_id", "track_id", "start_frame", "end_frame")
            }
        except KeyError as exc:
            raise FormatError(f"line {line_no}: missing key {exc.args[0]!r}") from exc
        if any(not isinstance(v, int) for v in ints.values()):
            raise FormatError(f"line {line_no}: event fields must be integers")
        try:
            event = VisitEvent(**ints)
        except ValidationError as exc:
            raise FormatError(f"line {line_no}: {exc}") from exc
        if "n_frames" in obj and obj["n_frames"] != event.n_frames:
            raise FormatError(
                f"line {line_no}: n_frames {obj['n_frames']} inconsistent with span"
            )
        events.append(event)
    return events


# ---------------------------------------------------------------------------
# NDJSON track streams (generator ground truth / tracker output)


def write_track_stream(tracks: Iterable[Track]) -> Iterator[str]:
    for track in tracks:
        entries = [
            {
                "frame": frame,
                "head": _point_json(pose.head),
                "neck": _point_json(pose.neck),
                "waist": _point_json(pose.waist),
                "abdomen": _point_json(pose.abdomen),
                "score": pose.score,
            }
            for frame, pose in track.entries
        ]
        yield json.dumps(
            {"track_id": track.track_id, "entries": entries}, separators=(",", ":")
        )


def parse_track_stream(lines: Iterable[str]) -> list[Track]:
    tracks = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {line_no}: malformed JSON: {exc}") from exc
        if not isinstance(obj, dict) or set(obj) != {"track_id", "entries"}:
            raise FormatError(f"line {line_no}: expected keys track_id, entries")
        if not isinstance(obj["track_id"], int) or not isinstance(obj["entries"], list):
            raise FormatError(f"line {line_no}: bad track_id or entries")
        entries = []
        for ent in obj["entries"]:
            if not isinstance(ent, dict):
                raise FormatError(f"line {line_no}: entry must be an object")
            unknown = set(ent) - (_POSE_KEYS | {"frame"})
            if unknown:
                raise FormatError(f"line {line_no}: unknown key {sorted(unknown)[0]!r}")
            if not isinstance(ent.get("frame"), int):
                raise FormatError(f"line {line_no}: entry frame must be an integer")
            points = {
                name: _parse_point(ent.get(name), name, line_no) for name in KEYPOINT_NAMES
            }
            try:
                pose = Pose(score=float(ent.get("score", 1.0)), **points)
            except ValidationError as exc:
                raise FormatError(f"line {line_no}: {exc}") from exc
            entries.append((ent["frame"], pose))
        try:
            tracks.append(Track(track_id=obj["track_id"], entries=tuple(entries)))
        except ValidationError as exc:
            raise FormatError(f"line {line_no}: {exc}") from exc
    return tracks


# ---------------------------------------------------------------------------
# CSV dataset index


@dataclass(frozen=True)
class DatasetRecord:
    """One dataset image: its identity label, short-term track, and time key."""

    image_ref: str
    id_label: str
    track_id: int
    time_key: int

    def __post_init__(self) -> None:
        if not self.image_ref:
            raise ValidationError("image ref must be non-empty")
        if not self.id_label:
            raise ValidationError(f"id label for {self.image_ref!r} must be non-empty")


_INDEX_HEADER = ["image", "id", "track", "time"]


def parse_dataset_index(text: str) -> list[DatasetRecord]:
    """Parse an 'image,id,track,time' CSV; duplicate image refs are rejected."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty index: missing header") from None
    if header != _INDEX_HEADER:
        missing = [c for c in _INDEX_HEADER if c not in header]
        if missing:
            raise FormatError(f"missing column {missing[0]!r} in index header")
        raise FormatError(f"bad index header {header!r}")
    records = []
    seen: set[str] = set()
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"line {line_no}: expected 4 fields, got {len(row)}")
        image, id_label, track, time_key = row
        if image in seen:
            raise FormatError(f"line {line_no}: duplicate image ref {image!r}")
        seen.add(image)
        try:
            records.append(
                DatasetRecord(
                    image_ref=image,
                    id_label=id_label,
                    track_id=int(track),
                    time_key=int(time_key),
                )
            )
        except (ValueError, ValidationError) as exc:
            raise FormatError(f"line {line_no}: {exc}") from exc
    return records


def write_dataset_index(records: Iterable[DatasetRecord]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_INDEX_HEADER)
    for rec in records:
        writer.writerow([rec.image_ref, rec.id_label, rec.track_id, rec.time_key])
    return out.getvalue()


def write_ref_list(refs: Iterable[str]) -> str:
    """One-column CSV of image refs (split subset files)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["image"])
    for ref in sorted(refs):
        writer.writerow([ref])
    return out.getvalue()


def read_ref_list(text: str) -> frozenset[str]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty ref list: missing header") from None
    if header != ["image"]:
        raise FormatError(f"bad ref list header {header!r}")
    refs = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 1 or not row[0]:
            raise FormatError(f"line {line_no}: expected a single image ref")
        refs.append(row[0])
    return frozenset(refs)


# ---------------------------------------------------------------------------
# CSV embedding tables


def read_embeddings(text: str) -> dict[str, EmbeddingVector]:
    """Parse an 'image,f0,...,fN' CSV into a ref -> vector map (norm unchecked)."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty embeddings file: missing header") from None
    if len(header) < 2 or header[0] != "image":
        raise FormatError(f"bad embeddings header: expected image,f0,... got {header[:2]!r}")
    expected = [f"f{i}" for i in range(len(header) - 1)]
    if header[1:] != expected:
        raise FormatError(f"bad embeddings header: feature columns must be f0..f{len(header) - 2}")
    dim = len(header) - 1
    table: dict[str, EmbeddingVector] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise FormatError(
                f"line {line_no}: expected {dim + 1} columns, got {len(row)}"
            )
        ref = row[0]
        if ref in table:
            raise FormatError(f"line {line_no}: duplicate image ref {ref!r}")
        try:
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"line {line_no}: {exc}") from exc
        if any(not math.isfinite(v) for v in values):
            raise FormatError(f"line {line_no}: non-finite embedding value")
        table[ref] = EmbeddingVector(values=values, normalized=False)
    return table


def write_embeddings(table: Mapping[str, EmbeddingVector]) -> str:
    """Serialize a ref -> vector map; rows sorted by ref, floats exact."""
    dims = {vec.dim for vec in table.values()}
    if len(dims) > 1:
        raise DimensionError(f"mixed embedding dimensions: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["image"] + [f"f{i}" for i in range(dim)])
    for ref in sorted(table):
        writer.writerow([ref] + [repr(float(v)) for v in table[ref].values])
    return out.getvalue()


# ---------------------------------------------------------------------------
# JSON assay config


class ConfigError(PatchpipeError, ValueError):
    """Unknown config key or out-of-range value."""


@dataclass(frozen=True)
class ManualFlower:
    id: int
    cx: float
    cy: float
    well_radius: float
    square_side: float | None = None
    color: str = ""


@dataclass(frozen=True)
class AssayConfig:
    """All pipeline tunables, settable from a flat JSON object of dotted keys."""

    flower_threshold: int | str = "otsu"
    flower_min_area_px2: int = 400
    flower_aspect_tol: float = 0.2
    flower_fill_min: float = 0.8
    flower_well_fraction: float = 0.08
    flower_manual: tuple[ManualFlower, ...] = ()
    track_gate_px: float = 80.0
    track_max_gap_frames: int = 15
    visit_r_visit_px: float | None = None
    visit_r_visit_well_multiple: float = 2.0
    visit_gap_max_frames: int = 5
    visit_min_len_frames: int = 3
    visit_overlap_min_frames: int = 1
    crop_full_w: int = 150
    crop_full_h: int = 200
    crop_anchor_x: float = 75.0
    crop_anchor_y: float = 120.0
    crop_split_row: int = 100
    crop_unaligned_side: int = 200


_CONFIG_KEYS = {
    "flower.threshold": "flower_threshold",
    "flower.min_area_px2": "flower_min_area_px2",
    "flower.aspect_tol": "flower_aspect_tol",
    "flower.fill_min": "flower_fill_min",
    "flower.well_fraction": "flower_well_fraction",
    "flower.manual": "flower_manual",
    "track.gate_px": "track_gate_px",
    "track.max_gap_frames": "track_max_gap_frames",
    "visit.r_visit_px": "visit_r_visit_px",
    "visit.r_visit_well_multiple": "visit_r_visit_well_multiple",
    "visit.gap_max_frames": "visit_gap_max_frames",
    "visit.min_len_frames": "visit_min_len_frames",
    "visit.overlap_min_frames": "visit_overlap_min_frames",
    "crop.full_w": "crop_full_w",
    "crop.full_h": "crop_full_h",
    "crop.anchor_x": "crop_anchor_x",
    "crop.anchor_y": "crop_anchor_y",
    "crop.split_row": "crop_split_row",
    "crop.unaligned_side": "crop_unaligned_side",
}
_ATTR_TO_KEY = {attr: key for key, attr in _CONFIG_KEYS.items()}


def _check_number(key: str, value: object, lo: float | None, hi: float | None) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise ConfigError(f"{key}: value must be finite")
    if lo is not None and v < lo:
        raise ConfigError(f"{key}: value {v} below minimum {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{key}: value {v} above maximum {hi}")
    return v


def _check_int(key: str, value: object, lo: int | None, hi: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{key}: value {value} below minimum {lo}")
    if hi is not None and value > hi:
        raise ConfigError(f"{key}: value {value} above maximum {hi}")
    return value


def _parse_manual_flowers(key: str, value: object) -> tuple[ManualFlower, ...]:
    if not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list of flower objects")
    out = []
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            raise ConfigError(f"{key}[{i}]: expected an object")
        unknown = set(item) - {"id", "cx", "cy", "well_radius", "square_side", "color"}
        if unknown:
            raise ConfigError(f"{key}[{i}]: unknown key {sorted(unknown)[0]!r}")
        missing = {"id", "cx", "cy", "well_radius"} - set(item)
        if missing:
            raise ConfigError(f"{key}[{i}]: missing key {sorted(missing)[0]!r}")
        side = item.get("square_side")
        out.append(
            ManualFlower(
                id=_check_int(f"{key}[{i}].id", item["id"], lo=0),
                cx=_check_number(f"{key}[{i}].cx", item["cx"], None, None),
                cy=_check_number(f"{key}[{i}].cy", item["cy"], None, None),
                well_radius=_check_number(
                    f"{key}[{i}].well_radius", item["well_radius"], lo=1e-9, hi=None
                ),
                square_side=None
                if side is None
                else _check_number(f"{key}[{i}].square_side", side, lo=1e-9, hi=None),
                color=str(item.get("color", "")),
            )
        )
    return tuple(out)


def _validate_config_value(key: str, value: object) -> object:
    if key == "flower.threshold":
        if value == "otsu":
            return "otsu"
        return _check_int(key, value, lo=0, hi=255)
    if key == "flower.manual":
        return _parse_manual_flowers(key, value)
    if key == "visit.r_visit_px" and value is None:
        return None
    int_ranges = {
        "flower.min_area_px2": (1, None),
        "track.max_gap_frames": (0, None),
        "visit.gap_max_frames": (0, None),
        "visit.min_len_frames": (1, None),
        "visit.overlap_min_frames": (1, None),
        "crop.full_w": (1, None),
        "crop.full_h": (1, None),
        "crop.split_row": (1, None),
        "crop.unaligned_side": (1, None),
    }
    if key in int_ranges:
        lo, hi = int_ranges[key]
        return _check_int(key, value, lo, hi)
    float_ranges = {
        "flower.aspect_tol": (0.0, 1.0),
        "flower.fill_min": (1e-9, 1.0),
        "flower.well_fraction": (1e-9, 1.0),
        "track.gate_px": (1e-9, None),
        "visit.r_visit_px": (1e-9, None),
        "visit.r_visit_well_multiple": (1e-9, None),
        "crop.anchor_x": (0.0, None),
        "crop.anchor_y": (0.0, None),
    }
    lo, hi = float_ranges[key]
    return _check_number(key, value, lo, hi)


def config_from_dict(obj: Mapping[str, object]) -> AssayConfig:
    cfg = AssayConfig()
    updates: dict[str, object] = {}
    for key, value in obj.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        updates[_CONFIG_KEYS[key]] = _validate_config_value(key, value)
    cfg = replace(cfg, **updates)
    if cfg.crop_split_row >= cfg.crop_full_h:
        raise ConfigError(
            f"crop.split_row: value {cfg.crop_split_row} must be below crop.full_h"
        )
    return cfg


def parse_config(text: str) -> AssayConfig:
    """Parse the JSON assay config; unknown keys and out-of-range values rejected."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed config JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise FormatError("config must be a JSON object")
    return config_from_dict(obj)


def config_to_dict(cfg: AssayConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for f in fields(cfg):
        key = _ATTR_TO_KEY[f.name]
        value = getattr(cfg, f.name)
        if f.name == "flower_manual":
            value = [
                {
                    k: v
                    for k, v in {
                        "id": m.id,
                        "cx": m.cx,
                        "cy": m.cy,
                        "well_radius": m.well_radius,
                        "square_side": m.square_side,
                        "color": m.color,
                    }.items()
                    if not (k == "square_side" and v is None) and not (k == "color" and v == "")
                }
                for m in value
            ]
        out[key] = value
    return out


def write_config(cfg: AssayConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"
