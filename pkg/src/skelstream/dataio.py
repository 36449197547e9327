"""Clip and dataset interchange formats plus the flat key=value config reader.

A clip document looks like::

    {"fps": 30.0, "label": 3, "frames": [{"people": [{"slot": 0,
        "keypoints": [[x, y], ...18 pairs...]}]}]}

with optional top-level "width"/"height" giving the source image extent.
Single clips are stored as canonical pretty JSON (sorted keys, two-space
indent, trailing newline) so serialization round-trips byte-for-byte; clip
streams use one compact JSON document per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .numerics import Array

NUM_KEYPOINTS = 18
NUM_COORDS = 2


@dataclass
class PersonEntry:
    slot: int
    keypoints: Array  # (18, 2)


@dataclass
class ClipRecord:
    fps: float
    frames: list[list[PersonEntry]]
    label: int | None = None
    width: float | None = None
    height: float | None = None

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def max_slot(self) -> int:
        best = -1
        for frame in self.frames:
            for person in frame:
                best = max(best, person.slot)
        return best


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ParseError(f"{path}: {message}")


def _parse_person(obj, path: str) -> PersonEntry:
    _require(isinstance(obj, dict), path, "person entry must be an object")
    _require("slot" in obj, path, "missing field 'slot'")
    _require("keypoints" in obj, path, "missing field 'keypoints'")
    slot = obj["slot"]
    _require(isinstance(slot, int) and not isinstance(slot, bool) and slot >= 0, f"{path}.slot", "must be a non-negative integer")
    kps = obj["keypoints"]
    _require(isinstance(kps, list), f"{path}.keypoints", "must be a list of [x, y] pairs")
    _require(
        len(kps) == NUM_KEYPOINTS,
        f"{path}.keypoints",
        f"expected exactly {NUM_KEYPOINTS} pairs, got {len(kps)}",
    )
    points = np.zeros((NUM_KEYPOINTS, NUM_COORDS))
    for k, pair in enumerate(kps):
        _require(
            isinstance(pair, list) and len(pair) == NUM_COORDS,
            f"{path}.keypoints[{k}]",
            "must be an [x, y] pair",
        )
        for axis, value in enumerate(pair):
            _require(
                isinstance(value, (int, float)) and not isinstance(value, bool),
                f"{path}.keypoints[{k}][{axis}]",
                "must be a number",
            )
            points[k, axis] = float(value)
    return PersonEntry(slot=slot, keypoints=points)


def parse_clip(document) -> ClipRecord:
    """Validate a clip document (dict or JSON text) into a ClipRecord."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"document is not valid JSON: {exc}") from exc
    _require(isinstance(document, dict), "$", "clip document must be an object")
    _require("fps" in document, "$", "missing field 'fps'")
    fps = document["fps"]
    _require(isinstance(fps, (int, float)) and not isinstance(fps, bool) and fps > 0, "$.fps", "must be a positive number")
    label = document.get("label")
    if label is not None:
        _require(isinstance(label, int) and not isinstance(label, bool) and label >= 0, "$.label", "must be a non-negative integer")
    width = document.get("width")
    height = document.get("height")
    for name, value in (("width", width), ("height", height)):
        if value is not None:
            _require(
                isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0,
                f"$.{name}",
                "must be a positive number",
            )
    _require((width is None) == (height is None), "$", "'width' and 'height' must be given together")
    frames_doc = document.get("frames")
    _require(isinstance(frames_doc, list), "$.frames", "must be a list of frame objects")
    frames: list[list[PersonEntry]] = []
    for t, frame in enumerate(frames_doc):
        path = f"$.frames[{t}]"
        _require(isinstance(frame, dict), path, "frame must be an object")
        _require("people" in frame, path, "missing field 'people'")
        _require(isinstance(frame["people"], list), f"{path}.people", "must be a list")
        people = []
        seen = set()
        for i, person in enumerate(frame["people"]):
            entry = _parse_person(person, f"{path}.people[{i}]")
            _require(entry.slot not in seen, f"{path}.people[{i}].slot", f"duplicate slot {entry.slot}")
            seen.add(entry.slot)
            people.append(entry)
        frames.append(people)
    return ClipRecord(fps=float(fps), frames=frames, label=label, width=width, height=height)


def _json_number(value: float):
    """Emit integers without a trailing .0 unless they arrived as floats."""
    return value


def clip_to_obj(record: ClipRecord) -> dict:
    doc = {
        "fps": record.fps,
        "frames": [
            {
                "people": [
                    {
                        "keypoints": [[float(x), float(y)] for x, y in person.keypoints],
                        "slot": person.slot,
                    }
                    for person in frame
                ]
            }
            for frame in record.frames
        ],
    }
    if record.label is not None:
        doc["label"] = record.label
    if record.width is not None:
        doc["width"] = record.width
        doc["height"] = record.height
    return doc


def serialize_clip(record: ClipRecord) -> str:
    """Canonical pretty form: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(clip_to_obj(record), indent=2, sort_keys=True) + "\n"


def clip_to_jsonl_line(record: ClipRecord) -> str:
    return json.dumps(clip_to_obj(record), separators=(",", ":"), sort_keys=True)


def load_clip(path) -> ClipRecord:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read clip file {path}: {exc}") from exc
    return parse_clip(text)


def save_clip(path, record: ClipRecord) -> None:
    Path(path).write_text(serialize_clip(record), encoding="utf-8")


def to_tensor(record: ClipRecord, m_cap: int) -> Array:
    """Densify a record into (m_cap, 2, T, 18); absent persons stay zero.

    When the record carries image dimensions, coordinates are centered and
    scaled to [-1, 1] by the half-extent; otherwise they pass through.
    """
    if m_cap < 1:
        raise ConfigError(f"m_cap must be >= 1, got {m_cap}")
    t_len = record.num_frames
    out = np.zeros((m_cap, NUM_COORDS, t_len, NUM_KEYPOINTS))
    for t, frame in enumerate(record.frames):
        for person in frame:
            if person.slot >= m_cap:
                raise DataError(
                    f"frame {t} references person slot {person.slot}, beyond capacity {m_cap}"
                )
            out[person.slot, 0, t, :] = person.keypoints[:, 0]
            out[person.slot, 1, t, :] = person.keypoints[:, 1]
    if record.width is not None:
        half_w = record.width / 2.0
        half_h = record.height / 2.0
        out[:, 0] = (out[:, 0] - half_w) / half_w
        out[:, 1] = (out[:, 1] - half_h) / half_h
    return out


def tensor_to_record(clip: Array, fps: float, label: int | None = None) -> ClipRecord:
    """Rebuild a record from a dense tensor, omitting all-zero skeletons."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4 or clip.shape[1] != NUM_COORDS or clip.shape[3] != NUM_KEYPOINTS:
        raise DataError(f"expected a (M, 2, T, {NUM_KEYPOINTS}) tensor, got {clip.shape}")
    frames = []
    for t in range(clip.shape[2]):
        people = []
        for slot in range(clip.shape[0]):
            kp = clip[slot, :, t, :].T  # (18, 2)
            if np.any(kp != 0.0):
                people.append(PersonEntry(slot=slot, keypoints=kp.copy()))
        frames.append(people)
    return ClipRecord(fps=fps, frames=frames, label=label)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    classes: list[str]
    clips: list[tuple[str, str]]  # (path, split) with split in {train, val}

    def __post_init__(self):
        for path, split in self.clips:
            if split not in ("train", "val"):
                raise DataError(f"clip {path}: split must be 'train' or 'val', got {split!r}")


def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "classes": list(manifest.classes),
        "clips": [{"path": p, "split": s} for p, s in manifest.clips],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def manifest_from_json(text: str) -> DatasetManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "$", "manifest must be an object")
    _require(isinstance(doc.get("classes"), list), "$.classes", "must be a list of class names")
    _require(isinstance(doc.get("clips"), list), "$.clips", "must be a list")
    clips = []
    for i, entry in enumerate(doc["clips"]):
        _require(isinstance(entry, dict), f"$.clips[{i}]", "must be an object")
        _require("path" in entry and "split" in entry, f"$.clips[{i}]", "needs 'path' and 'split'")
        clips.append((str(entry["path"]), str(entry["split"])))
    return DatasetManifest(classes=[str(c) for c in doc["classes"]], clips=clips)


# ---------------------------------------------------------------------------
# Flat key = value configuration files
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """Parse a flat ``key = value`` config: numbers, booleans, strings.

    Lines starting with '#' (or with a trailing '# comment') and blank lines
    are skipped. Values may be quoted; bare words parse as strings.
    """
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            raise ConfigError(f"line {lineno}: sections are not supported in this config format")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if value.startswith(('"', "'")):
            quote = value[0]
            end = value.find(quote, 1)
            if end < 0:
                raise ConfigError(f"line {lineno}: unterminated string")
            out[key] = value[1:end]
            continue
        if "#" in value:
            value = value.split("#", 1)[0].strip()
        if not value:
            raise ConfigError(f"line {lineno}: empty value for key {key!r}")
        low = value.lower()
        if low in ("true", "false"):
            out[key] = low == "true"
            continue
        try:
            out[key] = int(value)
            continue
        except ValueError:
            pass
        try:
            out[key] = float(value)
            continue
        except ValueError:
            pass
        out[key] = value
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)
