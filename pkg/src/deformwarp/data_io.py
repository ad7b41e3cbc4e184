"""On-disk formats: tensor containers, pose JSON, PNG images, pair manifests.

Tensor container layout (all integers little-endian)::

    b"DWT1"  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 ndim,
               u32 dims[ndim], row-major payload
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np
from PIL import Image

from .errors import IncompatibleCheckpointError, InvalidArgumentError, PoseParseError
from .pose import NUM_JOINTS, Pose

if TYPE_CHECKING:
    from .optim import ParamStore

MAGIC = b"DWT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


# -- tensor container -----------------------------------------------------------

def container_bytes(entries: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(arr.dtype.newbyteorder("="), copy=False)
        if arr.dtype not in _CODES:
            raise InvalidArgumentError(f"entry '{name}': only float32/float64 are storable, got {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvalidArgumentError(f"entry name too long ({len(raw)} bytes)")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def parse_container(data: bytes) -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise IncompatibleCheckpointError(f"container truncated at byte {pos} (need {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise IncompatibleCheckpointError("bad magic: not a DWT1 tensor container")
    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise IncompatibleCheckpointError(f"entry '{name}': unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = math.prod(dims)
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        entries[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(data):
        raise IncompatibleCheckpointError(f"{len(data) - pos} trailing bytes after last entry")
    return entries


def write_container(path, entries: Mapping[str, np.ndarray]):
    Path(path).write_bytes(container_bytes(entries))


def read_container(path) -> dict[str, np.ndarray]:
    return parse_container(Path(path).read_bytes())


def meta_entry(text: str) -> tuple[str, np.ndarray]:
    """Metadata lives in entry names; the payload is an empty f64 vector."""
    return text, np.zeros(0)


# -- poses ----------------------------------------------------------------------

@dataclass(frozen=True)
class PoseRecord:
    pose: Pose
    width: int
    height: int


def pose_to_json(pose: Pose, width: int, height: int) -> dict:
    joints = [[float(x), float(y), int(v)] for (x, y), v in zip(pose.xy, pose.visible)]
    return {"width": int(width), "height": int(height), "joints": joints}


def pose_from_json(obj) -> PoseRecord:
    if not isinstance(obj, dict):
        raise PoseParseError("pose file must hold a JSON object")
    for key in ("width", "height", "joints"):
        if key not in obj:
            raise PoseParseError(f"missing field '{key}'")
    for key in ("width", "height"):
        if not isinstance(obj[key], int) or obj[key] < 1:
            raise PoseParseError(f"field '{key}' must be a positive integer, got {obj[key]!r}")
    joints = obj["joints"]
    if not isinstance(joints, list) or len(joints) != NUM_JOINTS:
        n = len(joints) if isinstance(joints, list) else "non-list"
        raise PoseParseError(f"field 'joints': expected {NUM_JOINTS} joints, got {n}")
    xy, vis = [], []
    for i, item in enumerate(joints):
        if not isinstance(item, list) or len(item) != 3:
            raise PoseParseError(f"field 'joints[{i}]': expected [x, y, v]")
        x, y, v = item
        if not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in (x, y)):
            raise PoseParseError(f"field 'joints[{i}]': coordinates must be numbers")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise PoseParseError(f"field 'joints[{i}]': coordinates must be finite")
        if v not in (0, 1):
            raise PoseParseError(f"field 'joints[{i}]': visibility must be 0 or 1, got {v!r}")
        xy.append((float(x), float(y)))
        vis.append(bool(v))
    return PoseRecord(Pose(np.array(xy), np.array(vis)), obj["width"], obj["height"])


def write_pose(path, pose: Pose, width: int, height: int):
    Path(path).write_text(json.dumps(pose_to_json(pose, width, height)))


def read_pose_record(path) -> PoseRecord:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PoseParseError(f"{path}: malformed JSON ({exc})") from exc
    return pose_from_json(obj)


def read_pose(path) -> Pose:
    return read_pose_record(path).pose


# -- images ---------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to 8-bit with round-to-nearest."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 127.5 - 1.0


def write_png(path, img: np.ndarray):
    arr = to_uint8(img)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    """8-bit RGB PNG to an (h, w, 3) float array in [-1, 1]."""
    with Image.open(path) as im:
        return from_uint8(np.array(im.convert("RGB")))


def write_mask_png(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.array(im.convert("L")) > 127).astype(np.uint8)


# -- manifests ------------------------------------------------------------------

MANIFEST_FIELDS = ("image_a", "pose_a", "image_b", "pose_b")


@dataclass(frozen=True)
class ManifestRow:
    image_a: Path
    pose_a: Path
    image_b: Path
    pose_b: Path
    mask_b: Path | None = None


def write_manifest(path, rows: Iterable[ManifestRow]):
    path = Path(path)
    rows = list(rows)
    with_mask = any(r.mask_b is not None for r in rows)
    fields = list(MANIFEST_FIELDS) + (["mask_b"] if with_mask else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            rel = [_rel(getattr(r, f), path.parent) for f in fields]
            w.writerow(rel)


def _rel(p, base):
    if p is None:
        return ""
    p = Path(p)
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def read_manifest(path) -> list[ManifestRow]:
    """Relative paths are resolved against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in MANIFEST_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise InvalidArgumentError(f"{path}: manifest lacks columns {missing}")
        for rec in reader:
            mask = rec.get("mask_b") or None
            rows.append(ManifestRow(*(base / rec[f] for f in MANIFEST_FIELDS),
                                    mask_b=(base / mask) if mask else None))
    return rows


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "deformwarp-checkpoint/1"


def save_checkpoint(path, stores: Mapping[str, "ParamStore"], config: Mapping, iteration: int):
    """Write parameters, Adam moments and step counts of every store plus a JSON config."""
    entries = dict([meta_entry(f"meta/format={CHECKPOINT_FORMAT}"),
                    meta_entry("meta/config=" + json.dumps(config, sort_keys=True))])
    entries["meta/iteration"] = np.array(float(iteration))
    for prefix, store in stores.items():
        entries[f"{prefix}/adam_step"] = np.array(float(store.adam.step))
        for name, val in store.params.items():
            entries[f"{prefix}/param/{name}"] = val
            entries[f"{prefix}/adam_m/{name}"] = store.adam.m[name]
            entries[f"{prefix}/adam_v/{name}"] = store.adam.v[name]
    write_container(path, entries)


def load_checkpoint(path) -> tuple[dict, dict, int]:
    """Returns (stores by prefix, config dict, iteration)."""
    from .optim import ParamStore

    path = Path(path)
    if not path.is_file():
        raise IncompatibleCheckpointError(f"checkpoint not found: {path}")
    entries = read_container(path)
    names = list(entries)
    if f"meta/format={CHECKPOINT_FORMAT}" not in names:
        raise IncompatibleCheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg_names = [n for n in names if n.startswith("meta/config=")]
    if len(cfg_names) != 1 or "meta/iteration" not in entries:
        raise IncompatibleCheckpointError(f"{path}: checkpoint metadata incomplete")
    config = json.loads(cfg_names[0][len("meta/config="):])
    iteration = int(entries["meta/iteration"])
    stores: dict[str, ParamStore] = {}
    for name in names:
        if "/param/" in name:
            prefix, pname = name.split("/param/", 1)
            store = stores.setdefault(prefix, ParamStore())
            store.add(pname, entries[name].copy())
            store.adam.m[pname] = entries[f"{prefix}/adam_m/{pname}"].copy()
            store.adam.v[pname] = entries[f"{prefix}/adam_v/{pname}"].copy()
    for prefix, store in stores.items():
        store.adam.step = int(entries[f"{prefix}/adam_step"])
    return stores, config, iteration
