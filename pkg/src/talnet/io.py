"""On-disk formats.

Feature file (``.talf``), all little-endian::

    b"TALF" | version u32 | T u32 | D u32 | cells_per_second f64 | T*D float32 (row-major)

Annotations: one ``annotations.json`` per split::

    {"videos": [{"id", "T", "cells_per_second",
                 "instances": [{"start", "end", "label"}]}]}

Proposals and detections: JSON Lines of ``{video, start, end, score[, label]}``.
Times are in feature cells throughout; see :func:`seconds_to_cells`.

Checkpoint (``.talc``)::

    b"TALC" | version u32 | header_len u32 | header JSON (utf-8) | array bytes

The header lists each array's name, dtype, shape and byte offset into the
payload, plus the model config, its digest and optimizer/RNG state. Keys are
sorted and no timestamps are written, so identical states give identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .synth import Dataset, SynthConfig, VideoSample
from .tensor import FeatureGrid

FEATURE_MAGIC = b"TALF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIId")

CKPT_MAGIC = b"TALC"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def seconds_to_cells(seconds: float, cells_per_second: float) -> float:
    return seconds * cells_per_second


def cells_to_seconds(cells: float, cells_per_second: float) -> float:
    return cells / cells_per_second


# --------------------------------------------------------------------------
# features


def write_features(path: Path | str, grid: FeatureGrid) -> None:
    data = np.ascontiguousarray(grid.data, dtype="<f4")
    T, D = data.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D, float(grid.cells_per_second)))
        fh.write(data.tobytes())


def read_features(path: Path | str) -> FeatureGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, T, D, cps = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _FEATURE_HEADER.size + 4 * T * D
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {T}x{D} features, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(T, D).astype(np.float32)
    try:
        return FeatureGrid(data, cps)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# annotations and datasets


def _video_record(v: VideoSample) -> dict:
    return {
        "id": v.id,
        "T": v.T,
        "cells_per_second": v.stream_a.cells_per_second,
        "instances": [{"start": s, "end": e, "label": c} for s, e, c in v.instances()],
    }


def parse_annotations(doc: dict) -> list[dict]:
    """Validate an annotations document and return its video records."""
    if not isinstance(doc, dict) or not isinstance(doc.get("videos"), list):
        raise FormatError("annotations must be an object with a 'videos' list")
    seen = set()
    for v in doc["videos"]:
        for key in ("id", "T", "cells_per_second", "instances"):
            if key not in v:
                raise FormatError(f"video record missing {key!r}")
        if v["id"] in seen:
            raise FormatError(f"duplicate video id {v['id']!r}")
        seen.add(v["id"])
        pairs = set()
        for inst in v["instances"]:
            s, e, c = inst.get("start"), inst.get("end"), inst.get("label")
            if s is None or e is None or c is None:
                raise FormatError(f"{v['id']}: instance needs start, end and label")
            if not e > s:
                raise FormatError(f"{v['id']}: annotation end {e} must exceed start {s}")
            if s < 0 or e > v["T"]:
                raise FormatError(f"{v['id']}: annotation [{s}, {e}) outside [0, {v['T']})")
            if int(c) != c or c < 1:
                raise FormatError(f"{v['id']}: label must be an integer >= 1, got {c}")
            if (s, e, c) in pairs:
                raise FormatError(f"{v['id']}: duplicate annotation {(s, e, c)}")
            pairs.add((s, e, c))
    return doc["videos"]


def write_split(directory: Path | str, videos: list[VideoSample]) -> None:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    doc = {"videos": [_video_record(v) for v in videos]}
    (directory / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    for v in videos:
        write_features(directory / "features" / f"{v.id}.a.talf", v.stream_a)
        write_features(directory / "features" / f"{v.id}.b.talf", v.stream_b)


def read_split(directory: Path | str) -> list[VideoSample]:
    directory = Path(directory)
    ann = directory / "annotations.json"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.json in {directory}")
    try:
        doc = json.loads(ann.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{ann}: {exc}") from None
    out = []
    for rec in parse_annotations(doc):
        a = read_features(directory / "features" / f"{rec['id']}.a.talf")
        b = read_features(directory / "features" / f"{rec['id']}.b.talf")
        if a.T != rec["T"] or b.T != rec["T"]:
            raise FormatError(f"{rec['id']}: feature length does not match annotation T={rec['T']}")
        rows = np.array([[i["start"], i["end"]] for i in rec["instances"]], dtype=np.float64).reshape(-1, 2)
        labels = np.array([i["label"] for i in rec["instances"]], dtype=np.int64)
        out.append(VideoSample(rec["id"], a, b, rows, labels))
    return out


def write_dataset(root: Path | str, dataset: Dataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_split(root / "train", dataset.train)
    write_split(root / "test", dataset.test)
    if dataset.config is not None:
        (root / "synth_config.json").write_text(json.dumps(dataset.config.to_dict(), indent=1, sort_keys=True) + "\n")


def read_dataset(root: Path | str) -> Dataset:
    root = Path(root)
    config = None
    cfg_path = root / "synth_config.json"
    if cfg_path.exists():
        config = SynthConfig.from_dict(json.loads(cfg_path.read_text()))
    return Dataset(read_split(root / "train"), read_split(root / "test"), config)


def resolve_split(path: Path | str, split: str) -> Path:
    """Accept either a split directory or a dataset root containing ``split``."""
    path = Path(path)
    if (path / "annotations.json").exists():
        return path
    if (path / split / "annotations.json").exists():
        return path / split
    raise FileNotFoundError(f"{path} is neither a split directory nor a dataset with a {split!r} split")


# --------------------------------------------------------------------------
# proposals / detections


def write_jsonl(path: Path | str, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: Path | str, need_label: bool = False) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            keys = ("video", "start", "end", "score") + (("label",) if need_label else ())
            missing = [k for k in keys if k not in rec]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing {missing}")
            if not rec["end"] > rec["start"]:
                raise FormatError(f"{path}:{lineno}: end must exceed start")
            out.append(rec)
    return out


# --------------------------------------------------------------------------
# checkpoints


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path: Path | str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in chunks:
            fh.write(blob)


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = 12 + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:start])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    arrays = {}
    for e in header["arrays"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(raw):
            raise FormatError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
