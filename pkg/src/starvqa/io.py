"""On-disk formats: raw video container, dataset manifest, checkpoint.

Video container (little-endian)::

    b"SVQV" | u8 version=1 | u32 frames | u32 height | u32 width | payload

where the payload is frames*height*width*3 bytes of interleaved RGB,
row-major, frames back to back.

Checkpoint::

    b"SVQC" | u8 version=1 | u32 header_length | header (UTF-8 JSON) | body

The header holds the config snapshot, stage tag, decoder parameters,
dataset ranges and a tensor index (name, shape, byte offset, byte length).
The body is the indexed tensors as little-endian float64, in index order.
"""
from __future__ import annotations

import json
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import MosClampWarning
from .errors import (BadMagicError, FormatError, ManifestError, TruncatedPayloadError,
                     VersionMismatchError)
from .tokenizer import RawVideo

VIDEO_MAGIC = b"SVQV"
VIDEO_VERSION = 1
VIDEO_HEADER = struct.Struct("<4sBIII")

CKPT_MAGIC = b"SVQC"
CKPT_VERSION = 1
CKPT_PREFIX = struct.Struct("<4sBI")

STAGES = ("image", "video")


# -- video container --------------------------------------------------------

def encode_container(video: RawVideo) -> bytes:
    f = np.ascontiguousarray(video.frames, dtype=np.uint8)
    t, h, w, _ = f.shape
    return VIDEO_HEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, t, h, w) + f.tobytes()


def decode_container(buf: bytes, source: str = "<bytes>") -> RawVideo:
    if len(buf) < VIDEO_HEADER.size:
        if not VIDEO_MAGIC.startswith(bytes(buf[:4])):
            raise BadMagicError(f"{source}: not a video container")
        raise TruncatedPayloadError(f"{source}: truncated header ({len(buf)} of {VIDEO_HEADER.size} bytes)")
    magic, version, t, h, w = VIDEO_HEADER.unpack_from(buf)
    if magic != VIDEO_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {VIDEO_MAGIC!r}")
    if version != VIDEO_VERSION:
        raise VersionMismatchError(f"{source}: container version {version}, expected {VIDEO_VERSION}")
    if t < 1 or h < 1 or w < 1:
        raise FormatError(f"{source}: empty dimensions {t}x{h}x{w}")
    need = t * h * w * 3
    payload = memoryview(buf)[VIDEO_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{source}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise FormatError(f"{source}: {len(payload) - need} trailing bytes after payload")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, 3).copy()
    return RawVideo(frames)


def write_container(video: RawVideo, path: str | Path) -> None:
    Path(path).write_bytes(encode_container(video))


def read_container(path: str | Path) -> RawVideo:
    return decode_container(Path(path).read_bytes(), str(path))


# -- manifest -----------------------------------------------------------------

@dataclass
class ManifestItem:
    path: str
    mos: float
    dataset: str
    split: str | None = None
    label: int | None = None

    def to_dict(self) -> dict:
        d = {"path": self.path, "mos": self.mos, "dataset": self.dataset}
        if self.split is not None:
            d["split"] = self.split
        if self.label is not None:
            d["label"] = self.label
        return d


@dataclass
class Manifest:
    datasets: dict[str, tuple[float, float]]
    items: list[ManifestItem]
    root: Path = field(default_factory=Path)

    def resolve(self, item: ManifestItem) -> Path:
        return self.root / item.path

    def range_of(self, dataset: str) -> tuple[float, float]:
        try:
            return self.datasets[dataset]
        except KeyError:
            raise ManifestError(f"dataset {dataset!r} has no declared MOS range") from None

    def subset(self, items: list[ManifestItem]) -> "Manifest":
        return Manifest(dict(self.datasets), list(items), self.root)

    def to_dict(self) -> dict:
        return {
            "datasets": {k: {"mos_min": lo, "mos_max": hi} for k, (lo, hi) in self.datasets.items()},
            "items": [it.to_dict() for it in self.items],
        }


def _line_of(text: str, needle: str) -> int | None:
    pos = text.find(needle)
    return None if pos < 0 else text.count("\n", 0, pos) + 1


def _number(value, what: str, text: str, anchor: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        line = _line_of(text, anchor)
        where = f"line {line}: " if line else ""
        raise ManifestError(f"{where}{what} is not a number: {value!r}")
    return float(value)


def parse_manifest(text: str, root: Path | str = ".", source: str = "<manifest>") -> Manifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "datasets" not in doc or "items" not in doc:
        raise ManifestError(f"{source}: expected an object with 'datasets' and 'items'")
    datasets: dict[str, tuple[float, float]] = {}
    for name, rng in doc["datasets"].items():
        anchor = json.dumps(name)
        if not isinstance(rng, dict) or "mos_min" not in rng or "mos_max" not in rng:
            raise ManifestError(f"{source}: dataset {name!r} needs mos_min and mos_max")
        lo = _number(rng["mos_min"], f"{name}.mos_min", text, anchor)
        hi = _number(rng["mos_max"], f"{name}.mos_max", text, anchor)
        if not hi > lo:
            raise ManifestError(f"{source}: dataset {name!r} has empty MOS range [{lo}, {hi}]")
        datasets[name] = (lo, hi)
    items = []
    for i, raw in enumerate(doc["items"]):
        if not isinstance(raw, dict) or not {"path", "mos", "dataset"} <= set(raw):
            raise ManifestError(f"{source}: item {i} needs path, mos and dataset")
        anchor = json.dumps(raw["path"])
        name = raw["dataset"]
        if name not in datasets:
            line = _line_of(text, anchor)
            raise ManifestError(f"{source}: line {line}: item {raw['path']!r} references undeclared dataset {name!r}")
        mos = _number(raw["mos"], f"item {raw['path']!r} mos", text, anchor)
        lo, hi = datasets[name]
        if mos < lo or mos > hi:
            warnings.warn(f"{source}: item {raw['path']!r} MOS {mos} outside [{lo}, {hi}]; clamped",
                          MosClampWarning, stacklevel=2)
            mos = min(max(mos, lo), hi)
        split = raw.get("split")
        if split not in (None, "train", "test"):
            raise ManifestError(f"{source}: item {raw['path']!r} has unknown split {split!r}")
        label = raw.get("label")
        if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
            raise ManifestError(f"{source}: item {raw['path']!r} label must be an integer")
        items.append(ManifestItem(raw["path"], mos, name, split, label))
    return Manifest(datasets, items, Path(root))


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(), path.parent, str(path))


def dump_manifest(manifest: Manifest) -> str:
    return json.dumps(manifest.to_dict(), indent=2) + "\n"


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(dump_manifest(manifest))


# -- checkpoint ---------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    stage: str
    params: "OrderedDict[str, np.ndarray]"
    velocity: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    decoder: dict | None = None
    datasets: dict[str, list[float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise FormatError(f"unknown checkpoint stage {self.stage!r}")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index = []
    blobs = []
    offset = 0
    for group, tensors in (("param", ckpt.params), ("velocity", ckpt.velocity)):
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index.append({"name": f"{group}/{name}", "shape": list(np.shape(arr)),
                          "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {
        "format": "starvqa-checkpoint",
        "version": CKPT_VERSION,
        "stage": ckpt.stage,
        "config": ckpt.config,
        "decoder": ckpt.decoder,
        "datasets": ckpt.datasets,
        "meta": ckpt.meta,
        "index": index,
    }
    hbytes = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    return CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < CKPT_PREFIX.size:
        raise TruncatedPayloadError(f"{source}: truncated checkpoint prefix")
    magic, version, hlen = CKPT_PREFIX.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{source}: checkpoint version {version}, expected {CKPT_VERSION}")
    start = CKPT_PREFIX.size
    if len(buf) < start + hlen:
        raise TruncatedPayloadError(f"{source}: truncated header")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header: {exc}") from None
    for key in ("stage", "config", "index"):
        if key not in header:
            raise FormatError(f"{source}: header lacks {key!r}")
    body = memoryview(buf)[start + hlen:]
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    velocity: OrderedDict[str, np.ndarray] = OrderedDict()
    expected_offset = 0
    for entry in header["index"]:
        name = entry.get("name", "?")
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{source}: malformed index entry for tensor {name!r}") from None
        if any(s < 0 for s in shape) or 8 * int(np.prod(shape, dtype=np.int64)) != nbytes:
            raise FormatError(f"{source}: tensor {name!r} shape {list(shape)} inconsistent with {nbytes} bytes")
        if offset != expected_offset:
            raise FormatError(f"{source}: tensor {name!r} offset {offset}, expected {expected_offset}")
        if offset + nbytes > len(body):
            raise TruncatedPayloadError(f"{source}: body too short for tensor {name!r}")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        group, _, tname = name.partition("/")
        if group == "param":
            params[tname] = arr
        elif group == "velocity":
            velocity[tname] = arr
        else:
            raise FormatError(f"{source}: tensor {name!r} has unknown group")
        expected_offset = offset + nbytes
    if expected_offset != len(body):
        raise FormatError(f"{source}: {len(body) - expected_offset} unindexed bytes after last tensor")
    ckpt = Checkpoint(header["config"], header["stage"], params, velocity, header.get("decoder"),
                      header.get("datasets", {}), header.get("meta", {}))
    verify_shapes(ckpt, source)
    return ckpt


def verify_shapes(ckpt: Checkpoint, source: str = "<checkpoint>") -> None:
    """Check tensor names and shapes against the config snapshot."""
    from .config import TrainConfig
    from .errors import ConfigError
    from .model import expected_shapes

    try:
        cfg = TrainConfig.from_dict(ckpt.config).model
    except ConfigError as exc:
        raise FormatError(f"{source}: bad config snapshot: {exc}") from None
    if (cfg.mode == "image") != (ckpt.stage == "image"):
        raise FormatError(f"{source}: stage {ckpt.stage!r} disagrees with config mode {cfg.mode!r}")
    want = expected_shapes(cfg)
    for name, shape in want.items():
        if name not in ckpt.params:
            raise FormatError(f"{source}: tensor {name!r} missing")
        if ckpt.params[name].shape != shape:
            raise FormatError(f"{source}: tensor {name!r} has shape {list(ckpt.params[name].shape)}, "
                              f"config implies {list(shape)}")
    extra = set(ckpt.params) - set(want)
    if extra:
        raise FormatError(f"{source}: unexpected tensors {sorted(extra)}")
    for name, arr in ckpt.velocity.items():
        if name not in want or arr.shape != want[name]:
            raise FormatError(f"{source}: velocity {name!r} does not match its parameter")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
