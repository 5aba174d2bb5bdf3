"""Image files, stack manifests and the procedural toy dataset."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .defocus import Scene, synth_stack
from .stack import FocalStack, FocusAxis, Sample

FORMATS = ("png8", "png16", "pfm")
MANIFEST_VERSION = 1


class FormatError(ValueError):
    """Corrupt or truncated image file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---- PFM -------------------------------------------------------------


def read_pfm(path) -> np.ndarray:
    """Decode a PFM into a float32 ``H x W`` or ``H x W x 3`` array, top row first."""
    buf = Path(path).read_bytes()
    pos = 0
    tokens = []
    # header: tag, width, height, scale; whitespace separated, one whitespace byte ends it
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated PFM header", pos)
        tokens.append((buf[start:pos], start))
    pos += 1
    tag, tag_at = tokens[0]
    if tag == b"PF":
        channels = 3
    elif tag == b"Pf":
        channels = 1
    else:
        raise FormatError(f"bad PFM tag {tag!r}", tag_at)
    try:
        width, height = int(tokens[1][0]), int(tokens[2][0])
    except ValueError:
        raise FormatError("bad PFM dimensions", tokens[1][1]) from None
    try:
        scale = float(tokens[3][0])
    except ValueError:
        raise FormatError("bad PFM scale", tokens[3][1]) from None
    if width <= 0 or height <= 0:
        raise FormatError("non-positive PFM dimensions", tokens[1][1])
    if scale == 0:
        raise FormatError("PFM scale must be non-zero", tokens[3][1])
    count = width * height * channels
    if len(buf) - pos < 4 * count:
        raise FormatError(f"PFM data truncated: need {4 * count} bytes, have {len(buf) - pos}", len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.ascontiguousarray(data.reshape(shape)[::-1])


def write_pfm(path, array) -> None:
    """Little-endian PFM, rows stored bottom-up."""
    a = np.asarray(array)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[-1] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds H x W or H x W x 3 arrays, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("PFM values must be finite")
    h, w = a.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    Path(path).write_bytes(header + np.ascontiguousarray(a[::-1], dtype="<f4").tobytes())


# ---- PNG -------------------------------------------------------------


def _quantize(a: np.ndarray, levels: int) -> np.ndarray:
    # round half up
    return np.floor(a * levels + 0.5)


def write_png(path, array, bits: int = 8) -> None:
    a = np.asarray(array, dtype=np.float64)
    if not np.isfinite(a).all() or a.min() < 0 or a.max() > 1:
        raise ValueError("PNG values must lie in [0, 1]")
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    levels = 255 if bits == 8 else 65535
    q = _quantize(a, levels).astype(np.uint8 if bits == 8 else np.uint16)
    if q.ndim == 3:
        q = q[..., ::-1]  # OpenCV stores BGR
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"could not write {path}")


def read_png(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(str(p))
    raw = p.read_bytes()
    if raw[:8] != b"\x89PNG\r\n\x1a\n":
        raise FormatError("missing PNG signature", 0)
    q = cv2.imdecode(np.frombuffer(raw, np.uint8), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise FormatError("undecodable PNG data", 8)
    if q.ndim == 3:
        q = q[..., 2::-1] if q.shape[-1] == 4 else q[..., ::-1]
    levels = 255.0 if q.dtype == np.uint8 else 65535.0
    return np.ascontiguousarray(q, dtype=np.float64) / levels


def image_read(path, format: str | None = None) -> np.ndarray:
    fmt = format or _guess(path)
    if fmt == "pfm":
        return read_pfm(path)
    if fmt in ("png8", "png16"):
        return read_png(path)
    raise ValueError(f"unknown image format {fmt!r}")


def image_write(path, array, format: str | None = None) -> None:
    fmt = format or _guess(path)
    if fmt == "pfm":
        write_pfm(path, array)
    elif fmt == "png8":
        write_png(path, array, 8)
    elif fmt == "png16":
        write_png(path, array, 16)
    else:
        raise ValueError(f"unknown image format {fmt!r}")


def _guess(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return "pfm"
    if suffix == ".png":
        return "png8"
    raise ValueError(f"cannot infer image format from {path}")


# ---- manifests -------------------------------------------------------


class ManifestError(ValueError):
    pass


class NonMonotoneError(ManifestError):
    def __init__(self, index: int, positions):
        super().__init__(f"focus positions must strictly increase; slice {index} breaks the order: {list(positions)}")
        self.index = index


class SizeMismatchError(ManifestError):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    pass


@dataclass
class SliceEntry:
    file: str
    focus_position: float


@dataclass
class StackManifest:
    slices: list[SliceEntry]
    gt_depth: str | None = None
    gt_aif: str | None = None
    kappa: float | None = None
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False, repr=False)

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "slices": [{"file": s.file, "focus_position": s.focus_position} for s in self.slices],
        }
        for key in ("gt_depth", "gt_aif", "kappa"):
            if getattr(self, key) is not None:
                doc[key] = getattr(self, key)
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, root: Path = Path(".")) -> "StackManifest":
        doc = json.loads(text)
        version = doc.get("version")
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {version!r}")
        slices = [SliceEntry(str(s["file"]), float(s["focus_position"])) for s in doc["slices"]]
        return cls(slices, doc.get("gt_depth"), doc.get("gt_aif"), doc.get("kappa"), version, Path(root))

    def validate(self):
        if len(self.slices) < 2:
            raise ManifestError(f"a stack needs at least 2 slices, manifest lists {len(self.slices)}")
        pos = [s.focus_position for s in self.slices]
        for i in range(1, len(pos)):
            if not pos[i] > pos[i - 1]:
                raise NonMonotoneError(i, pos)


def manifest_save(path, manifest: StackManifest) -> None:
    manifest.validate()
    Path(path).write_text(manifest.to_json())


def manifest_read(path) -> StackManifest:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"manifest not found: {p}")
    m = StackManifest.from_json(p.read_text(), p.parent)
    m.validate()
    return m


def _load_image(root: Path, name: str) -> np.ndarray:
    p = root / name
    if not p.is_file():
        raise MissingFileError(f"referenced file missing: {p}")
    return image_read(p)


def manifest_load(path) -> tuple[Sample, StackManifest]:
    """Load slices in listed order plus whatever ground truth the manifest names."""
    m = manifest_read(path)
    images = [_load_image(m.root, s.file) for s in m.slices]
    shape = images[0].shape
    for s, img in zip(m.slices, images):
        if img.shape != shape:
            raise SizeMismatchError(f"slice {s.file} has shape {img.shape}, expected {shape}")
    if len(shape) != 3 or shape[-1] != 3:
        raise SizeMismatchError(f"slices must be RGB, got shape {shape}")
    axis = FocusAxis([s.focus_position for s in m.slices])
    stack = FocalStack(np.stack(images, axis=-1), axis)
    depth = aif = None
    if m.gt_depth is not None:
        depth = _load_image(m.root, m.gt_depth)
        if depth.shape[:2] != shape[:2]:
            raise SizeMismatchError(f"depth {m.gt_depth} has shape {depth.shape}, slices are {shape[:2]}")
    if m.gt_aif is not None:
        aif = _load_image(m.root, m.gt_aif)
        if aif.shape != shape:
            raise SizeMismatchError(f"aif {m.gt_aif} has shape {aif.shape}, slices are {shape}")
    return Sample(stack, gt_depth=depth, gt_aif=aif, kappa=m.kappa), m


def write_sample(out_dir, sample: Sample, color_format: str = "png8") -> Path:
    """Write a stack (and any ground truth) beside a ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".png"
    entries = []
    for t, p in enumerate(sample.stack.axis.positions):
        name = f"slice_{t:02d}{ext}"
        image_write(out / name, np.clip(sample.stack.slice(t), 0.0, 1.0), color_format)
        entries.append(SliceEntry(name, float(p)))
    depth_name = aif_name = None
    if sample.gt_depth is not None:
        depth_name = "depth.pfm"
        write_pfm(out / depth_name, sample.gt_depth)
    if sample.gt_aif is not None:
        aif_name = "aif" + ext
        image_write(out / aif_name, np.clip(sample.gt_aif, 0.0, 1.0), color_format)
    manifest = StackManifest(entries, depth_name, aif_name, sample.kappa)
    path = out / "manifest.json"
    manifest_save(path, manifest)
    return path


def load_dataset(directory) -> list[Sample]:
    """Every ``*/manifest.json`` below ``directory`` (or a single manifest), in sorted order."""
    d = Path(directory)
    paths = [d] if d.is_file() else sorted(d.glob("*/manifest.json")) or sorted(d.glob("manifest.json"))
    if not paths:
        raise MissingFileError(f"no manifests under {d}")
    return [manifest_load(p)[0] for p in paths]


# ---- toy dataset -----------------------------------------------------


TEXTURE_AMPLITUDE = 0.4


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    noise = rng.uniform(-1, 1, size=(h, w))
    tint = rng.uniform(0.5, 1.0, size=3)
    return np.clip(base + TEXTURE_AMPLITUDE * noise[..., None] * tint, 0.0, 1.0)


def toy_scene(rng: np.random.Generator, size: int, kappa: float, layers: int = 16) -> Scene:
    """Textured rectangles at random depths over a textured, depth-ramped background."""
    aif = _texture(rng, size, size)
    d0, d1 = rng.uniform(0, 1, size=2)
    ramp = np.linspace(d0, d1, size)
    depth = np.tile(ramp, (size, 1)) if rng.random() < 0.5 else np.tile(ramp[:, None], (1, size))
    for _ in range(int(rng.integers(2, 5))):
        rh, rw = rng.integers(size // 5, size // 2 + 1, size=2)
        y, x = rng.integers(0, size - rh + 1), rng.integers(0, size - rw + 1)
        aif[y : y + rh, x : x + rw] = _texture(rng, rh, rw)
        depth[y : y + rh, x : x + rw] = rng.uniform(0, 1)
    return Scene(aif, depth, kappa=kappa, layers=layers)


def toy_samples(seed: int, count: int, size: int, frames: int, kappa: float) -> list[Sample]:
    """In-memory toy stacks; scene ``i`` draws from its own child of ``SeedSequence(seed)``."""
    if size % 8:
        raise ValueError("size must be a multiple of 8")
    axis = FocusAxis.linspace(0.0, 1.0, frames)
    children = np.random.SeedSequence(seed).spawn(count)
    return [synth_stack(toy_scene(np.random.default_rng(c), size, kappa), axis) for c in children]


def gen_toy_dataset(out_dir, seed: int, count: int, size: int, f_count: int, kappa: float) -> list[Path]:
    """Write ``count`` toy scenes as ``scene_XXXX/manifest.json`` directories."""
    if f_count < 2:
        raise ValueError("f_count must be at least 2")
    out = Path(out_dir)
    paths = []
    for i, sample in enumerate(toy_samples(seed, count, size, f_count, kappa)):
        paths.append(write_sample(out / f"scene_{i:04d}", sample))
    return paths


def parse_positions(text: str) -> FocusAxis:
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    return FocusAxis([float(p) for p in parts])
