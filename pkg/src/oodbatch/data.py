"""Multi-environment, multi-label image datasets.

A dataset ("environment") is a :class:`DatasetManifest` (ordered records with
tri-state labels) paired with an :class:`ImagePack` (raw 8-bit grayscale
planes).  Both have simple on-disk formats:

* manifest: UTF-8 CSV, header ``id,image_ref,<task1>,...,<taskK>``, label
  tokens ``1``, ``0`` or empty (missing), LF line endings;
* image pack: little-endian ``XRPK`` magic, u16 version (=1), u16 height,
  u16 width, u32 count, then ``count*height*width`` raw u8 pixels.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_TASKS = ("Cardiomegaly", "Effusion", "Edema", "Consolidation")

NEGATIVE, POSITIVE, MISSING = 0, 1, -1

PACK_MAGIC = b"XRPK"
PACK_VERSION = 1
_PACK_HEADER = struct.Struct("<4sHHHI")

_TOKEN_TO_LABEL = {"1": POSITIVE, "0": NEGATIVE, "": MISSING}
_LABEL_TO_TOKEN = {v: k for k, v in _TOKEN_TO_LABEL.items()}


class DataFormatError(ValueError):
    """Malformed manifest or image pack."""


@dataclass(frozen=True)
class TaskSet:
    names: tuple[str, ...] = DEFAULT_TASKS

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("task set must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"task names must be unique: {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_ref: int
    labels: tuple[int, ...]  # one of POSITIVE / NEGATIVE / MISSING per task


@dataclass(frozen=True)
class DatasetManifest:
    """One environment: records in canonical (file) order plus metadata."""

    name: str
    records: tuple[ImageRecord, ...]
    tasks: TaskSet = field(default_factory=TaskSet)
    region: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        k = len(self.tasks)
        seen = set()
        for rec in self.records:
            if len(rec.labels) != k:
                raise ValueError(f"record {rec.id!r} has {len(rec.labels)} labels, expected {k}")
            if rec.id in seen:
                raise ValueError(f"duplicate record id {rec.id!r} in manifest {self.name!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def label_matrix(self) -> np.ndarray:
        """``(n, K)`` int8 array with 1/0/-1 for positive/negative/missing."""
        out = np.array([r.labels for r in self.records], dtype=np.int8)
        return out.reshape(len(self.records), len(self.tasks))

    @cached_property
    def image_refs(self) -> np.ndarray:
        return np.array([r.image_ref for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class ImagePack:
    """Fixed-size grayscale images stored as a ``(count, height, width)`` u8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[1] < 1 or px.shape[2] < 1:
            raise ValueError(f"pixels must have shape (count, h, w) with h, w >= 1, got {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def image(self, ref: int) -> np.ndarray:
        return self.pixels[ref]


# ---------------------------------------------------------------------------
# file formats


def parse_label_token(token: str) -> int:
    try:
        return _TOKEN_TO_LABEL[token]
    except KeyError:
        raise DataFormatError(f"label token {token!r} not in {{0,1,''}}") from None


def manifest_to_csv(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "image_ref", *manifest.tasks.names])
    for rec in manifest.records:
        w.writerow([rec.id, rec.image_ref, *(_LABEL_TO_TOKEN[v] for v in rec.labels)])
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_bytes(manifest_to_csv(manifest).encode("utf-8"))


def read_manifest(path, name: str | None = None) -> DatasetManifest:
    """Parse a manifest CSV.  Errors carry the 1-based line number."""
    path = Path(path)
    name = name if name is not None else path.stem
    text = path.read_bytes().decode("utf-8")
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError(f"{path}: empty manifest, line 1") from None
    if len(header) < 3 or header[0] != "id" or header[1] != "image_ref":
        raise DataFormatError(f"{path}: malformed header, line 1: expected 'id,image_ref,<tasks...>'")
    try:
        tasks = TaskSet(tuple(header[2:]))
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed header, line 1: {exc}") from None

    records = []
    ids = set()
    for row in reader:
        line = reader.line_num
        if len(row) != len(header):
            raise DataFormatError(
                f"{path}: row arity mismatch, line {line}: got {len(row)} fields, expected {len(header)}"
            )
        rec_id, ref_tok, *label_toks = row
        try:
            ref = int(ref_tok)
        except ValueError:
            raise DataFormatError(f"{path}: bad image_ref {ref_tok!r}, line {line}") from None
        if ref < 0:
            raise DataFormatError(f"{path}: image_ref out of range, line {line}")
        try:
            labels = tuple(parse_label_token(t) for t in label_toks)
        except DataFormatError as exc:
            raise DataFormatError(f"{path}: {exc}, line {line}") from None
        if rec_id in ids:
            raise DataFormatError(f"{path}: duplicate id {rec_id!r}, line {line}")
        ids.add(rec_id)
        records.append(ImageRecord(rec_id, ref, labels))
    return DatasetManifest(name=name, records=tuple(records), tasks=tasks)


def pack_to_bytes(pack: ImagePack) -> bytes:
    header = _PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, pack.height, pack.width, pack.count)
    return header + pack.pixels.tobytes(order="C")


def write_pack(pack: ImagePack, path) -> None:
    Path(path).write_bytes(pack_to_bytes(pack))


def read_pack(path) -> ImagePack:
    raw = Path(path).read_bytes()
    if len(raw) < _PACK_HEADER.size:
        raise DataFormatError(f"{path}: truncated image pack header")
    magic, version, h, w, count = _PACK_HEADER.unpack_from(raw)
    if magic != PACK_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {PACK_MAGIC!r}")
    if version != PACK_VERSION:
        raise DataFormatError(f"{path}: unsupported pack version {version}")
    if h < 1 or w < 1:
        raise DataFormatError(f"{path}: image dimensions must be >= 1, got {h}x{w}")
    body = raw[_PACK_HEADER.size:]
    if len(body) != count * h * w:
        raise DataFormatError(f"{path}: pixel payload is {len(body)} bytes, expected {count * h * w}")
    return ImagePack(np.frombuffer(body, dtype=np.uint8).reshape(count, h, w))


def load_manifest(manifest_path, pack_path, name: str | None = None) -> tuple[DatasetManifest, ImagePack]:
    """Load a manifest and its image pack, checking every image_ref against the pack."""
    manifest = read_manifest(manifest_path, name=name)
    pack = read_pack(pack_path)
    for i, rec in enumerate(manifest.records):
        if rec.image_ref >= pack.count:
            # header is line 1; records start at line 2 (no embedded newlines in canonical files)
            raise DataFormatError(
                f"{manifest_path}: image_ref out of range, line {i + 2}: "
                f"{rec.image_ref} >= pack count {pack.count}"
            )
    return manifest, pack


def load_environment(directory, name: str) -> tuple[DatasetManifest, ImagePack]:
    """Load ``<directory>/<name>.csv`` + ``<directory>/<name>.xrpk``."""
    directory = Path(directory)
    return load_manifest(directory / f"{name}.csv", directory / f"{name}.xrpk", name=name)


def save_environment(directory, manifest: DatasetManifest, pack: ImagePack) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mpath, ppath = directory / f"{manifest.name}.csv", directory / f"{manifest.name}.xrpk"
    write_manifest(manifest, mpath)
    write_pack(pack, ppath)
    return mpath, ppath


# ---------------------------------------------------------------------------
# subsetting and statistics


def subset_sequential(manifest: DatasetManifest, n: int) -> DatasetManifest:
    """First ``n`` records in original order."""
    if not 0 < n <= len(manifest):
        raise ValueError(f"subset size {n} must be in [1, {len(manifest)}] for manifest {manifest.name!r}")
    if n == len(manifest):
        return manifest
    return DatasetManifest(
        name=manifest.name, records=manifest.records[:n], tasks=manifest.tasks, region=manifest.region
    )


def class_counts(manifest: DatasetManifest) -> list[tuple[int, int, int]]:
    """Per-task ``(n_positive, n_negative, n_missing)``."""
    lab = manifest.label_matrix
    return [
        (int(np.sum(lab[:, t] == POSITIVE)), int(np.sum(lab[:, t] == NEGATIVE)), int(np.sum(lab[:, t] == MISSING)))
        for t in range(len(manifest.tasks))
    ]


# ---------------------------------------------------------------------------
# synthetic distribution-shift generator


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic multi-environment generator.

    Every image has a centre blob and a top-left corner patch, each divided
    into one cell per task.  Centre cell ``t`` has correlation
    ``core_strength`` with task ``t``'s (+/-1 coded) label in every
    environment; corner cell ``t`` has correlation ``spurious_strength[e]``
    in environment ``e``.
    """

    n_envs: int = 4
    n_per_env: int = 1000
    image_size: int = 16
    core_strength: float = 0.6
    spurious_strength: tuple[float, ...] = (0.8, -0.8, 0.8, -0.8)
    noise_std: float = 0.05
    missing_rate: float = 0.0
    seed: int = 0
    prevalence: float = 0.5
    names: tuple[str, ...] | None = None
    tasks: tuple[str, ...] = DEFAULT_TASKS

    def __post_init__(self):
        object.__setattr__(self, "spurious_strength", tuple(float(s) for s in self.spurious_strength))
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
        self.validate()

    def validate(self) -> None:
        if self.n_envs < 2:
            raise ValueError("n_envs must be >= 2")
        if self.n_per_env < 1:
            raise ValueError("n_per_env must be >= 1")
        if len(self.spurious_strength) != self.n_envs:
            raise ValueError("spurious length must equal envs")
        if not 0.0 <= self.core_strength <= 1.0:
            raise ValueError("core_strength must lie in [0, 1]")
        if any(not -1.0 <= s <= 1.0 for s in self.spurious_strength):
            raise ValueError("spurious_strength entries must lie in [-1, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if self.names is not None and (len(self.names) != self.n_envs or len(set(self.names)) != self.n_envs):
            raise ValueError("names must be n_envs distinct strings")
        TaskSet(self.tasks)
        grid = _cell_grid(len(self.tasks))
        if self.image_size // 4 < max(grid):
            raise ValueError(f"image_size {self.image_size} too small for {len(self.tasks)} task cells")

    def env_names(self) -> tuple[str, ...]:
        return self.names if self.names is not None else tuple(f"e{i}" for i in range(self.n_envs))


# cell amplitude as a fraction of full intensity; +/-3 sigma stays inside [0.05, 0.95]
_CELL_AMPLITUDE = 0.15
_BACKGROUND = 0.5


def _cell_grid(k: int) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(k))
    return math.ceil(k / cols), cols


def _cell_slices(top: int, left: int, size: int, k: int) -> list[tuple[slice, slice]]:
    rows, cols = _cell_grid(k)
    rb = np.linspace(top, top + size, rows + 1).round().astype(int)
    cb = np.linspace(left, left + size, cols + 1).round().astype(int)
    return [(slice(rb[t // cols], rb[t // cols + 1]), slice(cb[t % cols], cb[t % cols + 1])) for t in range(k)]


def feature_regions(image_size: int, n_tasks: int) -> dict[str, list[tuple[slice, slice]]]:
    """Pixel slices of the per-task core (centre) and spurious (corner) cells."""
    quarter = image_size // 4
    return {
        "core": _cell_slices(quarter, quarter, image_size - 2 * quarter, n_tasks),
        "spurious": _cell_slices(0, 0, quarter, n_tasks),
    }


def _correlated(signs: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    # corr(strength*s + sqrt(1-strength^2)*z, s) == strength when s is +/-1 with p=0.5
    z = rng.standard_normal(signs.shape)
    return strength * signs + math.sqrt(max(0.0, 1.0 - strength * strength)) * z


def generate_synthetic(cfg: SynthConfig) -> list[tuple[DatasetManifest, ImagePack]]:
    """Generate ``cfg.n_envs`` environments; a pure function of ``cfg``."""
    cfg.validate()
    tasks = TaskSet(cfg.tasks)
    k = len(tasks)
    size = cfg.image_size
    regions = feature_regions(size, k)
    out = []
    for e, name in enumerate(cfg.env_names()):
        rng = np.random.default_rng([cfg.seed, e])
        n = cfg.n_per_env
        y = (rng.random((n, k)) < cfg.prevalence).astype(np.int8)
        signs = 2.0 * y - 1.0
        core = _correlated(signs, cfg.core_strength, rng)
        spur = _correlated(signs, cfg.spurious_strength[e], rng)
        img = np.full((n, size, size), _BACKGROUND)
        for t in range(k):
            rs, cs = regions["core"][t]
            img[:, rs, cs] += _CELL_AMPLITUDE * core[:, t, None, None]
            rs, cs = regions["spurious"][t]
            img[:, rs, cs] += _CELL_AMPLITUDE * spur[:, t, None, None]
        if cfg.noise_std > 0:
            img += cfg.noise_std * rng.standard_normal(img.shape)
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

        labels = y.copy()
        if cfg.missing_rate > 0:
            labels[rng.random((n, k)) < cfg.missing_rate] = MISSING
        records = tuple(
            ImageRecord(f"{name}-{i:06d}", i, tuple(int(v) for v in labels[i])) for i in range(n)
        )
        out.append((DatasetManifest(name=name, records=records, tasks=tasks, region="synthetic"), ImagePack(pixels)))
    return out


def merge_counts(counts: Sequence[Sequence[tuple[int, int, int]]]) -> list[tuple[int, int, int]]:
    """Element-wise sum of several :func:`class_counts` results."""
    return [tuple(int(sum(c[t][j] for c in counts)) for j in range(3)) for t in range(len(counts[0]))]
