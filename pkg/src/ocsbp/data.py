"""Procedural sprite scenes with exact instance labels and the OCRS corpus format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .nn import RngState

MAGIC = b"OCRS"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHB")
SHAPES = ("circle", "square", "triangle")
PLACEMENT_ATTEMPTS = 1000

DEFAULT_PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
)
DEFAULT_BACKGROUNDS = ((0, 0, 0), (40, 40, 40), (90, 90, 90))


class CorpusFormatError(ValueError):
    pass


class BadMagicError(CorpusFormatError):
    pass


class VersionMismatchError(CorpusFormatError):
    pass


class TruncatedCorpusError(CorpusFormatError):
    pass


class PlacementError(RuntimeError):
    """An object could not be placed within the rejection budget."""


@dataclass
class SpriteSceneSpec:
    image_size: tuple = (32, 32)
    n_objects: tuple = (1, 3)
    shapes: tuple = SHAPES
    palette: tuple = DEFAULT_PALETTE
    background: tuple | None = None  # None: pick per scene from background_palette
    background_palette: tuple = DEFAULT_BACKGROUNDS
    min_object_radius: int = 3
    max_object_radius: int = 6
    allow_occlusion: bool = False

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.n_objects = tuple(int(v) for v in self.n_objects)
        self.shapes = tuple(self.shapes)
        self.palette = tuple(tuple(int(c) for c in rgb) for rgb in self.palette)
        self.background_palette = tuple(tuple(int(c) for c in rgb) for rgb in self.background_palette)
        if self.background is not None:
            self.background = tuple(int(c) for c in self.background)
        self.validate()

    def backgrounds(self) -> tuple:
        return (self.background,) if self.background is not None else self.background_palette

    def validate(self) -> None:
        h, w = self.image_size
        lo, hi = self.n_objects
        if not 0 <= lo <= hi:
            raise ValueError(f"n_objects range {self.n_objects} is invalid")
        if hi > 255:
            raise ValueError("at most 255 objects fit in a byte label map")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(bad)}; choose from {SHAPES}")
        if len(set(self.palette)) != len(self.palette):
            raise ValueError("palette colours must be pairwise distinct")
        if len(self.palette) < hi:
            raise ValueError(f"palette has {len(self.palette)} colours but scenes need up to {hi} distinct ones")
        if not self.backgrounds():
            raise ValueError("no background colour available")
        if set(self.backgrounds()) & set(self.palette):
            raise ValueError("background colours must differ from every palette colour")
        for rgb in self.palette + self.backgrounds():
            if len(rgb) != 3 or not all(0 <= c <= 255 for c in rgb):
                raise ValueError(f"colour {rgb} is not an RGB byte triple")
        if not 1 <= self.min_object_radius <= self.max_object_radius:
            raise ValueError("need 1 <= min_object_radius <= max_object_radius")
        if 2 * self.max_object_radius + 1 > min(h, w):
            raise ValueError(f"radius {self.max_object_radius} does not fit a {h}x{w} image")

    @classmethod
    def from_dict(cls, d: dict) -> "SpriteSceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sprite spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CorpusRecord:
    image: np.ndarray  # (H, W, C) uint8
    labels: np.ndarray  # (H, W) uint8

    @property
    def n_objects(self) -> int:
        return int(np.count_nonzero(np.unique(self.labels)))


@dataclass
class Corpus:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N, H, W) uint8
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> CorpusRecord:
        return CorpusRecord(self.images[i], self.labels[i])

    def __iter__(self) -> Iterator[CorpusRecord]:
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "Corpus":
        idx = np.asarray(indices, dtype=np.int64)
        return Corpus(self.images[idx], self.labels[idx], dict(self.meta))

    def float_images(self, dtype=np.float32) -> np.ndarray:
        return self.images.astype(dtype) / 255.0

    @classmethod
    def from_records(cls, records: Iterable[CorpusRecord]) -> "Corpus":
        records = list(records)
        if not records:
            raise ValueError("cannot build a corpus from zero records")
        return cls(np.stack([r.image for r in records]), np.stack([r.labels for r in records]))


def shape_footprint(shape: str, cy: int, cx: int, r: int, h: int, w: int) -> np.ndarray:
    """Boolean (H, W) mask; pixel centres at integer coordinates, no anti-aliasing."""
    dy = np.arange(h)[:, None] - cy
    dx = np.arange(w)[None, :] - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        # apex at the top row, base on the bottom row, symmetric about cx
        return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    raise ValueError(f"unknown shape {shape!r}")


def generate_record(spec: SpriteSceneSpec, rng: RngState) -> CorpusRecord:
    h, w = spec.image_size
    gen = rng.generator
    n = int(gen.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    backgrounds = spec.backgrounds()
    bg = backgrounds[int(gen.integers(len(backgrounds)))]
    colours = gen.choice(len(spec.palette), size=n, replace=False)
    image = np.empty((h, w, 3), dtype=np.uint8)
    image[...] = bg
    labels = np.zeros((h, w), dtype=np.uint8)
    for k in range(n):
        for _ in range(PLACEMENT_ATTEMPTS):
            shape = spec.shapes[int(gen.integers(len(spec.shapes)))]
            r = int(gen.integers(spec.min_object_radius, spec.max_object_radius + 1))
            cy = int(gen.integers(r, h - r))
            cx = int(gen.integers(r, w - r))
            mask = shape_footprint(shape, cy, cx, r, h, w)
            if spec.allow_occlusion or not (labels[mask] != 0).any():
                break
        else:
            raise PlacementError(f"could not place object {k + 1} of {n} after {PLACEMENT_ATTEMPTS} attempts")
        image[mask] = spec.palette[int(colours[k])]
        labels[mask] = k + 1
    return CorpusRecord(image, labels)


def generate_corpus(spec: SpriteSceneSpec, n: int, seed: int) -> Corpus:
    """n scenes; record i depends only on (seed, i)."""
    if n < 1:
        raise ValueError(f"generate_corpus: n must be >= 1, got {n}")
    records = [generate_record(spec, RngState.derived(seed, i)) for i in range(n)]
    return Corpus.from_records(records)


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Seeded shuffle of range(n) cut into train / val / test index arrays."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = RngState(seed).generator.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


# binary format -----------------------------------------------------------


def encode_corpus(corpus: Corpus) -> bytes:
    n, h, w, c = corpus.images.shape
    if corpus.labels.shape != (n, h, w):
        raise ValueError(f"labels shape {corpus.labels.shape} does not match images {corpus.images.shape}")
    parts = [_HEADER.pack(MAGIC, VERSION, n, h, w, c)]
    images = np.ascontiguousarray(corpus.images, dtype=np.uint8).reshape(n, -1)
    labels = np.ascontiguousarray(corpus.labels, dtype=np.uint8).reshape(n, -1)
    parts.append(np.concatenate([images, labels], axis=1).tobytes())
    return b"".join(parts)


def write_corpus(records, path) -> None:
    corpus = records if isinstance(records, Corpus) else Corpus.from_records(records)
    Path(path).write_bytes(encode_corpus(corpus))


def _read_header(raw: bytes, path) -> tuple[int, int, int, int]:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedCorpusError(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    _, version, n, h, w, c = _HEADER.unpack(raw[:_HEADER.size])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, this reader supports {VERSION}")
    return n, h, w, c


def iter_corpus(path) -> Iterator[CorpusRecord]:
    """Stream records one at a time."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        n, h, w, c = _read_header(head, path)
        size = h * w * c + h * w
        expected = _HEADER.size + n * size
        for i in range(n):
            chunk = fh.read(size)
            if len(chunk) != size:
                actual = _HEADER.size + i * size + len(chunk)
                raise TruncatedCorpusError(f"{path}: expected {expected} bytes for {n} records, found {actual}")
            buf = np.frombuffer(chunk, dtype=np.uint8)
            yield CorpusRecord(buf[:h * w * c].reshape(h, w, c).copy(), buf[h * w * c:].reshape(h, w).copy())


def decode_corpus(raw: bytes, path="<bytes>") -> Corpus:
    n, h, w, c = _read_header(raw, path)
    size = h * w * c + h * w
    expected = _HEADER.size + n * size
    if len(raw) < expected:
        raise TruncatedCorpusError(f"{path}: expected {expected} bytes for {n} records, found {len(raw)}")
    if len(raw) > expected:
        raise CorpusFormatError(f"{path}: {len(raw) - expected} trailing bytes after {n} records")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, size)
    images = body[:, :h * w * c].reshape(n, h, w, c).copy()
    labels = body[:, h * w * c:].reshape(n, h, w).copy()
    return Corpus(images, labels)


def read_corpus(path) -> Corpus:
    return decode_corpus(Path(path).read_bytes(), path)
