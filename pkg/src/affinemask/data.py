"""Procedural desk-scale classification domains and the MDLD raw dataset format.

Every domain produces 1x16x16 images in [0, 1]. Families:

* ``blobs``: per-class prototypes made of Gaussian bumps, plus pixel noise
* ``bars``: a single bar whose orientation encodes the class
* ``digits-lite``: seven-segment glyphs at random position and stroke width
* ``inverted:<family>``: ``1 - p`` of another family
* ``rotated:<family>``: another family rotated by 90 degrees
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIZE = 16
RAW_MAGIC = b"MDLD"
RAW_VERSION = 1
_HEADER = struct.Struct("<4sHHIHH")

# segments a..g: top, top-right, bottom-right, bottom, bottom-left, top-left, middle
_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}

DEFAULT_NOISE = {"blobs": 0.6, "bars": 0.35, "digits-lite": 0.15}


class FormatError(ValueError):
    """Malformed MDLD file."""


@dataclass
class DomainDataset:
    name: str
    num_classes: int
    train_x: np.ndarray  # (N, 1, 16, 16) float32
    train_y: np.ndarray  # (N,) int64
    test_x: np.ndarray
    test_y: np.ndarray
    family: str = "raw"
    seed: int = 0

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train_x.shape[1:])


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k).astype(np.int64)


def _grid():
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return yy, xx


def blob_prototypes(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid()
    protos = np.zeros((num_classes, SIZE, SIZE))
    for c in range(num_classes):
        for _ in range(3):
            cy, cx = rng.uniform(2, SIZE - 3, size=2)
            sigma = rng.uniform(1.5, 3.0)
            amp = rng.uniform(0.5, 1.0)
            protos[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        protos[c] /= protos[c].max()
    return protos


def _blobs(labels, protos, noise, rng):
    imgs = protos[labels] + noise * rng.standard_normal((len(labels), SIZE, SIZE))
    return imgs


def _bars(labels, num_classes, noise, rng):
    yy, xx = _grid()
    n = len(labels)
    theta = np.pi * labels / num_classes
    offset = rng.uniform(-4, 4, size=n)
    width = rng.uniform(0.6, 1.2, size=n)
    # distance from the line through the shifted centre with direction theta
    dist = np.abs(
        (xx[None] - 7.5) * -np.sin(theta)[:, None, None]
        + (yy[None] - 7.5) * np.cos(theta)[:, None, None]
        - offset[:, None, None]
    )
    imgs = np.exp(-(dist**2) / (2 * width[:, None, None] ** 2))
    return imgs + noise * rng.standard_normal(imgs.shape)


def _digit_glyph(digit, top, left, h, w, stroke, level):
    img = np.zeros((SIZE, SIZE))
    mid = top + h // 2
    bottom, right = top + h - 1, left + w - 1
    boxes = {
        "a": (top, top + stroke, left, right + 1),
        "d": (bottom - stroke + 1, bottom + 1, left, right + 1),
        "g": (mid - stroke // 2, mid - stroke // 2 + stroke, left, right + 1),
        "f": (top, mid + 1, left, left + stroke),
        "e": (mid, bottom + 1, left, left + stroke),
        "b": (top, mid + 1, right - stroke + 1, right + 1),
        "c": (mid, bottom + 1, right - stroke + 1, right + 1),
    }
    for seg in _SEGMENTS[digit]:
        y0, y1, x0, x1 = boxes[seg]
        img[y0:y1, x0:x1] = level
    return img


def _digits(labels, noise, rng):
    n = len(labels)
    imgs = np.empty((n, SIZE, SIZE))
    for idx, digit in enumerate(labels):
        h = int(rng.integers(9, 12))
        w = int(rng.integers(5, 8))
        top = int(rng.integers(0, SIZE - h + 1))
        left = int(rng.integers(0, SIZE - w + 1))
        stroke = int(rng.integers(1, 3))
        imgs[idx] = _digit_glyph(int(digit), top, left, h, w, stroke, rng.uniform(0.7, 1.0))
    return imgs + noise * rng.standard_normal(imgs.shape)


def _base_split(family, labels, num_classes, noise, rng, protos):
    if family == "blobs":
        return _blobs(labels, protos, noise, rng)
    if family == "bars":
        return _bars(labels, num_classes, noise, rng)
    return _digits(labels, noise, rng)


def _split_family(family: str):
    if ":" in family:
        transform, base = family.split(":", 1)
    elif family in ("inverted", "rotated"):
        transform, base = family, ("digits-lite" if family == "inverted" else "bars")
    else:
        transform, base = None, family
    if transform not in (None, "inverted", "rotated") or base not in DEFAULT_NOISE:
        raise ValueError(f"unknown family {family!r}")
    return transform, base


def generate(
    family: str,
    num_classes: int,
    n_train: int,
    n_test: int,
    seed: int = 0,
    noise: float | None = None,
    name: str | None = None,
) -> DomainDataset:
    """Deterministic dataset; train and test come from disjoint seed streams."""
    transform, base = _split_family(family)
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if base == "digits-lite" and num_classes > 10:
        raise ValueError("digits-lite supports at most 10 classes")
    if n_train < 0 or n_test < 0:
        raise ValueError("split sizes must be non-negative")
    noise = DEFAULT_NOISE[base] if noise is None else float(noise)
    proto_seq, train_seq, test_seq = np.random.SeedSequence(seed).spawn(3)
    protos = blob_prototypes(num_classes, np.random.default_rng(proto_seq)) if base == "blobs" else None
    splits = []
    for n, seq in ((n_train, train_seq), (n_test, test_seq)):
        rng = np.random.default_rng(seq)
        labels = _balanced_labels(n, num_classes, rng)
        imgs = np.clip(_base_split(base, labels, num_classes, noise, rng, protos), 0.0, 1.0).astype(np.float32)
        if transform == "inverted":
            imgs = np.float32(1.0) - imgs
        elif transform == "rotated":
            imgs = np.rot90(imgs, k=1, axes=(1, 2))
        splits.append((np.ascontiguousarray(imgs[:, None], dtype=np.float32), labels))
    (trx, try_), (tex, tey) = splits
    return DomainDataset(name or family, num_classes, trx, try_, tex, tey, family, seed)


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    family: str
    num_classes: int
    seed: int


SUITES = {
    "mds-3": (
        SuiteEntry("blobs", "blobs", 10, 101),
        SuiteEntry("bars", "bars", 12, 102),
        SuiteEntry("digits", "digits-lite", 10, 103),
    ),
}
SUITES["mds-5"] = SUITES["mds-3"] + (
    SuiteEntry("digits-inv", "inverted:digits-lite", 10, 104),
    SuiteEntry("bars-rot", "rotated:bars", 12, 105),
)
# stand-in for the large, diverse pretraining domain: classes of all parts side by side
SOURCE = (SuiteEntry("source-blobs", "blobs", 10, 0), SuiteEntry("source-bars", "bars", 10, 1))


def concat_domains(parts: list, name: str) -> DomainDataset:
    """One dataset whose label space is the disjoint union of the parts' label spaces."""
    offsets = np.cumsum([0] + [p.num_classes for p in parts])
    return DomainDataset(
        name,
        int(offsets[-1]),
        np.concatenate([p.train_x for p in parts]),
        np.concatenate([p.train_y + o for p, o in zip(parts, offsets)]),
        np.concatenate([p.test_x for p in parts]),
        np.concatenate([p.test_y + o for p, o in zip(parts, offsets)]),
        family="+".join(p.family for p in parts),
    )


def generate_source(n_train: int = 1280, n_test: int = 320) -> DomainDataset:
    return concat_domains([generate(e.family, e.num_classes, n_train // len(SOURCE), n_test // len(SOURCE),
                                    e.seed, name=e.name) for e in SOURCE], "source")


def generate_suite(suite: str, n_train: int = 1280, n_test: int = 640) -> list:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    return [generate(e.family, e.num_classes, n_train, n_test, e.seed, name=e.name) for e in SUITES[suite]]


def horizontal_flip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip each image left-right with probability 1/2."""
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


# raw format


def _encode_block(x: np.ndarray, y: np.ndarray, num_classes: int) -> bytes:
    n, _, h, w = x.shape
    rec = np.empty(n, dtype=np.dtype([("label", "<u2"), ("pix", "<f4", (h * w,))]))
    rec["label"] = y
    rec["pix"] = x.reshape(n, h * w)
    return _HEADER.pack(RAW_MAGIC, RAW_VERSION, num_classes, n, h, w) + rec.tobytes()


def _decode_block(buf: bytes, pos: int):
    if len(buf) - pos < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, k, n, h, w = _HEADER.unpack_from(buf, pos)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != RAW_VERSION:
        raise FormatError(f"unsupported version {version}")
    dt = np.dtype([("label", "<u2"), ("pix", "<f4", (h * w,))])
    start = pos + _HEADER.size
    end = start + n * dt.itemsize
    if end > len(buf):
        raise FormatError(f"truncated payload: need {end - start} bytes, have {len(buf) - start}")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=start)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= k:
        raise FormatError(f"label {labels.max()} out of range for {k} classes")
    x = rec["pix"].astype(np.float32).reshape(n, 1, h, w)
    if not np.isfinite(x).all():
        raise FormatError("non-finite pixel values")
    return x, labels, k, end


def save_raw(ds: DomainDataset, path) -> None:
    """Write the train block followed by the test block."""
    data = _encode_block(ds.train_x, ds.train_y, ds.num_classes)
    data += _encode_block(ds.test_x, ds.test_y, ds.num_classes)
    Path(path).write_bytes(data)


def load_raw(path) -> DomainDataset:
    """Read a file of one (train only) or two (train, test) MDLD blocks."""
    path = Path(path)
    buf = path.read_bytes()
    blocks = []
    pos = 0
    while pos < len(buf):
        if len(blocks) == 2:
            raise FormatError("trailing bytes after the test block")
        x, y, k, pos = _decode_block(buf, pos)
        blocks.append((x, y, k))
    if not blocks:
        raise FormatError("empty file")
    if len(blocks) == 2 and (blocks[0][2] != blocks[1][2] or blocks[0][0].shape[1:] != blocks[1][0].shape[1:]):
        raise FormatError("train and test blocks disagree on classes or image shape")
    trx, try_, k = blocks[0]
    if len(blocks) == 2:
        tex, tey = blocks[1][0], blocks[1][1]
    else:
        tex, tey = trx[:0], try_[:0]
    return DomainDataset(path.stem, k, trx, try_, tex, tey)
