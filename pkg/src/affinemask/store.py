"""Bit-exact persistence: MDBB backbone checkpoints and MDMK per-domain delta files.

Both formats are little-endian, write float32 bit patterns verbatim and end
with a CRC32 of every preceding byte. The byte layout is documented in
``docs/formats.md``.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import MaskTransformConfig
from .net import Backbone, DomainParams, add_domain, parse_arch

DELTA_MAGIC = b"MDMK"
BACKBONE_MAGIC = b"MDBB"
VERSION = 1

_PREAMBLE = struct.Struct("<4sHHQ")  # magic, version, flags, arch digest
_DELTA_DIMS = struct.Struct("<HI")  # num_classes, feature_dim
_ENTRY = struct.Struct("<HBIBI")  # layer index, kind, count, learned k count, k size
_CRC = struct.Struct("<I")

KIND_MASK = 0
KIND_WEIGHT = 1
KIND_BN = 2
_F32 = np.dtype("<f4")


class StoreError(ValueError):
    """Unreadable checkpoint or delta file."""


class CorruptionError(StoreError):
    pass


class VersionError(StoreError):
    pass


class DigestMismatchError(StoreError):
    pass


# bit packing


def pack_mask(bits) -> bytes:
    """Element j goes to bit ``j % 8`` of byte ``j // 8``; the last byte is zero-padded."""
    flat = np.asarray(bits).reshape(-1).astype(bool)
    return np.packbits(flat, bitorder="little").tobytes()


def unpack_mask(data: bytes, numel: int) -> np.ndarray:
    """Inverse of :func:`pack_mask`; returns a flat bool array of ``numel`` entries."""
    nbytes = (numel + 7) // 8
    if len(data) != nbytes:
        raise StoreError(f"{len(data)} bytes for {numel} mask entries; expected {nbytes}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[numel:].any():
        raise CorruptionError("nonzero padding bits in packed mask")
    return bits[:numel].astype(bool)


# small readers/writers


def _f32_bytes(arr) -> bytes:
    a = np.asarray(arr)
    if a.dtype != np.float32:
        raise StoreError(f"only float32 arrays are stored, got {a.dtype}")
    return a.astype(_F32, copy=False).tobytes()


def _str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise StoreError("string field too long")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise StoreError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def string(self) -> str:
        (n,) = self.unpack(struct.Struct("<H"))
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise StoreError("string field is not UTF-8") from None

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float32)


def _open(buf: bytes, magic: bytes) -> _Reader:
    if len(buf) < _PREAMBLE.size + _CRC.size:
        raise StoreError("file too short")
    if buf[:4] != magic:
        raise StoreError(f"bad magic {buf[:4]!r}; expected {magic!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    (stored,) = _CRC.unpack_from(buf, len(buf) - _CRC.size)
    if zlib.crc32(buf[:-_CRC.size]) != stored:
        raise CorruptionError("CRC32 mismatch")
    return _Reader(buf, len(buf) - _CRC.size)


def _seal(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body))


# backbone checkpoints


def backbone_bytes(bb: Backbone) -> bytes:
    arch = bb.arch.to_text().encode("utf-8")
    out = [_PREAMBLE.pack(BACKBONE_MAGIC, VERSION, 0, bb.digest()), struct.pack("<I", len(arch)), arch,
           struct.pack("<H", len(bb.params))]
    for name, arr in bb.params.items():
        out.append(_str(name))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(_f32_bytes(arr))
    return _seal(b"".join(out))


def save_backbone(bb: Backbone, path) -> None:
    Path(path).write_bytes(backbone_bytes(bb))


def parse_backbone(buf: bytes) -> Backbone:
    rd = _open(buf, BACKBONE_MAGIC)
    _, _, _, digest = rd.unpack(_PREAMBLE)
    (alen,) = rd.unpack(struct.Struct("<I"))
    try:
        arch = parse_arch(rd.take(alen).decode("utf-8"))
    except UnicodeDecodeError:
        raise StoreError("architecture text is not UTF-8") from None
    (n,) = rd.unpack(struct.Struct("<H"))
    params = {}
    for _ in range(n):
        name = rd.string()
        (ndim,) = rd.unpack(struct.Struct("<B"))
        shape = rd.unpack(struct.Struct(f"<{ndim}I"))
        params[name] = rd.f32(int(np.prod(shape))).reshape(shape)
    if rd.pos != rd.end:
        raise StoreError("trailing bytes before footer")
    bb = Backbone(arch, params, frozen=True)
    if bb.digest() != digest:
        raise CorruptionError("stored digest does not match backbone contents")
    return bb


def load_backbone(path) -> Backbone:
    return parse_backbone(Path(path).read_bytes())


# domain deltas


@dataclass
class DeltaEntry:
    layer_index: int
    kind: int
    count: int
    k_size: int = 0
    bits: np.ndarray | None = None  # KIND_MASK: flat bool
    k_values: dict = field(default_factory=dict)  # coefficient index -> float32 array
    arrays: tuple = ()  # KIND_WEIGHT: (w,); KIND_BN: (gamma, beta, mean, var)


@dataclass
class DeltaContents:
    domain_id: str
    cfg: MaskTransformConfig
    digest: int
    num_classes: int
    feature_dim: int
    entries: list
    head_w: np.ndarray
    head_b: np.ndarray


@dataclass(frozen=True)
class DeltaLayout:
    """Byte accounting of one delta file."""

    header: int
    payload: int
    padding_bits: int
    classifier: int
    footer: int

    @property
    def total(self) -> int:
        return self.header + self.payload + self.classifier + self.footer

    @property
    def payload_bits(self) -> int:
        """Bits carrying domain parameters: payload without packing padding."""
        return 8 * self.payload - self.padding_bits


def _learned_k(domain: DomainParams, i: int) -> list:
    return [(j, t.data) for j, t in domain.scalars[i].learned()]


def delta_bytes(domain: DomainParams) -> bytes:
    entries, payload = [], []
    for i in sorted(domain.masks):
        r = domain.masks[i].data
        ks = _learned_k(domain, i)
        k_size = ks[0][1].size if ks else 0
        entries.append(_ENTRY.pack(i, KIND_MASK, r.size, len(ks), k_size))
        payload.append(pack_mask(r >= 0))
        payload.extend(_f32_bytes(v) for _, v in ks)
    for i in sorted(domain.weights):
        w = domain.weights[i].data
        entries.append(_ENTRY.pack(i, KIND_WEIGHT, w.size, 0, 0))
        payload.append(_f32_bytes(w))
    for i in sorted(domain.bn):
        st = domain.bn[i]
        entries.append(_ENTRY.pack(i, KIND_BN, st.gamma.numel(), 0, 0))
        payload.extend(_f32_bytes(a) for a in (st.gamma.data, st.beta.data, st.mean, st.var))
    head = [_f32_bytes(domain.head_w.data), _f32_bytes(domain.head_b.data)]
    header = [
        _PREAMBLE.pack(DELTA_MAGIC, VERSION, 0, domain.arch_digest),
        _str(domain.domain_id),
        _str(domain.cfg.summary()),
        _DELTA_DIMS.pack(domain.num_classes, domain.head_w.shape[1]),
        struct.pack("<H", len(entries)),
        *entries,
    ]
    return _seal(b"".join(header + payload + head))


def _learned_indices(cfg: MaskTransformConfig, n_k: int, layer: int) -> list:
    # k1..k3 flags do not depend on BN; k0 is learned exactly when one more value is stored
    rest = [j for j, spec in enumerate(cfg.kspecs(False)) if j > 0 and spec.learned]
    if n_k == len(rest):
        return rest
    if n_k == len(rest) + 1:
        return [0] + rest
    raise StoreError(f"layer {layer}: {n_k} stored coefficients do not match the configuration")


def _parse_delta(buf: bytes):
    rd = _open(buf, DELTA_MAGIC)
    _, _, _, digest = rd.unpack(_PREAMBLE)
    domain_id = rd.string()
    try:
        cfg = MaskTransformConfig.from_summary(rd.string())
    except (KeyError, ValueError) as exc:
        raise StoreError(f"bad configuration summary: {exc}") from None
    num_classes, feature_dim = rd.unpack(_DELTA_DIMS)
    (n,) = rd.unpack(struct.Struct("<H"))
    table = [rd.unpack(_ENTRY) for _ in range(n)]
    header_end = rd.pos
    entries, padding = [], 0
    for idx, kind, count, n_k, k_size in table:
        e = DeltaEntry(idx, kind, count, k_size)
        if kind == KIND_MASK:
            e.bits = unpack_mask(rd.take((count + 7) // 8), count)
            padding += (-count) % 8
            for j in _learned_indices(cfg, n_k, idx):
                e.k_values[j] = rd.f32(k_size)
        elif kind == KIND_WEIGHT:
            e.arrays = (rd.f32(count),)
        elif kind == KIND_BN:
            e.arrays = tuple(rd.f32(count) for _ in range(4))
        else:
            raise StoreError(f"unknown section kind {kind}")
        entries.append(e)
    payload_end = rd.pos
    head_w = rd.f32(num_classes * feature_dim).reshape(num_classes, feature_dim)
    head_b = rd.f32(num_classes)
    if rd.pos != rd.end:
        raise StoreError("trailing bytes before footer")
    contents = DeltaContents(domain_id, cfg, digest, num_classes, feature_dim, entries, head_w, head_b)
    layout = DeltaLayout(header_end, payload_end - header_end, padding, rd.pos - payload_end, _CRC.size)
    return contents, layout


def read_delta(buf: bytes) -> DeltaContents:
    return _parse_delta(buf)[0]


def delta_layout(buf: bytes) -> DeltaLayout:
    return _parse_delta(buf)[1]


def save_domain(domain: DomainParams, path) -> int:
    """Write the deployable part of ``domain``; returns the file size in bytes."""
    data = delta_bytes(domain)
    Path(path).write_bytes(data)
    return len(data)


def domain_from_contents(c: DeltaContents, bb: Backbone) -> DomainParams:
    if c.digest != bb.digest():
        raise DigestMismatchError(f"delta built for backbone {c.digest:016x}, got {bb.digest():016x}")
    if c.feature_dim != bb.feature_dim:
        raise StoreError("classifier does not fit the backbone features")
    # a fresh domain provides the structure; stored values overwrite it
    dom = add_domain(bb, c.num_classes, c.cfg, seed=0, domain_id=c.domain_id, require_frozen=False)
    seen = set()
    for e in c.entries:
        seen.add((e.kind, e.layer_index))
        if e.kind == KIND_MASK:
            if e.layer_index not in dom.masks or dom.masks[e.layer_index].numel() != e.count:
                raise StoreError(f"mask section for layer {e.layer_index} does not fit the backbone")
            r = dom.masks[e.layer_index]
            # binary masks only: +/- the init magnitude keeps the sign and nothing else
            r.data = np.where(e.bits.reshape(r.shape), r.dtype.type(1e-4), r.dtype.type(-1e-4))
            ks = dom.scalars[e.layer_index]
            if set(e.k_values) != {j for j, _ in ks.learned()}:
                raise StoreError(f"learned coefficients of layer {e.layer_index} do not match the config")
            for j, v in e.k_values.items():
                if ks.values[j].shape != v.shape:
                    raise StoreError(f"k{j} of layer {e.layer_index} has the wrong size")
                ks.values[j].data = v.copy()
        elif e.kind == KIND_WEIGHT:
            if e.layer_index not in dom.weights or dom.weights[e.layer_index].numel() != e.count:
                raise StoreError(f"weight section for layer {e.layer_index} does not fit the backbone")
            w = dom.weights[e.layer_index]
            w.data = e.arrays[0].reshape(w.shape)
        else:
            if e.layer_index not in dom.bn or dom.bn[e.layer_index].gamma.numel() != e.count:
                raise StoreError(f"BN section for layer {e.layer_index} does not fit the backbone")
            st = dom.bn[e.layer_index]
            st.gamma.data, st.beta.data = e.arrays[0].copy(), e.arrays[1].copy()
            st.mean, st.var = e.arrays[2].copy(), e.arrays[3].copy()
    expected = ({(KIND_MASK, i) for i in dom.masks} | {(KIND_WEIGHT, i) for i in dom.weights}
                | {(KIND_BN, i) for i in dom.bn})
    if seen != expected:
        raise StoreError("delta sections do not match the configuration")
    if c.head_w.shape != dom.head_w.shape:
        raise StoreError("classifier shape mismatch")
    dom.head_w.data = c.head_w.copy()
    dom.head_b.data = c.head_b.copy()
    return dom


def load_domain(path, bb: Backbone) -> DomainParams:
    return domain_from_contents(read_delta(Path(path).read_bytes()), bb)


# training state


def save_training_state(domain: DomainParams, path) -> None:
    """Real-valued masks and every other domain array, for resuming training.

    Not a deployment artifact and not counted in the overhead.
    """
    arrays = {name: np.asarray(v) for name, v in domain.state().items()}
    np.savez(path, **arrays)


def load_training_state(domain: DomainParams, path) -> None:
    with np.load(path) as z:
        state = domain.state()
        if set(z.files) != set(state):
            raise StoreError("training state does not match the domain layout")
        named = dict(domain.named_parameters())
        for name in z.files:
            arr = z[name]
            if arr.shape != state[name].shape:
                raise StoreError(f"{name}: shape {arr.shape} vs {state[name].shape}")
            if name in named:
                named[name].data = arr.astype(named[name].data.dtype)
            else:
                i, stat = name.split(".")
                setattr(domain.bn[int(i)], stat, arr.astype(state[name].dtype))

