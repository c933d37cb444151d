import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affinemask.masks import MaskTransformConfig
from affinemask.net import DomainNet, add_domain, build_backbone
from affinemask.scoring import count_domain_bits
from affinemask.store import (
    CorruptionError,
    DigestMismatchError,
    StoreError,
    VersionError,
    backbone_bytes,
    delta_bytes,
    delta_layout,
    load_backbone,
    load_domain,
    load_training_state,
    pack_mask,
    parse_backbone,
    read_delta,
    save_backbone,
    save_domain,
    save_training_state,
    unpack_mask,
)
from affinemask.train import predict

CONFIGS = [
    MaskTransformConfig("piggyback"),
    MaskTransformConfig("simple"),
    MaskTransformConfig("full"),
    MaskTransformConfig("full", "sigmoid", "channel"),
    MaskTransformConfig("full-nobias"),
    MaskTransformConfig("custom", custom=("F1", "L0", "F0", "L1")),
    MaskTransformConfig("finetune"),
    MaskTransformConfig("classifier"),
]


def scrambled(bb, cfg, seed=0):
    """A domain whose every stored value differs from its initial value."""
    r = np.random.default_rng(seed)
    dom = add_domain(bb, 5, cfg, seed=seed)
    for name, t in dom.named_parameters():
        t.data = (t.data + r.standard_normal(t.shape)).astype(t.dtype)
    for st_ in dom.bn.values():
        st_.mean = r.standard_normal(st_.mean.shape).astype(np.float32)
        st_.var = r.uniform(0.5, 2, st_.var.shape).astype(np.float32)
    return dom


def test_pack_examples():
    assert pack_mask([1, 0, 1, 1, 0, 0, 0, 1]) == b"\x8d"
    assert pack_mask(np.zeros(8)) == b"\x00"
    assert pack_mask([1, 1, 1]) == b"\x07"
    assert len(pack_mask(np.ones(17))) == 3


def test_unpack_examples():
    np.testing.assert_array_equal(unpack_mask(b"\x8d", 8), [1, 0, 1, 1, 0, 0, 0, 1])
    with pytest.raises(CorruptionError):
        unpack_mask(b"\xff", 3)
    with pytest.raises(StoreError):
        unpack_mask(b"\x00\x00", 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**32 - 1))
def test_pack_round_trip(numel, seed):
    bits = np.random.default_rng(seed).random(numel) < 0.5
    data = pack_mask(bits)
    assert len(data) == (numel + 7) // 8
    np.testing.assert_array_equal(unpack_mask(data, numel), bits)


def test_bit_layout_lsb_first():
    bits = np.zeros(16, dtype=bool)
    bits[9] = True
    assert pack_mask(bits) == bytes([0, 1 << 1])


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: c.summary())
def test_domain_round_trip(frozen_bb, tmp_path, cfg):
    dom = scrambled(frozen_bb, cfg)
    path = tmp_path / "d.mdmk"
    size = save_domain(dom, path)
    assert size == path.stat().st_size
    back = load_domain(path, frozen_bb)
    assert back.domain_id == dom.domain_id and back.cfg == cfg
    x = np.random.default_rng(1).random((9, 1, 16, 16)).astype(np.float32)
    a = predict(DomainNet(frozen_bb, dom), x)
    b = predict(DomainNet(frozen_bb, back), x)
    assert a.tobytes() == b.tobytes()
    for i in dom.masks:
        np.testing.assert_array_equal(back.masks[i].data >= 0, dom.masks[i].data >= 0)
    # the stored file is canonical: saving the reloaded domain gives the same bytes
    assert delta_bytes(back) == path.read_bytes()


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: c.summary())
def test_payload_bits_equal_count(frozen_bb, cfg):
    dom = scrambled(frozen_bb, cfg)
    data = delta_bytes(dom)
    lay = delta_layout(data)
    assert lay.total == len(data)
    assert lay.payload_bits == count_domain_bits(dom)
    head = dom.head_w.numel() + dom.head_b.numel()
    assert lay.classifier == 4 * head


def test_size_audit_with_padding():
    # 5x1x1x1 weights: 5 mask bits, 3 padding bits
    text = "[arch]\ninput = 1x4x4\nclasses = 2\nlayers =\n    conv 5 1\n    bn\n"
    from affinemask.net import parse_arch
    bb = build_backbone(parse_arch(text))
    bb.freeze()
    dom = add_domain(bb, 2, MaskTransformConfig("full"), seed=0)
    lay = delta_layout(delta_bytes(dom))
    assert lay.padding_bits == 3
    assert lay.payload_bits == count_domain_bits(dom) == 5 + 32 * 3 + 32 * 4 * 5


def test_wrong_backbone(frozen_bb, smallnet, tmp_path):
    dom = add_domain(frozen_bb, 5, MaskTransformConfig(), seed=0)
    path = tmp_path / "d.mdmk"
    save_domain(dom, path)
    other = build_backbone(smallnet, 123)
    other.freeze()
    with pytest.raises(DigestMismatchError):
        load_domain(path, other)


def test_version_and_magic(frozen_bb):
    data = bytearray(delta_bytes(add_domain(frozen_bb, 5, MaskTransformConfig(), seed=0)))
    bad = bytearray(data)
    bad[4:6] = struct.pack("<H", 9)
    with pytest.raises(VersionError):
        read_delta(bytes(bad))
    bad = bytearray(data)
    bad[:4] = b"MDBB"
    with pytest.raises(StoreError, match="magic"):
        read_delta(bytes(bad))
    with pytest.raises(StoreError):
        read_delta(bytes(data[:10]))


def test_structurally_bad_but_crc_valid(frozen_bb):
    data = delta_bytes(add_domain(frozen_bb, 5, MaskTransformConfig(), seed=0))
    body = data[:-4] + b"\x00"
    with pytest.raises(StoreError, match="trailing"):
        read_delta(body + struct.pack("<I", zlib.crc32(body)))


def test_crc_detects_every_single_byte_flip(frozen_bb):
    data = delta_bytes(scrambled(frozen_bb, MaskTransformConfig("full")))
    r = np.random.default_rng(0)
    for pos in range(len(data)):
        bad = bytearray(data)
        bad[pos] ^= int(r.integers(1, 256))
        with pytest.raises(StoreError):
            read_delta(bytes(bad))


def test_backbone_round_trip(frozen_bb, tmp_path):
    path = tmp_path / "bb.mdbb"
    save_backbone(frozen_bb, path)
    back = load_backbone(path)
    assert back.digest() == frozen_bb.digest()
    assert back.arch == frozen_bb.arch and back.frozen
    data = bytearray(backbone_bytes(frozen_bb))
    data[100] ^= 0x10
    with pytest.raises(CorruptionError):
        parse_backbone(bytes(data))


def test_backbone_float64_refused(frozen_bb):
    with pytest.raises(StoreError):
        backbone_bytes(frozen_bb.astype(np.float64))


def test_training_state_round_trip(frozen_bb, tmp_path):
    dom = scrambled(frozen_bb, MaskTransformConfig("full", granularity="channel"))
    path = tmp_path / "state.npz"
    save_training_state(dom, path)
    fresh = add_domain(frozen_bb, 5, MaskTransformConfig("full", granularity="channel"), seed=0)
    load_training_state(fresh, path)
    a, b = dom.state(), fresh.state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    wrong = add_domain(frozen_bb, 5, MaskTransformConfig("piggyback"), seed=0)
    with pytest.raises(StoreError):
        load_training_state(wrong, path)
