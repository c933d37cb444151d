"""Binary masks, surrogate gradients and the affine weight transform.

A domain rewrites each frozen weight tensor ``W`` as

    k0 * W + k1 * 1 + k2 * M + k3 * (W * M)

where ``M = [R >= 0]`` is the binarized view of a real-valued mask ``R``.
The forward pass always uses the hard threshold; the backward pass replaces
its derivative with that of a strictly increasing surrogate.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor import DTYPE, DimensionError, Tensor, custom_grad, mul

MASK_INIT_LOW = 1e-4
MASK_INIT_HIGH = 2e-4


class Surrogate(str, enum.Enum):
    IDENTITY = "identity"
    SIGMOID = "sigmoid"


class Granularity(str, enum.Enum):
    LAYER = "layer"
    CHANNEL = "channel"


class Variant(str, enum.Enum):
    FULL = "full"
    SIMPLE = "simple"
    PIGGYBACK = "piggyback"
    FULL_NO_BIAS = "full-nobias"
    FULL_NO_K2 = "full-nok2"
    SIMPLE_NO_BIAS = "simple-nobias"
    # baselines: no masks at all
    CLASSIFIER = "classifier"
    FINETUNE = "finetune"
    CUSTOM = "custom"


@dataclass(frozen=True)
class KSpec:
    """One affine coefficient: fixed at ``value`` or learned starting from it."""

    learned: bool
    value: float

    def __str__(self) -> str:
        return f"{'L' if self.learned else 'F'}{self.value:g}"

    @classmethod
    def parse(cls, text: str) -> "KSpec":
        text = text.strip()
        if not text or text[0] not in "LF":
            raise ValueError(f"bad coefficient spec {text!r}; expected e.g. F1 or L0")
        return cls(text[0] == "L", float(text[1:]))


def fixed(value: float) -> KSpec:
    return KSpec(False, float(value))


def learned(init: float) -> KSpec:
    return KSpec(True, float(init))


_VARIANT_KS = {
    # (k1, k2, k3); k0 is decided by whether a BN layer follows
    Variant.FULL: (learned(0), learned(0), learned(0)),
    Variant.SIMPLE: (learned(0), learned(0), fixed(0)),
    Variant.FULL_NO_BIAS: (fixed(0), learned(0), learned(0)),
    Variant.FULL_NO_K2: (learned(0), fixed(0), learned(0)),
    Variant.SIMPLE_NO_BIAS: (fixed(0), learned(0), fixed(0)),
}


@dataclass(frozen=True)
class MaskTransformConfig:
    variant: Variant = Variant.FULL
    surrogate: Surrogate = Surrogate.IDENTITY
    granularity: Granularity = Granularity.LAYER
    # only for Variant.CUSTOM: k0..k3
    custom: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "surrogate", Surrogate(self.surrogate))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.variant is Variant.CUSTOM:
            if self.custom is None or len(self.custom) != 4:
                raise ValueError("custom variant needs four coefficient specs")
            object.__setattr__(self, "custom", tuple(
                k if isinstance(k, KSpec) else KSpec.parse(k) for k in self.custom
            ))
        elif self.custom is not None:
            raise ValueError("coefficient specs are only accepted for the custom variant")

    @property
    def uses_masks(self) -> bool:
        return self.variant not in (Variant.CLASSIFIER, Variant.FINETUNE)

    @property
    def domain_bn(self) -> bool:
        return self.variant is not Variant.CLASSIFIER

    @property
    def private_weights(self) -> bool:
        return self.variant is Variant.FINETUNE

    def kspecs(self, followed_by_bn: bool) -> tuple:
        """Coefficient specs (k0, k1, k2, k3) for one masked layer."""
        if not self.uses_masks:
            raise ValueError(f"variant {self.variant.value} has no masks")
        if self.variant is Variant.PIGGYBACK:
            return fixed(0), fixed(0), fixed(0), fixed(1)
        if self.variant is Variant.CUSTOM:
            ks = self.custom
            if followed_by_bn and ks[0].learned:
                raise ValueError("k0 must be fixed on a layer followed by batch normalization")
            return ks
        k0 = fixed(1) if followed_by_bn else learned(1)
        return (k0, *_VARIANT_KS[self.variant])

    def summary(self) -> str:
        parts = [f"variant={self.variant.value}", f"surrogate={self.surrogate.value}",
                 f"granularity={self.granularity.value}"]
        if self.custom is not None:
            parts.append("k=" + ",".join(str(k) for k in self.custom))
        return ";".join(parts)

    @classmethod
    def from_summary(cls, text: str) -> "MaskTransformConfig":
        fields = dict(item.split("=", 1) for item in text.split(";") if item)
        custom = tuple(fields["k"].split(",")) if "k" in fields else None
        return cls(fields["variant"], fields.get("surrogate", "identity"),
                   fields.get("granularity", "layer"), custom)


Coef = Union[float, Tensor]


class AffineScalars:
    """The four coefficients of one masked layer.

    Fixed coefficients are plain floats; learned ones are Tensors of shape [1]
    (per-layer) or [Cout] (per output channel).
    """

    def __init__(self, specs: tuple, granularity: Granularity, out_channels: int, dtype=DTYPE):
        self.specs = tuple(specs)
        self.granularity = Granularity(granularity)
        self.out_channels = out_channels
        size = out_channels if self.granularity is Granularity.CHANNEL else 1
        self.values: list[Coef] = []
        for j, spec in enumerate(self.specs):
            if spec.learned:
                self.values.append(Tensor(np.full(size, spec.value, dtype=dtype), requires_grad=True, name=f"k{j}"))
            else:
                self.values.append(float(spec.value))

    def learned(self) -> list[tuple[int, Tensor]]:
        return [(j, v) for j, v in enumerate(self.values) if isinstance(v, Tensor)]

    def num_learned(self) -> int:
        return sum(v.numel() for _, v in self.learned())

    def value_summary(self, j: int) -> float:
        """Scalar view of coefficient ``j`` (channel mean when per-channel)."""
        v = self.values[j]
        return float(v.data.mean()) if isinstance(v, Tensor) else v

    def resolve(self, j: int, ndim: int) -> Coef:
        v = self.values[j]
        if not isinstance(v, Tensor):
            return v
        if v.shape not in ((1,), (self.out_channels,)):
            raise DimensionError(f"k{j} has shape {v.shape}, layer has {self.out_channels} outputs")
        return v.reshape((v.shape[0],) + (1,) * (ndim - 1))

    def is_fixed(self, j: int, value: float) -> bool:
        v = self.values[j]
        return not isinstance(v, Tensor) and v == value


def init_real_mask(shape, rng: np.random.Generator, dtype=DTYPE) -> Tensor:
    values = rng.uniform(MASK_INIT_LOW, MASK_INIT_HIGH, size=shape).astype(dtype)
    return Tensor(values, requires_grad=True, name="mask")


def hard_threshold(r: np.ndarray) -> np.ndarray:
    return (r >= 0).astype(r.dtype)


def surrogate_scale(r: np.ndarray, surrogate: Surrogate) -> np.ndarray:
    """Derivative multiplier of the surrogate at ``r``; strictly positive for finite ``r``."""
    surrogate = Surrogate(surrogate)
    if surrogate is Surrogate.IDENTITY:
        return np.ones_like(r)
    e = np.exp(-np.abs(r.astype(np.float64)))
    d = e / (1.0 + e) ** 2
    # keep strict positivity where the float type would underflow to zero
    return np.maximum(d, np.finfo(r.dtype).tiny).astype(r.dtype)


def surrogate_backward(grad_out: np.ndarray, r: np.ndarray, surrogate: Surrogate) -> np.ndarray:
    if np.shape(grad_out) != np.shape(r):
        raise DimensionError(f"gradient {np.shape(grad_out)} vs mask {np.shape(r)}")
    return grad_out * surrogate_scale(r, surrogate)


def binarize(r: Tensor, surrogate: Surrogate = Surrogate.IDENTITY) -> Tensor:
    """``1[r >= 0]`` forward, surrogate derivative backward."""
    surrogate = Surrogate(surrogate)
    return custom_grad(r, hard_threshold, lambda x: surrogate_scale(x, surrogate))


def transform_weights(w: Tensor, m: Tensor, k: AffineScalars) -> Tensor:
    """``k0*w + k1*1 + k2*m + k3*(w*m)``.

    Terms with a coefficient fixed at 0 are dropped and a coefficient fixed at
    1 is not multiplied, so special cases run exactly the same arithmetic as
    their dedicated formulas.
    """
    if w.shape != m.shape:
        raise DimensionError(f"mask {m.shape} does not match weight {w.shape}")
    if w.shape[0] != k.out_channels:
        raise DimensionError(f"weight has {w.shape[0]} outputs, scalars expect {k.out_channels}")
    nd = w.data.ndim
    terms = []

    def scaled(j, base):
        if k.is_fixed(j, 0.0):
            return
        if k.is_fixed(j, 1.0):
            terms.append(base())
            return
        coef = k.resolve(j, nd)
        if isinstance(coef, float):
            coef = np.asarray(coef, dtype=w.dtype)
        terms.append(mul(coef, base()))

    scaled(0, lambda: w)
    scaled(1, lambda: Tensor(np.ones(w.shape, dtype=w.dtype)))
    scaled(2, lambda: m)
    scaled(3, lambda: mul(w, m))
    if not terms:
        return Tensor(np.zeros(w.shape, dtype=w.dtype))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def piggyback_weights(w: Tensor, m: Tensor) -> Tensor:
    """Plain multiplicative masking, ``w * m``."""
    if w.shape != m.shape:
        raise DimensionError(f"mask {m.shape} does not match weight {w.shape}")
    return mul(w, m)


def density(m) -> float:
    """Percentage of ones in a binary mask."""
    bits = m.data if isinstance(m, Tensor) else np.asarray(m)
    if bits.size == 0:
        raise ValueError("density of an empty mask")
    return 100.0 * float(np.count_nonzero(bits)) / bits.size
