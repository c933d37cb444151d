"""Frozen backbones, per-domain parameter sets and the domain networks built from them."""
from __future__ import annotations

import configparser
import contextlib
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .masks import (
    AffineScalars,
    MaskTransformConfig,
    Variant,
    binarize,
    init_real_mask,
    piggyback_weights,
    transform_weights,
)
from .tensor import DTYPE, DimensionError, Tensor, batchnorm, conv2d, dense, flatten, maxpool2d, relu


class ArchError(ValueError):
    """Invalid or inconsistent architecture description."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | dense | bn | relu | maxpool | flatten
    out: int = 0
    k: int = 0
    stride: int = 1
    pad: int = 0

    def to_text(self) -> str:
        if self.kind == "conv":
            return f"conv {self.out} {self.k} stride={self.stride} pad={self.pad}"
        if self.kind == "dense":
            return f"dense {self.out}"
        if self.kind == "maxpool":
            return f"maxpool {self.k}"
        return self.kind


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple
    layers: tuple
    classes: int

    def to_text(self) -> str:
        body = "\n".join("    " + layer.to_text() for layer in self.layers)
        c, h, w = self.input_shape
        return f"[arch]\nname = {self.name}\ninput = {c}x{h}x{w}\nclasses = {self.classes}\nlayers =\n{body}\n"


PRESETS = {
    "smallnet": """
[arch]
name = smallnet
input = 1x16x16
classes = 10
layers =
    conv 8 3 pad=1
    bn
    relu
    maxpool 2
    conv 16 3 pad=1
    bn
    relu
    maxpool 2
""",
    "tinynet": """
[arch]
name = tinynet
input = 1x16x16
classes = 10
layers =
    conv 8 3 pad=1
    bn
    relu
    maxpool 2
""",
}


def _parse_layer(line: str) -> LayerSpec:
    tokens = line.split()
    kind = tokens[0].lower()
    pos = [t for t in tokens[1:] if "=" not in t]
    kw = dict(t.split("=", 1) for t in tokens[1:] if "=" in t)
    try:
        if kind == "conv":
            if len(pos) != 2:
                raise ArchError(f"conv needs '<out> <kernel>': {line!r}")
            return LayerSpec("conv", int(pos[0]), int(pos[1]), int(kw.get("stride", 1)), int(kw.get("pad", 0)))
        if kind == "dense":
            return LayerSpec("dense", int(pos[0]))
        if kind == "maxpool":
            return LayerSpec("maxpool", k=int(pos[0]) if pos else 2)
        if kind in ("bn", "relu", "flatten"):
            return LayerSpec(kind)
    except (IndexError, ValueError) as exc:
        raise ArchError(f"bad layer line {line!r}: {exc}") from None
    raise ArchError(f"unknown layer kind {kind!r}")


def parse_arch(text: str) -> ArchSpec:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        sec = cp["arch"]
    except (configparser.Error, KeyError) as exc:
        raise ArchError(f"unreadable architecture file: {exc}") from None
    try:
        input_shape = tuple(int(v) for v in sec.get("input", "1x16x16").lower().split("x"))
        classes = int(sec.get("classes", "10"))
    except ValueError as exc:
        raise ArchError(str(exc)) from None
    if len(input_shape) != 3:
        raise ArchError("input must be CxHxW")
    lines = [ln.strip() for ln in sec.get("layers", "").splitlines() if ln.strip()]
    arch = ArchSpec(sec.get("name", "custom"), input_shape, tuple(_parse_layer(ln) for ln in lines), classes)
    layer_shapes(arch)
    return arch


def load_arch(name_or_path) -> ArchSpec:
    """Preset name ("smallnet", "tinynet") or path to an architecture file."""
    if str(name_or_path) in PRESETS:
        return parse_arch(PRESETS[str(name_or_path)])
    path = Path(name_or_path)
    if not path.is_file():
        raise ArchError(f"no preset or file named {name_or_path!r}")
    return parse_arch(path.read_text())


def layer_shapes(arch: ArchSpec) -> dict:
    """Validate ``arch`` and return parameter shapes per layer index, plus the feature size."""
    if not arch.layers:
        raise ArchError("architecture has no layers")
    if arch.classes < 2:
        raise ArchError("pretraining head needs at least 2 classes")
    shape = tuple(arch.input_shape)
    shapes: dict = {}
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ArchError(f"layer {i}: conv after flatten")
            c, h, w = shape
            if layer.out < 1 or layer.k < 1 or layer.stride < 1 or layer.pad < 0:
                raise ArchError(f"layer {i}: invalid conv parameters")
            spans = [s + 2 * layer.pad - layer.k for s in (h, w)]
            if any(s < 0 or s % layer.stride for s in spans):
                raise ArchError(f"layer {i}: conv output size is not an integer")
            shapes[i] = {"weight": (layer.out, c, layer.k, layer.k)}
            shape = (layer.out, spans[0] // layer.stride + 1, spans[1] // layer.stride + 1)
        elif layer.kind == "bn":
            if len(shape) != 3 or i == 0 or arch.layers[i - 1].kind != "conv":
                raise ArchError(f"layer {i}: bn must directly follow a conv layer")
            shapes[i] = {"bn": shape[0]}
        elif layer.kind == "maxpool":
            if len(shape) != 3 or layer.k < 1 or shape[1] % layer.k or shape[2] % layer.k:
                raise ArchError(f"layer {i}: maxpool {layer.k} does not tile {shape}")
            shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if layer.out < 1:
                raise ArchError(f"layer {i}: invalid dense width")
            din = int(np.prod(shape))
            shapes[i] = {"weight": (layer.out, din)}
            shape = (layer.out,)
        elif layer.kind != "relu":
            raise ArchError(f"layer {i}: unknown kind {layer.kind}")
    shapes["features"] = int(np.prod(shape))
    return shapes


class Backbone:
    """Shared weights: conv/dense kernels, pretrained BN and the pretraining head.

    ``params`` maps names such as ``"0.weight"``, ``"1.gamma"``, ``"1.mean"``,
    ``"head.weight"`` to arrays. After :meth:`freeze` the arrays are read-only.
    """

    def __init__(self, arch: ArchSpec, params: dict, frozen: bool = False):
        self.arch = arch
        self.params = params
        self.frozen = False
        self._shapes = layer_shapes(arch)
        if frozen:
            self.freeze()

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    @property
    def feature_dim(self) -> int:
        return self._shapes["features"]

    def freeze(self) -> None:
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True

    def digest(self) -> int:
        """64-bit content hash over names, shapes and raw bytes of every array."""
        h = hashlib.blake2b(digest_size=8)
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.asarray(arr.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(arr).tobytes())
        return int.from_bytes(h.digest(), "little")

    def maskable(self) -> list:
        return [i for i, layer in enumerate(self.arch.layers) if layer.kind in ("conv", "dense")]

    def bn_layers(self) -> list:
        return [i for i, layer in enumerate(self.arch.layers) if layer.kind == "bn"]

    def followed_by_bn(self, i: int) -> bool:
        layers = self.arch.layers
        return i + 1 < len(layers) and layers[i + 1].kind == "bn"

    def weight(self, i: int) -> np.ndarray:
        return self.params[f"{i}.weight"]

    def param_count(self, include_head: bool = True) -> int:
        """Learnable parameters (weights, BN scale and shift); BN running statistics excluded."""
        n = sum(self.weight(i).size for i in self.maskable())
        n += sum(2 * self.params[f"{i}.gamma"].size for i in self.bn_layers())
        if include_head:
            n += self.params["head.weight"].size + self.params["head.bias"].size
        return int(n)

    def astype(self, dtype) -> "Backbone":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return Backbone(self.arch, params, frozen=self.frozen)


def build_backbone(arch: ArchSpec, seed: int = 0, dtype=DTYPE) -> Backbone:
    """Randomly initialized (He-normal) backbone with a pretraining head of ``arch.classes``."""
    shapes = layer_shapes(arch)
    rng = np.random.default_rng(seed)
    params: dict = {}
    for i, layer in enumerate(arch.layers):
        if i not in shapes:
            continue
        if "weight" in shapes[i]:
            shp = shapes[i]["weight"]
            fan_in = int(np.prod(shp[1:]))
            params[f"{i}.weight"] = (rng.standard_normal(shp) * np.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            c = shapes[i]["bn"]
            params[f"{i}.gamma"] = np.ones(c, dtype=dtype)
            params[f"{i}.beta"] = np.zeros(c, dtype=dtype)
            params[f"{i}.mean"] = np.zeros(c, dtype=dtype)
            params[f"{i}.var"] = np.ones(c, dtype=dtype)
    d = shapes["features"]
    params["head.weight"] = (rng.standard_normal((arch.classes, d)) * np.sqrt(2.0 / d)).astype(dtype)
    params["head.bias"] = np.zeros(arch.classes, dtype=dtype)
    return Backbone(arch, params)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    mean: np.ndarray
    var: np.ndarray


@dataclass
class DomainParams:
    """Everything private to one domain: masks, coefficients, BN and classifier head."""

    domain_id: str
    num_classes: int
    cfg: MaskTransformConfig
    arch_digest: int
    masks: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)
    head_w: Optional[Tensor] = None
    head_b: Optional[Tensor] = None

    def named_parameters(self) -> list:
        """Learnable tensors as ``(name, tensor)`` in a stable order."""
        out = []
        for i, r in self.masks.items():
            out.append((f"{i}.mask", r))
        for i, ks in self.scalars.items():
            out.extend((f"{i}.k{j}", t) for j, t in ks.learned())
        for i, w in self.weights.items():
            out.append((f"{i}.weight", w))
        for i, st in self.bn.items():
            out.append((f"{i}.gamma", st.gamma))
            out.append((f"{i}.beta", st.beta))
        out.append(("head.weight", self.head_w))
        out.append(("head.bias", self.head_b))
        return out

    def state(self) -> dict:
        """Every array owned by the domain, including BN running statistics."""
        out = {name: t.data for name, t in self.named_parameters()}
        for i, st in self.bn.items():
            out[f"{i}.mean"] = st.mean
            out[f"{i}.var"] = st.var
        return out

    def binary_masks(self) -> dict:
        return {i: (r.data >= 0) for i, r in self.masks.items()}

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None


def add_domain(
    bb: Backbone,
    num_classes: int,
    cfg: MaskTransformConfig,
    seed: int = 0,
    domain_id: str = "domain",
    require_frozen: bool = True,
) -> DomainParams:
    """Fresh domain parameters: masks in [1e-4, 2e-4], BN copied from the backbone,
    random classifier head."""
    if num_classes < 2:
        raise ValueError("a domain needs at least 2 classes")
    if require_frozen and not bb.frozen:
        raise ValueError("backbone must be frozen before adding domains")
    dtype = bb.dtype
    mask_seq, head_seq = np.random.SeedSequence(seed).spawn(2)
    mask_rng = np.random.default_rng(mask_seq)
    dom = DomainParams(domain_id, num_classes, cfg, bb.digest())
    for i in bb.maskable():
        w = bb.weight(i)
        if cfg.uses_masks:
            dom.masks[i] = init_real_mask(w.shape, mask_rng, dtype)
            specs = cfg.kspecs(bb.followed_by_bn(i))
            dom.scalars[i] = AffineScalars(specs, cfg.granularity, w.shape[0], dtype)
        elif cfg.private_weights:
            dom.weights[i] = Tensor(w.copy(), requires_grad=True, name=f"{i}.weight")
    if cfg.domain_bn:
        for i in bb.bn_layers():
            p = bb.params
            dom.bn[i] = BatchNormState(
                Tensor(p[f"{i}.gamma"].copy(), requires_grad=True),
                Tensor(p[f"{i}.beta"].copy(), requires_grad=True),
                p[f"{i}.mean"].copy(),
                p[f"{i}.var"].copy(),
            )
    d = bb.feature_dim
    head_rng = np.random.default_rng(head_seq)
    dom.head_w = Tensor((head_rng.standard_normal((num_classes, d)) * np.sqrt(2.0 / d)).astype(dtype),
                        requires_grad=True)
    dom.head_b = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    return dom


def _run_layers(arch: ArchSpec, x: Tensor, weight_of, bn_of, training: bool) -> Tensor:
    h = x
    for i, layer in enumerate(arch.layers):
        kind = layer.kind
        if kind == "conv":
            h = conv2d(h, weight_of(i), layer.stride, layer.pad)
        elif kind == "dense":
            if h.data.ndim != 2:
                h = flatten(h)
            h = dense(h, weight_of(i))
        elif kind == "bn":
            gamma, beta, mean, var, bn_training = bn_of(i)
            h = batchnorm(h, gamma, beta, mean, var, training and bn_training)
        elif kind == "relu":
            h = relu(h)
        elif kind == "maxpool":
            h = maxpool2d(h, layer.k)
        elif kind == "flatten":
            h = flatten(h)
    if h.data.ndim != 2:
        h = flatten(h)
    return h


def _check_input(arch: ArchSpec, x: Tensor) -> None:
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise DimensionError(f"input {x.shape} does not match architecture input {arch.input_shape}")


def backbone_features(bb: Backbone, x, training: bool = False) -> Tensor:
    """Features of the frozen backbone path (pretrained BN). Training mode uses
    batch statistics on scratch copies of the running buffers."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(bb.arch, x)
    p = bb.params

    def bn_of(i):
        mean, var = p[f"{i}.mean"], p[f"{i}.var"]
        if training:
            mean, var = mean.copy(), var.copy()
        return Tensor(p[f"{i}.gamma"]), Tensor(p[f"{i}.beta"]), mean, var, True

    return _run_layers(bb.arch, x, lambda i: Tensor(bb.weight(i)), bn_of, training)


def backbone_forward(bb: Backbone, x, training: bool = False) -> Tensor:
    feats = backbone_features(bb, x, training)
    return dense(feats, Tensor(bb.params["head.weight"]), Tensor(bb.params["head.bias"]))


def simple_weights(w: Tensor, m: Tensor, k: AffineScalars) -> Tensor:
    """Dedicated path for the transform without the multiplicative term."""
    nd = w.data.ndim
    out = w if k.is_fixed(0, 1.0) else k.resolve(0, nd) * w
    if not k.is_fixed(1, 0.0):
        out = out + k.resolve(1, nd) * Tensor(np.ones(w.shape, dtype=w.dtype))
    if not k.is_fixed(2, 0.0):
        out = out + k.resolve(2, nd) * m
    return out


class DomainNet:
    """Domain network: frozen backbone weights seen through one domain's parameters."""

    def __init__(self, backbone: Backbone, domain: DomainParams, training: bool = False):
        if domain.arch_digest != backbone.digest():
            raise ValueError("domain parameters belong to a different backbone")
        self.backbone = backbone
        self.domain = domain
        self.training = training
        self._weight_cache: Optional[dict] = None

    def train(self) -> "DomainNet":
        self.training = True
        return self

    def eval(self) -> "DomainNet":
        self.training = False
        return self

    @contextlib.contextmanager
    def cached_weights(self):
        """Eval-only: compute each transformed weight once for the whole block.

        Training recomputes them on every forward so gradients stay exact.
        """
        if self.training:
            raise RuntimeError("weight caching is for evaluation only")
        self._weight_cache = {}
        try:
            yield self
        finally:
            self._weight_cache = None

    def masks(self) -> dict:
        """Binarized masks as graph nodes (surrogate gradient attached)."""
        dom = self.domain
        return {i: binarize(r, dom.cfg.surrogate) for i, r in dom.masks.items()}

    def weight(self, i: int, masks: Optional[dict] = None) -> Tensor:
        cache = self._weight_cache
        if cache is not None and masks is None:
            if i not in cache:
                cache[i] = Tensor(self._transformed(i, None).data)
            return cache[i]
        return self._transformed(i, masks)

    def _transformed(self, i: int, masks: Optional[dict]) -> Tensor:
        dom = self.domain
        if i in dom.weights:
            return dom.weights[i]
        w = Tensor(self.backbone.weight(i))
        if i not in dom.masks:
            return w
        m = masks[i] if masks is not None and i in masks else binarize(dom.masks[i], dom.cfg.surrogate)
        variant = dom.cfg.variant
        if variant is Variant.PIGGYBACK:
            return piggyback_weights(w, m)
        if variant is Variant.SIMPLE:
            return simple_weights(w, m, dom.scalars[i])
        return transform_weights(w, m, dom.scalars[i])

    def features(self, x, masks: Optional[dict] = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        _check_input(self.backbone.arch, x)
        dom, p = self.domain, self.backbone.params

        def bn_of(i):
            if i in dom.bn:
                st = dom.bn[i]
                return st.gamma, st.beta, st.mean, st.var, True
            # frozen feature extractor: pretrained statistics, never updated
            return Tensor(p[f"{i}.gamma"]), Tensor(p[f"{i}.beta"]), p[f"{i}.mean"], p[f"{i}.var"], False

        return _run_layers(self.backbone.arch, x, lambda i: self.weight(i, masks), bn_of, self.training)

    def forward(self, x, masks: Optional[dict] = None) -> Tensor:
        return dense(self.features(x, masks), self.domain.head_w, self.domain.head_b)

    __call__ = forward


def forgetting_check(bb: Backbone, before_digest: int) -> bool:
    """True iff the backbone is byte-for-byte what it was when ``before_digest`` was taken."""
    return bb.digest() == before_digest
