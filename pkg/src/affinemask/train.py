"""Optimizers, parameter groups, learning-rate schedules and the per-domain training loop."""
from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import DomainDataset, horizontal_flip
from .masks import MaskTransformConfig, Variant
from .net import Backbone, DomainNet, DomainParams, add_domain
from .tensor import Tensor, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)

ADAM_LR = 1e-4
SGD_LR = 1e-3
SGD_MOMENTUM = 0.9
BATCH_SIZE = 32


class Adam:
    def __init__(self, params, lr: float = ADAM_LR, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            _check_finite(name, g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class SGD:
    """SGD with heavy-ball momentum; the first step uses the raw gradient."""

    def __init__(self, params, lr: float = SGD_LR, momentum: float = SGD_MOMENTUM):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf: dict = {}

    def step(self) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            _check_finite(name, g)
            if self.momentum and name in self.buf:
                b = self.buf[name]
                b *= self.momentum
                b += g
            else:
                b = self.buf[name] = np.array(g, copy=True)
            p.data -= (self.lr * b).astype(p.data.dtype)


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.isfinite(g).all():
        bad = int((~np.isfinite(g)).sum())
        raise FloatingPointError(f"{bad} non-finite gradient entries in {name!r}; aborting")


@dataclass
class ParamGroup:
    name: str
    kind: str  # "adam" | "sgd"
    lr: float
    params: list

    def make_optimizer(self):
        if self.kind == "adam":
            return Adam(self.params, self.lr)
        return SGD(self.params, self.lr, SGD_MOMENTUM)


def make_groups(domain: DomainParams, adam_lr: float = ADAM_LR, sgd_lr: float = SGD_LR) -> list:
    """Adam for masks, learned coefficients, BN scale/shift and private weights;
    SGD with momentum for the classifier head."""
    named = domain.named_parameters()
    head = [(n, t) for n, t in named if n.startswith("head.")]
    rest = [(n, t) for n, t in named if not n.startswith("head.")]
    groups = []
    if rest:
        groups.append(ParamGroup("domain", "adam", adam_lr, rest))
    groups.append(ParamGroup("classifier", "sgd", sgd_lr, head))
    return groups


@dataclass(frozen=True)
class Schedule:
    epochs: int
    decay_epoch: int
    decay_factor: float = 10.0

    def __post_init__(self):
        if self.epochs < 0 or not 0 <= self.decay_epoch <= self.epochs:
            raise ValueError("need 0 <= decay_epoch <= epochs")
        if self.decay_factor <= 1:
            raise ValueError("decay factor must exceed 1")

    def lr_at(self, initial: float, epoch: int) -> float:
        return initial / self.decay_factor if epoch >= self.decay_epoch else initial


SCHEDULES = {
    "desk": Schedule(30, 20),
    "bench1": Schedule(30, 15),
    "decathlon": Schedule(60, 45),
}


def get_schedule(name: str) -> Schedule:
    try:
        return SCHEDULES[name]
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_time: float = 0.0

    def to_tsv(self) -> str:
        lines = ["epoch\tloss\taccuracy"]
        lines += [f"{e}\t{loss:.6f}\t{acc:.4f}" for e, (loss, acc) in enumerate(zip(self.epoch_loss, self.epoch_accuracy))]
        return "\n".join(lines) + "\n"


def predict(net: DomainNet, x: np.ndarray, batch_size: int = 256, cache_weights: bool = False) -> np.ndarray:
    """Eval-mode logits; the network's mode is restored afterwards.

    ``cache_weights`` transforms each layer's weights once instead of once per
    batch; the logits are the same either way.
    """
    was_training = net.training
    net.eval()
    try:
        with no_grad(), (net.cached_weights() if cache_weights else contextlib.nullcontext()):
            outs = [net(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    finally:
        net.training = was_training
    return np.concatenate(outs) if outs else np.zeros((0, net.domain.num_classes), dtype=np.float32)


def evaluate(net: DomainNet, x: np.ndarray, y: np.ndarray, batch_size: int = 256,
             cache_weights: bool = False) -> float:
    """Top-1 accuracy in eval mode."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float((predict(net, x, batch_size, cache_weights).argmax(axis=1) == y).mean())


def train_domain(
    net: DomainNet,
    data: DomainDataset,
    sched: Schedule,
    seed: int = 0,
    batch_size: int = BATCH_SIZE,
    adam_lr: float = ADAM_LR,
    sgd_lr: float = SGD_LR,
    augment: bool = False,
    groups: Optional[list] = None,
) -> TrainReport:
    """Optimize one domain's parameters; the backbone is checked unchanged afterwards."""
    dom = net.domain
    if data.num_classes != dom.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, domain expects {dom.num_classes}")
    if tuple(data.input_shape) != tuple(net.backbone.arch.input_shape):
        raise ValueError(f"dataset images {data.input_shape} do not fit {net.backbone.arch.input_shape}")
    before = net.backbone.digest()
    groups = groups if groups is not None else make_groups(dom, adam_lr, sgd_lr)
    opts = [(g, g.make_optimizer()) for g in groups]
    rng = np.random.default_rng(seed)
    report = TrainReport()
    start = time.perf_counter()
    n = len(data.train_x)
    net.train()
    for epoch in range(sched.epochs):
        for g, opt in opts:
            opt.lr = sched.lr_at(g.lr, epoch)
        perm = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            xb = data.train_x[idx]
            if augment:
                xb = horizontal_flip(xb, rng)
            yb = data.train_y[idx]
            logits = net(Tensor(xb))
            loss = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {s // batch_size}")
            dom.zero_grad()
            loss.backward()
            for _, opt in opts:
                opt.step()
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        report.epoch_loss.append(total_loss / max(n, 1))
        report.epoch_accuracy.append(correct / max(n, 1))
        log.info("%s epoch %d loss %.4f acc %.4f", dom.domain_id, epoch, report.epoch_loss[-1],
                 report.epoch_accuracy[-1])
    net.eval()
    dom.zero_grad()
    if len(data.test_x):
        report.final_accuracy = evaluate(net, data.test_x, data.test_y)
    report.wall_time = time.perf_counter() - start
    if net.backbone.frozen and net.backbone.digest() != before:
        raise RuntimeError("backbone changed during domain training")
    return report


def pretrain_backbone(
    bb: Backbone,
    data: DomainDataset,
    sched: Schedule,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = BATCH_SIZE,
) -> TrainReport:
    """Train every backbone parameter (Adam) on ``data``, then freeze the backbone."""
    if bb.frozen:
        raise ValueError("backbone is already frozen")
    if data.num_classes != bb.arch.classes:
        raise ValueError(f"dataset has {data.num_classes} classes, architecture head has {bb.arch.classes}")
    dom = add_domain(bb, bb.arch.classes, MaskTransformConfig(Variant.FINETUNE), seed,
                     domain_id=data.name, require_frozen=False)
    dom.head_w.data = bb.params["head.weight"].copy()
    dom.head_b.data = bb.params["head.bias"].copy()
    net = DomainNet(bb, dom)
    group = ParamGroup("all", "adam", lr, dom.named_parameters())
    report = train_domain(net, data, sched, seed, batch_size, groups=[group])
    p = bb.params
    for i, w in dom.weights.items():
        p[f"{i}.weight"] = w.data.copy()
    for i, st in dom.bn.items():
        p[f"{i}.gamma"] = st.gamma.data.copy()
        p[f"{i}.beta"] = st.beta.data.copy()
        p[f"{i}.mean"] = st.mean.copy()
        p[f"{i}.var"] = st.var.copy()
    p["head.weight"] = dom.head_w.data.copy()
    p["head.bias"] = dom.head_b.data.copy()
    bb.freeze()
    return report


def new_domain_net(bb: Backbone, data: DomainDataset, cfg: MaskTransformConfig, seed: int) -> DomainNet:
    return DomainNet(bb, add_domain(bb, data.num_classes, cfg, seed, domain_id=data.name))
