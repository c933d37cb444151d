"""Desk-scale protocol: pretrain a backbone on the source domain, then add each
suite domain with several variants and compare test accuracy."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from .data import DomainDataset, generate_source, generate_suite
from .masks import MaskTransformConfig
from .net import Backbone, DomainNet, add_domain, build_backbone, load_arch
from .train import Schedule, SCHEDULES, pretrain_backbone, train_domain

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Protocol:
    arch: str = "smallnet"
    backbone_seed: int = 0
    source_train: int = 2560
    source_test: int = 320
    pretrain_schedule: Schedule = Schedule(20, 15)
    pretrain_lr: float = 1e-3
    schedule: Schedule = SCHEDULES["desk"]
    # ten times the full-scale rates: desk runs take about a thousand steps per domain
    adam_lr: float = 1e-3
    sgd_lr: float = 1e-2
    n_train: int = 1280
    n_test: int = 640
    domain_seed: int = 1000


DESK = Protocol()
VARIANTS = ("classifier", "piggyback", "simple", "full", "finetune")


def pretrained_backbone(p: Protocol = DESK) -> Backbone:
    src = generate_source(p.source_train, p.source_test)
    arch = dataclasses.replace(load_arch(p.arch), classes=src.num_classes)
    bb = build_backbone(arch, p.backbone_seed)
    rep = pretrain_backbone(bb, src, p.pretrain_schedule, p.backbone_seed, p.pretrain_lr)
    log.info("source accuracy %.4f", rep.final_accuracy)
    return bb


def domain_seed(p: Protocol, index: int) -> int:
    return p.domain_seed + index


def train_one(bb: Backbone, data: DomainDataset, cfg: MaskTransformConfig, seed: int, p: Protocol = DESK):
    dom = add_domain(bb, data.num_classes, cfg, seed, domain_id=data.name)
    net = DomainNet(bb, dom)
    rep = train_domain(net, data, p.schedule, seed, adam_lr=p.adam_lr, sgd_lr=p.sgd_lr)
    return dom, rep


@dataclass
class Comparison:
    domains: list
    accuracy: dict = field(default_factory=dict)  # variant -> list per domain
    wall_time: float = 0.0
    backbone: Backbone | None = None
    models: dict = field(default_factory=dict)  # variant -> list of DomainParams
    datasets: list = field(default_factory=list)

    def mean(self, variant: str) -> float:
        acc = self.accuracy[variant]
        return sum(acc) / len(acc)

    def to_tsv(self) -> str:
        lines = ["variant\t" + "\t".join(self.domains) + "\tmean"]
        for v, acc in self.accuracy.items():
            lines.append(v + "\t" + "\t".join(f"{a:.4f}" for a in acc) + f"\t{self.mean(v):.4f}")
        return "\n".join(lines) + "\n"


def run_comparison(suite: str = "mds-3", variants=VARIANTS, p: Protocol = DESK,
                   bb: Backbone | None = None) -> Comparison:
    start = time.perf_counter()
    bb = bb if bb is not None else pretrained_backbone(p)
    datasets = generate_suite(suite, p.n_train, p.n_test)
    out = Comparison([d.name for d in datasets], backbone=bb, datasets=datasets)
    for v in variants:
        cfg = MaskTransformConfig(v)
        out.accuracy[v], out.models[v] = [], []
        for idx, data in enumerate(datasets):
            dom, rep = train_one(bb, data, cfg, domain_seed(p, idx), p)
            log.info("%s %s %.4f", v, data.name, rep.final_accuracy)
            out.accuracy[v].append(rep.final_accuracy)
            out.models[v].append(dom)
    out.wall_time = time.perf_counter() - start
    return out


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    res = run_comparison()
    print(res.to_tsv(), end="")
    print(f"wall_time\t{res.wall_time:.1f}")
