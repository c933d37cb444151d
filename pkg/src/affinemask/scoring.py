"""Decathlon-style score, score per parameter, overhead accounting and mask analysis."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .masks import density
from .net import Backbone, DomainParams

PERFECT = 1000.0


@dataclass(frozen=True)
class ScoreSpec:
    """Per-domain baseline errors ``E_max``; ``alpha = 1000 / E_max**2``."""

    error_max: tuple

    def __post_init__(self):
        object.__setattr__(self, "error_max", tuple(float(e) for e in self.error_max))
        for e in self.error_max:
            if not 0.0 < e <= 1.0:
                raise ValueError(f"baseline error {e} outside (0, 1]")

    @property
    def alpha(self) -> tuple:
        return tuple(PERFECT / e**2 for e in self.error_max)

    def __len__(self) -> int:
        return len(self.error_max)

    @classmethod
    def calibrate(cls, finetune_errors: Sequence[float]) -> "ScoreSpec":
        """Baselines from fine-tuned models: twice their error, clamped to 1."""
        return cls(tuple(min(1.0, 2.0 * float(e)) for e in finetune_errors))


def domain_score(error: float, error_max: float) -> float:
    # 1000 * (gap / E_max)^2 equals alpha * gap^2 and hits exactly 1000 at zero error
    gap = max(0.0, error_max - error)
    return PERFECT * (gap / error_max) ** 2


def score(errors: Sequence[float], spec: ScoreSpec) -> float:
    if len(errors) != len(spec):
        raise ValueError(f"{len(errors)} errors for {len(spec)} domains")
    for e in errors:
        if not 0.0 <= e <= 1.0:
            raise ValueError(f"error {e} outside [0, 1]")
    return float(sum(domain_score(e, m) for e, m in zip(errors, spec.error_max)))


def score_per_param(s: float, ratio: float) -> float:
    if ratio <= 0:
        raise ValueError("parameter ratio must be positive")
    return s / ratio


def overhead(n_params: int, bits_per_domain: int, num_domains: int) -> float:
    """Total parameter cost relative to one backbone: ``1 + A_p (T - 1) / (32 N_p)``.

    ``num_domains`` counts the pretraining domain.
    """
    if num_domains < 1:
        raise ValueError("need at least the pretraining domain")
    if n_params <= 0:
        raise ValueError("backbone must have parameters")
    return 1.0 + bits_per_domain * (num_domains - 1) / (32.0 * n_params)


def overhead_for(n_params: int, bits: Sequence[int]) -> float:
    """Ratio for added domains of possibly different sizes."""
    if n_params <= 0:
        raise ValueError("backbone must have parameters")
    return 1.0 + sum(bits) / (32.0 * n_params)


def count_domain_bits(domain: DomainParams) -> int:
    """Exact storage of a domain in bits, classifier head excluded.

    One bit per mask entry, 32 per learned coefficient, 32 per BN value
    (scale, shift, running mean, running variance) and 32 per private weight.
    """
    bits = sum(r.numel() for r in domain.masks.values())
    bits += 32 * sum(ks.num_learned() for ks in domain.scalars.values())
    bits += 32 * 4 * sum(st.gamma.numel() for st in domain.bn.values())
    bits += 32 * sum(w.numel() for w in domain.weights.values())
    return int(bits)


def backbone_params(bb: Backbone) -> int:
    """``N_p``: backbone parameters without the classifier."""
    return bb.param_count(include_head=False)


def bits_per_param(domain: DomainParams, bb: Backbone) -> float:
    return count_domain_bits(domain) / backbone_params(bb)


@dataclass(frozen=True)
class LayerRow:
    layer_index: int
    density: float
    k1: float
    k2: float
    k3: float


@dataclass
class MaskAnalysis:
    rows: list

    COLUMNS = ("layer_index", "density", "k1", "k2", "k3")

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(f"{r.layer_index}\t{r.density:.4f}\t{r.k1:.6g}\t{r.k2:.6g}\t{r.k3:.6g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "MaskAnalysis":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or tuple(lines[0].split("\t")) != cls.COLUMNS:
            raise ValueError("not a mask analysis table")
        rows = []
        for ln in lines[1:]:
            idx, dens, k1, k2, k3 = ln.split("\t")
            rows.append(LayerRow(int(idx), float(dens), float(k1), float(k2), float(k3)))
        return cls(rows)


def analyze_masks(domain: DomainParams) -> MaskAnalysis:
    """Per masked layer, in depth order: percentage of ones and k1..k3
    (channel mean for per-channel coefficients)."""
    rows = []
    for i in sorted(domain.masks):
        ks = domain.scalars[i]
        bits = domain.masks[i].data >= 0
        rows.append(LayerRow(i, density(bits), ks.value_summary(1), ks.value_summary(2), ks.value_summary(3)))
    return MaskAnalysis(rows)


def errors_tsv(names: Sequence[str], errors: Sequence[float], spec: ScoreSpec) -> str:
    lines = ["domain\terror\terror_max\tscore"]
    for n, e, m in zip(names, errors, spec.error_max):
        lines.append(f"{n}\t{e:.6f}\t{m:.6f}\t{domain_score(e, m):.4f}")
    return "\n".join(lines) + "\n"


def mean(values) -> float:
    return float(np.mean(list(values)))


def analyze_delta(contents) -> MaskAnalysis:
    """Mask analysis straight from a stored delta (no backbone needed)."""
    fixed_ks = contents.cfg.kspecs(False) if contents.cfg.uses_masks else ()
    rows = []
    for e in sorted((e for e in contents.entries if e.bits is not None), key=lambda e: e.layer_index):
        ks = [float(e.k_values[j].mean()) if j in e.k_values else fixed_ks[j].value for j in (1, 2, 3)]
        rows.append(LayerRow(e.layer_index, density(e.bits), *ks))
    return MaskAnalysis(rows)
