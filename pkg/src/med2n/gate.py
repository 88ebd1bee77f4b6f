"""Domain-specific gates that hard-partition filters between source and target.

Each gated filter owns two logits (column 0: source, column 1: target). During
training one straight-through Gumbel-softmax draw per iteration yields a one-hot
row per filter; column 0 is the source mask and column 1 the target mask, so the
two are complementary by construction. At inference the larger logit wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import EmbeddingNet
from .errors import ConfigError, ParameterError

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)
INIT_STD = 0.01


def domain_column(domain: str) -> int:
    try:
        return DOMAINS.index(domain)
    except ValueError:
        raise ConfigError(f"domain must be one of {DOMAINS}, got {domain!r}") from None


class GateMatrix:
    def __init__(self, logits: Tensor, block_offsets: dict[int, tuple[int, int]]):
        self.logits = logits
        self.block_offsets = dict(block_offsets)

    @property
    def num_filters(self) -> int:
        return self.logits.shape[0]

    def source_probability(self) -> np.ndarray:
        return ad.softmax_np(self.logits.data, axis=1)[:, 0]

    def parameters(self) -> list[Tensor]:
        return [self.logits]


@dataclass
class DomainMask:
    domain: str
    masks: dict[int, Tensor | np.ndarray]

    def arrays(self) -> dict[int, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)).reshape(-1) for k, v in self.masks.items()}


def block_offsets_for(net: EmbeddingNet) -> dict[int, tuple[int, int]]:
    offsets, start = {}, 0
    for i in net.gated_blocks:
        stop = start + net.specs[i].out_channels
        offsets[i] = (start, stop)
        start = stop
    return offsets


def init_gates(net: EmbeddingNet, rng: np.random.Generator) -> GateMatrix:
    offsets = block_offsets_for(net)
    f = net.gated_filter_count
    logits = rng.normal(0.0, INIT_STD, (f, 2)).astype(net.dtype)
    return GateMatrix(Tensor(logits, requires_grad=True), offsets)


def draw_hard_gates(g: GateMatrix, tau: float, rng: np.random.Generator) -> Tensor:
    """One straight-through hard sample: [F x 2] one-hot rows."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    return ad.gumbel_softmax(g.logits, tau, rng, hard=True)


def masks_from_draw(g: GateMatrix, draw: Tensor, domain: str) -> DomainMask:
    col = domain_column(domain)
    column = ad.index(draw, (slice(None), col))
    return DomainMask(domain, {b: ad.index(column, slice(lo, hi)) for b, (lo, hi) in g.block_offsets.items()})


def sample_hard_masks(g: GateMatrix, tau: float, rng: np.random.Generator, domain: str) -> DomainMask:
    """Training-path mask for one domain from a fresh draw.

    The trainer uses :func:`draw_hard_gates` once per iteration and derives both
    domains from it with :func:`masks_from_draw`; this helper is the one-domain view.
    """
    return masks_from_draw(g, draw_hard_gates(g, tau, rng), domain)


def hard_assignment(g: GateMatrix) -> np.ndarray:
    """Boolean per filter: True when assigned to source (ties go to source)."""
    return g.logits.data[:, 0] >= g.logits.data[:, 1]


def infer_masks(g: GateMatrix, domain: str) -> DomainMask:
    col = domain_column(domain)
    src = hard_assignment(g)
    chosen = src if col == 0 else ~src
    vals = chosen.astype(g.logits.dtype)
    return DomainMask(domain, {b: vals[lo:hi].copy() for b, (lo, hi) in g.block_offsets.items()})


def gate_statistics(g: GateMatrix) -> list[dict]:
    src = infer_masks(g, SOURCE).arrays()
    rows = []
    for b, (lo, hi) in g.block_offsets.items():
        s = int(src[b].sum())
        rows.append({"block": b + 1, "total": hi - lo, "source_count": s, "target_count": hi - lo - s})
    return rows
