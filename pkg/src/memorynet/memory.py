"""Hierarchical prototype memory.

A bank stores only part-level prototypes, ``B x N_part x C``, with rows
nested as (class, semantic, instance, part).  Instance and semantic
prototypes are contiguous block means of the level below, so every read is
differentiable back into the single stored array.

Queries are addressed by a softmax over cosine similarities and read as a
per-query convex combination of prototype rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arraydiff as ad
from .arraydiff import Tensor
from .errors import ConfigurationError, DegenerateInputError, DimensionError

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class MemoryConfig:
    P: int = 2  # part prototypes per instance
    I: int = 2  # instances per semantic  # noqa: E741
    S: int = 1  # semantic prototypes per class
    N_c: int = 1  # classes
    C: int = 8  # channel dimension
    B: int = 2  # modality banks
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("P", "I", "S", "N_c", "C", "B"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"MemoryConfig.{name} must be a positive integer, got {value}")

    @property
    def n_part(self) -> int:
        return self.P * self.I * self.S * self.N_c

    @property
    def n_ins(self) -> int:
        return self.I * self.S * self.N_c

    @property
    def n_sem(self) -> int:
        return self.S * self.N_c


@dataclass
class PrototypeBank:
    """Learnable part-level metric plus the hierarchy that derives the upper levels."""

    config: MemoryConfig
    part_metric: Tensor

    def __post_init__(self):
        cfg = self.config
        expected = (cfg.B, cfg.n_part, cfg.C)
        if self.part_metric.shape != expected:
            raise DimensionError(f"part_metric has shape {self.part_metric.shape}, expected {expected}")

    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        """Row-concatenated (over banks) part, instance and semantic metrics."""
        cfg = self.config
        part = ad.reshape(self.part_metric, (cfg.B * cfg.n_part, cfg.C))
        # blocks of P (then I) rows never straddle a bank boundary, so
        # summarizing the concatenation equals concatenating per-bank summaries
        ins = summarize(part, cfg.P, cfg.alpha)
        sem = summarize(ins, cfg.I, cfg.alpha)
        return part, ins, sem


def init_bank(config: MemoryConfig, seed: int) -> PrototypeBank:
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1.0, 1.0, size=(config.B, config.n_part, config.C))
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    # a draw of exactly zero has probability zero, but never divide by it
    while np.any(norms < NORM_FLOOR):
        bad = norms[..., 0] < NORM_FLOOR
        raw[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), config.C))
        norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    return PrototypeBank(config, Tensor(raw / norms, requires_grad=True))


def _check_rows(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.data, axis=1)
    bad = np.flatnonzero(norms <= NORM_FLOOR)
    if bad.size:
        raise DegenerateInputError(f"{what} row {bad[0]} has zero norm", row=int(bad[0]))


def cosine_similarity(queries: Tensor, metric: Tensor, eps: float | None = None) -> Tensor:
    """``Q x N`` matrix of cosines between query rows and prototype rows.

    With ``eps`` set, norms are computed as ``sqrt(|v|^2 + eps^2)`` instead of
    rejecting zero rows, so an all-zero query yields similarity 0 everywhere.
    """
    if queries.ndim != 2 or metric.ndim != 2 or queries.shape[1] != metric.shape[1]:
        raise DimensionError(f"address: query shape {queries.shape} incompatible with metric {metric.shape}")
    if eps is None:
        _check_rows(queries, "query")
        _check_rows(metric, "prototype")
        eps = 0.0
    qn = ad.div(queries, ad.l2_norm(queries, axis=1, eps=eps))
    mn = ad.div(metric, ad.l2_norm(metric, axis=1, eps=eps))
    return ad.matmul(qn, ad.transpose(mn))


def address(queries: Tensor, metric: Tensor, eps: float | None = None) -> Tensor:
    """Addressing weights: softmax over prototypes of the query/prototype cosine."""
    return ad.softmax(cosine_similarity(queries, metric, eps=eps), axis=1)


def read(weights: Tensor, metric: Tensor) -> Tensor:
    if weights.ndim != 2 or metric.ndim != 2 or weights.shape[1] != metric.shape[0]:
        raise DimensionError(f"read: weights {weights.shape} do not match metric {metric.shape}")
    return ad.matmul(weights, metric)


def summarize(lower: Tensor, block: int, alpha: float = 1.0) -> Tensor:
    """Scaled mean of each contiguous ``block`` of rows: ``(alpha/block) * sum``."""
    n_low, c = lower.shape
    if block < 1 or n_low % block:
        raise ConfigurationError(f"summarize: block {block} does not divide {n_low} rows")
    grouped = ad.reshape(lower, (n_low // block, block, c))
    return ad.scale(ad.sum(grouped, axis=1), alpha / block)


def hierarchical_read(
    queries: Tensor, bank: PrototypeBank, eps: float | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Part, instance and semantic reads; each level is addressed by the previous read."""
    if queries.ndim != 2 or queries.shape[1] != bank.config.C:
        raise DimensionError(f"queries {queries.shape} do not have C={bank.config.C} columns")
    part, ins, sem = bank.levels()
    y_part = read(address(queries, part, eps), part)
    y_ins = read(address(y_part, ins, eps), ins)
    y_sem = read(address(y_ins, sem, eps), sem)
    return y_part, y_ins, y_sem


def feature_queries(features: Tensor) -> Tensor:
    """``(C, H, W)`` map to ``(H*W, C)`` query rows."""
    c, h, w = features.shape
    return ad.transpose(ad.reshape(features, (c, h * w)))


def queries_to_map(rows: Tensor, h: int, w: int) -> Tensor:
    q, c = rows.shape
    if q != h * w:
        raise DimensionError(f"{q} query rows cannot fill a {h}x{w} map")
    return ad.reshape(ad.transpose(rows), (c, h, w))
