"""Training losses: Charbonnier, edge, memory reconstruction, contrastive ratio."""

from __future__ import annotations

from dataclasses import dataclass

from . import arraydiff as ad
from .arraydiff import Tensor
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-3
    lambda_edge: float = 0.05
    lambda_contrast: float = 0.1
    contrast_eps: float = 1e-6
    enable_contrast: bool = True
    enable_memory: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.lambda_edge < 0 or self.lambda_contrast < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.contrast_eps <= 0:
            raise ConfigurationError("contrast_eps must be > 0")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(x: Tensor, y: Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{what}: shapes {x.shape} and {y.shape} differ")


def _global_charbonnier(diff: Tensor, eps: float) -> Tensor:
    return ad.sqrt(ad.add_scalar(ad.sum(ad.square(diff)), eps * eps))


def charbonnier(x, y, eps: float = 1e-3) -> Tensor:
    """``sqrt(||x - y||^2 + eps^2)`` with the norm taken over all elements."""
    x, y = _t(x), _t(y)
    _same_shape(x, y, "charbonnier")
    return _global_charbonnier(ad.sub(x, y), eps)


def edge_loss(x, y, eps: float = 1e-3) -> Tensor:
    x, y = _t(x), _t(y)
    _same_shape(x, y, "edge_loss")
    return _global_charbonnier(ad.sub(ad.laplacian(x), ad.laplacian(y)), eps)


def l2_distance(x, y) -> Tensor:
    x, y = _t(x), _t(y)
    _same_shape(x, y, "l2_distance")
    return ad.sqrt(ad.sum(ad.square(ad.sub(x, y))))


def recon_loss(clean, net) -> Tensor:
    """L2 distance between the memory-path reconstruction of ``clean`` and ``clean``.

    Not differentiable at an exact reconstruction (the norm has a kink at 0).
    """
    clean = _t(clean)
    return l2_distance(net.reconstruct(clean), clean)


def pyramid(x: Tensor, levels: int = 3) -> list[Tensor]:
    out = [x]
    for _ in range(levels - 1):
        out.append(ad.avg_pool2(out[-1]))
    return out


def pyramid_distance(a: Tensor, b: Tensor, levels: int = 3) -> Tensor:
    """Mean over pyramid levels of the mean absolute difference at that level."""
    terms = [ad.mean(ad.absolute(ad.sub(pa, pb))) for pa, pb in zip(pyramid(a, levels), pyramid(b, levels))]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / levels)


def contrastive_loss(anchor, positive, negative, cfg: LossConfig | None = None) -> Tensor:
    """Distance to the positive over distance to the negative (guarded).

    The embedding is a fixed 3-level mean-pooled pyramid, so spatial extents
    must be divisible by 4.
    """
    cfg = cfg or LossConfig()
    anchor, positive, negative = _t(anchor), _t(positive), _t(negative)
    _same_shape(anchor, positive, "contrastive_loss")
    _same_shape(anchor, negative, "contrastive_loss")
    near = pyramid_distance(anchor, positive)
    far = pyramid_distance(anchor, negative)
    return ad.div(near, ad.add_scalar(far, cfg.contrast_eps))


@dataclass
class LossTerms:
    """Individual terms of one total-loss evaluation (all scalar tensors)."""

    char: list[Tensor]
    edge: list[Tensor]
    recon: Tensor | None
    contrast: Tensor | None
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "char": sum(t.item() for t in self.char),
            "edge": sum(t.item() for t in self.edge),
            "recon": self.recon.item() if self.recon is not None else 0.0,
            "contrast": self.contrast.item() if self.contrast is not None else 0.0,
        }


def loss_terms(stages, clean, degraded, net, cfg: LossConfig) -> LossTerms:
    clean, degraded = _t(clean), _t(degraded)
    _same_shape(clean, degraded, "total_loss")
    chars, edges = [], []
    total = None
    for x in stages:
        _same_shape(x, clean, "total_loss")
        c = charbonnier(x, clean, cfg.epsilon)
        e = edge_loss(x, clean, cfg.epsilon)
        chars.append(c)
        edges.append(e)
        term = ad.add(c, ad.scale(e, cfg.lambda_edge))
        total = term if total is None else ad.add(total, term)
    recon = contrast = None
    if cfg.enable_memory:
        recon = recon_loss(clean, net)
        total = ad.add(total, recon)
    if cfg.enable_contrast:
        contrast = contrastive_loss(stages[-1], clean, degraded, cfg)
        total = ad.add(total, ad.scale(contrast, cfg.lambda_contrast))
    return LossTerms(chars, edges, recon, contrast, total)


def total_loss(stages, clean, degraded, net, cfg: LossConfig) -> Tensor:
    """Multi-stage Charbonnier + edge loss, plus the enabled memory and contrastive terms."""
    return loss_terms(stages, clean, degraded, net, cfg).total
