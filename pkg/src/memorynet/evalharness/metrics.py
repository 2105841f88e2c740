"""Image quality metrics: PSNR and SSIM in RGB, RMSE in CIE LAB."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, UsageError

PSNR_CAP = 99.0
SSIM_WINDOW = 8

# sRGB primaries, D65 white
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = np.array([0.95047, 1.0, 1.08883])
_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


def _values(img) -> np.ndarray:
    v = getattr(img, "values", img)
    v = np.asarray(v, dtype=np.float64)
    return v[None] if v.ndim == 2 else v


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = _values(x), _values(y)
    if x.shape != y.shape:
        raise DimensionError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y, mask=None) -> float:
    x, y = _pair(x, y)
    d2 = (x - y) ** 2
    if mask is None:
        return float(d2.mean())
    sel = _values(mask)[0] > 0.5
    if not sel.any():
        return float("nan")
    return float(d2[:, sel].mean())


def psnr(x, y, peak: float = 1.0, mask=None) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB for identical inputs."""
    err = mse(x, y, mask)
    if np.isnan(err):
        return err
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / err)))


def ssim_map(x, y, peak: float = 1.0, window: int = SSIM_WINDOW) -> np.ndarray:
    """Local SSIM for every ``window`` x ``window`` position, averaged over channels."""
    x, y = _pair(x, y)
    if x.shape[1] < window or x.shape[2] < window:
        raise UsageError(f"image {x.shape[1]}x{x.shape[2]} is smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wx = sliding_window_view(x, (window, window), axis=(1, 2))
    wy = sliding_window_view(y, (window, window), axis=(1, 2))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = ((wx - mx[..., None, None]) ** 2).mean(axis=(-2, -1))
    vy = ((wy - my[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return (num / den).mean(axis=0)


def ssim(x, y, peak: float = 1.0, mask=None) -> float:
    """Mean local SSIM; with ``mask``, only windows whose centre pixel is masked count."""
    local = ssim_map(x, y, peak)
    if mask is None:
        return float(local.mean())
    half = SSIM_WINDOW // 2
    m = _values(mask)[0][half:half + local.shape[0], half:half + local.shape[1]] > 0.5
    return float(local[m].mean()) if m.any() else float("nan")


def rgb_to_lab(img) -> np.ndarray:
    """sRGB in [0, 1], shape ``(3, H, W)``, to CIE LAB (D65, 2 degree observer)."""
    rgb = _values(img)
    if rgb.shape[0] != 3:
        raise UsageError(f"LAB conversion needs 3 channels, got {rgb.shape[0]}")
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(_RGB_TO_XYZ, linear, axes=1) / _D65[:, None, None]
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), (_LAB_KAPPA * xyz + 16.0) / 116.0)
    L = 116.0 * f[1] - 16.0
    a = 500.0 * (f[0] - f[1])
    b = 200.0 * (f[1] - f[2])
    return np.stack([L, a, b])


def rmse_lab(x, y, mask=None) -> float | tuple[float, float, float]:
    """RMSE of LAB values over all pixels.

    With ``mask`` returns ``(overall, shadow, non_shadow)`` where shadow uses
    mask=1 pixels and non-shadow mask=0 pixels (NaN for an empty region).
    """
    x, y = _pair(x, y)
    d2 = ((rgb_to_lab(x) - rgb_to_lab(y)) ** 2).mean(axis=0)
    overall = float(np.sqrt(d2.mean()))
    if mask is None:
        return overall
    sel = _values(mask)[0] > 0.5
    region = lambda m: float(np.sqrt(d2[m].mean())) if m.any() else float("nan")  # noqa: E731
    return overall, region(sel), region(~sel)


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    rmse_lab: float
    count: int = 1
    psnr_s: float | None = None
    psnr_n: float | None = None
    ssim_s: float | None = None
    ssim_n: float | None = None
    rmse_s: float | None = None
    rmse_n: float | None = None
    rows: list[dict] = field(default_factory=list, repr=False)

    FIELDS = ("psnr", "ssim", "rmse_lab", "psnr_s", "psnr_n", "ssim_s", "ssim_n", "rmse_s", "rmse_n")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def image_metrics(pred, target, mask=None) -> dict:
    row = {"psnr": psnr(pred, target), "ssim": ssim(pred, target), "rmse_lab": None}
    if mask is None:
        row["rmse_lab"] = rmse_lab(pred, target)
        return row
    inv = 1.0 - _values(mask)
    row["rmse_lab"], row["rmse_s"], row["rmse_n"] = rmse_lab(pred, target, mask)
    row["psnr_s"] = psnr(pred, target, mask=mask)
    row["psnr_n"] = psnr(pred, target, mask=inv)
    row["ssim_s"] = ssim(pred, target, mask=mask)
    row["ssim_n"] = ssim(pred, target, mask=inv)
    return row


def aggregate(rows: list[dict]) -> MetricsReport:
    """Mean of per-image rows; region columns only when every row has them."""
    if not rows:
        raise UsageError("no images to aggregate")
    out = {}
    for key in MetricsReport.FIELDS:
        vals = [r.get(key) for r in rows]
        if any(v is None for v in vals):
            out[key] = None
        else:
            finite = [v for v in vals if not np.isnan(v)]
            out[key] = float(np.mean(finite)) if finite else float("nan")
    return MetricsReport(count=len(rows), rows=list(rows), **out)


def report(preds, targets, masks=None) -> MetricsReport:
    masks = masks if masks is not None else [None] * len(preds)
    return aggregate([image_metrics(p, t, m) for p, t, m in zip(preds, targets, masks)])
