"""Fidelity of an accelerated sample against the full-step baseline.

PSNR and SSIM treat grid-shaped latents as single-channel images. Both are
anchored to the baseline: PSNR uses the baseline's dynamic range as peak,
SSIM min-max normalises the baseline and applies the same map to the other
input.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .flow_core import DimensionMismatch, Latent, as_vector

PSNR_CAP = 100.0
SSIM_WINDOW = 7


def _pair(a, b):
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.size} vs {b.size}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def rel_l2(a, baseline) -> float:
    a, b = _pair(a, baseline)
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ZeroDivisionError("baseline has zero norm")
    return float(np.linalg.norm(a - b) / nb)


def cosine(a, b) -> float:
    a, b = _pair(a, b)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise ZeroDivisionError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def _grids(a, b) -> tuple[np.ndarray, np.ndarray]:
    if not (isinstance(a, Latent) and isinstance(b, Latent)):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
    else:
        a, b = a.grid(), b.grid()
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionMismatch(f"need equal 2-D grids, got {a.shape} and {b.shape}")
    return a, b


def psnr_from_mse(m: float, peak: float) -> float:
    if m == 0:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / m)


def psnr(a, b, peak: float) -> float:
    """10 log10(peak^2 / mse); identical inputs give PSNR_CAP."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _grids(a, b)
    return psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def ssim(a, baseline, reference=None) -> float:
    """Mean SSIM over all valid 7x7 windows (uniform weights, no padding).

    Both grids are mapped by the affine map that sends ``reference`` (default:
    ``baseline``) onto [0, 1]; then L = 1, C1 = 0.01^2, C2 = 0.03^2.
    """
    a, b = _grids(a, baseline)
    ref = b if reference is None else _grids(reference, b)[0]
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"grid {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    lo, hi = float(ref.min()), float(ref.max())
    if hi == lo:
        raise ValueError("reference grid is flat; dynamic range is zero")
    a = (a - lo) / (hi - lo)
    b = (b - lo) / (hi - lo)
    c1, c2 = 0.01**2, 0.03**2

    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-2, -1))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class RetentionReport:
    mse: float
    rel_l2: float
    cosine: float
    nfe_ratio: float
    psnr: float | None = None
    ssim: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def retention_report(sample: Latent, baseline: Latent, baseline_nfe: int, nfe: int) -> RetentionReport:
    rep = RetentionReport(mse(sample, baseline), rel_l2(sample, baseline),
                          cosine(sample, baseline), baseline_nfe / nfe)
    if sample.is_grid and sample.shape == baseline.shape:
        g = baseline.grid()
        rep.psnr = psnr(sample, baseline, peak=float(g.max() - g.min()))
        if min(sample.shape) >= SSIM_WINDOW:
            rep.ssim = ssim(sample, baseline)
    return rep
