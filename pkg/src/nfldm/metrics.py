"""Image-quality proxies used at toy scale."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

MIN_FRECHET_IMAGES = 16


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = 99.0) -> float:
    """PSNR in dB for images in [0, 1], capped for identical inputs."""
    mse = float(((a.float() - b.float()) ** 2).mean())
    return cap if mse <= 10 ** (-cap / 10) else min(cap, -10 * math.log10(mse))


def pixel_features(images: torch.Tensor, size: int = 8) -> np.ndarray:
    """Area-downsampled flattened pixels of ``(N, 3, H, W)`` images."""
    if images.dim() != 4:
        raise ValueError("expected (N, 3, H, W) images")
    small = F.adaptive_avg_pool2d(images.float(), size)
    return small.reshape(len(images), -1).double().numpy()


def _clip_spectrum(w: np.ndarray) -> np.ndarray:
    # round-off eigenvalues (~1e-16) would otherwise add ~1e-8 each under the square root
    tol = max(float(np.abs(w).max(initial=0.0)), 1e-300) * len(w) * np.finfo(np.float64).eps
    return np.where(w > tol, w, 0.0)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return (v * np.sqrt(_clip_spectrum(w))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))``.

    The trace of the cross term is taken from the eigenvalues of the
    symmetric matrix ``C1^(1/2) C2 C1^(1/2)``, which stays accurate for the
    rank-deficient covariances that small image sets produce.
    """
    diff = mu1 - mu2
    s1 = _psd_sqrt(cov1)
    cross = np.linalg.eigvalsh(s1 @ cov2 @ s1)
    tr_covmean = np.sqrt(_clip_spectrum(cross)).sum()
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_covmean)


def pixel_frechet(a: torch.Tensor, b: torch.Tensor, size: int = 8) -> float:
    """Fréchet distance between Gaussian fits of downsampled pixel vectors.

    A stand-in for feature-space FID when no pretrained network is around;
    only meaningful for relative comparisons on the same data.
    """
    if len(a) < MIN_FRECHET_IMAGES or len(b) < MIN_FRECHET_IMAGES:
        raise ValueError(f"need at least {MIN_FRECHET_IMAGES} images per side")
    fa, fb = pixel_features(a, size), pixel_features(b, size)
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))
