"""Patch statistics and image-quality metrics.

Entropy and singular spectra quantify how compact a set of patches is;
``embed_2d`` gives a planar view of an embedding batch for plotting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

PSNR_CAP = 99.0


def patch_entropy(p, bins: int = 256) -> float:
    """Shannon entropy in bits of the equal-width histogram of ``p`` over [0, 1]."""
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    values = np.asarray(p, dtype=np.float64).ravel()
    if values.size == 0:
        raise ParameterError("entropy of an empty patch is undefined")
    idx = np.clip(np.floor(values * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    # fsum is correctly rounded, so the result does not depend on summation order
    return 0.0 - math.fsum(q * math.log2(q) for q in (counts[counts > 0] / values.size).tolist())


@dataclass
class SpectrumReport:
    singular_values: np.ndarray

    def energy(self) -> np.ndarray:
        """Cumulative energy fraction for ranks 1..n."""
        sq = self.singular_values ** 2
        total = sq.sum()
        if total <= 0:
            return np.ones_like(sq)
        return np.minimum(np.cumsum(sq) / total, 1.0)

    def energy_fraction(self, k: int) -> float:
        if k <= 0:
            return 0.0
        e = self.energy()
        return float(e[min(k, len(e)) - 1])

    def rank_at(self, threshold: float = 0.95) -> int:
        """Smallest rank whose cumulative energy reaches ``threshold``."""
        if not np.any(self.singular_values > 0):
            return 0
        return int(np.searchsorted(self.energy(), threshold - 1e-12) + 1)


def singular_spectrum(stack) -> SpectrumReport:
    """Singular values of the mean-centred patch matrix (one row per patch)."""
    patches = np.asarray(getattr(stack, "patches", stack), dtype=np.float64)
    if patches.ndim < 2 or patches.shape[0] < 2:
        raise ParameterError("a spectrum needs at least two patches")
    data = patches.reshape(patches.shape[0], -1)
    data = data - data.mean(axis=0, keepdims=True)
    return SpectrumReport(np.linalg.svd(data, compute_uv=False))


def embed_2d(batch, method: str = "pca", seed: int = 0) -> np.ndarray:
    """Project rows to the plane; ``pca`` is deterministic, ``tsne`` is stochastic."""
    x = np.asarray(batch.detach().cpu() if hasattr(batch, "detach") else batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ParameterError("embed_2d needs an (n, d) batch with n >= 3")
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, (x.shape[0] - 1) / 3)
        return TSNE(2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(x)
    if method != "pca":
        raise ParameterError(f"unknown projection {method!r}")
    centred = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros_like(axes)])
    # sign convention: largest-magnitude loading positive
    signs = np.sign(axes[np.arange(2), np.argmax(np.abs(axes), axis=1)])
    signs[signs == 0] = 1
    return centred @ (axes * signs[:, None]).T


# ---------------------------------------------------------------------------
# metrics


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    h, w = img.shape
    rows = sum(k[i] * img[i:h - n + 1 + i, :] for i in range(n))
    return sum(k[i] * rows[:, i:w - n + 1 + i] for i in range(n))


def ssim(a, b, data_range: float = 1.0, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over fully covered windows, averaged across channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < win:
        raise DimensionError(f"SSIM needs images of at least {win}x{win}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    kern = _gaussian_kernel(win, sigma)
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, kern), _filter_valid(y, kern)
        sxx = _filter_valid(x * x, kern) - mx * mx
        syy = _filter_valid(y * y, kern) - my * my
        sxy = _filter_valid(x * y, kern) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
