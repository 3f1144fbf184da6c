"""Gradient-difference similarity between a fixed and a moving image.

The measure damps squared differences of image gradients by the variance of
the fixed image's own gradients, so it saturates for gross mismatch and
rewards fine agreement of edges.  An intensity scale on the moving image is
either fixed or tuned per evaluation by golden-section search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import gradient_difference_score
from .core import Image2D

GOLDEN = 0.6180339887498949


class InsufficientLandmarksError(ValueError):
    """Fixed image carries no gradient content to register against."""


@dataclass
class SimilarityConfig:
    """scale None means golden-section search over [scale_lo, scale_hi]."""

    scale: float | None = None
    scale_lo: float = 0.05
    scale_hi: float = 20.0
    scale_iterations: int = 24
    epsilon_rel: float = 1e-12

    def __post_init__(self):
        if self.scale is not None and self.scale <= 0.0:
            raise ValueError("fixed scale must be positive")
        if not 0.0 < self.scale_lo < self.scale_hi:
            raise ValueError("need 0 < scale_lo < scale_hi")
        if self.scale_iterations < 1:
            raise ValueError("scale_iterations must be positive")


@dataclass
class SimilarityResult:
    score: float
    scale: float


def _data(image) -> np.ndarray:
    arr = image.data if isinstance(image, Image2D) else np.asarray(image)
    if arr.ndim != 2:
        raise ValueError("similarity operates on 2-D images")
    if arr.shape[0] < 3 or arr.shape[1] < 3:
        raise ValueError("image too small for interior gradients (need 3x3)")
    return arr.astype(np.float64)


def gradient_images(image) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients along u and v; border pixels are zero."""
    d = _data(image)
    gu = np.zeros_like(d)
    gv = np.zeros_like(d)
    gu[:, 1:-1] = 0.5 * (d[:, 2:] - d[:, :-2])
    gv[1:-1, :] = 0.5 * (d[2:, :] - d[:-2, :])
    return gu, gv


class PreparedSimilarity:
    """Fixed-image side of the measure, reusable across many moving images."""

    def __init__(self, fixed, cfg: SimilarityConfig | None = None):
        self.cfg = cfg or SimilarityConfig()
        d = _data(fixed)
        lo, hi = float(d.min()), float(d.max())
        if hi == lo:
            raise InsufficientLandmarksError(
                "fixed image is constant; nothing to register against")
        gu, gv = gradient_images(d)
        self._fx = np.ascontiguousarray(gu[1:-1, 1:-1].ravel())
        self._fy = np.ascontiguousarray(gv[1:-1, 1:-1].ravel())
        eps = self.cfg.epsilon_rel * (hi - lo) ** 2
        self.sigma_h = max(float(np.var(self._fx)), eps)
        self.sigma_v = max(float(np.var(self._fy)), eps)
        self.interior_count = self._fx.size
        self.max_score = 2.0 * self.interior_count

    def _moving_gradients(self, moving) -> tuple[np.ndarray, np.ndarray]:
        d = _data(moving)
        if (d.shape[0] - 2) * (d.shape[1] - 2) != self.interior_count:
            raise ValueError("fixed and moving images must share dims")
        gu, gv = gradient_images(d)
        return (np.ascontiguousarray(gu[1:-1, 1:-1].ravel()),
                np.ascontiguousarray(gv[1:-1, 1:-1].ravel()))

    def score_at(self, moving, scale: float) -> float:
        mx, my = self._moving_gradients(moving)
        return float(gradient_difference_score(self._fx, self._fy, mx, my,
                                               float(scale),
                                               self.sigma_h, self.sigma_v))

    def evaluate(self, moving) -> SimilarityResult:
        mx, my = self._moving_gradients(moving)
        if self.cfg.scale is not None:
            s = float(self.cfg.scale)
            return SimilarityResult(
                float(gradient_difference_score(self._fx, self._fy, mx, my, s,
                                                self.sigma_h, self.sigma_v)), s)

        def probe(s):
            return float(gradient_difference_score(self._fx, self._fy, mx, my, s,
                                                   self.sigma_h, self.sigma_v))

        a, b = self.cfg.scale_lo, self.cfg.scale_hi
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        fc, fd = probe(c), probe(d)
        best_s, best_f = (c, fc) if fc >= fd else (d, fd)
        for _ in range(self.cfg.scale_iterations):
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - GOLDEN * (b - a)
                fc = probe(c)
                if fc > best_f:
                    best_s, best_f = c, fc
            else:
                a, c, fc = c, d, fd
                d = a + GOLDEN * (b - a)
                fd = probe(d)
                if fd > best_f:
                    best_s, best_f = d, fd
        return SimilarityResult(best_f, best_s)


def gradient_difference(fixed, moving, scale: float,
                        cfg: SimilarityConfig | None = None) -> float:
    """Score at an explicit intensity scale on the moving image."""
    return PreparedSimilarity(fixed, cfg).score_at(moving, scale)


def evaluate(fixed, moving, cfg: SimilarityConfig | None = None) -> SimilarityResult:
    """Score with the configured scale handling (golden-section by default)."""
    return PreparedSimilarity(fixed, cfg).evaluate(moving)


__all__ = [
    "InsufficientLandmarksError", "PreparedSimilarity", "SimilarityConfig",
    "SimilarityResult", "evaluate", "gradient_difference", "gradient_images",
]
