"""Full-reference fidelity metrics and prompt-cluster separation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ShapeError
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB over all elements; ``math.inf`` when the inputs are identical."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = g1.size
    h, w = img.shape[-2:]
    rows = sum(g1[i] * img[..., i : h - k + 1 + i, :] for i in range(k))
    return sum(g1[j] * rows[..., :, j : w - k + 1 + j] for j in range(k))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid positions.

    Computed per channel and per batch item, then averaged.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2
    g1 = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    g1 /= g1.sum()
    mu_a = _filter_valid(a, g1)
    mu_b = _filter_valid(b, g1)
    var_a = _filter_valid(a * a, g1) - mu_a**2
    var_b = _filter_valid(b * b, g1) - mu_b**2
    cov = _filter_valid(a * b, g1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def prompt_separation(embeddings: list[tuple[np.ndarray, str]]) -> tuple[float, float, float]:
    """Mean within-task and across-task Euclidean distances and their ratio.

    Conventions for degenerate input: ratio is ``inf`` when ``intra == 0 < inter``
    and 1.0 when both are zero.
    """
    groups: dict[str, list[np.ndarray]] = defaultdict(list)
    for vec, task in embeddings:
        groups[task].append(np.ravel(np.asarray(vec, dtype=np.float64)))
    if len(groups) < 2:
        raise ValueError("prompt separation needs at least two tasks")
    if any(len(v) < 4 for v in groups.values()):
        raise ValueError("prompt separation needs at least four vectors per task")
    mats = {k: np.stack(v) for k, v in groups.items()}
    intra_d = np.concatenate([pdist(m) for m in mats.values()])
    keys = sorted(mats)
    inter_d = np.concatenate(
        [cdist(mats[a], mats[b]).ravel() for i, a in enumerate(keys) for b in keys[i + 1 :]]
    )
    intra = float(intra_d.mean())
    inter = float(inter_d.mean())
    if intra == 0.0:
        ratio = 1.0 if inter == 0.0 else math.inf
    else:
        ratio = inter / intra
    return intra, inter, ratio


@dataclass
class FrameMetrics:
    frame_id: str
    task: str
    psnr_in: float
    psnr_out: float
    ssim_in: float
    ssim_out: float


@dataclass
class MetricReport:
    rows: list[FrameMetrics]

    def by_task(self) -> dict[str, dict[str, float]]:
        """Per-task means plus an ``all`` row; infinite PSNRs are excluded from means."""
        groups: dict[str, list[FrameMetrics]] = defaultdict(list)
        for r in self.rows:
            groups[r.task].append(r)
        groups["all"] = list(self.rows)
        out = {}
        for task, rows in groups.items():
            out[task] = {
                "frames": len(rows),
                "psnr_in": _finite_mean([r.psnr_in for r in rows]),
                "psnr_out": _finite_mean([r.psnr_out for r in rows]),
                "ssim_in": float(np.mean([r.ssim_in for r in rows])) if rows else math.nan,
                "ssim_out": float(np.mean([r.ssim_out for r in rows])) if rows else math.nan,
            }
        return out


def _finite_mean(values: list[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    if finite:
        return float(np.mean(finite))
    return math.inf if values else math.nan
