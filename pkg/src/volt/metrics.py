"""Reconstruction metrics and attention-divergence diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def iou(pred, gt, t: float = 0.5) -> float:
    """Intersection over union of ``pred > t`` against a binary ground truth.

    Two empty sets count as a perfect match (1.0).
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"grid size mismatch: {pred.shape} vs {gt.shape}")
    p = pred > t
    g = gt > 0.5
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def voxel_surface_points(grid) -> np.ndarray:
    """Centers of occupied voxels with an empty or out-of-bounds 6-neighbour,
    in unit-cube coordinates. Returns an ``(n, 3)`` array (possibly empty)."""
    occ = np.asarray(grid) > 0.5
    if occ.ndim != 3 or len(set(occ.shape)) != 1:
        raise ValueError(f"expected a cubic grid, got shape {occ.shape}")
    g = occ.shape[0]
    padded = np.pad(occ, 1, constant_values=False)
    interior = occ.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    surface = occ & ~interior
    return (np.argwhere(surface) + 0.5) / g


def _nearest_distances(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """For each point of ``a`` the exact distance to its nearest point of ``b``."""
    out = np.empty(len(a))
    for lo in range(0, len(a), chunk):
        diff = a[lo:lo + chunk, None, :] - b[None, :, :]
        out[lo:lo + chunk] = np.sqrt((diff**2).sum(-1).min(axis=1))
    return out


def precision_recall(r, g, d: float = 0.01) -> tuple[float, float]:
    """Fraction of ``r`` within ``d`` of ``g`` and fraction of ``g`` within ``d`` of ``r``.

    Empty-set conventions: both empty -> (1, 1); one empty -> (0, 0).
    """
    if d <= 0:
        raise ValueError("distance threshold must be positive")
    r = np.asarray(r, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(g, dtype=np.float64).reshape(-1, 3)
    if len(r) == 0 and len(g) == 0:
        return 1.0, 1.0
    if len(r) == 0 or len(g) == 0:
        return 0.0, 0.0
    p = float(np.mean(_nearest_distances(r, g) < d))
    rec = float(np.mean(_nearest_distances(g, r) < d))
    return p, rec


def f_score(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


def grid_fscore(pred, gt, t: float = 0.5, d: float = 0.01) -> tuple[float, float, float]:
    """F-score, precision and recall between the surfaces of two voxel grids."""
    r = voxel_surface_points(np.asarray(pred) > t)
    g = voxel_surface_points(gt)
    p, rec = precision_recall(r, g, d)
    return f_score(p, rec), p, rec


def view_divergence(s) -> float:
    """Mean Euclidean distance of attention rows from their mean row."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError(f"expected a non-empty (M, M) matrix, got shape {s.shape}")
    if np.abs(s.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("attention rows must each sum to 1")
    return float(row_distances(s).mean())


def row_distances(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if (s == s[:1]).all():
        return np.zeros(len(s))  # the float mean of equal rows can be off by an ulp
    return np.linalg.norm(s - s.mean(axis=0, keepdims=True), axis=1)


SCOTT_FALLBACK = 1e-3


def scott_bandwidth(samples) -> tuple[float, bool]:
    """Scott's rule ``sigma * n ** (-1/5)``; returns ``(h, used_fallback)``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < 2:
        raise ValueError("need at least two samples")
    # test equality directly: the float std of identical values need not be exactly 0
    if np.all(x == x[0]):
        return SCOTT_FALLBACK, True
    sigma = x.std(ddof=1)
    return float(sigma * len(x) ** -0.2), False


def kde_density(samples, eval_grid, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density estimate evaluated at ``eval_grid``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < 2:
        raise ValueError("need at least two samples")
    h = scott_bandwidth(x)[0] if bandwidth is None else float(bandwidth)
    grid = np.asarray(eval_grid, dtype=np.float64)
    u = (x[None, :] - grid.ravel()[:, None]) / h
    dens = np.exp(-0.5 * u**2).sum(axis=1) / (len(x) * h * np.sqrt(2.0 * np.pi))
    return dens.reshape(grid.shape)


@dataclass
class LayerDivergence:
    layer: int
    D: np.ndarray               # one value per object
    row_distances: np.ndarray   # every per-view distance, all objects pooled
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    bandwidth_fallback: bool


@dataclass
class DivergenceReport:
    layers: list[LayerDivergence] = field(default_factory=list)
    head: int | None = None
    # (object, layer) -> (H, M, M) scores, kept for export
    scores: dict = field(default_factory=dict)

    def mean_D(self) -> np.ndarray:
        return np.array([layer.D.mean() for layer in self.layers])


def reduce_heads(scores: np.ndarray, head: int | None) -> np.ndarray:
    """Pick one head's ``(M, M)`` matrix, or average over heads when ``head`` is None."""
    return scores.mean(axis=-3) if head is None else scores[..., head, :, :]


def divergence_report(model, views, head: int | None = None, grid_points: int = 256,
                      keep_scores: bool = False) -> DivergenceReport:
    """Per encoder layer view divergence over a set of objects.

    ``views`` is an ``(n_objects, M, d)`` array. The density is estimated over
    the per-view row distances of all objects, ``n_objects * M`` samples per
    layer, on a grid spanning the samples +-4 bandwidths.
    """
    if not hasattr(model, "encode"):
        raise TypeError("model does not expose traced encoding")
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 3:
        raise ValueError("views must be (n_objects, M, d)")
    _, traces = model.encode(views, trace=True)
    if len(traces) != model.config.enc_layers:
        raise RuntimeError("model did not return one trace per encoder layer")
    report = DivergenceReport(head=head)
    for layer, scores in enumerate(traces):
        mats = reduce_heads(scores, head)
        d_obj = np.array([view_divergence(m) for m in mats])
        rows = np.concatenate([row_distances(m) for m in mats])
        h, fallback = scott_bandwidth(rows) if len(rows) >= 2 else (SCOTT_FALLBACK, True)
        grid = np.linspace(rows.min() - 4 * h, rows.max() + 4 * h, grid_points)
        dens = kde_density(rows, grid, bandwidth=h) if len(rows) >= 2 else np.zeros_like(grid)
        report.layers.append(LayerDivergence(layer, d_obj, rows, grid, dens, h, fallback))
        if keep_scores:
            for obj, s in enumerate(scores):
                report.scores[(obj, layer)] = s
    return report
