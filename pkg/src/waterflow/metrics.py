"""Saliency evaluation: MAE, mean F-measure, S-measure, mean E-measure.

Conventions, fixed here once so the oracle tests can hold them to 1e-9:

* f_measure_mean sweeps the 256 thresholds k/255 with >= binarization,
  beta^2 = 0.3; any zero-denominator F contributes 0; an all-zero ground
  truth scores 0 and raises the degenerate flag.
* s_measure follows the published structure-measure construction with
  alpha = 0.5, sample (N-1) standard deviations, centroid rounding half away
  from zero, and the all-zero / all-one fallbacks 1 - mean(P) / mean(P).
* e_measure_mean sweeps mid-point thresholds (k + 0.5)/256 so that a binary
  prediction equal to the ground truth binarizes identically at every
  threshold, making the perfect score exactly 1. Alignment uses mean-centered
  bias maps with 0/0 defined as 0, enhanced via (xi + 1)^2 / 4, averaged over
  all pixels. Degenerate ground truth scores mean(1 - P_bin) or mean(P_bin).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .validation import check_binary, check_in_unit_range

F_BETA_SQ = 0.3
S_ALPHA = 0.5
N_THRESHOLDS = 256
_EPS = float(np.finfo(np.float64).eps)


def _pair(P: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P = np.asarray(P, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if P.shape != G.shape:
        raise ShapeError(f"prediction dims {P.shape} vs ground truth dims {G.shape}")
    if P.ndim != 2:
        raise ShapeError(f"metrics expect 2-D maps, got rank {P.ndim}")
    check_in_unit_range(P, "prediction")
    check_binary(G, "ground truth")
    return P, G


def mae(P: np.ndarray, G: np.ndarray) -> float:
    P, G = _pair(P, G)
    return float(np.abs(P - G).mean())


def f_measure_mean(P: np.ndarray, G: np.ndarray) -> float:
    P, G = _pair(P, G)
    n_pos = G.sum()
    if n_pos == 0:
        return 0.0
    taus = np.arange(N_THRESHOLDS, dtype=np.float64) / 255.0
    bins = P[None] >= taus[:, None, None]
    tp = (bins & (G[None] > 0.5)).sum(axis=(1, 2)).astype(np.float64)
    pred_pos = bins.sum(axis=(1, 2)).astype(np.float64)
    scores = np.zeros(N_THRESHOLDS)
    ok = pred_pos > 0
    prec = np.zeros(N_THRESHOLDS)
    prec[ok] = tp[ok] / pred_pos[ok]
    rec = tp / n_pos
    denom = F_BETA_SQ * prec + rec
    ok &= denom > 0
    scores[ok] = (1.0 + F_BETA_SQ) * prec[ok] * rec[ok] / denom[ok]
    return float(scores.mean())


def _s_object_half(x: np.ndarray) -> float:
    """2*mean/(mean^2 + 1 + std) similarity of one object region's values."""
    mean = float(x.mean())
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + _EPS)


def _s_object(P: np.ndarray, G: np.ndarray) -> float:
    fg = np.where(G > 0.5, P, 0.0)
    bg = np.where(G > 0.5, 0.0, 1.0 - P)
    u = float(G.mean())
    o_fg = _s_object_half(fg[G > 0.5]) if np.any(G > 0.5) else 0.0
    o_bg = _s_object_half(bg[G <= 0.5]) if np.any(G <= 0.5) else 0.0
    return u * o_fg + (1.0 - u) * o_bg


def _centroid(G: np.ndarray) -> tuple[int, int]:
    """1-based centroid with round-half-away-from-zero, as in the reference code."""
    rows, cols = G.shape
    total = G.sum()
    x = float(np.floor((G.sum(axis=0) * np.arange(1, cols + 1)).sum() / total + 0.5))
    y = float(np.floor((G.sum(axis=1) * np.arange(1, rows + 1)).sum() / total + 0.5))
    return int(y), int(x)


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = float(p.mean()), float(g.mean())
    if n > 1:
        sx = float(((p - x) ** 2).sum() / (n - 1))
        sy = float(((g - y) ** 2).sum() / (n - 1))
        sxy = float(((p - x) * (g - y)).sum() / (n - 1))
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0.0:
        return a / (b + _EPS)
    return 1.0 if b == 0.0 else 0.0


def _s_region(P: np.ndarray, G: np.ndarray) -> float:
    rows, cols = G.shape
    cy, cx = _centroid(G)
    area = rows * cols
    w1 = (cx * cy) / area
    w2 = ((cols - cx) * cy) / area
    w3 = (cx * (rows - cy)) / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [
        (P[:cy, :cx], G[:cy, :cx], w1),
        (P[:cy, cx:], G[:cy, cx:], w2),
        (P[cy:, :cx], G[cy:, :cx], w3),
        (P[cy:, cx:], G[cy:, cx:], w4),
    ]
    return float(sum(w * _region_ssim(p, g) for p, g, w in quads))


def s_measure(P: np.ndarray, G: np.ndarray) -> float:
    P, G = _pair(P, G)
    y = float(G.mean())
    if y == 0.0:
        return 1.0 - float(P.mean())
    if y == 1.0:
        return float(P.mean())
    s = S_ALPHA * _s_object(P, G) + (1.0 - S_ALPHA) * _s_region(P, G)
    return float(min(max(s, 0.0), 1.0))


def _e_threshold_score(bin_p: np.ndarray, G: np.ndarray) -> float:
    g_sum = G.sum()
    if g_sum == 0:
        return float((1.0 - bin_p).mean())
    if g_sum == G.size:
        return float(bin_p.mean())
    phi_p = bin_p - bin_p.mean()
    phi_g = G - G.mean()
    denom = phi_p * phi_p + phi_g * phi_g
    xi = np.where(denom > 0, 2.0 * phi_p * phi_g / np.where(denom > 0, denom, 1.0), 0.0)
    return float((((xi + 1.0) ** 2) / 4.0).mean())


def e_measure_mean(P: np.ndarray, G: np.ndarray) -> float:
    P, G = _pair(P, G)
    taus = (np.arange(N_THRESHOLDS, dtype=np.float64) + 0.5) / N_THRESHOLDS
    total = 0.0
    for tau in taus:
        total += _e_threshold_score((P >= tau).astype(np.float64), G)
    return total / N_THRESHOLDS


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricsReport:
    mae: float
    f_mean: float
    s_measure: float
    e_mean: float
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self, dataset: str = "") -> dict:
        return {
            "dataset": dataset,
            "n_images": len(self.per_image),
            "mae": self.mae,
            "f_mean": self.f_mean,
            "s_measure": self.s_measure,
            "e_mean": self.e_mean,
            "f_convention": "swept-mean-256",
            "per_image": self.per_image,
        }


def evaluate_pairs(pairs: list[tuple[str, np.ndarray, np.ndarray]]) -> MetricsReport:
    """Score (name, P, G) triples and average; per-image rows carry flags."""
    if not pairs:
        raise ShapeError("evaluate_pairs needs at least one (name, P, G) pair")
    rows = []
    for name, P, G in pairs:
        Pv, Gv = _pair(P, G)
        rows.append(
            {
                "name": name,
                "mae": mae(Pv, Gv),
                "f_mean": f_measure_mean(Pv, Gv),
                "s_measure": s_measure(Pv, Gv),
                "e_mean": e_measure_mean(Pv, Gv),
                "degenerate_gt": bool(Gv.sum() in (0, Gv.size)),
            }
        )
    return MetricsReport(
        mae=float(np.mean([r["mae"] for r in rows])),
        f_mean=float(np.mean([r["f_mean"] for r in rows])),
        s_measure=float(np.mean([r["s_measure"] for r in rows])),
        e_mean=float(np.mean([r["e_mean"] for r in rows])),
        per_image=rows,
    )
