"""Per-slice segmentation metrics: accuracy, IoU, boundary F1, boundary
displacement error.

Everything operates on 2D binary slices; evaluate() walks a volume z-slice
by z-slice and aggregates by unweighted mean. A foreground pixel is a
boundary pixel iff one of its 4-neighbors is background (out-of-image counts
as background). BF1 uses Euclidean distance with tolerance 4 px; BDE is the
symmetric mean nearest-boundary distance. Edge conventions: IoU of two empty
masks is 1; BF1 is 1 when both boundaries are empty and 0 when exactly one
is; BDE is 0 when both are empty and the slice diagonal when exactly one is.

The fast paths run on the exact squared distance transform. The *_bruteforce
twins recompute everything from first principles (all-pairs distances,
explicit loops) and must agree exactly; they exist as an oracle mode for
verification and stay deliberately naive.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeMismatch

BF1_TOLERANCE = 4.0


def _as_binary_slice(a, name):
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-d, got {arr.ndim}-d")
    return arr != 0


def _check_pair(pred, truth):
    p = _as_binary_slice(pred, "pred")
    t = _as_binary_slice(truth, "truth")
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} vs truth {t.shape}")
    return p, t


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _check_pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def accuracy(pred, truth) -> float:
    c = confusion(pred, truth)
    return (c.tp + c.tn) / c.total


def iou(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    union = int(np.count_nonzero(p | t))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & t)) / union


def boundary_pixels(mask) -> np.ndarray:
    """(n, 2) array of (row, col) boundary pixels in row-major order."""
    m = _as_binary_slice(mask, "mask")
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def _boundary_mask(m):
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def _nearest_sq_at(src_mask, query_pts):
    """Exact squared distance from each query pixel to the nearest src pixel."""
    dsq = kernels.edt_sq(src_mask)
    return dsq[query_pts[:, 0], query_pts[:, 1]]


def bf1(pred, truth, tolerance: float = BF1_TOLERANCE) -> float:
    p, t = _check_pair(pred, truth)
    bp = _boundary_mask(p)
    bt = _boundary_mask(t)
    np_any, nt_any = bool(bp.any()), bool(bt.any())
    if not np_any and not nt_any:
        return 1.0
    if np_any != nt_any:
        return 0.0
    tol_sq = tolerance * tolerance
    pred_pts = np.argwhere(bp)
    truth_pts = np.argwhere(bt)
    precision = float(np.mean(_nearest_sq_at(bt, pred_pts) <= tol_sq))
    recall = float(np.mean(_nearest_sq_at(bp, truth_pts) <= tol_sq))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def bde(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    bp = _boundary_mask(p)
    bt = _boundary_mask(t)
    np_any, nt_any = bool(bp.any()), bool(bt.any())
    if not np_any and not nt_any:
        return 0.0
    if np_any != nt_any:
        h, w = p.shape
        return math.sqrt(w * w + h * h)
    pred_pts = np.argwhere(bp)
    truth_pts = np.argwhere(bt)
    d_pred = np.sqrt(_nearest_sq_at(bt, pred_pts).astype(np.float64))
    d_truth = np.sqrt(_nearest_sq_at(bp, truth_pts).astype(np.float64))
    return 0.5 * (float(np.mean(d_pred)) + float(np.mean(d_truth)))


# ---------------------------------------------------------------------------
# brute-force oracle mode


def accuracy_bruteforce(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    agree = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            agree += int(p[i, j] == t[i, j])
    return agree / p.size


def iou_bruteforce(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    inter = union = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            inter += int(p[i, j] and t[i, j])
            union += int(p[i, j] or t[i, j])
    if union == 0:
        return 1.0
    return inter / union


def boundary_pixels_bruteforce(mask) -> np.ndarray:
    m = _as_binary_slice(mask, "mask")
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            up = m[i - 1, j] if i > 0 else False
            down = m[i + 1, j] if i + 1 < h else False
            left = m[i, j - 1] if j > 0 else False
            right = m[i, j + 1] if j + 1 < w else False
            if not (up and down and left and right):
                pts.append((i, j))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def _all_pairs_nearest_sq(query_pts, src_pts):
    out = np.empty(len(query_pts), dtype=np.int64)
    for qi, (qy, qx) in enumerate(query_pts):
        best = None
        for sy, sx in src_pts:
            d = (int(qy) - int(sy)) ** 2 + (int(qx) - int(sx)) ** 2
            if best is None or d < best:
                best = d
        out[qi] = best
    return out


def bf1_bruteforce(pred, truth, tolerance: float = BF1_TOLERANCE) -> float:
    p, t = _check_pair(pred, truth)
    pred_pts = boundary_pixels_bruteforce(p)
    truth_pts = boundary_pixels_bruteforce(t)
    if len(pred_pts) == 0 and len(truth_pts) == 0:
        return 1.0
    if (len(pred_pts) == 0) != (len(truth_pts) == 0):
        return 0.0
    tol_sq = tolerance * tolerance
    precision = float(np.mean(_all_pairs_nearest_sq(pred_pts, truth_pts) <= tol_sq))
    recall = float(np.mean(_all_pairs_nearest_sq(truth_pts, pred_pts) <= tol_sq))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def bde_bruteforce(pred, truth) -> float:
    p, t = _check_pair(pred, truth)
    pred_pts = boundary_pixels_bruteforce(p)
    truth_pts = boundary_pixels_bruteforce(t)
    if len(pred_pts) == 0 and len(truth_pts) == 0:
        return 0.0
    if (len(pred_pts) == 0) != (len(truth_pts) == 0):
        h, w = p.shape
        return math.sqrt(w * w + h * h)
    d_pred = np.sqrt(_all_pairs_nearest_sq(pred_pts, truth_pts).astype(np.float64))
    d_truth = np.sqrt(_all_pairs_nearest_sq(truth_pts, pred_pts).astype(np.float64))
    return 0.5 * (float(np.mean(d_pred)) + float(np.mean(d_truth)))


# ---------------------------------------------------------------------------
# volume evaluation


@dataclass
class MetricsReport:
    slices: list
    aggregate: dict
    slice_count: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "slices": self.slices,
                "aggregate": self.aggregate,
                "slice_count": self.slice_count,
            },
            indent=1,
        )


def evaluate(pred, truth) -> MetricsReport:
    """All four metrics per z-slice plus the unweighted per-slice mean."""
    pd = pred.data if hasattr(pred, "data") else np.asarray(pred)
    td = truth.data if hasattr(truth, "data") else np.asarray(truth)
    if pd.shape != td.shape:
        raise ShapeMismatch(f"pred {pd.shape} vs truth {td.shape}")
    slices = []
    for z in range(pd.shape[0]):
        p, t = pd[z], td[z]
        slices.append(
            {
                "z": z,
                "accuracy": accuracy(p, t),
                "iou": iou(p, t),
                "bf1": bf1(p, t),
                "bde": bde(p, t),
            }
        )
    aggregate = {
        key: float(np.mean([s[key] for s in slices]))
        for key in ("accuracy", "iou", "bf1", "bde")
    }
    return MetricsReport(slices=slices, aggregate=aggregate, slice_count=len(slices))
