"""Segmentation metrics: S-measure, weighted/mean F, E-measure, MAE.

Definitions follow the originating formulas (structure measure with object +
4-quadrant region terms; weighted F with Gaussian-smoothed, distance-decayed
errors and beta^2 = 1; mean F over 256 thresholds with beta^2 = 0.3; enhanced
alignment averaged over the same thresholds). Predictions are min-max
normalized per image before the thresholded metrics (mean F, E); pass
raw=True to skip that. Nearest-foreground ties in the weighted-F error
transfer are broken lexicographically so results are exactly reproducible.
"""

import dataclasses
import json
import pathlib

import numpy as np
import scipy.ndimage

from PIL import Image

from .errors import DataError, ShapeError

_THRESHOLDS = (np.arange(256, dtype=np.float64) + 1.0) / 256.0


def _as_pred(pred) -> np.ndarray:
    arr = np.asarray(pred, dtype=np.float64)
    return np.squeeze(arr)


def _as_gt(gt) -> np.ndarray:
    return np.squeeze(np.asarray(gt, dtype=np.float64)) > 0.5


def _check_pair(pred, gt):
    pred, gt = _as_pred(pred), _as_gt(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(
            f"pred/gt must be matching 2-d masks, got {pred.shape} and {gt.shape}"
        )
    return pred, gt


def _normalize(pred: np.ndarray) -> np.ndarray:
    mn, mx = pred.min(), pred.max()
    if mx > mn:
        return (pred - mn) / (mx - mn)
    return pred


def mae(pred, gt) -> float:
    """Mean absolute error between a [0, 1] mask and a binary ground truth."""
    pred, gt = _check_pair(pred, gt)
    return float(np.abs(pred - gt.astype(np.float64)).mean())


def _std1(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def _s_object_half(values: np.ndarray) -> float:
    # The denominator is >= 1, so no epsilon is needed; keeping it exact makes
    # a perfect prediction score exactly 1.
    x = float(values.mean())
    return 2.0 * x / (x * x + 1.0 + _std1(values))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = float(pred.mean()), float(gt.mean())
    if n > 1:
        # a constant block has zero variance and covariance by definition;
        # deriving them from the rounded mean can leave ~1e-31 residue and
        # flip the exact-zero branches below
        const_p = bool((pred == pred.flat[0]).all())
        const_g = bool((gt == gt.flat[0]).all())
        sx = 0.0 if const_p else float(((pred - x) ** 2).sum()) / (n - 1)
        sy = 0.0 if const_g else float(((gt - y) ** 2).sum()) / (n - 1)
        if const_p or const_g:
            sxy = 0.0
        else:
            sxy = float(((pred - x) * (gt - y)).sum()) / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    # b == 0 forces a == 0 (Cauchy-Schwarz), so the split below is exhaustive;
    # dividing exactly instead of by b + eps keeps identical inputs at 1.
    if b != 0.0:
        return a / b
    return 1.0 if a == 0.0 else 0.0


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term.

    Degenerates to 1 - mean(pred) on empty ground truth and mean(pred) on
    all-foreground ground truth; the result is clamped to [0, 1].
    """
    pred, gt = _check_pair(pred, gt)
    y = float(gt.mean())
    if y == 0.0:
        return float(np.clip(1.0 - pred.mean(), 0.0, 1.0))
    if y == 1.0:
        return float(np.clip(pred.mean(), 0.0, 1.0))

    # Weighting by integer pixel counts with a single final division (instead
    # of pre-divided fractional weights) keeps both mixture terms exactly 1
    # for a perfect prediction; the difference is below 1e-15 either way.
    n_fg = int(gt.sum())
    o_fg = _s_object_half(pred[gt])
    o_bg = _s_object_half(1.0 - pred[~gt])
    s_object = (n_fg * o_fg + (gt.size - n_fg) * o_bg) / gt.size

    rows, cols = gt.shape
    col_idx = np.arange(1, cols + 1, dtype=np.float64)
    row_idx = np.arange(1, rows + 1, dtype=np.float64)
    cx = _round_half_up(float((gt.sum(axis=0) * col_idx).sum()) / n_fg)
    cy = _round_half_up(float((gt.sum(axis=1) * row_idx).sum()) / n_fg)
    quads = (
        (pred[:cy, :cx], gt[:cy, :cx]),
        (pred[:cy, cx:], gt[:cy, cx:]),
        (pred[cy:, :cx], gt[cy:, :cx]),
        (pred[cy:, cx:], gt[cy:, cx:]),
    )
    s_region = sum(
        p.size * _region_ssim(p, g.astype(np.float64)) for p, g in quads
    ) / gt.size

    score = alpha * s_object + (1.0 - alpha) * s_region
    return float(np.clip(np.nan_to_num(score), 0.0, 1.0))


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - half
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _nearest_fg_errors(error: np.ndarray, gt: np.ndarray):
    """(distance to nearest fg, error at that fg) per pixel, lexicographic ties.

    Brute force over foreground pixels; fine at desk scale and it pins the
    tie-breaking (smallest row, then column) that library distance transforms
    leave unspecified.
    """
    fg = np.argwhere(gt)  # row-major order = lexicographic
    coords = np.argwhere(np.ones_like(gt))
    nearest = np.empty(len(coords), dtype=np.int64)
    best = np.empty(len(coords), dtype=np.float64)
    for start in range(0, len(coords), 1024):
        block = coords[start:start + 1024]
        d2 = ((block[:, None, :] - fg[None, :, :]) ** 2).sum(axis=2)
        idx = d2.argmin(axis=1)  # first minimum = lexicographic smallest
        nearest[start:start + 1024] = idx
        best[start:start + 1024] = d2[np.arange(len(block)), idx]
    dist = np.sqrt(best).reshape(gt.shape)
    fg_err = error[fg[nearest, 0], fg[nearest, 1]].reshape(gt.shape)
    return dist, fg_err


def weighted_f(pred, gt) -> float:
    """Weighted F-score (beta^2 = 1) with dependency and decay weighting.

    Foreground errors can borrow their Gaussian-smoothed neighborhood value
    when that is smaller; background errors are copied from the nearest
    foreground pixel and amplified by a distance decay. Empty ground truth
    scores 1 when the prediction is empty at threshold 0.5, else 0.
    """
    pred, gt = _check_pair(pred, gt)
    if not gt.any():
        return 1.0 if not (pred >= 0.5).any() else 0.0
    gtf = gt.astype(np.float64)
    error = np.abs(pred - gtf)
    dist, fg_err = _nearest_fg_errors(error, gt)
    et = np.where(gt, error, fg_err)
    ea = scipy.ndimage.correlate(et, _gaussian_kernel(), mode="constant", cval=0.0)
    min_e_ea = np.where(gt & (ea < error), ea, error)
    decay = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e_ea * decay
    tpw = gtf.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - float(ew[gt].mean())
    precision = tpw / (tpw + fpw) if tpw + fpw > 0.0 else 0.0
    if recall + precision == 0.0:
        return 0.0
    return float(2.0 * recall * precision / (recall + precision))


def _threshold_counts(pred: np.ndarray, gt: np.ndarray):
    """(tp, fp, fn) at each of the 256 thresholds, vectorized."""
    binarized = pred[None, :, :] >= _THRESHOLDS[:, None, None]
    tp = (binarized & gt).sum(axis=(1, 2)).astype(np.float64)
    fp = (binarized & ~gt).sum(axis=(1, 2)).astype(np.float64)
    fn = (~binarized & gt).sum(axis=(1, 2)).astype(np.float64)
    return binarized, tp, fp, fn


def mean_f(pred, gt, raw: bool = False) -> float:
    """F-score with beta^2 = 0.3 averaged over 256 thresholds in (0, 1]."""
    pred, gt = _check_pair(pred, gt)
    if not raw:
        pred = _normalize(pred)
    binarized, tp, fp, fn = _threshold_counts(pred, gt)
    if not gt.any():
        empty = ~binarized.any(axis=(1, 2))
        return float(empty.astype(np.float64).mean())
    beta2 = 0.3
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = tp / (tp + fn)
    denom = beta2 * precision + recall
    f = np.divide((1.0 + beta2) * precision * recall, denom,
                  out=np.zeros_like(tp), where=denom > 0)
    return float(f.mean())


def e_measure(pred, gt, raw: bool = False) -> float:
    """Enhanced-alignment measure averaged over 256 thresholds in (0, 1].

    The per-threshold score is the plain mean of the enhanced alignment
    matrix; degenerate ground truths use the complement (empty) or identity
    (full) of the binarized prediction.
    """
    pred, gt = _check_pair(pred, gt)
    if not raw:
        pred = _normalize(pred)
    gtf = gt.astype(np.float64)
    n = gt.size
    binarized = (pred[None, :, :] >= _THRESHOLDS[:, None, None]).astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - binarized
        return float(enhanced.mean(axis=(1, 2)).mean())
    if gt.all():
        return float(binarized.mean(axis=(1, 2)).mean())
    d_gt = gtf - gtf.mean()
    d_fm = binarized - binarized.mean(axis=(1, 2), keepdims=True)
    num = 2.0 * d_gt[None] * d_fm
    den = d_gt[None] ** 2 + d_fm ** 2
    align = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.reshape(256, n).mean(axis=1).mean())


@dataclasses.dataclass
class MetricReport:
    s_alpha: float
    f_w: float
    f_m: float
    e_m: float
    mae: float
    per_image: tuple = ()
    unmatched: tuple = ()


METRIC_COLUMNS = ("s_alpha", "f_w", "f_m", "e_m", "mae")


def compute_all(pred, gt, raw: bool = False) -> dict:
    return {
        "s_alpha": s_measure(pred, gt),
        "f_w": weighted_f(pred, gt),
        "f_m": mean_f(pred, gt, raw=raw),
        "e_m": e_measure(pred, gt, raw=raw),
        "mae": mae(pred, gt),
    }


def _mask_files(directory) -> dict:
    directory = pathlib.Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.suffix.lower() in exts}


def _load_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as e:
        raise DataError(f"cannot read mask {path}: {e}") from e


def evaluate_dataset(pred_dir, gt_dir, raw: bool = False) -> MetricReport:
    """Score every name-matched mask pair; means are unweighted.

    Files present on only one side are collected in ``unmatched`` (the CLI
    reports each); no common names at all is an error, as is a shape mismatch
    within a pair.
    """
    preds, gts = _mask_files(pred_dir), _mask_files(gt_dir)
    common = sorted(set(preds) & set(gts))
    unmatched = tuple(sorted(set(preds) ^ set(gts)))
    if not common:
        raise DataError(
            f"no matching mask names between {pred_dir} and {gt_dir}"
        )
    rows = []
    for stem in common:
        pred = _load_gray(preds[stem]) / 255.0
        gt = _load_gray(gts[stem]) >= 128.0
        if pred.shape != gt.shape:
            raise DataError(
                f"mask shape mismatch for '{stem}': {pred.shape} vs {gt.shape}"
            )
        scores = compute_all(pred, gt, raw=raw)
        rows.append((stem, *(scores[c] for c in METRIC_COLUMNS)))
    means = [float(np.mean([r[i + 1] for r in rows])) for i in range(5)]
    return MetricReport(*means, per_image=tuple(rows), unmatched=unmatched)


def write_report_csv(report: MetricReport, path) -> None:
    lines = ["image," + ",".join(METRIC_COLUMNS)]
    for row in report.per_image:
        lines.append(row[0] + "," + ",".join(f"{v:.6f}" for v in row[1:]))
    mean_row = (report.s_alpha, report.f_w, report.f_m, report.e_m, report.mae)
    lines.append("MEAN," + ",".join(f"{v:.6f}" for v in mean_row))
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def write_report_json(report: MetricReport, path) -> None:
    payload = {
        "mean": {c: getattr(report, c) for c in METRIC_COLUMNS},
        "per_image": [
            {"image": row[0], **dict(zip(METRIC_COLUMNS, row[1:]))}
            for row in report.per_image
        ],
        "unmatched": list(report.unmatched),
    }
    pathlib.Path(path).write_text(json.dumps(payload, indent=2) + "\n")
