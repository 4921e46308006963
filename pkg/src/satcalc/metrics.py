"""Evaluation protocol: MAE, RMSE, nMAE, bias, R2, PSNR and tree-cover IoU
under the vegetation / height-cap masking rules."""
import math
from dataclasses import dataclass

import numpy as np

from .dataset import TaskId

HEIGHT_LIKE = frozenset({TaskId.H})


class EmptySupportError(ValueError):
    pass


@dataclass(frozen=True)
class EvalMaskSpec:
    veg_mask: np.ndarray = None
    max_gt: float = 60.0
    nmae_min_gt: float = 2.0
    iou_threshold: float = 2.0
    psnr_peak: float = None

    def __post_init__(self):
        if not self.max_gt > self.nmae_min_gt > 0:
            raise ValueError("need max_gt > nmae_min_gt > 0")


@dataclass(frozen=True)
class MetricReport:
    task: TaskId
    n_pixels: int
    mae: float
    rmse: float
    bias: float
    r2: float
    psnr_db: float
    nmae_pct: float = None
    tree_cover_iou: float = None


def _support(pred, gt, mask):
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise EmptySupportError("evaluation mask is empty")
    return pred[mask], gt[mask]


def evaluation_mask(gt, spec=EvalMaskSpec(), task=TaskId.H):
    """Pixels that count: valid, inside the vegetation mask, and below the
    height cap for height-like tasks."""
    mask = gt.valid.copy()
    if spec.veg_mask is not None:
        veg = np.asarray(spec.veg_mask, bool)
        if veg.shape != mask.shape:
            raise ValueError(f"veg_mask shape {veg.shape} != grid shape {mask.shape}")
        mask &= veg
    if TaskId.parse(task) in HEIGHT_LIKE:
        mask &= gt.values < spec.max_gt
    return mask


def error_stats(pred, gt, mask=None):
    """``(mae, rmse, bias)`` of ``pred - gt`` over the mask."""
    p, g = _support(pred, gt, mask)
    e = p - g
    return float(np.abs(e).mean()), float(math.sqrt((e * e).mean())), float(e.mean())


def nmae(pred, gt, mask=None, min_gt=2.0):
    """Mean of ``|pred - gt| / gt`` over pixels with ``gt > min_gt``, in percent."""
    p, g = _support(pred, gt, mask)
    keep = g > min_gt
    if not keep.any():
        raise EmptySupportError(f"no pixels with ground truth above {min_gt}")
    return float(100.0 * (np.abs(p[keep] - g[keep]) / g[keep]).mean())


def r2_score(pred, gt, mask=None):
    p, g = _support(pred, gt, mask)
    ss_tot = ((g - g.mean()) ** 2).sum()
    if g.size < 2 or ss_tot == 0:
        raise EmptySupportError("R2 undefined for constant ground truth")
    return float(1.0 - ((p - g) ** 2).sum() / ss_tot)


def psnr(pred, gt, mask=None, peak=1.0):
    """``10 log10(peak^2 / mse)``; a perfect match gives ``inf``."""
    if not peak > 0:
        raise ValueError(f"PSNR peak must be positive, got {peak}")
    p, g = _support(pred, gt, mask)
    mse = ((p - g) ** 2).mean()
    if mse == 0:
        return math.inf
    return float(10.0 * math.log10(peak * peak / mse))


def tree_cover_iou(pred_h, gt_h, mask=None, threshold=2.0):
    """IoU of the ``> threshold`` masks; two empty masks score 1.0."""
    p, g = _support(pred_h, gt_h, mask)
    pm = p > threshold
    gm = g > threshold
    union = (pm | gm).sum()
    if union == 0:
        return 1.0
    return float((pm & gm).sum() / union)


def default_peak(gt_values):
    """Dynamic range of the ground truth; falls back to 1.0 when it is flat."""
    g = np.asarray(gt_values, np.float64)
    rng = float(g.max() - g.min()) if g.size else 0.0
    return rng if rng > 0 else 1.0


def _maybe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except EmptySupportError:
        return math.nan


def evaluate_task(pred, gt, task, spec=EvalMaskSpec()):
    """Every applicable metric for one task.  nMAE and IoU are reported for H only."""
    task = TaskId.parse(task)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = evaluation_mask(gt, spec, task) & pred.valid
    if not mask.any():
        raise EmptySupportError(f"{task.name}: evaluation mask is empty")
    pv, gv = pred.values, gt.values
    mae, rmse, bias = error_stats(pv, gv, mask)
    peak = spec.psnr_peak if spec.psnr_peak is not None else default_peak(gv[mask])
    height = task in HEIGHT_LIKE
    return MetricReport(
        task=task,
        n_pixels=int(mask.sum()),
        mae=mae,
        rmse=rmse,
        bias=bias,
        r2=_maybe(r2_score, pv, gv, mask),
        psnr_db=psnr(pv, gv, mask, peak),
        nmae_pct=_maybe(nmae, pv, gv, mask, spec.nmae_min_gt) if height else None,
        tree_cover_iou=tree_cover_iou(pv, gv, mask, spec.iou_threshold) if height else None,
    )


REPORT_COLUMNS = ("sample", "task", "n_pixels", "mae", "rmse", "nmae_pct", "bias", "r2", "psnr_db", "tree_cover_iou")


def format_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def report_row(sample, r):
    cells = (sample, r.task.name, r.n_pixels, r.mae, r.rmse, r.nmae_pct, r.bias, r.r2, r.psnr_db, r.tree_cover_iou)
    return "\t".join(format_value(c) for c in cells)


def evaluate_pairs(pairs, tasks, spec=EvalMaskSpec()):
    """Per-sample and pooled ("ALL") reports.

    ``pairs`` is a list of ``(sample_id, {task: pred Grid2D}, {task: gt Grid2D})``.
    Unless ``spec.psnr_peak`` is set, each task's PSNR peak is the ground-truth
    range over the whole evaluation set, shared by every row of that task.
    """
    from .grid import Grid2D

    rows = []
    for t in tasks:
        masks = [evaluation_mask(gt[t], spec, t) & pred[t].valid for _, pred, gt in pairs]
        pooled_gt = np.concatenate([gt[t].values[m] for (_, _, gt), m in zip(pairs, masks)])
        if pooled_gt.size == 0:
            continue
        tspec = spec if spec.psnr_peak is not None else _with_peak(spec, default_peak(pooled_gt))
        for (sid, pred, gt), m in zip(pairs, masks):
            if m.any():
                rows.append((sid, evaluate_task(pred[t], gt[t], t, tspec)))
        pooled_pred = np.concatenate([pred[t].values[m] for (_, pred, _), m in zip(pairs, masks)])
        pg = Grid2D(pooled_gt[None].astype(np.float32), np.ones((1, pooled_gt.size), bool))
        pp = Grid2D(pooled_pred[None].astype(np.float32), np.ones((1, pooled_pred.size), bool))
        all_spec = _with_peak(EvalMaskSpec(None, spec.max_gt, spec.nmae_min_gt, spec.iou_threshold), tspec.psnr_peak)
        rows.append(("ALL", evaluate_task(pp, pg, t, all_spec)))
    return rows


def _with_peak(spec, peak):
    return EvalMaskSpec(spec.veg_mask, spec.max_gt, spec.nmae_min_gt, spec.iou_threshold, peak)


def report_tsv(rows):
    lines = ["\t".join(REPORT_COLUMNS)] + [report_row(sid, r) for sid, r in rows]
    return "\n".join(lines) + "\n"
