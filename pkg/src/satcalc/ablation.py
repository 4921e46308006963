"""Decoder-depth sweep: retrain with 1..10 MLP layers and tabulate held-out scores."""
from dataclasses import replace

import numpy as np

from .dataset import TaskId
from .grid import Grid2D
from .metrics import EvalMaskSpec, evaluate_pairs
from .model import images_from, predict_maps
from .train import train_samples

COLUMNS = ("layers", "mae", "psnr_db", "r2", "rmse")


def predict_samples(params, samples, tasks, batch_size=8):
    """``[(id, {task: Grid2D})]`` for in-memory samples."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = np.concatenate([images_from(s.x, params.config.np_dtype) for s in chunk])
        maps = predict_maps(params, images, tasks)
        for b, s in enumerate(chunk):
            out.append((s.id, {t: Grid2D(maps[t][b].astype(np.float32), s.x.valid) for t in tasks}))
    return out


def depth_ablation(model_cfg, tcfg, train, val, seed, depths=range(1, 11), task=TaskId.H, on_depth=None):
    """One row per depth: pooled MAE, PSNR, R2 and RMSE of ``task`` on ``val``."""
    rows = []
    for depth in depths:
        cfg = replace(model_cfg, decoder_layers=int(depth))
        tasks = tuple(tcfg.tasks) if task in tcfg.tasks else tuple(tcfg.tasks) + (task,)
        params, _ = train_samples(cfg, replace(tcfg, tasks=tasks), train, val, seed)
        preds = dict(predict_samples(params, val, [task]))
        pairs = [(s.id, preds[s.id], s.y) for s in val]
        pooled = [r for sid, r in evaluate_pairs(pairs, [task], EvalMaskSpec()) if sid == "ALL"][0]
        row = (int(depth), pooled.mae, pooled.psnr_db, pooled.r2, pooled.rmse)
        rows.append(row)
        if on_depth is not None:
            on_depth(row)
    return rows


def ablation_tsv(rows):
    from .metrics import format_value

    lines = ["\t".join(COLUMNS)]
    lines += ["\t".join(format_value(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"
