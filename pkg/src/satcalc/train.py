"""Weighted multi-task L1 training: loss, reverse-mode gradients, Adam,
plateau LR decay, early stopping and the epoch loop."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .dataset import ALL_TASKS, AugmentSpec, TaskId, _rng, augment, load_sample
from .model import backbone_forward, images_from, init_params, task_bwd, task_fwd, tiny_config

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {
    TaskId.NDVI: 0.0386,
    TaskId.GNDVI: 0.0440,
    TaskId.SAVI: 0.0501,
    TaskId.EVI: 0.1700,
    TaskId.NDWI: 0.0418,
    TaskId.H: 0.2052,
    TaskId.AGB: 0.2121,
    TaskId.CS: 0.2381,
}


@dataclass(frozen=True)
class LossWeights:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def __post_init__(self):
        w = {TaskId.parse(k): float(v) for k, v in self.weights.items()}
        if any(v <= 0 for v in w.values()):
            raise ValueError("loss weights must be positive")
        object.__setattr__(self, "weights", w)

    def __getitem__(self, task):
        return self.weights[TaskId.parse(task)]

    def scaled(self, factor, task=None):
        """All weights (or just ``task``'s) multiplied by ``factor``."""
        w = dict(self.weights)
        for t in ([TaskId.parse(task)] if task is not None else list(w)):
            w[t] = w[t] * factor
        return LossWeights(w)

    def total(self):
        return sum(self.weights.values())


def _as_arrays(grid_or_array):
    return getattr(grid_or_array, "values", grid_or_array)


def weighted_loss(preds, targets, mask, w=LossWeights()):
    """``(total, per_task)``; per-task loss is the masked mean absolute error."""
    mask = np.asarray(mask, bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss mask selects no pixels")
    per_task = {}
    total = 0.0
    for t in sorted(preds, key=lambda t: t.value):
        p = np.asarray(_as_arrays(preds[t]), np.float64)
        y = np.asarray(_as_arrays(targets[t]), np.float64)
        if p.shape != mask.shape or y.shape != mask.shape:
            raise ValueError(f"task {t.name}: shapes {p.shape}, {y.shape} vs mask {mask.shape}")
        per_task[t] = float(np.abs(p - y)[mask].sum() / n)
        total += w[t] * per_task[t]
    return total, per_task


# ---------------------------------------------------------------------------
# gradients


def _stack_batch(batch, dtype):
    images = np.concatenate([images_from(s.x, dtype) for s in batch])
    masks = np.stack([s.loss_mask for s in batch])
    return images, masks


def _task_pass(params, task, feats, targets, masks, weight, with_grad):
    maps, cache = task_fwd(params, task, feats)
    err = maps.astype(np.float64) - targets
    counts = masks.reshape(len(masks), -1).sum(1).astype(np.float64)
    per_sample = (np.abs(err) * masks).reshape(len(masks), -1).sum(1) / counts
    if not with_grad:
        return per_sample, None, None
    B = len(masks)
    scale = weight / (B * counts)
    dmaps = (np.sign(err) * masks * scale[:, None, None]).astype(maps.dtype)
    grads, dprompt = task_bwd(params, task, cache, dmaps)
    return per_sample, grads, dprompt


def batch_pass(params, batch, tasks, w=LossWeights(), threads=1, feats=None, with_grad=True):
    """Forward (and optionally backward) over a batch.

    Returns ``(loss, per_task, grads)`` where ``loss`` is the batch mean of the
    weighted per-sample loss.  Tasks run concurrently when ``threads > 1``;
    their gradient groups are disjoint and the scalar loss is summed in task
    order, so results do not depend on ``threads``.
    """
    if not batch:
        raise ValueError("empty batch")
    tasks = sorted({TaskId.parse(t) for t in tasks}, key=lambda t: t.value)
    cfg = params.config
    images, masks = _stack_batch(batch, cfg.np_dtype)
    if np.any(masks.reshape(len(batch), -1).sum(1) == 0):
        raise ValueError("a sample in the batch has an empty loss mask")
    if feats is None:
        feats = backbone_forward(cfg, params.backbone, images)
    targets = {t: np.stack([s.y[t].values for s in batch]).astype(np.float64) for t in tasks}

    def run(t):
        return _task_pass(params, t, feats, targets[t], masks, w[t], with_grad)

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    per_task = {}
    per_sample_total = np.zeros(len(batch))
    for t, (ps, _, _) in zip(tasks, results):
        per_task[t] = float(ps.mean())
        per_sample_total += w[t] * ps
    loss = float(per_sample_total.mean())
    if not with_grad:
        return loss, per_task, None

    grads = {k: np.zeros_like(v) for k, v in params.trainable.items()}
    prompt = grads["prompt"]
    for t, (_, g, dprompt) in zip(tasks, results):
        grads.update(g)
        prompt[t.ordinal] = dprompt
    return loss, per_task, grads


def backward(params, batch, tasks, w=LossWeights(), threads=1, feats=None):
    """``(loss, grads)``: exact gradients of the batch-mean weighted L1 loss.

    ``grads`` covers exactly the trainable groups (prompt table, adapters,
    decoders).  Groups of tasks outside ``tasks`` are zero.  The derivative of
    ``|e|`` at ``e == 0`` is taken as 0.
    """
    loss, _, grads = batch_pass(params, batch, tasks, w, threads, feats)
    return loss, grads


# ---------------------------------------------------------------------------
# optimiser and schedules


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, lr, beta1, beta2, eps)

    def copy(self):
        return replace(self, m={k: v.copy() for k, v in self.m.items()}, v={k: v.copy() for k, v in self.v.items()})


def adam_step(state, params, grads, inplace=False):
    """Bias-corrected Adam update.  Returns ``(params, state)``; the inputs are
    left untouched unless ``inplace``."""
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise ValueError(f"gradient groups do not match parameters: {sorted(missing)[:5]}")
    if not inplace:
        params = {k: v.copy() for k, v in params.items()}
        state = state.copy()
    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    for k in sorted(params):
        p, g = params[k], grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        ty = p.dtype.type
        kernels.adam_update(
            p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
            state.m[k].reshape(-1), state.v[k].reshape(-1),
            ty(state.lr), ty(state.beta1), ty(state.beta2), ty(state.eps), ty(bc1), ty(bc2),
            ty(1.0 - state.beta1), ty(1.0 - state.beta2),
        )
    state.step = step
    return params, state


@dataclass(frozen=True)
class PlateauState:
    best: float = math.inf
    bad: int = 0
    patience: int = 1
    factor: float = 0.5
    min_delta: float = 0.0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("plateau factor must lie in (0, 1)")


def plateau_step(s, val_loss, lr):
    """Returns ``(new_lr, new_state)``; decays once the bad-epoch count exceeds patience."""
    if not math.isfinite(val_loss):
        raise ValueError(f"non-finite validation loss {val_loss}")
    if val_loss < s.best - s.min_delta:
        return lr, replace(s, best=val_loss, bad=0)
    bad = s.bad + 1
    if bad > s.patience:
        return lr * s.factor, replace(s, bad=0)
    return lr, replace(s, bad=bad)


@dataclass(frozen=True)
class EarlyStopState:
    best: float = math.inf
    bad: int = 0
    patience: int = 3


def early_stop_step(s, val_loss):
    """Returns ``(stop, new_state)``; stop once more than ``patience`` epochs in a row fail to improve."""
    if not math.isfinite(val_loss):
        raise ValueError(f"non-finite validation loss {val_loss}")
    if val_loss < s.best:
        return False, replace(s, best=val_loss, bad=0)
    bad = s.bad + 1
    return bad > s.patience, replace(s, bad=bad)


# ---------------------------------------------------------------------------
# epoch loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_patience: int = 1
    plateau_factor: float = 0.5
    early_stop_patience: int = 3
    early_stopping: bool = True
    augment: bool = True
    scale_low: float = 0.5
    scale_high: float = 2.0
    tasks: tuple = ALL_TASKS
    weights: LossWeights = field(default_factory=LossWeights)
    threads: int = 1

    def augment_spec(self):
        return AugmentSpec((self.scale_low, self.scale_high), (0, 1, 2, 3), self.augment)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    per_task: dict


def history_tsv(history, tasks):
    head = ["epoch", "train_loss", "val_loss", "lr"] + [f"val_{t.name}" for t in tasks]
    rows = ["\t".join(head)]
    for r in history:
        cells = [str(r.epoch), repr(r.train_loss), repr(r.val_loss), repr(r.lr)]
        cells += [repr(r.per_task[t]) for t in tasks]
        rows.append("\t".join(cells))
    return "\n".join(rows) + "\n"


def evaluate_loss(params, samples, tasks, w, batch_size=8, threads=1, feats=None):
    """Sample-mean weighted loss and per-task losses over ``samples``."""
    total = 0.0
    per_task = {t: 0.0 for t in tasks}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        f = None if feats is None else np.concatenate(feats[i:i + batch_size])
        loss, pt, _ = batch_pass(params, chunk, tasks, w, threads, f, with_grad=False)
        total += loss * len(chunk)
        for t in tasks:
            per_task[t] += pt[t] * len(chunk)
    n = len(samples)
    return total / n, {t: v / n for t, v in per_task.items()}


def _features(params, samples):
    cfg = params.config
    return [backbone_forward(cfg, params.backbone, images_from(s.x, cfg.np_dtype)) for s in samples]


def train_samples(model_cfg, tcfg, train, val, seed, params=None, on_epoch=None):
    """Train on in-memory sample lists; returns ``(params, history)``."""
    if not train or not val:
        raise ValueError("training needs non-empty train and val splits")
    tasks = sorted({TaskId.parse(t) for t in tcfg.tasks}, key=lambda t: t.value)
    params = params or init_params(model_cfg, seed)
    state = AdamState.fresh(params.trainable, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    plateau = PlateauState(patience=tcfg.plateau_patience, factor=tcfg.plateau_factor)
    stopper = EarlyStopState(patience=tcfg.early_stop_patience)
    spec = tcfg.augment_spec()
    cached = None if spec.enabled else _features(params, train)
    val_feats = _features(params, val)
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        order = _rng(seed, 3, epoch).permutation(len(train))
        lr_used = state.lr
        seen = 0
        running = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            if spec.enabled:
                batch = [augment(train[i], spec, _rng_seed(seed, epoch, i)) for i in idx]
                feats = None
            else:
                batch = [train[i] for i in idx]
                feats = np.concatenate([cached[i] for i in idx])
            loss, _, grads = batch_pass(params, batch, tasks, tcfg.weights, tcfg.threads, feats)
            adam_step(state, params.trainable, grads, inplace=True)
            running += loss * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss, val_tasks = evaluate_loss(params, val, tasks, tcfg.weights, tcfg.batch_size,
                                            tcfg.threads, val_feats)
        rec = EpochRecord(epoch, train_loss, val_loss, lr_used, val_tasks)
        history.append(rec)
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr_used)
        if on_epoch is not None:
            on_epoch(rec)
        state.lr, plateau = plateau_step(plateau, val_loss, state.lr)
        stop, stopper = early_stop_step(stopper, val_loss)
        if stop and tcfg.early_stopping:
            log.info("early stop after epoch %d", epoch)
            break
    return params, history


def _rng_seed(seed, epoch, index):
    from .dataset import mix_seed

    return mix_seed(mix_seed(seed, epoch), index)


def train_loop(model_cfg, tcfg, manifest, seed, on_epoch=None):
    """Train on the manifest's train split, validating on its val split."""
    train = [load_sample(manifest, r) for r in manifest.split("train")]
    val = [load_sample(manifest, r) for r in manifest.split("val")]
    return train_samples(model_cfg, tcfg, train, val, seed, on_epoch=on_epoch)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    n_coords: int
    loss: float

    def __str__(self):
        return (f"max relative error {self.max_rel_err:.3e} at {self.worst} "
                f"over {self.n_coords} coordinates (loss {self.loss:.6g})")


def grad_check_problem(cfg, seed, tasks, n_samples=2):
    """Random params and a batch whose targets sit well away from the initial
    predictions, so no |e| kink lies within a finite-difference step."""
    from .dataset import Sample
    from .grid import BandStack, Grid2D

    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    hw = cfg.input_hw
    xs = [BandStack.from_array(rng.uniform(0.0, 1.0, (4, hw, hw)).astype(np.float32)) for _ in range(n_samples)]
    images = np.concatenate([images_from(x, cfg.np_dtype) for x in xs])
    feats = backbone_forward(cfg, params.backbone, images)
    batch = []
    for b, x in enumerate(xs):
        y = {}
        for t in ALL_TASKS:
            base = task_fwd(params, t, feats[b:b + 1])[0][0]
            offset = rng.choice([-1.0, 1.0], size=base.shape) * rng.uniform(0.5, 1.5, size=base.shape)
            y[t] = Grid2D((base + offset).astype(np.float32), np.ones(base.shape, bool))
        batch.append(Sample(f"g{b}", x, y))
    return params, batch


def grad_check(cfg=None, seed=0, tasks=(TaskId.NDVI, TaskId.H), step=1e-5, w=LossWeights(),
               corrupt=None, floor=1e-6, zero_input=False):
    """Compare every analytic gradient coordinate with a central difference.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  ``corrupt`` names a
    parameter group whose analytic gradient is deliberately perturbed.
    """
    cfg = cfg or tiny_config()
    tasks = [TaskId.parse(t) for t in tasks]
    params, batch = grad_check_problem(cfg, seed, tasks)
    if zero_input:
        from .dataset import Sample
        from .grid import BandStack, Grid2D

        hw = cfg.input_hw
        zero = Grid2D(np.zeros((hw, hw), np.float32), np.ones((hw, hw), bool))
        batch = [Sample(s.id, BandStack((zero,) * 4), {t: zero for t in ALL_TASKS}) for s in batch]
    images, _ = _stack_batch(batch, cfg.np_dtype)
    feats = backbone_forward(cfg, params.backbone, images)
    loss, grads = backward(params, batch, tasks, w, feats=feats)
    if corrupt is not None:
        g = grads[corrupt]
        grads[corrupt] = g * 1.5 + 0.1 * np.sign(g + (g == 0))

    def f():
        return batch_pass(params, batch, tasks, w, feats=feats, with_grad=False)[0]

    worst, worst_name, n = 0.0, "", 0
    for name in sorted(params.trainable):
        arr = params.trainable[name]
        flat = arr.reshape(-1)
        ga = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = f()
            flat[i] = old - step
            down = f()
            flat[i] = old
            num = (up - down) / (2 * step)
            rel = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            if not np.isfinite(rel) or rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
            n += 1
    return GradCheckReport(float(worst), worst_name, n, float(loss))
