"""``satcalc`` command line.

Exit status: 0 success, 1 user error (bad flags, unreadable or malformed
inputs), 2 internal error.  Outputs are written to temp files and renamed, so
a failed command leaves no partial files behind.
"""
import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensorio
from .dataset import (ALL_TASKS, TaskId, extract_patches, load_sample, load_targets, mix_seed,
                      read_manifest, save_sample, split_manifest, synth_scene, write_manifest)
from .ecovars import CarbonParams, agb_from_height, carbon_stock, coeffs_for
from .grid import Grid2D
from .indices import IndexKind, IndexParams, compute_index

log = logging.getLogger("satcalc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


USER_ERRORS = (UsageError, ValueError, FileNotFoundError, PermissionError, IsADirectoryError,
               NotADirectoryError, FileExistsError)


def _default_threads():
    raw = os.environ.get("SATCALC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_globals(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d if suppress else 0, help="random seed")
    p.add_argument("--threads", type=int, default=d if suppress else _default_threads(),
                   help="worker threads (default: $SATCALC_THREADS or 1)")
    p.add_argument("--verbose", action="store_true", default=d if suppress else False)


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 256x256, got {text!r}") from None
    return h, w


def _fractions(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split fractions {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated fractions")
    return vals


def _depths(text):
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-"))
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad depth list {text!r}") from None


def build_parser():
    parser = _Parser(prog="satcalc", description="Multi-task quantitative inversion toolkit")
    _add_globals(parser, suppress=False)
    common = _Parser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("indices", parents=[common], help="spectral index maps")
    isub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    c = isub.add_parser("compute", parents=[common])
    c.add_argument("--in", dest="inp", required=True, help="4-band SATC file (4, H, W)")
    c.add_argument("--kind", required=True, help="ndvi, gndvi, savi, evi or ndwi")
    c.add_argument("--out", required=True)
    defaults = IndexParams()
    c.add_argument("--savi-l", type=float, default=defaults.savi_L)
    c.add_argument("--evi-g", type=float, default=defaults.evi_G)
    c.add_argument("--evi-c1", type=float, default=defaults.evi_C1)
    c.add_argument("--evi-c2", type=float, default=defaults.evi_C2)
    c.add_argument("--evi-l", type=float, default=defaults.evi_L)

    p = sub.add_parser("ecovars", parents=[common], help="biomass and carbon stock from canopy height")
    p.add_argument("--height", required=True)
    p.add_argument("--forest-type", default="general")
    p.add_argument("--cf", type=float, default=CarbonParams().CF)
    p.add_argument("--height-cap", type=float, default=None, help="clip heights (m) before the biomass model")
    p.add_argument("--out-agb", required=True)
    p.add_argument("--out-cs", required=True)

    p = sub.add_parser("dataset", parents=[common], help="synthesise scenes and build sample sets")
    dsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = dsub.add_parser("synth", parents=[common])
    s.add_argument("--scenes", type=int, default=1)
    s.add_argument("--size", type=_size, default=(256, 256))
    s.add_argument("--out", required=True)
    b = dsub.add_parser("build", parents=[common])
    b.add_argument("--bands", action="append", required=True, help="repeatable; paired with --height")
    b.add_argument("--height", action="append", required=True)
    b.add_argument("--patch", type=int, default=32)
    b.add_argument("--n", type=int, default=100, help="patches per scene")
    b.add_argument("--max-nodata", type=float, default=0.5)
    b.add_argument("--split", type=_fractions, default=(0.8, 0.1, 0.1))
    b.add_argument("--forest-type", default="general")
    b.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train the multi-task model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key=value file with model and training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--depth-sweep", type=_depths, help="e.g. 1-10: retrain per decoder depth")
    p.add_argument("--report", help="depth-sweep report (TSV)")

    p = sub.add_parser("eval", parents=[common], help="score predictions against targets")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", help="train, val, test or all")
    p.add_argument("--tasks", default="all")
    p.add_argument("--max-gt", type=float, default=60.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", parents=[common], help="run a checkpoint on rasters")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bands")
    src.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--tasks", default="all")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--tiny", action="store_true", help="8x8 input, d=8, 2 heads (the only supported size)")
    p.add_argument("--tasks", default="NDVI,H")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--corrupt", help="parameter group whose analytic gradient is perturbed")
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_indices(args):
    kind = IndexKind.parse(args.kind)
    params = IndexParams(args.savi_l, args.evi_g, args.evi_c1, args.evi_c2, args.evi_l)
    x = tensorio.read_bands(args.inp)
    tensorio.write_grid(args.out, compute_index(kind, x, params))


def cmd_ecovars(args):
    coeffs = coeffs_for(args.forest_type)
    h = tensorio.read_grid(args.height)
    agb = agb_from_height(h, coeffs, cap=args.height_cap)
    cs = carbon_stock(agb, CarbonParams(args.cf))
    tensorio.write_grid(args.out_agb, agb)
    tensorio.write_grid(args.out_cs, cs)


def cmd_dataset(args):
    os.makedirs(args.out, exist_ok=True)
    if args.action == "synth":
        h, w = args.size
        if args.scenes < 1:
            raise UsageError("--scenes must be >= 1")

        def one(i):
            x, hg = synth_scene(mix_seed(args.seed, i), h, w)
            tensorio.write_bands(os.path.join(args.out, f"scene{i:03d}.bands.satc"), x)
            tensorio.write_grid(os.path.join(args.out, f"scene{i:03d}.height.satc"), hg)

        _run(one, range(args.scenes), args.threads)
        return
    if len(args.bands) != len(args.height):
        raise UsageError("--bands and --height must be given the same number of times")
    coeffs = coeffs_for(args.forest_type)

    def scene(i):
        x = tensorio.read_bands(args.bands[i])
        hg = tensorio.read_grid(args.height[i])
        stem = os.path.basename(args.bands[i]).split(".")[0]
        samples = extract_patches(x, hg, args.patch, args.n, mix_seed(args.seed, i),
                                  args.max_nodata, prefix=f"{stem}_", c=coeffs)
        return [(s.id, save_sample(args.out, s)) for s in samples]

    written = [item for chunk in _run(scene, range(len(args.bands)), args.threads) for item in chunk]
    ids = [sid for sid, _ in written]
    paths = [p for _, p in written]
    m = split_manifest(ids, args.split, args.seed, paths=paths, patch_size=args.patch,
                       params={"forest_type": coeffs.forest_type.value, "max_nodata_frac": args.max_nodata,
                               "scenes": len(args.bands)})
    write_manifest(os.path.join(args.out, "manifest.tsv"), m)


def _run(fn, items, threads):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _load_configs(args):
    from .checkpoint import configs_from_mapping, read_kv

    mapping = read_kv(args.config) if args.config else {}
    model_cfg, tcfg = configs_from_mapping(mapping)
    from dataclasses import replace

    tcfg = replace(tcfg, threads=args.threads)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    return model_cfg, tcfg


def cmd_train(args):
    from .ablation import ablation_tsv, depth_ablation
    from .checkpoint import save_checkpoint
    from .train import history_tsv, train_samples

    model_cfg, tcfg = _load_configs(args)
    manifest = read_manifest(args.manifest)
    train = [load_sample(manifest, r) for r in manifest.split("train")]
    val = [load_sample(manifest, r) for r in manifest.split("val")]
    if not train or not val:
        raise UsageError("manifest needs non-empty train and val splits")
    if any(s.shape != (model_cfg.input_hw,) * 2 for s in train + val):
        raise UsageError(f"samples must be {model_cfg.input_hw}x{model_cfg.input_hw} to match input_hw")
    if args.depth_sweep:
        rows = depth_ablation(model_cfg, tcfg, train, val, args.seed, args.depth_sweep,
                              on_depth=lambda r: log.info("depth %d done", r[0]))
        report = args.report or os.path.join(args.out, "depth_ablation.tsv")
        os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
        tensorio.atomic_write_bytes(report, ablation_tsv(rows).encode())
        return
    params, history = train_samples(model_cfg, tcfg, train, val, args.seed)
    tasks = sorted(tcfg.tasks, key=lambda t: t.value)
    save_checkpoint(args.out, params, {"history.tsv": history_tsv(history, tasks)})
    print(f"trained {len(history)} epochs; final train loss {history[-1].train_loss:.6g}, "
          f"val loss {history[-1].val_loss:.6g}")


def _predict_raster(params, x, tasks, threads):
    """Non-overlapping tiles of the training size; ragged edges are zero-padded."""
    from .model import predict_maps

    cfg = params.config
    P = cfg.input_hw
    H, W = x.shape
    th, tw = -(-H // P), -(-W // P)
    cube = np.zeros((4, th * P, tw * P), cfg.np_dtype)
    cube[:, :H, :W] = np.where(x.valid[None], x.to_array(), 0.0)
    tiles = [(r, c) for r in range(th) for c in range(tw)]
    out = {t: np.zeros((th * P, tw * P), np.float32) for t in tasks}

    def one(rc):
        r, c = rc
        img = cube[None, :, r * P:(r + 1) * P, c * P:(c + 1) * P]
        return rc, predict_maps(params, img, tasks)

    for (r, c), maps in _run(one, tiles, threads):
        for t in tasks:
            out[t][r * P:(r + 1) * P, c * P:(c + 1) * P] = maps[t][0]
    return {t: Grid2D(out[t][:H, :W], x.valid) for t in tasks}


def _pred_name(sample_id, task):
    return f"{sample_id}.{task.name.lower()}.satc"


def cmd_predict(args):
    from .checkpoint import load_checkpoint

    params = load_checkpoint(args.checkpoint)
    tasks = TaskId.parse_list(args.tasks)
    os.makedirs(args.out, exist_ok=True)
    if args.bands:
        jobs = [(os.path.basename(args.bands).split(".")[0], args.bands)]
    else:
        m = read_manifest(args.manifest)
        recs = m.records if args.split == "all" else m.split(args.split)
        jobs = [(r.id, m.resolve(r.bands_path)) for r in recs]
    for sid, path in jobs:
        maps = _predict_raster(params, tensorio.read_bands(path), tasks, args.threads)
        for t in tasks:
            tensorio.write_grid(os.path.join(args.out, _pred_name(sid, t)), maps[t])
    print(f"wrote {len(jobs) * len(tasks)} maps to {args.out}")


def cmd_eval(args):
    from .metrics import EvalMaskSpec, evaluate_pairs, report_tsv

    tasks = TaskId.parse_list(args.tasks)
    m = read_manifest(args.manifest)
    recs = m.records if args.split == "all" else m.split(args.split)
    if not recs:
        raise UsageError(f"manifest has no records in split {args.split!r}")
    pairs = []
    for r in recs:
        gt = load_targets(os.path.join(args.gt, os.path.basename(r.targets_path)))
        pred = {t: tensorio.read_grid(os.path.join(args.pred, _pred_name(r.id, t))) for t in tasks}
        pairs.append((r.id, pred, gt))
    rows = evaluate_pairs(pairs, tasks, EvalMaskSpec(max_gt=args.max_gt))
    tensorio.atomic_write_bytes(args.out, report_tsv(rows).encode())


def cmd_gradcheck(args):
    from .model import tiny_config
    from .train import grad_check

    report = grad_check(tiny_config(), args.seed, TaskId.parse_list(args.tasks), args.step, corrupt=args.corrupt)
    print(report)
    print(f"max_rel_err\t{report.max_rel_err:.6e}")


COMMANDS = {
    "indices": cmd_indices,
    "ecovars": cmd_ecovars,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("satcalc: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"satcalc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"satcalc {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
