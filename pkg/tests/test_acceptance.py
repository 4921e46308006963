"""Acceptance suite: one test per criterion, tolerances fixed here.

Run alone with ``pytest -v tests/test_acceptance.py``; each test name starts
with the criterion number.
"""
import math
import os
import time

import numpy as np
import pytest

from satcalc import kernels
from satcalc.ablation import COLUMNS
from satcalc.cli import main
from satcalc.dataset import (
    ALL_TASKS, AugmentSpec, TaskId, augment, build_targets, extract_patches, save_sample, split_manifest, synth_scene,
    write_manifest,
)
from satcalc.ecovars import CarbonParams, agb_from_height, agb_values, carbon_stock, carbon_values, coeffs_for
from satcalc.grid import BandStack, Grid2D, rotate90
from satcalc.indices import IndexKind, IndexParams, compute_index
from satcalc.metrics import error_stats, nmae, psnr, r2_score, tree_cover_iou
from satcalc.model import ModelConfig, init_params, tiny_config
from satcalc.train import (
    EarlyStopState, LossWeights, PlateauState, TrainConfig, early_stop_step, grad_check, plateau_step,
    train_samples, weighted_loss,
)

from _pipeline import run_pipeline, tree_bytes

N_PIXELS = 10_000
INDEX_ATOL = 1e-6
ECO_RTOL = 1e-9


# --- 1. formula oracle -----------------------------------------------------

def oracle_index(kind, b2, b3, b4, b8, p):
    """Straight-line 64-bit evaluation, one pixel at a time.  None means nodata."""
    if kind is IndexKind.NDVI:
        num, den = b8 - b4, b8 + b4
    elif kind is IndexKind.GNDVI:
        num, den = b8 - b3, b8 + b3
    elif kind is IndexKind.NDWI:
        num, den = b3 - b8, b3 + b8
    elif kind is IndexKind.SAVI:
        num, den = (b8 - b4) * (1.0 + p.savi_L), b8 + b4 + p.savi_L
    else:
        num, den = p.evi_G * (b8 - b4), b8 + p.evi_C1 * b4 - p.evi_C2 * b2 + p.evi_L
    if abs(den) < p.denom_eps:
        return None
    return num / den


def kernel_index(kind, cube, p):
    """The 64-bit values behind compute_index, before float32 storage."""
    b2, b3, b4, b8 = (np.ascontiguousarray(c, np.float64).ravel() for c in cube)
    valid = np.ones(b2.size, bool)
    if kind is IndexKind.NDVI:
        return kernels.normalized_difference(b8, b4, valid, p.denom_eps)
    if kind is IndexKind.GNDVI:
        return kernels.normalized_difference(b8, b3, valid, p.denom_eps)
    if kind is IndexKind.NDWI:
        return kernels.normalized_difference(b3, b8, valid, p.denom_eps)
    if kind is IndexKind.SAVI:
        return kernels.savi(b8, b4, valid, p.savi_L, p.denom_eps)
    return kernels.evi(b8, b4, b2, valid, p.evi_G, p.evi_C1, p.evi_C2, p.evi_L, p.denom_eps)


def test_1_formula_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240)
    cube = rng.uniform(0.0, 1.0, (4, 100, 100)).astype(np.float32)
    x = BandStack.from_array(cube)
    p = IndexParams()
    pix = cube.reshape(4, -1).astype(np.float64).T.tolist()
    for kind in IndexKind:
        want = [oracle_index(kind, *px, p) for px in pix]
        ok_want = np.array([w is not None for w in want])
        vals = np.array([w if w is not None else 0.0 for w in want])
        out64, ok64 = kernel_index(kind, cube, p)
        assert np.array_equal(ok64, ok_want), kind
        assert np.abs(out64[ok_want] - vals[ok_want]).max() <= INDEX_ATOL, kind
        g = compute_index(kind, x, p)
        assert np.array_equal(g.valid.ravel(), ok_want), kind
        # the stored map is the oracle rounded to float32 (at most one unit in the last place apart)
        stored = g.values.ravel()[ok_want]
        ulp = np.spacing(np.abs(vals[ok_want]).astype(np.float32))
        assert np.all(np.abs(stored - vals[ok_want].astype(np.float32)) <= ulp), kind
        small = np.abs(vals) <= 1.0
        assert np.abs(g.values.ravel()[ok_want & small] - vals[ok_want & small]).max() <= INDEX_ATOL, kind

    heights = rng.uniform(0.0, 60.0, N_PIXELS)
    cf = CarbonParams().CF
    for ft in ("general", "coniferous", "broadleaf"):
        c = coeffs_for(ft)
        want_agb = np.array([c.a * math.pow(h, c.b) for h in heights.tolist()])
        want_cs = np.array([cf * v for v in want_agb.tolist()])
        got_agb = agb_values(heights, c.a, c.b)
        np.testing.assert_allclose(got_agb, want_agb, rtol=ECO_RTOL, atol=0)
        np.testing.assert_allclose(carbon_values(got_agb, cf), want_cs, rtol=ECO_RTOL, atol=0)
        h32 = Grid2D.from_array(heights.astype(np.float32).reshape(100, 100))
        agb = agb_from_height(h32, c)
        want32 = np.array([c.a * math.pow(h, c.b) for h in h32.values.ravel().astype(np.float64).tolist()])
        np.testing.assert_allclose(agb.values.ravel(), want32, rtol=2 ** -23, atol=0)
        cs = carbon_stock(agb)
        np.testing.assert_allclose(cs.values, agb.values.astype(np.float64) * cf, rtol=2 ** -23, atol=0)

    def one(b2, b3, b4, b8):
        return BandStack.from_array(np.array([b2, b3, b4, b8], np.float32).reshape(4, 1, 1))

    assert abs(compute_index(IndexKind.NDVI, one(0.1, 0.1, 0.2, 0.6)).values[0, 0] - 0.5) <= INDEX_ATOL
    assert abs(compute_index(IndexKind.SAVI, one(0.1, 0.1, 0.2, 0.6)).values[0, 0] - 0.46154) <= 1e-5
    assert abs(compute_index(IndexKind.EVI, one(0.1, 0.1, 0.2, 0.5)).values[0, 0] - 0.38462) <= 1e-5
    agb10 = agb_values(10.0, 0.067, 2.58)
    assert round(float(agb10), 2) == 25.47
    assert carbon_values(agb10, 0.47) == 0.47 * agb10
    assert time.perf_counter() - t0 < 10.0


# --- 2. default loss weights ------------------------------------------------

def test_2_default_loss_weights():
    w = LossWeights()
    assert [w[t] for t in ALL_TASKS] == [0.0386, 0.0440, 0.0501, 0.1700, 0.0418, 0.2052, 0.2121, 0.2381]
    assert abs(sum(w[t] for t in ALL_TASKS) - 0.9999) <= 1e-6
    mask = np.ones((4, 4), bool)
    preds = {TaskId.NDVI: np.full((4, 4), 0.6), TaskId.H: np.full((4, 4), 12.0)}
    targets = {TaskId.NDVI: np.full((4, 4), 0.5), TaskId.H: np.full((4, 4), 10.0)}
    total, _ = weighted_loss(preds, targets, mask)
    assert abs(total - 0.41426) <= 1e-9


# --- 3. gradient check -----------------------------------------------------

def test_3_gradient_check():
    t0 = time.perf_counter()
    cfg = tiny_config()
    assert (cfg.input_hw, cfg.embed_d, cfg.n_heads, cfg.decoder_layers, cfg.dtype) == (8, 8, 2, 2, "float64")
    rep = grad_check(cfg, seed=7, tasks=(TaskId.NDVI, TaskId.H), step=1e-5)
    assert rep.n_coords > 0
    assert rep.max_rel_err < 1e-4, str(rep)
    assert time.perf_counter() - t0 < 60.0


# --- 4. overfit --------------------------------------------------------------

def overfit_samples():
    out = []
    for s in range(4):
        x, h = synth_scene(100 + s, 96, 96)
        out += extract_patches(x, h, 32, 4, seed=s, prefix=f"c{s}_")
    return out


# tokenwise decoder, hidden 256, batch 4; everything else at the defaults
OVERFIT_MODEL = ModelConfig(decoder_mode="tokenwise", decoder_hidden=256)
OVERFIT_TRAIN = TrainConfig(epochs=200, batch_size=4, lr=1e-4, augment=False)


@pytest.mark.slow
def test_4_overfit():
    samples = overfit_samples()
    assert len(samples) == 16 and all(s.shape == (32, 32) for s in samples)
    assert OVERFIT_TRAIN.tasks == ALL_TASKS and OVERFIT_TRAIN.weights == LossWeights()
    h0 = init_params(OVERFIT_MODEL, 0).backbone_hash()
    t0 = time.perf_counter()
    params, hist = train_samples(OVERFIT_MODEL, OVERFIT_TRAIN, samples, samples, seed=0)
    elapsed = time.perf_counter() - t0
    ratio = hist[-1].train_loss / hist[0].train_loss
    print(f"overfit: {len(hist)} epochs, loss {hist[0].train_loss:.4g} -> {hist[-1].train_loss:.4g} "
          f"(ratio {ratio:.4f}) in {elapsed:.0f} s")
    assert len(hist) <= 200
    assert ratio < 0.10
    assert params.backbone_hash() == h0
    assert elapsed < 600.0


# --- 5. metrics --------------------------------------------------------------

def test_5_metric_examples():
    tol = 1e-6
    assert abs(nmae([2, 4.5, 3], [1, 3, 4]) - 37.5) <= tol
    assert abs(tree_cover_iou(np.array([[2.5, 3], [1, 1]]), np.array([[0, 3], [5, 1]], float)) - 1 / 3) <= tol
    assert abs(psnr(np.full(4, 0.1), np.zeros(4), peak=1.0) - 20.0) <= tol
    assert abs(r2_score([1, 2, 4], [1, 2, 3]) - 0.5) <= tol
    mae, rmse, bias = error_stats([3.0, 4.0], [0.0, 0.0])
    assert abs(mae - 3.5) <= tol and abs(rmse - 3.5355339) <= tol and abs(bias - 3.5) <= tol
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        pred, gt = rng.normal(0, 10, n), rng.normal(0, 10, n)
        mae, rmse, bias = error_stats(pred, gt)
        assert rmse >= mae - 1e-12 and mae >= 0 and rmse >= abs(bias) - 1e-12


# --- 6. equivariance -----------------------------------------------------------

def test_6_equivariance():
    rng = np.random.default_rng(6)
    cube = rng.uniform(0.0, 1.0, (4, 13, 9)).astype(np.float32)
    x = BandStack.from_array(cube, rng.random((13, 9)) > 0.1)
    for kind in IndexKind:
        base = compute_index(kind, x)
        for k in range(4):
            assert compute_index(kind, x.map(lambda g: rotate90(g, k))) == rotate90(base, k), (kind, k)
    for kind in (IndexKind.NDVI, IndexKind.GNDVI, IndexKind.NDWI):
        base = compute_index(kind, x)
        for c in (0.1, 3.0):
            scaled = compute_index(kind, BandStack.from_array((cube * np.float32(c)), x.valid))
            assert np.array_equal(scaled.valid, base.valid)
            assert np.abs(scaled.values - base.values)[base.valid].max() <= 1e-7, (kind, c)
    x, h = synth_scene(61, 48, 48)
    for s in extract_patches(x, h, 16, 4, seed=6):
        for k in range(4):
            a = augment(s, AugmentSpec(), 0, k=k, scale=1.0)
            rebuilt = build_targets(a.x, a.y[TaskId.H], height_cap=60.0)
            for t in ALL_TASKS:
                assert a.y[t].values.tobytes() == rebuilt[t].values.tobytes()
                assert np.array_equal(a.y[t].valid, rebuilt[t].valid)


# --- 7. determinism ------------------------------------------------------------

@pytest.mark.slow
def test_7_determinism(tmp_path):
    runs = {name: run_pipeline(tmp_path / name, threads=threads, epochs=5)
            for name, threads in (("a", 1), ("b", 1), ("c", 4))}
    ckpt = {n: tree_bytes(r["ckpt"]) for n, r in runs.items()}
    report = {n: open(r["report"], "rb").read() for n, r in runs.items()}
    assert ckpt["a"] and ckpt["a"] == ckpt["b"] == ckpt["c"]
    assert report["a"] == report["b"] == report["c"]
    assert len(open(os.path.join(runs["a"]["ckpt"], "history.tsv")).read().splitlines()) == 6


# --- 8. schedulers -------------------------------------------------------------

def test_8_scheduler_semantics():
    def lrs(losses):
        s, lr, out = PlateauState(), 1.0, []
        for v in losses:
            lr, s = plateau_step(s, v, lr)
            out.append(lr)
        return out

    assert lrs([1.0, 0.9]) == [1.0, 1.0]
    assert lrs([1.0, 1.1, 1.2]) == [1.0, 1.0, 0.5]
    assert lrs([1.0, 1.1, 0.9]) == [1.0, 1.0, 1.0]

    def stop(losses):
        s = EarlyStopState()
        for i, v in enumerate(losses, 1):
            done, s = early_stop_step(s, v)
            if done:
                return i
        return None

    assert stop([1.0, 0.9, 0.92, 0.91, 0.93]) is None
    assert stop([1.0, 0.9, 0.92, 0.91, 0.93, 0.95]) == 6
    assert stop(list(np.linspace(1.0, 0.0, 50))) is None


# --- 9. depth sweep --------------------------------------------------------------

@pytest.mark.slow
def test_9_depth_sweep(tmp_path):
    samples = overfit_samples()
    data = tmp_path / "data"
    data.mkdir()
    paths = [save_sample(data, s) for s in samples]
    m = split_manifest(samples, (0.75, 0.25, 0.0), seed=0, paths=paths, patch_size=32, root=str(data))
    write_manifest(data / "manifest.tsv", m)
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text("decoder_hidden=32\ndtype=float32\nbatch_size=4\naugment=false\n")
    report = tmp_path / "depth.tsv"
    code = main(["train", "--manifest", str(data / "manifest.tsv"), "--config", str(cfg), "--epochs", "2",
                 "--depth-sweep", "1-10", "--out", str(tmp_path / "ck"), "--report", str(report)])
    assert code == 0
    lines = report.read_text().splitlines()
    assert lines[0].split("\t") == list(COLUMNS) == ["layers", "mae", "psnr_db", "r2", "rmse"]
    rows = [line.split("\t") for line in lines[1:]]
    assert [int(r[0]) for r in rows] == list(range(1, 11))
    for r in rows:
        assert len(r) == 5
        mae, ps, r2, rmse = (float(v) for v in r[1:])
        assert math.isfinite(mae) and math.isfinite(rmse) and rmse >= mae >= 0
        assert not math.isnan(ps) and not math.isnan(r2)
