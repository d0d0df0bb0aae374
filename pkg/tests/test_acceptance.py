"""Acceptance criteria 1-11, one test each.

Training criteria share one staged pipeline per session: 2000 train / 250 val /
250 test phantoms at 64 x 64.  Every test records a ``PASS``/``FAIL`` line that
is echoed in the terminal summary.
"""
import time

import numpy as np
import pytest

import conftest
import test_losses
import test_scoring
from bsnet import cli, explain, imaging, losses, network, scoring, synthcxr, training
from bsnet.network import BSNet, ModelConfig, align_features, roi_pool
from bsnet.tensor import Tensor, no_grad
from helpers import gradcheck, model_gradcheck, primitive_cases

SIZE = 64
SEED = 0
N_TRAIN, N_VAL, N_TEST = 2000, 250, 250
EPOCHS = {"segmentation": 3, "alignment": 5, "scoring": 3, "finetune": 2}
SWEEP_ANGLES = tuple(range(-20, 21, 5))


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.CRITERIA[n] = line
    print(line)
    assert ok, line


def stage_cfg(stage, mode="ha"):
    return training.TrainConfig(stage=stage, epochs=EPOCHS[stage], batch_size=8, input_size=SIZE, seed=SEED, mode=mode)


@pytest.fixture(scope="session")
def pipeline():
    samples = synthcxr.make_samples(N_TRAIN + N_VAL + N_TEST, SEED, SIZE)
    train = training.prepare(samples[:N_TRAIN], SIZE)
    val = training.prepare(samples[N_TRAIN:N_TRAIN + N_VAL], SIZE)
    test = training.prepare(samples[N_TRAIN + N_VAL:], SIZE)
    out = {"train": train, "val": val, "test": test, "time": {}}

    t = time.perf_counter()
    out["seg"] = training.train_segmentation(train, val, stage_cfg("segmentation"))
    out["time"]["segmentation"] = time.perf_counter() - t

    t = time.perf_counter()
    out["align"] = training.train_alignment(train, val, stage_cfg("alignment"), out["seg"].checkpoint)
    out["time"]["alignment"] = time.perf_counter() - t

    t = time.perf_counter()
    for mode in ("ha", "sa"):
        out[f"score_{mode}"] = training.train_scoring(train, val, stage_cfg("scoring", mode), out["align"].checkpoint)
        out[f"full_{mode}"] = training.finetune_all(train, val, stage_cfg("finetune", mode), out[f"score_{mode}"].checkpoint)
    out["time"]["scoring"] = time.perf_counter() - t
    out["time"]["total"] = sum(out["time"].values())
    return out


def test_criterion_01_gradient_suite():
    t = time.perf_counter()
    prim = max(gradcheck(build, arrays) for _, build, arrays in primitive_cases(SEED))
    worst_e2e = 0.0
    for mode in ("ha", "sa"):
        m = BSNet(ModelConfig(input_size=16, widths=(4, 4, 8, 8), head_width=4, seed=1))
        rng = np.random.default_rng(5)
        for name, p in m.named_parameters():
            if not p.data.any() or name.startswith("aligner.theta"):
                p.data = p.data + rng.normal(0, 0.1, p.data.shape).astype(p.data.dtype)
        y = rng.integers(0, 4, (1, 3, 2))
        names = [n for n, _ in m.named_parameters() if n.endswith("weight")]
        err = model_gradcheck(m, lambda model, x: losses.composite_loss(model.forward(x, mode)["dist"], y),
                              rng.uniform(size=(1, 1, 16, 16)), names, n_coords=4)
        worst_e2e = max(worst_e2e, err)
    elapsed = time.perf_counter() - t
    ok = prim <= 1e-3 and worst_e2e <= 1e-2 and elapsed < 120
    report(1, ok, f"primitives max rel err {prim:.2e} (<=1e-3), end-to-end {worst_e2e:.2e} (<=1e-2), {elapsed:.0f}s (<120s)")


def test_criterion_02_loss_fixtures():
    t = time.perf_counter()
    test_losses.test_scce_fixtures()
    test_losses.test_mae_d_fixtures()
    test_losses.test_composite_fixtures()
    gaps = []
    for c in range(4):
        for y in range(4):
            test_losses.test_mae_d_beta_limit(c, y)
            d = np.eye(4)[np.full((3, 2), c)]
            gaps.append(abs(losses.mae_d(d, np.full((3, 2), y), 50).item() - abs(c - y)))
    report(2, max(gaps) <= 1e-3, f"hand fixtures to 1e-6 hold; beta=50 one-hot gap {max(gaps):.2e} (<=1e-3), {time.perf_counter() - t:.1f}s")


@pytest.mark.slow
def test_criterion_03_segmentation(pipeline):
    dice, iou = training.segmentation_scores(training.build_model(pipeline["seg"].checkpoint), pipeline["test"])
    secs = pipeline["time"]["segmentation"]
    report(3, dice >= 0.95 and secs <= 600, f"held-out Dice {dice:.4f} (>=0.95), IoU {iou:.4f}, {secs:.0f}s (<=600s)")


@pytest.mark.slow
def test_criterion_04_alignment(pipeline):
    model = training.build_model(pipeline["align"].checkpoint)
    dice, iou = training.alignment_scores(model, pipeline["test"], seed=SEED + 1)
    ident = training.alignment_scores(training.build_model(pipeline["seg"].checkpoint), pipeline["test"], seed=SEED + 1)[1]
    secs = pipeline["time"]["alignment"]
    report(4, iou >= 0.78 and secs <= 600, f"realigned-mask IoU {iou:.4f} (>=0.78; identity {ident:.4f}), {secs:.0f}s (<=600s)")


def ens_members(pipeline):
    return {
        "HA": [(training.build_model(pipeline["full_ha"].checkpoint), "ha")],
        "SA": [(training.build_model(pipeline["full_sa"].checkpoint), "sa")],
        "ENS": [(training.build_model(pipeline[f"full_{m}"].checkpoint), m) for m in ("ha", "sa")]
        + [(training.build_model(pipeline[f"full_{m}"].last), m) for m in ("ha", "sa")],
    }


@pytest.mark.slow
def test_criterion_05_scoring(pipeline):
    test = pipeline["test"]
    mae = {k: losses.region_mae(network.predict_score(cli.distributions(v, test.images)), test.scores)
           for k, v in ens_members(pipeline).items()}
    secs = pipeline["time"]["total"]
    ok = mae["HA"] <= 0.5 and mae["SA"] <= 0.5 and mae["ENS"] <= min(mae["HA"], mae["SA"]) + 0.02 and secs <= 2400
    report(5, ok, f"test region MAE HA {mae['HA']:.4f}, SA {mae['SA']:.4f}, ENS {mae['ENS']:.4f}; pipeline {secs:.0f}s (<=2400s)")


@pytest.mark.slow
def test_criterion_06_finetune(pipeline):
    val = pipeline["val"]
    parts = []
    ok = True
    for mode in ("ha", "sa"):
        s3 = training.scoring_mae(training.build_model(pipeline[f"score_{mode}"].checkpoint), val, mode)
        s4 = training.scoring_mae(training.build_model(pipeline[f"full_{mode}"].checkpoint), val, mode)
        ok &= s4 <= s3
        parts.append(f"{mode.upper()} stage3 {s3:.4f} -> stage4 {s4:.4f}")
    report(6, ok, "val MAE " + "; ".join(parts))


@pytest.mark.slow
def test_criterion_07_rotation_sweep(pipeline):
    t = time.perf_counter()
    members = [(training.build_model(pipeline["full_ha"].checkpoint), "ha")]
    rows = cli.rotation_sweep(members, pipeline["test"], SWEEP_ANGLES)
    with_ = np.mean([r[1] for r in rows])
    without = np.mean([r[2] for r in rows])
    elapsed = time.perf_counter() - t
    ok = with_ <= 0.9 * without and elapsed <= 600
    report(7, ok, f"mean MAE over +-20 deg: with {with_:.4f}, without {without:.4f} (ratio {with_ / without:.3f} <= 0.9), {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_08_explainability(pipeline):
    model = training.build_model(pipeline["full_ha"].checkpoint)
    img = pipeline["test"].images[0]
    labels = imaging.extract_superpixels(img, 12)
    expl = explain.explanation_map(model, img, labels=labels)
    p0 = network.forward_full(img, model)[0]
    ref = np.zeros_like(expl.emap)
    for i in range(labels.max() + 1):
        occluded = img.copy()
        occluded[labels == i] = 0
        ref += (labels == i)[..., None, None, None] * (network.forward_full(occluded, model)[0] - p0)
    oracle_err = float(np.abs(expl.emap - ref).max())

    one = explain.explanation_map(model, img, n_superpixels=1)
    p_black = network.forward_full(np.zeros_like(img), model)[0]
    one_err = float(np.abs(one.emap - (p_black - one.p0)).max())
    flat = BSNet(ModelConfig(input_size=SIZE))
    for p in flat.head.classify.parameters():
        p.data[...] = 0
    const_err = float(np.abs(explain.explanation_map(flat, img, n_superpixels=8).emap).max())

    rng = np.random.default_rng(SEED)
    hot, cold = [], []
    for seed in range(20):
        sev = np.zeros((3, 2), np.int64)
        r, c = rng.integers(0, 3), rng.integers(0, 2)
        sev[r, c] = 3
        rec = synthcxr.gen_phantom(synthcxr.PhantomSpec(seed=10_000 + seed, severity=sev, size=SIZE))
        e = explain.explanation_map(model, imaging.normalize_cxr(rec.image), n_superpixels=50)
        support = explain.region_supportiveness(e)
        hot.append(support[r, c])
        cold.append(support[r, 1 - c])
    loc_ok = np.mean(hot) > np.mean(cold)
    ok = oracle_err <= 1e-6 and one_err <= 1e-6 and const_err <= 1e-6 and loc_ok
    report(8, ok, f"oracle err {oracle_err:.1e}, N=1 err {one_err:.1e}, constant-model err {const_err:.1e}; "
                  f"mean supportiveness severity-3 {np.mean(hot):.4f} vs severity-0 {np.mean(cold):.4f}")


def test_criterion_09_scoring_toolbox():
    test_scoring.test_consensus_exhaustive_three_raters()
    test_scoring.test_consensus_documented_tie()
    test_scoring.test_cohen_kappa()
    test_scoring.test_fleiss_kappa_fixture()
    test_scoring.test_t_score()
    lo = scoring.apply_lo(9)
    report(9, abs(lo - 2.94) <= 1e-12, f"consensus over all 4^3 panels x seniority orders, kappa fixtures to 1e-9, apply_lo(9)={lo:.4f}")


def run_mini(root):
    root.mkdir(parents=True)
    cfg = root / "run.cfg"
    cfg.write_text(f"seed=3\ninput_size=32\nepochs=1\nbatch=4\nn_superpixels=6\ndata_dir={root / 'data'}\nout_dir={root / 'out'}\n")
    base = ["--config", str(cfg)]
    codes = [cli.main([*base, "gen-data", "--n", "16"])]
    codes += [cli.main([*base, "train", "--stage", s]) for s in ("seg", "align", "score", "full")]
    codes.append(cli.main([*base, "predict"]))
    first = (root / "data" / "test.txt").read_text().split()[0]
    codes.append(cli.main([*base, "explain", "--id", first]))
    files = sorted(p for p in (root / "out").rglob("*") if p.is_file() and p.suffix in (".bin", ".json", ".csv"))
    return codes, {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_criterion_10_determinism(tmp_path):
    codes_a, a = run_mini(tmp_path / "a")
    codes_b, b = run_mini(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    n_ckpt = sum(k.endswith("params.bin") for k in a)
    n_csv = sum(k.endswith(".csv") for k in a)
    ok = set(codes_a + codes_b) == {0} and same and n_ckpt == 8 and n_csv >= 2
    report(10, ok, f"{len(a)} files ({n_ckpt} checkpoints, {n_csv} CSVs) bit-identical across two runs")


def test_criterion_11_invariants():
    rng = np.random.default_rng(SEED)
    trials = 100
    # distribution normalization on a perturbed small model
    m = BSNet(ModelConfig(input_size=16, widths=(4, 4, 8, 8), head_width=4, seed=2))
    for name, p in m.named_parameters():
        if name.startswith("head."):
            p.data = p.data + rng.normal(0, 0.5, p.data.shape).astype(np.float32)
    dists = []
    for mode in ("ha", "sa"):
        d, _, _ = network.forward_full(rng.uniform(size=(trials, 16, 16)), m, mode)
        dists.append(d)
    d = np.concatenate(dists)
    norm_ok = bool(np.all(d >= 0) and np.abs(d.sum(-1) - 1).max() <= 1e-5)

    ha_sa = 0.0
    for _ in range(trials):
        n, c = rng.integers(1, 3), rng.integers(1, 4)
        s = int(rng.integers(4, 17))
        feats = [rng.standard_normal((n, c, s // k, s // k)).astype(np.float32) for k in (1, 2, 4)]
        ones = np.ones((n, 1, s, s), np.float32)
        theta = np.tile(network.IDENTITY_AFFINE, (n, 1))
        ha, _ = align_features(feats, ones, theta, "ha")
        sa, _ = align_features(feats, ones, theta, "sa")
        ha_sa = max(ha_sa, max(float(np.abs(a.data - b.data).max()) for a, b in zip(ha, sa)))

    band_ok = True
    for _ in range(trials):
        h, w = rng.integers(8, 300, 2)
        bands = network.band_bounds(float(h))
        starts = [b[0] for b in bands]
        heights = [b[1] - b[0] for b in bands]
        overlap = [bands[i][1] - bands[i + 1][0] for i in range(2)]
        band_ok &= np.allclose(starts, [0, 0.3 * h, 0.6 * h]) and np.allclose(heights, 0.4 * h)
        band_ok &= np.allclose(np.array(overlap) / (0.4 * h), 0.25)
        rows, cols = network.roi_operators(int(h), int(w))
        band_ok &= bool(np.allclose(rows.sum(1), 1) and np.allclose(cols.sum(1), 1))
        f = rng.standard_normal((1, 2, int(h), int(w))).astype(np.float32)
        with no_grad():
            pooled = roi_pool([Tensor(f)])[0].data
        band_ok &= pooled.shape == (6, 2, 4, 4)

    flip_ok = True
    for _ in range(trials):
        s = rng.integers(0, 4, (3, 2))
        f = scoring.flip_score(s)
        flip_ok &= bool(np.array_equal(scoring.flip_score(f), s) and scoring.global_score(f) == scoring.global_score(s))

    grid_err = 0.0
    for _ in range(trials):
        h, w = rng.integers(2, 40, 2)
        img = rng.uniform(size=(h, w))
        grid_err = max(grid_err, float(np.abs(imaging.sample_grid(img, imaging.identity_grid(h, w)) - img).max()))

    ok = norm_ok and ha_sa <= 1e-6 and band_ok and flip_ok and grid_err <= 1e-6
    report(11, ok, f"{trials} trials each: normalization {norm_ok}, HA-SA max diff {ha_sa:.1e}, bands {band_ok}, "
                   f"flip {flip_ok}, identity-grid err {grid_err:.1e}")
