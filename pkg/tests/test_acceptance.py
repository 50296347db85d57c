"""Acceptance criteria 1-7. Each test records one PASS/FAIL line, repeated in the terminal summary."""
import time

import numpy as np
import pytest
import torch

from derain.corruption import (
    SceneSpec,
    apply_corruption,
    corruption_support,
    render_scene,
    sample_droplet_field,
    synthesize_dataset,
    synthesize_pair,
    SynthConfig,
)
from derain.data import split_dataset
from derain.evaluation import DetectorSpec, TrioCounts, count_cars, evaluate_model, restoration_scores
from derain.errors import AllTriosSkipped
from derain.networks import DiscriminatorConfig, GeneratorConfig, build_generator, generator_forward, predictor
from derain.training import (
    EpochMetrics,
    TrainConfig,
    detect_overfit,
    discriminator_loss,
    generator_loss,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
from oracles import brute_force_scores, finite_difference_check, micro_gradient_case

# Desk-scale run settings (criterion 2). Sizes, dims, depth, width, batch size and
# the epoch cap are fixed by the criterion. Learning rate and L1 weight were picked
# on pilot runs with different seeds (synth 2024, split 7, train 1); the seeds
# below were not used for tuning.
E2E = {
    "counts": (200, 20, 40),
    "dims": (64, 64),
    "density": 6000.0,
    "synth_seed": 4242,
    "split_seed": 11,
    "train_seed": 3,
    "epochs": 30,
    "learning_rate": 8e-4,
    "l1_weight": 160.0,
    "adam_beta1": 0.5,
}


# ---- 1 ------------------------------------------------------------------------------

def test_criterion_1_metric_oracle(record_criterion):
    rng = np.random.default_rng(20240601)
    lists = []
    for _ in range(200):
        n = int(rng.integers(1, 51))
        c = rng.integers(0, 21, size=(n, 3))
        lists.append([TrioCounts(int(a), int(b), int(d)) for a, b, d in c])
    # make sure the exclusion paths are exercised
    lists.append([TrioCounts(0, 3, 1), TrioCounts(0, 0, 0)])
    lists.append([TrioCounts(0, 5, 5), TrioCounts(4, 2, 4), TrioCounts(0, 1, 0)])

    t0 = time.perf_counter()
    worst, mismatched, skipped_paths = 0.0, 0, 0
    for counts in lists:
        ref = brute_force_scores(counts)
        if ref is None:
            try:
                restoration_scores(counts)
                mismatched += 1
            except AllTriosSkipped:
                skipped_paths += 1
            continue
        s = restoration_scores(counts)
        worst = max(worst, abs(s.term1 - ref[0]), abs(s.term2 - ref[1]))
        if (s.m_effective, s.skipped) != ref[2:]:
            mismatched += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and mismatched == 0 and skipped_paths >= 1 and elapsed < 1.0
    record_criterion(1, "metric oracle equivalence", ok,
                     f"{len(lists)} lists, max diff {worst:.1e}, count mismatches {mismatched}, {elapsed:.3f}s")
    assert ok


# ---- 2 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    cfg = E2E
    n = sum(cfg["counts"])
    items = synthesize_dataset(n, cfg["dims"], cfg["density"], cfg["synth_seed"])
    split = split_dataset([p for p, _ in items], cfg["counts"], cfg["split_seed"])
    tcfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=1, learning_rate=cfg["learning_rate"],
        adam_beta1=cfg["adam_beta1"], l1_weight=cfg["l1_weight"], seed=cfg["train_seed"],
    )
    ckpt_dir = tmp_path_factory.mktemp("desk_run")
    t0 = time.perf_counter()
    state, history = train(tcfg, split, GeneratorConfig(8, 3, cfg["dims"]), DiscriminatorConfig(8, 2, cfg["dims"]),
                           checkpoint_dir=ckpt_dir)
    elapsed = time.perf_counter() - t0
    best = detect_overfit(history, patience=3).best_epoch
    model = load_checkpoint(ckpt_dir / f"epoch_{best:03d}.ckpt").generator
    result = evaluate_model(predictor(model), split.test, DetectorSpec())
    return {"split": split, "history": history, "best": best, "model": model, "result": result, "elapsed": elapsed}


@pytest.mark.slow
def test_criterion_2_desk_scale_restoration(desk_run, record_criterion):
    r = desk_run["result"]
    s = r.scores
    ok = s.term1 <= 0.4 and s.term2 >= s.term1 + 0.3 and r.l1_predicted < r.l1_input
    record_criterion(
        2, "desk-scale end-to-end restoration", ok,
        f"term1 {s.term1:.3f} (<=0.4), term2 {s.term2:.3f} (>= {s.term1 + 0.3:.3f}), "
        f"L1 pred {r.l1_predicted:.4f} vs input {r.l1_input:.4f}, best epoch {desk_run['best']}, "
        f"train {desk_run['elapsed']:.0f}s",
    )
    assert s.term1 <= 0.4
    assert s.term2 >= s.term1 + 0.3
    assert r.l1_predicted < r.l1_input


@pytest.mark.slow
def test_desk_run_beats_identity_on_validation(desk_run):
    val = desk_run["split"].validation
    identity = float(np.mean([np.abs(p.distorted - p.clear).mean() for p in val]))
    assert desk_run["history"][desk_run["best"]].l1_val < identity


# ---- 3 ------------------------------------------------------------------------------

def test_criterion_3_overfit_one(record_criterion):
    pair, _, _ = synthesize_pair(0, 5, SynthConfig(dims=(64, 64)))
    state = init_state(TrainConfig(seed=3), GeneratorConfig(8, 3, (64, 64)), DiscriminatorConfig(8, 2, (64, 64)))
    before = float(np.abs(generator_forward(state.generator, pair.distorted) - pair.clear).mean())
    for _ in range(500):
        train_step(state, pair)
    err = float(np.abs(generator_forward(state.generator, pair.distorted) - pair.clear).mean())
    ok = err < 0.05
    record_criterion(3, "overfit-one sanity", ok, f"mean abs error {before:.4f} -> {err:.4f} after 500 steps (< 0.05)")
    assert ok


# ---- 4 ------------------------------------------------------------------------------

def test_criterion_4_gradient_check(record_criterion):
    draws = range(5)
    failures, checked = [], 0
    for seed in draws:
        gen, disc, x, y = micro_gradient_case(100 + seed)

        def g_loss():
            fake = gen(x)
            return generator_loss(disc(x, fake), fake, y, 100.0)[0]

        def d_loss():
            return discriminator_loss(disc(x, y), disc(x, gen(x).detach()))

        for params, fn in ((list(gen.named_parameters()), g_loss), (list(disc.named_parameters()), d_loss)):
            f, n = finite_difference_check(params, fn)
            failures += [(seed, *item) for item in f]
            checked += n
    ok = not failures
    record_criterion(4, "gradient check", ok,
                     f"{len(draws)} draws, {checked} partials, {len(failures)} outside 1e-3 rel / 1e-5 abs")
    assert ok, failures[:5]


# ---- 5 ------------------------------------------------------------------------------

def test_criterion_5_invariant_suite(record_criterion, tmp_path):
    checks = {}
    rng = np.random.default_rng(5)

    local = True
    for s in range(25):
        img = rng.random((48, 64, 3))
        fld = sample_droplet_field((64, 48), 20000, seed=s)
        out = apply_corruption(img, fld)
        mask = corruption_support((64, 48), fld)
        local &= bool(np.array_equal(out[~mask], img[~mask])) and out.min() >= 0 and out.max() <= 1
    checks["corruption locality"] = local

    gen = build_generator(GeneratorConfig(8, 3, (64, 48)), 0)
    outs = [generator_forward(gen, rng.random((48, 64, 3))) for _ in range(5)]
    checks["generator shape/range"] = all(o.shape == (48, 64, 3) and 0 <= o.min() and o.max() <= 1 for o in outs)

    logits = np.linspace(-80, 80, 321)
    finite = True
    for dtype in (torch.float32, torch.float64):
        lt = torch.tensor(logits, dtype=dtype)
        finite &= bool(torch.isfinite(discriminator_loss(lt, lt.flip(0))))
        finite &= bool(torch.isfinite(generator_loss(lt, torch.zeros(3, 8, 8), torch.ones(3, 8, 8), 100.0)[0]))
    checks["loss finiteness"] = finite

    pairs = [p for p, _ in synthesize_dataset(4, (16, 16), 6000, 1, SynthConfig(max_cars=0, min_cars=0))]
    dims = (16, 16)
    state = init_state(TrainConfig(seed=9), GeneratorConfig(4, 2, dims), DiscriminatorConfig(4, 1, dims))
    straight = state.clone()
    for p in pairs:
        train_step(straight, p)
    for p in pairs[:2]:
        train_step(state, p)
    save_checkpoint(state, tmp_path / "a.ckpt")
    resumed = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(resumed, tmp_path / "b.ckpt")
    for p in pairs[2:]:
        train_step(resumed, p)
    checks["checkpoint round trip"] = (
        (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        and resumed.to_bytes() == straight.to_bytes()
    )

    a = synthesize_dataset(12, (64, 64), 6000, 77)
    b = synthesize_dataset(12, (64, 64), 6000, 77)
    same = all(np.array_equal(x.distorted, y.distorted) and np.array_equal(x.clear, y.clear) and gx == gy
               for (x, gx), (y, gy) in zip(a, b))
    s1 = split_dataset([p for p, _ in a], (8, 2, 2), 3)
    s2 = split_dataset([p for p, _ in b], (8, 2, 2), 3)
    same &= [p.id for p in s1.train + s1.validation + s1.test] == [p.id for p in s2.train + s2.validation + s2.test]
    checks["split/synthesis determinism"] = same

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(5, "invariant suite", ok, f"{len(checks) - len(failed)}/{len(checks)} hold" +
                     (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


# ---- 6 ------------------------------------------------------------------------------

def test_criterion_6_detector_closure(record_criterion):
    spec = DetectorSpec()
    rng = np.random.default_rng(606)
    misses = []
    for i in range(50):
        spec_i = SceneSpec(int(rng.integers(0, 4)), "road", seed=int(rng.integers(0, 2**62)))
        img, gt = render_scene(spec_i, (64, 64))
        found = count_cars(spec, img)
        if found != len(gt.boxes):
            misses.append((i, found, len(gt.boxes)))
    ok = not misses
    record_criterion(6, "detector oracle closure", ok, f"50 scenes, {len(misses)} count mismatches")
    assert ok, misses


# ---- 7 ------------------------------------------------------------------------------

def test_criterion_7_overfit_rule(record_criterion):
    val = [0.3, 0.2, 0.25, 0.3, 0.35]
    train_l1 = [0.5, 0.4, 0.3, 0.2, 0.1]
    history = [EpochMetrics(i, 0.6, 0.7, t, v) for i, (t, v) in enumerate(zip(train_l1, val))]
    rep = detect_overfit(history, patience=2)
    ok = rep.best_epoch == 1 and rep.overfit_epoch == 3
    record_criterion(7, "overfit detection rule", ok, f"best epoch {rep.best_epoch}, overfit flagged at {rep.overfit_epoch}")
    assert ok
