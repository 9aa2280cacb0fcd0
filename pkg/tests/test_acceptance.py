"""Acceptance gate: nine end-to-end criteria, one printed line each.

The trend/probe criteria share a session fixture that trains the four
model variants on three seeds (the longest part of the suite; expect
roughly 40 minutes on one CPU core).
"""

import io
import time

import numpy as np
import pytest
import torch

from references import (
    exhaustive_kmeans_inertia,
    scalar_bce,
    scalar_dice,
    scalar_derivation,
    scalar_iou,
)

from ddeseg.checkpoint import load_checkpoint, save_checkpoint
from ddeseg.config import RunConfig
from ddeseg.data import (
    _pack_record,
    gen_class_bank,
    gen_dataset,
    gen_scene,
    load_dataset,
    save_dataset,
)
from ddeseg.derivation import DerivationParams, derive, enhance_discriminative
from ddeseg.elimination import EliminationScorer, VisualCenters, score_and_eliminate, soft_cluster
from ddeseg.gradsuite import run_suite
from ddeseg.losses import (
    LossWeights,
    bce_loss,
    dice_loss,
    fbeta_metric,
    iou_loss,
    total_loss,
)
from ddeseg.memory import build_memory, kmeans, load_memory, save_memory
from ddeseg.model import DDESegModel, FusionBlock
from ddeseg.rng import mix_seed
from ddeseg.train import (
    build_memory_for_model,
    build_model,
    evaluate,
    linear_probe_accuracies,
    offscreen_score_gap,
    predict,
    train,
)

torch.set_num_threads(2)


def _report(num: int, name: str, ok: bool, detail: str = ""):
    print(f"\n[criterion {num}] {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# --- criterion 6/7/8 shared training runs ---------------------------------

VARIANTS = (
    ("baseline", dict(derivation=False, enhancement=False, dem_scheme="none")),
    ("deri", dict(derivation=True, enhancement=False, dem_scheme="none")),
    ("deri_disc", dict(derivation=True, enhancement=True, dem_scheme="none")),
    ("full", dict(derivation=True, enhancement=True, dem_scheme="gs_ca_fc")),
)
TREND_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def trend_runs():
    """Train all ablation variants on all seeds; returns
    {(seed, variant): jf} plus the full-variant artifacts per seed."""
    jf: dict[tuple[int, str], float] = {}
    full_models: dict[int, tuple] = {}
    for seed in TREND_SEEDS:
        bank = gen_class_bank(6, 3, seed)
        train_pairs, _ = gen_dataset(bank, 200, seed)
        test_pairs, _ = gen_dataset(bank, 50, seed + 2_000_000)
        for name, overrides in VARIANTS:
            cfg = RunConfig(seed=seed, steps=2000, eval_every=10**9, **overrides)
            model = build_model(cfg)
            mem = build_memory_for_model(model, bank, cfg)
            train(cfg, model, mem, train_pairs, None)
            report = evaluate(model, mem, test_pairs)
            jf[(seed, name)] = report.jf_mean
            if name == "full":
                full_models[seed] = (model, mem, bank)
    return jf, full_models


# --- criteria ---------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = run_suite(seeds=(0, 1, 2), tolerance=1e-4)
    elapsed = time.time() - t0
    worst = max(r.report.max_rel_error for r in results)
    ok = all(r.passed for r in results) and elapsed < 120.0
    _report(
        1,
        "gradient suite",
        ok,
        f"{len(results)} checks, max rel err {worst:.2e}, {elapsed:.0f}s",
    )


def test_criterion_2_algebraic_invariants():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    feats = {
        c: (3 * rng.normal(size=(1, 8)) + rng.normal(size=(10, 8))).astype(np.float32)
        for c in range(4)
    }
    mem = build_memory(feats, k=2, m=3, seed=0)

    # zero-parameter derivation is the exact identity
    params0 = DerivationParams(8).double().zero_()
    f_a = torch.randn(8, dtype=torch.float64)
    got = derive(f_a, mem, 3, params0)
    identity_ok = all(torch.equal(row, f_a) for row in got.raw) and all(
        torch.equal(row, f_a) for row in got.refined
    )

    # refinement factor in (0, 2), sign preserved, on 1000 random cases
    params = DerivationParams(8).double()
    factor_ok = True
    for _ in range(1000):
        A = torch.randn(1, 8, dtype=torch.float64)
        A[A.abs() < 1e-3] = 1e-3
        out = enhance_discriminative(A, [int(torch.randint(4, (1,)))], mem, params)
        f = (out / A).detach().numpy()
        factor_ok = factor_ok and bool((f > 0).all() and (f < 2).all())

    # soft-cluster assignment rows sum to 1
    centers = VisualCenters(3, 8).double()
    V = torch.randn(40, 8, dtype=torch.float64)
    g = torch.randn(40, 3, dtype=torch.float64)
    O = soft_cluster(V, centers, g)
    rows_ok = bool(np.abs(O.sum(-1).detach().numpy() - 1.0).max() < 1e-5)

    # elimination is exactly rowwise scaling
    scorer = EliminationScorer(8, 2).double()
    A_hat = torch.randn(5, 8, dtype=torch.float64)
    S, A_out = score_and_eliminate(A_hat, torch.randn(3, 8, dtype=torch.float64), scorer)
    prop_ok = bool(
        (A_out - S.unsqueeze(-1) * A_hat).abs().max().item() < 1e-6
    )

    # zero-residual-initialized fusion block is the identity
    block = FusionBlock(8, 2).double().zero_residual_init_()
    A_in = torch.randn(3, 8, dtype=torch.float64)
    V_in = torch.randn(12, 8, dtype=torch.float64)
    A2, V2 = block(A_in, V_in)
    fusion_ok = torch.equal(A2, A_in) and torch.equal(V2, V_in)

    ok = identity_ok and factor_ok and rows_ok and prop_ok and fusion_ok
    _report(
        2,
        "algebraic invariants",
        ok,
        f"identity={identity_ok} factor={factor_ok} rows={rows_ok} "
        f"proportional={prop_ok} fusion={fusion_ok}",
    )


def test_criterion_3_oracle_equivalence():
    # k-means vs exhaustive-partition global optimum
    rng = np.random.default_rng(42)
    hits = 0
    for i in range(100):
        n = int(rng.integers(3, 9))
        d = int(rng.integers(1, 4))
        k = int(rng.integers(2, min(n, 4) + 1))
        pts = rng.normal(size=(n, d))
        _, _, inertia = kmeans(pts, k, restarts=20, seed=i)
        if inertia <= exhaustive_kmeans_inertia(pts, k) + 1e-9:
            hits += 1
    kmeans_ok = hits >= 95

    # derivation composite vs scalar-loop reference
    torch.manual_seed(0)
    feats = {
        c: (3 * rng.normal(size=(1, 8)) + rng.normal(size=(10, 8))).astype(np.float32)
        for c in range(4)
    }
    mem = build_memory(feats, k=2, m=3, seed=0)
    params = DerivationParams(8).double()
    f_a = torch.randn(8, dtype=torch.float64)
    got = derive(f_a, mem, 3, params)
    _, A_ref, refined_ref = scalar_derivation(f_a.tolist(), mem, 3, params)
    deriv_err = max(
        float(np.abs(got.raw.detach().numpy() - np.array(A_ref)).max()),
        float(np.abs(got.refined.detach().numpy() - np.array(refined_ref)).max()),
    )
    deriv_ok = deriv_err < 1e-6

    # loss terms vs scalar references
    pred = rng.uniform(0, 1, 64)
    target = (rng.uniform(0, 1, 64) > 0.5).astype(np.float64)
    pt, tt = torch.from_numpy(pred), torch.from_numpy(target)
    loss_err = max(
        abs(dice_loss(pt, tt).item() - scalar_dice(pred, target)),
        abs(bce_loss(pt, tt).item() - scalar_bce(pred, target)),
        abs(iou_loss(pt, tt).item() - scalar_iou(pred, target)),
    )
    loss_ok = loss_err < 1e-7

    # F-beta closed form: precision 0.5, recall 1.0, beta^2 = 0.3
    p = np.zeros(100, dtype=bool)
    p[:20] = True
    t = np.zeros(100, dtype=bool)
    t[:10] = True
    fbeta_ok = abs(fbeta_metric(p, t, 0.3) - 0.5652173913) < 1e-4

    ok = kmeans_ok and deriv_ok and loss_ok and fbeta_ok
    _report(
        3,
        "oracle equivalence",
        ok,
        f"kmeans {hits}/100, deriv err {deriv_err:.1e}, loss err {loss_err:.1e}, "
        f"fbeta={fbeta_ok}",
    )


def test_criterion_4_loss_composition():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        pred = torch.from_numpy(rng.uniform(0, 1, 32))
        target = torch.from_numpy((rng.uniform(0, 1, 32) > 0.5).astype(np.float64))
        expect = (
            5.0 * dice_loss(pred, target)
            + 5.0 * bce_loss(pred, target)
            + 2.0 * iou_loss(pred, target)
        )
        worst = max(worst, abs(total_loss(pred, target, LossWeights()).item() - expect.item()))
    ok = worst < 1e-9
    _report(4, "loss composition 5/5/2", ok, f"max deviation {worst:.1e}")


def test_criterion_5_overfit():
    cfg = RunConfig(seed=0, steps=500, eval_every=10**9)
    model = build_model(cfg)
    bank = gen_class_bank(cfg.num_classes, cfg.memory_subclusters, cfg.seed)
    mem = build_memory_for_model(model, bank, cfg)
    pairs = [
        gen_scene(bank, 2, 1, 0.0, mix_seed(cfg.seed, 900 + i)) for i in range(8)
    ]
    t0 = time.time()
    train(cfg, model, mem, pairs, None)
    elapsed = time.time() - t0
    report = evaluate(model, mem, pairs)
    ok = report.jaccard >= 0.85 and elapsed < 600.0
    _report(
        5,
        "overfit 8 pairs / 500 steps",
        ok,
        f"train J={report.jaccard:.3f} (need >= 0.85), {elapsed:.0f}s (budget 600s)",
    )


def test_criterion_6_mechanism_trend(trend_runs):
    jf, _ = trend_runs
    holds = 0
    lines = []
    for seed in TREND_SEEDS:
        chain = [jf[(seed, name)] for name, _ in VARIANTS]
        mono = all(a <= b + 1e-9 for a, b in zip(chain, chain[1:]))
        holds += mono
        lines.append(
            f"seed {seed}: " + " <= ".join(f"{v:.3f}" for v in chain) + f" [{mono}]"
        )
    ok = holds >= 2
    _report(6, "mechanism trend ordering", ok, f"{holds}/3 seeds; " + "; ".join(lines))


def test_criterion_7_representation_probe(trend_runs):
    _, full_models = trend_runs
    wins = 0
    details = []
    for seed in TREND_SEEDS:
        model, mem, bank = full_models[seed]
        raw, refined = linear_probe_accuracies(model, mem, bank, seed)
        wins += refined > raw
        details.append(f"seed {seed}: raw {raw:.3f} vs refined {refined:.3f}")
    ok = wins >= 2
    _report(7, "linear probe refined > raw", ok, f"{wins}/3 seeds; " + "; ".join(details))


def test_criterion_8_offscreen_suppression(trend_runs):
    _, full_models = trend_runs
    offs, ons = [], []
    for seed in TREND_SEEDS:
        model, mem, bank = full_models[seed]
        off, on = offscreen_score_gap(model, mem, bank, seed)
        offs.append(off)
        ons.append(on)
    mean_off, mean_on = float(np.mean(offs)), float(np.mean(ons))
    ok = mean_off < mean_on
    _report(
        8,
        "off-screen score suppression",
        ok,
        f"mean S off-screen {mean_off:.3f} < on-screen {mean_on:.3f}",
    )


def test_criterion_9_reproducibility(tmp_path):
    bank_a = gen_class_bank(6, 3, seed=5)
    bank_b = gen_class_bank(6, 3, seed=5)
    pairs_a, seeds_a = gen_dataset(bank_a, 6, seed=5)
    pairs_b, seeds_b = gen_dataset(bank_b, 6, seed=5)
    data_ok = seeds_a == seeds_b and all(
        _pack_record(a) == _pack_record(b) for a, b in zip(pairs_a, pairs_b)
    )

    cfg = RunConfig(seed=5)
    mem_a = build_memory_for_model(build_model(cfg), bank_a, cfg)
    mem_b = build_memory_for_model(build_model(cfg), bank_b, cfg)
    p1, p2 = tmp_path / "a.ddem", tmp_path / "b.ddem"
    save_memory(mem_a, p1)
    save_memory(mem_b, p2)
    memory_ok = p1.read_bytes() == p2.read_bytes()

    model = build_model(cfg)
    out1 = predict(model, mem_a, pairs_a[0])
    out2 = predict(model, mem_a, pairs_a[0])
    infer_ok = torch.equal(out1.mask_logits, out2.mask_logits) and torch.equal(
        out1.assembled, out2.assembled
    )

    # container round-trips, bit-exact
    mem_rt = load_memory(p1)
    p3 = tmp_path / "c.ddem"
    save_memory(mem_rt, p3)
    ckpt1, ckpt2 = tmp_path / "m1.ddck", tmp_path / "m2.ddck"
    save_checkpoint(model, ckpt1)
    save_checkpoint(load_checkpoint(ckpt1), ckpt2)
    ds_dir = tmp_path / "ds"
    save_dataset(pairs_a, ds_dir, seeds_a)
    loaded = load_dataset(ds_dir)
    roundtrip_ok = (
        p1.read_bytes() == p3.read_bytes()
        and ckpt1.read_bytes() == ckpt2.read_bytes()
        and all(a.core_equal(b) for a, b in zip(pairs_a, loaded))
    )

    ok = data_ok and memory_ok and infer_ok and roundtrip_ok
    _report(
        9,
        "bit reproducibility",
        ok,
        f"data={data_ok} memory={memory_ok} inference={infer_ok} "
        f"roundtrips={roundtrip_ok}",
    )
