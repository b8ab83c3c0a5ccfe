"""Exit criteria for the engine, one test per criterion.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time

import numpy as np

from active_teaching.cli import main
from active_teaching.config import EngineConfig
from active_teaching.geometry import nms
from active_teaching.prototypes import (
    PrototypeBank,
    cosine_similarity,
    ema_update,
    local_prototypes,
)
from active_teaching.roicm import Verdict, partition_all
from active_teaching.scoring import MatchedPair, kl_divergence, pseudo_label_weight, uncertainty
from active_teaching.selection import fuse_scores, plan_round
from active_teaching.simulator import (
    OracleSkill,
    SyntheticPoolSpec,
    generate_pool,
    labeled_features,
    predict,
    run_loop,
)

from conftest import make_roi
from oracles import nms_by_subset_enumeration, plan_by_full_sort

BENCHMARK = SyntheticPoolSpec(num_images=500, num_classes=8, dim=16, seed=42)


def test_formula_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []

    # KL: zero on identical inputs, Gibbs' inequality on random pairs
    p = rng.dirichlet(np.ones(6), size=10_000)
    q = rng.dirichlet(np.ones(6), size=10_000)
    if any(kl_divergence([MatchedPair(make_roi(probs=x), make_roi(probs=x), 1.0)]) != 0.0 for x in p[:2000]):
        failures.append("kl identical")
    kls = [kl_divergence([MatchedPair(make_roi(probs=x), make_roi(probs=y), 1.0)]) for x, y in zip(p, q)]
    if min(kls) < -1e-9:
        failures.append("kl gibbs")

    # entropy bounds and the uniform maximum
    unc = [uncertainty([make_roi(probs=x)]) for x in p[:5000]]
    if min(unc) < 0 or max(unc) > math.log(6) + 1e-9:
        failures.append("uncertainty bounds")
    if abs(uncertainty([make_roi(probs=np.full(6, 1 / 6))]) - math.log(6)) > 1e-9:
        failures.append("uncertainty uniform")

    ws = [pseudo_label_weight(max(0.0, k)) for k in kls]
    if not all(0.0 < w <= 1.0 for w in ws):
        failures.append("weight range")

    # cosine scale invariance
    f = rng.normal(size=(10_000, 8))
    c = rng.uniform(1e-3, 1e3, size=10_000)
    if any(abs(cosine_similarity(x, k * x) - 1.0) > 1e-12 for x, k in zip(f, c)):
        failures.append("cosine scale")

    # EMA contraction, exact per coordinate: g' - v == alpha * (g - v)
    alpha = 0.75
    g = rng.normal(size=(8, 5)).round(3)
    v = rng.normal(size=(8, 5)).round(3)
    out = ema_update(PrototypeBank(g, np.ones(8, bool), alpha, 0.7), v).prototypes
    if not np.allclose(np.abs(out - v), alpha * np.abs(g - v), rtol=0, atol=1e-15):
        failures.append("ema contraction")

    if fuse_scores(0.3, 0.4, 2) != 0.5:
        failures.append("fuse 3-4-5")
    ab = rng.uniform(0, 1, size=(10_000, 2))
    if any(abs(fuse_scores(a, b, 1) - (a + b)) > 1e-12 for a, b in ab):
        failures.append("fuse L1")

    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10
    criterion("1 formula suite", ok, f"failures={failures} runtime={elapsed:.1f}s (<10s)")
    assert ok


def _random_pool(rng, n):
    ids = [f"im{k:03d}" for k in rng.permutation(n)]
    if rng.uniform() < 0.5:
        # coarse grid: plenty of exact ties
        unc = rng.integers(0, 4, size=n).astype(float)
        div = rng.integers(0, 4, size=n).astype(float) * 0.25
    else:
        unc = rng.uniform(0, math.log(8), size=n)
        div = rng.uniform(0, 1, size=n)
    return [(i, float(u), float(d)) for i, u, d in zip(ids, unc, div)]


def test_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    plan_hits = 0
    for _ in range(200):
        pool = _random_pool(rng, int(rng.integers(1, 26)))
        h = int(rng.integers(1, 11))
        p = int(rng.choice([1, 2, 3]))
        if list(plan_round(pool, h, p).selected) == plan_by_full_sort(pool, h, p):
            plan_hits += 1

    nms_hits = 0
    for _ in range(500):
        rois = []
        for _ in range(10):
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(5, 30, 2)
            rois.append(make_roi((x, y, x + w, y + h), float(rng.uniform())))
        got = {id(r) for r in nms(rois, 0.5, 0.3)}
        want = nms_by_subset_enumeration([r.box.as_tuple() for r in rois],
                                         [r.confidence for r in rois], 0.5, 0.3)
        nms_hits += got == {id(rois[i]) for i in want}

    elapsed = time.perf_counter() - t0
    ok = plan_hits == 200 and nms_hits == 500 and elapsed < 30
    criterion("2 oracle equivalence", ok,
              f"plan {plan_hits}/200, nms {nms_hits}/500, runtime={elapsed:.1f}s (<30s)")
    assert ok


def test_partition_totality(criterion):
    spec = SyntheticPoolSpec(num_images=250, num_classes=8, dim=16, seed=7)
    pool = generate_pool(spec)
    cfg = EngineConfig(num_classes=8, dim=16)
    settings = [OracleSkill(), OracleSkill(flip_rate=0.5, decorrelation=1.0),
                OracleSkill(box_jitter=0.5, confidence_drop=1.0)]
    total = exhaustive = 0
    for oracle in settings:
        preds = {gt.image_id: predict(oracle, gt, 0.05, 8) for gt in pool.images}
        results = partition_all(preds, cfg)
        total += len(results)
        exhaustive += len({r.image_id for r in results}) == len(preds) == len(results)
        assert all(isinstance(r.verdict, Verdict) for r in results)

    preds = {gt.image_id: predict(OracleSkill.noiseless(), gt, 0.05, 8) for gt in pool.images}
    clean = partition_all(preds, cfg)
    total += len(clean)
    all_consistent = all(r.verdict is Verdict.CONSISTENT and r.d_kl == 0.0 and r.weight == 1.0
                         for r in clean)
    ok = total == 1000 and exhaustive == 3 and all_consistent
    criterion("3 partition totality", ok,
              f"{total} images, one verdict each={exhaustive == 3}, noiseless all consistent={all_consistent}")
    assert ok


def test_prototype_convergence(criterion):
    pool = generate_pool(BENCHMARK)
    oracle = OracleSkill.noiseless()
    bank = PrototypeBank.empty(8, 16, alpha=0.9, sim_threshold=0.7)
    per_round = BENCHMARK.num_images // 20
    for r in range(1, 21):
        labeled = pool.images[: r * per_round]
        feats = [f for gt in labeled for f in labeled_features(oracle, gt, r / 20)]
        bank = ema_update(bank, local_prototypes(feats, 8, 16))
    sims = [cosine_similarity(bank.prototypes[k], pool.centroids[k])
            for k in range(8) if bank.present[k]]
    ok = len(sims) == 8 and min(sims) >= 0.99
    criterion("4 prototype convergence", ok,
              f"present={len(sims)}/8 min cosine to centroid={min(sims):.5f} (>=0.99)")
    assert ok


def test_diversity_trend(criterion):
    t0 = time.perf_counter()
    pool = generate_pool(BENCHMARK)
    oracle = OracleSkill()
    combined = run_loop(pool, oracle, 5, 25, strategy="combined", seed=42)
    unc_only = run_loop(pool, oracle, 5, 25, strategy="uncertainty", seed=42)
    cov_c = [r.selected_coverage for r in combined.rounds]
    cov_u = [r.selected_coverage for r in unc_only.rounds]
    wins = sum(a >= b for a, b in zip(cov_c, cov_u))
    rand_cov = [np.mean([r.selected_coverage for r in run_loop(pool, oracle, 5, 25, strategy="random",
                                                               seed=s).rounds]) for s in range(10)]
    elapsed = time.perf_counter() - t0
    ok = wins >= 4 and np.mean(cov_c) >= np.mean(rand_cov) and elapsed < 60
    criterion("5 diversity trend", ok,
              f"combined {cov_c} vs uncertainty {cov_u} ({wins}/5 rounds >=); "
              f"combined mean {np.mean(cov_c):.2f} vs random mean {np.mean(rand_cov):.2f}; runtime={elapsed:.1f}s")
    assert ok


def test_ablation_direction(criterion):
    t0 = time.perf_counter()
    strategies = ("combined", "uncertainty", "diversity", "random")
    cov = {s: [] for s in strategies}
    red = {s: [] for s in strategies}
    for seed in range(10):
        pool = generate_pool(SyntheticPoolSpec(seed=seed))
        oracle = OracleSkill(seed=seed)
        for s in strategies:
            trace = run_loop(pool, oracle, 5, 25, strategy=s, seed=seed)
            cov[s].append(trace.final_quality.classes_covered)
            red[s].append(trace.s_unc_reduction)
    elapsed = time.perf_counter() - t0

    vs_random = sum(c >= rc and r >= rr for c, rc, r, rr in
                    zip(cov["combined"], cov["random"], red["combined"], red["random"]))
    means_ok = {
        s: np.mean(cov["combined"]) >= np.mean(cov[s]) and np.mean(red["combined"]) >= np.mean(red[s])
        for s in ("uncertainty", "diversity")
    }
    ok = vs_random >= 8 and all(means_ok.values()) and elapsed < 300
    detail = (f"full>=random in {vs_random}/10 seeds; mean coverage "
              + ", ".join(f"{s}={np.mean(cov[s]):.2f}" for s in strategies)
              + "; mean s_unc reduction "
              + ", ".join(f"{s}={np.mean(red[s]):.4f}" for s in strategies)
              + f"; full>=ablation means {means_ok}; runtime={elapsed:.0f}s")
    criterion("6 ablation direction", ok, detail)
    assert ok


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_replay_determinism(tmp_path, criterion):
    for name in ("a", "b"):
        rc = main(["loop", "--rounds", "5", "--budget", "25", "--seed", "42", "--out", str(tmp_path / name)])
        assert rc == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    ok = a == b and len(a) > 0
    criterion("7 replay determinism", ok, f"{len(a)} files, byte-identical={a == b}")
    assert ok
