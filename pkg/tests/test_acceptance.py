"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed inline and again in the terminal
summary) and then asserts the same condition, so the pytest outcome and the
printed verdict always agree. Criteria known not to hold are marked
``xfail(strict=True)``: they still run in full and print FAIL.
"""

from __future__ import annotations

import itertools
import time

import numpy as np
import pytest

from erclm.appearance import census_code, census_image, descriptor_length, hierarchical_descriptor
from erclm.eval_harness import mnle, run_ablation, shape_error, synth_generate
from erclm.fitter import (AlignConfig, FitConfig, ModeFitResult, align_face, fit_mode, median_mismatch,
                          mode_rng, select_mode, solve_deformation)
from erclm.pipeline_io import ResultRecord, load_model_file, save_model_file
from erclm.schemes import FRONTAL_68
from erclm.shape_model import procrustes_align, train_dense_pdm, train_pdm
from erclm.synthetic_faces import mode_shapes, sample_rendered_face
from erclm.training import TrainConfig, TrainingSample, train_ensemble

from test_fitter import _brute_force, _random_instance, _wls_oracle

pytestmark = pytest.mark.slow

E2E_FACES_PER_MODE = 30
E2E_SEEDS = 100


# ---------------------------------------------------------------------------
# shared fixtures


def _e2e_training_samples():
    rng = np.random.default_rng(1)
    samples = []
    for pose in range(3):
        for expr in range(2):
            for _ in range(E2E_FACES_PER_MODE):
                f = sample_rendered_face(rng, pose, expr)
                samples.append(TrainingSample(f.shape, pose, expr, f.image, f.box))
    return samples


@pytest.fixture(scope="session")
def rendered_ensemble(request):
    """Ensemble trained on rendered faces of 3 poses x 2 expressions.

    Training takes minutes on one core, so the container is cached in the
    pytest cache directory (delete ``.pytest_cache`` to retrain).
    """
    path = request.config.cache.mkdir("erclm") / f"rendered_{E2E_FACES_PER_MODE}_v2.rclm"
    if not path.exists():
        save_model_file(train_ensemble(_e2e_training_samples(), TrainConfig()), path)
    return load_model_file(path)


# ---------------------------------------------------------------------------
# criteria


def test_descriptor_dimensions(verdict):
    t0 = time.perf_counter()
    patch = np.random.default_rng(0).integers(0, 256, (35, 35)).astype(np.uint8)
    full = len(hierarchical_descriptor(patch))
    single = len(hierarchical_descriptor(patch, levels=(35,)))
    dt = time.perf_counter() - t0
    ok = full == 1796 and single == 1089 and descriptor_length() == 1796 and dt < 1.0
    verdict("descriptor dimensions", ok, f"hierarchical={full} single={single} in {dt:.3f}s")
    assert ok


def test_census_properties(verdict):
    rng = np.random.default_rng(1)
    n = 100_000
    blocks = rng.integers(0, 256, (n, 3, 3))
    blocks[: n // 10] = rng.integers(0, 256, (n // 10, 1, 1))  # uniform blocks
    a = rng.integers(1, 6, (n, 1, 1))
    b = rng.integers(-300, 300, (n, 1, 1))
    scale = rng.uniform(0.1, 5.0, (n, 1, 1))
    offset = rng.uniform(-100.0, 100.0, (n, 1, 1))
    # independent vectorized route: compare 9 * pixel against the block sum
    flat = blocks.reshape(n, 9)
    direct = ((9 * flat > flat.sum(1, keepdims=True)) * (1 << np.arange(9))).sum(1)
    violations = 0
    for k in range(n):
        c = census_code(blocks[k])
        violations += not (0 <= c <= 510)
        violations += c != direct[k]
        violations += census_code(a[k] * blocks[k] + b[k]) != c
        violations += census_code(scale[k] * blocks[k] + offset[k]) != c
        if k < n // 10:
            violations += c != 0
    # the image-level route over the same blocks
    tiled = census_image(blocks.astype(float) * scale + offset)[:, 0, 0]
    violations += int((tiled != direct).sum())
    ok = violations == 0
    verdict("census properties", ok, f"{n} blocks, {violations} violations")
    assert ok


def test_hallucination_oracle(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        phi, labels, A, b = _random_instance(rng)
        q, _ = solve_deformation(phi, labels, A, b)
        worst = max(worst, float(np.abs(q - _wls_oracle(phi, labels, A, b)).max()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-8 and dt < 10.0
    verdict("hallucination oracle", ok, f"max |dq| = {worst:.2e} over 1000 instances in {dt:.1f}s")
    assert ok


def _recovery(mode, occlusion):
    errs = []
    for seed in range(100):
        inst = synth_generate(mode, occlusion, 3, 1.0, seed)
        try:
            res = fit_mode(inst.candidates, mode.dense, mode.exemplars, "uniform",
                           mode_rng(seed, mode.mode_id), FitConfig(max_iter=2000), mode.mode_id)
            errs.append(shape_error(res.shape, inst, mode))
        except Exception:  # any failure to fit counts against the criterion
            errs.append(np.inf)
    return np.asarray(errs)


def test_robust_recovery(frontal_mode, verdict):
    occluded = _recovery(frontal_mode, 0.4)
    clean = _recovery(frontal_mode, 0.0)
    n_occ, n_clean = int((occluded < 1.5).sum()), int((clean < 1.5).sum())
    m_occ = float(occluded[occluded < 1.5].mean())
    ok = n_occ >= 99 and m_occ < 1.5 and n_clean == 100
    verdict("robust recovery", ok,
            f"40% occluded: {n_occ}/100 ok, mean error {m_occ:.2f}; 0% occluded: {n_clean}/100 ok "
            f"(sigma = 1 landmark std, clutter at 20-40 sigma)")
    assert ok


def _breakdown_cases():
    rng = np.random.default_rng(5)
    n, k = 10, 10 // 2 - 1
    for _ in range(50):
        clean = rng.exponential(1.0, n)
        for subset in itertools.combinations(range(n), k):
            bad = clean.copy()
            bad[list(subset)] += 1e6
            yield clean, bad, k


def test_median_breakdown_bounded(verdict):
    """Corrupting k < N/2 errors keeps the median finite and inside the clean
    order statistics [e_(m-k), e_(m+k)] around the median position m."""
    worst_ok = True
    count = 0
    for clean, bad, k in _breakdown_cases():
        s = np.sort(clean)
        d0, d1 = median_mismatch(clean), median_mismatch(bad)
        lo = (s[4 - k] + s[5 - k]) / 2
        hi = (s[4 + k] + s[5 + k]) / 2
        worst_ok &= bool(np.isfinite(d1) and lo <= d0 <= d1 <= hi)
        count += 1
    verdict("median breakdown (bounded by order statistics)", worst_ok,
            f"{count} corruption patterns, all medians within the order-statistic bound")
    assert worst_ok


@pytest.mark.xfail(strict=True, reason="the gap bound does not hold for the median (see notes)")
def test_median_breakdown_gap_literal(verdict):
    """Literal form: |d(bad) - d(clean)| < max adjacent gap of the clean errors."""
    fails, count = 0, 0
    for clean, bad, _ in _breakdown_cases():
        gap = np.diff(np.sort(clean)).max()
        fails += abs(median_mismatch(bad) - median_mismatch(clean)) >= gap
        count += 1
    ok = fails == 0
    verdict("median breakdown (adjacent-gap form)", ok,
            f"{fails}/{count} corruption patterns exceed the max adjacent gap")
    assert ok


def test_mode_selection_brute_force(verdict):
    rng = np.random.default_rng(0)
    checked = mismatches = 0
    while checked < 10_000:
        table = []
        for p in range(int(rng.integers(1, 6))):
            for m in range(int(rng.integers(1, 4))):
                ok = bool(rng.random() < 0.85)
                table.append((p, m, ok, int(rng.integers(3, 8)), float(rng.integers(1, 4))))
        if not any(t[2] for t in table):
            continue
        results = [ModeFitResult((p, m), ok, V=V if ok else 0, E=E if ok else np.inf)
                   for p, m, ok, V, E in table]
        mismatches += select_mode(results) != _brute_force(table)
        checked += 1
    ok = mismatches == 0
    verdict("mode selection", ok, f"{checked} random tables, {mismatches} disagreements with brute force")
    assert ok


def test_subset_gpa_compression(verdict):
    rows = []
    for seed in range(3):
        shapes = mode_shapes(np.random.default_rng(seed), 0.0, "smile", 300, identity_std=0.01, mouth_std=0.08)
        subset = procrustes_align(shapes, FRONTAL_68.anchors).aligned
        every = procrustes_align(shapes, None).aligned
        d_subset = train_pdm(subset, 0.95).n_modes
        d_all = train_pdm(every, 0.95).n_modes
        d_dense = train_dense_pdm(subset, 0.95, kinds=FRONTAL_68.kinds(), anchors=FRONTAL_68.anchors,
                                  contours=FRONTAL_68.contours).base.n_modes
        rows.append((d_subset, d_all, d_dense))
    ok = all(s <= a and d <= s for s, a, d in rows)
    verdict("subset-GPA compression direction", ok,
            "; ".join(f"subset {s} <= all {a}, dense {d} <= sparse {s}" for s, a, d in rows))
    assert ok


def test_sampling_ablation_direction(frontal_mode, verdict):
    clean = {r.strategy: r for r in run_ablation(frontal_mode, ["greedy", "confidence", "uniform"], [2000],
                                                 n_instances=50, seed=100, occlusion_rate=0.3,
                                                 clutter_count=3, sigma=1.0, fit=False)}
    adv = {r.strategy: r for r in run_ablation(frontal_mode, ["uniform", "greedy"], [2000], n_instances=20,
                                               seed=200, occlusion_rate=0.3, clutter_count=3, sigma=1.0,
                                               adversarial=True)}
    g, c, u = (clean[s].median_hypotheses for s in ("greedy", "confidence", "uniform"))
    fr_u, fr_g = adv["uniform"].failure_rate, adv["greedy"].failure_rate
    ok = g <= c <= u and fr_u <= fr_g
    verdict("sampling ablation direction", ok,
            f"median hypotheses greedy {g:g} <= confidence {c:g} <= uniform {u:g}; "
            f"adversarial FR uniform {fr_u:.2f} <= greedy {fr_g:.2f}")
    assert ok


def test_determinism(rendered_ensemble, verdict):
    rng = np.random.default_rng(5000)
    faces = [sample_rendered_face(rng, j % 3, j % 2) for j in range(2)]
    runs = {}
    for workers in (1, 2, 1):
        recs = []
        for j, f in enumerate(faces):
            res = align_face(f.image, f.box, rendered_ensemble, AlignConfig(seed=7, workers=workers))
            recs.append(ResultRecord.from_alignment(f"face{j}", res, f.box).to_json())
        runs.setdefault(workers, []).append(recs)
    reference = runs[1][0]
    ok = all(r == reference for rs in runs.values() for r in rs)
    verdict("determinism", ok, "workers 1, 2 and 1 again give byte-identical result records")
    assert ok


def test_occlusion_awareness(frontal_mode, verdict):
    precisions, complete = [], True
    for seed in range(30):
        inst = synth_generate(frontal_mode, 0.4, 3, 1.0, 300 + seed)
        res = fit_mode(inst.candidates, frontal_mode.dense, frontal_mode.exemplars, "uniform",
                       mode_rng(300 + seed, frontal_mode.mode_id), FitConfig(), frontal_mode.mode_id)
        labels = np.asarray(res.labels, dtype=bool)
        complete &= labels.shape == (frontal_mode.pdm.n_points,)
        precisions.append((labels & inst.visible).sum() / max(labels.sum(), 1))
    worst = float(min(precisions))
    ok = complete and worst >= 0.9
    verdict("occlusion-awareness contract", ok,
            f"all landmarks labeled: {complete}; worst visible-label precision {worst:.3f} over 30 instances")
    assert ok


@pytest.mark.xfail(strict=True, reason="mode confusion between neighbouring yaw modes (see notes)")
def test_end_to_end_planted(rendered_ensemble, verdict):
    rng = np.random.default_rng(1000)
    correct, errors = 0, []
    for j in range(E2E_SEEDS):
        pose, expr = j % 3, (j // 3) % 2
        face = sample_rendered_face(rng, pose, expr)
        res = align_face(face.image, face.box, rendered_ensemble, AlignConfig(seed=j))
        correct += bool(res.success and res.mode_id == (pose, expr))
        errors.append(mnle(res.shape, face.shape) if res.success else np.inf)
    e = np.asarray(errors)
    m = float(e[np.isfinite(e)].mean())
    ok = correct >= 95 and m < 0.03
    verdict("end-to-end planted pipeline", ok,
            f"correct mode {correct}/{E2E_SEEDS}, MNLE {m:.4f}, median {np.median(e):.4f}, "
            f"failed alignments {int(np.isinf(e).sum())}")
    assert ok
