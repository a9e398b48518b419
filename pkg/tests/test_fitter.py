from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erclm.appearance import Candidate, CandidateSet
from erclm.errors import AlignmentFailure, UnalignableError
from erclm.eval_harness import shape_error, synth_generate
from erclm.fitter import (FitConfig, HypothesisSampler, ModeFitResult, SamplingStrategy, candidate_weights,
                          exemplar_filter, fit_mode, hallucinate, median_mismatch, mismatch_degree, mode_rng,
                          rank_modes, refine, sample_hypothesis, select_inliers, select_mode,
                          solve_deformation)
from erclm.schemes import CONTOUR
from erclm.shape_model import ExemplarSet, SimilarityTransform


def _cand(p, conf=1.0, cov=None):
    p = np.asarray(p, dtype=float)
    cov = np.eye(2) if cov is None else np.asarray(cov, dtype=float)
    return Candidate(p, cov, conf, np.linalg.inv(cov), np.zeros(2), 0.0, p.copy())


def _exact_candidates(mode, transform, q=None, scale_cov=1.0):
    shape = transform.apply(mode.pdm.deform(np.zeros(mode.pdm.n_modes) if q is None else q))
    cov = scale_cov * transform.scale ** 2 * mode.pdm.landmark_cov
    return CandidateSet([[_cand(shape[i], 1.0, cov[i])] for i in range(len(shape))]), shape


# sampling ----------------------------------------------------------------------


def test_strategy_validation():
    with pytest.raises(ValueError):
        SamplingStrategy("random")


def test_sampler_needs_two_landmarks():
    cs = CandidateSet([[_cand((0, 0))], [], []])
    with pytest.raises(UnalignableError):
        HypothesisSampler(cs, "uniform")


def test_greedy_first_hypothesis_deterministic():
    cs = CandidateSet([[_cand((0, 0), 0.2)], [_cand((1, 0), 0.9), _cand((2, 0), 0.95)], [_cand((3, 3), 0.5)]])
    first = [sample_hypothesis(cs, "greedy").pairs for _ in range(3)]
    assert first[0] == first[1] == first[2] == ((1, 1), (2, 0))


def test_greedy_enumerates_all_pairs_once():
    cs = CandidateSet([[_cand((i, 0), 0.1 * (i + 1))] for i in range(6)])
    s = HypothesisSampler(cs, "greedy")
    rows = s.draw(100)
    assert len(rows) == 15
    pairs = {tuple(sorted((r[0], r[2]))) for r in rows}
    assert len(pairs) == 15
    assert len(s.draw(10)) == 0


def test_uniform_pair_frequencies():
    cs = CandidateSet([[_cand((i, 0))] for i in range(4)])
    rows = HypothesisSampler(cs, "uniform", np.random.default_rng(0)).draw(100_000)
    assert np.all(rows[:, 0] != rows[:, 2])
    counts = np.zeros((4, 4))
    np.add.at(counts, (rows[:, 0], rows[:, 2]), 1)
    off = counts[~np.eye(4, dtype=bool)]
    p = 1 / 12
    sd = np.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(off - 100_000 * p) < 3 * sd + 1)


def test_confidence_candidate_ratio():
    cs = CandidateSet([[_cand((0, 0), 0.9), _cand((5, 0), 0.1)], [_cand((1, 1), 1.0)]])
    rows = HypothesisSampler(cs, "confidence", np.random.default_rng(1)).draw(100_000)
    k = np.where(rows[:, 0] == 0, rows[:, 1], rows[:, 3])
    n = len(k)
    first = (k == 0).sum()
    sd = np.sqrt(n * 0.9 * 0.1)
    assert abs(first - 0.9 * n) < 3 * sd


def test_confidence_landmark_probabilities():
    cs = CandidateSet([[_cand((0, 0), 0.6)], [_cand((1, 0), 0.3)], [_cand((2, 0), 0.1)]])
    s = HypothesisSampler(cs, "confidence", np.random.default_rng(2))
    assert np.allclose(s.p_landmark.sum(), 1.0)
    assert np.allclose(s.p_landmark, [0.6, 0.3, 0.1])


# mismatch ----------------------------------------------------------------------


def test_median_examples():
    assert median_mismatch([1, 2, 100]) == 2
    assert median_mismatch([1.0, np.inf, np.inf]) == np.inf


def test_mismatch_zero_at_exact_candidates(frontal_mode):
    t = SimilarityTransform(90, 0.1, (200, 210))
    cs, _ = _exact_candidates(frontal_mode, t)
    hyp = mismatch_degree(frontal_mode.dense, t, cs)
    assert hyp.d < 1e-9


def test_mismatch_sentinel_when_majority_empty(frontal_mode):
    t = SimilarityTransform(90, 0.1, (200, 210))
    cs, _ = _exact_candidates(frontal_mode, t)
    n = len(cs.entries)
    entries = [lst if i < n // 2 - 1 else [] for i, lst in enumerate(cs.entries)]
    hyp = mismatch_degree(frontal_mode.dense, t, CandidateSet(entries))
    assert hyp.d == np.inf
    assert np.all(hyp.candidate[n // 2 - 1:] == -1)


def test_mismatch_contour_picks_best_element(frontal_mode):
    dense = frontal_mode.dense
    t = SimilarityTransform(90, 0.0, (200, 200))
    cs, _ = _exact_candidates(frontal_mode, t)
    jaw = int(np.flatnonzero(frontal_mode.pdm.kinds == CONTOUR)[3])
    members = dense.members(jaw)
    moved = t.apply(dense.mean[members[1]][None])[0]
    cs.entries[jaw] = [_cand(moved, 1.0, cs.entries[jaw][0].cov)]
    hyp = mismatch_degree(dense, t, cs)
    assert hyp.element[jaw] == members[1] and hyp.errors[jaw] < 1e-9


# inliers ----------------------------------------------------------------------


def test_select_inliers_examples():
    e = np.array([0, 0, np.inf, 0, np.inf, 0, 0, np.inf, 0, np.inf])
    sel = select_inliers(e)
    assert len(sel) == 5 and np.all(e[sel] == 0)
    assert list(sel) == [0, 1, 3, 5, 6]


def test_select_inliers_ties_lower_index():
    e = np.array([1.0, 2.0, 2.0, 2.0, 0.5, 2.0])
    assert list(select_inliers(e)) == [0, 1, 4]


def test_select_inliers_too_few_finite():
    with pytest.raises(UnalignableError):
        select_inliers([1.0, 2.0, np.inf, np.inf])


def test_select_inliers_planted_outliers(frontal_mode):
    t = SimilarityTransform(90, 0.0, (200, 200))
    cs, shape = _exact_candidates(frontal_mode, t, scale_cov=0.01)
    rng = np.random.default_rng(0)
    n = len(shape)
    bad = rng.permutation(n)[: n // 2]
    for i in bad:
        cs.entries[i] = [_cand(shape[i] + 50 * 9 * rng.normal(size=2) / 1.0 + 500, 1.0, cs.entries[i][0].cov)]
    hyp = mismatch_degree(frontal_mode.dense, t, cs)
    sel = select_inliers(hyp.errors)
    assert set(sel) == set(range(n)) - set(bad)


# exemplar filter -----------------------------------------------------------------


def _exemplar_setup(frontal_mode, shift=None):
    dense = frontal_mode.dense
    ex = frontal_mode.exemplars
    t = SimilarityTransform(80, 0.0, (200, 200))
    shape = t.apply(ex.centers[0])
    cs = CandidateSet([[_cand(p)] for p in shape])
    if shift is not None:
        for i, v in shift.items():
            cs.entries[i] = [_cand(shape[i] + v)]
    n = len(shape)
    return dense, ex, t, cs, shape, n


def test_exemplar_filter_exact_match(frontal_mode):
    dense, ex, t, cs, shape, n = _exemplar_setup(frontal_mode)
    inl = np.arange(0, n, 2)
    res = exemplar_filter(inl, dense.representative, np.zeros(n, int), cs, dense, ex)
    assert res.labels[inl].all() and not res.fallback


def test_exemplar_filter_removes_displaced_and_adds_back(frontal_mode):
    radius = frontal_mode.exemplars.radius
    far = radius * 80 * 10
    dense, ex, t, cs, shape, n = _exemplar_setup(frontal_mode, {40: np.array([far, 0.0])})
    inl = np.arange(30, 64)
    res = exemplar_filter(inl, dense.representative, np.zeros(n, int), cs, dense, ex)
    assert not res.labels[40]
    # landmark 10 was not provisional but agrees with the exemplar
    assert res.labels[10]


def test_exemplar_filter_fallback_warns(frontal_mode):
    dense, ex, t, cs, shape, n = _exemplar_setup(frontal_mode)
    inl = np.array([0, 8, 16])
    tiny = ExemplarSet(ex.centers, 1e-12)
    rng = np.random.default_rng(0)
    noisy = CandidateSet([[_cand(p + rng.normal(0, 3, 2))] for p in shape])
    with pytest.warns(RuntimeWarning):
        res = exemplar_filter(inl, dense.representative, np.zeros(n, int), noisy, dense, tiny)
    assert res.fallback and list(np.flatnonzero(res.labels)) == [0, 8, 16]


# hallucination ------------------------------------------------------------------


def _wls_oracle(phi, labels, A, b):
    """Weighted least squares via Cholesky whitening and an orthogonal solve."""
    rows, rhs = [], []
    for i in np.flatnonzero(labels):
        L = np.linalg.cholesky(A[i])
        y = np.linalg.solve(A[i], b[i])
        rows.append(L.T @ phi[i])
        rhs.append(L.T @ y)
    return np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]


def _random_instance(rng):
    n = int(rng.integers(5, 40))
    d = int(rng.integers(1, 8))
    phi = np.linalg.qr(rng.normal(size=(2 * n, d)))[0].reshape(n, 2, d)
    m = rng.normal(size=(n, 2, 2))
    A = m @ m.transpose(0, 2, 1) + 0.1 * np.eye(2)
    b = rng.normal(size=(n, 2))
    labels = rng.random(n) < rng.uniform(0.3, 1.0)
    labels[rng.permutation(n)[:max(3, (d + 1) // 2 + 1)]] = True
    return phi, labels, A, b


def test_hallucination_matches_wls_oracle_1000():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        phi, labels, A, b = _random_instance(rng)
        q, flagged = solve_deformation(phi, labels, A, b)
        assert not flagged
        worst = max(worst, np.abs(q - _wls_oracle(phi, labels, A, b)).max())
    assert worst < 1e-8


def test_hallucinate_identity_weights_is_projection(frontal_mode):
    pdm = frontal_mode.pdm
    n = pdm.n_points
    rng = np.random.default_rng(0)
    b = rng.normal(0, 0.01, (n, 2))
    q, _, _ = hallucinate(pdm, np.ones(n), np.tile(np.eye(2), (n, 1, 1)), b, clamp=False)
    ols = np.linalg.lstsq(pdm.basis, b.ravel(), rcond=None)[0]
    assert np.allclose(q, ols, atol=1e-10)


def test_hallucinate_recovers_planted_q(frontal_mode):
    pdm = frontal_mode.pdm
    n = pdm.n_points
    q_star = 0.7 * np.sqrt(pdm.eigenvalues) * np.linspace(-1, 1, pdm.n_modes)
    b = (pdm.deform(q_star) - pdm.mean)
    labels = np.ones(n)
    labels[:20] = 0
    q, shape, _ = hallucinate(pdm, labels, np.tile(np.eye(2), (n, 1, 1)), b)
    assert np.allclose(q, q_star, atol=1e-8)
    assert np.allclose(shape, pdm.deform(q_star), atol=1e-8)


def test_hallucinate_all_occluded_raises(frontal_mode):
    n = frontal_mode.pdm.n_points
    with pytest.raises(UnalignableError):
        hallucinate(frontal_mode.pdm, np.zeros(n), np.tile(np.eye(2), (n, 1, 1)), np.zeros((n, 2)))


def test_hallucinate_singular_is_ridged():
    phi = np.zeros((4, 2, 2))
    phi[:, 0, 0] = 1.0
    q, flagged = solve_deformation(phi, np.ones(4), np.tile(np.eye(2), (4, 1, 1)), np.ones((4, 2)))
    assert flagged and np.all(np.isfinite(q))


def test_hallucinate_clamps(frontal_mode):
    pdm = frontal_mode.pdm
    n = pdm.n_points
    b = (pdm.deform(10 * np.sqrt(pdm.eigenvalues)) - pdm.mean)
    q, _, _ = hallucinate(pdm, np.ones(n), np.tile(np.eye(2), (n, 1, 1)), b)
    assert np.all(np.abs(q) <= 3 * np.sqrt(pdm.eigenvalues) + 1e-12)


def test_candidate_weights_fill_flat():
    w = candidate_weights([np.diag([2.0, 4.0]), np.zeros((2, 2))])
    assert np.allclose(w[1], 3.0 * np.eye(2))


# fit_mode ------------------------------------------------------------------------


def test_fit_noiseless_instance(frontal_mode):
    inst = synth_generate(frontal_mode, 0.0, 0, 0.0, seed=3, q_spread=0.0)
    res = fit_mode(inst.candidates, frontal_mode.dense, frontal_mode.exemplars, "uniform",
                   mode_rng(0, (0, 0)))
    assert res.d < 1e-6 and res.n_hypotheses <= 10
    assert res.V == len(inst.shape)
    assert np.abs(res.shape - inst.shape).max() < 1e-4 * inst.transform.scale


@pytest.mark.filterwarnings("ignore:exemplar filter left too few inliers")
def test_fit_all_false_candidates_never_confident(frontal_mode):
    inst = synth_generate(frontal_mode, 0.0, 3, 1.0, seed=5)
    rng = np.random.default_rng(9)
    junk = CandidateSet([[_cand(rng.uniform(0, 400, 2), 1.0, c.cov) for c in lst] for lst in inst.candidates.entries])
    try:
        res = fit_mode(junk, frontal_mode.dense, frontal_mode.exemplars, "uniform", mode_rng(0, (0, 0)),
                       FitConfig(max_iter=500))
    except UnalignableError:
        return
    assert res.V < len(inst.shape) // 2


def test_fit_labels_supported_within_tau(frontal_mode):
    inst = synth_generate(frontal_mode, 0.3, 3, 1.0, seed=11)
    res = fit_mode(inst.candidates, frontal_mode.dense, frontal_mode.exemplars, "uniform", mode_rng(11, (0, 0)))
    assert res.labels.shape == (len(inst.shape),)
    assert np.all(res.errors[res.labels] <= 3.0)
    assert res.V == res.labels.sum() and res.E > 0


def test_fit_half_occluded_recovers(frontal_mode):
    # just under half of the landmarks carry only clutter
    errs = []
    for seed in range(5):
        inst = synth_generate(frontal_mode, 0.49, 3, 1.0, seed=seed)
        res = fit_mode(inst.candidates, frontal_mode.dense, frontal_mode.exemplars, "uniform", mode_rng(seed, (0, 0)))
        errs.append(shape_error(res.shape, inst, frontal_mode))
    assert np.mean(errs) < 1.5


def test_fit_seeded_is_reproducible(frontal_mode):
    inst = synth_generate(frontal_mode, 0.3, 3, 1.0, seed=2)
    a = fit_mode(inst.candidates, frontal_mode.dense, frontal_mode.exemplars, "confidence", mode_rng(4, (0, 0)))
    b = fit_mode(inst.candidates, frontal_mode.dense, frontal_mode.exemplars, "confidence", mode_rng(4, (0, 0)))
    assert np.array_equal(a.shape, b.shape) and a.n_hypotheses == b.n_hypotheses


# mode selection -----------------------------------------------------------------


def _res(pose, expr, V, E):
    return ModeFitResult((pose, expr), True, V=V, E=E)


def test_select_mode_single():
    assert select_mode([_res(2, 1, 5, 1.0)]) == (2, 1)


def test_select_mode_worked_example():
    rs = [_res(0, 0, 30, 2.0), _res(0, 1, 28, 2.0), _res(1, 0, 31, 4.0), _res(1, 1, 10, 4.0)]
    assert select_mode(rs) == (0, 0)


def test_select_mode_all_failed():
    with pytest.raises(AlignmentFailure):
        select_mode([ModeFitResult.failed((0, 0), "x")])


def _brute_force(table):
    poses = sorted({p for p, _, _, _, _ in table})
    score = {p: sum(V / E for q, _, ok, V, E in table if q == p and ok) for p in poses}
    ok_poses = [p for p in poses if any(ok for q, _, ok, _, _ in table if q == p)]
    best = max(ok_poses, key=lambda p: (score[p], -p))
    rows = [(m, V) for q, m, ok, V, _ in table if q == best and ok]
    return best, max(rows, key=lambda r: (r[1], -r[0]))[0]


def test_select_mode_matches_brute_force_10k():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n_pose = int(rng.integers(1, 6))
        table = []
        for p in range(n_pose):
            for m in range(int(rng.integers(1, 4))):
                ok = bool(rng.random() < 0.85)
                # small integer ranges make ties common
                table.append((p, m, ok, int(rng.integers(3, 8)), float(rng.integers(1, 4))))
        if not any(t[2] for t in table):
            continue
        results = [ModeFitResult((p, m), ok, V=V if ok else 0, E=E if ok else np.inf)
                   for p, m, ok, V, E in table]
        assert select_mode(results) == _brute_force(table)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 60), st.floats(0.1, 5)), min_size=1, max_size=8),
       st.floats(0.5, 4))
def test_select_mode_invariant_to_error_scale(rows, k):
    rs = [_res(p, j, V, E) for j, (p, V, E) in enumerate(rows)]
    scaled = [_res(p, j, V, E * k) for j, (p, V, E) in enumerate(rows)]
    a, b = select_mode(rs), select_mode(scaled)
    pa = {r.mode_id[0] for r in rank_modes(rs)}
    # exact float ties may flip under scaling; otherwise the choice is stable
    sa = {p: sum(r.V / r.E for r in rs if r.mode_id[0] == p) for p in pa}
    top = sorted(sa.values())[-2:]
    if len(top) < 2 or not np.isclose(top[0], top[1], rtol=1e-9):
        assert a == b


# refinement -----------------------------------------------------------------------


def _fit_for_refine(frontal_mode):
    inst = synth_generate(frontal_mode, 0.0, 0, 0.0, seed=1)
    res = fit_mode(inst.candidates, frontal_mode.dense, frontal_mode.exemplars, "uniform", mode_rng(0, (0, 0)))
    return inst, res


def test_refine_without_peaks_is_fixed_point(frontal_mode):
    inst, res = _fit_for_refine(frontal_mode)
    out = refine(res, frontal_mode.dense, inst.candidates, lambda i, p: np.zeros(len(p)), 1.0)
    assert np.array_equal(out.shape, res.shape) and not out.new_peaks.any()


def test_refine_moves_jaw_toward_planted_peak(frontal_mode):
    inst, res = _fit_for_refine(frontal_mode)
    from erclm.fitter import _contour_normals
    normals = _contour_normals(res.shape, frontal_mode.pdm.contours)
    jaw = np.flatnonzero(frontal_mode.pdm.kinds == CONTOUR)
    target = {i: res.shape[i] + 2.0 * normals[i] for i in jaw if i in normals}

    def scorer(i, pts):
        if i not in target:
            return np.zeros(len(pts))
        return 10.0 - np.sum((pts - target[i]) ** 2, axis=1)

    out = refine(res, frontal_mode.dense, inst.candidates, scorer, 0.0)
    assert not out.reverted
    for i, p in target.items():
        before = abs(np.dot(res.shape[i] - p, normals[i]))
        after = abs(np.dot(out.shape[i] - p, normals[i]))
        assert after < before
    resid = np.mean([abs(np.dot(out.shape[i] - p, normals[i])) for i, p in target.items()])
    assert resid < 0.5


def test_refine_occluded_target_is_hallucination(frontal_mode):
    inst, res = _fit_for_refine(frontal_mode)
    res.labels[50] = False
    out = refine(res, frontal_mode.dense, inst.candidates, lambda i, p: np.zeros(len(p)), 1.0)
    pdm = frontal_mode.pdm
    assert np.allclose(out.b[50], pdm.deform(res.q)[50] - pdm.mean[50])
    assert not out.A[50].any()
