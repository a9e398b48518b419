"""Occlusion-aware fitting: hypothesize-and-test over landmark visibility,
exemplar filtering, closed-form shape hallucination, mode selection and
contour refinement.

Conventions:
    * The *model frame* is the normalized frame of a mode's PDM. The
      *observation frame* is where candidates live (reference pixels for
      images, plain pixels for synthetic instances). A fit carries the
      similarity ``transform`` from model to observation frame.
    * Mahalanobis distances use the PDM's per-landmark covariance and are
      measured in the model frame (candidates are mapped back by the
      inverse transform).
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .appearance import (CandidateSet, SearchImage, extract_candidates, merge_expression_candidates,
                         reference_size, reference_transform, response_map, warp_to_reference)
from .errors import AlignmentFailure, UnalignableError
from .schemes import CONTOUR
from .shape_model import DensePdm, ExemplarSet, SimilarityTransform, fit_similarity

log = logging.getLogger(__name__)

TAU = 3.0
MIN_INLIERS = 3
EARLY_EXIT = 0.05
MAX_ITER = 2000
BATCH = 64
TOP_R = 3
RIDGE = 1e-6
CLAMP_STD = 3.0
PRIOR_NOISE = 0.1
REFIT_ROUNDS = 10
STRATEGIES = ("uniform", "confidence", "greedy")
_TINY = 1e-12


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.kind!r}; choose from {STRATEGIES}")


@dataclass
class Hypothesis:
    """Two (landmark, candidate) pairs and what they imply."""

    pairs: tuple
    transform: SimilarityTransform | None = None
    d: float = np.inf
    errors: np.ndarray | None = None
    element: np.ndarray | None = None
    candidate: np.ndarray | None = None


@dataclass
class ModeFitResult:
    """Outcome of fitting one mode.

    ``shape`` and ``dense_shape`` are in the observation frame; ``labels``
    marks landmarks supported by a candidate within ``TAU``.
    """

    mode_id: tuple
    success: bool
    shape: np.ndarray | None = None
    dense_shape: np.ndarray | None = None
    labels: np.ndarray | None = None
    V: int = 0
    E: float = np.inf
    d: float = np.inf
    n_hypotheses: int = 0
    transform: SimilarityTransform | None = None
    q: np.ndarray | None = None
    errors: np.ndarray | None = None
    support: np.ndarray | None = None
    singular: bool = False
    message: str = ""

    @classmethod
    def failed(cls, mode_id, message: str, n_hypotheses: int = 0) -> "ModeFitResult":
        return cls(tuple(mode_id), False, message=message, n_hypotheses=n_hypotheses)


@dataclass
class AlignmentResult:
    """Final output of :func:`align_face`.

    ``shape`` is in image coordinates and holds every landmark, including
    hallucinated occluded ones; ``labels[i]`` is 1 for landmarks judged
    visible. ``ranked`` holds the top mode fits (best first).
    """

    success: bool
    shape: np.ndarray | None = None
    labels: np.ndarray | None = None
    mode_id: tuple | None = None
    d: float = np.inf
    V: int = 0
    E: float = np.inf
    ranked: list = field(default_factory=list)
    alternates: list = field(default_factory=list)
    message: str = ""


# ---------------------------------------------------------------------------
# hypothesis sampling


def _max_conf(conf: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return np.where(valid, conf, -np.inf).max(axis=1)


class HypothesisSampler:
    """Draws landmark/candidate pairs for one candidate set.

    ``uniform``: landmarks uniform over those with candidates, candidates
    uniform within. ``confidence``: landmark probability proportional to its
    best candidate confidence and candidate probability proportional to
    confidence (one distribution over landmarks plus one per landmark).
    ``greedy``: landmarks ranked by best confidence, pairs enumerated by
    (lower rank of the pair, then higher rank) using top candidates only.
    """

    def __init__(self, candidates: CandidateSet, kind: str = "uniform",
                 rng: np.random.Generator | None = None):
        SamplingStrategy(kind)
        self.kind = kind
        self.rng = np.random.default_rng(0) if rng is None else rng
        _, conf, valid = candidates.padded()
        self.counts = valid.sum(axis=1)
        self.landmarks = np.flatnonzero(self.counts > 0)
        if len(self.landmarks) < 2:
            raise UnalignableError(f"need candidates on at least 2 landmarks, found {len(self.landmarks)}")
        conf = np.where(valid, np.maximum(conf, 0.0), 0.0)
        best = conf.max(axis=1)
        if kind == "confidence":
            w = best[self.landmarks]
            self.p_landmark = w / w.sum() if w.sum() > 0 else np.full(len(w), 1.0 / len(w))
            tot = conf.sum(axis=1, keepdims=True)
            # landmarks with zero total confidence fall back to uniform
            cw = np.where(tot > 0, conf, valid.astype(float))
            self.cum = np.cumsum(cw, axis=1)
            self.cum[~valid] = np.inf
            self.cum_total = cw.sum(axis=1)
        if kind == "greedy":
            order = np.lexsort((self.landmarks, -best[self.landmarks]))
            self.ranked = self.landmarks[order]
            self.top = np.argmax(np.where(valid, conf, -np.inf), axis=1)
            self.cursor = 0

    @property
    def exhaustible(self) -> bool:
        return self.kind == "greedy"

    @property
    def n_pairs(self) -> int:
        k = len(self.landmarks)
        return k * (k - 1) // 2

    def draw(self, count: int) -> np.ndarray:
        """``(B, 4)`` rows ``(i1, k1, i2, k2)``; greedy may return fewer."""
        if self.kind == "greedy":
            p = np.arange(self.cursor, min(self.cursor + count, self.n_pairs))
            self.cursor += len(p)
            hi = np.floor((1 + np.sqrt(1 + 8 * p)) / 2).astype(np.int64)
            # guard float rounding of the triangular root
            hi -= (hi * (hi - 1) // 2 > p)
            hi += ((hi + 1) * hi // 2 <= p)
            lo = p - hi * (hi - 1) // 2
            i1, i2 = self.ranked[lo], self.ranked[hi]
            return np.stack([i1, self.top[i1], i2, self.top[i2]], axis=1)

        rng = self.rng
        n = len(self.landmarks)
        if self.kind == "uniform":
            a = rng.integers(0, n, count)
            b = rng.integers(0, n - 1, count)
            b = b + (b >= a)
            i1, i2 = self.landmarks[a], self.landmarks[b]
            k1 = np.floor(rng.random(count) * self.counts[i1]).astype(np.int64)
            k2 = np.floor(rng.random(count) * self.counts[i2]).astype(np.int64)
            return np.stack([i1, k1, i2, k2], axis=1)

        a = rng.choice(n, size=count, p=self.p_landmark)
        b = rng.choice(n, size=count, p=self.p_landmark)
        same = a == b
        while same.any():
            b[same] = rng.choice(n, size=int(same.sum()), p=self.p_landmark)
            same = a == b
        i1, i2 = self.landmarks[a], self.landmarks[b]
        k1 = self._pick(i1, rng.random(count))
        k2 = self._pick(i2, rng.random(count))
        return np.stack([i1, k1, i2, k2], axis=1)

    def _pick(self, idx: np.ndarray, u: np.ndarray) -> np.ndarray:
        target = (u * self.cum_total[idx])[:, None]
        k = (self.cum[idx] <= target).sum(axis=1)
        return np.minimum(k, self.counts[idx] - 1)


def sample_hypothesis(candidates: CandidateSet, strategy: SamplingStrategy | str = "uniform",
                      rng: np.random.Generator | None = None) -> Hypothesis:
    """One hypothesis skeleton (two landmark/candidate pairs)."""
    if isinstance(strategy, str):
        strategy = SamplingStrategy(strategy)
    rng = np.random.default_rng(strategy.seed) if rng is None else rng
    row = HypothesisSampler(candidates, strategy.kind, rng).draw(1)[0]
    return Hypothesis(((int(row[0]), int(row[1])), (int(row[2]), int(row[3]))))


# ---------------------------------------------------------------------------
# mismatch


def median_mismatch(errors) -> float:
    """Median of per-landmark errors (infinite entries count)."""
    e = np.asarray(errors, dtype=float)
    return float(np.median(e))


class _MismatchEvaluator:
    """Vectorized mismatch degree for batches of similarity transforms."""

    def __init__(self, dense: DensePdm, candidates: CandidateSet):
        pdm = dense.base
        if candidates.n_landmarks != pdm.n_points:
            raise ValueError(f"candidate set has {candidates.n_landmarks} landmarks, model has {pdm.n_points}")
        self.dense = dense
        self.n = pdm.n_points
        means, _, valid = candidates.padded()
        self.means = means
        self.valid = valid
        self.yc = np.where(valid, means[..., 0] + 1j * means[..., 1], np.nan + 0j)
        self.group = dense.group
        self.starts = np.flatnonzero(np.r_[True, np.diff(self.group) != 0])
        inv = np.linalg.inv(pdm.landmark_cov)
        self.inv = inv
        ie = inv[self.group]
        self.ia, self.ib, self.ic = ie[:, 0, 0], ie[:, 0, 1], ie[:, 1, 1]

    def element_errors(self, z: np.ndarray, t: np.ndarray, dense_model: np.ndarray):
        """Squared Mahalanobis ``(B, N^D, K)`` of candidates vs dense points.

        ``z``/``t`` are complex model-to-observation similarities, and
        ``dense_model`` is ``(N^D, 2)`` or ``(B, N^D, 2)`` model-frame points.
        """
        zc = (self.yc[None] - t[:, None, None]) / z[:, None, None]        # (B, N, K)
        zg = zc[:, self.group, :]                                           # (B, ND, K)
        xd = dense_model[..., 0] + 1j * dense_model[..., 1]
        diff = zg - (xd[..., None] if xd.ndim == 2 else xd[None, :, None])
        dx, dy = diff.real, diff.imag
        m2 = self.ia[:, None] * dx * dx + 2 * self.ib[:, None] * dx * dy + self.ic[:, None] * dy * dy
        return np.where(np.isnan(m2), np.inf, m2)

    def landmark_errors(self, z, t, dense_model):
        """Per landmark: min error, chosen dense element and candidate."""
        m2 = self.element_errors(z, t, dense_model)
        kbest = np.argmin(m2, axis=2)
        ebest = np.take_along_axis(m2, kbest[..., None], axis=2)[..., 0]    # (B, ND)
        per = np.minimum.reduceat(ebest, self.starts, axis=1)              # (B, N)
        # first element achieving the group minimum
        hit = ebest == per[:, self.group]
        idx = np.arange(ebest.shape[1])
        first = np.where(hit, idx[None], ebest.shape[1])
        elem = np.minimum.reduceat(first, self.starts, axis=1)
        cand = np.take_along_axis(kbest, np.minimum(elem, ebest.shape[1] - 1), axis=1)
        err = np.sqrt(per)
        cand = np.where(np.isfinite(err), cand, -1)
        elem = np.where(np.isfinite(err), elem, -1)
        return err, elem, cand


def mismatch_degree(dense: DensePdm, transform: SimilarityTransform, candidates: CandidateSet,
                    q=None) -> Hypothesis:
    """Median Mahalanobis mismatch of the transformed dense shape.

    For every landmark the error is the smallest Mahalanobis distance between
    any candidate and any element of the landmark's dense group (infinite
    when it has no candidates); the chosen element and candidate form the
    selection map. ``d`` is the median over all landmarks.
    """
    ev = _MismatchEvaluator(dense, candidates)
    shape = dense.mean if q is None else dense.dense_points(dense.base.deform(q))
    z = np.array([transform.complex_factor])
    t = np.array([complex(*transform.translation)])
    err, elem, cand = ev.landmark_errors(z, t, shape)
    return Hypothesis((), transform, median_mismatch(err[0]), err[0], elem[0], cand[0])


# ---------------------------------------------------------------------------
# inlier selection, exemplar filter, hallucination


def select_inliers(errors, n_points: int | None = None) -> np.ndarray:
    """Indices of the ``floor(N/2)`` smallest finite errors (ties: lower index)."""
    e = np.asarray(errors, dtype=float)
    n = len(e) if n_points is None else n_points
    finite = np.isfinite(e)
    if finite.sum() < MIN_INLIERS:
        raise UnalignableError(f"only {int(finite.sum())} landmarks have finite error")
    order = np.argsort(e, kind="stable")
    order = order[finite[order]]
    return np.sort(order[: n // 2])


@dataclass
class ExemplarFilterResult:
    labels: np.ndarray
    element: np.ndarray
    candidate: np.ndarray
    exemplar: int
    transform: SimilarityTransform
    fallback: bool


def exemplar_filter(inliers, element, candidate, candidates: CandidateSet, dense: DensePdm,
                    exemplars: ExemplarSet, radius: float | None = None,
                    max_rounds: int = 10) -> ExemplarFilterResult:
    """Re-select inliers by agreement with the closest exemplar shape.

    Each exemplar is aligned to the provisional inliers with a least-squares
    similarity and the one with the lowest mean residual wins. Then every
    landmark (provisional or not) with a candidate within ``radius`` of the
    aligned exemplar becomes an inlier; the alignment is refitted on that set
    and the selection repeated until it stops changing. If fewer than
    ``MIN_INLIERS`` survive, the provisional set is kept and a warning issued.

    Args:
        inliers: Provisional inlier landmark indices.
        element: Per landmark, selected dense element (from the mismatch).
        candidate: Per landmark, selected candidate index.
        radius: Model-frame distance threshold (defaults to the exemplar set's).
    """
    inliers = np.asarray(inliers, dtype=int)
    if len(inliers) == 0:
        raise ValueError("exemplar filter needs a nonempty inlier set")
    radius = exemplars.radius if radius is None else radius
    means, _, valid = candidates.padded()
    n = dense.base.n_points
    ex_dense = np.einsum("dn,knc->kdc", dense.weights, exemplars.centers)     # (K, ND, 2)
    obs = means[inliers, candidate[inliers]]

    best = None
    for k in range(exemplars.size):
        try:
            t = fit_similarity(ex_dense[k, element[inliers]], obs)
        except Exception:
            continue
        err = np.linalg.norm(t.inverse().apply(obs) - ex_dense[k, element[inliers]], axis=1).mean()
        if best is None or err < best[0]:
            best = (err, k, t)
    if best is None:
        raise UnalignableError("inlier configuration is degenerate")
    _, k, t = best

    group = dense.group
    starts = np.flatnonzero(np.r_[True, np.diff(group) != 0])
    n_dense = len(group)
    labels = np.zeros(n, dtype=bool)
    new_elem = np.full(n, -1)
    new_cand = np.full(n, -1)
    for _ in range(max_rounds):
        pts = t.inverse().apply(means.reshape(-1, 2)).reshape(means.shape)    # (N, K, 2)
        dist = np.linalg.norm(pts[group] - ex_dense[k][:, None, :], axis=2)   # (ND, K)
        dist = np.where(valid[group], dist, np.inf)
        kbest = np.argmin(dist, axis=1)
        dbest = dist[np.arange(n_dense), kbest]
        per = np.minimum.reduceat(dbest, starts)
        first = np.where(dbest == per[group], np.arange(n_dense), n_dense)
        elem = np.minimum.reduceat(first, starts)
        sel = per <= radius
        if sel.sum() < 2:
            break
        changed = not np.array_equal(sel, labels)
        labels = sel
        new_elem = np.where(sel, elem, -1)
        new_cand = np.where(sel, kbest[np.minimum(elem, n_dense - 1)], -1)
        if not changed:
            break
        idx = np.flatnonzero(sel)
        try:
            t = fit_similarity(ex_dense[k, new_elem[idx]], means[idx, new_cand[idx]])
        except Exception:
            break

    if labels.sum() < MIN_INLIERS:
        warnings.warn("exemplar filter left too few inliers; keeping the provisional set",
                      RuntimeWarning, stacklevel=2)
        labels = np.zeros(n, dtype=bool)
        labels[inliers] = True
        new_elem = np.full(n, -1)
        new_cand = np.full(n, -1)
        new_elem[inliers] = element[inliers]
        new_cand[inliers] = candidate[inliers]
        return ExemplarFilterResult(labels, new_elem, new_cand, k, t, True)
    return ExemplarFilterResult(labels, new_elem, new_cand, k, t, False)


def solve_deformation(basis_rows: np.ndarray, labels, A: np.ndarray, b: np.ndarray,
                      ridge: float = RIDGE) -> tuple[np.ndarray, bool]:
    """Closed-form ``q = (Phi^T A Phi)^-1 Phi^T b`` with label-masked blocks.

    Args:
        basis_rows: ``(N, 2, d)`` basis rows of the landmarks (or elements) used.
        labels: ``(N,)`` visibility flags ``o_i``.
        A: ``(N, 2, 2)`` per-landmark weights.
        b: ``(N, 2)`` per-landmark linear terms.
        ridge: Added to the diagonal when the system is singular.

    Returns:
        ``(q, regularized)``.
    """
    o = np.asarray(labels, dtype=float)
    if o.sum() < MIN_INLIERS:
        raise UnalignableError(f"need at least {MIN_INLIERS} visible landmarks, got {int(o.sum())}")
    phi = np.asarray(basis_rows, dtype=float)
    aw = o[:, None, None] * np.asarray(A, dtype=float)
    bw = o[:, None] * np.asarray(b, dtype=float)
    m = np.einsum("nki,nkl,nlj->ij", phi, aw, phi)
    rhs = np.einsum("nki,nk->i", phi, bw)
    d = m.shape[0]
    cond_ok = np.linalg.cond(m) < 1e12 if d else True
    if cond_ok:
        return np.linalg.solve(m, rhs), False
    return np.linalg.solve(m + ridge * np.eye(d), rhs), True


def hallucinate(pdm, labels, A, b, elements=None, clamp: bool = True):
    """Deformation from visible landmarks and the full model-frame shape.

    Args:
        pdm: ``PointDistributionModel`` or ``DensePdm``.
        labels: ``(N,)`` visibility flags.
        A: ``(N, 2, 2)`` weights per landmark.
        b: ``(N, 2)`` linear terms (``A_i`` times the target displacement).
        elements: For a dense model, the dense element used per landmark
            (defaults to representatives).
        clamp: Clamp ``q`` to +-3 standard deviations.

    Returns:
        ``(q, sparse model-frame shape, regularized flag)``.
    """
    base = pdm.base if isinstance(pdm, DensePdm) else pdm
    if isinstance(pdm, DensePdm):
        el = pdm.representative if elements is None else np.where(np.asarray(elements) >= 0, elements,
                                                                   pdm.representative)
        rows = pdm.basis_rows[el]
    else:
        rows = base.basis_rows
    q, flagged = solve_deformation(rows, labels, A, b)
    if flagged:
        log.debug("hallucination system singular; ridge applied")
    if clamp:
        q = base.clamp(q, CLAMP_STD)
    return q, base.deform(q), flagged


def candidate_weights(raw) -> np.ndarray:
    """Per-inlier PSD weights from candidate curvatures.

    Candidates without curvature (flat or tiny segments) get an isotropic
    weight equal to the mean of the others (identity if none have any).
    """
    a = np.array([0.5 * (m + m.T) for m in raw], dtype=float).reshape(-1, 2, 2)
    tr = np.trace(a, axis1=1, axis2=2)
    good = np.isfinite(tr) & (tr > _TINY)
    fill = 0.5 * tr[good].mean() if good.any() else 1.0
    a[~good] = fill * np.eye(2)
    return a


# ---------------------------------------------------------------------------
# mode fitting


@dataclass
class FitConfig:
    max_iter: int = MAX_ITER
    tau: float = TAU
    early_exit: float = EARLY_EXIT
    batch: int = BATCH
    exemplar_radius: float | None = None
    refit_rounds: int = REFIT_ROUNDS
    consensus_rounds: int = 3
    grow_gate: float | None = None   # defaults to 4 * tau; 0 disables growth


def _hypothesis_transforms(dense: DensePdm, means: np.ndarray, rows: np.ndarray):
    xm = dense.base.mean
    x1 = xm[rows[:, 0], 0] + 1j * xm[rows[:, 0], 1]
    x2 = xm[rows[:, 2], 0] + 1j * xm[rows[:, 2], 1]
    y1 = means[rows[:, 0], rows[:, 1]]
    y2 = means[rows[:, 2], rows[:, 3]]
    y1 = y1[:, 0] + 1j * y1[:, 1]
    y2 = y2[:, 0] + 1j * y2[:, 1]
    dx = x2 - x1
    ok = (np.abs(dx) > _TINY) & (np.abs(y2 - y1) > _TINY)
    z = np.where(ok, (y2 - y1) / np.where(ok, dx, 1.0), 1.0)
    t = np.where(ok, y1 - z * x1, 0.0)
    return z, t, ok


def search_hypotheses(dense: DensePdm, candidates: CandidateSet, strategy: str = "uniform",
                      rng: np.random.Generator | None = None, config: FitConfig | None = None):
    """Run the hypothesize-and-test loop.

    Returns:
        ``(best Hypothesis, number of hypotheses evaluated)``. Evaluation stops
        at the first hypothesis with ``d < early_exit`` or after ``max_iter``.
    """
    cfg = config or FitConfig()
    sampler = HypothesisSampler(candidates, strategy, rng)
    ev = _MismatchEvaluator(dense, candidates)
    mean_dense = dense.mean
    best_d, best_row, used = np.inf, None, 0
    while used < cfg.max_iter:
        rows = sampler.draw(min(cfg.batch, cfg.max_iter - used))
        if len(rows) == 0:
            break
        z, t, ok = _hypothesis_transforms(dense, ev.means, rows)
        err, _, _ = ev.landmark_errors(z, t, mean_dense)
        d = np.median(err, axis=1)
        d = np.where(ok, d, np.inf)
        good = np.flatnonzero(d < cfg.early_exit)
        if len(good):
            j = int(good[0])
            best_d, best_row = float(d[j]), rows[j]
            used += j + 1
            break
        j = int(np.argmin(d))
        if d[j] < best_d:
            best_d, best_row = float(d[j]), rows[j]
        used += len(rows)
    if best_row is None or not np.isfinite(best_d):
        raise UnalignableError("no hypothesis explains at least half of the landmarks")
    z, t, _ = _hypothesis_transforms(dense, ev.means, best_row[None])
    transform = SimilarityTransform.from_complex(z[0], t[0])
    err, elem, cand = ev.landmark_errors(z, t, mean_dense)
    hyp = Hypothesis(((int(best_row[0]), int(best_row[1])), (int(best_row[2]), int(best_row[3]))),
                     transform, best_d, err[0], elem[0], cand[0])
    return hyp, used


def _gauss_newton(rows, base_pts, weights, obs, transform: SimilarityTransform, q, limit=None,
                  prior=None, max_iter: int = 50, tol: float = 1e-10):
    """Joint weighted fit of similarity and deformation (damped Gauss-Newton).

    Minimizes ``sum_k r_k^T W_k r_k + s^2 sum_j prior_j q_j^2`` with
    ``r_k = sR(base_k + rows_k q) + t - obs_k`` over ``(a, b, t, q)``, where
    ``sR = [[a, -b], [b, a]]``. Steps that raise the cost are rejected and
    the damping increased. With ``limit``, ``q`` is projected onto
    ``[-limit, limit]``.
    """
    z = transform.complex_factor
    a, b = z.real, z.imag
    t = np.asarray(transform.translation, dtype=float).copy()
    q = np.asarray(q, dtype=float).copy()
    d = len(q)
    pw = np.zeros(d) if prior is None else np.asarray(prior, dtype=float)

    def residual(a, b, t, q):
        p = base_pts + rows @ q
        m = np.array([[a, -b], [b, a]])
        r = p @ m.T + t - obs
        s2 = a * a + b * b
        cost = float(np.einsum("ki,kij,kj->", r, weights, r) + s2 * np.sum(pw * q * q))
        return p, m, r, cost

    p, m, r, cost = residual(a, b, t, q)
    damp = 1e-6
    for _ in range(max_iter):
        s2 = a * a + b * b
        jac = np.zeros((len(p), 2, 4 + d))
        jac[:, :, 0] = p
        jac[:, 0, 1], jac[:, 1, 1] = -p[:, 1], p[:, 0]
        jac[:, 0, 2] = 1.0
        jac[:, 1, 3] = 1.0
        jac[:, :, 4:] = np.einsum("ij,kjd->kid", m, rows)
        h = np.einsum("kia,kij,kjb->ab", jac, weights, jac)
        g = np.einsum("kia,kij,kj->a", jac, weights, r)
        h[4:, 4:] += s2 * np.diag(pw)
        g[4:] += s2 * pw * q
        accepted = False
        for _ in range(20):
            try:
                step = np.linalg.solve(h + damp * np.diag(np.maximum(np.diag(h), 1e-12)), -g)
            except np.linalg.LinAlgError:
                damp *= 10
                continue
            na, nb, nt, nq = a + step[0], b + step[1], t + step[2:4], q + step[4:]
            if limit is not None:
                nq = np.clip(nq, -limit, limit)
            np_, nm, nr, ncost = residual(na, nb, nt, nq)
            if ncost <= cost:
                accepted = True
                break
            damp *= 10
        if not accepted:
            break
        moved = max(abs(na - a), abs(nb - b), np.abs(nt - t).max(), np.abs(nq - q).max(initial=0.0))
        a, b, t, q = na, nb, nt, nq
        p, m, r, old = np_, nm, nr, cost
        cost = ncost
        damp = max(damp / 10, 1e-12)
        if moved < tol or old - cost <= 1e-14 * max(old, 1e-300):
            break
    if abs(complex(a, b)) < _TINY:
        return transform, np.zeros(d)
    return SimilarityTransform.from_complex(complex(a, b), complex(*t)), q


def shape_prior_weight(pdm) -> np.ndarray:
    """Weak Gaussian prior on ``q`` for the joint fit.

    Per unit of landmark weight: equivalent to localization noise of
    ``PRIOR_NOISE`` times the median landmark standard deviation. It only
    matters along directions the observed landmarks cannot separate from a
    similarity change.
    """
    sd = np.sqrt(np.trace(pdm.landmark_cov, axis1=1, axis2=2) / 2.0)
    nu = PRIOR_NOISE * float(np.median(sd))
    return nu ** 2 / pdm.eigenvalues


def _solve_shape(dense: DensePdm, cands: CandidateSet, labels, element, candidate,
                 transform: SimilarityTransform, rounds: int):
    """Fit similarity and deformation to the inliers, then hallucinate.

    Each round re-selects the dense element of every inlier against the
    current shape (contour points slide) and runs a joint Gauss-Newton fit;
    the final deformation is the closed-form weighted solve at the fitted
    similarity, clamped to the model's range.
    """
    means, _, _ = cands.padded()
    idx = np.flatnonzero(labels)
    obs = means[idx, candidate[idx]]
    weights = candidate_weights([cands.entries[i][candidate[i]].A for i in idx])
    element = element.copy()
    inv = np.linalg.inv(dense.base.landmark_cov)
    limit = CLAMP_STD * np.sqrt(dense.base.eigenvalues)
    prior = shape_prior_weight(dense.base) * 0.5 * np.trace(weights, axis1=1, axis2=2).mean()
    q = np.zeros(dense.base.n_modes)
    t = transform
    for _ in range(max(1, rounds)):
        target = t.inverse().apply(obs)
        cur = dense.dense_points(dense.base.deform(q))
        prev = element[idx].copy()
        for j, i in enumerate(idx):
            members = dense.members(i)
            diff = target[j] - cur[members]
            element[i] = members[int(np.argmin(np.einsum("ki,ij,kj->k", diff, inv[i], diff)))]
        el = element[idx]
        t, q = _gauss_newton(dense.basis_rows[el], dense.mean[el], weights, obs, t, q, limit, prior)
        if np.array_equal(prev, el):
            break

    # closed-form hallucination at the fitted similarity
    rot = t.rotation
    a = np.zeros((dense.base.n_points, 2, 2))
    b = np.zeros((dense.base.n_points, 2))
    target = t.inverse().apply(obs)
    for j, i in enumerate(idx):
        a[i] = rot.T @ weights[j] @ rot
        b[i] = a[i] @ (target[j] - dense.mean[element[i]])
    q, _, flagged = hallucinate(dense, labels, a, b, elements=element)
    return q, t, flagged


def evaluate_support(dense: DensePdm, cands: CandidateSet, transform: SimilarityTransform, q,
                     tau: float = TAU):
    """Per-landmark Mahalanobis support of a fitted shape.

    Returns:
        ``(errors (N,), labels (N,), element (N,), candidate (N,))``.
    """
    ev = _MismatchEvaluator(dense, cands)
    shape = dense.dense_points(dense.base.deform(q))
    z = np.array([transform.complex_factor])
    t = np.array([complex(*transform.translation)])
    err, elem, cand = ev.landmark_errors(z, t, shape)
    err = err[0]
    return err, err <= tau, elem[0], cand[0]


def fit_mode(candidates: CandidateSet, dense: DensePdm, exemplars: ExemplarSet,
             strategy: str = "uniform", rng: np.random.Generator | None = None,
             config: FitConfig | None = None, mode_id=(0, 0)) -> ModeFitResult:
    """Fit one mode to a candidate set.

    Hypothesis search, inlier selection, exemplar filtering, hallucination and
    the inlier count/error used for mode selection.

    Raises:
        UnalignableError: too few landmarks with candidates, no finite
            hypothesis, or fewer than ``MIN_INLIERS`` supported landmarks.
    """
    cfg = config or FitConfig()
    hyp, used = search_hypotheses(dense, candidates, strategy, rng, cfg)
    inl = select_inliers(hyp.errors)
    filt = exemplar_filter(inl, hyp.element, hyp.candidate, candidates, dense, exemplars,
                           cfg.exemplar_radius)
    q, t, flagged = _solve_shape(dense, candidates, filt.labels, filt.element, filt.candidate,
                                 hyp.transform, cfg.refit_rounds)
    err, labels, elem, cand = evaluate_support(dense, candidates, t, q, cfg.tau)
    used_labels = filt.labels
    # consensus re-solve: genuine landmarks the exemplar radius dropped rejoin
    for _ in range(cfg.consensus_rounds):
        if labels.sum() < MIN_INLIERS or np.array_equal(labels, used_labels):
            break
        q2, t2, fl2 = _solve_shape(dense, candidates, labels, elem, cand, t, cfg.refit_rounds)
        used_labels = labels
        q, t, flagged = q2, t2, flagged or fl2
        err, labels, elem, cand = evaluate_support(dense, candidates, t, q, cfg.tau)
    # growth: a fit stuck in a scale/deformation trade-off leaves genuine
    # landmarks just outside tau; re-solve with a looser gate and keep the
    # result only if tau-support increases
    gate = 4.0 * cfg.tau if cfg.grow_gate is None else cfg.grow_gate
    for _ in range(cfg.consensus_rounds if gate > cfg.tau else 0):
        grown = err <= gate
        if grown.sum() <= labels.sum() or grown.sum() < MIN_INLIERS:
            break
        q2, t2, fl2 = _solve_shape(dense, candidates, grown, elem, cand, t, cfg.refit_rounds)
        err2, labels2, elem2, cand2 = evaluate_support(dense, candidates, t2, q2, cfg.tau)
        if labels2.sum() <= labels.sum():
            break
        q, t, flagged = q2, t2, flagged or fl2
        err, labels, elem, cand = err2, labels2, elem2, cand2
    v = int(labels.sum())
    if v < MIN_INLIERS:
        raise UnalignableError(f"only {v} landmarks supported by the fitted shape")
    e = max(float(err[labels].mean()), 1e-9)
    sparse = t.apply(dense.base.deform(q))
    dense_shape = t.apply(dense.dense_points(dense.base.deform(q)))
    support = np.stack([elem, cand], axis=1)
    return ModeFitResult(tuple(mode_id), True, sparse, dense_shape, labels, v, e, hyp.d, used,
                         t, q, err, support, flagged)


# ---------------------------------------------------------------------------
# mode selection


def pose_scores(results: Sequence[ModeFitResult]) -> dict:
    """Per pose, the sum of ``V / E`` over its modes (failed modes add 0)."""
    out = {}
    for r in results:
        out.setdefault(r.mode_id[0], 0.0)
        if r.success:
            out[r.mode_id[0]] += r.V / r.E
    return out


def rank_modes(results: Sequence[ModeFitResult]) -> list:
    """Successful results ordered by pose score, then inlier count."""
    ps = pose_scores(results)
    ok = [r for r in results if r.success]
    return sorted(ok, key=lambda r: (-ps[r.mode_id[0]], r.mode_id[0], -r.V, r.mode_id[1]))


def select_mode(results: Sequence[ModeFitResult]) -> tuple[int, int]:
    """``n0 = argmax_n sum_m V/E`` then ``m0 = argmax_m V`` (ties: lower index)."""
    ranked = rank_modes(results)
    if not ranked:
        raise AlignmentFailure("every mode failed to fit")
    return ranked[0].mode_id


# ---------------------------------------------------------------------------
# refinement


Scorer = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class RefineResult:
    shape: np.ndarray
    dense_shape: np.ndarray
    labels: np.ndarray
    q: np.ndarray
    new_peaks: np.ndarray
    A: np.ndarray
    b: np.ndarray
    reverted: bool = False


def _contour_normals(shape: np.ndarray, contours) -> dict:
    out = {}
    for run in contours:
        run = list(run)
        for k, i in enumerate(run):
            a = shape[run[max(k - 1, 0)]]
            c = shape[run[min(k + 1, len(run) - 1)]]
            tan = c - a
            nrm = np.hypot(*tan)
            if nrm < _TINY:
                continue
            tan = tan / nrm
            out[i] = np.array([-tan[1], tan[0]])
    return out


def _profile_peak(values: np.ndarray, offsets: np.ndarray, threshold: float):
    """Highest local maximum above threshold, refined by a parabola."""
    v = np.asarray(values, dtype=float)
    best = None
    for j in range(len(v)):
        left = v[j - 1] if j > 0 else -np.inf
        right = v[j + 1] if j + 1 < len(v) else -np.inf
        if v[j] > threshold and v[j] >= left and v[j] >= right:
            key = (v[j], -abs(offsets[j]))
            if best is None or key > best[0]:
                best = (key, j)
    if best is None:
        return None
    j = best[1]
    off = float(offsets[j])
    if 0 < j < len(v) - 1:
        den = v[j - 1] - 2 * v[j] + v[j + 1]
        if den < 0:
            off += float(np.clip(0.5 * (v[j - 1] - v[j + 1]) / den, -0.5, 0.5)) * (offsets[1] - offsets[0])
    return off


def refine(fit: ModeFitResult, dense: DensePdm, cands: CandidateSet, scorer: Scorer,
           threshold, search: float = 8.0, step: float = 1.0, tau: float = TAU,
           direction: str = "normal") -> RefineResult:
    """Single refinement pass over contour landmarks.

    For each contour landmark a score profile is sampled through the
    hallucinated position along the contour normal (``direction="tangent"``
    samples along the contour instead). The highest peak above threshold
    becomes an inlier. The deformation is re-solved with

    * point landmarks: weight ``o_i I``, target = supporting candidate,
    * contour landmarks with a peak: weight ``A_i = 2 n n^T`` (only the
      normal offset is constrained), target = peak,
    * all others: weight 0, recorded target = hallucinated position.

    The similarity is kept fixed. If no peak is found the hallucinated shape
    is returned unchanged; if the inlier error grows the pre-refinement
    shape is kept.

    Args:
        fit: Successful mode fit (observation frame).
        scorer: ``scorer(landmark, points (M, 2)) -> scores (M,)``.
        threshold: Peak threshold (scalar or per-landmark sequence).
    """
    if not fit.success:
        raise ValueError("cannot refine a failed fit")
    base = dense.base
    n = base.n_points
    t = fit.transform
    tinv = t.inverse()
    thr = np.broadcast_to(np.asarray(threshold, dtype=float), (n,))
    shape_h = fit.shape
    normals = _contour_normals(shape_h, base.contours)
    offsets = np.arange(-search, search + 1e-9, step)
    peaks = np.full((n, 2), np.nan)
    for i in np.flatnonzero(base.kinds == CONTOUR):
        if i not in normals:
            continue
        nvec = normals[i]
        if direction == "tangent":
            nvec = np.array([nvec[1], -nvec[0]])
        pts = shape_h[i] + offsets[:, None] * nvec[None]
        off = _profile_peak(scorer(int(i), pts), offsets, thr[i])
        if off is not None:
            peaks[i] = shape_h[i] + off * nvec
    found = np.isfinite(peaks[:, 0])
    rep = dense.representative
    xm = base.mean
    xh_model = base.deform(fit.q)
    A = np.zeros((n, 2, 2))
    b = np.zeros((n, 2))
    labels = fit.labels.copy()
    means, _, _ = cands.padded()
    for i in range(n):
        if base.kinds[i] != CONTOUR and labels[i] and fit.support[i, 1] >= 0:
            A[i] = np.eye(2)
            target = tinv.apply(means[i, fit.support[i, 1]][None])[0]
            b[i] = target - dense.mean[fit.support[i, 0]]
        elif base.kinds[i] == CONTOUR and found[i]:
            nm = t.rotation.T @ normals[i]
            if direction == "tangent":
                nm = np.array([nm[1], -nm[0]])
            A[i] = 2.0 * np.outer(nm, nm)
            b[i] = A[i] @ (tinv.apply(peaks[i][None])[0] - xm[i])
            labels[i] = True
        else:
            b[i] = xh_model[i] - xm[i]
    if not found.any():
        return RefineResult(fit.shape.copy(), fit.dense_shape.copy(), fit.labels.copy(), fit.q.copy(),
                            found, A, b)

    use = (np.abs(A).sum(axis=(1, 2)) > 0)
    rows = dense.basis_rows[rep]
    # point landmarks use their supporting element
    el = rep.copy()
    for i in range(n):
        if base.kinds[i] != CONTOUR and fit.support[i, 0] >= 0:
            el[i] = fit.support[i, 0]
    rows = dense.basis_rows[el]
    q, _ = solve_deformation(rows, use, A, b)
    q = base.clamp(q, CLAMP_STD)

    def inlier_error(qq):
        x = base.deform(qq)
        res = []
        for i in np.flatnonzero(use):
            dvec = x[i] - xm[i]
            r = A[i] @ dvec - b[i]
            res.append(np.sqrt(max(float(r @ r), 0.0)))
        return float(np.mean(res))

    before, after = inlier_error(fit.q), inlier_error(q)
    if after > before + 1e-12:
        return RefineResult(fit.shape.copy(), fit.dense_shape.copy(), fit.labels.copy(), fit.q.copy(),
                            found, A, b, reverted=True)
    x = base.deform(q)
    return RefineResult(t.apply(x), t.apply(dense.dense_points(x)), labels, q, found, A, b)


# ---------------------------------------------------------------------------
# end-to-end alignment


@dataclass
class AlignConfig:
    strategy: str = "uniform"
    seed: int = 0
    max_iter: int = MAX_ITER
    workers: int = 1
    top_r: int = TOP_R
    tau: float = TAU
    scales: tuple = (0.9, 1.0, 1.1)
    refine: bool = True
    refine_search: float = 6.0
    scale_merge: str = "max"   # "max" or "union"


def mode_rng(seed: int, mode_id) -> np.random.Generator:
    """Generator owned by one mode, independent of evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(mode_id[0]), int(mode_id[1])]))


def _pose_candidates(search: SearchImage, ensemble, pose: int, cfg: AlignConfig) -> CandidateSet:
    modes = [m for m in ensemble.modes if m.pose == pose]
    n = modes[0].pdm.n_points
    entries = []
    for i in range(n):
        prior = np.stack([m.prior_shape()[i] for m in modes])
        lo = np.floor(prior.min(axis=0)).astype(int) - modes[0].search_radius
        hi = np.ceil(prior.max(axis=0)).astype(int) + modes[0].search_radius
        region = (lo[0], lo[1], hi[0] - lo[0] + 1, hi[1] - lo[1] + 1)
        lists = []
        for key in modes[0].detector_keys[i]:
            det = ensemble.detector(key)
            if cfg.scale_merge == "union":
                for k in range(len(search.scales)):
                    sub = _single_scale(search, k)
                    lists.append(extract_candidates(response_map(sub, det, region)))
            else:
                lists.append(extract_candidates(response_map(search, det, region)))
        entries.append(merge_expression_candidates(lists))
    return CandidateSet(entries)


def _single_scale(search: SearchImage, k: int) -> SearchImage:
    sub = object.__new__(SearchImage)
    sub.ref_shape = search.ref_shape
    sub.scales = (search.scales[k],)
    sub.pad = search.pad
    sub.images = [search.images[k]]
    sub.pyramids = [search.pyramids[k]]
    return sub


def _scorer(search: SearchImage, ensemble, mode) -> Scorer:
    def score(i: int, pts: np.ndarray) -> np.ndarray:
        best = None
        for key in mode.detector_keys[i]:
            det = ensemble.detector(key)
            out = None
            for k in range(len(search.scales)):
                tx, _ = search.top_left(k, pts[:, 0])
                ty, _ = search.top_left(k, pts[:, 1])
                pyr = search.pyramids[k]
                s = np.zeros(len(pts))
                wl = det.weighted_luts
                for j, p in enumerate(det.positions):
                    s += wl[j][pyr.codes_at(int(p), ty, tx)]
                out = s if out is None else np.maximum(out, s)
            best = out if best is None else np.maximum(best, out)
        return best
    return score


def align_face(image: np.ndarray, box, ensemble, config: AlignConfig | None = None) -> AlignmentResult:
    """Align one face: detect candidates, fit every mode, select, refine.

    Returns a result with ``success=False`` (and no shape) when no mode can
    be fitted. Output is deterministic for a given seed regardless of
    ``workers``.
    """
    cfg = config or AlignConfig()
    frame = reference_transform(box)
    ref = warp_to_reference(image, frame, reference_size())
    search = SearchImage(ref, cfg.scales)

    per_pose = {p: _pose_candidates(search, ensemble, p, cfg) for p in ensemble.poses}
    fit_cfg = FitConfig(max_iter=cfg.max_iter, tau=cfg.tau)

    def run(mode):
        try:
            return fit_mode(per_pose[mode.pose], mode.dense, mode.exemplars, cfg.strategy,
                            mode_rng(cfg.seed, mode.mode_id), fit_cfg, mode.mode_id)
        except UnalignableError as exc:
            return ModeFitResult.failed(mode.mode_id, str(exc))

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, ensemble.modes))
    else:
        results = [run(m) for m in ensemble.modes]

    ranked = rank_modes(results)
    if not ranked:
        return AlignmentResult(False, message="every mode failed: " + "; ".join(
            f"{r.mode_id}: {r.message}" for r in results))
    best = ranked[0]
    mode = ensemble.mode(*best.mode_id)
    shape, labels = best.shape, best.labels
    if cfg.refine:
        thr = [max(ensemble.detector(k).threshold for k in keys) for keys in mode.detector_keys]
        ref_fit = refine(best, mode.dense, per_pose[mode.pose], _scorer(search, ensemble, mode), thr,
                         cfg.refine_search, tau=cfg.tau)
        shape, labels = ref_fit.shape, ref_fit.labels
    back = frame.inverse()
    alternates = [(r.mode_id, back.apply(r.shape)) for r in ranked[: cfg.top_r]]
    return AlignmentResult(True, back.apply(shape), labels.astype(np.uint8), best.mode_id, best.d,
                           best.V, best.E, ranked[: cfg.top_r], alternates)
