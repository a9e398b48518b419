"""Metrics, planted synthetic instances and the sampling-strategy ablation."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .appearance import Candidate, CandidateSet
from .ensemble import Mode, ModelEnsemble
from .errors import UnalignableError
from .fitter import FitConfig, HypothesisSampler, fit_mode, mode_rng
from .schemes import CONTOUR, FRONTAL_68, LandmarkScheme, subset_indices
from .shape_model import SimilarityTransform

FAILURE_THRESHOLD = 0.1
DEFAULT_THRESHOLDS = np.round(np.linspace(0.0, 0.3, 61), 6)


# ---------------------------------------------------------------------------
# metrics


def interocular(shape, scheme: LandmarkScheme = FRONTAL_68) -> float:
    a, b = scheme.outer_eye_corners
    s = np.asarray(shape, dtype=float)
    return float(np.linalg.norm(s[a] - s[b]))


def mnle(predicted, truth, subset: int = 68, scheme: LandmarkScheme = FRONTAL_68) -> float:
    """Mean landmark error divided by the outer-eye-corner distance of ``truth``.

    Args:
        subset: 68 for all landmarks, 51 to drop the jawline.
    """
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.shape[0] != scheme.n_points:
        raise ValueError(f"{scheme.name} expects {scheme.n_points} landmarks, got {p.shape[0]}")
    iod = interocular(t, scheme)
    if iod <= 0:
        raise ValueError("interocular distance is zero")
    idx = subset_indices(scheme, subset)
    return float(np.linalg.norm(p[idx] - t[idx], axis=1).mean() / iod)


def failure_rate(errors, threshold: float = FAILURE_THRESHOLD) -> float:
    """Fraction of errors strictly above ``threshold`` (NaN/inf count as failures)."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return 0.0
    e = np.where(np.isnan(e), np.inf, e)
    return float(np.mean(e > threshold))


def ced_curve(errors, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """``(T, 2)`` rows ``(threshold, fraction of errors <= threshold)``."""
    e = np.asarray(errors, dtype=float)
    e = np.sort(np.where(np.isnan(e), np.inf, e))
    th = np.asarray(thresholds, dtype=float)
    frac = np.searchsorted(e, th, side="right") / max(len(e), 1) if len(e) else np.zeros(len(th))
    return np.stack([th, frac], axis=1)


@dataclass
class EvalReport:
    """Per-image errors and their aggregates.

    ``mnle`` averages successful images only; failed alignments are carried
    as ``inf`` in ``per_image`` and counted by ``failure_rate``.
    """

    per_image: np.ndarray
    subset: int = 68
    threshold: float = FAILURE_THRESHOLD
    names: list = field(default_factory=list)

    @property
    def mnle(self) -> float:
        ok = self.per_image[np.isfinite(self.per_image)]
        return float(ok.mean()) if len(ok) else float("nan")

    @property
    def failure_rate(self) -> float:
        return failure_rate(self.per_image, self.threshold)

    @property
    def n_failed_alignments(self) -> int:
        return int((~np.isfinite(self.per_image)).sum())

    def ced(self, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
        return ced_curve(self.per_image, thresholds)

    def to_dict(self) -> dict:
        return {
            "n_images": int(len(self.per_image)),
            "subset": self.subset,
            "mnle": self.mnle,
            "failure_rate": self.failure_rate,
            "failure_threshold": self.threshold,
            "n_failed_alignments": self.n_failed_alignments,
            "per_image": [None if not np.isfinite(v) else float(v) for v in self.per_image],
            "names": list(self.names),
        }


def evaluate(predictions, truths, subset: int = 68, names=None) -> EvalReport:
    """Report over paired shapes; ``None`` predictions are failed alignments."""
    errs = []
    for p, t in zip(predictions, truths):
        errs.append(np.inf if p is None else mnle(p, t, subset))
    return EvalReport(np.asarray(errs, dtype=float), subset, names=list(names or []))


def ced_csv(report: EvalReport, thresholds=DEFAULT_THRESHOLDS) -> str:
    rows = ["threshold,fraction"] + [f"{t:.6f},{f:.6f}" for t, f in report.ced(thresholds)]
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# planted instances


@dataclass
class SyntheticInstance:
    """Candidate sets planted around a known shape.

    ``true_index[i]`` is the position of the genuine candidate in landmark
    ``i``'s list (-1 when occluded). ``cov[i]`` is landmark ``i``'s model
    covariance in the observation frame (pixels), the unit of ``sigma``.
    """

    mode_id: tuple
    transform: SimilarityTransform
    q: np.ndarray
    shape: np.ndarray
    visible: np.ndarray
    candidates: CandidateSet
    true_index: np.ndarray
    sigma: float
    seed: int
    occlusion_rate: float = 0.0
    clutter_count: int = 0
    adversarial: bool = False
    cov: np.ndarray | None = None

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        hdr = (self.mode_id, self.sigma, self.seed, self.occlusion_rate, self.clutter_count, self.adversarial)
        buf.write(repr(hdr).encode())
        for arr in (self.transform.matrix, self.q, self.shape, self.visible, self.true_index):
            buf.write(np.ascontiguousarray(arr).astype("<f8").tobytes())
        for lst in self.candidates.entries:
            for c in lst:
                for arr in (c.mean, c.cov, c.A, c.b, c.center):
                    buf.write(np.asarray(arr, dtype="<f8").tobytes())
                buf.write(np.float64(c.confidence).tobytes())
        return buf.getvalue()

    def to_dict(self) -> dict:
        """JSON-ready summary (candidate means, covariances and confidences)."""
        return {
            "mode": list(self.mode_id),
            "seed": self.seed,
            "sigma": self.sigma,
            "occlusion_rate": self.occlusion_rate,
            "clutter_count": self.clutter_count,
            "adversarial": self.adversarial,
            "transform": {"scale": self.transform.scale, "angle": self.transform.angle,
                          "translation": np.asarray(self.transform.translation).tolist()},
            "q": self.q.tolist(),
            "shape": self.shape.tolist(),
            "visible": self.visible.astype(int).tolist(),
            "true_index": self.true_index.tolist(),
            "candidates": [[{"mean": c.mean.tolist(), "cov": c.cov.tolist(), "confidence": c.confidence}
                            for c in lst] for lst in self.candidates.entries],
        }

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _as_mode(source, rng) -> Mode:
    if isinstance(source, ModelEnsemble):
        return source.modes[int(rng.integers(source.n_modes))]
    return source


def _candidate(mean, cov) -> Candidate:
    mean = np.asarray(mean, dtype=float)
    return Candidate(mean, cov.copy(), 0.0, np.linalg.inv(cov), np.zeros(2), 0.0, mean.copy())


def landmark_covariances(mode: Mode, transform: SimilarityTransform) -> np.ndarray:
    """Per-landmark model covariances carried into the observation frame."""
    r = transform.rotation
    return transform.scale ** 2 * np.einsum("ij,njk,lk->nil", r, mode.pdm.landmark_cov, r)


def synth_generate(source, occlusion_rate: float = 0.0, clutter_count: int = 0, sigma: float = 0.0,
                   seed: int = 0, adversarial: bool = False, scale_range=(80.0, 120.0),
                   q_spread: float = 1.0, clutter_range=(20.0, 40.0)) -> SyntheticInstance:
    """Plant a known shape and its candidate sets.

    Noise is measured per landmark in units of that landmark's model
    standard deviation: with ``C_i`` the model covariance in the observation
    frame, the genuine candidate of a visible landmark is drawn from
    ``N(x_i, sigma^2 C_i)`` and each clutter candidate is placed at
    Mahalanobis distance ``U(clutter_range) * sigma`` (under ``sigma^2 C_i``,
    with ``sigma`` floored at 0.05 for placement) in a random direction.

    The deformation is drawn ``q_k ~ N(0, q_spread^2 lambda_k)`` clipped to
    +-3 sqrt(lambda_k); scale (pixels per normalized unit), rotation and
    translation are random. Exactly ``floor(rate * N)`` landmarks are
    occluded and carry clutter only.

    Confidences: genuine ``U(0.6, 1)``, clutter ``U(0, 0.4)``. With
    ``adversarial`` every visible landmark's clutter scores ``U(0.9, 1)`` and
    its genuine candidate ``U(0.2, 0.5)``.

    Args:
        source: A :class:`ModelEnsemble` (mode drawn at random) or a :class:`Mode`.
    """
    if not 0.0 <= occlusion_rate < 0.5:
        raise ValueError(f"occlusion_rate must lie in [0, 0.5), got {occlusion_rate}")
    if clutter_count < 0 or sigma < 0:
        raise ValueError("clutter_count and sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    mode = _as_mode(source, rng)
    pdm = mode.pdm
    n = pdm.n_points
    lim = 3.0 * np.sqrt(pdm.eigenvalues)
    q = np.clip(rng.normal(0.0, 1.0, pdm.n_modes) * np.sqrt(pdm.eigenvalues) * q_spread, -lim, lim)
    scale = rng.uniform(*scale_range)
    angle = rng.uniform(-np.pi / 12, np.pi / 12)
    transform = SimilarityTransform(scale, angle, rng.uniform(150.0, 250.0, 2))
    shape = transform.apply(pdm.deform(q))
    cov = landmark_covariances(mode, transform)
    chol = np.linalg.cholesky(cov)

    n_occ = int(np.floor(occlusion_rate * n))
    visible = np.ones(n, dtype=bool)
    visible[rng.permutation(n)[:n_occ]] = False

    entries, true_index = [], np.full(n, -1)
    spread = max(sigma, 0.05)
    for i in range(n):
        pts, conf = [], []
        cand_cov = max(sigma, 0.05) ** 2 * cov[i]
        if visible[i]:
            pts.append(shape[i] + sigma * chol[i] @ rng.normal(size=2))
            conf.append(rng.uniform(0.2, 0.5) if adversarial else rng.uniform(0.6, 1.0))
        for _ in range(clutter_count):
            r = rng.uniform(*clutter_range) * spread
            phi = rng.uniform(0, 2 * np.pi)
            pts.append(shape[i] + r * chol[i] @ np.array([np.cos(phi), np.sin(phi)]))
            conf.append(rng.uniform(0.9, 1.0) if adversarial and visible[i] else rng.uniform(0.0, 0.4))
        order = np.argsort(-np.asarray(conf), kind="stable")
        lst = []
        for k in order:
            c = _candidate(pts[k], cand_cov)
            c.confidence = float(conf[k])
            lst.append(c)
        entries.append(lst)
        if visible[i]:
            true_index[i] = int(np.flatnonzero(order == 0)[0])
    return SyntheticInstance(mode.mode_id, transform, q, shape, visible, CandidateSet(entries),
                             true_index, float(sigma), int(seed), float(occlusion_rate),
                             int(clutter_count), bool(adversarial), cov)


def shape_error(predicted, instance: SyntheticInstance, mode: Mode | None = None) -> float:
    """Mean per-landmark Mahalanobis error under the planted noise ``sigma^2 C_i``.

    With ``mode`` given, contour landmarks are scored against the nearest
    point of their true dense group (position along a contour is not
    identifiable, only distance to it). ``sigma`` is floored at 1e-9.
    """
    pred = np.asarray(predicted, dtype=float)
    inv = np.linalg.inv(instance.cov)
    diff = pred - instance.shape
    m = np.sqrt(np.einsum("ni,nij,nj->n", diff, inv, diff))
    if mode is not None:
        dense = mode.dense
        truth_dense = instance.transform.apply(dense.dense_points(mode.pdm.deform(instance.q)))
        for i in np.flatnonzero(mode.pdm.kinds == CONTOUR):
            dd = pred[i] - truth_dense[dense.members(i)]
            m[i] = np.sqrt(np.einsum("ki,ij,kj->k", dd, inv[i], dd).min())
    return float(m.mean() / max(instance.sigma, 1e-9))


# ---------------------------------------------------------------------------
# ablation


def hypotheses_to_success(instance: SyntheticInstance, mode: Mode, strategy: str, budget: int,
                          seed: int = 0, tol: float = 3.0) -> float:
    """Index (1-based) of the first sampled hypothesis built from two genuine
    candidates, replaying the sampler stream ``fit_mode`` would draw.

    Returns ``inf`` if none occurs within ``budget``.
    """
    sampler = HypothesisSampler(instance.candidates, strategy, mode_rng(seed, mode.mode_id))
    used = 0
    while used < budget:
        rows = sampler.draw(min(64, budget - used))
        if len(rows) == 0:
            break
        good = (instance.true_index[rows[:, 0]] == rows[:, 1]) & (instance.true_index[rows[:, 2]] == rows[:, 3])
        hit = np.flatnonzero(good)
        if len(hit):
            return float(used + hit[0] + 1)
        used += len(rows)
    return float("inf")


@dataclass
class AblationRow:
    strategy: str
    budget: int
    n_instances: int
    median_hypotheses: float
    mean_shape_error: float
    mnle: float
    failure_rate: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def run_ablation(mode: Mode, strategies: Sequence[str] = ("uniform", "confidence", "greedy"),
                 budgets: Sequence[int] = (2000,), n_instances: int = 20, seed: int = 0,
                 occlusion_rate: float = 0.3, clutter_count: int = 3, sigma: float = 1.0,
                 adversarial: bool = False, fit: bool = True) -> list[AblationRow]:
    """Strategy x budget table over one seeded instance family.

    Each row reports the median hypotheses-to-success (first all-genuine
    sample), mean planted shape error, MNLE against the planted shape
    (68-point modes) or the normalized shape error otherwise, and the
    failure rate at 0.1. Failed fits count as failures. Instance ``j`` uses
    seed ``seed + j``, so rows do not depend on evaluation order.
    """
    if not strategies or not budgets:
        raise ValueError("need at least one strategy and one budget")
    instances = [synth_generate(mode, occlusion_rate, clutter_count, sigma, seed + j, adversarial)
                 for j in range(n_instances)]
    rows = []
    for strat in strategies:
        for budget in budgets:
            hyps, serr, nle = [], [], []
            for j, inst in enumerate(instances):
                hyps.append(hypotheses_to_success(inst, mode, strat, budget, seed + j))
                if not fit:
                    continue
                try:
                    res = fit_mode(inst.candidates, mode.dense, mode.exemplars, strat,
                                   mode_rng(seed + j, mode.mode_id), FitConfig(max_iter=budget), mode.mode_id)
                    serr.append(shape_error(res.shape, inst, mode))
                    nle.append(_normalized_error(res.shape, inst.shape, mode))
                except UnalignableError:
                    serr.append(np.inf)
                    nle.append(np.inf)
            e = np.asarray(nle, dtype=float)
            ok = e[np.isfinite(e)]
            rows.append(AblationRow(strat, int(budget), len(instances), float(np.median(hyps)),
                                    float(np.mean(serr)) if serr else float("nan"),
                                    float(ok.mean()) if len(ok) else float("nan"),
                                    failure_rate(e) if len(e) else float("nan")))
    return rows


def _normalized_error(pred, truth, mode: Mode) -> float:
    scheme = mode.landmark_scheme
    if scheme.outer_eye_corners is not None:
        norm = interocular(truth, scheme)
    else:
        # one visible eye: fall back to the shape's RMS radius
        norm = float(np.sqrt(((truth - truth.mean(0)) ** 2).sum(1).mean()))
    return float(np.linalg.norm(pred - truth, axis=1).mean() / norm)


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    head = "strategy,budget,n_instances,median_hypotheses,mean_shape_error,mnle,failure_rate"
    out = [head] + [f"{r.strategy},{r.budget},{r.n_instances},{r.median_hypotheses},"
                    f"{r.mean_shape_error:.6f},{r.mnle:.6f},{r.failure_rate:.6f}" for r in rows]
    return "\n".join(out) + "\n"


def reference_mode(seed: int = 0, n_shapes: int = 200, pose: float = 0.0,
                   expression: str = "neutral") -> Mode:
    """Shape-only frontal mode trained on procedural faces.

    Stands in for a trained model when planting synthetic instances.
    """
    from .synthetic_faces import EXPRESSIONS, mode_shapes
    from .training import TrainConfig, train_mode

    shapes = mode_shapes(np.random.default_rng(seed), pose, expression, n_shapes)
    return train_mode(shapes, FRONTAL_68, 0, EXPRESSIONS.index(expression), TrainConfig(seed=seed))
