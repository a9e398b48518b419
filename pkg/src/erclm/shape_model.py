"""Point distribution models: Procrustes normalization, PCA training,
contour densification, shape instantiation and exemplar clustering.

Shapes are ``(N, 2)`` float arrays in pixel or normalized units. Stacked
corpora are ``(S, N, 2)``. Flattened shape vectors interleave coordinates,
``[x0, y0, x1, y1, ...]``, which is also the row order of the eigenbasis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, InsufficientDataError, SingularConfigurationError
from .schemes import CONTOUR, POINT

GPA_TOL = 1e-8
GPA_MAX_ITER = 100
COV_EPS = 1e-3
_TINY = 1e-12


def as_points(points, n: int | None = None) -> np.ndarray:
    """Validate and return an ``(N, 2)`` float array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise DimensionError(f"expected (N, 2) points, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionError(f"expected {n} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("shape contains non-finite coordinates")
    return arr


# ---------------------------------------------------------------------------
# similarity transforms


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R(angle) @ x + translation``."""

    scale: float = 1.0
    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @property
    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    @property
    def matrix(self) -> np.ndarray:
        """2x3 affine matrix."""
        return np.hstack([self.scale * self.rotation, np.asarray(self.translation)[:, None]])

    @property
    def complex_factor(self) -> complex:
        return self.scale * np.exp(1j * self.angle)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ (self.scale * self.rotation).T + np.asarray(self.translation)

    def apply_vectors(self, vectors) -> np.ndarray:
        """Apply the linear part only (displacements, tangents)."""
        return np.asarray(vectors, dtype=float) @ (self.scale * self.rotation).T

    def inverse(self) -> "SimilarityTransform":
        z = 1.0 / self.complex_factor
        t = complex(*self.translation)
        ti = -z * t
        return SimilarityTransform(abs(z), float(np.angle(z)), (ti.real, ti.imag))

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        z = self.complex_factor * other.complex_factor
        t = self.complex_factor * complex(*other.translation) + complex(*self.translation)
        return SimilarityTransform(abs(z), float(np.angle(z)), (t.real, t.imag))

    @classmethod
    def from_complex(cls, z: complex, t: complex) -> "SimilarityTransform":
        if abs(z) <= 0:
            raise SingularConfigurationError("degenerate similarity (zero scale)")
        return cls(abs(z), float(np.angle(z)), (t.real, t.imag))


def _to_complex(pts: np.ndarray) -> np.ndarray:
    return pts[..., 0] + 1j * pts[..., 1]


def estimate_similarity(p_a_model, p_b_model, p_a_obs, p_b_obs) -> SimilarityTransform:
    """Closed-form similarity mapping two model points exactly onto two observations."""
    am, bm, ao, bo = (complex(*np.asarray(p, dtype=float)) for p in (p_a_model, p_b_model, p_a_obs, p_b_obs))
    dm, do = bm - am, bo - ao
    if abs(dm) < _TINY or abs(do) < _TINY:
        raise SingularConfigurationError("coincident point pair")
    z = do / dm
    return SimilarityTransform.from_complex(z, ao - z * am)


def fit_similarity(src, dst, weights=None) -> SimilarityTransform:
    """Least-squares similarity (no reflection) taking ``src`` onto ``dst``."""
    s = _to_complex(np.asarray(src, dtype=float))
    d = _to_complex(np.asarray(dst, dtype=float))
    w = np.ones(s.shape) if weights is None else np.asarray(weights, dtype=float)
    wsum = w.sum()
    if wsum <= 0:
        raise SingularConfigurationError("no weight to fit a similarity")
    sc = s - (w * s).sum() / wsum
    dc = d - (w * d).sum() / wsum
    den = (w * np.abs(sc) ** 2).sum()
    if den < _TINY:
        raise SingularConfigurationError("source points are coincident")
    z = (w * np.conj(sc) * dc).sum() / den
    if abs(z) < _TINY:
        raise SingularConfigurationError("target points are coincident")
    t = (w * d).sum() / wsum - z * (w * s).sum() / wsum
    return SimilarityTransform.from_complex(z, t)


# ---------------------------------------------------------------------------
# Procrustes


def anchor_points(shapes: np.ndarray, anchors: Sequence) -> np.ndarray:
    """Anchor coordinates for one ``(N, 2)`` shape or a ``(S, N, 2)`` stack.

    An anchor is a landmark index or a group of indices whose centroid is used.
    """
    cols = []
    for a in anchors:
        if isinstance(a, (int, np.integer)):
            cols.append(shapes[..., int(a), :])
        else:
            cols.append(shapes[..., list(a), :].mean(axis=-2))
    return np.stack(cols, axis=-2)


def _check_anchors(anchors: Sequence, n: int) -> None:
    flat = []
    for a in anchors:
        members = [a] if isinstance(a, (int, np.integer)) else list(a)
        if not members:
            raise ValueError("empty anchor group")
        for i in members:
            if not 0 <= int(i) < n:
                raise IndexError(f"anchor index {i} out of range for {n} landmarks")
        flat.append(tuple(sorted(int(i) for i in members)))
    if len(set(flat)) != len(flat):
        raise ValueError("anchors must be distinct")


def _normalize(pts: np.ndarray) -> np.ndarray:
    c = pts - pts.mean(axis=0)
    size = np.linalg.norm(c)
    if size < _TINY:
        raise SingularConfigurationError("anchor points are coincident")
    return c / size


def _canonical_orientation(ref: np.ndarray) -> np.ndarray:
    # first two anchors define +x so the frame does not depend on input pose
    v = ref[1] - ref[0]
    if np.hypot(*v) < _TINY:
        return ref
    ang = -np.arctan2(v[1], v[0])
    c, s = np.cos(ang), np.sin(ang)
    return ref @ np.array([[c, -s], [s, c]]).T


@dataclass
class GpaResult:
    aligned: np.ndarray
    mean: np.ndarray
    transforms: list[SimilarityTransform]
    iterations: int


def procrustes_align(shapes, anchors: Sequence | None = None, tol: float = GPA_TOL,
                     max_iter: int = GPA_MAX_ITER) -> GpaResult:
    """Generalized Procrustes analysis driven by a subset of anchor points.

    Every shape is fitted to the evolving mean using only its anchors; the
    fitted similarity is then applied to all of its points. With
    ``anchors=None`` every landmark is an anchor (conventional GPA).

    Args:
        shapes: ``(S, N, 2)`` stack or list of ``(N, 2)`` shapes.
        anchors: Landmark indices or index groups (see :func:`anchor_points`).
        tol: Stop when the anchor mean moves less than this (Frobenius).
        max_iter: Iteration cap.

    Returns:
        GpaResult with the normalized shapes, their mean, and for each input
        the similarity mapping it into the normalized frame.
    """
    try:
        stack = np.stack([np.asarray(s, dtype=float) for s in shapes])
    except ValueError as exc:
        raise DimensionError("all shapes must have the same number of landmarks") from exc
    if stack.ndim != 3 or stack.shape[2] != 2:
        raise DimensionError(f"expected (S, N, 2) shapes, got {stack.shape}")
    n = stack.shape[1]
    if anchors is None:
        anchors = list(range(n))
    _check_anchors(anchors, n)
    if len(anchors) < 2:
        raise ValueError("need at least two anchors")

    anc = anchor_points(stack, anchors)
    for a in anc:
        if np.linalg.norm(a - a.mean(axis=0)) < _TINY:
            raise SingularConfigurationError("anchor points are coincident")

    ref = _canonical_orientation(_normalize(anc[0]))
    it = 0
    for it in range(1, max_iter + 1):
        fitted = np.stack([fit_similarity(a, ref).apply(a) for a in anc])
        new = _canonical_orientation(_normalize(fitted.mean(axis=0)))
        moved = np.linalg.norm(new - ref)
        ref = new
        if moved < tol:
            break

    transforms = [fit_similarity(a, ref) for a in anc]
    aligned = np.stack([t.apply(s) for t, s in zip(transforms, stack)])
    return GpaResult(aligned, aligned.mean(axis=0), transforms, it)


# ---------------------------------------------------------------------------
# PDM


@dataclass(frozen=True)
class PdmParameter:
    transform: SimilarityTransform
    q: np.ndarray


@dataclass
class PointDistributionModel:
    """Linear shape model ``x_i = s R (mean_i + basis_i q) + t``.

    Attributes:
        mean: ``(N, 2)`` mean shape in the normalized frame.
        basis: ``(2N, d)`` orthonormal eigenvectors.
        eigenvalues: ``(d,)`` variances, nonincreasing and positive.
        landmark_cov: ``(N, 2, 2)`` per-landmark residual covariance.
        kinds: ``(N,)`` POINT / CONTOUR flags.
        anchors: Normalization anchors used in training.
        contours: Ordered contour runs (neighbour structure for densifying).
        mode_id: ``(pose, expression)`` of the owning mode.
    """

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    landmark_cov: np.ndarray
    kinds: np.ndarray
    anchors: tuple = ()
    contours: tuple = ()
    mode_id: tuple[int, int] = (0, 0)

    @property
    def n_points(self) -> int:
        return self.mean.shape[0]

    @property
    def n_modes(self) -> int:
        return self.basis.shape[1]

    @property
    def basis_rows(self) -> np.ndarray:
        """Basis reshaped to ``(N, 2, d)``."""
        return self.basis.reshape(self.n_points, 2, self.n_modes)

    def deform(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_modes,):
            raise DimensionError(f"q must have length {self.n_modes}, got {q.shape}")
        return self.mean + (self.basis @ q).reshape(-1, 2)

    def project(self, shape) -> np.ndarray:
        """Deformation coefficients of a normalized-frame shape (transpose basis)."""
        return self.basis.T @ (np.asarray(shape, dtype=float) - self.mean).ravel()

    def clamp(self, q, n_std: float = 3.0) -> np.ndarray:
        lim = n_std * np.sqrt(self.eigenvalues)
        return np.clip(q, -lim, lim)


def train_pdm(normalized_shapes, variance_fraction: float = 0.95, mode_id=(0, 0),
              kinds=None, anchors: Sequence = (), contours: Sequence = ()) -> PointDistributionModel:
    """PCA shape model keeping the fewest components reaching ``variance_fraction``."""
    x = np.asarray(normalized_shapes, dtype=float)
    if x.ndim != 3 or x.shape[2] != 2:
        raise DimensionError(f"expected (S, N, 2) shapes, got {x.shape}")
    if not 0 < variance_fraction <= 1:
        raise ValueError("variance_fraction must be in (0, 1]")
    n_shapes, n = x.shape[:2]
    if n_shapes < 2:
        raise InsufficientDataError(f"need at least 2 shapes, got {n_shapes}")

    flat = x.reshape(n_shapes, -1)
    mean = flat.mean(axis=0)
    resid = flat - mean
    _, sv, vt = np.linalg.svd(resid / np.sqrt(n_shapes - 1), full_matrices=False)
    lam = sv ** 2
    total = lam.sum()
    if total <= _TINY:
        d = 1
    else:
        # guard against the fraction landing a hair above the float cumsum
        cum = np.cumsum(lam) / total
        d = int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)
        d = min(d, len(lam))
    floor = _TINY * max(total, 1.0)
    eig = np.maximum(lam[:d], floor)
    basis = vt[:d].T.copy()

    r = resid.reshape(n_shapes, n, 2)
    cov = np.einsum("sni,snj->nij", r, r) / (n_shapes - 1)
    tr = np.trace(cov, axis1=1, axis2=2)
    reg = COV_EPS * np.maximum(tr / 2.0, 1e-10)
    cov = cov + reg[:, None, None] * np.eye(2)

    if kinds is None:
        kinds = np.full(n, POINT)
    return PointDistributionModel(
        mean=mean.reshape(n, 2),
        basis=basis,
        eigenvalues=eig,
        landmark_cov=cov,
        kinds=np.asarray(kinds, dtype=np.int8),
        anchors=tuple(anchors),
        contours=tuple(tuple(int(i) for i in c) for c in contours),
        mode_id=tuple(mode_id),
    )


def instantiate(pdm: PointDistributionModel, params: PdmParameter) -> np.ndarray:
    """Shape for PDM parameters: ``s R (mean + basis q) + t``."""
    return params.transform.apply(pdm.deform(params.q))


# ---------------------------------------------------------------------------
# contour interpolation

_ARC_SAMPLES = 512


def _cr_knots(p: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.maximum(np.linalg.norm(np.diff(p, axis=0), axis=1), _TINY))
    return np.concatenate([[0.0], np.cumsum(d)])


def _cr_eval(ctrl: np.ndarray, knots: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Barry-Goldman evaluation of one Catmull-Rom segment.

    ``ctrl`` is ``(4, ...)``; the result is linear in ``ctrl`` for fixed knots,
    which lets the same routine produce interpolation weights.
    """
    t0, t1, t2, t3 = knots
    t = np.asarray(t, dtype=float)[:, None] if ctrl.ndim > 1 else np.asarray(t, dtype=float)
    p0, p1, p2, p3 = ctrl

    def lerp(a, b, ta, tb):
        return ((tb - t) * a + (t - ta) * b) / (tb - ta)

    a1 = lerp(p0, p1, t0, t1)
    a2 = lerp(p1, p2, t1, t2)
    a3 = lerp(p2, p3, t2, t3)
    b1 = lerp(a1, a2, t0, t2)
    b2 = lerp(a2, a3, t1, t3)
    return lerp(b1, b2, t1, t2)


def _contour_neighbours(contours: Sequence[Sequence[int]]) -> dict[int, tuple[int | None, int | None]]:
    out = {}
    for run in contours:
        run = list(run)
        for k, i in enumerate(run):
            prev = run[k - 1] if k > 0 else None
            nxt = run[k + 1] if k + 1 < len(run) else None
            out[i] = (prev, nxt)
    return out


def _local_coefficients(i: int, prev: int | None, nxt: int | None) -> tuple[list[int], np.ndarray]:
    """Express (prev, i, next) as rows over real landmark indices.

    Missing neighbours are reflected through ``i`` (one-sided interpolation).
    """
    if prev is None and nxt is None:
        raise ValueError(f"contour landmark {i} has no neighbours")
    idx = [j for j in (prev, i, nxt) if j is not None]
    pos = {j: k for k, j in enumerate(idx)}
    m = len(idx)

    def unit(j):
        v = np.zeros(m)
        v[pos[j]] = 1.0
        return v

    pi = unit(i)
    pp = unit(prev) if prev is not None else 2 * pi - unit(nxt)
    pn = unit(nxt) if nxt is not None else 2 * pi - unit(prev)
    return idx, np.stack([pp, pi, pn])


def contour_weights(points: np.ndarray, i: int, prev: int | None, nxt: int | None,
                    n_samples: int) -> tuple[list[int], np.ndarray, int]:
    """Interpolation weights of the dense group of contour landmark ``i``.

    The curve is a centripetal Catmull-Rom spline through (prev, i, next) with
    phantom end points reflected from the interior. The group is
    ``n_samples + 1`` points at a common arc-length spacing, the representative
    ``i`` at position ``n_samples // 2``; the spacing is chosen so every
    element lies strictly between prev and next.

    Returns:
        (landmark indices, weights ``(n_samples + 1, len(indices))``,
        position of the representative inside the group).
    """
    idx, coef = _local_coefficients(i, prev, nxt)
    if n_samples == 0:
        w = np.zeros((1, len(idx)))
        w[0, idx.index(i)] = 1.0
        return idx, w, 0

    local = coef @ points[idx]                     # (3, 2): prev, i, next
    ctrl_pts = np.stack([2 * local[0] - local[1], local[0], local[1], local[2], 2 * local[2] - local[1]])
    ctrl_coef = np.stack([2 * coef[0] - coef[1], coef[0], coef[1], coef[2], 2 * coef[2] - coef[1]])

    segs = []
    for s in range(2):
        kn = _cr_knots(ctrl_pts[s:s + 4])
        tt = np.linspace(kn[1], kn[2], _ARC_SAMPLES)
        xy = _cr_eval(ctrl_pts[s:s + 4], kn, tt)
        seglen = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
        segs.append((kn, tt, seglen))
    len_a, len_b = segs[0][2][-1], segs[1][2][-1]
    before = n_samples // 2
    after = n_samples - before
    step = min(len_a / (before + 1), len_b / (after + 1))
    rows = []
    for j in range(-before, after + 1):
        if j == 0:
            w = np.zeros(len(idx))
            w[idx.index(i)] = 1.0
            rows.append(w)
            continue
        s = 0 if j < 0 else 1
        kn, tt, seglen = segs[s]
        local_arc = len_a + j * step if s == 0 else j * step
        t = np.interp(local_arc, seglen, tt)
        rows.append(_cr_eval(ctrl_coef[s:s + 4], kn, np.array([t]))[0])
    return idx, np.stack(rows), before


@dataclass
class DensePdm:
    """PDM whose contour landmarks are expanded into groups of curve samples.

    ``weights`` maps sparse landmarks to dense points (``dense = weights @
    sparse``) with spline knots frozen at the base mean, so dense points stay
    linear in the shape parameters.
    """

    base: PointDistributionModel
    weights: np.ndarray
    group: np.ndarray
    representative: np.ndarray
    n_samples: dict = field(default_factory=dict)

    @property
    def n_dense(self) -> int:
        return self.weights.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.base.mean

    @property
    def basis_rows(self) -> np.ndarray:
        """``(N^D, 2, d)`` basis of the dense points."""
        return np.einsum("dn,nkq->dkq", self.weights, self.base.basis_rows)

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.group == i)

    def dense_points(self, sparse_shape) -> np.ndarray:
        return self.weights @ np.asarray(sparse_shape, dtype=float)


def densify(pdm: PointDistributionModel, n_samples: int = 7,
            overrides: Mapping[int, int] | None = None) -> DensePdm:
    """Expand every contour landmark into ``n_samples + 1`` curve points.

    Point landmarks pass through unchanged. ``overrides`` sets a per-landmark
    sample count. ``n_samples=0`` reproduces the sparse model exactly.
    """
    overrides = dict(overrides or {})
    n = pdm.n_points
    neigh = _contour_neighbours(pdm.contours)
    rows, group, rep = [], [], np.zeros(n, dtype=int)
    counts = {}
    for i in range(n):
        ns = overrides.get(i, n_samples)
        if pdm.kinds[i] == CONTOUR and ns > 0:
            if i not in neigh:
                raise ValueError(f"contour landmark {i} is not part of any contour run")
            idx, w, r = contour_weights(pdm.mean, i, *neigh[i], ns)
            block = np.zeros((w.shape[0], n))
            block[:, idx] = w
            rep[i] = len(rows) + r
            rows.extend(block)
            group.extend([i] * w.shape[0])
            counts[i] = ns
        else:
            row = np.zeros(n)
            row[i] = 1.0
            rep[i] = len(rows)
            rows.append(row)
            group.append(i)
    return DensePdm(pdm, np.asarray(rows), np.asarray(group), rep, counts)


def contour_curve(points: np.ndarray, prev: int | None, i: int, nxt: int | None,
                  n: int = 200) -> np.ndarray:
    """Sample the interpolating curve through (prev, i, next) for diagnostics/tests."""
    idx, coef = _local_coefficients(i, prev, nxt)
    local = coef @ np.asarray(points, dtype=float)[idx]
    ctrl = np.stack([2 * local[0] - local[1], local[0], local[1], local[2], 2 * local[2] - local[1]])
    out = []
    for s in range(2):
        kn = _cr_knots(ctrl[s:s + 4])
        out.append(_cr_eval(ctrl[s:s + 4], kn, np.linspace(kn[1], kn[2], n)))
    return np.vstack(out)


def slide_contours(shapes, contours: Sequence[Sequence[int]]) -> np.ndarray:
    """Resample each contour run uniformly in arc length (end points fixed).

    Removes tangential placement noise of contour landmarks before PCA; this is
    how the dense model gets its tighter subspace.
    """
    x = np.array(shapes, dtype=float, copy=True)
    single = x.ndim == 2
    if single:
        x = x[None]
    for run in contours:
        run = list(run)
        if len(run) < 3:
            continue
        for s in range(x.shape[0]):
            pts = x[s, run]
            dense = _polyline_through(pts)
            seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
            arc = np.concatenate([[0.0], np.cumsum(seg)])
            targets = np.linspace(0, arc[-1], len(run))
            x[s, run, 0] = np.interp(targets, arc, dense[:, 0])
            x[s, run, 1] = np.interp(targets, arc, dense[:, 1])
    return x[0] if single else x


def _polyline_through(pts: np.ndarray, per_seg: int = 64) -> np.ndarray:
    """Dense centripetal Catmull-Rom polyline through an open point run."""
    ext = np.vstack([2 * pts[0] - pts[1], pts, 2 * pts[-1] - pts[-2]])
    out = [pts[:1]]
    for k in range(len(pts) - 1):
        ctrl = ext[k:k + 4]
        kn = _cr_knots(ctrl)
        out.append(_cr_eval(ctrl, kn, np.linspace(kn[1], kn[2], per_seg)[1:]))
    return np.vstack(out)


def train_dense_pdm(normalized_shapes, variance_fraction: float = 0.95, mode_id=(0, 0),
                    kinds=None, anchors: Sequence = (), contours: Sequence = (),
                    n_samples: int = 7) -> DensePdm:
    """Train a PDM on contour-slid shapes and densify it."""
    slid = slide_contours(normalized_shapes, contours)
    pdm = train_pdm(slid, variance_fraction, mode_id, kinds, anchors, contours)
    return densify(pdm, n_samples)


# ---------------------------------------------------------------------------
# exemplars


@dataclass
class ExemplarSet:
    centers: np.ndarray
    radius: float

    @property
    def size(self) -> int:
        return self.centers.shape[0]


def cluster_exemplars(normalized_shapes, k: int, seed: int = 0,
                      percentile: float = 95.0) -> ExemplarSet:
    """k-means over flattened normalized shapes.

    The assignment radius is the given percentile of member-to-center
    landmark distances.
    """
    from sklearn.cluster import KMeans

    x = np.asarray(normalized_shapes, dtype=float)
    n_shapes, n = x.shape[:2]
    if not 1 <= k <= n_shapes:
        raise ValueError(f"k must be in [1, {n_shapes}], got {k}")
    flat = x.reshape(n_shapes, -1)
    if k == 1:
        labels = np.zeros(n_shapes, dtype=int)
        centers = flat.mean(axis=0, keepdims=True)
    elif k == n_shapes:
        labels = np.arange(n_shapes)
        centers = flat.copy()
    else:
        km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(flat)
        labels = km.labels_
        # exact member means (the estimator's centers carry solver round-off)
        centers = np.stack([flat[labels == c].mean(axis=0) for c in range(k)])
    dist = np.linalg.norm((flat - centers[labels]).reshape(n_shapes, n, 2), axis=2)
    radius = float(np.percentile(dist, percentile))
    return ExemplarSet(centers.reshape(k, n, 2), radius)
