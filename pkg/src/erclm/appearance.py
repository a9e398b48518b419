"""Census descriptors, boosted landmark detectors, response maps and
Gaussian candidate extraction.

Patches are 35x35 pixels in the reference frame where the face box is 150 px
wide. A patch is described by census codes on four area-averaged pyramid
levels (35, 25, 15, 5) which gives 1089 + 529 + 169 + 9 = 1796 codes.

Pyramid levels are computed with integer matrices (``LEVEL_DEN`` times the
area-average weights) so codes are exact and the sliding-window path in
:class:`CodePyramid` reproduces per-patch descriptors bit for bit.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import cv2
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DimensionError

log = logging.getLogger(__name__)

PATCH = 35
HALF = PATCH // 2
LEVELS = (35, 25, 15, 5)
N_CODES = 511
LEVEL_DEN = PATCH
DEFAULT_SCALES = (0.9, 1.0, 1.1)
BANDWIDTH = 2.5
THRESHOLD_FRACTION = 0.35
MERGE_RADIUS = 1.0
_POW2 = (1 << np.arange(9)).astype(np.int64)


# ---------------------------------------------------------------------------
# census transform


def census_code(block) -> int:
    """Census code of one 3x3 block.

    Bit ``j`` (row-major, center is bit 4) is set when pixel ``j`` is strictly
    greater than the block mean. Float blocks treat differences within the
    rounding error of the mean as ties, so uniform blocks give 0 exactly.
    """
    v = np.asarray(block)
    if v.size != 9:
        raise DimensionError(f"census block needs 9 values, got {v.size}")
    v = v.reshape(9)
    if np.issubdtype(v.dtype, np.integer):
        v = v.astype(np.int64)
        bits = 9 * v > v.sum()
    else:
        v = v.astype(float)
        bits = v - v.mean() > _tie_tolerance(np.abs(v).max())
    return int(bits @ _POW2)


def _tie_tolerance(magnitude):
    # summing nine values loses at most a few ulps of the largest one
    return 16.0 * np.finfo(float).eps * magnitude


def census_image(img: np.ndarray) -> np.ndarray:
    """Census codes at every interior pixel of the last two axes."""
    a = np.asarray(img)
    integer = np.issubdtype(a.dtype, np.integer)
    a = a.astype(np.int64) if integer else a.astype(float)
    h, w = a.shape[-2:]
    if h < 3 or w < 3:
        raise DimensionError("census needs at least 3x3 pixels")
    nb = [a[..., r:h - 2 + r, c:w - 2 + c] for r in range(3) for c in range(3)]
    total = sum(nb)
    out = np.zeros(nb[0].shape, dtype=np.int64)
    if not integer:
        mean = total / 9.0
        tol = _tie_tolerance(np.max(np.abs(nb), axis=0))
    for j, x in enumerate(nb):
        hit = 9 * x > total if integer else x - mean > tol
        out |= hit.astype(np.int64) << j
    return out


@lru_cache(maxsize=None)
def area_matrix(size: int, src: int = PATCH) -> np.ndarray:
    """Integer area-average matrix ``M`` with ``level = M @ P @ M.T / src**2``."""
    f = Fraction(src, size)
    m = np.zeros((size, src), dtype=np.int64)
    for k in range(size):
        lo, hi = k * f, (k + 1) * f
        for a in range(int(lo), min(int(np.ceil(hi)), src)):
            ov = min(hi, a + 1) - max(lo, a)
            if ov > 0:
                # ov / f * src == ov * size, an integer multiple of 1/1
                val = ov * size
                assert val.denominator == 1
                m[k, a] = val.numerator
    return m


def pyramid_level(patch: np.ndarray, size: int) -> np.ndarray:
    """Area-downsampled level scaled by ``LEVEL_DEN**2`` (exact integers)."""
    m = area_matrix(size)
    p = np.asarray(patch).astype(np.int64)
    return np.einsum("ia,...ab,jb->...ij", m, p, m)


def descriptor_length(levels: Sequence[int] = LEVELS) -> int:
    return sum((s - 2) ** 2 for s in levels)


def hierarchical_descriptor(patch, levels: Sequence[int] = LEVELS) -> np.ndarray:
    """Concatenated census codes of every pyramid level.

    Args:
        patch: ``(35, 35)`` or batched ``(B, 35, 35)`` grayscale patch.
        levels: Level sizes to include.

    Returns:
        ``uint16`` codes, ``(1796,)`` (or ``(B, 1796)``) for the default levels.
    """
    p = np.asarray(patch)
    if p.shape[-2:] != (PATCH, PATCH):
        raise DimensionError(f"patch must be {PATCH}x{PATCH}, got {p.shape[-2:]}")
    parts = []
    for s in levels:
        lvl = p.astype(np.int64) if s == PATCH else pyramid_level(p, s)
        parts.append(census_image(lvl).reshape(*p.shape[:-2], -1))
    return np.concatenate(parts, axis=-1).astype(np.uint16)


@lru_cache(maxsize=None)
def descriptor_layout(levels: tuple = LEVELS) -> np.ndarray:
    """``(D, 3)`` table of (level size, row, col) per descriptor index.

    Row/col index the level image at the center of the 3x3 block.
    """
    rows = []
    for s in levels:
        r, c = np.mgrid[1:s - 1, 1:s - 1]
        rows.append(np.stack([np.full(r.size, s), r.ravel(), c.ravel()], axis=1))
    return np.concatenate(rows)


# ---------------------------------------------------------------------------
# boosted detector


@dataclass(frozen=True)
class WeakClassifier:
    position: int
    lut: np.ndarray
    alpha: float


@dataclass
class AdaboostDetector:
    """Sum of weighted look-up tables over descriptor positions.

    Attributes:
        positions: ``(T,)`` descriptor indices.
        luts: ``(T, 511)`` tables with entries in {-1, 0, 1}.
        alphas: ``(T,)`` classifier weights.
        landmark: Landmark index the detector was trained for.
        tag: Expression tag (``-1`` for a detector shared by all expressions).
    """

    positions: np.ndarray
    luts: np.ndarray
    alphas: np.ndarray
    landmark: int = -1
    tag: int = -1
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_weak(self) -> int:
        return len(self.positions)

    def weak(self, t: int) -> WeakClassifier:
        return WeakClassifier(int(self.positions[t]), self.luts[t], float(self.alphas[t]))

    @property
    def weighted_luts(self) -> np.ndarray:
        return self.alphas[:, None] * self.luts

    @property
    def max_score(self) -> float:
        return float(self.weighted_luts.max(axis=1).sum())

    @property
    def threshold(self) -> float:
        return THRESHOLD_FRACTION * self.max_score

    def score(self, codes) -> np.ndarray:
        """Detector score of descriptor(s) ``codes`` (``(D,)`` or ``(B, D)``)."""
        c = np.asarray(codes)
        sel = c[..., self.positions].astype(np.int64)
        return self.weighted_luts[np.arange(self.n_weak), sel].sum(axis=-1)

    def predict(self, codes) -> np.ndarray:
        return self.score(codes) > 0


def _one_hot(codes: np.ndarray) -> csr_matrix:
    """Sparse ``(n, D * 511)`` indicator of (position, code) per sample."""
    n, d = codes.shape
    cols = ((np.arange(d, dtype=np.int64) * N_CODES)[None, :] + codes).ravel()
    rows = np.repeat(np.arange(n), d)
    return csr_matrix((np.ones(n * d), (rows, cols)), shape=(n, d * N_CODES))


def train_detector(positives, negatives, n_rounds: int = 100, landmark: int = -1,
                   tag: int = -1) -> AdaboostDetector:
    """Discrete AdaBoost over positional census-code look-up tables.

    Each round picks the descriptor position whose sign table (positive minus
    negative weighted mass per code) has the lowest weighted error. Weights
    start class-balanced and are renormalized to sum to one every round.
    Training stops early once a round is perfect or no position beats
    chance (a warning is issued in the latter case).

    Args:
        positives: ``(P, D)`` descriptor codes of positive patches.
        negatives: ``(Q, D)`` descriptor codes of negative patches.
        n_rounds: Maximum number of weak classifiers.

    Returns:
        The trained detector. ``errors`` holds the weighted error per round.
    """
    pos = np.asarray(positives, dtype=np.int64)
    neg = np.asarray(negatives, dtype=np.int64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes need at least one sample")
    x = np.concatenate([pos, neg])
    d = x.shape[1]
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    w = np.where(y > 0, 0.5 / len(pos), 0.5 / len(neg))
    onehot = _one_hot(x)
    is_pos = y > 0

    positions, luts, alphas, errs = [], [], [], []
    for _ in range(n_rounds):
        wp = (onehot.T @ np.where(is_pos, w, 0.0)).reshape(d, N_CODES)
        wn = (onehot.T @ np.where(is_pos, 0.0, w)).reshape(d, N_CODES)
        err_by_pos = np.minimum(wp, wn).sum(axis=1)
        p = int(np.argmin(err_by_pos))
        eps = float(err_by_pos[p])
        lut = np.where(wp[p] > wn[p], 1.0, -1.0)
        lut[(wp[p] == 0) & (wn[p] == 0)] = 0.0
        if eps >= 0.5 - 1e-12:
            if not positions:
                positions.append(p)
                luts.append(lut)
                alphas.append(0.0)
                errs.append(eps)
            warnings.warn(f"boosting stopped after {len(positions)} rounds: weighted error {eps:.3f} >= 0.5",
                          RuntimeWarning, stacklevel=2)
            break
        e = min(max(eps, 1e-10), 1 - 1e-10)
        alpha = 0.5 * np.log((1 - e) / e)
        positions.append(p)
        luts.append(lut)
        alphas.append(alpha)
        errs.append(eps)
        if eps <= 1e-12:
            break
        w = w * np.exp(-alpha * y * lut[x[:, p]])
        w /= w.sum()

    return AdaboostDetector(np.asarray(positions, dtype=np.int64), np.asarray(luts),
                            np.asarray(alphas, dtype=float), landmark, tag, np.asarray(errs))


# ---------------------------------------------------------------------------
# sliding-window codes


def _phase_kernels(size: int):
    """Per phase, (offset, kernel) such that row ``p + k*m`` of the area matrix
    equals the kernel placed at ``offset + k*n``."""
    f = Fraction(PATCH, size)
    n, m = f.numerator, f.denominator
    mat = area_matrix(size)
    out = []
    for p in range(m):
        nz = np.flatnonzero(mat[p])
        out.append((int(nz[0]), mat[p, nz[0]:nz[-1] + 1]))
    return n, m, out


def _correlate_rows(img: np.ndarray, kern: np.ndarray, axis: int) -> np.ndarray:
    length = img.shape[axis] - len(kern) + 1
    acc = None
    for k, wgt in enumerate(kern):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(k, k + length)
        term = int(wgt) * img[tuple(sl)]
        acc = term if acc is None else acc + term
    return acc


class CodePyramid:
    """Census codes of every descriptor position for every patch placement.

    A level pixel in row ``r = p + k*m`` of level ``L`` (``n / m = 35 / L``
    reduced) is the phase-``p`` area kernel applied at image row
    ``y + k*n + o_p`` for a patch at row ``y``. So with one filtered image per
    phase pair, the code at level center ``(r, c)`` for patch top-left
    ``(y, x)`` is ``C[L, r % m, c % m][y + (r // m) n, x + (c // m) n]`` and
    only ``m * m`` code images per level are needed (36 for the default
    levels). Values are exact integers, so codes match
    :func:`hierarchical_descriptor` on the extracted patch.
    """

    def __init__(self, image: np.ndarray, levels: Sequence[int] = LEVELS):
        img = np.asarray(image)
        if img.ndim != 2:
            raise DimensionError("expected a 2-D grayscale image")
        if img.shape[0] < PATCH or img.shape[1] < PATCH:
            raise DimensionError(f"image smaller than one {PATCH}x{PATCH} patch")
        self.levels = tuple(levels)
        self.shape = img.shape
        base = img.astype(np.int64)
        self._geom = {}
        self._codes = {}
        for s in self.levels:
            n, m, phases = _phase_kernels(s)
            rows = [_correlate_rows(base, k, 0) for _, k in phases]
            filt = {(pr, pc): _correlate_rows(rows[pr], phases[pc][1], 1)
                    for pr in range(m) for pc in range(m)}
            offs = [o for o, _ in phases]
            self._geom[s] = (n, m)
            for pr in range(m):
                for pc in range(m):
                    self._codes[(s, pr, pc)] = _phase_codes(filt, offs, n, m, pr, pc)

    def codes_at(self, position: int, ys, xs) -> np.ndarray:
        """Codes of descriptor ``position`` for patches with top-left ``(ys, xs)``."""
        s, r, c = descriptor_layout(self.levels)[position]
        n, m = self._geom[int(s)]
        arr, y0, x0 = self._codes[(int(s), int(r) % m, int(c) % m)]
        return arr[np.asarray(ys) + (r // m) * n - y0, np.asarray(xs) + (c // m) * n - x0]

    @property
    def n_positions(self) -> tuple[int, int]:
        """Count of valid patch top-left rows and columns."""
        return self.shape[0] - PATCH + 1, self.shape[1] - PATCH + 1

    def descriptor(self, y: int, x: int) -> np.ndarray:
        """Full descriptor of the patch at ``(y, x)`` (slow, for checks)."""
        d = len(descriptor_layout(self.levels))
        return np.array([self.codes_at(p, y, x) for p in range(d)], dtype=np.uint16)

    def score_grid(self, detector: "AdaboostDetector", ys, xs) -> np.ndarray:
        """Detector score for every patch top-left in the grid ``ys x xs``."""
        yy = np.asarray(ys)[:, None]
        xx = np.asarray(xs)[None, :]
        out = np.zeros((yy.shape[0], xx.shape[1]))
        wl = detector.weighted_luts
        for t, p in enumerate(detector.positions):
            out += wl[t][self.codes_at(int(p), yy, xx)]
        return out


def _phase_codes(filt, offs, n, m, pr, pc):
    """Code image for center phase ``(pr, pc)`` with its index origin."""
    pieces = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            qr, qc = pr + dr, pc + dc
            oy = (qr // m) * n + offs[qr % m]
            ox = (qc // m) * n + offs[qc % m]
            pieces.append((oy, ox, filt[(qr % m, qc % m)]))
    y0 = max(0, -min(p[0] for p in pieces))
    x0 = max(0, -min(p[1] for p in pieces))
    hh = min(p[2].shape[0] - (y0 + p[0]) for p in pieces)
    ww = min(p[2].shape[1] - (x0 + p[1]) for p in pieces)
    if hh <= 0 or ww <= 0:
        raise DimensionError("image too small for the pyramid level")
    arrs = [v[y0 + oy:y0 + oy + hh, x0 + ox:x0 + ox + ww] for oy, ox, v in pieces]
    total = sum(arrs)
    code = np.zeros(total.shape, dtype=np.int16)
    for j, a in enumerate(arrs):
        code |= (9 * a > total).astype(np.int16) << j
    return code, y0, x0


# ---------------------------------------------------------------------------
# reference frame and response maps


REF_WIDTH = 150.0
REF_MARGIN = 60


def reference_transform(box, width: float = REF_WIDTH, margin: float = REF_MARGIN):
    """Similarity taking image pixels to the reference frame of a face box.

    The box ``(x, y, w, h)`` is scaled to ``width`` pixels and its top-left
    corner lands at ``(margin, margin)``.
    """
    from .shape_model import SimilarityTransform

    x, y, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0):
        raise ValueError(f"face box must have positive size, got {box}")
    k = width / w
    return SimilarityTransform(k, 0.0, (margin - k * x, margin - k * y))


def reference_size(width: float = REF_WIDTH, margin: float = REF_MARGIN) -> int:
    return int(round(width + 2 * margin))


def warp_to_reference(image: np.ndarray, transform, size: int | None = None) -> np.ndarray:
    """Resample ``image`` into the reference frame (edge replication)."""
    size = reference_size() if size is None else size
    m = transform.matrix.astype(np.float64)
    return cv2.warpAffine(np.asarray(image, dtype=np.uint8), m, (size, size),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


class SearchImage:
    """Reference-frame image resampled at several scales, with code pyramids.

    Scaled image ``k`` shows reference point ``u`` at pixel ``s_k * u``; it is
    padded by ``pad`` pixels of edge replication so patches centered near the
    border stay defined.
    """

    def __init__(self, ref_image: np.ndarray, scales: Sequence[float] = DEFAULT_SCALES,
                 pad: int = HALF + 24):
        ref = np.asarray(ref_image, dtype=np.uint8)
        if ref.ndim != 2:
            raise DimensionError("expected a grayscale image")
        self.ref_shape = ref.shape
        self.scales = tuple(float(s) for s in scales)
        self.pad = pad
        self.images = []
        self.pyramids = []
        for s in self.scales:
            h = int(np.ceil(ref.shape[0] * s)) + 2 * pad
            w = int(np.ceil(ref.shape[1] * s)) + 2 * pad
            m = np.array([[s, 0.0, pad], [0.0, s, pad]])
            img = cv2.warpAffine(ref, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
            self.images.append(img)
            self.pyramids.append(CodePyramid(img))

    def top_left(self, k: int, coords) -> tuple[np.ndarray, bool]:
        """Padded patch top-left indices for reference coordinates at scale ``k``.

        Returns the (clipped) indices and whether clipping happened.
        """
        s = self.scales[k]
        idx = np.rint(np.asarray(coords, dtype=float) * s).astype(np.int64) - HALF + self.pad
        hi = self.images[k].shape[0] - PATCH  # square canvases
        clipped = np.clip(idx, 0, hi)
        return clipped, bool(np.any(clipped != idx))


@dataclass
class ResponseMap:
    """Detector scores on an integer grid of the reference frame.

    ``scores[r, c]`` belongs to reference point ``(origin[0] + c, origin[1] + r)``.
    """

    scores: np.ndarray
    origin: tuple[int, int]
    threshold: float = 0.0
    clipped: bool = False
    landmark: int = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def grid(self) -> np.ndarray:
        """``(h, w, 2)`` reference coordinates of every cell."""
        r, c = np.mgrid[0:self.scores.shape[0], 0:self.scores.shape[1]]
        return np.stack([c + self.origin[0], r + self.origin[1]], axis=-1).astype(float)

    def to_image(self, transform) -> np.ndarray:
        """Image coordinates of every cell given the image-to-reference transform."""
        g = self.grid()
        return transform.inverse().apply(g.reshape(-1, 2)).reshape(g.shape)


def _region_axes(region):
    x0, y0, w, h = (int(round(v)) for v in region)
    if w <= 0 or h <= 0:
        raise ValueError(f"empty search region {region}")
    return x0, y0, np.arange(x0, x0 + w), np.arange(y0, y0 + h)


def response_map(image, detector: AdaboostDetector, region, scales: Sequence[float] = DEFAULT_SCALES,
                 landmark: int = -1) -> ResponseMap:
    """Detector score at every pixel of ``region``, max-reduced over scales.

    Args:
        image: Reference-frame grayscale image or a prepared :class:`SearchImage`.
        detector: Boosted detector.
        region: ``(x, y, w, h)`` in reference coordinates.
        scales: Image scales evaluated when ``image`` is a raw array.

    Returns:
        ResponseMap over the region; ``clipped`` flags regions that needed
        edge replication beyond the padded canvas.
    """
    search = image if isinstance(image, SearchImage) else SearchImage(image, scales)
    x0, y0, xs, ys = _region_axes(region)
    best = None
    clipped = False
    for k in range(len(search.scales)):
        ty, cy = search.top_left(k, ys)
        tx, cx = search.top_left(k, xs)
        clipped |= cy or cx
        sc = search.pyramids[k].score_grid(detector, ty, tx)
        best = sc if best is None else np.maximum(best, sc)
    if clipped:
        log.debug("search region %s clipped at the image border", region)
    return ResponseMap(best, (x0, y0), detector.threshold, clipped, landmark)


def response_map_naive(image, detector: AdaboostDetector, region,
                       scales: Sequence[float] = DEFAULT_SCALES) -> ResponseMap:
    """Per-patch reference route: extract, describe, score (slow)."""
    search = image if isinstance(image, SearchImage) else SearchImage(image, scales)
    x0, y0, xs, ys = _region_axes(region)
    best = None
    for k in range(len(search.scales)):
        ty, _ = search.top_left(k, ys)
        tx, _ = search.top_left(k, xs)
        img = search.images[k]
        patches = np.stack([img[y:y + PATCH, x:x + PATCH] for y in ty for x in tx])
        sc = detector.score(hierarchical_descriptor(patches)).reshape(len(ty), len(tx))
        best = sc if best is None else np.maximum(best, sc)
    return ResponseMap(best, (x0, y0), detector.threshold)


# ---------------------------------------------------------------------------
# candidates


@dataclass
class Candidate:
    """One detector mode approximated by a convex quadratic.

    The inverted score near the mode is ``d^T A d - 2 b^T d + c`` with
    ``d = p - center``. ``mean`` minimizes it; ``cov`` is ``A^-1`` (floored).
    """

    mean: np.ndarray
    cov: np.ndarray
    confidence: float
    A: np.ndarray
    b: np.ndarray
    c: float
    center: np.ndarray

    def transformed(self, transform) -> "Candidate":
        """Candidate expressed in another frame (similarity ``transform``)."""
        s = transform.scale
        r = transform.rotation
        a = r @ self.A @ r.T / s ** 2
        cov = r @ self.cov @ r.T * s ** 2
        center = transform.apply(self.center[None])[0]
        b = r @ self.b / s
        return Candidate(transform.apply(self.mean[None])[0], cov, self.confidence, a, b, self.c, center)


@dataclass
class CandidateSet:
    """Per-landmark candidate lists (a list may be empty)."""

    entries: list

    @property
    def n_landmarks(self) -> int:
        return len(self.entries)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(e) for e in self.entries], dtype=int)

    def padded(self):
        """Dense arrays ``means (N, K, 2)``, ``conf (N, K)``, ``valid (N, K)``."""
        n = self.n_landmarks
        k = max(1, int(self.counts.max(initial=0)))
        means = np.zeros((n, k, 2))
        conf = np.zeros((n, k))
        valid = np.zeros((n, k), dtype=bool)
        for i, lst in enumerate(self.entries):
            for j, cand in enumerate(lst):
                means[i, j] = cand.mean
                conf[i, j] = cand.confidence
                valid[i, j] = True
        return means, conf, valid

    def transformed(self, transform) -> "CandidateSet":
        return CandidateSet([[c.transformed(transform) for c in lst] for lst in self.entries])


def mean_shift(points: np.ndarray, weights: np.ndarray, bandwidth: float = BANDWIDTH,
               tol: float = 1e-4, max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Weighted flat-kernel mean-shift started from every point.

    Returns:
        ``(modes, labels)``: distinct converged modes and, per input point,
        the index of the mode it climbed to. Converged positions chained
        within one bandwidth are one mode, located at their weighted mean.
    """
    x = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    if len(x) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    y = x.copy()
    active = np.ones(len(x), dtype=bool)
    h2 = bandwidth ** 2
    for _ in range(max_iter):
        if not active.any():
            break
        ya = y[active]
        d2 = ((ya[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
        k = (d2 <= h2) * w[None, :]
        tot = k.sum(axis=1)
        new = np.where(tot[:, None] > 0, (k @ x) / np.maximum(tot, 1e-300)[:, None], ya)
        moved = np.linalg.norm(new - ya, axis=1)
        y[active] = new
        idx = np.flatnonzero(active)
        active[idx[moved < tol]] = False

    # flat kernels on a pixel grid stall at nearby fixed points along ridges;
    # converged positions chained within one bandwidth form a single mode
    d2 = ((y[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
    _, comp = connected_components(csr_matrix(d2 < h2), directed=False)
    # number modes by their strongest member (ties: lowest index)
    order = np.lexsort((np.arange(len(x)), -w))
    remap = {}
    for i in order:
        remap.setdefault(comp[i], len(remap))
    labels = np.array([remap[c] for c in comp], dtype=int)
    modes = np.stack([(w[labels == j, None] * y[labels == j]).sum(axis=0) / w[labels == j].sum()
                      for j in range(len(remap))])
    return modes, labels


def _psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    vals = np.maximum(vals, 0.0)
    return (vecs * vals) @ vecs.T


def fit_quadratic(points: np.ndarray, energy: np.ndarray, center: np.ndarray):
    """Least-squares ``E ~ d^T A d - 2 b^T d + c`` with ``A`` projected to PSD.

    After projection ``b`` and ``c`` are re-solved with ``A`` held fixed.
    """
    d = np.asarray(points, dtype=float) - center
    e = np.asarray(energy, dtype=float)
    design = np.stack([d[:, 0] ** 2, 2 * d[:, 0] * d[:, 1], d[:, 1] ** 2,
                       -2 * d[:, 0], -2 * d[:, 1], np.ones(len(d))], axis=1)
    sol = np.linalg.lstsq(design, e, rcond=None)[0]
    a = np.array([[sol[0], sol[1]], [sol[1], sol[2]]])
    a_psd = _psd(a)
    if np.allclose(a_psd, a, atol=1e-12, rtol=0):
        return a, sol[3:5].copy(), float(sol[5])
    quad = np.einsum("ni,ij,nj->n", d, a_psd, d)
    sub = np.linalg.lstsq(design[:, 3:], e - quad, rcond=None)[0]
    return a_psd, sub[:2].copy(), float(sub[2])


def extract_candidates(rmap: ResponseMap, threshold: float | None = None,
                       bandwidth: float = BANDWIDTH, cov_floor: float = 1e-6) -> list:
    """Gaussian candidates from a response map.

    Cells scoring above the threshold are segmented by weighted mean-shift
    (weights ``score - threshold``); each segment gets a convex quadratic fit
    of the inverted score. Confidence is the segment's mass above threshold.

    Args:
        rmap: Response map.
        threshold: Score threshold (defaults to the map's own threshold).
        bandwidth: Mean-shift bandwidth in reference pixels.
        cov_floor: Relative eigenvalue floor used to invert ``A``.

    Returns:
        List of :class:`Candidate`, strongest first (empty if nothing
        exceeds the threshold). Segments of six or more cells with constant
        score are dropped.
    """
    thr = rmap.threshold if threshold is None else threshold
    scores = np.asarray(rmap.scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValueError("response map has non-finite scores")
    mask = scores > thr
    if not mask.any():
        return []
    grid = rmap.grid()[mask]
    vals = scores[mask]
    wts = vals - thr
    modes, labels = mean_shift(grid, wts, bandwidth)
    out = []
    for j, mode in enumerate(modes):
        sel = labels == j
        pts, sv, sw = grid[sel], vals[sel], wts[sel]
        centroid = (sw[:, None] * pts).sum(axis=0) / sw.sum()
        lo, hi = pts.min(axis=0) - 0.5, pts.max(axis=0) + 0.5
        if len(pts) >= 6 and np.ptp(sv) <= 1e-9 * max(abs(sv).max(), 1.0):
            # a flat plateau has no peak to localize
            continue
        if len(pts) >= 6:
            a, b, c = fit_quadratic(pts, -sv, mode)
            vals_a, vecs = np.linalg.eigh(a)
            if vals_a.min() > 1e-12 * max(vals_a.max(), 1e-300):
                mean = mode + np.linalg.solve(a, b)
            else:
                mean = mode + np.linalg.pinv(a) @ b
            if not (np.all(mean >= lo) and np.all(mean <= hi)):
                mean = centroid
        else:
            a, b, c = np.zeros((2, 2)), np.zeros(2), float(-sv.max())
            mean = centroid
        vals_a, vecs = np.linalg.eigh(a)
        floor = max(cov_floor * max(vals_a.max(), 0.0), 1e-12)
        cov = (vecs / np.maximum(vals_a, floor)) @ vecs.T
        out.append(Candidate(np.asarray(mean, dtype=float), cov, float(sw.sum()), a, b, c,
                             np.asarray(mode, dtype=float)))
    out.sort(key=lambda cand: -cand.confidence)
    return out


def merge_expression_candidates(lists: Sequence[Sequence[Candidate]], radius: float = MERGE_RADIUS) -> list:
    """Concatenate candidate lists and drop near-duplicates.

    Candidates whose means lie within ``radius`` pixels of a stronger kept
    candidate are discarded, so each merged group keeps its highest
    confidence.
    """
    pooled = [c for lst in lists for c in lst]
    order = sorted(range(len(pooled)), key=lambda k: (-pooled[k].confidence, k))
    kept: list[Candidate] = []
    for k in order:
        c = pooled[k]
        if all(np.linalg.norm(c.mean - o.mean) > radius for o in kept):
            kept.append(c)
    return kept


# ---------------------------------------------------------------------------
# training patches


def extract_patch(image: np.ndarray, point, angle_deg: float = 0.0) -> np.ndarray:
    """35x35 patch centered (sub-pixel) on ``point``, rotated by ``angle_deg``."""
    a = np.deg2rad(angle_deg)
    r = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    p = np.asarray(point, dtype=float)
    # destination -> source map
    m = np.hstack([r, (p - r @ np.array([HALF, HALF]))[:, None]])
    return cv2.warpAffine(np.asarray(image, dtype=np.uint8), m, (PATCH, PATCH),
                          flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                          borderMode=cv2.BORDER_REPLICATE)


def harvest_patches(image: np.ndarray, point, rng: np.random.Generator, n_negatives: int = 6,
                    rotations: Sequence[float] = (-10.0, 0.0, 10.0), core: float = 5.0,
                    outer: float = 24.0) -> tuple[np.ndarray, np.ndarray]:
    """Positive patches at ``point`` (one per rotation) and negatives drawn
    uniformly (by area) from the ring ``core < r <= outer`` around it."""
    pos = np.stack([extract_patch(image, point, a) for a in rotations])
    rad = np.sqrt(rng.uniform(core ** 2, outer ** 2, n_negatives))
    ang = rng.uniform(0, 2 * np.pi, n_negatives)
    offs = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    neg = np.stack([extract_patch(image, np.asarray(point) + o) for o in offs]) if n_negatives else \
        np.zeros((0, PATCH, PATCH), np.uint8)
    return pos, neg
