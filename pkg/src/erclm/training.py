"""Training an ensemble from annotated images grouped by (pose, expression)."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .appearance import (harvest_patches, hierarchical_descriptor, reference_transform,
                         train_detector, warp_to_reference)
from .ensemble import Mode, ModelEnsemble
from .schemes import SCHEMES, LandmarkScheme
from .shape_model import (SimilarityTransform, cluster_exemplars, densify, fit_similarity,
                          procrustes_align, slide_contours, train_pdm)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training knobs (defaults follow the reference protocol)."""

    variance_fraction: float = 0.95
    n_samples: int = 7
    n_exemplars: int = 8
    n_rounds: int = 100
    rotations: tuple = (-10.0, 0.0, 10.0)
    negatives: int = 6
    ring_core: float = 5.0
    ring_outer: float = 24.0
    expression_detectors: str = "mouth"   # "mouth", "all" or "none"
    min_radius: int = 10
    max_radius: int = 24
    seed: int = 0


@dataclass
class TrainingSample:
    shape: np.ndarray
    pose: int
    expression: int
    image: np.ndarray | None = None
    box: tuple | None = None


def scheme_for(n_points: int) -> LandmarkScheme:
    for s in SCHEMES.values():
        if s.n_points == n_points:
            return s
    raise ValueError(f"no landmark scheme with {n_points} points")


def _box_prior(mean: np.ndarray, ref_shapes: list[np.ndarray]) -> tuple[SimilarityTransform, np.ndarray]:
    fits = [fit_similarity(mean, r) for r in ref_shapes]
    z = np.mean([t.complex_factor for t in fits])
    t = np.mean([complex(*t.translation) for t in fits])
    prior = SimilarityTransform.from_complex(z, t)
    placed = prior.apply(mean)
    resid = np.stack([np.linalg.norm(r - placed, axis=1) for r in ref_shapes])
    return prior, resid


def train_mode(shapes, scheme: LandmarkScheme, pose: int, expression: int,
               config: TrainConfig | None = None, boxes=None) -> Mode:
    """Shape side of one mode: subset GPA, contour sliding, PCA, densify,
    exemplars and (when boxes are given) the box prior and search radius."""
    cfg = config or TrainConfig()
    shapes = np.asarray(shapes, dtype=float)
    gpa = procrustes_align(shapes, scheme.anchors)
    slid = slide_contours(gpa.aligned, scheme.contours)
    pdm = train_pdm(slid, cfg.variance_fraction, (pose, expression), scheme.kinds(),
                    scheme.anchors, scheme.contours)
    dense = densify(pdm, cfg.n_samples)
    k = min(cfg.n_exemplars, len(shapes))
    exemplars = cluster_exemplars(slid, k, seed=cfg.seed)
    prior, radius = SimilarityTransform(), cfg.max_radius
    if boxes is not None:
        ref = [reference_transform(b).apply(s) for b, s in zip(boxes, shapes)]
        prior, resid = _box_prior(pdm.mean, ref)
        radius = int(np.clip(np.ceil(np.percentile(resid, 95) + 4), cfg.min_radius, cfg.max_radius))
    return Mode(pose, expression, scheme.name, dense, exemplars, prior, radius)


def train_ensemble(samples: list[TrainingSample], config: TrainConfig | None = None,
                   with_detectors: bool = True) -> ModelEnsemble:
    """Train every mode present in ``samples`` and, optionally, the detectors.

    Detectors are trained per pose. With ``expression_detectors="mouth"``
    mouth landmarks get one detector per expression (their candidates are
    merged at test time) and all other landmarks one detector shared by the
    pose's expressions.
    """
    cfg = config or TrainConfig()
    groups = defaultdict(list)
    for s in samples:
        groups[(s.pose, s.expression)].append(s)
    if not groups:
        raise ValueError("no training samples")

    modes = []
    for (pose, expr) in sorted(groups):
        grp = groups[(pose, expr)]
        scheme = scheme_for(len(grp[0].shape))
        boxes = [s.box for s in grp] if all(s.box is not None for s in grp) else None
        modes.append(train_mode([s.shape for s in grp], scheme, pose, expr, cfg, boxes))
        log.info("mode %s: %d shapes, d=%d", (pose, expr), len(grp), modes[-1].pdm.n_modes)

    ensemble = ModelEnsemble(modes, {}, {"train": asdict(cfg)})
    for mode in modes:
        scheme = mode.landmark_scheme
        exprs = [m.expression for m in modes if m.pose == mode.pose]
        keys = []
        for i in range(scheme.n_points):
            split = cfg.expression_detectors == "all" or (
                cfg.expression_detectors == "mouth" and i in scheme.mouth)
            keys.append([(mode.pose, i, e) for e in exprs] if split and len(exprs) > 1 else [(mode.pose, i, -1)])
        mode.detector_keys = keys

    if with_detectors:
        ensemble.detectors = _train_detectors(groups, modes, cfg)
    return ensemble


def _train_detectors(groups, modes, cfg: TrainConfig) -> dict:
    detectors = {}
    for pose in sorted({m.pose for m in modes}):
        pose_samples = [(e, s) for (p, e), grp in sorted(groups.items()) if p == pose for s in grp]
        if any(s.image is None or s.box is None for _, s in pose_samples):
            raise ValueError("detector training needs images and face boxes")
        warped = []
        for e, s in pose_samples:
            t = reference_transform(s.box)
            warped.append((e, warp_to_reference(s.image, t), t.apply(s.shape)))
        needed = sorted({k for m in modes if m.pose == pose for keys in m.detector_keys for k in keys})
        for key in needed:
            _, i, tag = key
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, pose, i, tag + 1]))
            pos, neg = [], []
            for e, img, ref_shape in warped:
                if tag >= 0 and e != tag:
                    continue
                p, n = harvest_patches(img, ref_shape[i], rng, cfg.negatives, cfg.rotations,
                                       cfg.ring_core, cfg.ring_outer)
                pos.append(p)
                neg.append(n)
            det = train_detector(hierarchical_descriptor(np.concatenate(pos)),
                                 hierarchical_descriptor(np.concatenate(neg)),
                                 cfg.n_rounds, landmark=i, tag=tag)
            detectors[key] = det
        log.info("pose %d: %d detectors", pose, len(needed))
    return detectors
