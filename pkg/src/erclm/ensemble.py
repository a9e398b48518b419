"""Multi-mode model: one shape model per (pose, expression) cell plus a shared
pool of landmark detectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .appearance import AdaboostDetector
from .schemes import LandmarkScheme, get_scheme
from .shape_model import DensePdm, ExemplarSet, SimilarityTransform

DetectorKey = tuple  # (pose, landmark, tag); tag -1 = shared by all expressions


@dataclass
class Mode:
    """One (pose, expression) cell.

    Attributes:
        pose: Pose index ``n``.
        expression: Expression index ``m`` within the pose.
        scheme: Landmark scheme name.
        dense: Dense shape model (its ``base`` is the sparse PDM).
        exemplars: Exemplar shapes in the model frame.
        box_prior: Typical model-to-reference-frame similarity for this mode.
        search_radius: Half-size (reference pixels) of detector search regions.
        detector_keys: Per landmark, keys of the detectors whose candidates
            are merged for that landmark.
    """

    pose: int
    expression: int
    scheme: str
    dense: DensePdm
    exemplars: ExemplarSet
    box_prior: SimilarityTransform = field(default_factory=SimilarityTransform)
    search_radius: int = 16
    detector_keys: list = field(default_factory=list)

    @property
    def mode_id(self) -> tuple[int, int]:
        return (self.pose, self.expression)

    @property
    def pdm(self):
        return self.dense.base

    @property
    def landmark_scheme(self) -> LandmarkScheme:
        return get_scheme(self.scheme)

    def prior_shape(self) -> np.ndarray:
        """Mean shape placed in the reference frame by the box prior."""
        return self.box_prior.apply(self.pdm.mean)


@dataclass
class ModelEnsemble:
    """All modes plus the detector pool they reference."""

    modes: list
    detectors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def poses(self) -> list[int]:
        return sorted({m.pose for m in self.modes})

    def expressions(self, pose: int) -> list[int]:
        """Expression indices ``E(n)`` present for ``pose``."""
        return sorted(m.expression for m in self.modes if m.pose == pose)

    def mode(self, pose: int, expression: int) -> Mode:
        for m in self.modes:
            if m.mode_id == (pose, expression):
                return m
        raise KeyError(f"no mode {(pose, expression)}")

    def has_detectors(self) -> bool:
        return bool(self.detectors) and all(k in self.detectors for m in self.modes
                                            for keys in m.detector_keys for k in keys)

    def detector(self, key: DetectorKey) -> AdaboostDetector:
        return self.detectors[tuple(key)]
