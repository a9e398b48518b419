"""Landmark schemes: index layouts, contour runs, anchors and correspondences.

The 68-point layout follows the common iBUG ordering (jaw 0-16, brows 17-26,
nose 27-35, eyes 36-47, mouth 48-67). The 40-point profile layout is a
subset of it, so the correspondence table is just the list of 68-point
indices kept by the profile scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field

POINT = 0
CONTOUR = 1


@dataclass(frozen=True)
class LandmarkScheme:
    """Static description of a landmarking scheme.

    Attributes:
        name: Scheme identifier stored in model containers.
        n_points: Number of landmarks.
        contours: Ordered index runs whose members are contour-like.
        anchors: Normalization anchors. Each entry is a landmark index or a
            tuple of indices whose centroid is used (e.g. an eye center).
        outer_eye_corners: Pair of indices used for interocular normalization,
            or None when the scheme has only one visible eye.
        jaw: Indices dropped by the reduced evaluation subset.
        mouth: Indices whose detectors are merged across expressions.
        to_frontal: For each landmark, the matching index in the 68-point
            scheme (identity for the frontal scheme).
    """

    name: str
    n_points: int
    contours: tuple[tuple[int, ...], ...] = ()
    anchors: tuple = ()
    outer_eye_corners: tuple[int, int] | None = None
    jaw: tuple[int, ...] = ()
    mouth: tuple[int, ...] = ()
    to_frontal: tuple[int, ...] = field(default=())

    def kinds(self) -> list[int]:
        """Per-landmark kind flags (POINT or CONTOUR)."""
        out = [POINT] * self.n_points
        for run in self.contours:
            for i in run:
                out[i] = CONTOUR
        return out


_JAW = tuple(range(17))
_MOUTH = tuple(range(48, 68))

FRONTAL_68 = LandmarkScheme(
    name="frontal68",
    n_points=68,
    contours=(_JAW,),
    anchors=(tuple(range(36, 42)), tuple(range(42, 48)), 33),
    outer_eye_corners=(36, 45),
    jaw=_JAW,
    mouth=_MOUTH,
    to_frontal=tuple(range(68)),
)

# visible half of a right-facing profile
_PROFILE_FROM_FRONTAL = (
    tuple(range(0, 9))            # jaw up to the chin
    + tuple(range(17, 22))        # visible brow
    + tuple(range(27, 31))        # nose bridge
    + (31, 32, 33)                # nostril
    + tuple(range(36, 42))        # visible eye
    + (48, 49, 50, 51, 52, 57, 58, 59)
    + (60, 61, 62, 66, 67)
)
assert len(_PROFILE_FROM_FRONTAL) == 40


def _profile_index(frontal_index: int) -> int:
    return _PROFILE_FROM_FRONTAL.index(frontal_index)


PROFILE_40 = LandmarkScheme(
    name="profile40",
    n_points=40,
    contours=(tuple(range(0, 9)),),
    anchors=(
        tuple(_profile_index(i) for i in range(36, 42)),
        _profile_index(33),
        _profile_index(48),
    ),
    outer_eye_corners=None,
    jaw=tuple(range(0, 9)),
    mouth=tuple(_profile_index(i) for i in _PROFILE_FROM_FRONTAL if i >= 48),
    to_frontal=_PROFILE_FROM_FRONTAL,
)

SCHEMES = {s.name: s for s in (FRONTAL_68, PROFILE_40)}

# annotation sizes accepted on input; 29 has no scheme (no mapper is provided)
ANNOTATION_SIZES = (68, 40, 29)


def get_scheme(name: str) -> LandmarkScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise KeyError(f"unknown landmark scheme {name!r}") from None


def subset_indices(scheme: LandmarkScheme, subset: int) -> list[int]:
    """Indices evaluated for a subset flag (68 = all points, 51 = no jaw)."""
    if subset == scheme.n_points or subset == 68:
        return list(range(scheme.n_points))
    if subset == 51:
        jaw = set(scheme.jaw)
        return [i for i in range(scheme.n_points) if i not in jaw]
    raise ValueError(f"unsupported subset {subset}")
