"""Model container, annotation/box parsers, images and result records.

Container layout (all integers little-endian)::

    b"RCLM1"  u16 version
    repeated chunks:  u16 name_len, name (utf-8), u64 payload_len, u32 crc32, payload
    final chunk named "end" with an empty payload

The "meta" chunk is JSON describing modes and detectors; every numeric array
is its own chunk (a small JSON header with dtype and shape followed by the
raw little-endian bytes), so numbers round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance import AdaboostDetector
from .ensemble import Mode, ModelEnsemble
from .errors import ChecksumError, ContainerError, DimensionError, ParseError, TruncatedContainerError, VersionError
from .schemes import ANNOTATION_SIZES
from .shape_model import DensePdm, ExemplarSet, PointDistributionModel, SimilarityTransform

MAGIC = b"RCLM1"
VERSION = 1


# ---------------------------------------------------------------------------
# container


def _array_payload(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    head = json.dumps({"dtype": le.dtype.str, "shape": list(a.shape)}).encode()
    return struct.pack("<I", len(head)) + head + np.ascontiguousarray(le).tobytes()


def _array_from_payload(payload: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<I", payload, 0)
    head = json.loads(payload[4:4 + n])
    dt = np.dtype(head["dtype"])
    shape = tuple(head["shape"])
    body = payload[4 + n:]
    if len(body) != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise ContainerError("array chunk size does not match its header")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


class _Writer:
    def __init__(self):
        self.parts = [MAGIC, struct.pack("<H", VERSION)]

    def chunk(self, name: str, payload: bytes) -> None:
        nb = name.encode()
        self.parts.append(struct.pack("<H", len(nb)) + nb)
        self.parts.append(struct.pack("<QI", len(payload), zlib.crc32(payload)))
        self.parts.append(payload)

    def array(self, name: str, arr) -> str:
        self.chunk("a:" + name, _array_payload(arr))
        return name

    def finish(self) -> bytes:
        self.chunk("end", b"")
        return b"".join(self.parts)


def _read_chunks(data: bytes) -> dict:
    if len(data) < len(MAGIC) + 2:
        raise TruncatedContainerError("container shorter than its header")
    if data[:len(MAGIC)] != MAGIC:
        raise ContainerError("not a model container (bad magic)")
    (version,) = struct.unpack_from("<H", data, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"container version {version}, this reader supports {VERSION}")
    pos = len(MAGIC) + 2
    chunks = {}
    while True:
        if pos + 2 > len(data):
            raise TruncatedContainerError("container ends inside a chunk header")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + nlen + 12 > len(data):
            raise TruncatedContainerError("container ends inside a chunk header")
        name = data[pos:pos + nlen].decode()
        pos += nlen
        plen, crc = struct.unpack_from("<QI", data, pos)
        pos += 12
        if pos + plen > len(data):
            raise TruncatedContainerError(f"chunk {name!r} is truncated")
        payload = data[pos:pos + plen]
        pos += plen
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in chunk {name!r}")
        if name == "end":
            break
        chunks[name] = payload
    if pos != len(data):
        raise ContainerError("trailing bytes after the end chunk")
    return chunks


def save_model(ensemble: ModelEnsemble) -> bytes:
    """Serialize an ensemble to container bytes."""
    w = _Writer()
    modes_meta = []
    for k, m in enumerate(ensemble.modes):
        p = f"mode{k}/"
        pdm = m.pdm
        tr = m.box_prior
        modes_meta.append({
            "pose": int(m.pose), "expression": int(m.expression), "scheme": m.scheme,
            "search_radius": int(m.search_radius),
            "detector_keys": [[list(map(int, key)) for key in keys] for keys in m.detector_keys],
            "anchors": [list(map(int, a)) if isinstance(a, (tuple, list)) else int(a) for a in pdm.anchors],
            "contours": [list(map(int, c)) for c in pdm.contours],
            "mode_id": list(map(int, pdm.mode_id)),
            "n_samples": {str(i): int(v) for i, v in m.dense.n_samples.items()},
            "arrays": {
                "mean": w.array(p + "mean", pdm.mean),
                "basis": w.array(p + "basis", pdm.basis),
                "eigenvalues": w.array(p + "eigenvalues", pdm.eigenvalues),
                "landmark_cov": w.array(p + "landmark_cov", pdm.landmark_cov),
                "kinds": w.array(p + "kinds", pdm.kinds),
                "weights": w.array(p + "weights", m.dense.weights),
                "group": w.array(p + "group", m.dense.group),
                "representative": w.array(p + "representative", m.dense.representative),
                "centers": w.array(p + "centers", m.exemplars.centers),
                "radius": w.array(p + "radius", np.array([m.exemplars.radius], dtype=np.float64)),
                "box_prior": w.array(p + "box_prior", np.array(
                    [tr.scale, tr.angle, tr.translation[0], tr.translation[1]], dtype=np.float64)),
            },
        })
    det_meta = []
    for j, (key, det) in enumerate(sorted(ensemble.detectors.items())):
        p = f"det{j}/"
        det_meta.append({
            "key": list(map(int, key)), "landmark": int(det.landmark), "tag": int(det.tag),
            "arrays": {
                "positions": w.array(p + "positions", det.positions),
                "luts": w.array(p + "luts", det.luts),
                "alphas": w.array(p + "alphas", det.alphas),
                "errors": w.array(p + "errors", det.errors),
            },
        })
    meta = {
        "n_poses": len(ensemble.poses),
        "expressions": {str(p): ensemble.expressions(p) for p in ensemble.poses},
        "modes": modes_meta,
        "detectors": det_meta,
        "config": ensemble.config,
    }
    w.chunk("meta", json.dumps(meta, sort_keys=True).encode())
    return w.finish()


def _check_mode_dims(pdm: PointDistributionModel, dense: DensePdm, ex: ExemplarSet) -> None:
    n = pdm.mean.shape[0]
    if pdm.basis.shape[0] != 2 * n:
        raise DimensionError(f"basis has {pdm.basis.shape[0]} rows, expected {2 * n}")
    if pdm.eigenvalues.shape != (pdm.basis.shape[1],):
        raise DimensionError("eigenvalue count does not match the basis")
    if pdm.landmark_cov.shape != (n, 2, 2) or pdm.kinds.shape != (n,):
        raise DimensionError("per-landmark arrays do not match the landmark count")
    if dense.weights.shape[1] != n or dense.group.shape != (dense.weights.shape[0],):
        raise DimensionError("dense model does not match the landmark count")
    if ex.centers.shape[1:] != (n, 2):
        raise DimensionError("exemplar centers do not match the landmark count")


def load_model(data: bytes) -> ModelEnsemble:
    """Parse container bytes.

    Raises:
        TruncatedContainerError, ChecksumError, VersionError, ContainerError,
        DimensionError: the container is damaged or inconsistent; nothing is
        returned in that case.
    """
    chunks = _read_chunks(bytes(data))
    if "meta" not in chunks:
        raise ContainerError("container has no metadata chunk")
    meta = json.loads(chunks["meta"])

    def arr(name):
        key = "a:" + name
        if key not in chunks:
            raise ContainerError(f"missing array chunk {name!r}")
        return _array_from_payload(chunks[key])

    modes = []
    for mm in meta["modes"]:
        a = {k: arr(v) for k, v in mm["arrays"].items()}
        anchors = tuple(tuple(x) if isinstance(x, list) else x for x in mm["anchors"])
        pdm = PointDistributionModel(a["mean"], a["basis"], a["eigenvalues"], a["landmark_cov"], a["kinds"],
                                     anchors, tuple(tuple(c) for c in mm["contours"]), tuple(mm["mode_id"]))
        dense = DensePdm(pdm, a["weights"], a["group"], a["representative"],
                         {int(i): v for i, v in mm["n_samples"].items()})
        ex = ExemplarSet(a["centers"], float(a["radius"][0]))
        _check_mode_dims(pdm, dense, ex)
        bp = a["box_prior"]
        prior = SimilarityTransform(float(bp[0]), float(bp[1]), np.array([bp[2], bp[3]]))
        keys = [[tuple(k) for k in keys] for keys in mm["detector_keys"]]
        modes.append(Mode(mm["pose"], mm["expression"], mm["scheme"], dense, ex, prior,
                          mm["search_radius"], keys))
    detectors = {}
    for dm in meta["detectors"]:
        a = {k: arr(v) for k, v in dm["arrays"].items()}
        detectors[tuple(dm["key"])] = AdaboostDetector(a["positions"], a["luts"], a["alphas"],
                                                       dm["landmark"], dm["tag"], a["errors"])
    return ModelEnsemble(modes, detectors, meta.get("config", {}))


def model_summary(ensemble: ModelEnsemble) -> dict:
    """Human-readable description of an ensemble (no numeric payload)."""
    return {
        "format": MAGIC.decode(),
        "version": VERSION,
        "n_modes": ensemble.n_modes,
        "poses": ensemble.poses,
        "expressions": {str(p): ensemble.expressions(p) for p in ensemble.poses},
        "modes": [{"mode": list(m.mode_id), "scheme": m.scheme, "n_points": m.pdm.n_points,
                   "n_dense": m.dense.n_dense, "subspace_dim": m.pdm.n_modes,
                   "n_exemplars": m.exemplars.size, "search_radius": m.search_radius}
                  for m in ensemble.modes],
        "n_detectors": len(ensemble.detectors),
        "config": ensemble.config,
    }


def save_model_file(ensemble: ModelEnsemble, path, sidecar: bool = True) -> None:
    """Write the container and, with ``sidecar``, ``<path>.json`` metadata."""
    Path(path).write_bytes(save_model(ensemble))
    if sidecar:
        Path(str(path) + ".json").write_text(json.dumps(model_summary(ensemble), indent=1, sort_keys=True) + "\n")


def load_model_file(path) -> ModelEnsemble:
    return load_model(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# annotations


def parse_pts(text: str) -> np.ndarray:
    """Points of a ``.pts`` annotation.

    Expected layout::

        version: 1
        n_points: 68
        {
        x y
        ...
        }

    Raises:
        ParseError: malformed header or line, non-finite value, or a point
            count different from the declared one.
    """
    lines = text.splitlines()
    header = {}
    i = 0
    while i < len(lines) and lines[i].strip() != "{":
        s = lines[i].strip()
        if s:
            if ":" not in s:
                raise ParseError(f"expected 'key: value' header, got {s!r}", i + 1)
            k, v = (t.strip() for t in s.split(":", 1))
            header[k] = v
        i += 1
    if i == len(lines):
        raise ParseError("missing opening brace", len(lines) or 1)
    if "n_points" not in header:
        raise ParseError("header does not declare n_points", 1)
    if "version" not in header:
        raise ParseError("header does not declare version", 1)
    try:
        n = int(header["n_points"])
    except ValueError:
        raise ParseError(f"n_points is not an integer: {header['n_points']!r}", 1) from None
    pts = []
    i += 1
    closed = False
    while i < len(lines):
        s = lines[i].strip()
        if s == "}":
            closed = True
            i += 1
            break
        if s:
            parts = s.split()
            if len(parts) != 2:
                raise ParseError(f"expected two coordinates, got {s!r}", i + 1)
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {s!r}", i + 1) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError("non-finite coordinate", i + 1)
            pts.append((x, y))
        i += 1
    if not closed:
        raise ParseError("missing closing brace", len(lines))
    if any(t.strip() for t in lines[i:]):
        raise ParseError("unexpected content after closing brace", i + 1)
    if len(pts) != n:
        raise ParseError(f"declared {n} points, found {len(pts)}")
    return np.array(pts, dtype=float).reshape(n, 2)


def format_pts(points) -> str:
    p = np.asarray(points, dtype=float)
    body = "\n".join(f"{x!r} {y!r}" for x, y in p.tolist())
    return f"version: 1\nn_points: {len(p)}\n{{\n{body}\n}}\n"


@dataclass
class AnnotationRecord:
    image: str
    points: np.ndarray
    occluded: np.ndarray | None = None
    pose: int | None = None
    expression: int | None = None
    box: tuple | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        n = len(self.points)
        if n not in ANNOTATION_SIZES:
            raise DimensionError(f"annotation has {n} points; supported sizes are {ANNOTATION_SIZES}")
        if self.points.shape != (n, 2) or not np.all(np.isfinite(self.points)):
            raise DimensionError("annotation points must be finite (N, 2)")
        if self.occluded is not None:
            self.occluded = np.asarray(self.occluded, dtype=np.uint8)
            if self.occluded.shape != (n,):
                raise DimensionError("occlusion bits must have one entry per landmark")

    @property
    def n_points(self) -> int:
        return len(self.points)


def load_annotations(path) -> list[AnnotationRecord]:
    """JSON-lines manifest, one object per face.

    Keys: ``image`` (path), either ``points`` (list of [x, y]) or ``pts``
    (path of a .pts file), and optionally ``occluded``, ``pose``,
    ``expression`` and ``box`` ([x, y, w, h]). Relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    out = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", ln) from None
        if "image" not in obj:
            raise ParseError("record has no 'image'", ln)
        if "points" in obj:
            pts = np.asarray(obj["points"], dtype=float)
        elif "pts" in obj:
            pts = parse_pts((base / obj["pts"]).read_text())
        else:
            raise ParseError("record has neither 'points' nor 'pts'", ln)
        try:
            rec = AnnotationRecord(str(base / obj["image"]), pts, obj.get("occluded"), obj.get("pose"),
                                   obj.get("expression"), tuple(obj["box"]) if "box" in obj else None)
        except DimensionError as exc:
            raise ParseError(str(exc), ln) from None
        out.append(rec)
    return out


def annotation_line(rec: AnnotationRecord, relative_to=None) -> str:
    image = rec.image
    if relative_to is not None:
        try:
            image = str(Path(image).relative_to(relative_to))
        except ValueError:
            pass
    obj = {"image": image, "points": rec.points.tolist()}
    if rec.occluded is not None:
        obj["occluded"] = rec.occluded.tolist()
    for k in ("pose", "expression"):
        if getattr(rec, k) is not None:
            obj[k] = int(getattr(rec, k))
    if rec.box is not None:
        obj["box"] = [float(v) for v in rec.box]
    return json.dumps(obj)


# ---------------------------------------------------------------------------
# face boxes


@dataclass(frozen=True)
class FaceBox:
    image: str
    x: float
    y: float
    w: float
    h: float

    @property
    def rect(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def parse_face_boxes(text: str) -> list[FaceBox]:
    """Records ``path x y w h``, one per line, in file order.

    Several records may name the same image (one per face). Blank lines
    and ``#`` comments are skipped. Paths may contain spaces.

    Raises:
        ParseError: wrong field count, non-numeric or non-finite values, or
            a box without positive width and height.
    """
    out = []
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.rsplit(maxsplit=4)
        if len(parts) != 5:
            raise ParseError(f"expected 'path x y w h', got {s!r}", ln)
        try:
            x, y, w, h = (float(v) for v in parts[1:])
        except ValueError:
            raise ParseError(f"non-numeric box in {s!r}", ln) from None
        if not all(math.isfinite(v) for v in (x, y, w, h)):
            raise ParseError("non-finite box value", ln)
        if w <= 0 or h <= 0:
            raise ParseError(f"box must have positive width and height, got w={w} h={h}", ln)
        out.append(FaceBox(parts[0], x, y, w, h))
    return out


def load_face_boxes(path) -> list[FaceBox]:
    return parse_face_boxes(Path(path).read_text())


def format_face_boxes(boxes) -> str:
    return "".join(f"{b.image} " + " ".join(repr(float(v)) for v in b.rect) + "\n" for b in boxes)


def boxes_by_image(boxes) -> dict:
    out: dict[str, list[FaceBox]] = {}
    for b in boxes:
        out.setdefault(b.image, []).append(b)
    return out


# ---------------------------------------------------------------------------
# images


def load_image(path) -> np.ndarray:
    """8-bit grayscale array; color is converted with ITU-R 601-2 luma weights."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def save_image(path, image: np.ndarray) -> None:
    """Write a grayscale image (use a lossless format such as PNG)."""
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# results


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _unnum(v):
    return float("inf") if v is None else float(v)


@dataclass
class ResultRecord:
    """One aligned face (JSON-lines serializable, lossless for floats)."""

    image: str
    success: bool
    points: np.ndarray | None = None
    occluded: np.ndarray | None = None
    mode: tuple | None = None
    d: float = float("inf")
    V: int = 0
    E: float = float("inf")
    alternates: list = field(default_factory=list)
    box: tuple | None = None
    message: str = ""

    @classmethod
    def from_alignment(cls, image: str, result, box=None) -> "ResultRecord":
        if not result.success:
            return cls(image, False, box=tuple(box) if box is not None else None, message=result.message)
        alts = [{"mode": list(map(int, m)), "points": np.asarray(p).tolist()} for m, p in result.alternates]
        return cls(image, True, np.asarray(result.shape, dtype=float), 1 - np.asarray(result.labels, dtype=np.uint8),
                   tuple(int(v) for v in result.mode_id), float(result.d), int(result.V), float(result.E),
                   alts, tuple(box) if box is not None else None, result.message)

    def to_json(self) -> str:
        obj = {
            "image": self.image,
            "success": bool(self.success),
            "points": None if self.points is None else np.asarray(self.points, dtype=float).tolist(),
            "occluded": None if self.occluded is None else np.asarray(self.occluded).astype(int).tolist(),
            "mode": None if self.mode is None else list(self.mode),
            "d": _num(self.d),
            "V": int(self.V),
            "E": _num(self.E),
            "alternates": self.alternates,
            "box": None if self.box is None else [float(v) for v in self.box],
            "message": self.message,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ResultRecord":
        o = json.loads(line)
        return cls(o["image"], o["success"],
                   None if o["points"] is None else np.asarray(o["points"], dtype=float),
                   None if o["occluded"] is None else np.asarray(o["occluded"], dtype=np.uint8),
                   None if o["mode"] is None else tuple(o["mode"]),
                   _unnum(o["d"]), int(o["V"]), _unnum(o["E"]), o["alternates"],
                   None if o["box"] is None else tuple(o["box"]), o.get("message", ""))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResultRecord):
            return NotImplemented
        return self.to_json() == other.to_json()


def write_results(path, records) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_results(path) -> list[ResultRecord]:
    return [ResultRecord.from_json(l) for l in Path(path).read_text().splitlines() if l.strip()]


def load_config(path) -> dict:
    """JSON configuration file as a dict (unknown keys are rejected by the consumer)."""
    return json.loads(Path(path).read_text())
