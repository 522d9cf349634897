"""Landmark registration and the geometric/emotion feature representations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, DimensionError, FormatError, ValidationError

LANDMARK_COUNT = 49
STATS_FILE_VERSION = 1
SEMANTIC_MAP_VERSION = 1
MEAN_FACE_VERSION = 1

# Emotion class order used by every 7-component distribution in the package.
EMOTION_LABELS = ("neutral", "anger", "sadness", "fear", "disgust", "joy", "surprise")

# Component order of the 9-float geometric feature vector.
FEATURE_NAMES = (
    "mouth_width",
    "closed_mouth_height",
    "nose_width",
    "left_eyebrow_height",
    "right_eyebrow_height",
    "left_eyelid_height",
    "right_eyelid_height",
    "left_lip_height",
    "right_lip_height",
)
FEATURE_COUNT = len(FEATURE_NAMES)


def _locked(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def validate_emotion_distribution(p) -> np.ndarray:
    """Check the 7-class simplex invariant and return a locked array."""
    v = np.asarray(p, dtype=np.float64).ravel()
    if v.size != len(EMOTION_LABELS):
        raise DimensionError(f"emotion distribution has {v.size} components, expected 7")
    if not np.all(np.isfinite(v)):
        raise ValidationError("emotion distribution contains non-finite values")
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise ValidationError("emotion probabilities must lie in [0, 1]")
    if abs(float(v.sum()) - 1.0) > 1e-6:
        raise ValidationError(f"emotion probabilities sum to {v.sum()}, expected 1")
    return _locked(v)


@dataclass(frozen=True)
class LandmarkSet:
    """49 two-dimensional facial landmark coordinates."""

    points: np.ndarray

    def __post_init__(self):
        p = _locked(self.points)
        if p.shape != (LANDMARK_COUNT, 2):
            raise DimensionError(f"landmark set shape {p.shape}, expected (49, 2)")
        if not np.all(np.isfinite(p)):
            raise ValidationError("landmark set contains non-finite coordinates")
        object.__setattr__(self, "points", p)


@dataclass(frozen=True)
class MeanFace:
    """Reference frontal-face landmarks; centroid sits at the origin."""

    points: np.ndarray

    def __post_init__(self):
        p = _locked(self.points)
        if p.shape != (LANDMARK_COUNT, 2):
            raise DimensionError(f"mean face shape {p.shape}, expected (49, 2)")
        if not np.all(np.isfinite(p)):
            raise ValidationError("mean face contains non-finite coordinates")
        centroid = p.mean(axis=0)
        if np.max(np.abs(centroid)) > 1e-9:
            raise ValidationError(f"mean face centroid {centroid} is not at the origin")
        object.__setattr__(self, "points", p)


@dataclass(frozen=True)
class SemanticIndexMap:
    """Named indices into the 49-point layout used by geometric_features.

    Eye centers are optional: when absent, the center height is the midpoint
    of that eye's top and bottom landmarks (the layout has no pupil point).
    """

    mouth_left: int
    mouth_right: int
    upper_lip: int
    lower_lip: int
    nose_left: int
    nose_right: int
    left_brow_top: int
    right_brow_top: int
    left_eye_top: int
    left_eye_bottom: int
    right_eye_top: int
    right_eye_bottom: int
    left_lower_eyelid: int
    right_lower_eyelid: int
    left_eye_center: int | None = None
    right_eye_center: int | None = None

    def __post_init__(self):
        named = {k: v for k, v in self.__dict__.items() if v is not None}
        for name, idx in named.items():
            if not (0 <= idx < LANDMARK_COUNT):
                raise ValidationError(f"semantic index {name}={idx} outside [0, 49)")
        required = [v for k, v in named.items() if not k.endswith("_center")]
        if len(set(required)) != len(required):
            raise ValidationError("semantic indices with distinct meanings must differ")


def register_landmarks(raw: LandmarkSet, mean: MeanFace) -> LandmarkSet:
    """Least-squares affine alignment of a raw landmark set onto the mean face.

    Solves for the 6-parameter transform (A, t) minimizing
    sum ||A p_i + t - mean_i||^2 and returns the transformed points.
    """
    src = raw.points
    dst = mean.points
    n = src.shape[0]
    # Stacked system: rows [x y 1 0 0 0] -> x', [0 0 0 x y 1] -> y'.
    A = np.zeros((2 * n, 6))
    b = np.empty(2 * n)
    A[0::2, 0] = src[:, 0]
    A[0::2, 1] = src[:, 1]
    A[0::2, 2] = 1.0
    A[1::2, 3] = src[:, 0]
    A[1::2, 4] = src[:, 1]
    A[1::2, 5] = 1.0
    b[0::2] = dst[:, 0]
    b[1::2] = dst[:, 1]
    params, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 6:
        raise DegenerateGeometryError(
            f"affine fit is rank-deficient (rank {rank}); landmarks may be collinear"
        )
    M = params[:6].reshape(2, 3)
    out = src @ M[:, :2].T + M[:, 2]
    return LandmarkSet(out)


def geometric_features(registered: LandmarkSet, smap: SemanticIndexMap) -> np.ndarray:
    """The 9 raw inter-landmark distances, in FEATURE_NAMES order.

    Widths are Euclidean pair distances; every "height" is an absolute
    vertical (y-axis) difference in the registered canonical frame.
    """
    p = registered.points

    def vy(i: int) -> float:
        return float(p[i, 1])

    def eye_center_y(top: int, bottom: int, center: int | None) -> float:
        if center is not None:
            return vy(center)
        return 0.5 * (vy(top) + vy(bottom))

    mouth_width = float(np.linalg.norm(p[smap.mouth_left] - p[smap.mouth_right]))
    closed_mouth_height = abs(vy(smap.upper_lip) - vy(smap.lower_lip))
    nose_width = float(np.linalg.norm(p[smap.nose_left] - p[smap.nose_right]))
    lc = eye_center_y(smap.left_eye_top, smap.left_eye_bottom, smap.left_eye_center)
    rc = eye_center_y(smap.right_eye_top, smap.right_eye_bottom, smap.right_eye_center)
    left_eyebrow_height = abs(vy(smap.left_brow_top) - lc)
    right_eyebrow_height = abs(vy(smap.right_brow_top) - rc)
    left_eyelid_height = abs(vy(smap.left_eye_top) - vy(smap.left_eye_bottom))
    right_eyelid_height = abs(vy(smap.right_eye_top) - vy(smap.right_eye_bottom))
    left_lip_height = abs(vy(smap.mouth_left) - vy(smap.left_lower_eyelid))
    right_lip_height = abs(vy(smap.mouth_right) - vy(smap.right_lower_eyelid))

    return np.array([
        mouth_width,
        closed_mouth_height,
        nose_width,
        left_eyebrow_height,
        right_eyebrow_height,
        left_eyelid_height,
        right_eyelid_height,
        left_lip_height,
        right_lip_height,
    ])


@dataclass(frozen=True)
class FeatureStats:
    """Per-component min/max over a dataset, used for min-max normalization."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        mins = _locked(self.mins)
        maxs = _locked(self.maxs)
        if mins.shape != (FEATURE_COUNT,) or maxs.shape != (FEATURE_COUNT,):
            raise DimensionError("feature stats must have 9 min/max pairs")
        if np.any(mins > maxs):
            raise ValidationError("feature stats with min > max")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)


def fit_stats(dataset) -> FeatureStats:
    """Componentwise extremes over a non-empty list of raw feature vectors."""
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v in dataset]
    if not vecs:
        raise ValidationError("cannot fit stats on an empty dataset")
    mat = np.stack(vecs)
    if mat.shape[1] != FEATURE_COUNT:
        raise DimensionError(f"feature vectors have {mat.shape[1]} components, expected 9")
    return FeatureStats(mat.min(axis=0), mat.max(axis=0))


def normalize_features(raw, stats: FeatureStats) -> np.ndarray:
    """Min-max rescale into [0, 1]; degenerate components (max == min) map to 0.

    Out-of-range values clamp rather than error: live queries may exceed the
    extremes seen when the stats were fitted.
    """
    v = np.asarray(raw, dtype=np.float64).ravel()
    if v.size != FEATURE_COUNT:
        raise DimensionError(f"feature vector has {v.size} components, expected 9")
    span = stats.maxs - stats.mins
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(span > 0.0, (v - stats.mins) / span, 0.0)
    return np.clip(out, 0.0, 1.0)


def denormalize_features(normalized, stats: FeatureStats) -> np.ndarray:
    """Invert normalize_features (degenerate components return their min)."""
    v = np.asarray(normalized, dtype=np.float64).ravel()
    if v.size != FEATURE_COUNT:
        raise DimensionError(f"feature vector has {v.size} components, expected 9")
    return stats.mins + v * (stats.maxs - stats.mins)


def fit_mean_face(sets) -> MeanFace:
    """Average a landmark corpus after centroid/scale alignment of each set."""
    sets = list(sets)
    if not sets:
        raise ValidationError("cannot fit a mean face on an empty corpus")
    acc = np.zeros((LANDMARK_COUNT, 2))
    for s in sets:
        p = s.points - s.points.mean(axis=0)
        scale = np.sqrt((p ** 2).sum() / LANDMARK_COUNT)
        if scale <= 0.0:
            raise DegenerateGeometryError("landmark set collapses to a single point")
        acc += p / scale
    mean = acc / len(sets)
    return MeanFace(mean - mean.mean(axis=0))


# --- file formats -----------------------------------------------------------

def save_stats(stats: FeatureStats, path) -> None:
    doc = {
        "version": STATS_FILE_VERSION,
        "log_base": "e",
        "features": [
            {"name": n, "min": float(stats.mins[i]), "max": float(stats.maxs[i])}
            for i, n in enumerate(FEATURE_NAMES)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_stats(path) -> FeatureStats:
    doc = _read_json(path)
    if doc.get("version") != STATS_FILE_VERSION:
        raise FormatError(f"{path}: unsupported stats version {doc.get('version')!r}")
    try:
        by_name = {f["name"]: (float(f["min"]), float(f["max"])) for f in doc["features"]}
        mins = [by_name[n][0] for n in FEATURE_NAMES]
        maxs = [by_name[n][1] for n in FEATURE_NAMES]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed stats file: {e}") from e
    return FeatureStats(np.array(mins), np.array(maxs))


def save_landmark_file(records, path) -> None:
    """Write (id, LandmarkSet) pairs, one JSON record per line."""
    with open(path, "w", encoding="utf-8") as f:
        for rec_id, lset in records:
            f.write(json.dumps({"id": rec_id, "points": lset.points.tolist()}) + "\n")


def load_landmark_file(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                out.append((doc["id"], LandmarkSet(np.array(doc["points"], dtype=np.float64))))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"{path}:{ln}: malformed landmark record: {e}") from e
    return out


def save_semantic_map(smap: SemanticIndexMap, path) -> None:
    indices = {k: v for k, v in smap.__dict__.items() if v is not None}
    doc = {"version": SEMANTIC_MAP_VERSION, "indices": indices}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_semantic_map(path) -> SemanticIndexMap:
    doc = _read_json(path)
    if doc.get("version") != SEMANTIC_MAP_VERSION:
        raise FormatError(f"{path}: unsupported map version {doc.get('version')!r}")
    try:
        return SemanticIndexMap(**{k: int(v) for k, v in doc["indices"].items()})
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed semantic map: {e}") from e


def save_mean_face(mean: MeanFace, path) -> None:
    doc = {"version": MEAN_FACE_VERSION, "points": mean.points.tolist()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_mean_face(path) -> MeanFace:
    doc = _read_json(path)
    if doc.get("version") != MEAN_FACE_VERSION:
        raise FormatError(f"{path}: unsupported mean face version {doc.get('version')!r}")
    try:
        return MeanFace(np.array(doc["points"], dtype=np.float64))
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed mean face file: {e}") from e


def default_semantic_map() -> SemanticIndexMap:
    """The bundled map for the standard 49-point frontal layout."""
    return load_semantic_map(_data_path("semantic_map.json"))


def default_mean_face() -> MeanFace:
    """The bundled canonical mean face."""
    return load_mean_face(_data_path("mean_face.json"))


def _data_path(name: str) -> Path:
    return Path(resources.files("miencap").joinpath("data", name))


def _read_json(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return doc
