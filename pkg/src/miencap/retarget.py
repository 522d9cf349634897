"""Real-time retargeting: calibration, history-conditioned adaption, fan-out,
and frame-rate upsampling."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, StreamError, ValidationError
from .neural import NetworkModel, forward
from .rig import CharacterRig, ControllerFrame, clamp_controllers

HISTORY_LEN = 3
DEFAULT_TARGET_FPS = 24.0
DEFAULT_STALE_TIMEOUT = 0.2
MANIFEST_VERSION = 1
PROFILE_FILE_VERSION = 1

# Normative layout of the adaption-network input vector: calibrated weights,
# then the controller frames at t-1, t-2, t-3, newest first.
INPUT_LAYOUT = "weights|t-1|t-2|t-3"


def _locked(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BlendshapeFrame:
    """Timestamped tracker weights over a named channel list."""

    timestamp: float
    weights: np.ndarray

    def __post_init__(self):
        w = _locked(np.ravel(self.weights))
        if not np.all(np.isfinite(w)):
            raise ValidationError("blendshape weights contain non-finite values")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class CalibrationProfile:
    """Per-channel neutral weights captured from a rest-pose window."""

    neutral_weights: np.ndarray
    sample_count: int

    def __post_init__(self):
        n = _locked(np.ravel(self.neutral_weights))
        if np.any(n < 0.0) or np.any(n > 1.0) or not np.all(np.isfinite(n)):
            raise ValidationError("neutral weights must lie in [0, 1]")
        if self.sample_count < 1:
            raise ValidationError("profile needs at least one sample")
        object.__setattr__(self, "neutral_weights", n)


class HistoryBuffer:
    """The three most recent primary controller frames, newest first."""

    def __init__(self, seed_frame: ControllerFrame):
        self._frames = deque([seed_frame] * HISTORY_LEN, maxlen=HISTORY_LEN)

    def push(self, frame: ControllerFrame) -> None:
        self._frames.appendleft(frame)

    @property
    def frames(self) -> tuple:
        return tuple(self._frames)

    def stacked_values(self) -> np.ndarray:
        return np.concatenate([f.values for f in self._frames])


def calibrate(frames) -> CalibrationProfile:
    """Per-channel mean over a neutral-pose window."""
    frames = list(frames)
    if not frames:
        raise ValidationError("calibration window is empty")
    width = frames[0].weights.size
    for f in frames:
        if f.weights.size != width:
            raise DimensionError("calibration frames have mixed channel counts")
    mean = np.mean([f.weights for f in frames], axis=0)
    return CalibrationProfile(np.clip(mean, 0.0, 1.0), len(frames))


def apply_calibration(frame: BlendshapeFrame, profile: CalibrationProfile) -> BlendshapeFrame:
    """Re-express weights relative to the performer's neutral pose.

    Per channel: w' = clamp((w - n) / (1 - n), 0, 1). A channel pinned at
    n = 1 maps to 0. The zero profile is the identity.
    """
    w = frame.weights
    n = profile.neutral_weights
    if w.size != n.size:
        raise ValidationError(
            f"frame has {w.size} channels, profile has {n.size}"
        )
    span = 1.0 - n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(span > 0.0, (w - n) / span, 0.0)
    return BlendshapeFrame(frame.timestamp, np.clip(out, 0.0, 1.0))


def build_adaption_input(frame: BlendshapeFrame, history: HistoryBuffer) -> np.ndarray:
    """Concatenate calibrated weights with the t-1, t-2, t-3 controller values."""
    return np.concatenate([frame.weights, history.stacked_values()])


def adapt_secondary(model: NetworkModel, primary: ControllerFrame,
                    rig: CharacterRig) -> ControllerFrame:
    """Map a primary controller frame onto a secondary rig and clamp it."""
    if model.input_dim != primary.values.size:
        raise DimensionError(
            f"secondary model expects {model.input_dim} inputs, "
            f"primary frame has {primary.values.size}"
        )
    out = forward(model, primary.values)
    return clamp_controllers(rig, out, primary.timestamp)


def upsample_linear(keys, src_fps: float, dst_fps: float) -> list[ControllerFrame]:
    """Resample keyframes onto a dst_fps grid over [first, last] timestamp.

    Each output sample linearly interpolates its bracketing keys per
    component; both endpoints are reproduced exactly.
    """
    keys = list(keys)
    if src_fps <= 0.0 or dst_fps <= 0.0:
        raise ValidationError("frame rates must be > 0")
    if not keys:
        return []
    times = np.array([k.timestamp for k in keys])
    if np.any(np.diff(times) <= 0.0):
        raise ValidationError("keyframes must be in strictly increasing timestamp order")
    if len(keys) == 1:
        return [keys[0]]
    first, last = float(times[0]), float(times[-1])
    n = int(np.floor((last - first) * dst_fps + 1e-9))
    sample_t = first + np.arange(n + 1) / dst_fps
    if abs(sample_t[-1] - last) <= 1e-9 / dst_fps:
        sample_t[-1] = last
    else:
        sample_t = np.append(sample_t, last)
    values = np.stack([k.values for k in keys])
    out_vals = np.empty((sample_t.size, values.shape[1]))
    for d in range(values.shape[1]):
        out_vals[:, d] = np.interp(sample_t, times, values[:, d])
    return [ControllerFrame(float(t), out_vals[i]) for i, t in enumerate(sample_t)]


@dataclass(frozen=True)
class TrainingTuple:
    """One supervised example: input vector beta and its target controllers."""

    input: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "input", _locked(self.input))
        object.__setattr__(self, "target", _locked(self.target))


def build_training_tuples(blendshape_stream, ground_truth_controllers) -> list[TrainingTuple]:
    """Teacher-forced tuples: beta from frame t plus ground truth at t-1..t-3.

    Streams must be aligned frame-by-frame; the first tuple sits at t = 3.
    """
    bs = list(blendshape_stream)
    gt = list(ground_truth_controllers)
    if len(bs) != len(gt):
        raise ValidationError(f"misaligned streams: {len(bs)} frames vs {len(gt)} controllers")
    if len(bs) < HISTORY_LEN + 1:
        raise ValidationError(f"need at least {HISTORY_LEN + 1} aligned frames")
    tuples = []
    for t in range(HISTORY_LEN, len(bs)):
        beta = np.concatenate([
            bs[t].weights,
            gt[t - 1].values,
            gt[t - 2].values,
            gt[t - 3].values,
        ])
        tuples.append(TrainingTuple(beta, gt[t].values))
    return tuples


def jitter_metric(frames) -> float:
    """Mean over consecutive pairs of the mean absolute per-controller delta."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValidationError("jitter needs at least 2 frames")
    values = np.stack([f.values for f in frames])
    return float(np.mean(np.abs(np.diff(values, axis=0))))


@dataclass
class PipelineConfig:
    target_fps: float = DEFAULT_TARGET_FPS
    stale_timeout: float = DEFAULT_STALE_TIMEOUT


class RetargetPipeline:
    """Streaming state machine: calibration -> adaption network -> rig clamp.

    Single-threaded with respect to retarget_step (history is mutable);
    secondary fan-out reads only the immutable primary frame.
    """

    def __init__(self, channels, calibration: CalibrationProfile,
                 adaption: NetworkModel, primary_rig: CharacterRig,
                 secondaries: dict | None = None,
                 secondary_rigs: dict | None = None,
                 config: PipelineConfig | None = None):
        self.channels = tuple(channels)
        self.calibration = calibration
        self.adaption = adaption
        self.primary_rig = primary_rig
        self.secondaries = dict(secondaries or {})
        self.secondary_rigs = dict(secondary_rigs or {})
        self.config = config or PipelineConfig()

        n_chan = len(self.channels)
        n_prim = primary_rig.controller_count
        if calibration.neutral_weights.size != n_chan:
            raise DimensionError(
                f"calibration has {calibration.neutral_weights.size} channels, "
                f"pipeline has {n_chan}"
            )
        expect = n_chan + HISTORY_LEN * n_prim
        if adaption.input_dim != expect:
            raise DimensionError(
                f"adaption network expects {adaption.input_dim} inputs, "
                f"pipeline layout needs {expect}"
            )
        if adaption.output_dim != n_prim:
            raise DimensionError(
                f"adaption network outputs {adaption.output_dim} values, "
                f"primary rig has {n_prim} controllers"
            )
        declared = adaption.metadata.get("input_layout")
        if declared is not None and declared != INPUT_LAYOUT:
            raise ValidationError(
                f"adaption model declares layout {declared!r}, "
                f"pipeline uses {INPUT_LAYOUT!r}"
            )
        if set(self.secondaries) != set(self.secondary_rigs):
            raise ValidationError("secondary models and rigs must cover the same ids")
        for cid, model in self.secondaries.items():
            if model.input_dim != n_prim:
                raise DimensionError(
                    f"secondary '{cid}' expects {model.input_dim} inputs, "
                    f"primary rig has {n_prim} controllers"
                )
            if model.output_dim != self.secondary_rigs[cid].controller_count:
                raise DimensionError(
                    f"secondary '{cid}' outputs {model.output_dim} values, "
                    f"its rig has {self.secondary_rigs[cid].controller_count}"
                )

        neutral = ControllerFrame(0.0, primary_rig.neutral_values)
        self.history = HistoryBuffer(neutral)
        self._last_calibrated: BlendshapeFrame | None = None

    @property
    def character_ids(self) -> list[str]:
        return [self.primary_rig.id] + sorted(self.secondaries)

    def retarget_step(self, frame: BlendshapeFrame) -> ControllerFrame:
        """Process one tracker frame into a clamped primary controller frame."""
        if frame.weights.size != len(self.channels):
            raise StreamError(
                f"frame has {frame.weights.size} channels, stream opened with "
                f"{len(self.channels)}"
            )
        calibrated = apply_calibration(frame, self.calibration)
        self._last_calibrated = calibrated
        beta = build_adaption_input(calibrated, self.history)
        raw = forward(self.adaption, beta)
        out = clamp_controllers(self.primary_rig, raw, frame.timestamp)
        self.history.push(out)
        return out

    def repeat_last(self, timestamp: float) -> ControllerFrame | None:
        """Re-feed the last calibrated frame (stale-input path); None before
        any frame has arrived."""
        if self._last_calibrated is None:
            return None
        beta = build_adaption_input(self._last_calibrated, self.history)
        raw = forward(self.adaption, beta)
        out = clamp_controllers(self.primary_rig, raw, timestamp)
        self.history.push(out)
        return out

    def fan_out(self, primary: ControllerFrame) -> dict:
        """Secondary controller frames for every attached character."""
        return {
            cid: adapt_secondary(model, primary, self.secondary_rigs[cid])
            for cid, model in self.secondaries.items()
        }

    def recalibrate(self, frames) -> CalibrationProfile:
        profile = calibrate(frames)
        if profile.neutral_weights.size != len(self.channels):
            raise DimensionError("recalibration window has wrong channel count")
        self.calibration = profile
        return profile


def default_channels() -> list[str]:
    """The bundled 52-name tracker-style FACS channel list."""
    path = Path(resources.files("miencap").joinpath("data", "channels_52.json"))
    doc = json.loads(path.read_text(encoding="utf-8"))
    return list(doc["channels"])


def save_profile(profile: CalibrationProfile, path, channels=None) -> None:
    doc = {
        "version": PROFILE_FILE_VERSION,
        "neutral_weights": profile.neutral_weights.tolist(),
        "sample_count": profile.sample_count,
    }
    if channels is not None:
        doc["channels"] = list(channels)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_profile(path) -> CalibrationProfile:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    if doc.get("version") != PROFILE_FILE_VERSION:
        raise FormatError(f"{path}: unsupported profile version {doc.get('version')!r}")
    try:
        return CalibrationProfile(np.array(doc["neutral_weights"], dtype=np.float64),
                                  int(doc["sample_count"]))
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed profile: {e}") from e


@dataclass
class PipelineManifest:
    """Paths and settings binding one runnable pipeline together."""

    channels: list
    adaption_model: str
    primary_rig: str
    calibration: str | None = None
    secondaries: dict = field(default_factory=dict)  # id -> {model, rig}
    target_fps: float = DEFAULT_TARGET_FPS
    stale_timeout: float = DEFAULT_STALE_TIMEOUT


def save_manifest(manifest: PipelineManifest, path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "channels": list(manifest.channels),
        "adaption_model": manifest.adaption_model,
        "primary_rig": manifest.primary_rig,
        "calibration": manifest.calibration,
        "secondaries": manifest.secondaries,
        "target_fps": manifest.target_fps,
        "stale_timeout": manifest.stale_timeout,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_manifest(path) -> PipelineManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    try:
        return PipelineManifest(
            channels=list(doc["channels"]),
            adaption_model=doc["adaption_model"],
            primary_rig=doc["primary_rig"],
            calibration=doc.get("calibration"),
            secondaries=dict(doc.get("secondaries", {})),
            target_fps=float(doc.get("target_fps", DEFAULT_TARGET_FPS)),
            stale_timeout=float(doc.get("stale_timeout", DEFAULT_STALE_TIMEOUT)),
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed manifest: {e}") from e


def build_pipeline(manifest: PipelineManifest, base_dir=None) -> RetargetPipeline:
    """Load models, rigs, and calibration named by a manifest."""
    from .neural import load_model
    from .rig import load_rig

    base = Path(base_dir) if base_dir is not None else Path(".")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    adaption = load_model(resolve(manifest.adaption_model))
    primary_rig = load_rig(resolve(manifest.primary_rig))
    if manifest.calibration:
        profile = load_profile(resolve(manifest.calibration))
    else:
        profile = CalibrationProfile(np.zeros(len(manifest.channels)), 1)
    secondaries, secondary_rigs = {}, {}
    for cid, entry in manifest.secondaries.items():
        secondaries[cid] = load_model(resolve(entry["model"]))
        secondary_rigs[cid] = load_rig(resolve(entry["rig"]))
    return RetargetPipeline(
        channels=manifest.channels,
        calibration=profile,
        adaption=adaption,
        primary_rig=primary_rig,
        secondaries=secondaries,
        secondary_rigs=secondary_rigs,
        config=PipelineConfig(manifest.target_fps, manifest.stale_timeout),
    )
