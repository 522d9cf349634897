"""Seeded synthetic data: weight streams, ground-truth controller maps, and
demo rigs for training, evaluation, and benchmarks."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .retarget import BlendshapeFrame
from .rig import CharacterRig, ControllerFrame, ControllerSpec

DEFAULT_FPS = 24.0


def weight_stream(n: int, channels: int = 52, seed: int = 0,
                  fps: float = DEFAULT_FPS, noise: float = 0.0) -> list[BlendshapeFrame]:
    """Smooth sinusoid-mixture weight stream covering [0, 1] per channel.

    Two incommensurate oscillators per channel keep the trajectory
    non-periodic over any test-length window.
    """
    if n < 0:
        raise ValidationError("frame count must be >= 0")
    rng = np.random.default_rng(seed)
    f1 = rng.uniform(0.05, 0.8, size=channels)
    f2 = rng.uniform(0.8, 2.0, size=channels)
    p1 = rng.uniform(0.0, 2.0 * np.pi, size=channels)
    p2 = rng.uniform(0.0, 2.0 * np.pi, size=channels)
    amp2 = rng.uniform(0.1, 0.35, size=channels)
    t = np.arange(n)[:, None] / fps
    w = 0.5 + (0.45 - amp2) * np.sin(2 * np.pi * f1 * t + p1) \
        + amp2 * np.sin(2 * np.pi * f2 * t + p2)
    if noise > 0.0:
        w = w + rng.normal(0.0, noise, size=w.shape)
    w = np.clip(w, 0.0, 1.0)
    return [BlendshapeFrame(k / fps, w[k]) for k in range(n)]


class SmoothControllerMap:
    """Ground-truth generator: linear map + saturating nonlinearity, then
    first-order temporal smoothing.

    alpha_t = lam * alpha_{t-1} + (1 - lam) * (0.5 + gain * tanh(A w_t + c))
    """

    def __init__(self, seed: int = 0, in_dim: int = 52, out_dim: int = 100,
                 lam: float = 0.4, gain: float = 0.4):
        if not 0.0 <= lam < 1.0:
            raise ValidationError("smoothing factor must be in [0, 1)")
        rng = np.random.default_rng(seed)
        A = rng.normal(0.0, 1.0, size=(out_dim, in_dim))
        # moderate per-row norm: keeps tanh out of its flat tails
        A *= 1.2 / np.linalg.norm(A, axis=1, keepdims=True)
        self.A = A
        self.c = rng.uniform(-0.3, 0.3, size=out_dim) - self.A @ np.full(in_dim, 0.5)
        self.lam = float(lam)
        self.gain = float(gain)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def instant(self, w: np.ndarray) -> np.ndarray:
        return 0.5 + self.gain * np.tanh(self.A @ w + self.c)

    def step(self, w: np.ndarray, prev: np.ndarray) -> np.ndarray:
        return self.lam * prev + (1.0 - self.lam) * self.instant(w)

    def fixed_point(self, w: np.ndarray) -> np.ndarray:
        return self.instant(w)

    def run(self, frames, init: np.ndarray | None = None) -> list[ControllerFrame]:
        """Roll the map over a weight stream; init defaults to 0.5 per dim."""
        alpha = np.full(self.out_dim, 0.5) if init is None else np.array(init, dtype=np.float64)
        out = []
        for f in frames:
            alpha = self.step(f.weights, alpha)
            out.append(ControllerFrame(f.timestamp, alpha))
        return out


class PiecewiseLinearMap:
    """Seeded piecewise-linear controller-to-controller map.

    y = b + U relu(x - theta) + V relu(theta - x), scaled into (0, 1).
    """

    def __init__(self, seed: int = 0, in_dim: int = 100, out_dim: int = 80):
        rng = np.random.default_rng(seed)
        self.theta = rng.uniform(0.3, 0.7, size=in_dim)
        U = rng.normal(0.0, 1.0, size=(out_dim, in_dim))
        V = rng.normal(0.0, 1.0, size=(out_dim, in_dim))
        U *= 0.8 / np.linalg.norm(U, axis=1, keepdims=True)
        V *= 0.8 / np.linalg.norm(V, axis=1, keepdims=True)
        self.U, self.V = U, V
        self.b = rng.uniform(0.35, 0.65, size=out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim

    def apply(self, x: np.ndarray) -> np.ndarray:
        hi = np.maximum(0.0, x - self.theta)
        lo = np.maximum(0.0, self.theta - x)
        return np.clip(self.b + self.U @ hi + self.V @ lo, 0.0, 1.0)

    def apply_frames(self, frames) -> list[ControllerFrame]:
        return [ControllerFrame(f.timestamp, self.apply(f.values)) for f in frames]


def demo_rig(rig_id: str, count: int) -> CharacterRig:
    """A unit-interval rig: every controller spans [0, 1] with neutral 0."""
    controllers = tuple(
        ControllerSpec(name=f"ctrl_{i:03d}", min=0.0, max=1.0, neutral=0.0)
        for i in range(count)
    )
    return CharacterRig(id=rig_id, controllers=controllers)


def random_emotion(rng) -> np.ndarray:
    """A random point on the 7-class probability simplex (Dirichlet)."""
    return rng.dirichlet(np.full(7, 0.6))


def random_database_arrays(n: int, seed: int):
    """(emotions, geometries) for n synthetic expression records."""
    rng = np.random.default_rng(seed)
    emotions = np.stack([random_emotion(rng) for _ in range(n)])
    geometry = rng.uniform(0.0, 1.0, size=(n, 9))
    return emotions, geometry
