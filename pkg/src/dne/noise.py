"""Per-vertex Gaussian noise with magnitude-dependent spread.

Each noise element is drawn as ``eps = mu + (gamma * |mu| + delta) * z`` with
``z ~ N(0, 1)``, so gradients reach ``mu`` through the fixed draw ``z``. At
inference time ``eps = mu``.

Standard-normal draws come from Philox streams keyed by a seed plus integer
indices (stage, sample, ...), so any draw can be regenerated independently of
evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

Z2D, Z3D = 0, 1


def normal_stream(seed: int, *index: int, shape) -> np.ndarray:
    """Standard normals from the Philox stream for ``(seed, *index)``, row-major."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(i) for i in index]])
    return np.random.Generator(np.random.Philox(key)).standard_normal(shape)


def noise_scale(mu: np.ndarray, gamma: float, delta: float) -> np.ndarray:
    return gamma * np.abs(mu) + delta


def reparam(mu: np.ndarray, z: np.ndarray, gamma: float, delta: float) -> np.ndarray:
    return mu + noise_scale(mu, gamma, delta) * z


def reparam_grad(mu: np.ndarray, z: np.ndarray, gamma: float, upstream: np.ndarray) -> np.ndarray:
    # sign(0) = 0: the subgradient at mu = 0 leaves the factor at exactly 1
    return upstream * (1.0 + gamma * np.sign(mu) * z)


@dataclass(frozen=True)
class NoiseField:
    mu_2d: np.ndarray
    mu_3d: np.ndarray
    gamma: float = 0.1
    delta: float = 1e-3
    delta_2d: float | None = None  # pixel-space margin; falls back to ``delta``

    def __post_init__(self):
        if not (self.gamma > 0 and self.delta > 0):
            raise ValueError("gamma and delta must be strictly positive")
        if self.delta_2d is not None and not self.delta_2d > 0:
            raise ValueError("delta_2d must be strictly positive")
        mu2 = np.asarray(self.mu_2d, dtype=np.float64)
        mu3 = np.asarray(self.mu_3d, dtype=np.float64)
        if not (np.all(np.isfinite(mu2)) and np.all(np.isfinite(mu3))):
            raise ValueError("noise means must be finite")
        object.__setattr__(self, "mu_2d", mu2)
        object.__setattr__(self, "mu_3d", mu3)

    @property
    def margin_2d(self) -> float:
        return self.delta if self.delta_2d is None else self.delta_2d


@dataclass(frozen=True)
class NoiseSample:
    eps_2d: np.ndarray
    eps_3d: np.ndarray
    z_2d: np.ndarray = dc_field(repr=False)
    z_3d: np.ndarray = dc_field(repr=False)


def sample(field: NoiseField, rng_seed: int) -> NoiseSample:
    z2 = normal_stream(rng_seed, Z2D, shape=field.mu_2d.shape)
    z3 = normal_stream(rng_seed, Z3D, shape=field.mu_3d.shape)
    return NoiseSample(
        reparam(field.mu_2d, z2, field.gamma, field.margin_2d),
        reparam(field.mu_3d, z3, field.gamma, field.delta),
        z2, z3,
    )


def inference_noise(field: NoiseField) -> NoiseSample:
    return NoiseSample(field.mu_2d.copy(), field.mu_3d.copy(),
                       np.zeros_like(field.mu_2d), np.zeros_like(field.mu_3d))


def sample_gradient(field: NoiseField, drawn: NoiseSample, upstream_2d, upstream_3d):
    """Chain upstream gradients w.r.t. ``eps`` back to ``(mu_2d, mu_3d)``."""
    return (reparam_grad(field.mu_2d, drawn.z_2d, field.gamma, np.asarray(upstream_2d)),
            reparam_grad(field.mu_3d, drawn.z_3d, field.gamma, np.asarray(upstream_3d)))
