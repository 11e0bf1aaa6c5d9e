"""Noise schedules driving the forward and reverse diffusion processes.

A schedule fixes, for steps t = 1..T, the per-step signal retention
``alpha_t`` and the cumulative retention ``gamma_t = prod_{i<=t} alpha_i``.
``gamma`` starts near 1 (almost clean) and decays toward 0 (almost pure
noise); ``1 - gamma_t`` is the noise intensity at step t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Floor for per-step retention; keeps gamma strictly positive at the noisy
# end of the schedule where the raw cosine ratio collapses to zero.
ALPHA_FLOOR = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention ``alpha`` and cumulative retention ``gamma``.

    Both arrays have length T and are indexed by ``t - 1`` for step t.
    Construction validates the invariants: alpha in (0, 1), gamma in (0, 1]
    strictly decreasing, and gamma equal to the running product of alpha.
    """

    alpha: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        gamma = np.asarray(self.gamma, dtype=np.float64)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma", gamma)
        if alpha.ndim != 1 or alpha.shape != gamma.shape or alpha.size == 0:
            raise ValueError("alpha and gamma must be equal-length non-empty 1D arrays")
        if not (np.all(alpha > 0.0) and np.all(alpha < 1.0)):
            raise ValueError("alpha values must lie in (0, 1)")
        if not (np.all(gamma > 0.0) and np.all(gamma <= 1.0)):
            raise ValueError("gamma values must lie in (0, 1]")
        if not np.all(np.diff(gamma) < 0.0):
            raise ValueError("gamma must be strictly decreasing")
        if not np.allclose(gamma, np.cumprod(alpha), rtol=1e-10, atol=0.0):
            raise ValueError("gamma must equal the cumulative product of alpha")

    @property
    def T(self) -> int:
        return int(self.alpha.size)

    def gamma_at(self, t: int) -> float:
        """Cumulative retention for step t in [1, T]."""
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return float(self.gamma[t - 1])

    def alpha_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return float(self.alpha[t - 1])


def make_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: gamma_t follows f(t)/f(0) with f(t) = cos^2 of a
    shifted, rescaled quarter period; the small offset ``s`` keeps the first
    step from being exactly noise-free.

    Per-step retention is clipped from below at ``ALPHA_FLOOR`` and gamma is
    rebuilt from the clipped values so the product identity holds exactly.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if s <= 0:
        raise ValueError(f"offset s must be > 0, got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * (np.pi / 2.0)) ** 2
    ratio = f[1:] / f[:-1]
    alpha = np.clip(ratio, ALPHA_FLOOR, None)
    gamma = np.cumprod(alpha)
    return NoiseSchedule(alpha=alpha, gamma=gamma)


def subsample_schedule(
    sched: NoiseSchedule, n_steps: int, strategy: str = "linear"
) -> NoiseSchedule:
    """Shorter schedule over ``n_steps`` of the original gamma values.

    Steps are picked evenly over [1, T] ("linear") or concentrated toward the
    clean end ("quadratic"); the retained gamma values keep their meaning and
    the per-step alpha is recomputed as the ratio of consecutive gammas
    (gamma'_0 = 1), so sampling can run with fewer denoising steps.
    """
    T = sched.T
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    if n_steps == 1:
        idx = np.array([T - 1])
    elif strategy == "linear":
        idx = np.round(np.linspace(0.0, T - 1, n_steps)).astype(int)
    elif strategy == "quadratic":
        u = np.linspace(0.0, 1.0, n_steps) ** 2
        idx = np.round(u * (T - 1)).astype(int)
        for i in range(1, idx.size):
            if idx[i] <= idx[i - 1]:
                idx[i] = idx[i - 1] + 1
        if idx[-1] > T - 1:
            raise ValueError(
                f"quadratic spacing cannot fit {n_steps} distinct steps in [1, {T}]"
            )
    else:
        raise ValueError(f"unknown subsampling strategy {strategy!r}")
    gamma = sched.gamma[idx]
    prev = np.concatenate(([1.0], gamma[:-1]))
    return NoiseSchedule(alpha=gamma / prev, gamma=gamma)
