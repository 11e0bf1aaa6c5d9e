"""Forward noising and reverse ancestral sampling.

The elementwise transforms work on anything with numpy-style arithmetic
(numpy arrays or torch tensors); the full sampling loop is torch-based
because it drives a torch noise predictor.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch

from .schedule import NoiseSchedule, subsample_schedule


def _check_same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_gamma(gamma_t: float, allow_one: bool = True):
    hi_ok = gamma_t <= 1.0 if allow_one else gamma_t < 1.0
    if not (0.0 < gamma_t and hi_ok):
        bound = "(0, 1]" if allow_one else "(0, 1)"
        raise ValueError(f"gamma_t must lie in {bound}, got {gamma_t}")


def forward_sample(y0, gamma_t: float, eps):
    """Corrupt a clean map to noise level gamma_t:
    sqrt(gamma)*y0 + sqrt(1-gamma)*eps."""
    _check_gamma(gamma_t)
    _check_same_shape(y0, eps, "forward_sample")
    return math.sqrt(gamma_t) * y0 + math.sqrt(1.0 - gamma_t) * eps


def analytic_denoise(yt, eps, gamma_t: float):
    """Invert forward_sample given the exact noise realization."""
    _check_gamma(gamma_t)
    _check_same_shape(yt, eps, "analytic_denoise")
    return (yt - math.sqrt(1.0 - gamma_t) * eps) / math.sqrt(gamma_t)


def reverse_step(
    yt,
    eps_pred,
    alpha_t: float,
    gamma_t: float,
    z=None,
    noise_denominator: str = "sqrt",
):
    """One ancestral denoising step from y_t to y_{t-1}.

    ``noise_denominator`` selects the scale applied to the predicted noise:
    "sqrt" divides by sqrt(1 - gamma_t), the form whose single-step limit
    inverts forward_sample exactly; "linear" divides by (1 - gamma_t) and is
    kept only for comparison.  Pass z=None on the final step to suppress the
    stochastic term.
    """
    if not 0.0 < alpha_t < 1.0:
        raise ValueError(f"alpha_t must lie in (0, 1), got {alpha_t}")
    _check_gamma(gamma_t, allow_one=False)
    _check_same_shape(yt, eps_pred, "reverse_step")
    if noise_denominator == "sqrt":
        denom = math.sqrt(1.0 - gamma_t)
    elif noise_denominator == "linear":
        denom = 1.0 - gamma_t
    else:
        raise ValueError(f"unknown noise_denominator {noise_denominator!r}")
    mean = (yt - ((1.0 - alpha_t) / denom) * eps_pred) / math.sqrt(alpha_t)
    if z is None:
        return mean
    _check_same_shape(yt, z, "reverse_step noise")
    return mean + math.sqrt(1.0 - alpha_t) * z


def sample(
    predictor: Callable[[torch.Tensor, torch.Tensor, float], torch.Tensor],
    x_e: torch.Tensor,
    sched: NoiseSchedule,
    rng_seed: int,
    steps: Optional[int] = 100,
    noise_denominator: str = "sqrt",
) -> torch.Tensor:
    """Draw a dose-map estimate by running the reverse chain from pure noise.

    ``predictor`` is called as predictor(y_t, x_e, gamma_t) and must return a
    tensor shaped like y_t.  When ``steps`` is given and smaller than the
    schedule length, the schedule is subsampled first.  The result is a
    (B, 1, H, W) tensor clipped to [-1, 1], bit-reproducible for a fixed
    rng_seed.
    """
    if steps is not None:
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if steps < sched.T:
            sched = subsample_schedule(sched, steps)
    b, h, w = x_e.shape[0], x_e.shape[-2], x_e.shape[-1]
    gen = torch.Generator().manual_seed(int(rng_seed))
    y = torch.randn(b, 1, h, w, generator=gen, dtype=torch.float32)
    for k in range(sched.T, 0, -1):
        gamma_k = sched.gamma_at(k)
        alpha_k = sched.alpha_at(k)
        eps = predictor(y, x_e, gamma_k)
        z = None
        if k > 1:
            z = torch.randn(y.shape, generator=gen, dtype=torch.float32)
        y = reverse_step(y, eps, alpha_k, gamma_k, z, noise_denominator)
    return y.clamp(-1.0, 1.0)
