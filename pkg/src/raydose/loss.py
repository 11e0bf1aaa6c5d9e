"""Weighted noise-matching objective emphasizing target and organ regions.

Pixels inside the target or an organ at risk get the highest weight, the
rest of the body an intermediate one, and everything outside the body weight
one; the L1 residual between predicted and true noise is averaged under
those weights.
"""

from __future__ import annotations

import warnings

import numpy as np


def build_weight_map(ptv, oars, body, focus_weight: float = 4.0, body_weight: float = 2.0):
    """Per-pixel loss weights from the anatomy masks.

    ``focus_weight`` applies on PTV and OAR pixels (union, counted once),
    ``body_weight`` elsewhere inside the body, 1.0 outside.  Masks must share
    one shape; the PTV/OAR region takes precedence over the body mask.
    """
    ptv = np.asarray(ptv, dtype=bool)
    body = np.asarray(body, dtype=bool)
    if ptv.shape != body.shape:
        raise ValueError(f"mask shape mismatch: {ptv.shape} vs {body.shape}")
    focus = ptv.copy()
    for oar in oars:
        oar = np.asarray(oar, dtype=bool)
        if oar.shape != ptv.shape:
            raise ValueError(f"mask shape mismatch: {oar.shape} vs {ptv.shape}")
        focus |= oar
    if not focus_weight >= body_weight >= 1.0:
        warnings.warn(
            f"expected focus_weight >= body_weight >= 1, got "
            f"({focus_weight}, {body_weight})",
            stacklevel=2,
        )
    weights = np.where(focus, focus_weight, np.where(body, body_weight, 1.0))
    return weights.astype(np.float64)


def weighted_noise_loss(eps_pred, eps_true, weights, normalize: bool = True):
    """Weighted L1 between predicted and true noise.

    With ``normalize=True`` the weighted absolute residual is divided by the
    total weight, so uniform weights reduce to a plain mean absolute error;
    otherwise the per-image weighted sums are averaged over the batch.
    Works on numpy arrays and torch tensors alike.
    """
    if tuple(eps_pred.shape) != tuple(eps_true.shape):
        raise ValueError(
            f"shape mismatch: {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}"
        )
    if tuple(weights.shape) != tuple(eps_pred.shape):
        raise ValueError(
            f"weights shape {tuple(weights.shape)} must match residual shape "
            f"{tuple(eps_pred.shape)}"
        )
    weighted = (weights * abs(eps_pred - eps_true)).sum()
    if normalize:
        return weighted / weights.sum()
    return weighted / eps_pred.shape[0]
