"""Synthetic pelvic phantoms with an analytic crossfire-beam dose oracle.

Each phantom is a smooth superellipse body containing one target ellipsoid
and four organs at risk (bladder, right/left femoral head, small bowel).
The dose is the sum of K divergent beams aimed at the target centroid, each
with exponential depth attenuation and a Gaussian-penumbra aperture fitted
to the target silhouette, rescaled so the target-mean equals prescription.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import erf

from .volume import DEFAULT_PRESCRIPTION_GY, OAR_NAMES, PatientVolume


@dataclass(frozen=True)
class PhantomParams:
    shape: tuple[int, int, int] = (32, 96, 96)  # (D, H, W) voxels
    spacing_mm: float = 3.0
    prescription_gy: float = DEFAULT_PRESCRIPTION_GY
    num_beams: int = 5
    attenuation_per_mm: float = 0.02
    penumbra_sigma_mm: float = 6.0
    aperture_margin_mm: float = 4.0
    source_distance_mm: float = 1000.0
    body_wobble: float = 0.05
    ptv_radius_mm: tuple[float, float] = (16.0, 26.0)
    ptv_z_radius_mm: tuple[float, float] = (12.0, 20.0)
    oar_radius_mm: tuple[float, float] = (10.0, 17.0)
    max_oar_ptv_overlap: float = 0.10

    def validate(self):
        d, h, w = self.shape
        if d < 4 or h < 32 or w < 32:
            raise ValueError(f"shape {self.shape} too small for a phantom")
        if h % 8 or w % 8:
            raise ValueError(f"H and W must be divisible by 8, got {h}x{w}")
        if self.spacing_mm <= 0:
            raise ValueError("spacing_mm must be positive")
        if self.prescription_gy <= 0:
            raise ValueError("prescription_gy must be positive")
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if self.attenuation_per_mm < 0 or self.penumbra_sigma_mm <= 0:
            raise ValueError("attenuation must be >= 0 and penumbra > 0")
        if not 0.0 <= self.max_oar_ptv_overlap <= 1.0:
            raise ValueError("max_oar_ptv_overlap must lie in [0, 1]")
        for lo, hi in (self.ptv_radius_mm, self.ptv_z_radius_mm, self.oar_radius_mm):
            if not 0 < lo <= hi:
                raise ValueError("radius ranges must satisfy 0 < lo <= hi")


def _ellipsoid(zz, yy, xx, center, radii) -> np.ndarray:
    cz, cy, cx = center
    rz, ry, rx = radii
    return (
        ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    ) <= 1.0


def _trim_overlap(mask, ptv, cap, center, zz, yy, xx):
    """Drop overlap voxels (farthest from the organ center first) until the
    overlapping fraction of the organ is within the cap."""
    overlap = mask & ptv
    total = int(mask.sum())
    allowed = int(math.floor(cap * total))
    excess = int(overlap.sum()) - allowed
    if excess <= 0 or total == 0:
        return mask
    idx = np.argwhere(overlap)
    pos = np.stack(
        [zz[tuple(idx.T)], yy[tuple(idx.T)], xx[tuple(idx.T)]], axis=1
    )
    d2 = ((pos - np.asarray(center)) ** 2).sum(axis=1)
    drop = idx[np.argsort(d2)[::-1][:excess]]
    out = mask.copy()
    out[tuple(drop.T)] = False
    return out


def _beam_depth(body: np.ndarray, angle_rad: float, spacing: float) -> np.ndarray:
    """Radiological depth (mm of body tissue crossed) for a beam travelling
    in-plane at ``angle_rad``, computed by rotating the body so the beam is
    axis-aligned, accumulating along the axis, and rotating back."""
    deg = math.degrees(angle_rad)
    rot = ndimage.rotate(
        body.astype(np.float32), deg, axes=(1, 2), reshape=False, order=1
    )
    path = (np.cumsum(rot, axis=2) - 0.5 * rot) * spacing
    depth = ndimage.rotate(path, -deg, axes=(1, 2), reshape=False, order=1)
    return np.maximum(depth, 0.0)


def _aperture(offset, half_width, sigma):
    """Smooth top-hat profile: ~1 inside +-half_width, Gaussian shoulders."""
    s = math.sqrt(2.0) * sigma
    return 0.5 * (erf((offset + half_width) / s) - erf((offset - half_width) / s))


def generate_phantom(seed: int, params: PhantomParams = PhantomParams()) -> PatientVolume:
    """Deterministically generate one phantom from a seed.

    The returned volume satisfies: masks inside the body, dose >= 0, and
    target-mean dose equal to the prescription.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    d, h, w = params.shape
    sp = params.spacing_mm

    z = (np.arange(d) - (d - 1) / 2.0) * sp
    y = (np.arange(h) - (h - 1) / 2.0) * sp
    x = (np.arange(w) - (w - 1) / 2.0) * sp
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")

    # Body: superellipse cross-section, tapered toward the volume ends and
    # perturbed by a smooth random field.
    ax = (w * sp / 2.0) * rng.uniform(0.80, 0.90)
    ay = (h * sp / 2.0) * rng.uniform(0.62, 0.74)
    power = rng.uniform(2.2, 3.0)
    taper = 1.0 - 0.08 * (zz / (d * sp / 2.0)) ** 2
    wobble = ndimage.gaussian_filter(rng.standard_normal((d, h, w)), sigma=(2, 8, 8))
    wobble *= params.body_wobble / max(np.abs(wobble).max(), 1e-9)
    radial = (np.abs(xx) / (ax * taper)) ** power + (np.abs(yy) / (ay * taper)) ** power
    body = radial * (1.0 + wobble) <= 1.0

    # Target: ellipsoid near the pelvic center, position jittered per seed.
    # Radii are clamped against the body so small test volumes stay valid.
    z_half = d * sp / 2.0
    ptv_r = min(rng.uniform(*params.ptv_radius_mm), 0.40 * min(ax, ay))
    ptv_rz = min(rng.uniform(*params.ptv_z_radius_mm), 0.45 * z_half)
    center = np.array(
        [
            rng.uniform(-0.08, 0.08) * z_half,
            rng.uniform(0.00, 0.12) * ay,
            rng.uniform(-0.06, 0.06) * ax,
        ]
    )
    ptv = _ellipsoid(zz, yy, xx, center, (ptv_rz, ptv_r, ptv_r)) & body

    # Organs at risk around the target: bladder anterior, femoral heads
    # lateral, small bowel superior-anterior.
    cap = params.max_oar_ptv_overlap
    r_max = 0.35 * min(ax, ay)
    r_bld = min(rng.uniform(*params.oar_radius_mm), r_max)
    bld_y = center[1] - (ptv_r + r_bld) * rng.uniform(0.80, 1.00)
    bld_y = max(bld_y, -(0.85 * ay - r_bld))
    bld_center = np.array([center[0] + rng.uniform(-4.0, 4.0), bld_y, center[2]])
    bld = _ellipsoid(zz, yy, xx, bld_center, (r_bld * 1.1, r_bld, r_bld)) & body

    r_fem = min(rng.uniform(*params.oar_radius_mm), r_max)
    lateral = min(ptv_r + r_fem + rng.uniform(6.0, 14.0), 0.72 * ax)
    fem_y = center[1] + rng.uniform(-4.0, 4.0)
    fhr = _ellipsoid(
        zz, yy, xx,
        (center[0], fem_y, center[2] + lateral),
        (r_fem * 1.5, r_fem, r_fem),
    ) & body
    fhl = _ellipsoid(
        zz, yy, xx,
        (center[0], fem_y, center[2] - lateral),
        (r_fem * 1.5, r_fem, r_fem),
    ) & body

    r_st = min(rng.uniform(*params.oar_radius_mm), r_max)
    st_z = center[0] + (ptv_rz + r_st) * rng.uniform(0.75, 0.95)
    st_z = min(st_z, z_half - 0.4 * r_st)
    st_center = np.array(
        [
            st_z,
            center[1] - rng.uniform(0.2, 0.5) * ptv_r,
            center[2] + rng.uniform(-8.0, 8.0),
        ]
    )
    st = _ellipsoid(zz, yy, xx, st_center, (r_st, r_st, r_st * 1.6)) & body

    oar_masks = {"bld": bld, "fhr": fhr, "fhl": fhl, "st": st}
    oar_centers = {"bld": bld_center, "fhr": None, "fhl": None, "st": st_center}
    oar_centers["fhr"] = np.array([center[0], fem_y, center[2] + lateral])
    oar_centers["fhl"] = np.array([center[0], fem_y, center[2] - lateral])
    for name in OAR_NAMES:
        mask = _trim_overlap(oar_masks[name], ptv, cap, oar_centers[name], zz, yy, xx)
        if not mask.any():
            raise ValueError(f"seed {seed}: organ {name} ended up empty")
        oar_masks[name] = mask
    if not ptv.any():
        raise ValueError(f"seed {seed}: target mask ended up empty")

    # CT: air outside, soft tissue with smooth texture inside, bone-like
    # femoral heads, fluid-like bladder.
    texture = ndimage.gaussian_filter(rng.standard_normal((d, h, w)), sigma=(1, 3, 3))
    texture /= max(np.abs(texture).max(), 1e-9)
    ct = np.full((d, h, w), -1000.0, dtype=np.float32)
    ct[body] = 30.0 + 60.0 * texture[body]
    ct[oar_masks["st"]] = -20.0 + 30.0 * texture[oar_masks["st"]]
    ct[oar_masks["bld"]] = 5.0 + 10.0 * texture[oar_masks["bld"]]
    ct[ptv] = 45.0 + 20.0 * texture[ptv]
    bone = oar_masks["fhr"] | oar_masks["fhl"]
    ct[bone] = 500.0 + 150.0 * texture[bone]
    ct = np.clip(ct, -1000.0, 1000.0)

    # Crossfire dose: evenly spaced gantry angles with a random offset.
    ptv_pos = np.argwhere(ptv)
    ptv_mm = np.stack(
        [z[ptv_pos[:, 0]], y[ptv_pos[:, 1]], x[ptv_pos[:, 2]]], axis=1
    )
    offset = rng.uniform(0.0, 2.0 * math.pi)
    dose = np.zeros((d, h, w), dtype=np.float64)
    for k in range(params.num_beams):
        angle = offset + 2.0 * math.pi * k / params.num_beams
        dx, dy = math.cos(angle), math.sin(angle)
        nx, ny = -dy, dx  # in-plane normal to the beam axis
        depth = _beam_depth(body, angle, sp)
        along = (xx - center[2]) * dx + (yy - center[1]) * dy
        across = (xx - center[2]) * nx + (yy - center[1]) * ny
        diverge = (params.source_distance_mm + along) / params.source_distance_mm
        half_u = (
            np.abs((ptv_mm[:, 2] - center[2]) * nx + (ptv_mm[:, 1] - center[1]) * ny)
        ).max() + params.aperture_margin_mm
        half_z = np.abs(ptv_mm[:, 0] - center[0]).max() + params.aperture_margin_mm
        profile = _aperture(across / np.maximum(diverge, 0.5), half_u,
                            params.penumbra_sigma_mm)
        profile_z = _aperture(zz - center[0], half_z, params.penumbra_sigma_mm)
        dose += np.exp(-params.attenuation_per_mm * depth) * profile * profile_z

    dose *= body
    ptv_mean = dose[ptv].mean()
    if ptv_mean <= 0:
        raise ValueError(f"seed {seed}: beams missed the target")
    dose *= params.prescription_gy / ptv_mean

    return PatientVolume(
        patient_id=f"phantom-{seed:04d}",
        ct=ct.astype(np.float32),
        ptv=ptv.astype(np.uint8),
        oars={name: oar_masks[name].astype(np.uint8) for name in OAR_NAMES},
        dose=dose.astype(np.float32),
        spacing=(sp, sp, sp),
        prescription=params.prescription_gy,
    )
