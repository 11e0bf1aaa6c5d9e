"""Patient volume bundles: CT, masks, dose, normalization, slicing, disk IO.

A volume is a (D, H, W) stack of axial slices with one PTV mask and four
named OAR masks.  The on-disk form is a directory of raw little-endian
arrays plus a meta.json carrying dims, spacing, prescription, dtype codes,
byte order, and per-file SHA-256 checksums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OAR_NAMES = ("bld", "fhr", "fhl", "st")
STRUCTURE_CHANNELS = ("ct", "ptv") + OAR_NAMES
BODY_HU_THRESHOLD = -300.0
CT_WINDOW_HU = 1000.0
DOSE_HEADROOM = 1.2
DEFAULT_PRESCRIPTION_GY = 50.40

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class PatientVolume:
    """One patient's CT, target mask, OAR masks, and dose volume."""

    patient_id: str
    ct: np.ndarray  # (D, H, W) Hounsfield-like units
    ptv: np.ndarray  # (D, H, W) uint8 {0, 1}
    oars: dict[str, np.ndarray]  # keys OAR_NAMES, each (D, H, W) uint8
    dose: np.ndarray  # (D, H, W) Gy
    spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)
    prescription: float = DEFAULT_PRESCRIPTION_GY

    def __post_init__(self):
        shape = self.ct.shape
        if len(shape) != 3:
            raise ValueError(f"expected 3D arrays, got shape {shape}")
        if tuple(self.oars.keys()) != OAR_NAMES:
            raise ValueError(
                f"oars must be keyed {OAR_NAMES} in order, got {tuple(self.oars)}"
            )
        for name, arr in [("ptv", self.ptv), ("dose", self.dose)] + [
            (k, v) for k, v in self.oars.items()
        ]:
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != ct shape {shape}")
        if self.prescription <= 0:
            raise ValueError(f"prescription must be > 0, got {self.prescription}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.ct.shape

    def body_mask(self) -> np.ndarray:
        return self.ct > BODY_HU_THRESHOLD

    def masks(self) -> dict[str, np.ndarray]:
        """All ROI masks keyed by name, body first."""
        out = {"body": self.body_mask(), "ptv": self.ptv.astype(bool)}
        out.update({k: v.astype(bool) for k, v in self.oars.items()})
        return out


def normalize_dose(dose_gy, prescription: float):
    """Map [0, headroom * prescription] Gy linearly onto [-1, 1], clamped."""
    if prescription <= 0:
        raise ValueError(f"prescription must be > 0, got {prescription}")
    return np.clip(2.0 * dose_gy / (DOSE_HEADROOM * prescription) - 1.0, -1.0, 1.0)


def denormalize_dose(values, prescription: float):
    """Inverse of normalize_dose; output is clamped to be non-negative."""
    if prescription <= 0:
        raise ValueError(f"prescription must be > 0, got {prescription}")
    values = np.clip(values, -1.0, 1.0)
    return (values + 1.0) * (DOSE_HEADROOM * prescription / 2.0)


def normalize_ct(hu):
    """Window Hounsfield units at +-CT_WINDOW_HU onto [-1, 1]."""
    return np.clip(np.asarray(hu, dtype=np.float32) / CT_WINDOW_HU, -1.0, 1.0)


@dataclass
class SliceBatch:
    """A window of B contiguous axial slices of one patient.

    ``structure`` stacks the normalized CT and the binary masks in the fixed
    order (ct, ptv, bld, fhr, fhl, st); ``dose`` holds the normalized dose
    targets.  The final window of a volume may be padded by repeating the
    last slice; ``num_valid`` counts the real slices so padding can be
    excluded from losses and metrics.
    """

    structure: np.ndarray  # (B, 2+o, H, W) float32
    dose: np.ndarray  # (B, 1, H, W) float32
    patient_id: str
    slice_offset: int
    num_valid: int

    @property
    def window(self) -> int:
        return self.structure.shape[0]

    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(self.window, dtype=bool)
        mask[: self.num_valid] = True
        return mask


def slice_volume(vol: PatientVolume, window: int = 16) -> list[SliceBatch]:
    """Partition a volume into non-overlapping windows of ``window`` slices.

    The last window is padded by repeating the final slice when the depth is
    not a multiple of the window size.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    depth = vol.shape[0]
    structure = np.concatenate(
        [normalize_ct(vol.ct)[:, None]]
        + [vol.ptv.astype(np.float32)[:, None]]
        + [vol.oars[name].astype(np.float32)[:, None] for name in OAR_NAMES],
        axis=1,
    )  # (D, 6, H, W)
    dose = normalize_dose(vol.dose, vol.prescription).astype(np.float32)[:, None]

    batches = []
    for start in range(0, depth, window):
        stop = min(start + window, depth)
        struct_win = structure[start:stop]
        dose_win = dose[start:stop]
        num_valid = stop - start
        if num_valid < window:
            pad = window - num_valid
            struct_win = np.concatenate(
                [struct_win, np.repeat(struct_win[-1:], pad, axis=0)], axis=0
            )
            dose_win = np.concatenate(
                [dose_win, np.repeat(dose_win[-1:], pad, axis=0)], axis=0
            )
        batches.append(
            SliceBatch(
                structure=np.ascontiguousarray(struct_win),
                dose=np.ascontiguousarray(dose_win),
                patient_id=vol.patient_id,
                slice_offset=start,
                num_valid=num_valid,
            )
        )
    return batches


def assemble_slices(arrays, num_valid) -> np.ndarray:
    """Concatenate per-window (B, 1, H, W) arrays back into a (D, H, W)
    volume, dropping padded slices."""
    parts = []
    for arr, valid in zip(arrays, num_valid):
        arr = np.asarray(arr)
        parts.append(arr[:valid, 0])
    return np.concatenate(parts, axis=0)


def assemble_dose(batches: list[SliceBatch]) -> np.ndarray:
    """Rebuild the normalized dose volume from slice batches."""
    ordered = sorted(batches, key=lambda b: b.slice_offset)
    return assemble_slices(
        [b.dose for b in ordered], [b.num_valid for b in ordered]
    )


# --- on-disk bundle format -------------------------------------------------

_FILES = {
    "ct": ("ct.f32", "f32"),
    "dose": ("dose.f32", "f32"),
    "ptv": ("ptv.u8", "u8"),
    "oar_bld": ("oar_bld.u8", "u8"),
    "oar_fhr": ("oar_fhr.u8", "u8"),
    "oar_fhl": ("oar_fhl.u8", "u8"),
    "oar_st": ("oar_st.u8", "u8"),
}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_volume(vol: PatientVolume, path) -> Path:
    """Write a volume bundle directory; returns its path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {
        "ct": vol.ct.astype("<f4"),
        "dose": vol.dose.astype("<f4"),
        "ptv": (vol.ptv > 0).astype("u1"),
    }
    for name in OAR_NAMES:
        arrays[f"oar_{name}"] = (vol.oars[name] > 0).astype("u1")

    checksums = {}
    dtypes = {}
    for key, (fname, code) in _FILES.items():
        raw = np.ascontiguousarray(arrays[key]).tobytes()
        (path / fname).write_bytes(raw)
        checksums[fname] = _sha256(raw)
        dtypes[fname] = code
    meta = {
        "format": "dose-volume-bundle-v1",
        "patient_id": vol.patient_id,
        "dims": list(vol.shape),
        "spacing_mm": list(vol.spacing),
        "prescription_gy": vol.prescription,
        "channel_order": list(STRUCTURE_CHANNELS),
        "byte_order": "little",
        "dtypes": dtypes,
        "sha256": checksums,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    return path


def read_volume(path) -> PatientVolume:
    """Read a volume bundle, verifying shapes, byte order, and checksums."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    for key in ("dims", "spacing_mm", "prescription_gy", "byte_order"):
        if key not in meta:
            raise ValueError(f"meta.json missing required field {key!r}")
    if meta["byte_order"] != "little":
        raise ValueError(f"unsupported byte order {meta['byte_order']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3:
        raise ValueError(f"dims must have 3 entries, got {meta['dims']}")
    expected_voxels = int(np.prod(dims))

    arrays = {}
    for key, (fname, code) in _FILES.items():
        fpath = path / fname
        if not fpath.exists():
            raise FileNotFoundError(f"missing array file {fname} in {path}")
        raw = fpath.read_bytes()
        recorded = meta.get("sha256", {}).get(fname)
        if recorded is not None and recorded != _sha256(raw):
            raise ValueError(f"checksum mismatch for {fname}")
        dtype = _DTYPES[code]
        if len(raw) != expected_voxels * dtype.itemsize:
            raise ValueError(
                f"{fname}: size {len(raw)} does not match dims {dims} "
                f"({expected_voxels} voxels of {dtype.itemsize} bytes)"
            )
        arrays[key] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()

    return PatientVolume(
        patient_id=str(meta.get("patient_id", path.name)),
        ct=arrays["ct"].astype(np.float32),
        ptv=arrays["ptv"],
        oars={name: arrays[f"oar_{name}"] for name in OAR_NAMES},
        dose=arrays["dose"].astype(np.float32),
        spacing=tuple(float(s) for s in meta["spacing_mm"]),
        prescription=float(meta["prescription_gy"]),
    )
