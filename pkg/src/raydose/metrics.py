"""Clinical dose evaluation: D_x, V_x, mean dose, homogeneity, conformity,
prediction-error aggregates, and cumulative dose-volume histograms.

All metrics operate on dose volumes in Gy (never on normalized values) with
boolean ROI masks.  D_x follows the discrete convention: sort the ROI doses
descending and take the value at rank ceil(x/100 * N), no interpolation.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PTV_METRICS = ("d98", "d50", "d2", "dmean", "hi", "ci")
OAR_METRICS = ("d2", "dmean", "v40")
DVH_BIN_WIDTH_GY = 0.1


def _roi_doses(dose, mask) -> np.ndarray:
    dose = np.asarray(dose)
    mask = np.asarray(mask, dtype=bool)
    if dose.shape != mask.shape:
        raise ValueError(f"dose shape {dose.shape} != mask shape {mask.shape}")
    if not mask.any():
        raise ValueError("empty ROI mask")
    return dose[mask]


def dose_at_volume(dose, mask, x: float) -> float:
    """Minimum dose received by the hottest x% of the ROI volume."""
    if not 0.0 < x <= 100.0:
        raise ValueError(f"x must lie in (0, 100], got {x}")
    vals = np.sort(_roi_doses(dose, mask))[::-1]
    rank = math.ceil(x / 100.0 * vals.size)
    return float(vals[rank - 1])


def volume_at_dose(dose, mask, x: float) -> float:
    """Percentage of the ROI volume receiving at least x Gy."""
    vals = _roi_doses(dose, mask)
    return 100.0 * (float((vals >= x).sum()) / vals.size)


def mean_dose(dose, mask) -> float:
    return float(_roi_doses(dose, mask).mean())


def hi(dose, ptv_mask) -> float:
    """Dose heterogeneity inside the target: (D2 - D98) / D50."""
    d50 = dose_at_volume(dose, ptv_mask, 50.0)
    if d50 == 0:
        raise ValueError("D50 is zero; heterogeneity undefined")
    return (dose_at_volume(dose, ptv_mask, 2.0) - dose_at_volume(dose, ptv_mask, 98.0)) / d50


def ci(dose, ptv_mask, prescription: float) -> float:
    """Conformity of the prescription isodose to the target:
    |TV & PIV|^2 / (|TV| * |PIV|), with PIV = {dose >= prescription}.
    Returns 0 when no voxel reaches prescription."""
    dose = np.asarray(dose)
    tv = np.asarray(ptv_mask, dtype=bool)
    if dose.shape != tv.shape:
        raise ValueError(f"dose shape {dose.shape} != mask shape {tv.shape}")
    if not tv.any():
        raise ValueError("empty target mask")
    piv = dose >= prescription
    n_piv = int(piv.sum())
    if n_piv == 0:
        return 0.0
    n_tv = int(tv.sum())
    n_both = int((tv & piv).sum())
    return (n_both * n_both) / (n_tv * n_piv)


def ape(gt_values, pred_values) -> float:
    """Average absolute prediction error over a patient cohort."""
    gt = np.asarray(gt_values, dtype=np.float64)
    pred = np.asarray(pred_values, dtype=np.float64)
    if gt.shape != pred.shape or gt.ndim != 1 or gt.size == 0:
        raise ValueError(f"value lists must match and be non-empty: "
                         f"{gt.shape} vs {pred.shape}")
    return float(np.abs(gt - pred).mean())


def dose_score(gt_dose, pred_dose, mask) -> float:
    """Mean absolute voxel dose error over one patient's ROI."""
    gt = np.asarray(gt_dose)
    pred = np.asarray(pred_dose)
    if gt.shape != pred.shape:
        raise ValueError(f"dose shapes differ: {gt.shape} vs {pred.shape}")
    m = np.asarray(mask, dtype=bool)
    if gt.shape != m.shape:
        raise ValueError(f"dose shape {gt.shape} != mask shape {m.shape}")
    if not m.any():
        raise ValueError("empty ROI mask")
    return float(np.abs(gt[m] - pred[m]).mean())


@dataclass(frozen=True)
class DVHCurve:
    """Cumulative dose-volume histogram: fraction of the ROI receiving at
    least each threshold dose."""

    dose_bins: np.ndarray  # Gy thresholds starting at 0
    fraction: np.ndarray  # volume fractions in [0, 1], non-increasing

    def __post_init__(self):
        if self.dose_bins.shape != self.fraction.shape:
            raise ValueError("dose_bins and fraction must have equal length")


def dvh(dose, mask, bin_width: float = DVH_BIN_WIDTH_GY) -> DVHCurve:
    """Cumulative DVH from 0 Gy past the ROI maximum in ``bin_width`` steps."""
    if bin_width <= 0:
        raise ValueError(f"bin_width must be > 0, got {bin_width}")
    vals = _roi_doses(dose, mask)
    top = float(vals.max())
    n_bins = int(math.floor(top / bin_width)) + 2
    bins = np.arange(n_bins, dtype=np.float64) * bin_width
    fraction = (vals[None, :] >= bins[:, None]).sum(axis=1) / vals.size
    return DVHCurve(dose_bins=bins, fraction=fraction.astype(np.float64))


def ptv_metrics(dose, ptv_mask, prescription: float) -> dict[str, float]:
    """Target metric panel.  HI is reported as 0 when the median target dose
    is zero (degenerate predictions), so reports stay finite."""
    d50 = dose_at_volume(dose, ptv_mask, 50.0)
    if d50 == 0:
        warnings.warn("zero median target dose; reporting HI as 0", stacklevel=2)
        hi_value = 0.0
    else:
        hi_value = hi(dose, ptv_mask)
    return {
        "d98": dose_at_volume(dose, ptv_mask, 98.0),
        "d50": d50,
        "d2": dose_at_volume(dose, ptv_mask, 2.0),
        "dmean": mean_dose(dose, ptv_mask),
        "hi": hi_value,
        "ci": ci(dose, ptv_mask, prescription),
    }


def oar_metrics(dose, mask) -> dict[str, float]:
    return {
        "d2": dose_at_volume(dose, mask, 2.0),
        "dmean": mean_dose(dose, mask),
        "v40": volume_at_dose(dose, mask, 40.0),
    }


@dataclass
class MetricReport:
    """Per-patient metric values for ground truth and prediction plus cohort
    aggregates (APE per ROI metric, dose score per ROI)."""

    # rows[patient_id][roi][metric] -> {"gt": v, "pred": v}
    rows: dict[str, dict[str, dict[str, dict[str, float]]]] = field(default_factory=dict)
    # dose_scores[roi] -> per-patient list
    dose_scores: dict[str, list[float]] = field(default_factory=dict)

    def add_patient(self, patient_id, gt_dose, pred_dose, masks, prescription):
        entry = {}
        entry["ptv"] = {
            m: {"gt": g, "pred": p}
            for m, g, p in _pair_metrics(
                ptv_metrics(gt_dose, masks["ptv"], prescription),
                ptv_metrics(pred_dose, masks["ptv"], prescription),
            )
        }
        for roi, mask in masks.items():
            if roi in ("ptv", "body"):
                continue
            entry[roi] = {
                m: {"gt": g, "pred": p}
                for m, g, p in _pair_metrics(
                    oar_metrics(gt_dose, mask), oar_metrics(pred_dose, mask)
                )
            }
        self.rows[patient_id] = entry
        for roi, mask in masks.items():
            self.dose_scores.setdefault(roi, []).append(
                dose_score(gt_dose, pred_dose, mask)
            )

    def ape_table(self) -> dict[str, dict[str, float]]:
        """APE of every ROI metric over the cohort."""
        table: dict[str, dict[str, float]] = {}
        rois = next(iter(self.rows.values())).keys() if self.rows else ()
        for roi in rois:
            metrics = next(iter(self.rows.values()))[roi].keys()
            table[roi] = {}
            for metric in metrics:
                gt = [self.rows[p][roi][metric]["gt"] for p in self.rows]
                pred = [self.rows[p][roi][metric]["pred"] for p in self.rows]
                table[roi][metric] = ape(gt, pred)
        return table

    def cohort_dose_scores(self) -> dict[str, tuple[float, float]]:
        """Mean and standard deviation of the per-patient dose scores."""
        return {
            roi: (float(np.mean(vals)), float(np.std(vals)))
            for roi, vals in self.dose_scores.items()
        }


def _pair_metrics(gt: dict, pred: dict):
    for key in gt:
        yield key, gt[key], pred[key]


def write_patient_csv(report: MetricReport, path):
    """One row per patient x ROI x metric with gt, predicted, and error."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient", "roi", "metric", "gt", "pred", "abs_error"])
        for patient, rois in report.rows.items():
            for roi, metrics in rois.items():
                for metric, pair in metrics.items():
                    writer.writerow(
                        [
                            patient,
                            roi,
                            metric,
                            f"{pair['gt']:.6g}",
                            f"{pair['pred']:.6g}",
                            f"{abs(pair['gt'] - pair['pred']):.6g}",
                        ]
                    )
    return path


def write_summary_csv(report: MetricReport, path):
    """Cohort summary: APE per ROI metric and dose score mean (std)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    apes = report.ape_table()
    scores = report.cohort_dose_scores()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi", "metric", "value", "std"])
        for roi, (mean, std) in scores.items():
            writer.writerow([roi, "dose_score_gy", f"{mean:.6g}", f"{std:.6g}"])
        for roi, metrics in apes.items():
            for metric, value in metrics.items():
                writer.writerow([roi, f"ape_{metric}", f"{value:.6g}", ""])
    return path


def write_dvh_csv(curves: dict[str, DVHCurve], path):
    """DVH curves for one ROI, aligned on bins: columns bin_gy then one
    fraction column per named curve."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(curves)
    n_bins = max(c.dose_bins.size for c in curves.values())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_gy"] + [f"fraction_{name}" for name in names])
        for i in range(n_bins):
            first = curves[names[0]]
            bin_gy = (
                first.dose_bins[i] if i < first.dose_bins.size else i * DVH_BIN_WIDTH_GY
            )
            row = [f"{bin_gy:.4g}"]
            for name in names:
                c = curves[name]
                row.append(f"{c.fraction[i]:.6g}" if i < c.fraction.size else "0")
            writer.writerow(row)
    return path
