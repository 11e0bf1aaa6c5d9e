"""Cohort evaluation: clinical metric reports, DVH curves, and figures for
matched ground-truth / predicted volumes."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .metrics import (
    DVH_BIN_WIDTH_GY,
    DVHCurve,
    MetricReport,
    dvh,
    write_dvh_csv,
    write_patient_csv,
    write_summary_csv,
)
from .volume import PatientVolume

EVAL_ROIS = ("body", "ptv", "bld", "fhr", "fhl", "st")


def constant_dose_prediction(vol: PatientVolume) -> PatientVolume:
    """Trivial baseline: prescription dose everywhere inside the body."""
    dose = np.where(vol.body_mask(), vol.prescription, 0.0).astype(np.float32)
    return dataclasses.replace(vol, dose=dose)


def pair_volumes(gt_vols, pred_vols):
    """Match volumes by patient id; every ground-truth patient must have a
    prediction."""
    preds = {v.patient_id: v for v in pred_vols}
    pairs = []
    for gt in gt_vols:
        if gt.patient_id not in preds:
            raise ValueError(f"no prediction for patient {gt.patient_id}")
        pairs.append((gt, preds[gt.patient_id]))
    return pairs


def build_report(gt_vols, pred_vols) -> MetricReport:
    report = MetricReport()
    for gt, pred in pair_volumes(gt_vols, pred_vols):
        report.add_patient(
            gt.patient_id, gt.dose, pred.dose, gt.masks(), gt.prescription
        )
    return report


def mean_dvh(volumes, roi: str, bin_width: float = DVH_BIN_WIDTH_GY) -> DVHCurve:
    """Cohort-average DVH for one ROI, aligned on a shared bin grid."""
    curves = [dvh(v.dose, v.masks()[roi], bin_width) for v in volumes]
    n = max(c.dose_bins.size for c in curves)
    bins = np.arange(n, dtype=np.float64) * bin_width
    stacked = np.zeros((len(curves), n))
    for i, c in enumerate(curves):
        stacked[i, : c.fraction.size] = c.fraction
    return DVHCurve(dose_bins=bins, fraction=stacked.mean(axis=0))


def evaluate_cohort(gt_vols, pred_vols, out_dir) -> MetricReport:
    """Full evaluation: per-patient CSV, cohort summary CSV, and per-ROI DVH
    CSVs with figures, all written under ``out_dir``."""
    from .figures import save_dvh_figure

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = pair_volumes(gt_vols, pred_vols)
    report = build_report(gt_vols, pred_vols)
    write_patient_csv(report, out_dir / "metrics_per_patient.csv")
    write_summary_csv(report, out_dir / "metrics_summary.csv")

    for roi in EVAL_ROIS:
        curves = {
            "gt": mean_dvh([gt for gt, _ in pairs], roi),
            "pred": mean_dvh([pred for _, pred in pairs], roi),
        }
        write_dvh_csv(curves, out_dir / f"dvh_{roi}.csv")
        save_dvh_figure(curves, out_dir / f"dvh_{roi}.png", title=f"DVH {roi}")
    return report
