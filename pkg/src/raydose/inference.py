"""Volume-level inference: slice, encode, run the reverse chain per window,
reassemble, and denormalize.  Also dumps the slice-attention matrices for
inspection."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig
from .diffusion import sample
from .schedule import make_cosine_schedule
from .training import build_models
from .volume import PatientVolume, assemble_slices, denormalize_dose, slice_volume


def load_checkpoint(path, use_ema: bool = True):
    """Rebuild (config, encoder, predictor) from a checkpoint file.

    EMA weights are applied when present unless ``use_ema=False``.
    """
    state = torch.load(path, weights_only=False)
    config = ExperimentConfig.from_json(state["config"])
    encoder, predictor = build_models(config)
    predictor.load_state_dict(state["predictor"])
    if encoder is not None and state.get("encoder") is not None:
        encoder.load_state_dict(state["encoder"])
    if use_ema and state.get("ema"):
        _apply_ema(state["ema"], encoder, predictor)
    predictor.eval()
    if encoder is not None:
        encoder.eval()
    return config, encoder, predictor


def _apply_ema(ema: dict, encoder, predictor):
    with torch.no_grad():
        for name, value in ema.items():
            scope, _, param = name.partition(".")
            module = predictor if scope == "predictor" else encoder
            if module is None:
                continue
            module.get_parameter(param).copy_(value)


def predict_volume(
    config: ExperimentConfig,
    encoder,
    predictor,
    vol: PatientVolume,
    steps: Optional[int] = None,
    seed: int = 0,
) -> PatientVolume:
    """Predict the full dose volume for one patient.

    Each window of contiguous slices is denoised independently from pure
    noise, conditioned on its structure feature; windows use consecutive
    sub-seeds so the whole prediction is reproducible from ``seed``.
    """
    if steps is None:
        steps = config.diffusion.infer_steps
    sched = make_cosine_schedule(
        config.diffusion.train_steps, config.diffusion.cosine_offset
    )
    windows = slice_volume(vol, config.optim.batch_slices)
    outputs = []
    with torch.no_grad():
        for i, win in enumerate(windows):
            structure = torch.from_numpy(win.structure)
            if encoder is not None:
                x_e = encoder(structure, win.slice_offset)
                predictor_fn = predictor
            else:
                x_e = structure  # stands in for shape only

                def predictor_fn(y_t, _x, gamma_t, _s=structure):
                    return predictor(torch.cat([y_t, _s], dim=1), None, gamma_t)

            y0 = sample(
                predictor_fn,
                x_e,
                sched,
                rng_seed=seed + i,
                steps=steps,
                noise_denominator=config.diffusion.noise_denominator,
            )
            outputs.append(y0.numpy())
    normalized = assemble_slices(outputs, [w.num_valid for w in windows])
    dose = denormalize_dose(normalized, vol.prescription).astype(np.float32)
    return dataclasses.replace(vol, dose=dose)


def predict_from_checkpoint(path, vol, steps=None, seed=0) -> PatientVolume:
    config, encoder, predictor = load_checkpoint(path)
    return predict_volume(config, encoder, predictor, vol, steps=steps, seed=seed)


def dump_attention(
    config: ExperimentConfig, encoder, vol: PatientVolume, out_dir
) -> list[Path]:
    """Write every window's slice-attention matrices to CSV (one file per
    stage/block/head) plus a heatmap image per stage."""
    from .figures import save_attention_heatmap

    if encoder is None:
        raise ValueError("the plain-concatenation variant has no attention to dump")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with torch.no_grad():
        for win in slice_volume(vol, config.optim.batch_slices):
            sink: dict = {}
            encoder(torch.from_numpy(win.structure), win.slice_offset, sink)
            for (stage, block), mats in sink.items():
                for head, mat in enumerate(mats):
                    name = (
                        f"{vol.patient_id}_off{win.slice_offset:03d}"
                        f"_stage{stage + 1}_block{block + 1}_head{head + 1}"
                    )
                    path = out_dir / f"{name}.csv"
                    _write_matrix_csv(mat.numpy(), path)
                    written.append(path)
                png = out_dir / (
                    f"{vol.patient_id}_off{win.slice_offset:03d}"
                    f"_stage{stage + 1}_block{block + 1}.png"
                )
                save_attention_heatmap(
                    torch.stack(mats).mean(dim=0).numpy(),
                    png,
                    title=f"stage {stage + 1} block {block + 1} (head mean)",
                )
                written.append(png)
    return written


def _write_matrix_csv(matrix: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([f"{v:.8g}" for v in row])
