"""Training loop, model assembly, and checkpointing.

One training step: pick a random slice window of one training patient, draw
a uniform step t, corrupt the window's dose maps to noise level gamma_t,
predict the added noise conditioned on the anatomy, and take an Adam step on
the weighted L1 noise residual.  All randomness flows through two dedicated
generators whose state is checkpointed, so a resumed run reproduces the
uninterrupted loss trajectory bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig, resolve_output_path
from .diffusion import forward_sample
from .encoder import StructureEncoder
from .loss import build_weight_map, weighted_noise_loss
from .phantom import PhantomParams, generate_phantom
from .predictor import NoisePredictor
from .schedule import make_cosine_schedule
from .volume import (
    BODY_HU_THRESHOLD,
    CT_WINDOW_HU,
    PatientVolume,
    SliceBatch,
    read_volume,
    slice_volume,
    write_volume,
)

STRUCTURE_IMAGE_CHANNELS = 6  # ct + ptv + 4 oars


def build_models(config: ExperimentConfig):
    """Construct (encoder, predictor) per the config; encoder is None for the
    plain-concatenation variant.  Seeded for reproducible initialization."""
    torch.manual_seed(config.seed)
    model = config.model
    if model.use_structure_encoder:
        encoder = StructureEncoder(
            in_channels=STRUCTURE_IMAGE_CHANNELS,
            widths=model.encoder_widths,
            feature_channels=model.feature_channels,
            heads=model.attention_heads,
            pool=model.attention_pool,
            inter_slice=model.use_inter_slice,
            position_embedding=model.position_embedding,
        )
        predictor = NoisePredictor(
            in_channels=1,
            widths=model.predictor_widths,
            structure_channels=model.feature_channels,
            fuse_structure=True,
            emb_dim=model.gamma_embed_dim,
        )
    else:
        encoder = None
        predictor = NoisePredictor(
            in_channels=1 + STRUCTURE_IMAGE_CHANNELS,
            widths=model.predictor_widths,
            fuse_structure=False,
            emb_dim=model.gamma_embed_dim,
        )
    return encoder, predictor


def load_or_generate_volumes(config: ExperimentConfig) -> list[PatientVolume]:
    """Load phantom bundles from the data root, generating and persisting
    them first if the directory is absent or empty."""
    root = resolve_output_path(config.data.root)
    if root.exists():
        bundles = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
        if bundles:
            return [read_volume(p) for p in bundles]
    params = PhantomParams(shape=config.data.shape)
    volumes = [
        generate_phantom(config.data.seed + i, params)
        for i in range(config.data.num_patients)
    ]
    for vol in volumes:
        write_volume(vol, root / vol.patient_id)
    return volumes


def split_volumes(volumes, split):
    """Patient-level split into (train, val, test); sets are disjoint."""
    n_train, n_val, n_test = split
    if n_train + n_val + n_test > len(volumes):
        raise ValueError(
            f"split {split} needs more patients than available ({len(volumes)})"
        )
    train = volumes[:n_train]
    val = volumes[n_train : n_train + n_val]
    test = volumes[n_train + n_val : n_train + n_val + n_test]
    return train, val, test


@dataclass
class PreparedBatch:
    """A slice window with its tensors and loss weights precomputed."""

    structure: torch.Tensor  # (B, 6, H, W)
    dose: torch.Tensor  # (B, 1, H, W)
    weights: torch.Tensor  # (B, 1, H, W), zero on padded slices
    patient_id: str
    slice_offset: int


def prepare_batch(batch: SliceBatch, focus_weight, body_weight) -> PreparedBatch:
    weights = np.empty_like(batch.dose, dtype=np.float32)
    body = batch.structure[:, 0] > (BODY_HU_THRESHOLD / CT_WINDOW_HU)
    for b in range(batch.window):
        weights[b, 0] = build_weight_map(
            batch.structure[b, 1] > 0.5,
            [batch.structure[b, 2 + i] > 0.5 for i in range(4)],
            body[b],
            focus_weight,
            body_weight,
        )
    weights[batch.num_valid :] = 0.0  # padded slices never contribute
    return PreparedBatch(
        structure=torch.from_numpy(batch.structure),
        dose=torch.from_numpy(batch.dose),
        weights=torch.from_numpy(weights),
        patient_id=batch.patient_id,
        slice_offset=batch.slice_offset,
    )


class Trainer:
    """Owns the models, optimizer, schedule, data windows, and RNG streams."""

    def __init__(self, config: ExperimentConfig, volumes=None):
        torch.set_num_threads(max(1, config.optim.torch_threads))
        self.config = config
        self.schedule = make_cosine_schedule(
            config.diffusion.train_steps, config.diffusion.cosine_offset
        )
        if volumes is None:
            volumes = load_or_generate_volumes(config)
        train_vols, _, _ = split_volumes(volumes, config.data.split)
        self.batches = [
            prepare_batch(b, config.loss.focus_weight, config.loss.body_weight)
            for vol in train_vols
            for b in slice_volume(vol, config.optim.batch_slices)
        ]
        if not self.batches:
            raise ValueError("no training windows; check data config")

        self.encoder, self.predictor = build_models(config)
        params = list(self.predictor.parameters())
        if self.encoder is not None:
            params += list(self.encoder.parameters())
        self.optimizer = torch.optim.Adam(params, lr=config.optim.learning_rate)

        self.noise_gen = torch.Generator().manual_seed(config.seed + 1)
        self.batch_rng = np.random.default_rng(config.seed + 2)
        self.step_count = 0
        self.history: list[tuple[int, float]] = []
        self._ema = None
        if config.optim.ema_decay is not None:
            self._ema = {
                k: v.detach().clone() for k, v in self._named_params().items()
            }

    def _named_params(self) -> dict[str, torch.Tensor]:
        named = {f"predictor.{k}": v for k, v in self.predictor.named_parameters()}
        if self.encoder is not None:
            named.update(
                {f"encoder.{k}": v for k, v in self.encoder.named_parameters()}
            )
        return named

    def _draw_gamma(self) -> tuple[int, float]:
        t = int(self.batch_rng.integers(1, self.schedule.T + 1))
        gamma_t = self.schedule.gamma_at(t)
        if self.config.optim.gamma_sampling == "continuous":
            prev = 1.0 if t == 1 else self.schedule.gamma_at(t - 1)
            gamma_t = float(self.batch_rng.uniform(gamma_t, prev))
        return t, gamma_t

    def predict_noise(self, batch: PreparedBatch, y_t: torch.Tensor, gamma_t: float):
        if self.encoder is not None:
            x_e = self.encoder(batch.structure, batch.slice_offset)
            return self.predictor(y_t, x_e, gamma_t)
        stacked = torch.cat([y_t, batch.structure], dim=1)
        return self.predictor(stacked, None, gamma_t)

    def loss_for(self, batch: PreparedBatch, gamma_t: float, eps: torch.Tensor):
        y_t = forward_sample(batch.dose, gamma_t, eps)
        eps_pred = self.predict_noise(batch, y_t, gamma_t)
        return weighted_noise_loss(
            eps_pred, eps, batch.weights, self.config.loss.normalize
        )

    def _current_lr(self) -> float:
        base = self.config.optim.learning_rate
        if self.config.optim.lr_decay != "cosine":
            return base
        frac = min(self.step_count / max(self.config.optim.steps, 1), 1.0)
        return base * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))

    def step(self) -> float:
        for group in self.optimizer.param_groups:
            group["lr"] = self._current_lr()
        batch = self.batches[int(self.batch_rng.integers(len(self.batches)))]
        _, gamma_t = self._draw_gamma()
        eps = torch.randn(batch.dose.shape, generator=self.noise_gen)
        loss = self.loss_for(batch, gamma_t, eps)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at step {self.step_count + 1} "
                f"(gamma_t={gamma_t:.6g}, "
                f"batch={batch.patient_id}:{batch.slice_offset})"
            )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        if self._ema is not None:
            decay = self.config.optim.ema_decay
            with torch.no_grad():
                for name, param in self._named_params().items():
                    self._ema[name].mul_(decay).add_(param, alpha=1.0 - decay)
        self.step_count += 1
        value = float(loss.detach())
        self.history.append((self.step_count, value))
        return value

    # --- checkpointing -----------------------------------------------------

    def state_dict(self) -> dict:
        state = {
            "config": self.config.to_json(),
            "step": self.step_count,
            "predictor": self.predictor.state_dict(),
            "encoder": None if self.encoder is None else self.encoder.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "ema": self._ema,
            "schedule": {
                "T": self.config.diffusion.train_steps,
                "s": self.config.diffusion.cosine_offset,
                "strategy": self.config.diffusion.subsample_strategy,
            },
            "noise_rng": self.noise_gen.get_state(),
            "batch_rng": self.batch_rng.bit_generator.state,
        }
        return state

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    def load_state(self, state: dict):
        self.predictor.load_state_dict(state["predictor"])
        if self.encoder is not None and state["encoder"] is not None:
            self.encoder.load_state_dict(state["encoder"])
        self.optimizer.load_state_dict(state["optimizer"])
        if state.get("ema") is not None:
            self._ema = state["ema"]
        self.noise_gen.set_state(state["noise_rng"])
        self.batch_rng.bit_generator.state = state["batch_rng"]
        self.step_count = int(state["step"])

    @classmethod
    def from_checkpoint(cls, path, volumes=None) -> "Trainer":
        state = torch.load(path, weights_only=False)
        config = ExperimentConfig.from_json(state["config"])
        trainer = cls(config, volumes)
        trainer.load_state(state)
        return trainer


def write_loss_csv(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, value in history:
            writer.writerow([step, f"{value:.8g}"])
    return path


def train(
    config: ExperimentConfig,
    volumes=None,
    resume_from: Optional[str] = None,
) -> tuple[Trainer, Path]:
    """Run the configured number of steps and write the checkpoint, loss
    curve CSV, loss figure, and resolved config into the output directory."""
    from .figures import save_loss_curve

    out = config.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")

    if resume_from is not None:
        trainer = Trainer.from_checkpoint(resume_from, volumes)
    else:
        trainer = Trainer(config, volumes)
    while trainer.step_count < config.optim.steps:
        trainer.step()
        if (
            config.optim.checkpoint_every > 0
            and trainer.step_count % config.optim.checkpoint_every == 0
            and trainer.step_count < config.optim.steps
        ):
            trainer.save_checkpoint(out / f"checkpoint-{trainer.step_count:06d}.pt")
    ckpt = trainer.save_checkpoint(out / "checkpoint.pt")
    write_loss_csv(trainer.history, out / "loss.csv")
    save_loss_curve(trainer.history, out / "loss.png")
    return trainer, ckpt
