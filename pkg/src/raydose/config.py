"""Experiment configuration: dataclasses with JSON round-trip, the desk and
paper size profiles, and the incremental model variants."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

OUTPUT_ROOT_ENV = "RAYDOSE_OUTPUT_ROOT"

# Incremental variants: (A) plain channel-concatenation conditioning,
# (B) + structure encoder without inter-slice attention, (C) + inter-slice
# attention, (D) + weighted loss (the full model).
VARIANTS = ("A", "B", "C", "D")


@dataclass
class DataConfig:
    num_patients: int = 8
    split: tuple[int, int, int] = (6, 1, 1)  # train / val / test patients
    shape: tuple[int, int, int] = (32, 96, 96)
    seed: int = 0
    root: str = "data/phantoms"


@dataclass
class ModelConfig:
    use_structure_encoder: bool = True
    use_inter_slice: bool = True
    position_embedding: bool = True
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256)
    feature_channels: int = 64
    attention_heads: int = 4
    attention_pool: int = 4
    predictor_widths: tuple[int, ...] = (32, 64, 128, 256)
    gamma_embed_dim: int = 128


@dataclass
class DiffusionConfig:
    train_steps: int = 1000  # T
    cosine_offset: float = 0.008
    infer_steps: int = 100
    subsample_strategy: str = "linear"
    noise_denominator: str = "sqrt"


@dataclass
class LossConfig:
    focus_weight: float = 4.0
    body_weight: float = 2.0
    normalize: bool = True


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    lr_decay: str = "none"  # or "cosine" (decays to 5% over the step budget)
    batch_slices: int = 16  # window size B = training batch
    steps: int = 2000
    gamma_sampling: str = "discrete"  # or "continuous"
    ema_decay: float | None = None
    log_every: int = 10
    checkpoint_every: int = 1000
    torch_threads: int = 1


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        return cls(
            data=_load(DataConfig, raw.get("data", {})),
            model=_load(ModelConfig, raw.get("model", {})),
            diffusion=_load(DiffusionConfig, raw.get("diffusion", {})),
            loss=_load(LossConfig, raw.get("loss", {})),
            optim=_load(OptimConfig, raw.get("optim", {})),
            seed=int(raw.get("seed", 0)),
            out_dir=str(raw.get("out_dir", "runs/default")),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    def resolved_out_dir(self) -> Path:
        return resolve_output_path(self.out_dir)

    def apply_variant(self, variant: str) -> "ExperimentConfig":
        """Return a copy configured as one of the incremental variants."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        cfg = dataclasses.replace(self)
        cfg.model = dataclasses.replace(self.model)
        cfg.loss = dataclasses.replace(self.loss)
        cfg.model.use_structure_encoder = variant != "A"
        cfg.model.use_inter_slice = variant in ("C", "D")
        if variant != "D":
            cfg.loss.focus_weight = 1.0
            cfg.loss.body_weight = 1.0
        return cfg


def _load(cls, raw: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def resolve_output_path(path) -> Path:
    """Relative output paths land under the env-var output root when set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def desk_profile(**overrides) -> ExperimentConfig:
    """CPU-friendly sizes used by the end-to-end checks."""
    cfg = ExperimentConfig(
        data=DataConfig(shape=(32, 96, 96)),
        model=ModelConfig(
            encoder_widths=(8, 12, 24, 32),
            feature_channels=8,
            predictor_widths=(8, 12, 24, 32),
            gamma_embed_dim=64,
        ),
        optim=OptimConfig(
            learning_rate=1e-3, lr_decay="cosine", batch_slices=6, steps=2000
        ),
    )
    return _override(cfg, overrides)


def paper_profile(**overrides) -> ExperimentConfig:
    """Full-size configuration (GPU-scale)."""
    cfg = ExperimentConfig(
        data=DataConfig(shape=(64, 160, 160)),
        model=ModelConfig(),
        optim=OptimConfig(),
    )
    return _override(cfg, overrides)


def _override(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, section, value)
    return cfg
