"""Command-line surface tying the pipeline together.

Every subcommand writes the parameters it resolved next to its outputs so a
run can be reproduced from its output directory alone.
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from .config import ExperimentConfig, desk_profile, paper_profile, resolve_output_path
from .phantom import PhantomParams, generate_phantom
from .volume import read_volume, write_volume


def _write_run_info(out_dir: Path, command: str, params: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(
        json.dumps({"command": command, "params": params}, indent=2, default=str)
    )


def _load_volumes(path: Path):
    path = Path(path)
    if (path / "meta.json").exists():
        return [read_volume(path)]
    bundles = sorted(p for p in path.iterdir() if (p / "meta.json").exists())
    if not bundles:
        raise click.ClickException(f"no volume bundles under {path}")
    return [read_volume(p) for p in bundles]


@click.group()
def main():
    """Diffusion-based radiotherapy dose prediction on synthetic phantoms."""


@main.command("generate-phantoms")
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option(
    "--profile",
    type=click.Choice(["desk", "paper"]),
    default="desk",
    show_default=True,
)
def generate_phantoms(count, seed, out, profile):
    """Generate synthetic phantom volume bundles."""
    shape = (32, 96, 96) if profile == "desk" else (64, 160, 160)
    params = PhantomParams(shape=shape)
    out_dir = resolve_output_path(out)
    for i in range(count):
        vol = generate_phantom(seed + i, params)
        write_volume(vol, out_dir / vol.patient_id)
        click.echo(f"wrote {out_dir / vol.patient_id}")
    _write_run_info(
        out_dir,
        "generate-phantoms",
        {"count": count, "seed": seed, "profile": profile, "shape": shape},
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option(
    "--profile", type=click.Choice(["desk", "paper"]), default="desk", show_default=True
)
@click.option("--resume", type=click.Path(exists=True), default=None)
def train(config_path, out, profile, resume):
    """Train the model; writes checkpoint, loss curve CSV and figure."""
    from .training import train as run_train

    if config_path is not None:
        cfg = ExperimentConfig.from_file(config_path)
    else:
        cfg = desk_profile() if profile == "desk" else paper_profile()
    if out is not None:
        cfg.out_dir = out
    trainer, ckpt = run_train(cfg, resume_from=resume)
    click.echo(f"finished {trainer.step_count} steps; checkpoint at {ckpt}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--volume", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=None, help="reverse steps (default from config)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def sample(checkpoint, volume, steps, seed, out):
    """Predict dose volumes for every bundle under --volume."""
    from .figures import save_dose_panel
    from .inference import load_checkpoint, predict_volume

    config, encoder, predictor = load_checkpoint(checkpoint)
    out_dir = resolve_output_path(out)
    for vol in _load_volumes(Path(volume)):
        pred = predict_volume(config, encoder, predictor, vol, steps=steps, seed=seed)
        write_volume(pred, out_dir / pred.patient_id)
        mid = vol.shape[0] // 2
        save_dose_panel(
            vol.ct[mid],
            {"ground truth": vol.dose[mid], "predicted": pred.dose[mid]},
            out_dir / f"{pred.patient_id}_mid_slice.png",
            title=pred.patient_id,
        )
        click.echo(f"wrote {out_dir / pred.patient_id}")
    _write_run_info(
        out_dir,
        "sample",
        {"checkpoint": checkpoint, "volume": volume, "steps": steps, "seed": seed},
    )


@main.command()
@click.option("--pred", type=click.Path(exists=True), required=True)
@click.option("--gt", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def evaluate(pred, gt, out):
    """Compare predicted volumes against ground truth; writes metric CSVs,
    DVH CSVs, and DVH figures."""
    from .evaluate import evaluate_cohort

    out_dir = resolve_output_path(out)
    report = evaluate_cohort(_load_volumes(Path(gt)), _load_volumes(Path(pred)), out_dir)
    for roi, (mean, std) in report.cohort_dose_scores().items():
        click.echo(f"dose score {roi}: {mean:.3f} ({std:.3f}) Gy")
    _write_run_info(out_dir, "evaluate", {"pred": pred, "gt": gt})


@main.command()
@click.option("--dose", type=click.Path(exists=True), required=True,
              help="volume bundle providing the dose")
@click.option("--masks", type=click.Path(exists=True), default=None,
              help="volume bundle providing the masks (defaults to --dose)")
@click.option("--out", type=click.Path(), required=True)
def dvh(dose, masks, out):
    """Dose-volume histograms for one volume; CSV and figure per ROI."""
    from .figures import save_dvh_figure
    from .metrics import dvh as dvh_curve
    from .metrics import write_dvh_csv

    dose_vol = read_volume(dose)
    mask_vol = dose_vol if masks is None else read_volume(masks)
    out_dir = resolve_output_path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for roi, mask in mask_vol.masks().items():
        curve = dvh_curve(dose_vol.dose, mask)
        write_dvh_csv({roi: curve}, out_dir / f"dvh_{roi}.csv")
        save_dvh_figure({roi: curve}, out_dir / f"dvh_{roi}.png", title=f"DVH {roi}")
    _write_run_info(out_dir, "dvh", {"dose": dose, "masks": masks})


@main.command("attention-dump")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--volume", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def attention_dump(checkpoint, volume, out):
    """Dump the slice-attention matrices of the structure encoder to CSV
    plus heatmap images."""
    from .inference import dump_attention, load_checkpoint

    config, encoder, _ = load_checkpoint(checkpoint)
    out_dir = resolve_output_path(out)
    for vol in _load_volumes(Path(volume)):
        written = dump_attention(config, encoder, vol, out_dir)
        click.echo(f"{vol.patient_id}: wrote {len(written)} files")
    _write_run_info(out_dir, "attention-dump", {"checkpoint": checkpoint, "volume": volume})


if __name__ == "__main__":
    main()
