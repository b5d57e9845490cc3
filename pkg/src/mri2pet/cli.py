"""Command-line entry points for the full pipeline.

Exit codes: 0 success, 1 usage/configuration error, 2 data or file-format
error, 3 numerical failure.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np
import torch

from . import __version__
from .conditioning import ClinicalRecord, encode_clinical, read_clinical_csv
from .config import RunConfig, patch_config
from .dataio import (
    PhantomSpec,
    load_dataset,
    read_volume,
    write_volume,
)
from .errors import ConfigurationError, ContractViolation, DataError, NumericalError
from .evaluation.ablation import ABLATION_CELLS, evaluate_run, run_ablation
from .evaluation.classification import ClassifierConfig, classify_cv
from .evaluation.fairness import fairness_report
from .evaluation.metrics import evaluate_volume_pairs
from .seeding import derive_seed
from .training import load_arms, synthesize_volume, train


@click.group(name="mri2pet")
@click.option("--workers", default=1, show_default=True, help="Thread cap; 1 = bit-exact runs.")
def cli(workers: int):
    """Cross-modal MRI-to-PET synthesis: data, training, sampling, evaluation."""
    torch.set_num_threads(max(1, workers))


@cli.command("gen-data")
@click.option("--count", required=True, type=int, help="Number of phantom subjects.")
@click.option("--out", required=True, type=click.Path(), help="Output dataset directory.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--size", default="16,16,16", show_default=True, help="Volume dims H,W,D.")
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None,
              help="Optional YAML overriding phantom parameters.")
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def cmd_gen_data(count, out, seed, size, spec_path, force):
    """Generate a balanced synthetic cohort with splits and manifest."""
    import yaml

    params = {}
    if spec_path:
        with open(spec_path) as fh:
            params = yaml.safe_load(fh) or {}
    dims = tuple(int(v) for v in size.split(","))
    if len(dims) != 3:
        raise ConfigurationError(f"--size needs three comma-separated dims, got {size!r}")
    ratios = tuple(params.pop("ratios", (2 / 3, 1 / 6, 1 / 6)))
    missing_rate = params.pop("missing_rate", 0.05)
    spec = PhantomSpec(size=tuple(params.pop("size", dims)), **params)

    from .dataio import generate_cohort

    generate_cohort(
        out, count, spec, seed, ratios=ratios, missing_rate=missing_rate, force=force
    )
    click.echo(f"wrote {count} subjects to {out}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--resume", "resume_from", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=None, help="Override train.steps.")
@click.option("--seed", type=int, default=None, help="Override the master seed.")
def cmd_train(config_path, data_dir, out_dir, resume_from, steps, seed):
    """Train the dual-arm model on a generated cohort."""
    cfg = RunConfig.from_yaml(config_path) if config_path else RunConfig()
    overrides = {}
    if steps is not None:
        overrides["train.steps"] = steps
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = patch_config(cfg, overrides)
    dataset = load_dataset(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    cfg.write_yaml(os.path.join(out_dir, "config.yaml"))
    summary = train(dataset, cfg, out_dir, resume_from=resume_from)
    click.echo(
        f"trained {summary['steps']} steps in {summary['seconds']:.1f}s; "
        f"best val MAE "
        + (f"{summary['best_val_mae']:.4f}%" if summary["best_val_mae"] is not None else "n/a")
    )


@cli.command("sample")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--mri", "mri_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--clinical", "clinical_path", type=click.Path(exists=True), default=None)
@click.option("--subject", "subject_id", default=None, help="Row of --clinical to use.")
@click.option("--ddim-steps", type=int, default=None, help="Override sample.ddim_steps.")
def cmd_sample(ckpt, mri_path, out_path, seed, clinical_path, subject_id, ddim_steps):
    """Synthesize the PET counterpart of one MRI volume."""
    cond_arm, den_arm, cfg, stats, sched = load_arms(ckpt)
    net_cfg = cfg.net_config()
    mri = read_volume(mri_path)

    record = ClinicalRecord(subject_id=subject_id or "")
    if clinical_path is not None:
        records = {r.subject_id: r for r in read_clinical_csv(clinical_path)}
        if subject_id is None or subject_id not in records:
            raise DataError(
                f"--subject must name a row of {clinical_path}; "
                f"got {subject_id!r}, known: {sorted(records)[:5]}..."
            )
        record = records[subject_id]

    synth = synthesize_volume(
        cond_arm,
        den_arm,
        mri,
        encode_clinical(record, stats) if net_cfg.clinical_dim else None,
        sched,
        net_cfg.in_slices,
        cfg.data.slice_axis,
        ddim_steps or cfg.sample.ddim_steps,
        seed=derive_seed(seed, "sample"),
        placement=net_cfg.condition_placement,
        slice_batch=cfg.sample.slice_batch,
        clamp_x0=cfg.sample.clamp_x0,
    )
    write_volume(synth, out_path)
    echo = cfg.to_dict()
    echo["sample_overrides"] = {"seed": seed, "ddim_steps": ddim_steps}
    with open(out_path + ".config.json", "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"wrote {out_path}")


def _paired_volumes(real_dir: str, synth_dir: str):
    names = sorted(f for f in os.listdir(real_dir) if f.endswith(".pvol"))
    if not names:
        raise DataError(f"no .pvol volumes in {real_dir}")
    pairs = []
    for name in names:
        synth_path = os.path.join(synth_dir, name)
        if not os.path.isfile(synth_path):
            raise DataError(f"missing synthesized counterpart for {name} in {synth_dir}")
        sid = name.removesuffix(".pvol").removesuffix("_pet")
        pairs.append((sid, read_volume(os.path.join(real_dir, name)), read_volume(synth_path)))
    return pairs


@cli.command("eval")
@click.option("--real-dir", required=True, type=click.Path(exists=True))
@click.option("--synth-dir", required=True, type=click.Path(exists=True))
@click.option("--clinical", "clinical_path", type=click.Path(exists=True), default=None,
              help="Clinical CSV enabling the per-group fairness table.")
@click.option("--json", "json_path", type=click.Path(), default=None)
def cmd_eval(real_dir, synth_dir, clinical_path, json_path):
    """Image-quality metrics between matching real and synthesized volumes."""
    pairs = _paired_volumes(real_dir, synth_dir)
    report = evaluate_volume_pairs(pairs)
    click.echo(report.format_table())

    payload = {"package_version": __version__, "metrics": report.to_dict()}
    if clinical_path is not None:
        records = {r.subject_id: r for r in read_clinical_csv(clinical_path)}
        per_subject = {
            row["subject_id"]: row["mae_pct"]
            for row in report.per_subject
            if row["subject_id"] in records
        }
        fair = fairness_report(per_subject, records)
        click.echo(fair.format_table())
        payload["fairness"] = fair.to_dict()
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


@cli.command("classify")
@click.option("--dataset", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--source", required=True,
              type=click.Choice(["mri", "pet", "synth"]), help="Image source to classify.")
@click.option("--synth-dir", type=click.Path(exists=True), default=None,
              help="Directory of synthesized volumes (required for --source synth).")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--folds", default=5, show_default=True, type=int)
@click.option("--max-steps", default=300, show_default=True, type=int)
@click.option("--json", "json_path", type=click.Path(), default=None)
def cmd_classify(data_dir, source, synth_dir, seed, folds, max_steps, json_path):
    """CN-vs-AD classification over one image source (5-fold CV)."""
    dataset = load_dataset(data_dir)
    volumes, labels = [], []
    for sid in dataset.subjects():
        diagnosis = dataset.records[sid].diagnosis
        if diagnosis not in ("CN", "AD"):
            continue
        if source == "mri":
            vol = dataset.mri[sid].data
        elif source == "pet":
            vol = dataset.pet[sid].data
        else:
            if synth_dir is None:
                raise ConfigurationError("--source synth requires --synth-dir")
            vol = read_volume(os.path.join(synth_dir, f"{sid}_pet.pvol")).data
        volumes.append(vol)
        labels.append(0 if diagnosis == "CN" else 1)

    cfg = ClassifierConfig(max_steps=max_steps)
    report = classify_cv(volumes, labels, seed=seed, n_folds=folds, cfg=cfg)
    click.echo(report.format_table())
    if json_path:
        payload = {"package_version": __version__, "source": source, "report": report.to_dict()}
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


@cli.command("ablate")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--json", "json_path", type=click.Path(), default=None)
def cmd_ablate(grid_path, data_dir, out_dir, json_path):
    """Run an ablation grid: each cell trains at equal budget and is scored."""
    import yaml

    with open(grid_path) as fh:
        grid = yaml.safe_load(fh) or {}
    base_cfg = RunConfig.from_dict(grid.get("base", {}))
    cells = grid.get("cells", list(ABLATION_CELLS))
    seeds = grid.get("seeds", [0])
    dataset = load_dataset(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    base_cfg.write_yaml(os.path.join(out_dir, "config.yaml"))

    result = run_ablation(base_cfg, dataset, cells, seeds, out_dir)
    click.echo(result.format_table())
    if json_path:
        payload = {"package_version": __version__, "ablation": result.to_dict()}
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def main(argv=None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.exceptions.ClickException as exc:
        exc.show()
        return 1
    except (ConfigurationError, ContractViolation) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
