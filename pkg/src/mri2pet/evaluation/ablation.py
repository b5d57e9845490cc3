"""Ablation grid runner: train each variant at equal budget and compare.

Every cell is a named patch over the base configuration. Each (cell, seed)
pair trains from scratch with the same data and budget, synthesizes the
held-out test subjects, and reports image metrics; the summary ranks cells
by mean MAE against the full model.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..conditioning import encode_clinical
from ..config import RunConfig, patch_config
from ..dataio import Dataset
from ..seeding import derive_seed
from ..training import load_arms, synthesize_volume, train
from .metrics import evaluate_volume_pairs

ABLATION_CELLS: dict[str, dict] = {
    "full": {},
    "no_cyclex": {"loss.lambda_cycle": 0.0},
    "no_roi_weights": {"loss.use_roi": False},
    "no_clinical": {"net.use_clinical": False},
    "m2m_task": {"loss.task_target": "mri"},
    "task_w_0.01": {"loss.lambda_task": 0.01},
    "task_w_1": {"loss.lambda_task": 1.0},
    "task_w_10": {"loss.lambda_task": 10.0},
    "concat_feats": {"net.fusion": "concat"},
    "cond_conditioner": {"net.condition_placement": "conditioner"},
    "cond_denoiser": {"net.condition_placement": "denoiser"},
}


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)
    summary: str = ""

    def to_dict(self) -> dict:
        return {"rows": list(self.rows), "summary": self.summary}

    def format_table(self) -> str:
        lines = [
            f"{'cell':18s}{'MAE(%)':>10s}{'MSE(%)':>10s}{'PSNR':>10s}{'SSIM(%)':>10s}"
        ]
        for row in self.rows:
            lines.append(
                f"{row['cell']:18s}{row['mae_pct']:10.3f}{row['mse_pct']:10.3f}"
                f"{row['psnr_db']:10.2f}{row['ssim_pct']:10.2f}"
            )
        lines.append(self.summary)
        return "\n".join(lines)


def evaluate_run(ckpt_path, dataset: Dataset, split: str = "test", seed: int = 0):
    """Synthesize a split from a checkpoint and score it against the real PET."""
    cond_arm, den_arm, cfg, stats, sched = load_arms(ckpt_path)
    net_cfg = cfg.net_config()
    pairs = []
    for sid in dataset.splits[split]:
        synth = synthesize_volume(
            cond_arm,
            den_arm,
            dataset.mri[sid],
            encode_clinical(dataset.records[sid], stats) if net_cfg.clinical_dim else None,
            sched,
            net_cfg.in_slices,
            cfg.data.slice_axis,
            cfg.sample.ddim_steps,
            seed=derive_seed(cfg.seed, f"sample/{sid}"),
            placement=net_cfg.condition_placement,
            slice_batch=cfg.sample.slice_batch,
            clamp_x0=cfg.sample.clamp_x0,
        )
        pairs.append((sid, dataset.pet[sid], synth))
    return evaluate_volume_pairs(pairs)


def run_ablation(
    base_cfg: RunConfig,
    dataset: Dataset,
    cells: dict[str, dict] | list[str],
    seeds: list[int],
    out_root,
    quiet: bool = True,
) -> AblationResult:
    """Train and evaluate every ablation cell over the shared seed set."""
    if isinstance(cells, list):
        cells = {name: ABLATION_CELLS[name] for name in cells}
    out_root = os.fspath(out_root)
    rows = []
    for cell_name, patches in cells.items():
        cell_metrics = []
        for seed in seeds:
            cfg = patch_config(base_cfg, {**patches, "seed": seed})
            run_dir = os.path.join(out_root, f"{cell_name}_seed{seed}")
            result = train(dataset, cfg, run_dir, quiet=quiet)
            report = evaluate_run(result["final_checkpoint"], dataset, seed=seed)
            cell_metrics.append(report)
        rows.append(
            {
                "cell": cell_name,
                "seeds": list(seeds),
                "mae_pct": float(np.mean([m.mae_pct for m in cell_metrics])),
                "mse_pct": float(np.mean([m.mse_pct for m in cell_metrics])),
                "psnr_db": float(np.mean([m.psnr_db for m in cell_metrics])),
                "ssim_pct": float(np.mean([m.ssim_pct for m in cell_metrics])),
                "per_seed_mae": [m.mae_pct for m in cell_metrics],
            }
        )

    ranked = sorted(rows, key=lambda r: r["mae_pct"])
    order = " < ".join(f"{r['cell']} ({r['mae_pct']:.3f}%)" for r in ranked)
    full_rank = next(
        (i for i, r in enumerate(ranked) if r["cell"] == "full"), None
    )
    summary = f"MAE ordering: {order}"
    if full_rank is not None:
        summary += f"; full model ranks {full_rank + 1}/{len(ranked)}"
    return AblationResult(rows=rows, summary=summary)
