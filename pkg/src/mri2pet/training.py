"""Loss terms, cycle-exchange training, EMA tracking, and checkpoints.

A training round runs four teacher-forced denoising processes that share one
sampled timestep per batch element:

  1. the main conditional denoising of the target PET stack (the diffusion
     loss, weighted by the pathology-prior map),
  2. the second hop of the forward cycle (arms exchanged: the conditioner
     arm denoises MRI given features the denoiser arm extracted from the
     synthesized PET),
  3. the first hop of the backward cycle (conditioner arm denoises MRI given
     features from the real PET),
  4. the second hop of the backward cycle (denoiser arm denoises PET given
     features from the synthesized MRI).

The synthesized PET of process 1 doubles as the forward-cycle first hop, so
enabling the cycle adds three denoising processes and zero parameters: the
exchange only swaps which arm extracts features and which denoises.

Volumes are mapped to the model domain [-1, 1] for diffusion and back to
[0, 1] for reporting.
"""

from __future__ import annotations

import json
import os
import shutil
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import ClinicalStats, build_roi_weight_map, encode_clinical
from .dataio import Dataset, Volume3D
from .diffusion import (
    DiffusionSchedule,
    build_cosine_schedule,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
)
from .errors import ConfigurationError, ContractViolation, NumericalError
from .networks import NetConfig, UNetArm, build_dual_arm
from .seeding import derive_seed
from .volumetric import SliceStack, assemble_volume, extract_all_stacks

CYCLE_METRIC = "l1"  # cycle-consistency distance follows the MAE convention


@dataclass(frozen=True)
class LossWeights:
    lambda_task: float = 0.1
    lambda_diff: float = 1.0
    lambda_cycle: float = 1.0

    def __post_init__(self):
        if min(self.lambda_task, self.lambda_diff, self.lambda_cycle) < 0:
            raise ConfigurationError("loss weights must be nonnegative")


def to_model(x):
    """Map [0, 1] intensities to the [-1, 1] diffusion domain."""
    return 2.0 * x - 1.0


def to_data(x):
    """Inverse of to_model."""
    return (x + 1.0) / 2.0


def _elementwise(a: torch.Tensor, b: torch.Tensor, metric: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if metric == "l1":
        return (a - b).abs()
    if metric == "l2":
        return (a - b) ** 2
    raise ConfigurationError(f"unknown distance metric {metric!r}")


def loss_task(output: torch.Tensor, target: torch.Tensor, metric: str = "l1") -> torch.Tensor:
    """Pixel-level distance between the conditioner output and its task target."""
    return _elementwise(output, target, metric).mean()


def loss_diff(
    x0_true: torch.Tensor,
    x0_pred: torch.Tensor,
    weights: torch.Tensor | None = None,
    metric: str = "l1",
) -> torch.Tensor:
    """Denoising loss: mean of per-voxel distances scaled by the ROI weights.

    The weight map is normalized to mean one over the volume, so with uniform
    weights this equals the unweighted mean distance bit for bit.
    """
    dist = _elementwise(x0_true, x0_pred, metric)
    if weights is None:
        return dist.mean()
    if bool((weights < 0).any()):
        raise ContractViolation("ROI weights must be nonnegative")
    return (weights * dist).mean()


def _gate(c, role: str, placement: str):
    """Clinical data enters conditioner-role and/or denoiser-role passes."""
    if c is None:
        return None
    allowed = {
        "both": ("conditioner", "denoiser"),
        "denoiser": ("denoiser",),
        "conditioner": ("conditioner",),
    }[placement]
    return c if role in allowed else None


def generate_surrogate(
    cond_arm,
    den_arm,
    source: torch.Tensor,
    t,
    c: torch.Tensor | None,
    sched: DiffusionSchedule,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
    target: torch.Tensor | None = None,
    placement: str = "both",
) -> torch.Tensor:
    """Single-step differentiable translation of ``source`` by an arm pair.

    The conditioner-role arm extracts features from the source; the
    denoiser-role arm predicts the clean target from a noised starting point
    at level t. Without a ``target`` the starting point is a zero estimate
    (pure sigma[t]-scaled noise); with one, the ground truth is diffused to
    level t (teacher forcing, used inside training rounds). Gradients flow
    through both arms.
    """
    if eps is None:
        eps = torch.randn(source.shape, generator=generator, dtype=source.dtype)
    _, features = cond_arm(source, 0, _gate(c, "conditioner", placement))
    start = forward_diffuse(
        target if target is not None else torch.zeros_like(source), t, eps, sched
    ).x_t
    pred, _ = den_arm(start, t, _gate(c, "denoiser", placement), features)
    return pred


def cyclex_round(
    cond_arm,
    den_arm,
    m: torch.Tensor,
    p: torch.Tensor,
    c: torch.Tensor | None,
    roi_weights: torch.Tensor | None,
    sched: DiffusionSchedule,
    weights: LossWeights,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    task_metric: str = "l1",
    diff_metric: str = "l1",
    task_target: str = "pet",
    placement: str = "both",
) -> tuple[torch.Tensor, dict]:
    """One training round over a paired batch; returns (total, per-term values).

    All four denoising processes share the per-element timestep, the noised
    PET stack is reused by processes 1 and 4, and the noised MRI stack by
    processes 2 and 3. With lambda_cycle = 0 the cycle passes are skipped and
    the total reduces exactly to the task + diffusion combination.
    """
    if m.shape != p.shape:
        raise ContractViolation(
            f"unpaired batch: MRI {tuple(m.shape)} vs PET {tuple(p.shape)}"
        )
    if t is None:
        t = torch.randint(1, sched.T + 1, (m.shape[0],), generator=generator)
    eps_p = torch.randn(p.shape, generator=generator, dtype=p.dtype)

    c_cond = _gate(c, "conditioner", placement)
    c_den = _gate(c, "denoiser", placement)

    task_out, h_m = cond_arm(m, 0, c_cond)
    l_task = loss_task(task_out, p if task_target == "pet" else m, task_metric)

    p_t = forward_diffuse(p, t, eps_p, sched).x_t
    p_pred, _ = den_arm(p_t, t, c_den, h_m)
    l_diff = loss_diff(p, p_pred, roi_weights, diff_metric)

    if weights.lambda_cycle > 0:
        eps_m = torch.randn(m.shape, generator=generator, dtype=m.dtype)
        m_t = forward_diffuse(m, t, eps_m, sched).x_t

        # Two conditioner-role passes (denoiser arm on synthesized and real
        # PET) and the two MRI denoising processes they feed are independent,
        # so each pair runs as one double-batch pass.
        def dup(v):
            return torch.cat([v, v], dim=0) if v is not None else None

        _, h_pets = den_arm(torch.cat([p_pred, p], dim=0), 0, dup(c_cond))
        m_out, _ = cond_arm(dup(m_t), torch.cat([t, t], dim=0), dup(c_den), h_pets)
        m_cyc, m_syn = m_out.chunk(2, dim=0)
        l_fwd = loss_task(m_cyc, m, CYCLE_METRIC)

        _, h_m_syn = cond_arm(m_syn, 0, c_cond)
        p_cyc, _ = den_arm(p_t, t, c_den, h_m_syn)
        l_bwd = loss_task(p_cyc, p, CYCLE_METRIC)

        total = (
            weights.lambda_task * l_task
            + weights.lambda_diff * l_diff
            + weights.lambda_cycle * (l_fwd + l_bwd)
        )
    else:
        l_fwd = torch.zeros((), dtype=m.dtype)
        l_bwd = torch.zeros((), dtype=m.dtype)
        total = weights.lambda_task * l_task + weights.lambda_diff * l_diff

    parts = {
        "l_task": float(l_task.detach()),
        "l_diff": float(l_diff.detach()),
        "l_cycle_fwd": float(l_fwd.detach()),
        "l_cycle_bwd": float(l_bwd.detach()),
        "total": float(total.detach()),
    }
    return total, parts


class EmaTracker:
    """Exponential moving average of all arm parameters.

    The shadow starts as a copy of the weights, so constant weights keep the
    shadow fixed exactly, and it converges back to the weights if updates
    stop changing them.
    """

    def __init__(self, modules: dict[str, nn.Module], decay: float = 0.999):
        self.decay = decay
        self.shadow: dict[str, dict[str, torch.Tensor]] = {
            name: {k: v.detach().clone() for k, v in module.named_parameters()}
            for name, module in modules.items()
        }

    def update(self, modules: dict[str, nn.Module]) -> None:
        for name, module in modules.items():
            shadow = self.shadow[name]
            for key, param in module.named_parameters():
                # increment form: exact no-op when the weights stop changing
                shadow[key].add_(param.detach() - shadow[key], alpha=1.0 - self.decay)

    def copy_to(self, modules: dict[str, nn.Module]) -> None:
        for name, module in modules.items():
            module.load_state_dict(self.shadow[name])

    def state_dict(self) -> dict:
        return {name: dict(shadow) for name, shadow in self.shadow.items()}

    def load_state_dict(self, state: dict) -> None:
        self.shadow = {
            name: {k: v.clone() for k, v in shadow.items()}
            for name, shadow in state.items()
        }


# ---------------------------------------------------------------------------
# In-memory slice-stack data
# ---------------------------------------------------------------------------


class PairedSliceData:
    """Precomputed slice stacks for one split, in the model domain."""

    def __init__(
        self,
        dataset: Dataset,
        split: str,
        n_slices: int,
        axis: int,
        stats: ClinicalStats,
        roi_weights: np.ndarray | None,
    ):
        subjects = dataset.splits[split]
        if not subjects:
            raise ConfigurationError(f"split {split!r} is empty")
        self.subjects = subjects
        self.axis = axis
        self.n_slices = n_slices

        def stack_tensor(volume) -> torch.Tensor:
            stacks = extract_all_stacks(volume, axis, n_slices)
            return torch.from_numpy(np.stack([s.data for s in stacks]))

        self.m = torch.stack([to_model(stack_tensor(dataset.mri[s])) for s in subjects])
        self.p = torch.stack([to_model(stack_tensor(dataset.pet[s])) for s in subjects])
        self.c = torch.from_numpy(
            np.stack([encode_clinical(dataset.records[s], stats) for s in subjects])
        )
        self.roi = None
        if roi_weights is not None:
            self.roi = stack_tensor(roi_weights.astype(np.float32))
        self.n_centers = self.m.shape[1]

    def sample_batch(self, batch_size: int, generator: torch.Generator):
        subj = torch.randint(len(self.subjects), (batch_size,), generator=generator)
        center = torch.randint(self.n_centers, (batch_size,), generator=generator)
        roi = self.roi[center] if self.roi is not None else None
        return self.m[subj, center], self.p[subj, center], self.c[subj], roi


# ---------------------------------------------------------------------------
# Volume synthesis (inference)
# ---------------------------------------------------------------------------


def synthesize_volume(
    cond_arm: UNetArm,
    den_arm: UNetArm,
    mri: Volume3D,
    c_vec: np.ndarray | None,
    sched: DiffusionSchedule,
    n_slices: int,
    axis: int,
    ddim_steps: int,
    seed: int,
    placement: str = "both",
    slice_batch: int = 32,
    clamp_x0: bool = True,
) -> Volume3D:
    """Synthesize the PET counterpart of one MRI volume.

    Every center index along the axis gets its own reverse chain; the initial
    noise of each is drawn from a per-slice seed derived from ``seed``, so the
    result does not depend on how slices are batched. Predictions are
    assembled with distance weighting into the output volume.
    """
    stacks = extract_all_stacks(mri, axis, n_slices)
    data = to_model(torch.from_numpy(np.stack([s.data for s in stacks])))
    length = data.shape[0]
    taus = ddim_timesteps(sched.T, ddim_steps)

    c_all = None
    if c_vec is not None:
        c_all = torch.from_numpy(np.tile(np.asarray(c_vec, dtype=np.float32), (length, 1)))

    noise = torch.stack(
        [
            torch.randn(
                data.shape[1:],
                generator=torch.Generator().manual_seed(
                    derive_seed(seed, f"slice/{axis}/{i}")
                ),
            )
            for i in range(length)
        ]
    )

    preds = torch.empty_like(data)
    was_training = (cond_arm.training, den_arm.training)
    cond_arm.eval()
    den_arm.eval()
    with torch.no_grad():
        for lo in range(0, length, slice_batch):
            hi = min(lo + slice_batch, length)
            m_chunk = data[lo:hi]
            c_chunk = c_all[lo:hi] if c_all is not None else None
            _, pyramid = cond_arm(m_chunk, 0, _gate(c_chunk, "conditioner", placement))
            x = noise[lo:hi].clone()
            for t, t_prev in zip(taus[:-1], taus[1:]):
                x0_pred, _ = den_arm(x, t, _gate(c_chunk, "denoiser", placement), pyramid)
                if clamp_x0:
                    x0_pred = x0_pred.clamp(-1.0, 1.0)
                if t_prev == 0:
                    x = x0_pred
                else:
                    x = ddim_step(x, x0_pred, t, t_prev, sched)
            preds[lo:hi] = x
    cond_arm.train(was_training[0])
    den_arm.train(was_training[1])

    pred_np = to_data(preds).numpy()
    pred_stacks = [
        SliceStack(data=pred_np[i], axis=axis, center_index=i) for i in range(length)
    ]
    volume = assemble_volume(pred_stacks, modality="PET")
    return Volume3D(np.clip(volume.data, 0.0, 1.0), "PET")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _as_float(x) -> float:
    return float(x)


def dict_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Human-readable list of paths where two config dicts disagree."""
    diffs = []
    for key in sorted(set(a) | set(b)):
        path = f"{prefix}{key}"
        if key not in a or key not in b:
            diffs.append(f"{path}: {'missing' if key not in a else a[key]!r} vs "
                         f"{'missing' if key not in b else b[key]!r}")
        elif isinstance(a[key], dict) and isinstance(b[key], dict):
            diffs.extend(dict_diff(a[key], b[key], prefix=f"{path}."))
        elif a[key] != b[key]:
            diffs.append(f"{path}: {a[key]!r} vs {b[key]!r}")
    return diffs


def train(dataset: Dataset, cfg, out_dir, resume_from=None, quiet: bool = False) -> dict:
    """Train the dual-arm model on a phantom cohort.

    Writes step-stamped checkpoints, a best-by-validation-MAE copy, and an
    append-only JSONL metrics log under ``out_dir``. Fully deterministic for
    a fixed config and seed; resuming from a checkpoint restores weights,
    optimizer moments, EMA, and RNG state for a bit-identical continuation.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    net_cfg: NetConfig = cfg.net_config()
    sched = build_cosine_schedule(cfg.schedule.timesteps, cfg.schedule.offset)

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    cond_arm, den_arm = build_dual_arm(net_cfg)
    arms = {"conditioner": cond_arm, "denoiser": den_arm}
    params = list(cond_arm.parameters()) + list(den_arm.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    ema = EmaTracker(arms, cfg.train.ema_decay)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "train-noise"))

    stats = ClinicalStats.from_records(
        [dataset.records[s] for s in dataset.splits["train"]]
    )
    roi_map = None
    if cfg.loss.use_roi:
        roi_map = build_roi_weight_map(
            dataset.roi_mask, cfg.loss.roi_inside, cfg.loss.roi_outside
        ).weights

    start_step = 0
    best_val = None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        mismatches = dict_diff(ckpt["config"], cfg.to_dict())
        if mismatches:
            raise ConfigurationError(
                "checkpoint/config mismatch:\n  " + "\n  ".join(mismatches)
            )
        cond_arm.load_state_dict(ckpt["conditioner"])
        den_arm.load_state_dict(ckpt["denoiser"])
        opt.load_state_dict(ckpt["optimizer"])
        ema.load_state_dict(ckpt["ema"])
        gen.set_state(ckpt["generator"].to(torch.uint8))
        start_step = int(ckpt["step"])
        best_val = ckpt.get("best_val_mae")

    data = PairedSliceData(
        dataset, "train", net_cfg.in_slices, cfg.data.slice_axis, stats, roi_map
    )
    weights = cfg.loss_weights()

    log_path = os.path.join(out_dir, "metrics.jsonl")
    if start_step == 0 and os.path.exists(log_path):
        os.remove(log_path)

    def checkpoint_payload(step: int) -> dict:
        return {
            "format": 1,
            "step": step,
            "config": cfg.to_dict(),
            "conditioner": cond_arm.state_dict(),
            "denoiser": den_arm.state_dict(),
            "ema": ema.state_dict(),
            "optimizer": opt.state_dict(),
            "generator": gen.get_state(),
            "clinical_stats": stats.to_dict(),
            "best_val_mae": best_val,
        }

    def run_validation(step: int) -> float:
        val_arms = build_dual_arm(net_cfg)
        ema.copy_to({"conditioner": val_arms[0], "denoiser": val_arms[1]})
        maes = []
        for sid in dataset.splits["val"]:
            synth = synthesize_volume(
                val_arms[0],
                val_arms[1],
                dataset.mri[sid],
                encode_clinical(dataset.records[sid], stats),
                sched,
                net_cfg.in_slices,
                cfg.data.slice_axis,
                cfg.sample.ddim_steps,
                seed=derive_seed(cfg.seed, f"val/{step}/{sid}"),
                placement=net_cfg.condition_placement,
            )
            maes.append(
                100.0 * float(np.mean(np.abs(synth.data - dataset.pet[sid].data)))
            )
        return float(np.mean(maes))

    t_start = time.monotonic()
    log_rows = []
    for step in range(start_step + 1, cfg.train.steps + 1):
        m, p, c, roi = data.sample_batch(cfg.train.batch_size, gen)
        total, parts = cyclex_round(
            cond_arm,
            den_arm,
            m,
            p,
            c if net_cfg.clinical_dim > 0 else None,
            roi,
            sched,
            weights,
            generator=gen,
            task_metric=cfg.loss.task_metric,
            diff_metric=cfg.loss.diff_metric,
            task_target=cfg.loss.task_target,
            placement=net_cfg.condition_placement,
        )
        if not np.isfinite(parts["total"]):
            save_checkpoint(
                checkpoint_payload(step), os.path.join(out_dir, "diagnostic_nan.ckpt")
            )
            raise NumericalError(
                f"non-finite loss at step {step}: {parts} "
                f"(diagnostic snapshot written to {out_dir})"
            )
        opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.train.grad_clip > 0:
            nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
        opt.step()
        ema.update(arms)

        row = None
        if step % cfg.train.log_interval == 0 or step == cfg.train.steps:
            row = {"step": step, **parts, "lr": cfg.train.lr, "val_mae": None}
        if cfg.train.val_interval and (
            step % cfg.train.val_interval == 0 or step == cfg.train.steps
        ):
            val_mae = run_validation(step)
            if row is None:
                row = {"step": step, **parts, "lr": cfg.train.lr, "val_mae": None}
            row["val_mae"] = val_mae
            if best_val is None or val_mae < best_val:
                best_val = val_mae
                save_checkpoint(
                    checkpoint_payload(step), os.path.join(out_dir, "best.ckpt")
                )
        if row is not None:
            log_rows.append(row)
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
            if not quiet:
                msg = ", ".join(f"{k}={v:.5f}" for k, v in parts.items())
                extra = f", val_mae={row['val_mae']:.4f}" if row["val_mae"] is not None else ""
                print(f"step {step}: {msg}{extra}", flush=True)

        if cfg.train.ckpt_interval and step % cfg.train.ckpt_interval == 0:
            save_checkpoint(
                checkpoint_payload(step),
                os.path.join(out_dir, f"ckpt_step{step:06d}.ckpt"),
            )

    final_path = os.path.join(out_dir, "last.ckpt")
    save_checkpoint(checkpoint_payload(cfg.train.steps), final_path)
    if best_val is None:
        shutil.copyfile(final_path, os.path.join(out_dir, "best.ckpt"))

    return {
        "steps": cfg.train.steps,
        "seconds": time.monotonic() - t_start,
        "best_val_mae": best_val,
        "final_checkpoint": final_path,
        "log": log_rows,
    }


def load_arms(ckpt_path, use_ema: bool = True):
    """Rebuild both arms (EMA weights by default) plus run metadata."""
    from .config import RunConfig

    ckpt = load_checkpoint(ckpt_path)
    cfg = RunConfig.from_dict(ckpt["config"])
    net_cfg = cfg.net_config()
    cond_arm, den_arm = build_dual_arm(net_cfg)
    if use_ema:
        cond_arm.load_state_dict(ckpt["ema"]["conditioner"])
        den_arm.load_state_dict(ckpt["ema"]["denoiser"])
    else:
        cond_arm.load_state_dict(ckpt["conditioner"])
        den_arm.load_state_dict(ckpt["denoiser"])
    cond_arm.eval()
    den_arm.eval()
    stats = ClinicalStats.from_dict(ckpt["clinical_stats"])
    sched = build_cosine_schedule(cfg.schedule.timesteps, cfg.schedule.offset)
    return cond_arm, den_arm, cfg, stats, sched
