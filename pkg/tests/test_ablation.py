import numpy as np
import pytest

from mri2pet.config import RunConfig, patch_config
from mri2pet.dataio import PhantomSpec, generate_cohort, load_dataset
from mri2pet.errors import ConfigurationError
from mri2pet.evaluation.ablation import ABLATION_CELLS, run_ablation
from mri2pet.networks import NetConfig


def test_ablation_cells_cover_spec_grid():
    names = set(ABLATION_CELLS)
    assert {"full", "no_cyclex", "no_roi_weights", "no_clinical", "m2m_task"} <= names
    assert {"task_w_0.01", "task_w_1", "task_w_10"} <= names
    assert {"concat_feats", "cond_conditioner", "cond_denoiser"} <= names


def test_patch_config_strict_paths():
    cfg = RunConfig()
    patched = patch_config(cfg, {"loss.lambda_cycle": 0.0, "seed": 9})
    assert patched.loss.lambda_cycle == 0.0
    assert patched.seed == 9
    assert cfg.loss.lambda_cycle == 1.0  # original untouched
    with pytest.raises(ConfigurationError):
        patch_config(cfg, {"loss.lambda_cycles": 1.0})


def test_concat_fusion_variant_builds_and_runs():
    import torch

    from mri2pet.networks import build_dual_arm

    cfg = NetConfig(
        base_channels=8, depth=2, channel_multipliers=(1, 2),
        attention_resolutions=(), attention_heads=2, in_slices=3,
        image_size=(8, 8), group_norm_groups=4, res_blocks=1,
        time_embed_mult=2, fusion="concat",
    )
    cond, den = build_dual_arm(cfg)
    x = torch.randn(2, 3, 8, 8)
    _, pyramid = cond(x, 0)
    out, _ = den(torch.randn(2, 3, 8, 8), 5, None, pyramid)
    assert out.shape == (2, 3, 8, 8)


@pytest.mark.slow
def test_run_ablation_two_cells(tmp_path):
    data_dir = tmp_path / "data"
    generate_cohort(data_dir, 9, PhantomSpec(size=(8, 8, 8)), seed=13, missing_rate=0.0)
    dataset = load_dataset(data_dir)
    base = RunConfig.from_dict(
        {
            "net": {
                "base_channels": 8, "depth": 2, "channel_multipliers": [1, 2],
                "attention_resolutions": [], "attention_heads": 2, "in_slices": 3,
                "image_size": [8, 8], "group_norm_groups": 4, "res_blocks": 1,
                "time_embed_mult": 2,
            },
            "schedule": {"timesteps": 50},
            "train": {"steps": 30, "batch_size": 4, "log_interval": 30, "val_interval": 0},
            "sample": {"ddim_steps": 10, "slice_batch": 8},
        }
    )
    result = run_ablation(base, dataset, ["full", "no_cyclex"], seeds=[0], out_root=tmp_path / "grid")
    assert len(result.rows) == 2
    for row in result.rows:
        for key in ("mae_pct", "mse_pct", "psnr_db", "ssim_pct"):
            assert np.isfinite(row[key])
    assert "full" in result.summary
    # same seed, same budget: the standalone full cell reproduces its own run
    again = run_ablation(base, dataset, ["full"], seeds=[0], out_root=tmp_path / "grid2")
    assert again.rows[0]["mae_pct"] == result.rows[0]["mae_pct"]
