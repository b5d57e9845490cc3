"""Downstream diagnosis classification with subject-level cross-validation.

A small 3D residual CNN is trained per fold to separate CN from AD volumes;
balanced accuracy, F1, and AUC (each x100) are reported as mean and std over
folds. Train and test volumes always come from the same source (real MRI,
real PET, or one synthesizer's output) so comparisons are not confounded by
domain shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import balanced_accuracy_score, f1_score, roc_auc_score
from sklearn.model_selection import StratifiedKFold, train_test_split
from torch import nn

from ..errors import DataError
from ..seeding import derive_seed


@dataclass
class ClassifierConfig:
    channels: tuple[int, int, int] = (12, 24, 48)
    dropout: float = 0.2
    lr: float = 5e-3
    weight_decay: float = 1e-6
    batch_size: int = 32
    max_steps: int = 300
    eval_interval: int = 20
    patience: int = 5  # early-stopping evals without val BACC improvement
    val_fraction: float = 0.2


@dataclass
class ClassificationReport:
    bacc_mean: float
    bacc_std: float
    f1_mean: float
    f1_std: float
    auc_mean: float
    auc_std: float
    n_folds: int
    per_fold: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bacc": [self.bacc_mean, self.bacc_std],
            "f1": [self.f1_mean, self.f1_std],
            "auc": [self.auc_mean, self.auc_std],
            "n_folds": self.n_folds,
            "per_fold": list(self.per_fold),
        }

    def format_table(self) -> str:
        return (
            f"BACC {self.bacc_mean:6.2f} +/- {self.bacc_std:5.2f}   "
            f"F1 {self.f1_mean:6.2f} +/- {self.f1_std:5.2f}   "
            f"AUC {self.auc_mean:6.2f} +/- {self.auc_std:5.2f}   "
            f"({self.n_folds} folds)"
        )


class _ResStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(min(4, out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(4, out_ch), out_ch)
        self.skip = nn.Conv3d(in_ch, out_ch, 1, stride=stride)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class VolumeClassifier(nn.Module):
    """Three-stage residual 3D CNN with global average pooling."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.stem = nn.Conv3d(1, c1, 3, padding=1)
        self.stage1 = _ResStage(c1, c2, stride=2)
        self.stage2 = _ResStage(c2, c3, stride=2)
        self.dropout = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(c3, 2)

    def forward(self, x):
        h = F.silu(self.stem(x))
        h = self.stage1(h)
        h = self.stage2(h)
        h = h.mean(dim=(2, 3, 4))
        return self.head(self.dropout(h))


def _bacc(model: nn.Module, x: torch.Tensor, y: np.ndarray) -> float:
    model.eval()
    with torch.no_grad():
        pred = model(x).argmax(dim=1).numpy()
    model.train()
    return balanced_accuracy_score(y, pred)


def _train_fold(
    x_train: torch.Tensor,
    y_train: np.ndarray,
    cfg: ClassifierConfig,
    seed: int,
) -> VolumeClassifier:
    torch.manual_seed(seed)
    # early stopping needs a stratified holdout; skip it for tiny folds
    use_early_stop = len(y_train) >= 10 and min(np.bincount(y_train, minlength=2)) >= 3
    if use_early_stop:
        idx_fit, idx_val = train_test_split(
            np.arange(len(y_train)),
            test_size=cfg.val_fraction,
            stratify=y_train,
            random_state=seed,
        )
    else:
        idx_fit = np.arange(len(y_train))
        idx_val = idx_fit
    x_fit, y_fit = x_train[idx_fit], y_train[idx_fit]
    x_val, y_val = x_train[idx_val], y_train[idx_val]
    y_fit_t = torch.from_numpy(y_fit.astype(np.int64))

    model = VolumeClassifier(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(seed)

    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best_val = -1.0
    stale = 0
    for step in range(1, cfg.max_steps + 1):
        idx = torch.randint(len(y_fit), (min(cfg.batch_size, len(y_fit)),), generator=gen)
        logits = model(x_fit[idx])
        loss = F.cross_entropy(logits, y_fit_t[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % cfg.eval_interval == 0:
            val_bacc = _bacc(model, x_val, y_val)
            if val_bacc > best_val:
                best_val = val_bacc
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    model.load_state_dict(best_state)
    model.eval()
    return model


def classify_cv(
    volumes: list[np.ndarray],
    labels: list[int],
    seed: int = 0,
    n_folds: int = 5,
    cfg: ClassifierConfig | None = None,
) -> ClassificationReport:
    """Subject-level stratified K-fold classification of 3D volumes.

    ``labels`` are binary (0 = CN, 1 = AD). Raises DataError when a class is
    too small to stratify into the requested folds.
    """
    cfg = cfg or ClassifierConfig()
    y = np.asarray(labels, dtype=np.int64)
    if set(np.unique(y)) - {0, 1}:
        raise DataError(f"labels must be binary 0/1, got {sorted(set(labels))}")
    if min(np.bincount(y, minlength=2)) < n_folds:
        raise DataError(
            f"stratification error: a class has fewer than {n_folds} subjects"
        )
    x = torch.from_numpy(
        np.stack([np.asarray(v, dtype=np.float32) for v in volumes])[:, None] - 0.5
    )

    folds = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    per_fold = []
    for fold_idx, (train_idx, test_idx) in enumerate(folds.split(np.zeros(len(y)), y)):
        model = _train_fold(
            x[train_idx], y[train_idx], cfg, derive_seed(seed, f"fold/{fold_idx}")
        )
        with torch.no_grad():
            logits = model(x[test_idx])
            prob = torch.softmax(logits, dim=1)[:, 1].numpy()
            pred = logits.argmax(dim=1).numpy()
        truth = y[test_idx]
        per_fold.append(
            {
                "fold": fold_idx,
                "bacc": 100.0 * balanced_accuracy_score(truth, pred),
                "f1": 100.0 * f1_score(truth, pred, zero_division=0),
                "auc": 100.0 * roc_auc_score(truth, prob),
                "test_subjects": [int(i) for i in test_idx],
            }
        )

    def agg(key):
        vals = [row[key] for row in per_fold]
        return float(np.mean(vals)), float(np.std(vals))

    bacc_mean, bacc_std = agg("bacc")
    f1_mean, f1_std = agg("f1")
    auc_mean, auc_std = agg("auc")
    return ClassificationReport(
        bacc_mean=bacc_mean,
        bacc_std=bacc_std,
        f1_mean=f1_mean,
        f1_std=f1_std,
        auc_mean=auc_mean,
        auc_std=auc_std,
        n_folds=n_folds,
        per_fold=per_fold,
    )
