"""Per-group error analysis with rank-sum tests and Bonferroni correction.

Each demographic group (age bin, sex, diagnosis) is compared against its
complement with a two-sided Wilcoxon rank-sum test: exact enumeration for
small tie-free samples, otherwise the normal approximation with midranks,
tie-corrected variance, and continuity correction. Raw p-values are
multiplied by the number of comparisons (capped at 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np
from scipy.stats import norm

from ..conditioning import AGE_BINS, DIAGNOSIS_LEVELS, SEX_LEVELS, age_bin
from ..errors import ContractViolation

EXACT_MAX_N = 20
SIGNIFICANCE = 0.05


@dataclass
class RankSumResult:
    u_statistic: float
    p_value: float
    method: str  # "exact" or "asymptotic"


def rank_sum_test(x, y) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney) test of two samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ContractViolation("rank-sum test needs non-empty samples")
    pooled = np.concatenate([x, y])
    n1, n2 = x.size, y.size
    n = n1 + n2

    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midranks
        i = j + 1
    has_ties = np.unique(pooled).size < n

    r1 = float(ranks[:n1].sum())
    u1 = r1 - n1 * (n1 + 1) / 2.0

    if n <= EXACT_MAX_N and not has_ties:
        return RankSumResult(u1, _exact_p(ranks, n1, u1), "exact")
    return RankSumResult(u1, _asymptotic_p(pooled, n1, n2, u1), "asymptotic")


def _exact_p(ranks: np.ndarray, n1: int, u_obs: float) -> float:
    """Exact two-sided p by enumerating all group assignments of the ranks."""
    n = ranks.size
    offset = n1 * (n1 + 1) / 2.0
    total = comb(n, n1)
    le = ge = 0
    for combo in combinations(range(n), n1):
        u = ranks[list(combo)].sum() - offset
        if u <= u_obs + 1e-12:
            le += 1
        if u >= u_obs - 1e-12:
            ge += 1
    return min(1.0, 2.0 * min(le, ge) / total)


def _asymptotic_p(pooled: np.ndarray, n1: int, n2: int, u1: float) -> float:
    """Normal approximation with tie-corrected variance and continuity correction."""
    n = n1 + n2
    mu = n1 * n2 / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0  # all values tied: the samples are indistinguishable
    z = max(abs(u1 - mu) - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def bonferroni(p: float, n_comparisons: int) -> float:
    """Multiply by the comparison count and cap at 1."""
    return min(1.0, p * n_comparisons)


@dataclass
class FairnessReport:
    rows: list = field(default_factory=list)
    n_comparisons: int = 0
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "n_comparisons": self.n_comparisons,
            "excluded": list(self.excluded),
        }

    def format_table(self) -> str:
        lines = [
            f"{'group':16s}{'n':>5s}{'MAE(%)':>10s}{'std':>8s}{'p':>9s}{'p_adj':>9s}  sig"
        ]
        for row in self.rows:
            lines.append(
                f"{row['group']:16s}{row['n']:5d}{row['mean_mae']:10.3f}"
                f"{row['std_mae']:8.3f}{row['p_raw']:9.4f}{row['p_adj']:9.4f}"
                f"  {'*' if row['significant'] else ''}"
            )
        for note in self.excluded:
            lines.append(f"excluded: {note}")
        return "\n".join(lines)


def fairness_report(per_subject_mae: dict[str, float], records: dict) -> FairnessReport:
    """Compare each demographic group's MAE against the complement.

    ``records`` maps subject id to a ClinicalRecord (or any object with age,
    sex, diagnosis attributes). Groups with fewer than two subjects or an
    empty complement are excluded with a note.
    """
    sids = sorted(per_subject_mae)
    mae = {sid: float(per_subject_mae[sid]) for sid in sids}

    def group_sids(key, level) -> list[str]:
        out = []
        for sid in sids:
            rec = records[sid]
            value = age_bin(rec.age) if key == "age" else getattr(rec, key)
            if value == level:
                out.append(sid)
        return out

    candidates = (
        [("age", level) for level in AGE_BINS]
        + [("sex", level) for level in SEX_LEVELS]
        + [("diagnosis", level) for level in DIAGNOSIS_LEVELS]
    )

    comparisons = []
    excluded = []
    for key, level in candidates:
        members = group_sids(key, level)
        complement = [sid for sid in sids if sid not in members]
        label = f"{key}={level}"
        if len(members) == 0:
            continue
        if len(members) < 2 or len(complement) < 2:
            excluded.append(f"{label} (n={len(members)}, complement={len(complement)})")
            continue
        comparisons.append((label, members, complement))

    n_comparisons = len(comparisons)
    rows = []
    for label, members, complement in comparisons:
        group_vals = [mae[sid] for sid in members]
        rest_vals = [mae[sid] for sid in complement]
        result = rank_sum_test(group_vals, rest_vals)
        p_adj = bonferroni(result.p_value, n_comparisons)
        rows.append(
            {
                "group": label,
                "n": len(members),
                "mean_mae": float(np.mean(group_vals)),
                "std_mae": float(np.std(group_vals)),
                "p_raw": result.p_value,
                "p_adj": p_adj,
                "method": result.method,
                "significant": p_adj < SIGNIFICANCE,
            }
        )
    return FairnessReport(rows=rows, n_comparisons=n_comparisons, excluded=excluded)
