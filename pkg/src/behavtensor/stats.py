"""Two-sample and k-sample tests plus Gaussian KDE for group comparisons.

All p-values come from :mod:`behavtensor.special`, so results do not depend
on an external statistics library.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .special import chi2_sf, f_sf, kolmogorov_sf, t_sf

__all__ = [
    "SampleGroup",
    "TestResult",
    "KDECurve",
    "welch_t_test",
    "pooled_t_test",
    "one_way_anova",
    "kruskal_wallis",
    "ks_two_sample",
    "ks_one_sample",
    "kde",
    "write_test_results",
    "write_kde",
]


@dataclass
class SampleGroup:
    label: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size < 1:
            raise ValueError(f"group {self.label!r} is empty")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"group {self.label!r} contains non-finite values")

    @property
    def n(self) -> int:
        return self.values.size


@dataclass
class TestResult:
    test_name: str
    statistic: float
    df: float | tuple | None
    p_value: float
    group_labels: tuple
    group_sizes: tuple = ()
    note: str = ""

    def df_text(self) -> str:
        if self.df is None:
            return ""
        if isinstance(self.df, tuple):
            return ";".join(repr(float(d)) for d in self.df)
        return repr(float(self.df))


@dataclass
class KDECurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n: int = 0
    label: str = ""


def _as_group(g, label="group") -> SampleGroup:
    return g if isinstance(g, SampleGroup) else SampleGroup(label, g)


def _groups(groups) -> list:
    out = [_as_group(g, f"group{i + 1}") for i, g in enumerate(groups)]
    if len(out) < 2:
        raise ValueError(f"need at least 2 groups, got {len(out)}")
    return out


def _clip(p: float) -> float:
    return min(1.0, max(0.0, p))


def welch_t_test(a, b) -> TestResult:
    """Two-sided Welch (unequal-variance) t test with Welch-Satterthwaite df."""
    a, b = _as_group(a, "a"), _as_group(b, "b")
    if a.n < 2 or b.n < 2:
        raise ValueError(f"Welch t test needs n >= 2 per group (got {a.n}, {b.n})")
    ma, mb = a.values.mean(), b.values.mean()
    va, vb = a.values.var(ddof=1), b.values.var(ddof=1)
    labels, sizes = (a.label, b.label), (a.n, b.n)
    if va == 0 and vb == 0:
        if ma == mb:
            return TestResult("welch_t", 0.0, float(a.n + b.n - 2), 1.0, labels, sizes,
                              note="degenerate: both groups constant and equal")
        raise ValueError("both groups have zero variance but different means")
    qa, qb = va / a.n, vb / b.n
    se2 = qa + qb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / (qa * qa / (a.n - 1) + qb * qb / (b.n - 1))
    p = _clip(2.0 * t_sf(abs(t), df))
    return TestResult("welch_t", float(t), float(df), p, labels, sizes)


def pooled_t_test(a, b) -> TestResult:
    """Two-sided Student t test with pooled variance."""
    a, b = _as_group(a, "a"), _as_group(b, "b")
    if a.n < 2 or b.n < 2:
        raise ValueError(f"pooled t test needs n >= 2 per group (got {a.n}, {b.n})")
    df = a.n + b.n - 2
    sp2 = ((a.n - 1) * a.values.var(ddof=1) + (b.n - 1) * b.values.var(ddof=1)) / df
    if sp2 == 0:
        raise ValueError("pooled variance is zero")
    t = (a.values.mean() - b.values.mean()) / math.sqrt(sp2 * (1 / a.n + 1 / b.n))
    return TestResult("pooled_t", float(t), float(df), _clip(2.0 * t_sf(abs(t), df)),
                      (a.label, b.label), (a.n, b.n))


def one_way_anova(groups: Sequence) -> TestResult:
    """One-way ANOVA F test of equal group means."""
    groups = _groups(groups)
    if any(g.n < 2 for g in groups):
        raise ValueError("ANOVA needs n >= 2 in every group")
    k = len(groups)
    N = sum(g.n for g in groups)
    grand = np.concatenate([g.values for g in groups]).mean()
    ss_between = sum(g.n * (g.values.mean() - grand) ** 2 for g in groups)
    ss_within = sum(np.sum((g.values - g.values.mean()) ** 2) for g in groups)
    if ss_within <= 0:
        raise ValueError("within-group variance is zero")
    d1, d2 = k - 1, N - k
    F = (ss_between / d1) / (ss_within / d2)
    return TestResult("anova", float(F), (float(d1), float(d2)), _clip(f_sf(F, d1, d2)),
                      tuple(g.label for g in groups), tuple(g.n for g in groups))


def _midranks(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size)
    _, start, counts = np.unique(sorted_vals, return_index=True, return_counts=True)
    for s, c in zip(start, counts):
        ranks[order[s:s + c]] = s + (c + 1) / 2.0
    return ranks, counts


def kruskal_wallis(groups: Sequence, tie_correction: bool = True) -> TestResult:
    """Kruskal-Wallis H test on mid-ranks, chi-square approximation (df = k - 1)."""
    groups = _groups(groups)
    pooled = np.concatenate([g.values for g in groups])
    N = pooled.size
    if N < 3:
        raise ValueError(f"Kruskal-Wallis needs at least 3 observations, got {N}")
    ranks, ties = _midranks(pooled)
    correction = 1.0 - np.sum(ties.astype(float) ** 3 - ties) / (N ** 3 - N)
    if correction <= 0:
        raise ValueError("all observations are identical")
    bounds = np.cumsum([0] + [g.n for g in groups])
    h = sum(
        ranks[lo:hi].sum() ** 2 / (hi - lo) for lo, hi in zip(bounds[:-1], bounds[1:])
    )
    H = 12.0 / (N * (N + 1)) * h - 3.0 * (N + 1)
    if tie_correction:
        H /= correction
    H = max(H, 0.0)
    df = len(groups) - 1
    return TestResult("kruskal", float(H), float(df), _clip(chi2_sf(H, df)),
                      tuple(g.label for g in groups), tuple(g.n for g in groups))


def ks_two_sample(a, b) -> TestResult:
    """Two-sample Kolmogorov-Smirnov test, asymptotic p-value (rough for n < 10)."""
    a, b = _as_group(a, "a"), _as_group(b, "b")
    xa, xb = np.sort(a.values), np.sort(b.values)
    points = np.concatenate([xa, xb])
    cdf_a = np.searchsorted(xa, points, side="right") / a.n
    cdf_b = np.searchsorted(xb, points, side="right") / b.n
    D = float(np.max(np.abs(cdf_a - cdf_b)))
    lam = D * math.sqrt(a.n * b.n / (a.n + b.n))
    return TestResult("ks", D, None, kolmogorov_sf(lam), (a.label, b.label), (a.n, b.n))


def ks_one_sample(sample, cdf: Callable[[np.ndarray], np.ndarray]) -> TestResult:
    """One-sample KS test of ``sample`` against a continuous ``cdf`` (asymptotic p)."""
    g = _as_group(sample, "sample")
    x = np.sort(g.values)
    n = x.size
    F = np.asarray(cdf(x), dtype=float)
    d_plus = np.max(np.arange(1, n + 1) / n - F)
    d_minus = np.max(F - np.arange(n) / n)
    D = float(max(d_plus, d_minus))
    return TestResult("ks_1samp", D, None, kolmogorov_sf(D * math.sqrt(n)), (g.label,), (n,))


def kde(sample, grid_size: int = 256, span_factor: float = 4.0) -> KDECurve:
    """Gaussian kernel density estimate on an equally spaced grid.

    Bandwidth is the rule of thumb ``1.06 * min(sd, IQR / 1.34) * n^(-1/5)``,
    falling back to ``max(1e-3, 1e-3 * |mean|)`` when that is zero. The grid
    covers the sample range padded by ``span_factor`` bandwidths each side.
    """
    g = _as_group(sample, "sample")
    if g.n < 2:
        raise ValueError(f"KDE needs at least 2 values, got {g.n}")
    if grid_size < 2:
        raise ValueError(f"grid_size must be >= 2, got {grid_size}")
    x = g.values
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(x.std(ddof=1), (q75 - q25) / 1.34)
    h = 1.06 * spread * g.n ** -0.2
    if not h > 0:
        h = max(1e-3, 1e-3 * abs(x.mean()))
    grid = np.linspace(x.min() - span_factor * h, x.max() + span_factor * h, grid_size)
    z = (grid[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (g.n * h * math.sqrt(2 * math.pi))
    return KDECurve(grid, density, float(h), g.n, g.label)


def pairwise(groups: Sequence, test: Callable) -> list:
    """Run a two-sample ``test`` on every unordered pair of groups."""
    groups = _groups(groups)
    return [test(a, b) for a, b in itertools.combinations(groups, 2)]


# --- CSV output --------------------------------------------------------------


def write_test_results(results: Sequence[TestResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test", "groups", "statistic", "df", "p_value"])
        for r in results:
            w.writerow([r.test_name, "|".join(r.group_labels), repr(r.statistic),
                        r.df_text(), repr(r.p_value)])


def write_kde(curve: KDECurve, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# bandwidth={curve.bandwidth!r} n={curve.n} label={curve.label}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "density"])
        for x, d in zip(curve.grid, curve.density):
            w.writerow([repr(float(x)), repr(float(d))])
