"""Core consistency, rank selection, factor matching and planted-structure data."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cp import CPModel, FitConfig, fit, normalize_columns
from .tensor import Tensor3, _values, frobenius_norm, reconstruct

__all__ = [
    "RankDeficientError",
    "RankScan",
    "SynthSpec",
    "corcondia",
    "rank_scan",
    "select_rank",
    "factor_match_score",
    "gen_synthetic",
    "write_rank_scan",
    "read_rank_scan",
]

log = logging.getLogger(__name__)

PINV_RTOL = 1e-12


class RankDeficientError(ArithmeticError, ValueError):
    """A rescaled factor matrix has numerical rank below the model rank."""


def _pinv(f: np.ndarray, mode: int) -> np.ndarray:
    u, s, vt = np.linalg.svd(f, full_matrices=False)
    keep = s > PINV_RTOL * (s[0] if s.size else 0.0)
    if np.count_nonzero(keep) < f.shape[1]:
        raise RankDeficientError(
            f"rescaled factor of mode {mode} is rank deficient "
            f"(numerical rank {np.count_nonzero(keep)} < {f.shape[1]})"
        )
    return (vt.T / s) @ u.T


def _scaled_factors(model: CPModel):
    # lambda^(1/3) into every mode makes the ideal core the superdiagonal of ones
    scale = np.cbrt(model.weights)
    return [f * scale for f in model.factors]


def core_tensor(x, model: CPModel) -> np.ndarray:
    """Least-squares Tucker core for the model's (weight-rescaled) factors."""
    arr = _values(x)
    if arr.shape != model.dims:
        raise ValueError(f"tensor shape {arr.shape} differs from model dims {model.dims}")
    pinvs = [_pinv(f, n) for n, f in enumerate(_scaled_factors(model), start=1)]
    return np.einsum("ijk,ai,bj,ck->abc", arr, *pinvs, optimize=True)


def corcondia(x, model: CPModel) -> float:
    """Core consistency: ``100 * (1 - sum((G - superdiag)^2) / R)``.

    100 means the Tucker core is exactly superdiagonal; the value is
    unbounded below.
    """
    G = core_tensor(x, model)
    R = model.rank
    ideal = np.zeros((R, R, R))
    ideal[np.arange(R), np.arange(R), np.arange(R)] = 1.0
    return float(100.0 * (1.0 - np.sum((G - ideal) ** 2) / R))


# --- rank scan ---------------------------------------------------------------


@dataclass
class RankScan:
    ranks: list
    mean_cc: list
    std_cc: list  # None where every sample was clamped
    n_init: list
    samples: dict = field(default_factory=dict)  # rank -> raw (unclamped) values
    failures: dict = field(default_factory=dict)  # rank -> [(seed, message)]

    def rows(self):
        return list(zip(self.ranks, self.mean_cc, self.std_cc, self.n_init))


def _scan_cell(args):
    arr, rank, seed, cfg_kw = args
    cfg = FitConfig(rank=rank, seed=seed, n_restarts=1, **cfg_kw)
    try:
        model, _ = fit(arr, cfg)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return None, str(exc)
    try:
        return corcondia(arr, model), None
    except RankDeficientError:
        # collinear or collapsed components: the core is unbounded, i.e. the
        # limit of ever more negative consistency, which clamps to zero
        return -math.inf, None


def rank_scan(x, ranks, n_init: int, seed: int, n_jobs: int = 1, **fit_kw) -> RankScan:
    """Mean and spread of clamped core consistency over ``n_init`` fits per rank.

    Cell (rank, i) is fitted with seed ``seed + i``. Negative core
    consistencies are set to zero before averaging; the standard deviation
    (population form) is left out for ranks where every sample was clamped.
    A fit whose factors are numerically rank deficient scores ``-inf``. Fits
    that raise are excluded with a warning. Extra keyword arguments go to
    :class:`FitConfig`.
    """
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ValueError("ranks must be non-empty")
    if any(b <= a for a, b in zip(ranks, ranks[1:])) or ranks[0] < 1:
        raise ValueError(f"ranks must be ascending positive integers, got {ranks}")
    if n_init < 1:
        raise ValueError(f"n_init must be >= 1, got {n_init}")
    arr = _values(x)
    if isinstance(x, Tensor3) and not x.fully_observed:
        raise ValueError(f"tensor has {x.n_missing} unobserved cells; impute before scanning")
    jobs = [(arr, r, seed + i, fit_kw) for r in ranks for i in range(n_init)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(_scan_cell, jobs))
    else:
        outcomes = [_scan_cell(job) for job in jobs]

    scan = RankScan([], [], [], [])
    for idx, r in enumerate(ranks):
        cells = outcomes[idx * n_init:(idx + 1) * n_init]
        raw, failed = [], []
        for i, (cc, problem) in enumerate(cells):
            if problem is None:
                raw.append(cc)
            else:
                failed.append((seed + i, problem))
                warnings.warn(f"rank {r}, seed {seed + i}: fit excluded ({problem})", stacklevel=2)
        scan.samples[r] = raw
        if failed:
            scan.failures[r] = failed
        if not raw:
            continue
        clamped = np.maximum(np.asarray(raw), 0.0)
        scan.ranks.append(r)
        scan.mean_cc.append(float(clamped.mean()))
        scan.std_cc.append(None if np.all(np.asarray(raw) <= 0) else float(clamped.std()))
        scan.n_init.append(len(raw))
    return scan


def select_rank(scan: RankScan) -> int:
    """Interior rank with the most negative second difference of ``mean_cc``.

    Ties resolve to the smaller rank.
    """
    ranks = list(scan.ranks)
    c = np.asarray(scan.mean_cc, dtype=float)
    if len(ranks) < 3:
        raise ValueError("rank selection needs at least 3 scanned ranks")
    if any(b != a + 1 for a, b in zip(ranks, ranks[1:])):
        raise ValueError(f"scanned ranks must be consecutive, got {ranks}")
    second = c[2:] - 2 * c[1:-1] + c[:-2]
    return ranks[1 + int(np.argmin(second))]


def write_rank_scan(scan: RankScan, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "mean_cc", "std_cc", "n_init"])
        for r, m, s, n in scan.rows():
            w.writerow([r, repr(m), "" if s is None else repr(s), n])


def read_rank_scan(path) -> RankScan:
    scan = RankScan([], [], [], [])
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            scan.ranks.append(int(row["rank"]))
            scan.mean_cc.append(float(row["mean_cc"]))
            scan.std_cc.append(float(row["std_cc"]) if row["std_cc"] else None)
            scan.n_init.append(int(row["n_init"]))
    return scan


# --- factor match ------------------------------------------------------------

MAX_FMS_RANK = 8


def factor_match_score(a: CPModel, b: CPModel) -> float:
    """Best mean over components of the product of per-mode |cosines|.

    Permutations are enumerated exhaustively; weights are ignored. A zero
    column contributes a cosine of zero.
    """
    if a.rank != b.rank:
        raise ValueError(f"rank mismatch: {a.rank} vs {b.rank}")
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    R = a.rank
    if R > MAX_FMS_RANK:
        raise ValueError(f"factor match score enumerates permutations; rank {R} > {MAX_FMS_RANK}")
    sim = np.ones((R, R))
    for fa, fb in zip(a.factors, b.factors):
        na = np.linalg.norm(fa, axis=0)
        nb = np.linalg.norm(fb, axis=0)
        denom = np.outer(na, nb)
        cos = np.divide(np.abs(fa.T @ fb), denom, out=np.zeros((R, R)), where=denom > 0)
        sim *= cos
    best = max(sim[np.arange(R), list(p)].sum() for p in itertools.permutations(range(R)))
    return float(min(best / R, 1.0))


# --- synthetic data ----------------------------------------------------------


@dataclass
class SynthSpec:
    dims: tuple
    rank: int
    noise_snr_db: float | None = None
    missing_frac: float = 0.0
    seed: int = 0
    factor_sparsity: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not 0 <= self.missing_frac < 1:
            raise ValueError(f"missing_frac must lie in [0, 1), got {self.missing_frac}")
        if not 0 <= self.factor_sparsity < 1:
            raise ValueError(f"factor_sparsity must lie in [0, 1), got {self.factor_sparsity}")
        if min(self.dims) < self.rank:
            warnings.warn(f"rank {self.rank} exceeds a dimension of {self.dims}", stacklevel=3)


def gen_synthetic(spec: SynthSpec):
    """Draw a planted non-negative CP tensor.

    Returns ``(dataset, truth)`` where ``dataset`` is a
    :class:`~behavtensor.featurize.TensorDataset` with generic axis labels.
    Masked cells hold NaN.
    """
    from .featurize import TensorDataset

    rng = np.random.default_rng(spec.seed)
    factors = []
    for d in spec.dims:
        f = 1.0 - rng.random((d, spec.rank))
        if spec.factor_sparsity > 0:
            f[rng.random((d, spec.rank)) < spec.factor_sparsity] = 0.0
            # a column zeroed entirely would drop the planted rank
            for r in np.flatnonzero(~f.any(axis=0)):
                f[rng.integers(d), r] = 1.0 - rng.random()
        factors.append(f)
    weights = 1.0 + 9.0 * (1.0 - rng.random(spec.rank))
    unit = normalize_columns(CPModel(np.ones(spec.rank), factors))
    truth = CPModel(weights, unit.factors)
    values = reconstruct(truth).values
    if spec.noise_snr_db is not None:
        noise = rng.standard_normal(values.shape)
        target = frobenius_norm(values) / 10 ** (spec.noise_snr_db / 20)
        values = values + noise * (target / frobenius_norm(noise))
        values = np.maximum(values, 0.0)
    mask = np.ones(spec.dims, dtype=bool)
    n_missing = math.floor(spec.missing_frac * values.size)
    if n_missing:
        cells = rng.choice(values.size, size=n_missing, replace=False)
        mask.reshape(-1)[cells] = False
        values = values.copy()
        values[~mask] = np.nan
    I, J, K = spec.dims
    ds = TensorDataset(
        Tensor3(values, mask),
        individuals=[f"u{i:03d}" for i in range(I)],
        variables=[f"var{j:03d}" for j in range(J)],
        days=list(range(K)),
    )
    truth.meta.update(seed=spec.seed)
    return ds, truth
