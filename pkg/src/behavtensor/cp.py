"""Non-negative CP decomposition fitted by HALS block-coordinate descent."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor3, _full, _values, frobenius_norm, khatri_rao, unfold

__all__ = [
    "CPModel",
    "FitConfig",
    "FitTrace",
    "RestartResult",
    "init_random",
    "hals_sweep",
    "fit",
    "normalize_columns",
    "fit_restarts",
    "write_model",
    "read_model",
]

log = logging.getLogger(__name__)


@dataclass
class CPModel:
    """Weights ``lambda`` and factor matrices ``U`` (I x R), ``V`` (J x R), ``T`` (K x R)."""

    weights: np.ndarray
    factors: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.factors = [np.asarray(f, dtype=float) for f in self.factors]
        if len(self.factors) != 3:
            raise ValueError(f"a CP model needs three factor matrices, got {len(self.factors)}")
        R = self.weights.size
        if R < 1:
            raise ValueError("rank must be at least 1")
        for n, f in enumerate(self.factors, start=1):
            if f.ndim != 2 or f.shape[1] != R or f.shape[0] < 1:
                raise ValueError(f"factor {n} has shape {f.shape}, expected (n, {R})")

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def U(self) -> np.ndarray:
        return self.factors[0]

    @property
    def V(self) -> np.ndarray:
        return self.factors[1]

    @property
    def T(self) -> np.ndarray:
        return self.factors[2]

    def copy(self) -> "CPModel":
        return CPModel(self.weights.copy(), [f.copy() for f in self.factors], dict(self.meta))


@dataclass
class FitConfig:
    rank: int
    max_sweeps: int = 500
    tol: float = 1e-8
    seed: int = 0
    n_restarts: int = 10
    epsilon_div: float = 1e-12

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank}")
        if self.max_sweeps < 1:
            raise ValueError(f"max_sweeps must be >= 1, got {self.max_sweeps}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.n_restarts < 1:
            raise ValueError(f"n_restarts must be >= 1, got {self.n_restarts}")
        if not self.epsilon_div > 0:
            raise ValueError(f"epsilon_div must be positive, got {self.epsilon_div}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass
class FitTrace:
    """Relative error before the first sweep (``errors[0]``) and after each sweep."""

    errors: list
    sweeps_run: int
    converged: bool
    seed: int
    reseeds: list = field(default_factory=list)

    @property
    def final_error(self) -> float:
        return self.errors[-1]


@dataclass
class RestartResult:
    seed: int
    core_consistency: float
    relative_error: float
    sweeps_run: int
    converged: bool
    error: str | None = None


def init_random(dims, rank: int, seed: int) -> CPModel:
    """Factor entries i.i.d. uniform on (0, 1] from numpy's PCG64 stream for ``seed``.

    Factors are drawn in mode order U, V, T; weights start at one.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    # random() is on [0, 1); reflect onto (0, 1]
    factors = [1.0 - rng.random((d, rank)) for d in dims]
    return CPModel(np.ones(rank), factors)


def _grams(factors):
    return [f.T @ f for f in factors]


def _reseed_partners(factors, mode_idx, r, rng):
    # With column r of one mode at zero, component r contributes nothing, so
    # the partner columns can be redrawn without changing the objective.
    for n, f in enumerate(factors):
        if n == mode_idx:
            continue
        norms = np.linalg.norm(f, axis=0)
        live = norms[norms > 0]
        scale = live.mean() if live.size else 1.0
        col = 1.0 - rng.random(f.shape[0])
        f[:, r] = col * (scale / np.linalg.norm(col))


def _sweep(unfoldings, factors, eps, rng):
    """One in-place HALS pass over modes 1, 2, 3.

    Returns the reseed events and the mode-3 MTTKRP, which stays valid after
    the final update because it only depends on ``U`` and ``V``.
    """
    events = []
    grams = _grams(factors)
    R = factors[0].shape[1]
    for n in range(3):
        a, b = [m for m in range(3) if m != n]
        # unfold(x, n+1) pairs with khatri_rao(later, earlier)
        M = unfoldings[n] @ khatri_rao(factors[b], factors[a])
        G = grams[a] * grams[b]
        A = factors[n]
        for r in range(R):
            step = (M[:, r] - A @ G[:, r]) / max(G[r, r], eps)
            A[:, r] = np.maximum(0.0, A[:, r] + step)
            if not A[:, r].any():
                _reseed_partners(factors, n, r, rng)
                events.append((n + 1, r))
                grams = _grams(factors)
                G = grams[a] * grams[b]
        grams[n] = A.T @ A
    return events, M


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values; impute missing cells first")


def _absorbed(model: CPModel):
    factors = [f.copy() for f in model.factors]
    factors[0] = factors[0] * model.weights
    return factors


def hals_sweep(x, model: CPModel, epsilon_div: float = 1e-12, rng=None) -> CPModel:
    """Apply one HALS sweep and return the updated model (inputs untouched).

    The weights are folded into ``U`` first, so the result has unit weights.
    ``rng`` feeds the degenerate-column reseed; defaults to a fixed stream.
    """
    arr = _values(x)
    _check_finite(arr)
    if arr.shape != model.dims:
        raise ValueError(f"tensor shape {arr.shape} differs from model dims {model.dims}")
    if rng is None:
        rng = np.random.default_rng(0)
    factors = _absorbed(model)
    unfoldings = [unfold(arr, n) for n in (1, 2, 3)]
    events, _ = _sweep(unfoldings, factors, epsilon_div, rng)
    out = CPModel(np.ones(model.rank), factors, dict(model.meta))
    if events:
        out.meta["reseeds"] = events
    return out


def _rel_err(arr, norm, factors):
    return frobenius_norm(arr - _full(np.ones(factors[0].shape[1]), factors)) / norm


# below this squared relative error the Gram expansion loses too many digits
_EXACT_BELOW = 1e-6


def _fast_rel_err(arr, norm, factors, m3):
    u, v, t = factors
    inner = np.sum(m3 * t)
    fit_sq = np.sum((u.T @ u) * (v.T @ v) * (t.T @ t))
    sq = (norm * norm - 2.0 * inner + fit_sq) / (norm * norm)
    if sq < _EXACT_BELOW:
        return _rel_err(arr, norm, factors)
    return float(np.sqrt(sq))


def fit(x, cfg: FitConfig, seed: int | None = None) -> tuple[CPModel, FitTrace]:
    """Fit a rank-``cfg.rank`` non-negative CP model from a random start.

    Sweeps stop when the relative error changes by less than ``cfg.tol``
    (relative to its previous value) or after ``cfg.max_sweeps`` sweeps.
    The returned model is column-normalized.
    """
    arr = _values(x)
    if isinstance(x, Tensor3) and not x.fully_observed:
        raise ValueError(f"tensor has {x.n_missing} unobserved cells; impute before fitting")
    _check_finite(arr)
    norm = frobenius_norm(arr)
    if norm == 0:
        raise ValueError("cannot fit a zero tensor")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    init = init_random(arr.shape, cfg.rank, seed)
    factors = _absorbed(init)
    unfoldings = [unfold(arr, n) for n in (1, 2, 3)]

    errors = [_rel_err(arr, norm, factors)]
    reseeds = []
    converged = False
    for sweep in range(1, cfg.max_sweeps + 1):
        events, m3 = _sweep(unfoldings, factors, cfg.epsilon_div, rng)
        for mode, r in events:
            reseeds.append((sweep, mode, r))
            log.debug("seed %d sweep %d: column %d of mode %d collapsed, partners reseeded",
                      seed, sweep, r, mode)
        err = _fast_rel_err(arr, norm, factors, m3)
        prev = errors[-1]
        errors.append(err)
        if err == 0.0 or abs(prev - err) < cfg.tol * prev:
            converged = True
            break

    model = normalize_columns(CPModel(np.ones(cfg.rank), factors))
    trace = FitTrace(errors, len(errors) - 1, converged, seed, reseeds)
    model.meta.update(seed=seed, sweeps=trace.sweeps_run, relative_error=errors[-1])
    return model, trace


def normalize_columns(model: CPModel) -> CPModel:
    """Move column norms into the weights and order components by descending weight.

    Zero columns stay zero (and give that component a zero weight).
    """
    weights = model.weights.copy()
    factors = []
    for f in model.factors:
        norms = np.linalg.norm(f, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        factors.append(f / safe)
        weights = weights * norms
    order = np.argsort(-weights, kind="stable")
    return CPModel(weights[order], [f[:, order] for f in factors], dict(model.meta))


def _restart(args):
    arr, cfg, seed = args
    from .diagnostics import corcondia

    model, trace = fit(arr, cfg, seed=seed)
    try:
        cc = corcondia(arr, model)
        problem = None
    except ValueError as exc:
        cc, problem = -math.inf, str(exc)
    model.meta["core_consistency"] = cc
    result = RestartResult(seed, cc, trace.final_error, trace.sweeps_run, trace.converged, problem)
    return model, result


def fit_restarts(x, cfg: FitConfig, n_jobs: int = 1) -> tuple[CPModel, list]:
    """Fit with seeds ``cfg.seed .. cfg.seed + n_restarts - 1`` and keep the best.

    The winner has the highest core consistency; ties go to the lower relative
    error, then the lower seed. A restart whose core consistency cannot be
    evaluated (rank-deficient factors) scores ``-inf``.
    """
    arr = _values(x)
    if isinstance(x, Tensor3) and not x.fully_observed:
        raise ValueError(f"tensor has {x.n_missing} unobserved cells; impute before fitting")
    jobs = [(arr, cfg, cfg.seed + i) for i in range(cfg.n_restarts)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(_restart, jobs))
    else:
        outcomes = [_restart(job) for job in jobs]
    results = [res for _, res in outcomes]
    for res in results:
        if res.error:
            log.warning("restart seed %d: core consistency unavailable (%s)", res.seed, res.error)
    best = min(
        range(len(outcomes)),
        key=lambda i: (-results[i].core_consistency, results[i].relative_error, results[i].seed),
    )
    return outcomes[best][0], results


# --- model file --------------------------------------------------------------

_FACTOR_NAMES = ("U", "V", "T")


def _fmt(v) -> str:
    return repr(float(v))


def write_model(model: CPModel, path, labels=None, meta=None) -> None:
    """Write a model as ``key = value`` lines followed by one CSV block per factor.

    Layout::

        # behavtensor cp-model v1
        rank = 3
        lambda = 4.2,1.3,0.7
        dims = 48,85,66
        seed = 7            (any extra metadata keys follow)
        [U]
        label,comp1,comp2,comp3
        alice,0.12,0.03,0.2
        ...

    ``labels`` is an optional triple of row-label lists (individuals,
    variables, days); row indices are used when absent.
    """
    info = dict(model.meta)
    info.update(meta or {})
    info.pop("reseeds", None)
    lines = [
        "# behavtensor cp-model v1",
        f"rank = {model.rank}",
        "lambda = " + ",".join(_fmt(w) for w in model.weights),
        "dims = " + ",".join(str(d) for d in model.dims),
    ]
    for key in sorted(info):
        value = info[key]
        if isinstance(value, float):
            value = _fmt(value)
        lines.append(f"{key} = {value}")
    header = "label," + ",".join(f"comp{r + 1}" for r in range(model.rank))
    for n, (name, f) in enumerate(zip(_FACTOR_NAMES, model.factors)):
        rows = labels[n] if labels is not None else range(f.shape[0])
        rows = list(rows)
        if len(rows) != f.shape[0]:
            raise ValueError(f"{len(rows)} labels for factor {name} with {f.shape[0]} rows")
        lines.append(f"[{name}]")
        lines.append(header)
        for lab, row in zip(rows, f):
            lines.append(f"{lab}," + ",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_model(path) -> tuple[CPModel, list]:
    """Read a model file; returns the model (metadata in ``model.meta``) and row labels."""
    info: dict = {}
    blocks: dict = {}
    current = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in _FACTOR_NAMES:
                    raise ValueError(f"{path}:{lineno}: unknown block {line}")
                blocks[current] = []
                continue
            if current is None:
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                info[key] = value
            else:
                cells = line.split(",")
                if cells[0] == "label":
                    continue
                try:
                    blocks[current].append((cells[0], [float(c) for c in cells[1:]]))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric factor entry") from None
    missing = [n for n in _FACTOR_NAMES if n not in blocks]
    if missing or "lambda" not in info:
        raise ValueError(f"{path}: incomplete model file (missing {missing or 'lambda'})")
    weights = [float(v) for v in info.pop("lambda").split(",")]
    rank = int(info.pop("rank"))
    info.pop("dims", None)
    factors, labels = [], []
    for name in _FACTOR_NAMES:
        labels.append([lab for lab, _ in blocks[name]])
        factors.append(np.array([row for _, row in blocks[name]], dtype=float).reshape(-1, rank))
    meta = {k: _parse_scalar(v) for k, v in info.items()}
    return CPModel(weights, factors, meta), labels
