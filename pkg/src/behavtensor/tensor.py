"""Dense 3-way tensors and the multilinear kernels used by CP fitting.

Unfoldings follow the Kolda-Bader convention: the earlier of the two
non-unfolded modes varies fastest along the columns, so that

    X_(1) = U diag(lambda) (T kr V)^T

with ``kr`` the Khatri-Rao product defined in :func:`khatri_rao`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .cp import CPModel

__all__ = [
    "Tensor3",
    "unfold",
    "refold",
    "khatri_rao",
    "mttkrp",
    "frobenius_norm",
    "reconstruct",
    "relative_error",
    "read_tensor",
    "write_tensor",
]


@dataclass
class Tensor3:
    """Dense I x J x K array with an observation mask (True = observed)."""

    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError(f"Tensor3 needs a 3-way array, got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ValueError(f"all dimensions must be positive, got {self.values.shape}")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ValueError(
                    f"mask shape {self.mask.shape} differs from values shape {self.values.shape}"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_missing(self) -> int:
        return int(self.mask.size - np.count_nonzero(self.mask))

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    def copy(self) -> "Tensor3":
        return Tensor3(self.values.copy(), self.mask.copy())


def _values(x) -> np.ndarray:
    if isinstance(x, Tensor3):
        return x.values
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-way array, got shape {arr.shape}")
    return arr


def _check_mode(mode) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be one of 1, 2, 3 (got {mode!r})")
    return mode


# axis order placed first for each unfolding; remaining axes keep their order
_UNFOLD_AXES = {1: (0, 1, 2), 2: (1, 0, 2), 3: (2, 0, 1)}


def unfold(x, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization (1-based mode numbers).

    Mode 1 gives an I x JK matrix with entry (i, j, k) at column ``j + J*k``;
    mode 2 puts (i, j, k) at column ``i + I*k``; mode 3 at ``i + I*j``.
    """
    mode = _check_mode(mode)
    arr = _values(x)
    moved = arr.transpose(_UNFOLD_AXES[mode])
    return moved.reshape(moved.shape[0], -1, order="F")


def refold(mat: np.ndarray, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    mode = _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    axes = _UNFOLD_AXES[mode]
    moved_shape = tuple(dims[a] for a in axes)
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (moved_shape[0], moved_shape[1] * moved_shape[2]):
        raise ValueError(f"matrix shape {mat.shape} does not match mode-{mode} unfolding of {dims}")
    moved = mat.reshape(moved_shape, order="F")
    return moved.transpose(np.argsort(axes))


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; row ``i*n + j`` holds ``a[i] * b[j]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("khatri_rao expects two matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def mttkrp(x, factors, mode: int) -> np.ndarray:
    """Matricized tensor times Khatri-Rao product for one mode.

    ``factors`` is either the full ``[U, V, T]`` list (the entry for ``mode``
    is ignored) or the two factors of the other modes in increasing mode
    order. Mode 1 returns ``X_(1) (T kr V)``.
    """
    mode = _check_mode(mode)
    arr = _values(x)
    factors = [np.asarray(f, dtype=float) for f in factors]
    if len(factors) == 3:
        others = [f for n, f in enumerate(factors, start=1) if n != mode]
    elif len(factors) == 2:
        others = factors
    else:
        raise ValueError("mttkrp needs two or three factor matrices")
    other_modes = [n for n in (1, 2, 3) if n != mode]
    ranks = {f.shape[1] for f in others}
    if len(ranks) != 1:
        raise ValueError("factor matrices must share the same column count")
    for n, f in zip(other_modes, others):
        if f.ndim != 2 or f.shape[0] != arr.shape[n - 1]:
            raise ValueError(
                f"factor for mode {n} has shape {f.shape}, expected ({arr.shape[n - 1]}, R)"
            )
    earlier, later = others
    return unfold(arr, mode) @ khatri_rao(later, earlier)


def frobenius_norm(x) -> float:
    """Square root of the sum of squares of all stored entries (mask ignored)."""
    arr = _values(x)
    return float(np.sqrt(np.sum(arr * arr)))


def _full(weights, factors) -> np.ndarray:
    u, v, t = factors
    mat = (u * weights) @ khatri_rao(t, v).T
    return refold(mat, 1, (u.shape[0], v.shape[0], t.shape[0]))


def reconstruct(model: "CPModel") -> Tensor3:
    """Dense tensor sum_r lambda_r u_r o v_r o t_r."""
    return Tensor3(_full(model.weights, model.factors))


def relative_error(x, model: "CPModel") -> float:
    """||x - reconstruct(model)||_F / ||x||_F."""
    arr = _values(x)
    if arr.shape != model.dims:
        raise ValueError(f"tensor shape {arr.shape} differs from model dims {model.dims}")
    norm = frobenius_norm(arr)
    if norm == 0:
        raise ValueError("relative error is undefined for a zero-norm tensor")
    return frobenius_norm(arr - _full(model.weights, model.factors)) / norm


# --- text format -------------------------------------------------------------


def write_tensor(x: Tensor3, path) -> None:
    """Write ``# dims I J K`` followed by one ``i,j,k,value`` line per entry.

    Unobserved cells are written with the value ``NA``. Entries are emitted
    with i varying fastest, then j, then k.
    """
    I, J, K = x.dims
    lines = [f"# dims {I} {J} {K}"]
    vals, mask = x.values, x.mask
    for k in range(K):
        for j in range(J):
            for i in range(I):
                v = repr(float(vals[i, j, k])) if mask[i, j, k] else "NA"
                lines.append(f"{i},{j},{k},{v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tensor(path) -> Tensor3:
    """Parse the format written by :func:`write_tensor` (entries in any order)."""
    dims = None
    values = mask = seen = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "dims":
                    if dims is not None:
                        raise ValueError(f"{path}:{lineno}: duplicate dims header")
                    try:
                        dims = tuple(int(p) for p in parts[1:])
                    except ValueError:
                        raise ValueError(f"{path}:{lineno}: malformed dims header") from None
                    if len(dims) != 3 or min(dims) < 1:
                        raise ValueError(f"{path}:{lineno}: dims must be three positive integers")
                    values = np.zeros(dims)
                    mask = np.ones(dims, dtype=bool)
                    seen = np.zeros(dims, dtype=bool)
                continue
            if dims is None:
                raise ValueError(f"{path}:{lineno}: entry before '# dims' header")
            fields = line.split(",")
            if len(fields) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'i,j,k,value', got {line!r}")
            try:
                i, j, k = (int(f) for f in fields[:3])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer index in {line!r}") from None
            if not (0 <= i < dims[0] and 0 <= j < dims[1] and 0 <= k < dims[2]):
                raise ValueError(f"{path}:{lineno}: index ({i},{j},{k}) outside dims {dims}")
            if seen[i, j, k]:
                raise ValueError(f"{path}:{lineno}: duplicate entry ({i},{j},{k})")
            seen[i, j, k] = True
            token = fields[3].strip()
            if token == "NA":
                values[i, j, k] = np.nan
                mask[i, j, k] = False
            else:
                try:
                    values[i, j, k] = float(token)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad value {token!r}") from None
    if dims is None:
        raise ValueError(f"{path}: missing '# dims I J K' header")
    if not seen.all():
        i, j, k = np.argwhere(~seen)[0]
        raise ValueError(f"{path}: {np.count_nonzero(~seen)} entries absent, first ({i},{j},{k})")
    return Tensor3(values, mask)
