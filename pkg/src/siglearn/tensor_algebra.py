"""Exact arithmetic in the degree-k truncated tensor algebra over c channels.

Coefficients are stored flat with per-level offsets: level i holds the c^i
coefficients of the i-fold tensor power in row-major multi-index order (the
leftmost tensor factor varies slowest).  All operations are pure functions;
inputs are never mutated.

Group-like elements carry scalar part exactly 1 (signatures and their
products); Lie-like elements carry scalar part exactly 0 (generator outputs,
logarithms).  The scalar coefficient itself is the flag — no separate
bookkeeping is stored on the tensor.

The ``*_flat`` functions are the batched engine: they act on arrays whose
last axis is the flat coefficient vector, broadcasting over any leading axes.
:class:`TruncTensor` methods wrap them for the single-element case.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

from .errors import ConfigError, DomainError, ShapeMismatchError

__all__ = [
    "TruncTensor",
    "level_sizes",
    "level_offsets",
    "flat_size",
    "level_slice",
    "coefficient_weights",
    "identity",
    "zero",
    "trunc_product",
    "trunc_exp",
    "trunc_log",
    "group_inverse",
    "graded_inner",
    "add",
    "scale",
    "project_to_degree",
    "product_flat",
    "exp_flat",
    "log_flat",
    "inverse_flat",
    "inner_flat",
    "project_flat",
    "identity_flat",
    "left_mult_matrix",
    "right_mult_matrix",
    "exp_jacobian",
    "inverse_jacobian",
    "tensor_to_csv_row",
    "tensor_from_csv_row",
]


# ---------------------------------------------------------------------------
# shape bookkeeping


@lru_cache(maxsize=None)
def level_sizes(channels: int, degree: int) -> tuple[int, ...]:
    """Coefficient counts per level: (1, c, c^2, ..., c^k)."""
    _check_dims(channels, degree)
    return tuple(channels**i for i in range(degree + 1))


@lru_cache(maxsize=None)
def level_offsets(channels: int, degree: int) -> tuple[int, ...]:
    sizes = level_sizes(channels, degree)
    offs = [0]
    for s in sizes:
        offs.append(offs[-1] + s)
    return tuple(offs)


def flat_size(channels: int, degree: int) -> int:
    """Total flat length, sum over levels of c^i."""
    return level_offsets(channels, degree)[-1]


def level_slice(channels: int, degree: int, level: int) -> slice:
    offs = level_offsets(channels, degree)
    return slice(offs[level], offs[level + 1])


def _check_dims(channels: int, degree: int) -> None:
    if channels < 1 or degree < 1:
        raise ConfigError(
            f"channels and degree must be >= 1, got c={channels}, k={degree}"
        )


def coefficient_weights(channels: int, degree: int, level_weights) -> np.ndarray:
    """Expand per-level weights into a per-coefficient weight vector."""
    w = np.asarray(level_weights, dtype=float)
    if w.shape != (degree + 1,):
        raise ShapeMismatchError(
            f"level_weights must have length {degree + 1}, got {w.shape}"
        )
    if np.any(w <= 0):
        raise DomainError("level_weights must all be positive")
    return np.repeat(w, level_sizes(channels, degree))


def unit_level_weights(degree: int) -> np.ndarray:
    return np.ones(degree + 1)


def factorial_level_weights(degree: int) -> np.ndarray:
    """Factorial-decay weighting 1/i!, the conditioning-friendly option."""
    return np.array([1.0 / factorial(i) for i in range(degree + 1)])


# ---------------------------------------------------------------------------
# batched flat-array engine


def identity_flat(channels: int, degree: int) -> np.ndarray:
    out = np.zeros(flat_size(channels, degree))
    out[0] = 1.0
    return out


def product_flat(channels: int, degree: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Truncated tensor product on flat arrays, broadcasting leading axes.

    Level n of the result is sum over i+j=n of a_i (x) b_j; terms above the
    truncation degree are dropped.
    """
    offs = level_offsets(channels, degree)
    sizes = level_sizes(channels, degree)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    batch = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    out = np.zeros(batch + (offs[-1],))
    for n in range(degree + 1):
        acc = out[..., offs[n] : offs[n + 1]]
        for i in range(n + 1):
            j = n - i
            ai = a[..., offs[i] : offs[i + 1]]
            bj = b[..., offs[j] : offs[j + 1]]
            if i == 0:
                acc += ai * bj
            elif j == 0:
                acc += ai * bj
            else:
                blk = np.einsum("...i,...j->...ij", ai, bj)
                acc += blk.reshape(batch + (sizes[n],))
    return out


def exp_flat(channels: int, degree: int, x: np.ndarray) -> np.ndarray:
    """Truncated exponential of a Lie-like flat array (scalar part ignored)."""
    x = np.asarray(x, dtype=float)
    out = identity_flat(channels, degree) + np.zeros_like(x)
    term = x.copy()
    term[..., 0] = 0.0
    out = out + term
    for i in range(2, degree + 1):
        term = product_flat(channels, degree, term, x) / i
        out = out + term
    return out


def log_flat(channels: int, degree: int, g: np.ndarray) -> np.ndarray:
    """Truncated logarithm of a group-like flat array."""
    g = np.asarray(g, dtype=float)
    u = g.copy()
    u[..., 0] = 0.0  # u = g - 1
    out = u.copy()
    term = u
    for i in range(2, degree + 1):
        term = product_flat(channels, degree, term, u)
        out = out + ((-1) ** (i + 1)) * term / i
    return out


def inverse_flat(channels: int, degree: int, g: np.ndarray) -> np.ndarray:
    """Group inverse via the finite geometric series, exact in truncation."""
    g = np.asarray(g, dtype=float)
    u = -g
    u[..., 0] = 0.0  # u = 1 - g
    out = identity_flat(channels, degree) + u
    term = u
    for _ in range(2, degree + 1):
        term = product_flat(channels, degree, term, u)
        out = out + term
    return out


def inner_flat(
    channels: int,
    degree: int,
    a: np.ndarray,
    b: np.ndarray,
    level_weights,
) -> np.ndarray:
    w = coefficient_weights(channels, degree, level_weights)
    return np.einsum("...i,...i->...", np.asarray(a) * w, np.asarray(b))


def project_flat(channels: int, degree: int, a: np.ndarray, r: int) -> np.ndarray:
    if not 0 <= r <= degree:
        raise DomainError(f"projection degree r={r} outside [0, {degree}]")
    out = np.array(a, dtype=float, copy=True)
    out[..., level_offsets(channels, degree)[r + 1] :] = 0.0
    return out


# ---------------------------------------------------------------------------
# multiplication operators and series Jacobians (flat matrices)


def left_mult_matrix(channels: int, degree: int, a: np.ndarray) -> np.ndarray:
    """Matrix L with L @ flat(h) = flat(a (x) h)."""
    offs = level_offsets(channels, degree)
    n_flat = offs[-1]
    out = np.zeros((n_flat, n_flat))
    for n in range(degree + 1):
        for i in range(n + 1):
            j = n - i
            ai = np.asarray(a)[offs[i] : offs[i + 1]]
            block = np.kron(ai.reshape(-1, 1), np.eye(channels**j))
            out[offs[n] : offs[n + 1], offs[j] : offs[j + 1]] += block
    return out


def right_mult_matrix(channels: int, degree: int, b: np.ndarray) -> np.ndarray:
    """Matrix R with R @ flat(h) = flat(h (x) b)."""
    offs = level_offsets(channels, degree)
    n_flat = offs[-1]
    out = np.zeros((n_flat, n_flat))
    for n in range(degree + 1):
        for i in range(n + 1):
            j = n - i
            bj = np.asarray(b)[offs[j] : offs[j + 1]]
            block = np.kron(np.eye(channels**i), bj.reshape(-1, 1))
            out[offs[n] : offs[n + 1], offs[i] : offs[i + 1]] += block
    return out


def _tensor_powers(channels: int, degree: int, x: np.ndarray, top: int) -> list[np.ndarray]:
    powers = [identity_flat(channels, degree)]
    for _ in range(top):
        powers.append(product_flat(channels, degree, powers[-1], x))
    return powers


def exp_jacobian(channels: int, degree: int, x: np.ndarray) -> np.ndarray:
    """Derivative of the truncated exponential at the Lie-like point x.

    Returns the flat matrix D with D @ flat(h) equal to the directional
    derivative of exp along h: sum_i (1/i!) sum_{a+b=i-1} x^a (x) h (x) x^b.
    """
    powers = _tensor_powers(channels, degree, x, degree - 1)
    n_flat = flat_size(channels, degree)
    out = np.zeros((n_flat, n_flat))
    for i in range(1, degree + 1):
        coeff = 1.0 / factorial(i)
        for a in range(i):
            b = i - 1 - a
            out += coeff * left_mult_matrix(channels, degree, powers[a]) @ right_mult_matrix(
                channels, degree, powers[b]
            )
    return out


def inverse_jacobian(channels: int, degree: int, g: np.ndarray) -> np.ndarray:
    """Derivative of the group inverse at the group-like point g."""
    u = -np.asarray(g, dtype=float)
    u = u.copy()
    u[0] = 0.0
    powers = _tensor_powers(channels, degree, u, degree - 1)
    n_flat = flat_size(channels, degree)
    out = np.zeros((n_flat, n_flat))
    for i in range(1, degree + 1):
        for a in range(i):
            b = i - 1 - a
            out -= left_mult_matrix(channels, degree, powers[a]) @ right_mult_matrix(
                channels, degree, powers[b]
            )
    return out


# ---------------------------------------------------------------------------
# single-element API


@dataclass(frozen=True)
class TruncTensor:
    """Element of the degree-k truncated tensor algebra over c channels.

    ``data`` is the flat coefficient vector; block i (of length c^i) holds
    level i in row-major multi-index order.
    """

    channels: int
    degree: int
    data: np.ndarray

    def __post_init__(self):
        _check_dims(self.channels, self.degree)
        arr = np.ascontiguousarray(self.data, dtype=float)
        expected = flat_size(self.channels, self.degree)
        if arr.shape != (expected,):
            raise ShapeMismatchError(
                f"flat length {arr.shape} does not match "
                f"sum of c^i = {expected} for c={self.channels}, k={self.degree}"
            )
        object.__setattr__(self, "data", arr)

    def level(self, i: int) -> np.ndarray:
        return self.data[level_slice(self.channels, self.degree, i)]

    @property
    def scalar(self) -> float:
        return float(self.data[0])

    def is_group_like(self) -> bool:
        return self.data[0] == 1.0

    def is_lie_like(self) -> bool:
        return self.data[0] == 0.0

    def norm(self, level_weights=None) -> float:
        w = unit_level_weights(self.degree) if level_weights is None else level_weights
        return float(np.sqrt(inner_flat(self.channels, self.degree, self.data, self.data, w)))

    def _like(self, data: np.ndarray) -> "TruncTensor":
        return TruncTensor(self.channels, self.degree, data)


def _check_same_shape(a: TruncTensor, b: TruncTensor) -> None:
    if a.channels != b.channels or a.degree != b.degree:
        raise ShapeMismatchError(
            f"tensor shapes differ: (c={a.channels}, k={a.degree}) vs "
            f"(c={b.channels}, k={b.degree})"
        )


def identity(channels: int, degree: int) -> TruncTensor:
    """Identity element: scalar part 1, all higher levels zero."""
    return TruncTensor(channels, degree, identity_flat(channels, degree))


def zero(channels: int, degree: int) -> TruncTensor:
    return TruncTensor(channels, degree, np.zeros(flat_size(channels, degree)))


def trunc_product(a: TruncTensor, b: TruncTensor) -> TruncTensor:
    _check_same_shape(a, b)
    return a._like(product_flat(a.channels, a.degree, a.data, b.data))


def trunc_exp(x: TruncTensor) -> TruncTensor:
    if x.data[0] != 0.0:
        raise DomainError(f"exp requires zero scalar part, got {x.data[0]!r}")
    return x._like(exp_flat(x.channels, x.degree, x.data))


def trunc_log(g: TruncTensor) -> TruncTensor:
    if g.data[0] != 1.0:
        raise DomainError(f"log requires scalar part 1, got {g.data[0]!r}")
    return g._like(log_flat(g.channels, g.degree, g.data))


def group_inverse(g: TruncTensor) -> TruncTensor:
    if g.data[0] != 1.0:
        raise DomainError(f"inverse requires scalar part 1, got {g.data[0]!r}")
    return g._like(inverse_flat(g.channels, g.degree, g.data))


def graded_inner(a: TruncTensor, b: TruncTensor, level_weights=None) -> float:
    _check_same_shape(a, b)
    w = unit_level_weights(a.degree) if level_weights is None else level_weights
    return float(inner_flat(a.channels, a.degree, a.data, b.data, w))


def add(a: TruncTensor, b: TruncTensor) -> TruncTensor:
    _check_same_shape(a, b)
    return a._like(a.data + b.data)


def scale(a: TruncTensor, alpha: float) -> TruncTensor:
    return a._like(a.data * float(alpha))


def project_to_degree(g: TruncTensor, r: int) -> TruncTensor:
    """Zero all levels above r; an algebra homomorphism onto the r-truncation."""
    if r > g.degree:
        raise DomainError(f"r={r} exceeds tensor degree {g.degree}")
    return g._like(project_flat(g.channels, g.degree, g.data, r))


# ---------------------------------------------------------------------------
# serialization: one flat CSV row per tensor


def tensor_to_csv_row(t: TruncTensor) -> list[str]:
    """channels, degree, then the flat coefficients in documented order."""
    return [str(t.channels), str(t.degree)] + [repr(float(v)) for v in t.data]


def tensor_from_csv_row(row) -> TruncTensor:
    channels, degree = int(row[0]), int(row[1])
    data = np.array([float(v) for v in row[2:]])
    return TruncTensor(channels, degree, data)
