"""Signature kernel, Nystrom landmark compression, and the whitening metric.

Every distance used elsewhere in the package runs through the compressed
coordinates produced here: ``compress`` maps a truncated tensor to the
whitened kernel features against a fixed landmark set, and
:class:`WhitenedMetric` supplies the Mahalanobis-style geometry fitted on a
feature sample.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

import numpy.typing as npt

from . import tensor_algebra as ta
from .errors import DomainError, InsufficientDataError, ShapeMismatchError

__all__ = [
    "DEFAULT_LANDMARK_COUNT",
    "NystromMap",
    "WhitenedMetric",
    "sig_kernel",
    "build_nystrom",
    "default_ridge",
    "compress",
    "compress_flat",
    "fit_whitening",
    "fit_metric_family",
    "q_distance",
    "tensor_q_norm",
    "nystrom_to_json",
    "nystrom_from_json",
]

# landmark count used by shipped configurations
DEFAULT_LANDMARK_COUNT = 128


def sig_kernel(a: ta.TruncTensor, b: ta.TruncTensor, level_weights=None) -> float:
    """Graded inner product of two truncated signatures."""
    return ta.graded_inner(a, b, level_weights)


@dataclass(frozen=True)
class NystromMap:
    """Landmark set plus whitener giving compressed signature coordinates.

    ``landmarks`` is the (M, flat) matrix of landmark tensors, ``whitener`` is
    the symmetric matrix (K_MM + ridge I)^(-1/2).  ``matrix`` is the
    precomputed (M, flat) linear map so that compress(g) = matrix @ flat(g).
    """

    channels: int
    degree: int
    landmarks: np.ndarray
    whitener: np.ndarray
    ridge: float
    level_weights: np.ndarray
    matrix: np.ndarray

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.shape[0]


def default_ridge(gram: np.ndarray) -> float:
    return 1e-6 * float(np.trace(gram)) / gram.shape[0]


def build_nystrom(
    landmarks,
    ridge: float | None = None,
    level_weights=None,
    channels: int | None = None,
    degree: int | None = None,
) -> NystromMap:
    """Whitened landmark feature map from signatures of path segments.

    ``landmarks`` is either a sequence of group-like :class:`TruncTensor` or a
    (M, flat) array together with explicit ``channels``/``degree``.  The
    whitener is the inverse square root of the ridge-regularized landmark
    Gram matrix, computed by symmetric eigendecomposition.
    """
    if isinstance(landmarks, np.ndarray):
        if channels is None or degree is None:
            raise DomainError("array landmarks need explicit channels and degree")
        Z = np.ascontiguousarray(landmarks, dtype=float)
    else:
        landmarks = list(landmarks)
        if not landmarks:
            raise DomainError("need at least one landmark")
        channels, degree = landmarks[0].channels, landmarks[0].degree
        Z = np.array([t.data for t in landmarks])
    if Z.ndim != 2 or Z.shape[1] != ta.flat_size(channels, degree):
        raise ShapeMismatchError(f"landmark matrix has shape {Z.shape}")

    w = (
        ta.unit_level_weights(degree)
        if level_weights is None
        else np.asarray(level_weights, dtype=float)
    )
    cw = ta.coefficient_weights(channels, degree, w)
    gram = (Z * cw) @ Z.T
    if ridge is None:
        ridge = default_ridge(gram)
    if ridge <= 0:
        raise DomainError("ridge must be positive")

    m = Z.shape[0]
    evals, evecs = eigh(gram + ridge * np.eye(m))
    if evals[0] < 10.0 * ridge and m > 1:
        warnings.warn(
            "landmark Gram matrix is nearly singular beyond the ridge; "
            "duplicate or collinear landmarks degrade conditioning",
            RuntimeWarning,
        )
    whitener = (evecs / np.sqrt(evals)) @ evecs.T
    matrix = whitener @ (Z * cw)
    return NystromMap(
        channels=channels,
        degree=degree,
        landmarks=Z,
        whitener=whitener,
        ridge=float(ridge),
        level_weights=w,
        matrix=matrix,
    )


def compress(nmap: NystromMap, g: ta.TruncTensor) -> np.ndarray:
    """Whitened kernel features of g against the landmarks; linear in g."""
    if g.channels != nmap.channels or g.degree != nmap.degree:
        raise ShapeMismatchError(
            f"tensor (c={g.channels}, k={g.degree}) does not match map "
            f"(c={nmap.channels}, k={nmap.degree})"
        )
    return nmap.matrix @ g.data


def compress_flat(nmap: NystromMap, flats: npt.ArrayLike) -> np.ndarray:
    """Batched compression of flat arrays with shape (..., flat)."""
    flats = np.asarray(flats, dtype=float)
    if flats.shape[-1] != nmap.matrix.shape[1]:
        raise ShapeMismatchError(
            f"flat length {flats.shape[-1]} does not match map ({nmap.matrix.shape[1]})"
        )
    return flats @ nmap.matrix.T


@dataclass(frozen=True)
class WhitenedMetric:
    """Whitening geometry (sample covariance + ridge)^(-1/2) on features."""

    precision: np.ndarray
    ridge: float

    @property
    def dim(self) -> int:
        return self.precision.shape[0]

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Map features so the fitting sample has near-identity covariance."""
        return np.asarray(x, dtype=float) @ self.precision.T

    def norm(self, x: np.ndarray) -> float:
        """Euclidean norm of the whitened features."""
        return float(np.linalg.norm(self.whiten(x)))


def fit_whitening(features: np.ndarray, lam: float) -> WhitenedMetric:
    """Fit the whitening metric on an (n, m) feature sample."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] < 2:
        raise InsufficientDataError(
            f"need an (n >= 2, m) feature matrix, got shape {features.shape}"
        )
    if lam <= 0:
        raise DomainError("ridge lambda must be positive")
    cov = np.cov(features, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    m = cov.shape[0]
    evals, evecs = eigh(cov + lam * np.eye(m))
    precision = (evecs / np.sqrt(evals)) @ evecs.T
    return WhitenedMetric(precision=precision, ridge=float(lam))


def fit_metric_family(features_per_point, lam: float) -> list[WhitenedMetric]:
    """One metric per evaluation gridpoint, fitted on that point's features."""
    return [fit_whitening(f, lam) for f in features_per_point]


def q_distance(metric: WhitenedMetric, u: np.ndarray, v: np.ndarray) -> float:
    """sqrt((u-v)^T Q (u-v)) with Q the fitted precision operator."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.shape != (metric.dim,):
        raise ShapeMismatchError(
            f"vectors {u.shape}, {v.shape} do not match metric dim {metric.dim}"
        )
    d = u - v
    return float(np.sqrt(max(d @ metric.precision @ d, 0.0)))


def tensor_q_norm(nmap: NystromMap, metric: WhitenedMetric, t: ta.TruncTensor) -> float:
    """Q-norm of a raw tensor through the compression."""
    c = compress(nmap, t)
    return q_distance(metric, c, np.zeros_like(c))


# ---------------------------------------------------------------------------
# serialization


def nystrom_to_json(nmap: NystromMap, fh, meta: dict | None = None) -> None:
    payload = {
        "_meta": dict(meta or {}),
        "channels": nmap.channels,
        "degree": nmap.degree,
        "ridge": nmap.ridge,
        "level_weights": nmap.level_weights.tolist(),
        "landmarks": [[repr(float(v)) for v in row] for row in nmap.landmarks],
    }
    json.dump(payload, fh, indent=1)


def nystrom_from_json(fh) -> NystromMap:
    payload = json.load(fh)
    Z = np.array([[float(v) for v in row] for row in payload["landmarks"]])
    return build_nystrom(
        Z,
        ridge=payload["ridge"],
        level_weights=np.array(payload["level_weights"]),
        channels=payload["channels"],
        degree=payload["degree"],
    )
