"""Signature-linear value learning along the deterministic proxy flow.

All value math runs in the compressed landmark coordinates: the value at
gridpoint s is a fixed weight vector dotted with the compressed re-centered
residual of the flow (inverse(proxy_s) (x) proxy_T), so one time-invariant
weight vector covers the whole horizon.  The TD(0) sweep over the horizon is
a deterministic linear recursion w <- w + alpha (b - A w); its fixed point is
also assembled explicitly so the sweep can be checked against a direct solve.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor_algebra as ta
from .errors import (
    DivergenceError,
    DomainError,
    InsufficientDataError,
    RangeError,
    ShapeMismatchError,
)
from .jumpdiff import PathEnsemble
from .kernelspace import NystromMap, compress_flat
from .proxy_flow import ProxyTrajectory
from .signature import batch_prefix_signatures

__all__ = [
    "ValueWeights",
    "TdSystem",
    "SolveResult",
    "SweepResult",
    "BaselineResult",
    "step_features",
    "value_at",
    "step_reward",
    "anticipatory_td_error",
    "td_error_vector",
    "realizable_rewards",
    "td0_sweep",
    "assemble_system",
    "stability_bound",
    "default_alpha",
    "solve_fixed_point",
    "fit_reward_weights",
    "classical_td0_baseline",
    "path_residual_features",
    "variance_compare",
    "semi_gradient_direction",
    "full_gradient_direction",
]

# learning-rate cap from the shipped optimizer configuration
DEFAULT_ALPHA_CAP = 3e-4


@dataclass(frozen=True)
class ValueWeights:
    """Compressed-space weights for value, reward, and terminal payoff."""

    w_G: np.ndarray
    w_R: np.ndarray
    terminal_const: float = 0.0
    terminal_weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "w_G", np.asarray(self.w_G, dtype=float))
        object.__setattr__(self, "w_R", np.asarray(self.w_R, dtype=float))
        if self.terminal_weights is not None:
            object.__setattr__(
                self, "terminal_weights", np.asarray(self.terminal_weights, dtype=float)
            )
        for arr in (self.w_G, self.w_R, self.terminal_weights):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DomainError("value weights must be finite")

    def terminal_payoff(self, traj: ProxyTrajectory) -> float:
        """Payoff z at the horizon: a constant plus an optional linear read."""
        z = self.terminal_const
        if self.terminal_weights is not None:
            z += float(self.terminal_weights @ compress_flat(traj.nmap, traj.flats[-1]))
        return z


@dataclass(frozen=True)
class TdSystem:
    """One-trajectory linear system: fixed point solves A w = b."""

    A: np.ndarray
    b: np.ndarray
    gamma: float
    n_steps: int


@dataclass(frozen=True)
class SolveResult:
    w: np.ndarray
    ridged: bool
    residual: float
    condition: float


@dataclass
class SweepResult:
    weights: ValueWeights
    objective_trace: np.ndarray
    weight_norms: np.ndarray
    max_abs_delta: np.ndarray


@dataclass
class BaselineResult:
    weights: np.ndarray
    delta_samples: np.ndarray  # (episodes, steps)


def step_features(traj: ProxyTrajectory) -> np.ndarray:
    """Compressed one-step segment laws inverse(proxy_s) (x) proxy_{s+1}."""
    c, k = traj.channels, traj.degree
    inv = ta.inverse_flat(c, k, traj.flats[:-1])
    segs = ta.product_flat(c, k, inv, traj.flats[1:])
    return compress_flat(traj.nmap, segs)


def value_at(traj: ProxyTrajectory, w_G: np.ndarray, s: float) -> float:
    """Value as a linear read of the compressed re-centered residual at s."""
    i = traj.index_of(s)
    return float(np.asarray(w_G, dtype=float) @ traj.residual_features()[i])


def step_reward(traj: ProxyTrajectory, w_R: np.ndarray, s: float) -> float:
    i = traj.index_of(s)
    if i >= traj.n_grid - 1:
        raise RangeError("step reward is undefined at the terminal gridpoint")
    return float(np.asarray(w_R, dtype=float) @ step_features(traj)[i])


def _rewards_vector(traj, w_R, rewards):
    if rewards is not None:
        rewards = np.asarray(rewards, dtype=float)
        if rewards.shape != (traj.n_grid - 1,):
            raise ShapeMismatchError(
                f"rewards must have length {traj.n_grid - 1}, got {rewards.shape}"
            )
        return rewards
    return step_features(traj) @ np.asarray(w_R, dtype=float)


def td_error_vector(
    traj: ProxyTrajectory,
    w_G: np.ndarray,
    gamma: float,
    z: float,
    rewards: np.ndarray | None = None,
    w_R: np.ndarray | None = None,
) -> np.ndarray:
    """All anticipatory TD errors r_s + gamma V(s+1) - V(s) along the grid."""
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    psi = traj.residual_features()
    w_G = np.asarray(w_G, dtype=float)
    values = psi @ w_G
    r = _rewards_vector(traj, w_R, rewards)
    nxt = np.concatenate([values[1:-1], [z]])
    return r + gamma * nxt - values[:-1]


def anticipatory_td_error(
    traj: ProxyTrajectory,
    w_G: np.ndarray,
    w_R: np.ndarray | None,
    s: float,
    gamma: float,
    z: float,
    rewards: np.ndarray | None = None,
) -> float:
    """Bellman residual at s evaluated along the deterministic flow."""
    i = traj.index_of(s)
    if i >= traj.n_grid - 1:
        raise RangeError("TD error is undefined at or beyond the horizon")
    return float(td_error_vector(traj, w_G, gamma, z, rewards=rewards, w_R=w_R)[i])


def realizable_rewards(
    traj: ProxyTrajectory, w_true: np.ndarray, gamma: float, z: float
) -> np.ndarray:
    """Rewards that make w_true the exact zero-error fixed point."""
    psi = traj.residual_features()
    values = psi @ np.asarray(w_true, dtype=float)
    nxt = np.concatenate([values[1:-1], [z]])
    return values[:-1] - gamma * nxt


def td0_sweep(
    traj: ProxyTrajectory,
    weights: ValueWeights,
    gamma: float,
    alpha: float,
    n_iters: int,
    rewards: np.ndarray | None = None,
) -> SweepResult:
    """Semi-gradient TD(0) over the whole horizon, iterated n_iters times.

    Per iteration: wfl <- w + alpha * sum_s delta_s Psi_s, with the TD target
    held fixed (never differentiated).  Records the objective sum of squared
    errors, the weight norm, and the largest |delta| per iteration.
    """
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    psi = traj.residual_features()
    r = _rewards_vector(traj, weights.w_R, rewards)
    z = weights.terminal_payoff(traj)
    w = weights.w_G.copy()
    obj = np.empty(n_iters)
    norms = np.empty(n_iters)
    max_delta = np.empty(n_iters)
    cur = psi[:-1]
    for it in range(n_iters):
        values = psi @ w
        target_next = np.concatenate([values[1:-1], [z]])
        delta = r + gamma * target_next - values[:-1]
        w = w + alpha * (delta @ cur)
        obj[it] = 0.5 * float(delta @ delta)
        norms[it] = float(np.linalg.norm(w))
        max_delta[it] = float(np.max(np.abs(delta)))
        if norms[it] > 1e12:
            raise DivergenceError(
                "TD sweep diverged; lower the learning rate",
                context={"iteration": it, "weight_norm": norms[it]},
            )
    return SweepResult(
        weights=replace(weights, w_G=w),
        objective_trace=obj,
        weight_norms=norms,
        max_abs_delta=max_delta,
    )


def assemble_system(
    traj: ProxyTrajectory,
    w_R: np.ndarray | None,
    gamma: float,
    z: float,
    rewards: np.ndarray | None = None,
) -> TdSystem:
    """Build A and b so that the TD sweep is w <- w + alpha (b - A w)."""
    psi = traj.residual_features()
    r = _rewards_vector(traj, w_R, rewards)
    cur = psi[:-1]
    A = cur.T @ cur - gamma * cur[:-1].T @ psi[1:-1]
    b = r @ cur
    b = b + gamma * z * cur[-1]
    return TdSystem(A=A, b=b, gamma=gamma, n_steps=cur.shape[0])


def stability_bound(system: TdSystem) -> float:
    """Learning-rate bound 2 / lambda_max of the symmetric part of A."""
    sym = 0.5 * (system.A + system.A.T)
    lam_max = float(np.linalg.eigvalsh(sym)[-1])
    if lam_max <= 0:
        raise DomainError("system matrix has no positive symmetric part")
    return 2.0 / lam_max


def default_alpha(system: TdSystem) -> float:
    return min(DEFAULT_ALPHA_CAP, 0.5 * stability_bound(system))


def solve_fixed_point(system: TdSystem, ridge_fallback: float = 1e-8) -> SolveResult:
    """Direct solve of A w = b, with a flagged ridge fallback when singular."""
    cond = float(np.linalg.cond(system.A))
    ridged = not np.isfinite(cond) or cond > 1e12
    A = system.A + (ridge_fallback * np.eye(system.A.shape[0]) if ridged else 0.0)
    try:
        w = np.linalg.solve(A, system.b)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"system is rank-deficient beyond the ridge: {exc}") from exc
    residual = float(
        np.linalg.norm(system.A @ w - system.b) / max(np.linalg.norm(system.b), 1e-300)
    )
    return SolveResult(w=w, ridged=ridged, residual=residual, condition=cond)


def fit_reward_weights(
    signatures,
    realized_rewards: np.ndarray,
    lam_ridge: float,
    nmap: NystromMap,
) -> tuple[np.ndarray, float]:
    """Ridge regression of realized rewards on compressed signatures."""
    if lam_ridge <= 0:
        raise DomainError("ridge must be positive")
    y = np.asarray(realized_rewards, dtype=float)
    if y.size == 0:
        raise InsufficientDataError("need at least one sample")
    if isinstance(signatures, np.ndarray):
        X = compress_flat(nmap, signatures)
    else:
        X = compress_flat(nmap, np.array([t.data for t in signatures]))
    m = X.shape[1]
    w = np.linalg.solve(X.T @ X + lam_ridge * np.eye(m), X.T @ y)
    mse = float(np.mean((X @ w - y) ** 2))
    return w, mse


def path_residual_features(ens: PathEnsemble, nmap: NystromMap, path_index: int) -> np.ndarray:
    """Compressed realized remaining-segment signatures of one sampled path."""
    values = ens.values[path_index : path_index + 1]
    flags = ens.jump_flags[path_index : path_index + 1]
    _, full = batch_prefix_signatures(
        ens.sig_config, ens.times, values, flags, keep_paths=True
    )
    prefix = full[:, 0, :]
    c = ens.sig_config.channels(values.shape[2])
    inv = ta.inverse_flat(c, ens.sig_config.degree, prefix)
    suffix = ta.product_flat(c, ens.sig_config.degree, inv, prefix[-1])
    return compress_flat(nmap, suffix)


def classical_td0_baseline(
    ens: PathEnsemble,
    nmap: NystromMap,
    gamma: float,
    alpha: float,
    z: float,
    w0: np.ndarray | None = None,
    n_episodes: int | None = None,
    update: bool = True,
) -> BaselineResult:
    """Online semi-gradient TD(0) on sampled rollouts.

    Each ensemble path is one episode; the state feature at step s is the
    compressed signature of the realized remaining segment, the stochastic
    counterpart of the deterministic flow residual.  With ``update=False``
    the weights stay fixed and only the delta samples are recorded.
    """
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    n_eps = ens.n_paths if n_episodes is None else min(n_episodes, ens.n_paths)
    if n_eps < 1:
        raise InsufficientDataError("need at least one episode")
    m = nmap.n_landmarks
    w = np.zeros(m) if w0 is None else np.asarray(w0, dtype=float).copy()
    n_steps = ens.n_grid - 1
    deltas = np.empty((n_eps, n_steps))
    for e in range(n_eps):
        feats = path_residual_features(ens, nmap, e)
        rewards = ens.rewards[e]
        for s in range(n_steps):
            v_next = z if s + 1 == n_steps else float(w @ feats[s + 1])
            delta = rewards[s] + gamma * v_next - float(w @ feats[s])
            deltas[e, s] = delta
            if update:
                w = w + alpha * delta * feats[s]
                if np.linalg.norm(w) > 1e12:
                    raise DivergenceError(
                        "classical TD diverged", context={"episode": e, "step": s}
                    )
    return BaselineResult(weights=w, delta_samples=deltas)


def variance_compare(delta_anticipatory: np.ndarray, delta_classical: np.ndarray) -> dict:
    """Sample variances of the two TD-error families and their ratio.

    Inputs are (n_seeds, n_steps) arrays of errors at matched weights.  The
    variance is taken across seeds per step and averaged over steps.
    """
    da = np.atleast_2d(np.asarray(delta_anticipatory, dtype=float))
    dc = np.atleast_2d(np.asarray(delta_classical, dtype=float))
    if da.shape[0] < 30 or dc.shape[0] < 30:
        raise InsufficientDataError(
            f"need >= 30 seed samples, got {da.shape[0]} and {dc.shape[0]}"
        )
    var_a = float(np.mean(np.var(da, axis=0, ddof=1)))
    var_c = float(np.mean(np.var(dc, axis=0, ddof=1)))
    ratio = var_a / var_c if var_c > 0 else (0.0 if var_a == 0 else np.inf)
    return {
        "var_anticipatory": var_a,
        "var_classical": var_c,
        "ratio": ratio,
        "n_seeds": int(da.shape[0]),
        "n_steps": int(da.shape[1]),
        "per_step_var_anticipatory": np.var(da, axis=0, ddof=1).tolist(),
        "per_step_var_classical": np.var(dc, axis=0, ddof=1).tolist(),
    }


def semi_gradient_direction(traj, w_G, gamma, z, rewards=None, w_R=None) -> np.ndarray:
    delta = td_error_vector(traj, w_G, gamma, z, rewards=rewards, w_R=w_R)
    return delta @ traj.residual_features()[:-1]


def full_gradient_direction(traj, w_G, gamma, z, rewards=None, w_R=None) -> np.ndarray:
    """Direction that also differentiates the TD target; for contrast only."""
    delta = td_error_vector(traj, w_G, gamma, z, rewards=rewards, w_R=w_R)
    psi = traj.residual_features()
    direction = delta @ psi[:-1]
    direction = direction - gamma * (delta[:-1] @ psi[1:-1])
    return direction
