"""Returns, TD residuals and GAE over per-step rewards.

Indexing is inclusive of the final step: ``G_t = sum_{k=t}^{T} gamma^(k-t) r_k``,
and the value after the last step is 0 (episodes always terminate).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyRewards, LengthMismatch


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _paired(rewards, values):
    r, v = _as_array(rewards), _as_array(values)
    if r.shape != v.shape:
        raise LengthMismatch(f"{r.size} rewards but {v.size} values")
    return r, v


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """``G_t = r_t + gamma * G_{t+1}`` with ``G_{T+1} = 0``."""
    _check_unit("gamma", gamma)
    r = _as_array(rewards)
    if r.size == 0:
        raise EmptyRewards("no rewards to discount")
    out = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def mc_advantage(rewards, values, gamma: float) -> np.ndarray:
    r, v = _paired(rewards, values)
    return discounted_returns(r, gamma) - v


def td_residuals(rewards, values, gamma: float) -> np.ndarray:
    """``delta_t = r_t + gamma V(s_{t+1}) - V(s_t)`` with terminal value 0."""
    _check_unit("gamma", gamma)
    r, v = _paired(rewards, values)
    nxt = np.append(v[1:], 0.0)
    return r + gamma * nxt - v


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimate by backward recursion."""
    _check_unit("lambda", lam)
    delta = td_residuals(rewards, values, gamma)
    out = np.empty_like(delta)
    acc = 0.0
    for t in range(delta.size - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        out[t] = acc
    return out


def broadcast_to_tokens(advantages, token_counts: Sequence[int]) -> np.ndarray:
    """Repeat each step's advantage once per token of that step."""
    a = _as_array(advantages)
    counts = np.asarray(token_counts, dtype=int)
    if a.shape != counts.shape:
        raise LengthMismatch(f"{a.size} advantages but {counts.size} token counts")
    if np.any(counts < 0):
        raise ValueError("token counts must be non-negative")
    return np.repeat(a, counts)


def standardize(advantages) -> np.ndarray:
    """Zero mean, unit variance; order-preserving.

    A single entry is returned unchanged and a constant vector is only
    centred, so nothing is ever divided by zero.
    """
    a = _as_array(advantages)
    if a.size < 2:
        return a.copy()
    centred = a - a.mean()
    std = centred.std()
    if std < 1e-12:
        return centred
    return centred / std


@dataclass(frozen=True, eq=False)
class AdvantageBatch:
    returns: list
    residuals: list
    advantages: list
    values: list
    gamma: float
    gae_lambda: float


def compute_advantages(rewards_per_traj, values_per_traj, gamma: float, lam: float,
                       normalize: bool = True) -> AdvantageBatch:
    """Per-trajectory GAE, optionally standardized jointly over all steps."""
    returns, residuals, advs = [], [], []
    for r, v in zip(rewards_per_traj, values_per_traj, strict=True):
        returns.append(discounted_returns(r, gamma))
        residuals.append(td_residuals(r, v, gamma))
        advs.append(gae(r, v, gamma, lam))
    if normalize and advs:
        flat = standardize(np.concatenate(advs))
        bounds = np.cumsum([len(a) for a in advs])[:-1]
        advs = np.split(flat, bounds)
    return AdvantageBatch(returns, residuals, list(advs), [_as_array(v) for v in values_per_traj], gamma, lam)
