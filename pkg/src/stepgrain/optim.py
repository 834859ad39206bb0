"""Step-grained policy optimization: REINFORCE, PPO-clip and the training loop.

Every step of a trajectory carries its own shaped reward. Advantages are
computed per step (GAE over the trajectory) and shared by all tokens of that
step's action. The PPO surrogate is evaluated per token with the
probability ratio ``exp(log pi_new - log pi_old)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import advantage as adv
from .env.trajectory import Trajectory
from .env.world import ToolWorld
from .errors import ConfigError, DimensionMismatch, MissingOldLogprobs, NonSingleStepBatch
from .policy import (
    PolicyParams,
    ValueParams,
    action_features,
    backward,
    feature_layout,
    forward,
    init_policy,
    init_value,
    value_features,
    weighted_logprob_grad,
)
from .reward import ABLATION_MODES, STATUS_VALUE, shape_rewards

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``kl_coef`` is the per-token KL weight folded into step rewards; with
    ``kl_target`` set, a proportional controller adapts it toward that KL.
    ``prior_strength`` sets the fixed format prior of the initial policy.
    """

    alpha: float = 1.0
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    kl_coef: float = 0.3
    kl_target: float | None = None
    kl_horizon: int = 10
    learning_rate: float = 1e-2
    optimizer: str = "sgd"
    batch_size: int = 32
    ppo_epochs: int = 4
    iterations: int = 200
    normalize_advantages: bool = True
    entropy_coef: float = 0.0
    critic_lr: float = 0.05
    critic_steps: int = 10
    hidden: int = 32
    init_scale: float = 0.05
    prior_strength: float = 0.0
    policy_seed: int = 0
    rollout_seed: int = 0
    ablation_mode: str = "none"

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ConfigError(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if self.kl_coef < 0:
            raise ConfigError(f"kl_coef must be non-negative, got {self.kl_coef}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        for name in ("gamma", "gae_lambda"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode must be one of {ABLATION_MODES}")
        for name in ("batch_size", "ppo_epochs", "hidden", "kl_horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0 or self.critic_steps < 0:
            raise ConfigError("iterations and critic_steps must be non-negative")

    @classmethod
    def reference_preset(cls, **overrides) -> "TrainConfig":
        """Settings for full-size models: lr 1e-5, batch 8, KL 0.3."""
        base = dict(learning_rate=1e-5, batch_size=8, kl_coef=0.3)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy_preset(cls, **overrides) -> "TrainConfig":
        """Settings tuned for the default toy world (Adam, wider net, format prior)."""
        base = dict(optimizer="adam", learning_rate=1e-2, hidden=64, batch_size=64, prior_strength=4.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Trajectories plus flattened step- and token-level training records.

    ``episodes`` lists the flat step indices that form one optimization
    episode: a whole trajectory normally, a single step in the
    sub-trajectory ablation. ``token_step[n]`` is the flat step of token n.
    """

    trajectories: list
    episodes: list
    step_rewards: np.ndarray
    step_values: np.ndarray
    step_returns: np.ndarray
    step_advantages: np.ndarray
    step_features: np.ndarray
    step_token_start: np.ndarray
    X: np.ndarray
    tokens: np.ndarray
    old_logprobs: np.ndarray | None
    token_adv: np.ndarray
    token_step: np.ndarray
    snapshot: PolicyParams
    gamma: float
    gae_lambda: float
    normalize: bool
    kl_penalty: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_steps(self) -> int:
        return len(self.step_rewards)


def _episode_advantages(rewards, values, episodes, gamma, lam, normalize):
    returns = np.zeros_like(rewards)
    advantages = np.zeros_like(rewards)
    for ep in episodes:
        returns[ep] = adv.discounted_returns(rewards[ep], gamma)
        advantages[ep] = adv.gae(rewards[ep], values[ep], gamma, lam)
    if normalize:
        advantages = adv.standardize(advantages)
    return returns, advantages


def build_batch(world: ToolWorld, trajectories: list, params: PolicyParams, vparams: ValueParams,
                config: TrainConfig) -> RolloutBatch:
    """Flatten annotated trajectories into a training batch.

    Trajectories must carry rewards. Old log-probs are taken from the
    trajectories when recorded, otherwise the batch has none.
    """
    layout = feature_layout(world)
    sub = config.ablation_mode == "sub_trajectory_ppo"
    rewards, feats, Xs, toks, olds, starts, token_step = [], [], [], [], [], [0], []
    episodes = []
    have_old = all(s.logprobs is not None for tr in trajectories for s in tr.steps)
    m = 0
    for tr in trajectories:
        if tr.rewards is None:
            raise ValueError("trajectory has no rewards; annotate it first")
        ids = []
        for s, r in zip(tr.steps, tr.rewards):
            rewards.append(r.normalized)
            feats.append(value_features(world, s.state, layout))
            Xs.append(action_features(world, s.state, s.action.tokens, layout))
            toks.extend(world.vocab.encode(s.action.tokens))
            if have_old:
                olds.extend(s.logprobs)
            token_step.extend([m] * s.n_tokens)
            starts.append(starts[-1] + s.n_tokens)
            ids.append(m)
            m += 1
        if sub:
            episodes.extend(np.array([i]) for i in ids)
        else:
            episodes.append(np.array(ids))
    step_rewards = np.array(rewards, dtype=float)
    step_features = np.array(feats)
    step_values = step_features @ vparams.w
    returns, advantages = _episode_advantages(
        step_rewards, step_values, episodes, config.gamma, config.gae_lambda, config.normalize_advantages
    )
    token_step = np.array(token_step, dtype=int)
    return RolloutBatch(
        trajectories=list(trajectories),
        episodes=episodes,
        step_rewards=step_rewards,
        step_values=step_values,
        step_returns=returns,
        step_advantages=advantages,
        step_features=step_features,
        step_token_start=np.array(starts, dtype=int),
        X=np.concatenate(Xs) if Xs else np.zeros((0, layout.dim)),
        tokens=np.array(toks, dtype=int),
        old_logprobs=np.array(olds, dtype=float) if have_old else None,
        token_adv=advantages[token_step],
        token_step=token_step,
        snapshot=params,
        gamma=config.gamma,
        gae_lambda=config.gae_lambda,
        normalize=config.normalize_advantages,
    )


def collect_rollouts(world: ToolWorld, params: PolicyParams, vparams: ValueParams, config: TrainConfig,
                     rng: np.random.Generator) -> RolloutBatch:
    """Sample ``batch_size`` trajectories on random tasks, shape rewards, compute advantages."""
    from .evaluation import rollout_sequential

    if not world.tasks:
        raise ValueError("world has no tasks")
    shaping = "zero_step_rewards" if config.ablation_mode == "zero_step_rewards" else "none"
    trajectories = []
    for child in rng.spawn(config.batch_size):
        task_id = int(child.integers(len(world.tasks)))
        tr = rollout_sequential(world, params, task_id, child)
        trajectories.append(tr.with_rewards(shape_rewards(world, tr, config.alpha, shaping)))
    return build_batch(world, trajectories, params, vparams, config)


def _token_logprobs(params: PolicyParams, batch: RolloutBatch):
    H, logp = forward(params, batch.X)
    return H, logp, logp[np.arange(batch.n_tokens), batch.tokens]


def reinforce_gradient(batch: RolloutBatch, params: PolicyParams) -> np.ndarray:
    """Mean over trajectories of ``sum_t A_t * grad log pi(a_t | s_t)``."""
    if batch.X.shape[1] != params.dims[0]:
        raise DimensionMismatch("batch features do not match the policy")
    weights = batch.token_adv / max(len(batch.trajectories), 1)
    return weighted_logprob_grad(params, batch.X, batch.tokens, weights)


def ppo_loss_and_grad(batch: RolloutBatch, params: PolicyParams, config: TrainConfig):
    """Clipped surrogate loss (negated, token mean), its gradient and diagnostics."""
    if batch.old_logprobs is None:
        raise MissingOldLogprobs("batch has no rollout log-probabilities")
    if batch.X.shape[1] != params.dims[0]:
        raise DimensionMismatch("batch features do not match the policy")
    n = batch.n_tokens
    eps = config.clip_epsilon
    H, logp, new = _token_logprobs(params, batch)
    ratio = np.exp(new - batch.old_logprobs)
    A = batch.token_adv
    surr1 = ratio * A
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * A
    obj = np.minimum(surr1, surr2)
    loss = -np.mean(obj)
    # The min picks the unclipped branch wherever it is not larger; elsewhere
    # the surrogate is flat in theta.
    active = surr1 <= surr2
    w = A * ratio * active / n
    P = np.exp(logp)
    dZ = P * w[:, None]
    dZ[np.arange(n), batch.tokens] -= w
    if config.entropy_coef:
        ent = -(P * logp).sum(axis=1)
        loss = loss - config.entropy_coef * ent.mean()
        dZ += (config.entropy_coef / n) * P * (logp + ent[:, None])
    grad = backward(params, batch.X, H, dZ)
    diagnostics = {
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)) if n else 0.0,
        "mean_kl": float(np.mean(batch.old_logprobs - new)) if n else 0.0,
        "mean_ratio": float(np.mean(ratio)) if n else 1.0,
    }
    return float(loss), grad, diagnostics


def apply_kl_penalty(batch: RolloutBatch, params: PolicyParams, config: TrainConfig,
                     reference: PolicyParams | None = None) -> RolloutBatch:
    """Fold a per-token KL penalty into step rewards and recompute advantages.

    Each token costs ``kl_coef * (log pi_params - log pi_old)``, where the old
    log-prob is the one recorded in the batch, or the one under
    ``reference`` when given. A step's reward drops by the sum over its tokens.
    """
    if config.kl_coef == 0:
        return batch
    if batch.n_tokens == 0:
        return batch
    new = _token_logprobs(params, batch)[2]
    if reference is not None:
        old = _token_logprobs(reference, batch)[2]
    elif batch.old_logprobs is not None:
        old = batch.old_logprobs
    else:
        raise MissingOldLogprobs("batch has no rollout log-probabilities")
    per_token = config.kl_coef * (new - old)
    per_step = np.add.reduceat(per_token, batch.step_token_start[:-1]) if batch.n_steps else per_token[:0]
    rewards = batch.step_rewards - per_step
    returns, advantages = _episode_advantages(
        rewards, batch.step_values, batch.episodes, batch.gamma, batch.gae_lambda, batch.normalize
    )
    return replace(
        batch,
        step_rewards=rewards,
        step_returns=returns,
        step_advantages=advantages,
        token_adv=advantages[batch.token_step],
        kl_penalty=per_step,
    )


def value_loss(batch: RolloutBatch, vparams: ValueParams) -> float:
    err = batch.step_features @ vparams.w - batch.step_returns
    return float(np.mean(err * err))


def critic_update(batch: RolloutBatch, vparams: ValueParams, config: TrainConfig):
    """Gradient descent on the mean squared error to the step returns.

    Returns ``(new_vparams, loss_before, loss_after)``.
    """
    Phi, G = batch.step_features, batch.step_returns
    w = vparams.w.copy()
    m = max(len(G), 1)
    pre = value_loss(batch, vparams)
    for _ in range(config.critic_steps):
        w -= config.critic_lr * (2.0 / m) * (Phi.T @ (Phi @ w - G))
    out = ValueParams(w)
    return out, pre, value_loss(batch, out)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    return SGD(config.learning_rate)


class KLController:
    """Fixed coefficient, or proportional adaptation toward ``target``."""

    def __init__(self, coef, target=None, horizon=10):
        self.value, self.target, self.horizon = coef, target, horizon

    def update(self, current_kl):
        if self.target is None or self.target <= 0:
            return
        err = np.clip(current_kl / self.target - 1.0, -0.2, 0.2)
        self.value *= 1.0 + err / self.horizon


def tool_success_from_batch(trajectories) -> float:
    sc = [r.succ_calling for tr in trajectories for r in tr.rewards[:-1]]
    return float(np.mean(sc)) if sc else 0.0


def train(world: ToolWorld, config: TrainConfig, params: PolicyParams | None = None,
          vparams: ValueParams | None = None, callback: Callable | None = None):
    """Run PPO with step-grained rewards.

    Each iteration collects a batch, folds the KL penalty against the
    previous iteration's rollout policy into the rewards, takes
    ``ppo_epochs`` full-batch steps, and fits the critic. Returns
    ``(params, vparams, metrics)`` where ``metrics`` has one dict per
    iteration; ``pass_rate`` is the greedy pass rate on all tasks after the
    update. ``callback(iteration, params, vparams, row)`` runs after each
    iteration.
    """
    from .evaluation import greedy_pass_rate

    if params is None:
        params = init_policy(world, config.hidden, config.policy_seed, config.prior_strength, config.init_scale)
    if vparams is None:
        vparams = init_value(world)
    rng = np.random.default_rng(config.rollout_seed)
    opt = make_optimizer(config)
    kl = KLController(config.kl_coef, config.kl_target, config.kl_horizon)
    previous = params
    metrics = []
    for it in range(1, config.iterations + 1):
        batch = collect_rollouts(world, params, vparams, config, rng)
        step_cfg = replace(config, kl_coef=kl.value)
        batch = apply_kl_penalty(batch, params, step_cfg, reference=previous)
        previous = params
        diag = {"clip_fraction": 0.0, "mean_kl": 0.0, "mean_ratio": 1.0}
        for _ in range(config.ppo_epochs):
            _, grad, diag = ppo_loss_and_grad(batch, params, config)
            params = params.with_theta(opt.step(params.theta, grad))
        vparams, _, vloss = critic_update(batch, vparams, config)
        if batch.kl_penalty is not None and kl.value:
            kl.update(float(np.sum(batch.kl_penalty) / kl.value / max(len(batch.trajectories), 1)))
        row = {
            "iteration": it,
            "mean_return": float(np.mean([sum(r.normalized for r in tr.rewards) for tr in batch.trajectories])),
            "pass_rate": greedy_pass_rate(world, params),
            "tool_success_rate": tool_success_from_batch(batch.trajectories),
            "mean_kl": diag["mean_kl"],
            "clip_fraction": diag["clip_fraction"],
            "value_loss": vloss,
        }
        metrics.append(row)
        log.debug("iteration %d %s", it, row)
        if callback is not None:
            callback(it, params, vparams, row)
    return params, vparams, metrics


def rlhf_single_step_loss(batch: RolloutBatch, params: PolicyParams, config: TrainConfig):
    """Classic prompt-response PPO for batches of one-step episodes.

    Computed trajectory by trajectory with the terminal reward as the only
    reward (advantage ``r - V(s)``), as a reference for the step-grained
    loss. Returns ``(loss, grad)``.
    """
    if any(len(tr) != 1 for tr in batch.trajectories):
        raise NonSingleStepBatch("every trajectory must have exactly one step")
    if batch.old_logprobs is None:
        raise MissingOldLogprobs("batch has no rollout log-probabilities")
    A = np.array([tr.rewards[0].normalized for tr in batch.trajectories]) - batch.step_values
    if batch.normalize:
        A = adv.standardize(A)
    eps = config.clip_epsilon
    objectives, grad = [], np.zeros(params.size)
    n = batch.n_tokens
    # One forward pass over all responses, as a batched implementation would do.
    _, logp_all = forward(params, batch.X)
    for i, tr in enumerate(batch.trajectories):
        lo, hi = batch.step_token_start[i], batch.step_token_start[i + 1]
        X, y = batch.X[lo:hi], batch.tokens[lo:hi]
        logp = logp_all[lo:hi]
        ratio = np.exp(logp[np.arange(hi - lo), y] - batch.old_logprobs[lo:hi])
        unclipped = ratio * A[i]
        clipped = np.clip(ratio, 1 - eps, 1 + eps) * A[i]
        objectives.append(np.minimum(unclipped, clipped))
        weights = np.where(unclipped <= clipped, A[i] * ratio, 0.0) / n
        grad -= weighted_logprob_grad(params, X, y, weights)
    loss = -np.mean(np.concatenate(objectives)) if objectives else 0.0
    return float(loss), grad
