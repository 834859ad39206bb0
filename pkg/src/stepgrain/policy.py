"""Autoregressive token policy and linear state-value head.

The policy scores the next token from a hand-built feature vector with one
tanh hidden layer::

    logits = W2^T tanh(W1^T x + b1) + b2 + P x
    log pi(token | state, prefix) = log_softmax(logits)

``theta`` packs ``W1 (d x h), b1 (h), W2 (h x V), b2 (V)`` in that order.
``P`` (V x d) is an optional *fixed* format prior. It only reads the
grammar-slot block of ``x`` and adds ``strength`` to the logits of tokens
that keep the action well-formed. It is not trained and defaults to zero.
All gradients are derived by hand and checked against finite differences
in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env.world import N_SLOTS, Action, EnvState, ToolWorld, grammar_slot, parse_action, prefix_status, OPEN
from .errors import DimensionMismatch

PREFIX_WINDOW = 4


@dataclass(frozen=True)
class FeatureLayout:
    """Offsets of the feature blocks for one world.

    Blocks, in order: task bucket (one-hot), gathered items (bitmask), step
    index (one-hot, capped at the horizon), prefix (the last four tokens,
    one one-hot per position, then the grammar slot one-hot), and the last
    observation token (one-hot).
    """

    n_buckets: int
    n_items: int
    horizon: int
    vocab_size: int

    @property
    def task(self) -> int:
        return 0

    @property
    def gathered(self) -> int:
        return self.n_buckets

    @property
    def step(self) -> int:
        return self.gathered + self.n_items

    @property
    def prefix(self) -> int:
        return self.step + self.horizon

    @property
    def slot(self) -> int:
        return self.prefix + PREFIX_WINDOW * self.vocab_size

    @property
    def obs(self) -> int:
        return self.slot + N_SLOTS

    @property
    def dim(self) -> int:
        return self.obs + self.vocab_size

    def block(self, name: str) -> slice:
        bounds = {
            "task": (self.task, self.gathered),
            "gathered": (self.gathered, self.step),
            "step": (self.step, self.prefix),
            "prefix": (self.prefix, self.obs),
            "obs": (self.obs, self.dim),
        }[name]
        return slice(*bounds)


def feature_layout(world: ToolWorld) -> FeatureLayout:
    return FeatureLayout(
        n_buckets=max(1, len(world.tasks)),
        n_items=world.n_items,
        horizon=world.horizon,
        vocab_size=len(world.vocab),
    )


def featurize(world: ToolWorld, state: EnvState, prefix: Sequence[str] = (), layout: FeatureLayout | None = None) -> np.ndarray:
    """Feature vector of ``(state, prefix)``; every block is one-hot or a bitmask."""
    if layout is None:
        layout = feature_layout(world)
    if len(prefix) >= world.max_action_len:
        raise ValueError(f"prefix of length {len(prefix)} exceeds the action length limit")
    index = world.vocab.index
    V = layout.vocab_size
    x = np.zeros(layout.dim)
    x[layout.task + state.task_id % layout.n_buckets] = 1.0
    for item in state.gathered:
        x[layout.gathered + item] = 1.0
    x[layout.step + min(max(state.t, 1), layout.horizon) - 1] = 1.0
    recent = list(prefix[-PREFIX_WINDOW:])[::-1]
    for pos, tok in enumerate(recent):
        x[layout.prefix + pos * V + index[tok]] = 1.0
    slot = grammar_slot(world.vocab, prefix, world.max_action_len)
    if slot is not None:
        x[layout.slot + slot] = 1.0
    if state.last_obs:
        x[layout.obs + index[state.last_obs[-1]]] = 1.0
    return x


# -- parameters -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolicyParams:
    theta: np.ndarray
    dims: tuple[int, int, int]
    prior: np.ndarray | None = None

    def __post_init__(self):
        d, h, V = self.dims
        if self.theta.shape != (n_params(self.dims),):
            raise DimensionMismatch(f"theta has shape {self.theta.shape}, dims {self.dims} need {n_params(self.dims)}")
        if self.prior is not None and self.prior.shape != (V, d):
            raise DimensionMismatch(f"prior has shape {self.prior.shape}, expected {(V, d)}")

    @property
    def size(self) -> int:
        return self.theta.size

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.asarray(theta, dtype=float), self.dims, self.prior)

    def unpack(self):
        return unpack(self.theta, self.dims)


@dataclass(frozen=True, eq=False)
class ValueParams:
    w: np.ndarray

    def with_w(self, w: np.ndarray) -> "ValueParams":
        return ValueParams(np.asarray(w, dtype=float))


def n_params(dims) -> int:
    d, h, V = dims
    return d * h + h + h * V + V


def unpack(theta: np.ndarray, dims):
    d, h, V = dims
    i = 0
    W1 = theta[i:i + d * h].reshape(d, h)
    i += d * h
    b1 = theta[i:i + h]
    i += h
    W2 = theta[i:i + h * V].reshape(h, V)
    i += h * V
    b2 = theta[i:i + V]
    return W1, b1, W2, b2


def output_bias_slice(dims) -> slice:
    d, h, V = dims
    start = d * h + h + h * V
    return slice(start, start + V)


def format_prior(world: ToolWorld, strength: float, layout: FeatureLayout | None = None) -> np.ndarray:
    """Fixed (V x d) matrix adding ``strength`` to grammatical next tokens."""
    if layout is None:
        layout = feature_layout(world)
    P = np.zeros((layout.vocab_size, layout.dim))
    index = world.vocab.index
    for slot in range(N_SLOTS):
        for tok in world.vocab.slot_tokens(slot):
            P[index[tok], layout.slot + slot] = strength
    return P


def init_policy(world: ToolWorld, hidden: int = 32, seed: int = 0, prior_strength: float = 0.0,
                init_scale: float = 0.05) -> PolicyParams:
    """Weights uniform in ``[-init_scale, init_scale]``, seeded."""
    layout = feature_layout(world)
    dims = (layout.dim, hidden, layout.vocab_size)
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-init_scale, init_scale, n_params(dims))
    prior = format_prior(world, prior_strength, layout) if prior_strength else None
    return PolicyParams(theta, dims, prior)


def init_value(world: ToolWorld) -> ValueParams:
    return ValueParams(np.zeros(feature_layout(world).dim + 1))


# -- forward / backward -----------------------------------------------------------

def _check(params: PolicyParams, X: np.ndarray) -> None:
    if X.shape[-1] != params.dims[0]:
        raise DimensionMismatch(f"features have dimension {X.shape[-1]}, policy expects {params.dims[0]}")


def log_softmax(Z: np.ndarray) -> np.ndarray:
    m = Z.max(axis=-1, keepdims=True)
    shifted = Z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(params: PolicyParams, X: np.ndarray):
    """Hidden activations and token log-probabilities for a batch ``X (N, d)``."""
    _check(params, X)
    W1, b1, W2, b2 = params.unpack()
    H = np.tanh(X @ W1 + b1)
    Z = H @ W2 + b2
    if params.prior is not None:
        Z = Z + X @ params.prior.T
    return H, log_softmax(Z)


def backward(params: PolicyParams, X: np.ndarray, H: np.ndarray, dZ: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. theta of ``sum(dZ * logits)``."""
    _, _, W2, _ = params.unpack()
    dW2 = H.T @ dZ
    db2 = dZ.sum(axis=0)
    dA = (dZ @ W2.T) * (1.0 - H * H)
    dW1 = X.T @ dA
    db1 = dA.sum(axis=0)
    return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])


def weighted_logprob_grad(params: PolicyParams, X: np.ndarray, tokens: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_n weights[n] * log pi(tokens[n] | X[n])``."""
    if len(X) == 0:
        return np.zeros(params.size)
    H, logp = forward(params, X)
    dZ = -np.exp(logp) * weights[:, None]
    dZ[np.arange(len(tokens)), tokens] += weights
    return backward(params, X, H, dZ)


def token_logprobs(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    """Log-probabilities of every vocabulary token for one feature vector."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 1:
        raise DimensionMismatch("expected a single feature vector")
    return forward(params, features[None, :])[1][0]


def action_features(world: ToolWorld, state: EnvState, tokens: Sequence[str], layout: FeatureLayout | None = None) -> np.ndarray:
    """Feature rows for every token position of an action (prefix = earlier tokens)."""
    if layout is None:
        layout = feature_layout(world)
    return np.stack([featurize(world, state, tokens[:i], layout) for i in range(len(tokens))])


def action_logprob(params: PolicyParams, world: ToolWorld, state: EnvState, action) -> tuple[float, np.ndarray]:
    """Summed and per-token log-probability of an action's tokens."""
    tokens = action.tokens if isinstance(action, Action) else tuple(action)
    ids = np.array(world.vocab.encode(tokens))
    X = action_features(world, state, tokens)
    _, logp = forward(params, X)
    per_token = logp[np.arange(len(ids)), ids]
    return float(sum(per_token)), per_token


def logprob_grad(params: PolicyParams, world: ToolWorld, state: EnvState, action) -> np.ndarray:
    """Gradient of ``action_logprob(...)[0]`` w.r.t. theta."""
    tokens = action.tokens if isinstance(action, Action) else tuple(action)
    ids = np.array(world.vocab.encode(tokens))
    X = action_features(world, state, tokens)
    return weighted_logprob_grad(params, X, ids, np.ones(len(ids)))


def sample_token(logp: np.ndarray, rng: np.random.Generator, temperature: float = 1.0, greedy: bool = False) -> int:
    if greedy:
        return int(np.argmax(logp))
    if temperature <= 0:
        raise ValueError("temperature must be positive (use greedy=True for argmax decoding)")
    z = logp / temperature
    p = np.exp(z - z.max())
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(logp) - 1)


def sample_action(params: PolicyParams, world: ToolWorld, state: EnvState, rng: np.random.Generator | None = None,
                  temperature: float = 1.0, greedy: bool = False) -> tuple[Action, np.ndarray]:
    """Decode one action token by token.

    Decoding stops once the prefix is a complete action, can no longer become
    one (returned as Malformed), or reaches the length limit. Returns the
    action and the policy log-probability of each emitted token (at
    temperature 1, whatever the sampling temperature).
    """
    layout = feature_layout(world)
    tokens = world.vocab.tokens
    prefix: list[str] = []
    logprobs = []
    while True:
        x = featurize(world, state, prefix, layout)
        logp = forward(params, x[None, :])[1][0]
        k = sample_token(logp, rng, temperature, greedy)
        prefix.append(tokens[k])
        logprobs.append(logp[k])
        if prefix_status(world.vocab, prefix, world.max_action_len) != OPEN:
            break
    return parse_action(world.vocab, prefix), np.array(logprobs)


# -- value head -------------------------------------------------------------------

def value_features(world: ToolWorld, state: EnvState, layout: FeatureLayout | None = None) -> np.ndarray:
    return np.append(featurize(world, state, (), layout), 1.0)


def value_estimate(vparams: ValueParams, world: ToolWorld, state: EnvState) -> float:
    phi = value_features(world, state)
    if phi.shape != vparams.w.shape:
        raise DimensionMismatch(f"value head has {vparams.w.size} weights, features have {phi.size}")
    return float(vparams.w @ phi)


# -- checkpoints --------------------------------------------------------------------

CHECKPOINT_FORMAT = "stepgrain-policy"
CHECKPOINT_VERSION = 1


def params_to_dict(params: PolicyParams, vparams: ValueParams | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": list(params.dims),
        "theta": params.theta.tolist(),
        "prior": None if params.prior is None else params.prior.tolist(),
        "value_w": None if vparams is None else vparams.w.tolist(),
    }


def params_from_dict(d: dict) -> tuple[PolicyParams, ValueParams | None]:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a policy checkpoint (format/version mismatch)")
    dims = tuple(int(v) for v in d["dims"])
    if len(dims) != 3:
        raise DimensionMismatch("dims must have three entries")
    prior = None if d.get("prior") is None else np.array(d["prior"], dtype=float)
    params = PolicyParams(np.array(d["theta"], dtype=float), dims, prior)
    if not np.all(np.isfinite(params.theta)):
        raise ValueError("checkpoint contains non-finite parameters")
    vparams = None if d.get("value_w") is None else ValueParams(np.array(d["value_w"], dtype=float))
    if vparams is not None and vparams.w.size != dims[0] + 1:
        raise DimensionMismatch("value head size does not match policy feature dimension")
    return params, vparams


def check_compatible(params: PolicyParams, world: ToolWorld) -> None:
    layout = feature_layout(world)
    if params.dims[0] != layout.dim or params.dims[2] != layout.vocab_size:
        raise DimensionMismatch(
            f"checkpoint dims {params.dims} do not fit world (d={layout.dim}, V={layout.vocab_size})"
        )
