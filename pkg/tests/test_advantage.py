import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stepgrain.advantage import (
    broadcast_to_tokens, compute_advantages, discounted_returns, gae, mc_advantage, standardize, td_residuals,
)
from stepgrain.errors import EmptyRewards, LengthMismatch

from oracles import forward_returns, gae_double_sum

reals = st.floats(-10, 10, allow_nan=False)
unit = st.floats(0, 1)


@st.composite
def episodes(draw, max_len=8):
    T = draw(st.integers(1, max_len))
    r = draw(st.lists(reals, min_size=T, max_size=T))
    v = draw(st.lists(reals, min_size=T, max_size=T))
    return np.array(r), np.array(v)


def test_returns_example():
    assert np.allclose(discounted_returns([1, 0, 2], 0.5), [1.5, 1.0, 2.0], atol=0)
    assert np.array_equal(discounted_returns([3, -1, 2], 0.0), [3, -1, 2])
    assert np.array_equal(discounted_returns([0, 0, 0], 0.9), [0, 0, 0])
    with pytest.raises(EmptyRewards):
        discounted_returns([], 0.9)


@settings(max_examples=300, deadline=None)
@given(episodes(), unit)
def test_returns_match_forward_sum(ep, gamma):
    r, _ = ep
    assert np.allclose(discounted_returns(r, gamma), forward_returns(r, gamma), atol=1e-10)


def test_mc_and_td_examples():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0, 2.0])
    G = discounted_returns(r, 0.9)
    assert np.allclose(mc_advantage(r, G, 0.9), 0)
    assert np.array_equal(mc_advantage(r, np.zeros(3), 0.9), G)
    assert td_residuals([2.0], [0.5], 0.9)[0] == 1.5
    assert np.array_equal(td_residuals(r, np.zeros(3), 0.9), r)
    c = 0.7
    assert np.allclose(td_residuals(r, np.full(3, c), 1.0), [1.0, 2.0, 3.0 - c])
    with pytest.raises(LengthMismatch):
        mc_advantage([1, 2], [1], 0.9)
    with pytest.raises(LengthMismatch):
        td_residuals([1, 2], [1], 0.9)


@settings(max_examples=200, deadline=None)
@given(episodes(), unit, st.floats(-5, 5))
def test_terminal_shift(ep, gamma, c):
    r, v = ep
    shifted = r.copy()
    shifted[-1] += c
    T = len(r)
    delta = mc_advantage(shifted, v, gamma) - mc_advantage(r, v, gamma)
    assert np.allclose(delta, [gamma ** (T - 1 - t) * c for t in range(T)], atol=1e-9)


@settings(max_examples=300, deadline=None)
@given(episodes(), unit, unit)
def test_gae_identities(ep, gamma, lam):
    r, v = ep
    assert np.array_equal(gae(r, v, gamma, 0.0), td_residuals(r, v, gamma))
    assert np.allclose(gae(r, v, gamma, 1.0), mc_advantage(r, v, gamma), atol=1e-10)
    assert np.allclose(gae(r, v, gamma, lam), gae_double_sum(r, v, gamma, lam), atol=1e-12)
    assert gae(r[:1], v[:1], gamma, lam)[0] == td_residuals(r[:1], v[:1], gamma)[0]


@settings(max_examples=100, deadline=None)
@given(episodes(), episodes(), unit, unit)
def test_gae_affine_in_rewards(ep1, ep2, gamma, lam):
    (r1, v), (r2, _) = ep1, ep2
    T = min(len(r1), len(r2))
    r1, r2, v = r1[:T], r2[:T], v[:T]
    lhs = gae(r1 + r2, v, gamma, lam)
    rhs = gae(r1, v, gamma, lam) + gae(r2, np.zeros(T), gamma, lam)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_broadcast():
    assert np.array_equal(broadcast_to_tokens([2.5], [3]), [2.5, 2.5, 2.5])
    assert np.array_equal(broadcast_to_tokens([1, 2, 3], [1, 1, 1]), [1, 2, 3])
    assert broadcast_to_tokens([1, 2, 3], [2, 0, 4]).size == 6
    with pytest.raises(LengthMismatch):
        broadcast_to_tokens([1, 2], [1])


@settings(max_examples=200, deadline=None)
@given(st.lists(reals, min_size=2, max_size=40))
def test_standardize(xs):
    a = np.array(xs)
    z = standardize(a)
    assert abs(z.mean()) < 1e-9
    if a.std() > 1e-6:
        assert abs(z.std() - 1) < 1e-9
    # order preserving: sorting by the input leaves the output non-decreasing
    order = np.argsort(a, kind="stable")
    assert np.all(np.diff(z[order]) >= 0)


def test_standardize_degenerate():
    assert np.array_equal(standardize([3.0]), [3.0])
    assert np.array_equal(standardize([2.0, 2.0]), [0.0, 0.0])


def test_compute_advantages_batch():
    rs = [np.array([1.0, 0.0, 1.0]), np.array([0.5])]
    vs = [np.zeros(3), np.array([0.2])]
    b = compute_advantages(rs, vs, 0.9, 0.95, normalize=False)
    assert np.allclose(b.advantages[0], gae(rs[0], vs[0], 0.9, 0.95))
    assert [len(a) for a in b.advantages] == [3, 1]
    n = compute_advantages(rs, vs, 0.9, 0.95, normalize=True)
    flat = np.concatenate(n.advantages)
    assert abs(flat.mean()) < 1e-12 and abs(flat.std() - 1) < 1e-12
