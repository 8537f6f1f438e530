import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from calibrex import acquisition as acq
from calibrex import gp
from calibrex.errors import InvalidArgumentError
from calibrex.kernels import KernelSpec

EI = acq.AcquisitionSpec(acq.AcquisitionFamily.EI)
PI = acq.AcquisitionSpec(acq.AcquisitionFamily.PI)
UCB = acq.AcquisitionSpec(acq.AcquisitionFamily.UCB, ucb_beta=2.0)


def mc_ei(mu, sigma, best, n, rng):
    """Monte-Carlo EI from ``n`` stratified normal draws (one per probability stratum)."""
    u = (np.arange(n) + rng.random(n)) / n
    draws = mu + sigma * special.ndtri(u)
    return float(np.mean(np.maximum(0.0, best - draws)))


def test_ei_at_the_incumbent():
    assert acq.score(EI, 0.0, 1.0, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    assert acq.score(EI, 3.0, 1.0, 3.0) == pytest.approx(0.398942, abs=1e-6)
    assert acq.score(EI, 3.0, 1.0, 3.0) == pytest.approx(mc_ei(3.0, 1.0, 3.0, 10**7, np.random.default_rng(0)), abs=1e-3)


def test_pi_at_the_incumbent_is_one_half():
    assert acq.score(PI, 1.3, 0.4, 1.3) == 0.5


def test_ei_vanishes_far_above_the_incumbent():
    assert acq.score(EI, 10.0, 1.0, 0.0) <= 1e-15


def test_ucb_orientation_and_pi_tradeoff():
    # larger is better for every family
    assert acq.score(UCB, 1.0, 0.5, 0.0) == pytest.approx(-(1.0 - 2.0 * 0.5))
    assert acq.score(UCB, 0.0, 1.0, 0.0) > acq.score(UCB, 1.0, 1.0, 0.0)
    spec = acq.AcquisitionSpec(acq.AcquisitionFamily.PI, pi_tradeoff=0.5)
    assert acq.score(spec, 0.0, 1.0, 0.0) == pytest.approx(0.5 * math.erfc(0.5 / math.sqrt(2)), abs=1e-15)


def test_pi_tradeoff_decay():
    spec = acq.AcquisitionSpec(acq.AcquisitionFamily.PI, pi_tradeoff=2.0, pi_decay=True)
    assert spec.tradeoff_at(0) == 2.0
    assert spec.tradeoff_at(3) == pytest.approx(2.0 * 0.9**3)
    assert acq.AcquisitionSpec(acq.AcquisitionFamily.PI, pi_tradeoff=2.0).tradeoff_at(5) == 2.0


def test_invalid_sigma_and_specs():
    with pytest.raises(InvalidArgumentError):
        acq.score(EI, 0.0, 0.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        acq.score(EI, [0.0, 1.0], [1.0, -1.0], 0.0)
    with pytest.raises(InvalidArgumentError):
        acq.AcquisitionSpec(pi_tradeoff=-1.0)
    with pytest.raises(InvalidArgumentError):
        acq.AcquisitionSpec(ucb_beta=0.0)


def test_ei_monte_carlo_equivalence():
    rng = np.random.default_rng(42)
    for _ in range(100):
        mu, sigma, best = rng.normal(0, 2), rng.uniform(0.05, 3), rng.normal(0, 2)
        ei = acq.score(EI, mu, sigma, best)
        mc = mc_ei(mu, sigma, best, 10**6, rng)
        if ei < 1e-2:
            assert abs(ei - mc) <= 1e-4
        else:
            assert abs(ei - mc) <= 1e-2 * ei


@given(st.floats(-50, 50), st.floats(1e-3, 50), st.floats(-50, 50))
def test_pi_matches_error_function(mu, sigma, best):
    z = (best - mu) / sigma
    assert abs(acq.score(PI, mu, sigma, best) - 0.5 * math.erfc(-z / math.sqrt(2))) <= 1e-12


@given(st.floats(-50, 50), st.floats(1e-6, 50), st.floats(-50, 50))
def test_ei_non_negative(mu, sigma, best):
    assert acq.score(EI, mu, sigma, best) >= 0.0


def test_ei_tends_to_zero_as_sigma_shrinks():
    vals = [acq.score(EI, 1.0, s, 0.0) for s in [1.0, 0.1, 0.01, 1e-4]]
    assert vals[-1] == 0.0 and all(a >= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100), st.sampled_from([EI, PI]))
def test_argmax_invariant_to_a_constant_shift(seed, c, spec):
    rng = np.random.default_rng(seed)
    mu, sigma = rng.normal(size=30), rng.uniform(0.1, 2, 30)
    best = float(mu.min() + rng.uniform(-0.5, 0.5))
    a = int(np.argmax(acq.score(spec, mu, sigma, best)))
    b = int(np.argmax(acq.score(spec, mu + c, sigma, best + c)))
    assert a == b or math.isclose(
        acq.score(spec, mu[a], sigma[a], best), acq.score(spec, mu[b], sigma[b], best), rel_tol=1e-9)


def fitted_model(seed=0, n=8, d=2):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, d))
    y = np.sum(X**2, axis=1) + 0.1 * rng.normal(size=n)
    return gp.fit(gp.GpModel(KernelSpec(length_scale=0.6, noise_variance=1e-4), X, y))


def scripted_batch(model, pool, n, spec, rng):
    """Step-by-step replay of the fantasy loop, written independently of select_batch."""
    X, y = model.train_X.copy(), model.train_y.copy()
    remaining = list(range(len(pool)))
    out = []
    for _ in range(n):
        m = gp.fit(gp.GpModel(model.kernel, X, y, model.mean_fn))
        post = gp.predict(m, pool[remaining], full_cov=False)
        s = np.sqrt(np.maximum(post.var, 1e-12))
        u = (y.min() - post.mean) / s
        ei = s * (u * 0.5 * np.array([math.erfc(-v / math.sqrt(2)) for v in u]) + np.exp(-u * u / 2) / math.sqrt(2 * math.pi))
        k = int(np.argmax(ei))
        z = rng.standard_normal() if spec.fantasy is acq.FantasyStrategy.RANDOM else 0.0
        idx = remaining.pop(k)
        out.append(idx)
        X = np.vstack([X, pool[idx]])
        y = np.append(y, post.mean[k] + z * s[k])
    return pool[out]


@pytest.mark.parametrize("fantasy", list(acq.FantasyStrategy))
def test_select_batch_matches_scripted_replay(fantasy):
    model = fitted_model()
    pool = np.random.default_rng(5).uniform(-1, 1, (200, 2))
    spec = acq.AcquisitionSpec(fantasy=fantasy)
    got = acq.select_batch(model, pool, 4, spec, np.random.default_rng(9))
    want = scripted_batch(model, pool, 4, spec, np.random.default_rng(9))
    assert np.array_equal(got, want)


def test_single_pick_is_the_argmax():
    model = fitted_model(1)
    pool = np.random.default_rng(2).uniform(-1, 1, (100, 2))
    post = gp.predict(model, pool, full_cov=False)
    best = acq.select_batch(model, pool, 1, EI, np.random.default_rng(0))
    assert np.array_equal(best[0], pool[np.argmax(acq.score(EI, post.mean, post.std, model.train_y.min()))])


def test_whole_pool_is_returned_and_training_set_untouched():
    model = fitted_model(2)
    pool = np.random.default_rng(3).uniform(-1, 1, (6, 2))
    X0, y0 = model.train_X.copy(), model.train_y.copy()
    out = acq.select_batch(model, pool, 6, EI, np.random.default_rng(0))
    assert sorted(map(tuple, out)) == sorted(map(tuple, pool))
    assert np.array_equal(model.train_X, X0) and np.array_equal(model.train_y, y0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.sampled_from([EI, PI, UCB]))
def test_batches_are_distinct(seed, n, spec):
    model = fitted_model(seed % 7)
    pool = np.random.default_rng(seed).uniform(-1, 1, (30, 2))
    out = acq.select_batch(model, pool, n, spec, np.random.default_rng(seed))
    assert len({tuple(p) for p in out}) == n


def test_batch_size_must_fit_the_pool():
    with pytest.raises(InvalidArgumentError):
        acq.select_batch(fitted_model(), np.zeros((3, 2)), 4, EI, np.random.default_rng(0))


def test_spec_round_trip():
    spec = acq.AcquisitionSpec(acq.AcquisitionFamily.UCB, 0.2, True, 1.5, acq.FantasyStrategy.KRIGING_BELIEVER)
    assert acq.AcquisitionSpec.from_dict(spec.to_dict()) == spec
