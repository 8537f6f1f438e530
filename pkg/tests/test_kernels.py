import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from calibrex.errors import InvalidArgumentError
from calibrex.kernels import (
    KernelFamily,
    KernelSpec,
    cross_kernel,
    kernel_matrix,
    kernel_value,
    matern_bessel,
)

SE = KernelFamily.SQUARED_EXPONENTIAL
MATERN = KernelFamily.MATERN


def bessel_oracle(r, sigma2, lam, nu):
    """Matérn value straight from the Bessel formula in extended precision."""
    if r == 0:
        return sigma2
    with mpmath.workdps(40):
        s = mpmath.sqrt(2 * nu) * r / lam
        v = sigma2 * 2 ** (1 - nu) / mpmath.gamma(nu) * s**nu * mpmath.besselk(nu, s)
        return float(v)


def test_se_at_zero_distance_is_variance():
    assert kernel_value(KernelSpec(SE), [0.3, 0.1], [0.3, 0.1]) == 1.0


def test_matern_half_matches_bessel_form():
    spec = KernelSpec(MATERN, smoothness=0.5)
    v = kernel_value(spec, [0.0], [2.0])
    assert v == pytest.approx(math.exp(-2.0), abs=1e-12)
    assert v == pytest.approx(bessel_oracle(2.0, 1.0, 1.0, 0.5), rel=1e-12)


def test_se_value_against_mpmath():
    spec = KernelSpec(SE, output_variance=4.0, length_scale=0.5)
    v = kernel_value(spec, [0.0, 0.0], [0.6, 0.8])
    assert v == pytest.approx(float(4 * mpmath.exp(-mpmath.mpf(2))), rel=1e-14)
    assert v == pytest.approx(0.541341, abs=1e-6)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, 0.8, 3.7])
def test_matern_closed_forms_and_general_nu(nu):
    spec = KernelSpec(MATERN, output_variance=1.7, length_scale=0.9, smoothness=nu)
    for r in [0.0, 1e-6, 0.05, 0.4, 1.3, 4.0]:
        got = kernel_value(spec, [0.0], [r])
        assert got == pytest.approx(bessel_oracle(r, 1.7, 0.9, nu), rel=1e-9, abs=1e-14)


def test_matern_at_zero_is_variance_for_any_nu():
    for nu in [0.3, 1.5, 7.0]:
        assert kernel_value(KernelSpec(MATERN, output_variance=2.5, smoothness=nu), [1.0], [1.0]) == 2.5


def test_matern_bessel_helper_agrees_with_scipy():
    scaled_r = np.array([0.1, 1.0, 3.0])
    nu = 1.2
    s = np.sqrt(2 * nu) * scaled_r
    expected = 2 ** (1 - nu) / special.gamma(nu) * s**nu * special.kv(nu, s)
    assert np.allclose(matern_bessel(scaled_r, nu), expected, rtol=1e-12)


@pytest.mark.xfail(strict=True, reason="Matérn(50) is ~11% above SE at r = 3 lambda; the 1e-3 bound is not a property of the kernels")
def test_matern_fifty_within_1e3_of_se():
    lam = 0.7
    m = KernelSpec(MATERN, length_scale=lam, smoothness=50.0)
    s = KernelSpec(SE, length_scale=lam)
    for r in np.linspace(0, 3 * lam, 31):
        a, b = kernel_value(m, [0.0], [r]), kernel_value(s, [0.0], [r])
        assert abs(a - b) <= 1e-3 * b


def test_matern_fifty_matches_its_bessel_oracle():
    spec = KernelSpec(MATERN, length_scale=0.7, smoothness=50.0)
    for r in np.linspace(0, 2.1, 31):
        assert kernel_value(spec, [0.0], [r]) == pytest.approx(bessel_oracle(r, 1.0, 0.7, 50.0), rel=1e-10)
    big = KernelSpec(MATERN, length_scale=0.7, smoothness=400.0)
    for r in [0.01, 0.5, 2.0]:
        assert kernel_value(big, [0.0], [r]) == pytest.approx(bessel_oracle(r, 1.0, 0.7, 400.0), rel=1e-6)


def test_matern_converges_to_se_as_nu_grows():
    r = np.linspace(0, 3.0, 31)
    se = KernelSpec(SE)
    errs = []
    for nu in [5.0, 50.0, 500.0, 20000.0]:
        m = KernelSpec(MATERN, smoothness=nu)
        errs.append(max(abs(kernel_value(m, [0.0], [x]) / kernel_value(se, [0.0], [x]) - 1) for x in r))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3


def test_kernel_matrix_examples():
    spec = KernelSpec(SE, noise_variance=0.1)
    K = kernel_matrix(spec, [[0.2, 0.4]], add_noise=True)
    assert K == pytest.approx(np.array([[1.1]]))
    K2 = kernel_matrix(KernelSpec(MATERN, output_variance=3.0), [[1.0], [1.0]])
    assert np.array_equal(K2, np.full((2, 2), 3.0))
    assert np.linalg.matrix_rank(K2) == 1


def test_kernel_matrix_eigenvalues_nonnegative():
    X = np.random.default_rng(0).random((5, 3))
    K = kernel_matrix(KernelSpec(SE), X)
    assert np.min(np.linalg.eigvalsh(K)) >= -1e-10


def test_cross_kernel_matches_scalar_loop():
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    spec = KernelSpec(MATERN, output_variance=1.3, length_scale=0.6, smoothness=1.5, noise_variance=0.4)
    C = cross_kernel(spec, X, Y)
    oracle = np.array([[kernel_value(spec, x, y) for y in Y] for x in X])
    assert C.shape == (3, 4)
    assert np.allclose(C, oracle, atol=1e-14)
    assert np.allclose(cross_kernel(spec, X, X), kernel_matrix(spec, X), atol=1e-14)
    assert cross_kernel(spec, X[:1], Y[:1])[0, 0] == pytest.approx(kernel_value(spec, X[0], Y[0]))


def test_invalid_inputs_rejected():
    with pytest.raises(InvalidArgumentError):
        kernel_value(KernelSpec(), [np.nan], [0.0])
    with pytest.raises(InvalidArgumentError):
        kernel_matrix(KernelSpec(), np.empty((0, 2)))
    with pytest.raises(InvalidArgumentError):
        cross_kernel(KernelSpec(), np.zeros((2, 2)), np.zeros((2, 3)))
    for bad in [dict(output_variance=0.0), dict(length_scale=-1.0), dict(smoothness=0.0), dict(noise_variance=-1e-3)]:
        with pytest.raises(InvalidArgumentError):
            KernelSpec(**bad)


def test_spec_round_trip():
    spec = KernelSpec(SE, 2.0, 0.3, 2.5, 0.01)
    assert KernelSpec.from_dict(spec.to_dict()) == spec


specs = st.builds(
    KernelSpec,
    family=st.sampled_from([SE, MATERN]),
    output_variance=st.floats(0.1, 10),
    length_scale=st.floats(0.05, 5),
    smoothness=st.sampled_from([0.5, 1.5, 2.5, 0.9, 4.2]),
)
vectors = st.lists(st.floats(-5, 5), min_size=3, max_size=3)


@given(specs, vectors, vectors)
def test_symmetry(spec, x, y):
    assert kernel_value(spec, x, y) == kernel_value(spec, y, x)


@given(specs, vectors, vectors, vectors)
def test_stationarity(spec, x, y, shift):
    a = kernel_value(spec, x, y)
    b = kernel_value(spec, np.add(x, shift), np.add(y, shift))
    assert abs(a - b) <= 1e-12 * max(1.0, spec.output_variance) + 1e-9 * abs(a)


@settings(max_examples=50)
@given(specs, st.integers(1, 20), st.integers(0, 10_000))
def test_psd(spec, n, seed):
    X = np.random.default_rng(seed).uniform(-2, 2, size=(n, 3))
    K = kernel_matrix(spec, X)
    assert np.allclose(K, K.T, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(K)) >= -1e-8 * spec.output_variance
