import math

import numpy as np
import pytest

from dynhmc.targets import (
    MassMatrix,
    PhasePoint,
    builtin_target,
    hamiltonian,
    momentum_refresh,
)

ALL_BUILTINS = [
    builtin_target("standard_gaussian", 3),
    builtin_target("gaussian", 2, sigma=np.array([[2.0, 0.3], [0.3, 1.0]])),
    builtin_target("perturbed_gaussian", 2, a5=0.5),
    builtin_target("double_well", 1),
]


def finite_difference_grad(target, q, eps=1e-6):
    d = q.size
    out = np.empty(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        out[i] = (target.potential(q + e) - target.potential(q - e)) / (2 * eps)
    return out


@pytest.mark.parametrize("target", ALL_BUILTINS, ids=lambda t: t.name)
def test_gradient_matches_finite_differences(target):
    rng = np.random.default_rng(7)
    for _ in range(100):
        q = 3.0 * rng.standard_normal(target.dim)
        g = target.gradient(q)
        fd = finite_difference_grad(target, q)
        assert np.all(np.abs(fd - g) / (1.0 + np.abs(g)) <= 1e-6)


@pytest.mark.parametrize("target", ALL_BUILTINS, ids=lambda t: t.name)
def test_potential_finite(target):
    rng = np.random.default_rng(8)
    for _ in range(50):
        q = 20.0 * rng.standard_normal(target.dim)
        assert math.isfinite(target.potential(q))


def test_lipschitz_constant_statistical():
    for target in ALL_BUILTINS:
        if target.lipschitz_l1 is None:
            continue
        rng = np.random.default_rng(9)
        for _ in range(200):
            q1 = 5.0 * rng.standard_normal(target.dim)
            q2 = 5.0 * rng.standard_normal(target.dim)
            lhs = np.linalg.norm(target.gradient(q1) - target.gradient(q2))
            assert lhs <= target.lipschitz_l1 * np.linalg.norm(q1 - q2) * (1 + 1e-12)


class TestBuiltinConstants:
    def test_standard_gaussian(self):
        t = builtin_target("standard_gaussian", 2)
        q = np.array([0.3, -0.7])
        assert np.allclose(t.gradient(q), q)
        assert t.lipschitz_l1 == 1.0

    def test_diag_precision_l1(self):
        t = builtin_target("gaussian", 2, sigma=np.diag([1.0, 4.0]))
        assert t.lipschitz_l1 == pytest.approx(4.0)

    def test_perturbed_gradient_value(self):
        t = builtin_target("perturbed_gaussian", 1, a5=0.5)
        g = t.gradient(np.array([1.0]))[0]
        assert g == pytest.approx(1.0 + 0.5 * math.tanh(1.0), abs=1e-12)
        assert g == pytest.approx(1.380797, abs=1e-6)
        assert t.lipschitz_l1 == pytest.approx(1.5)
        assert t.growth_class == "h8"
        assert t.constants["rho"] == 1.0

    def test_non_spd_sigma_rejected(self):
        with pytest.raises(ValueError):
            builtin_target("gaussian", 2, sigma=np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            builtin_target("gaussian", 2, sigma=np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            builtin_target("cauchy", 1)

    def test_double_well_shape(self):
        t = builtin_target("double_well", 1)
        assert t.potential(np.array([1.0])) == pytest.approx(-0.25)
        assert t.gradient(np.array([1.0]))[0] == pytest.approx(0.0)
        with pytest.raises(ValueError):
            builtin_target("double_well", 2)


class TestHamiltonian:
    def test_examples(self):
        t = builtin_target("standard_gaussian", 1)
        mass = MassMatrix.identity(1)
        assert hamiltonian(t, mass, PhasePoint(np.zeros(1), np.zeros(1))) == 0.0
        assert hamiltonian(t, mass, PhasePoint(np.ones(1), np.ones(1))) == 1.0
        tp = builtin_target("perturbed_gaussian", 1, a5=1.0)
        h = hamiltonian(tp, mass, PhasePoint(np.ones(1), np.zeros(1)))
        assert h == pytest.approx(0.5 + math.log(math.cosh(1.0)), abs=1e-12)
        assert h == pytest.approx(0.933781, abs=1e-6)

    def test_momentum_sign_symmetry_exact(self):
        t = builtin_target("gaussian", 2, sigma=np.array([[2.0, 0.3], [0.3, 1.0]]))
        mass = MassMatrix.dense(np.array([[1.5, 0.2], [0.2, 0.8]]))
        rng = np.random.default_rng(3)
        for _ in range(50):
            q, p = rng.standard_normal(2), rng.standard_normal(2)
            a = hamiltonian(t, mass, PhasePoint(q, p))
            b = hamiltonian(t, mass, PhasePoint(q, -p))
            assert a == b  # bit-for-bit: p enters only through p^T M^{-1} p

    def test_overflow_flagged_not_raised(self):
        t = builtin_target("double_well", 1)
        mass = MassMatrix.identity(1)
        h = hamiltonian(t, mass, PhasePoint(np.array([1e200]), np.zeros(1)))
        assert h == math.inf

    def test_dimension_mismatch(self):
        t = builtin_target("standard_gaussian", 2)
        with pytest.raises(ValueError):
            hamiltonian(t, MassMatrix.identity(2), PhasePoint(np.zeros(3), np.zeros(3)))


class TestMassMatrix:
    @pytest.mark.parametrize(
        "mass",
        [
            MassMatrix.identity(3),
            MassMatrix.diagonal(np.array([0.5, 2.0, 4.0])),
            MassMatrix.dense(np.array([[2.0, 0.4, 0.0], [0.4, 1.0, 0.1], [0.0, 0.1, 0.7]])),
        ],
        ids=["identity", "diagonal", "dense"],
    )
    def test_round_trip(self, mass):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.standard_normal(3)
            w = mass.inv_mul(mass.mul(v))
            assert np.linalg.norm(w - v) <= 1e-12 * max(1.0, np.linalg.norm(v))

    def test_not_spd_rejected(self):
        with pytest.raises(ValueError):
            MassMatrix.dense(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            MassMatrix.diagonal(np.array([1.0, -1.0]))

    def test_chol_consistent(self):
        mat = np.array([[2.0, 0.4], [0.4, 1.0]])
        mass = MassMatrix.dense(mat)
        z = np.array([0.3, -1.2])
        lz = mass.chol_mul(z)
        chol = np.linalg.cholesky(mat)
        assert np.allclose(lz, chol @ z)


class TestMomentumRefresh:
    def test_deterministic_given_seed(self):
        mass = MassMatrix.diagonal(np.array([4.0]))
        a = momentum_refresh(mass, np.random.default_rng(5))
        b = momentum_refresh(mass, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_identity_covariance(self):
        mass = MassMatrix.identity(2)
        rng = np.random.default_rng(11)
        draws = np.array([momentum_refresh(mass, rng) for _ in range(100_000)])
        cov = np.cov(draws.T)
        # 3 standard-error band: se(cov_ij) ~ 1/sqrt(n)
        assert np.all(np.abs(cov - np.eye(2)) <= 3.0 / math.sqrt(100_000) * 1.5)

    def test_diagonal_variance(self):
        mass = MassMatrix.diagonal(np.array([4.0]))
        rng = np.random.default_rng(13)
        draws = np.array([momentum_refresh(mass, rng)[0] for _ in range(100_000)])
        assert 3.8 <= draws.var() <= 4.2
