import math

import numpy as np
import pytest

from dynhmc.kernels import (
    KernelConfig,
    hmc_accept_prob,
    hmc_step,
    make_kernel,
    nuts_exact_pmf,
    nuts_recursive_index_batch,
    nuts_step_iterative,
    nuts_step_recursive,
    nuts_transition_iterative,
    nuts_transition_recursive,
    rhmc_step,
)
from dynhmc.targets import MassMatrix, PhasePoint, Target, builtin_target
from dynhmc.verify import chi2_gof

STD1 = builtin_target("standard_gaussian", 1)
STD2 = builtin_target("standard_gaussian", 2)
I1 = MassMatrix.identity(1)
I2 = MassMatrix.identity(2)


def flat_target(dim):
    return Target(dim=dim, potential=lambda q: 0.0, gradient=lambda q: np.zeros(dim), name="flat")


class TestKernelConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            KernelConfig("nuts_iterative", h=-0.1, mass=I1)
        with pytest.raises(ValueError):
            KernelConfig("nuts_iterative", h=0.1, mass=I1, k_m=0)
        with pytest.raises(ValueError):
            KernelConfig("wat", h=0.1, mass=I1)
        with pytest.raises(ValueError):
            KernelConfig("rhmc", h=0.1, mass=I1, weights=np.array([0.5, 0.6]))


class TestIterativeNuts:
    def test_flat_km1_jumps_one_step(self):
        t = flat_target(1)
        cfg = KernelConfig("nuts_iterative", h=0.3, mass=I1, k_m=1)
        rng = np.random.default_rng(0)
        lefts = rights = 0
        for _ in range(2000):
            q, info = nuts_step_iterative(t, cfg, np.zeros(1), rng)
            assert info.k_f == 1
            assert info.j_f in (-1, 1)  # equal weights force the move
            if info.j_f == 1:
                rights += 1
            else:
                lefts += 1
        assert abs(rights / 2000 - 0.5) < 0.05

    def test_small_h_displacement_bound(self):
        cfg = KernelConfig("nuts_iterative", h=1e-6, mass=I1, k_m=4)
        rng = np.random.default_rng(1)
        q0 = np.array([0.7])
        for _ in range(20):
            q1, info = nuts_step_iterative(STD1, cfg, q0, rng)
            # |q' - q| <= 2^K_m h (|p| + 1); p is O(1) here
            assert abs(q1[0] - q0[0]) <= 16 * 1e-6 * 10

    def test_gradient_budget(self):
        cfg = KernelConfig("nuts_iterative", h=0.5, mass=I2, k_m=5)
        rng = np.random.default_rng(2)
        q = np.zeros(2)
        for _ in range(100):
            q, info = nuts_step_iterative(STD2, cfg, q, rng)
            assert info.n_grad <= 1 << (info.k_f + 1)
            assert info.i_f[0] <= info.j_f <= info.i_f[1]

    def test_transition_info_has_no_momentum(self):
        from dynhmc.kernels import TransitionInfo
        import dataclasses

        names = {f.name for f in dataclasses.fields(TransitionInfo)}
        assert "p" not in names and "momentum" not in names

    def test_deterministic_given_seed(self):
        cfg = KernelConfig("nuts_iterative", h=0.5, mass=I2, k_m=4)
        out1, _ = nuts_step_iterative(STD2, cfg, np.ones(2), np.random.default_rng(33))
        out2, _ = nuts_step_iterative(STD2, cfg, np.ones(2), np.random.default_rng(33))
        assert np.array_equal(out1, out2)

    def test_divergent_anchor_stays_put(self):
        dw = builtin_target("double_well", 1)
        cfg = KernelConfig("nuts_iterative", h=0.1, mass=I1, k_m=3)
        q0 = np.array([1e100])  # potential overflows
        q1, info = nuts_step_iterative(dw, cfg, q0, np.random.default_rng(3))
        assert info.diverged and np.array_equal(q1, q0)


class TestExactPmf:
    def test_km1_equal_weights(self):
        t = flat_target(1)
        cfg = KernelConfig("nuts_iterative", h=0.3, mass=I1, k_m=1)
        pmf = nuts_exact_pmf(t, cfg, PhasePoint(np.zeros(1), np.ones(1)))
        probs = pmf.probs_dict()
        assert probs == {-1: pytest.approx(0.5), 1: pytest.approx(0.5)}

    def test_flat_km2_symmetric_no_stay(self):
        t = flat_target(1)
        cfg = KernelConfig("nuts_iterative", h=0.3, mass=I1, k_m=2)
        pmf = nuts_exact_pmf(t, cfg, PhasePoint(np.zeros(1), np.ones(1)))
        probs = pmf.probs_dict()
        assert probs.get(0, 0.0) == 0.0
        for j in (1, 2, 3):
            assert probs[j] == pytest.approx(probs[-j], abs=1e-15)

    @pytest.mark.parametrize("h,k_m", [(0.6, 2), (1.2, 3), (0.9, 4)])
    def test_sums_to_one(self, h, k_m):
        cfg = KernelConfig("nuts_iterative", h=h, mass=I1, k_m=k_m)
        rng = np.random.default_rng(k_m)
        for _ in range(5):
            x0 = PhasePoint(rng.standard_normal(1) * 1.5, rng.standard_normal(1))
            pmf = nuts_exact_pmf(STD1, cfg, x0)
            assert abs(pmf.total() - 1.0) <= 1e-12

    def test_support_in_reachable_range(self):
        cfg = KernelConfig("nuts_iterative", h=1.0, mass=I1, k_m=3)
        pmf = nuts_exact_pmf(STD1, cfg, PhasePoint(np.array([2.0]), np.array([0.5])))
        for j in pmf.support():
            assert -(2**3) + 1 <= j <= 2**3 - 1

    def test_budget_guard(self):
        cfg = KernelConfig("nuts_iterative", h=1.0, mass=I1, k_m=9)
        with pytest.raises(ValueError):
            nuts_exact_pmf(STD1, cfg, PhasePoint(np.zeros(1), np.ones(1)))


class TestSamplersAgainstPmf:
    @pytest.mark.parametrize("k_m", [1, 2, 3])
    def test_iterative_matches_exact_pmf(self, k_m):
        cfg = KernelConfig("nuts_iterative", h=1.1, mass=I1, k_m=k_m)
        x0 = PhasePoint(np.array([1.4]), np.array([-0.6]))
        pmf = nuts_exact_pmf(STD1, cfg, x0).probs_dict()
        rng = np.random.default_rng(k_m)
        n = 20000
        counts: dict[int, int] = {}
        for _ in range(n):
            _, info = nuts_transition_iterative(STD1, cfg, x0, rng)
            counts[info.j_f] = counts.get(info.j_f, 0) + 1
        assert chi2_gof(counts, pmf, n) >= 1e-3

    @pytest.mark.parametrize("k_m", [1, 2, 3])
    def test_recursive_matches_exact_pmf(self, k_m):
        cfg = KernelConfig("nuts_recursive", h=1.1, mass=I1, k_m=k_m)
        x0 = PhasePoint(np.array([1.4]), np.array([-0.6]))
        pmf = nuts_exact_pmf(STD1, cfg, x0).probs_dict()
        rng = np.random.default_rng(100 + k_m)
        n = 20000
        counts: dict[int, int] = {}
        for _ in range(n):
            _, info = nuts_transition_recursive(STD1, cfg, x0, rng)
            counts[info.j_f] = counts.get(info.j_f, 0) + 1
        assert chi2_gof(counts, pmf, n) >= 1e-3

    @pytest.mark.parametrize("k_m", [1, 2, 3])
    def test_batch_twin_matches_scalar_recursive(self, k_m):
        cfg = KernelConfig("nuts_recursive", h=0.9, mass=I2, k_m=k_m)
        rng = np.random.default_rng(7)
        x0 = PhasePoint(rng.standard_normal(2), rng.standard_normal(2))
        pmf = nuts_exact_pmf(STD2, cfg, x0).probs_dict()
        idx = nuts_recursive_index_batch(STD2, cfg, x0, 40000, rng)
        counts: dict[int, int] = {}
        for j in idx.tolist():
            counts[j] = counts.get(j, 0) + 1
        assert chi2_gof(counts, pmf, 40000) >= 1e-3

    def test_mutated_kernel_fails_gof(self):
        # negative control: removing the swap coin must break the law
        # (anchor chosen so some swap ratio is genuinely below 1)
        cfg = KernelConfig("nuts_iterative", h=1.1, mass=I1, k_m=3)
        x0 = PhasePoint(np.array([0.5]), np.array([-1.5]))
        pmf = nuts_exact_pmf(STD1, cfg, x0).probs_dict()
        rng = np.random.default_rng(11)
        n = 20000
        counts: dict[int, int] = {}
        for _ in range(n):
            _, info = nuts_transition_iterative(STD1, cfg, x0, rng, mutate="always-swap")
            counts[info.j_f] = counts.get(info.j_f, 0) + 1
        assert chi2_gof(counts, pmf, n) < 1e-3


class TestRecursiveMemory:
    def test_peak_states_linear_in_depth(self):
        cfg = KernelConfig("nuts_recursive", h=0.15, mass=I2, k_m=6)
        rng = np.random.default_rng(13)
        worst_boundary = 0
        for _ in range(50):
            _, info = nuts_step_recursive(
                STD2, cfg, rng.standard_normal(2), rng, count_states=True
            )
            assert info.peak_states is not None
            worst_boundary = max(worst_boundary, info.peak_states)
        # far below the 2^{K_m+1} - 1 = 127 states the table-based sampler holds
        assert worst_boundary <= 3 * (cfg.k_m + 1) + 2


class TestHmc:
    def test_flat_always_accepts(self):
        t = flat_target(2)
        cfg = KernelConfig("hmc", h=0.4, mass=I2, t=7)
        rng = np.random.default_rng(0)
        for _ in range(50):
            _, info = hmc_step(t, cfg, np.zeros(2), rng)
            assert info.accepted is True

    def test_sqrt2_degeneracy_always_accepts(self):
        # T = 2, h = sqrt(2): the map is -identity, so Delta H = 0 exactly
        cfg = KernelConfig("hmc", h=math.sqrt(2.0), mass=I1, t=2)
        rng = np.random.default_rng(1)
        for _ in range(100):
            q0 = rng.standard_normal(1) * 2
            q1, info = hmc_step(STD1, cfg, q0, rng)
            assert info.accepted is True
            assert abs(q1[0] + q0[0]) <= 1e-12  # proposal is -q0

    def test_acceptance_rate_small_h(self):
        cfg = KernelConfig("hmc", h=0.1, mass=I1, t=10)
        rng = np.random.default_rng(2)
        q = np.zeros(1)
        acc = 0
        n = 10000
        for _ in range(n):
            q, info = hmc_step(STD1, cfg, q, rng)
            acc += info.accepted
        assert acc / n >= 0.99

    def test_dual_formulations_agree(self):
        cfg = KernelConfig("hmc", h=0.7, mass=I1, t=5)
        rng = np.random.default_rng(3)
        for _ in range(100):
            x0 = PhasePoint(rng.standard_normal(1) * 2, rng.standard_normal(1))
            a = hmc_accept_prob(STD1, cfg, x0, formulation="metropolis")
            b = hmc_accept_prob(STD1, cfg, x0, formulation="dynamic")
            assert abs(a - b) <= 1e-12

    def test_diverged_proposal_rejected(self):
        dw = builtin_target("double_well", 1)
        cfg = KernelConfig("hmc", h=5.0, mass=I1, t=10)
        rng = np.random.default_rng(4)
        q0 = np.array([10.0])
        q1, info = hmc_step(dw, cfg, q0, rng)
        assert info.accepted is False and np.array_equal(q1, q0)

    def test_mala_is_t1(self):
        cfg = KernelConfig("hmc", h=0.5, mass=I1, t=1)
        rng = np.random.default_rng(5)
        _, info = hmc_step(STD1, cfg, np.zeros(1), rng)
        assert info.t == 1 and info.n_grad == 2


class TestRhmc:
    def test_degenerate_weights_pin_t(self):
        w = np.zeros(4)
        w[3] = 1.0
        cfg = KernelConfig("rhmc", h=0.3, mass=I1, weights=w)
        rng = np.random.default_rng(0)
        for _ in range(50):
            _, info = rhmc_step(STD1, cfg, np.zeros(1), rng)
            assert info.t == 4

    def test_degenerate_first_weight_is_mala(self):
        cfg = KernelConfig("rhmc", h=0.3, mass=I1, weights=np.array([1.0]))
        _, info = rhmc_step(STD1, cfg, np.zeros(1), np.random.default_rng(1))
        assert info.t == 1

    def test_uniform_mixture_frequencies(self):
        cfg = KernelConfig("rhmc", h=0.3, mass=I1, weights=np.array([0.5, 0.5]))
        rng = np.random.default_rng(2)
        ts = [rhmc_step(STD1, cfg, np.zeros(1), rng)[1].t for _ in range(4000)]
        frac1 = sum(t == 1 for t in ts) / len(ts)
        assert abs(frac1 - 0.5) < 0.04
        assert set(ts) == {1, 2}

    def test_mixture_positions_match_components(self):
        # with the component pinned, rhmc and hmc sample identical laws
        w = np.zeros(3)
        w[2] = 1.0
        cfg_r = KernelConfig("rhmc", h=0.4, mass=I1, weights=w)
        cfg_h = KernelConfig("hmc", h=0.4, mass=I1, t=3)
        rng_r = np.random.default_rng(9)
        rng_h = np.random.default_rng(9)
        xr = [rhmc_step(STD1, cfg_r, np.zeros(1), rng_r)[0][0] for _ in range(3000)]
        xh = [hmc_step(STD1, cfg_h, np.zeros(1), rng_h)[0][0] for _ in range(3000)]
        from scipy import stats as sps

        assert sps.ks_2samp(xr, xh).pvalue >= 1e-3


class TestMakeKernel:
    @pytest.mark.parametrize(
        "kind,extra",
        [
            ("nuts_iterative", {"k_m": 3}),
            ("nuts_recursive", {"k_m": 3}),
            ("hmc", {"t": 4}),
            ("rhmc", {"weights": np.array([0.3, 0.7])}),
        ],
    )
    def test_all_kinds_step(self, kind, extra):
        cfg = KernelConfig(kind, h=0.4, mass=I2, **extra)
        kernel = make_kernel(STD2, cfg)
        q, info = kernel(np.zeros(2), np.random.default_rng(0))
        assert q.shape == (2,)
        assert info.n_grad >= 1
