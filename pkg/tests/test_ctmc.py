"""Generator, schedule, kernel, and reversal invariants."""

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg

from diffpg.ctmc import (
    NoiseSchedule,
    SequenceSpec,
    TokenGenerator,
    Vocab,
    build_generator,
    check_sequence,
    reverse_rates,
    token_reference_dist,
    transition_kernel,
)
from diffpg.errors import ConfigError, DomainError


def make_generator(kind: str, m: int) -> TokenGenerator:
    mask = m - 1 if kind == "absorbing" else None
    return build_generator(Vocab(size=m, mask_index=mask), kind)


class TestGenerators:
    def test_uniform_base_m2(self):
        """The two-token uniform base is the symmetric rate-1/2 flip."""
        g = make_generator("uniform", 2)
        np.testing.assert_allclose(g.base, [[-0.5, 0.5], [0.5, -0.5]])

    @pytest.mark.parametrize("kind", ["uniform", "absorbing"])
    @pytest.mark.parametrize("m", [2, 3, 5])
    def test_columns_conserve_mass(self, kind, m):
        g = make_generator(kind, m)
        np.testing.assert_allclose(g.base.sum(axis=0), np.zeros(m), atol=1e-15)
        off_diag = g.base - np.diag(np.diag(g.base))
        assert np.all(off_diag >= 0)

    def test_absorbing_structure(self):
        """Every non-mask token flows to the mask at rate 1; the mask stays."""
        g = make_generator("absorbing", 4)
        mask = 3
        np.testing.assert_allclose(g.base[:, mask], 0.0)
        for a in range(3):
            assert g.base[mask, a] == 1.0
            assert g.base[a, a] == -1.0

    def test_reference_dist(self):
        gu = make_generator("uniform", 4)
        np.testing.assert_allclose(token_reference_dist(gu), np.full(4, 0.25))
        ga = make_generator("absorbing", 4)
        np.testing.assert_allclose(token_reference_dist(ga), [0, 0, 0, 1])

    def test_reference_is_stationary(self):
        """base @ ref = 0 for both noise families."""
        for kind in ("uniform", "absorbing"):
            g = make_generator(kind, 5)
            np.testing.assert_allclose(
                g.base @ token_reference_dist(g), np.zeros(5), atol=1e-15
            )

    def test_validation(self):
        with pytest.raises(ConfigError):
            Vocab(size=1)
        with pytest.raises(ConfigError):
            Vocab(size=4, mask_index=4)
        with pytest.raises(ConfigError):
            build_generator(Vocab(size=4), "absorbing")
        with pytest.raises(ConfigError):
            build_generator(Vocab(size=4), "gaussian")
        with pytest.raises(ConfigError):
            SequenceSpec(Vocab(size=4), length=0)


class TestSchedules:
    @pytest.mark.parametrize("kind", ["linear", "geometric"])
    def test_cumulative_matches_quadrature(self, kind):
        """cumulative(t) agrees with numerically integrating sigma."""
        sched = NoiseSchedule(kind=kind, sigma_min=0.05, sigma_max=7.0, horizon=2.0)
        for t in [0.0, 0.3, 1.0, 1.7, 2.0]:
            ref, _ = scipy.integrate.quad(lambda u: float(sched.sigma(u)), 0.0, t)
            np.testing.assert_allclose(sched.cumulative(t), ref, atol=1e-9)

    @pytest.mark.parametrize("kind", ["linear", "geometric"])
    def test_cumulative_starts_at_zero_and_grows(self, kind):
        sched = NoiseSchedule(kind=kind, sigma_min=0.01, sigma_max=3.0)
        assert sched.cumulative(0.0) == 0.0
        grid = sched.cumulative(np.linspace(0.0, 1.0, 97))
        assert np.all(np.diff(grid) > 0)

    def test_endpoints(self):
        sched = NoiseSchedule(kind="geometric", sigma_min=0.2, sigma_max=8.0)
        np.testing.assert_allclose(sched.sigma(0.0), 0.2)
        np.testing.assert_allclose(sched.sigma(1.0), 8.0)

    def test_constant_schedule(self):
        """sigma_min == sigma_max degenerates cleanly for both kinds."""
        for kind in ("linear", "geometric"):
            sched = NoiseSchedule(kind=kind, sigma_min=1.0, sigma_max=1.0)
            np.testing.assert_allclose(sched.sigma([0.0, 0.4, 1.0]), 1.0)
            np.testing.assert_allclose(sched.cumulative(0.7), 0.7, atol=1e-14)

    def test_time_domain_enforced(self):
        sched = NoiseSchedule()
        with pytest.raises(DomainError):
            sched.sigma(-0.5)
        with pytest.raises(DomainError):
            sched.cumulative(1.5)
        with pytest.raises(ConfigError):
            NoiseSchedule(sigma_min=0.0)
        with pytest.raises(ConfigError):
            NoiseSchedule(sigma_min=2.0, sigma_max=1.0)


class TestTransitionKernel:
    @pytest.mark.parametrize("kind", ["uniform", "absorbing"])
    @pytest.mark.parametrize("m", [2, 3, 5])
    def test_matches_matrix_exponential(self, kind, m):
        """The closed form equals expm of the integrated generator."""
        g = make_generator(kind, m)
        sched = NoiseSchedule(kind="geometric", sigma_min=0.1, sigma_max=4.0)
        for s, t in [(0.0, 0.25), (0.1, 0.9), (0.5, 0.5), (0.0, 1.0)]:
            sbar = float(sched.cumulative(t) - sched.cumulative(s))
            expected = scipy.linalg.expm(sbar * g.base)
            np.testing.assert_allclose(
                transition_kernel(g, sched, s, t), expected, atol=1e-12
            )

    @pytest.mark.parametrize("kind", ["uniform", "absorbing"])
    def test_chapman_kolmogorov(self, kind):
        """K(s, t) @ K(0, s) == K(0, t) for the column convention."""
        g = make_generator(kind, 4)
        sched = NoiseSchedule(sigma_min=0.2, sigma_max=3.0)
        k_early = transition_kernel(g, sched, 0.0, 0.4)
        k_late = transition_kernel(g, sched, 0.4, 1.0)
        k_full = transition_kernel(g, sched, 0.0, 1.0)
        np.testing.assert_allclose(k_late @ k_early, k_full, atol=1e-10)

    @pytest.mark.parametrize("kind", ["uniform", "absorbing"])
    def test_columns_stochastic(self, kind):
        g = make_generator(kind, 3)
        sched = NoiseSchedule()
        k = transition_kernel(g, sched, 0.1, 0.8)
        assert np.all(k >= 0)
        np.testing.assert_allclose(k.sum(axis=0), np.ones(3), atol=1e-12)

    def test_zero_elapsed_is_identity(self):
        g = make_generator("uniform", 3)
        sched = NoiseSchedule()
        np.testing.assert_allclose(
            transition_kernel(g, sched, 0.3, 0.3), np.eye(3), atol=1e-15
        )

    def test_rejects_backward_interval(self):
        g = make_generator("uniform", 3)
        with pytest.raises(DomainError):
            transition_kernel(g, NoiseSchedule(), 0.5, 0.2)


class TestReverseRates:
    def test_pairs_ratio_with_opposite_forward_rate(self):
        """rate(x -> y) = ratio * sigma * base[x_i, a] with zeroed self slots."""
        g = make_generator("uniform", 3)
        sched = NoiseSchedule(sigma_min=0.5, sigma_max=0.5)
        x = np.array([1, 2])
        ratios = np.array([[2.0, 1.0, 0.25], [0.5, 3.0, 1.0]])
        rates = reverse_rates(g, sched, 0.3, x, ratios)
        # base off-diagonal is 1/3 and sigma is 0.5 everywhere
        np.testing.assert_allclose(
            rates, [[2.0 / 6, 0.0, 0.25 / 6], [0.5 / 6, 3.0 / 6, 0.0]]
        )

    def test_absorbing_freezes_unmasked_positions(self):
        """Only masked positions can move under the absorbing reversal."""
        g = make_generator("absorbing", 3)
        sched = NoiseSchedule(sigma_min=1.0, sigma_max=1.0)
        x = np.array([0, 2])  # position 1 is the mask
        ratios = np.ones((2, 3))
        rates = reverse_rates(g, sched, 0.5, x, ratios)
        np.testing.assert_allclose(rates[0], 0.0)
        np.testing.assert_allclose(rates[1], [1.0, 1.0, 0.0])

    def test_detailed_balance_with_exact_ratios(self):
        """With true marginal ratios, probability flux balances pairwise.

        For a single uniform position the forward base is symmetric, so the
        reversal satisfies p(x) rate(x -> y) == p(y) rate_fwd(y -> x).
        """
        g = make_generator("uniform", 4)
        sched = NoiseSchedule(sigma_min=0.7, sigma_max=0.7)
        p = np.array([0.1, 0.2, 0.3, 0.4])
        for x_tok in range(4):
            x = np.array([x_tok])
            ratios = (p / p[x_tok])[None, :]
            rev = reverse_rates(g, sched, 0.2, x, ratios)
            for y_tok in range(4):
                if y_tok == x_tok:
                    continue
                fwd = 0.7 * g.base[x_tok, y_tok]  # forward jump y -> x
                np.testing.assert_allclose(p[x_tok] * rev[0, y_tok], p[y_tok] * fwd)

    def test_rejects_bad_ratios(self):
        g = make_generator("uniform", 3)
        sched = NoiseSchedule()
        x = np.array([0, 1])
        with pytest.raises(DomainError):
            reverse_rates(g, sched, 0.1, x, np.ones((2, 2)))
        bad = np.ones((2, 3))
        bad[0, 1] = np.inf
        with pytest.raises(DomainError):
            reverse_rates(g, sched, 0.1, x, bad)
        neg = np.ones((2, 3))
        neg[1, 0] = -0.5
        with pytest.raises(DomainError):
            reverse_rates(g, sched, 0.1, x, neg)


class TestCheckSequence:
    def test_accepts_and_copies(self):
        spec = SequenceSpec(Vocab(size=4), length=3)
        out = check_sequence([1, 0, 3], spec)
        assert out.dtype == np.int64
        np.testing.assert_array_equal(out, [1, 0, 3])

    def test_rejects_shape_and_range(self):
        spec = SequenceSpec(Vocab(size=4), length=3)
        with pytest.raises(DomainError):
            check_sequence([1, 2], spec)
        with pytest.raises(DomainError):
            check_sequence([1, 2, 4], spec)
