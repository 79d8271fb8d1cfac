import math

import numpy as np
import pytest
import scipy.special as sp
import scipy.stats

from moba import (
    ConfigError,
    McEstimate,
    SignalModel,
    effective_gap,
    expected_diff,
    norm_ppf,
    p_fail,
    required_snr,
    simulate_retrieval,
    snr,
    var_diff,
)
from moba.snr import block_scores, measure_gap_stats, retrieval_failed, sample_population


def model(**kw):
    base = dict(d=64, B=128, n=2, k=1, m=1, mu_signal=1.0, mu_noise=0.0, mu_cluster=0.0)
    base.update(kw)
    return SignalModel(**base)


class TestEffectiveGap:
    def test_m1_is_plain_gap(self):
        assert effective_gap(model(mu_signal=0.7, mu_noise=0.1, mu_cluster=0.1)) == pytest.approx(0.6)

    def test_cluster_amplification(self):
        m = model(m=3, mu_signal=0.2, mu_noise=0.0, mu_cluster=0.1)
        assert effective_gap(m) == pytest.approx(0.4)

    def test_cluster_equals_noise_no_lift(self):
        for mm in (1, 4, 9):
            m = model(m=mm, mu_signal=0.5, mu_noise=0.2, mu_cluster=0.2)
            assert effective_gap(m) == pytest.approx(0.3)


class TestSnr:
    def test_closed_form_values(self):
        assert snr(model(d=128, B=64)) == pytest.approx(1.0, abs=1e-15)
        assert snr(model(d=64, B=128)) == pytest.approx(0.5, abs=1e-15)

    def test_quadrupling_B_halves_snr(self):
        assert snr(model(d=32, B=64)) == pytest.approx(2 * snr(model(d=32, B=256)), abs=1e-15)

    def test_components(self):
        m = model(d=16, B=32, mu_signal=0.8)
        assert expected_diff(m) == pytest.approx(0.8 / 32)
        assert var_diff(m) == pytest.approx(2.0 / (16 * 32))

    def test_monotone_in_d_and_B(self):
        snrs_d = [snr(model(d=d)) for d in (8, 16, 32, 64, 128)]
        assert all(a < b for a, b in zip(snrs_d, snrs_d[1:]))
        snrs_B = [snr(model(B=B)) for B in (32, 64, 128, 256)]
        assert all(a > b for a, b in zip(snrs_B, snrs_B[1:]))

    def test_monotone_in_m_with_cluster_lift(self):
        snrs = [snr(model(m=m, mu_cluster=0.2)) for m in (1, 2, 4, 8)]
        assert all(a < b for a, b in zip(snrs, snrs[1:]))


class TestPFail:
    def test_symmetry_at_zero(self):
        assert p_fail(0.0) == 0.5

    def test_against_scipy(self):
        for x in (-3.0, -1.0, -0.25, 0.0, 0.5, 1.0, 2.5, 6.0):
            assert abs(p_fail(x) - scipy.stats.norm.cdf(-x)) <= 1e-12

    def test_unit_snr_value(self):
        assert p_fail(1.0) == pytest.approx(0.15865525393145707, abs=1e-12)

    def test_deep_tail(self):
        assert p_fail(8.0) < 1e-15

    def test_strictly_decreasing(self):
        grid = np.linspace(-4, 4, 81)
        vals = [p_fail(x) for x in grid]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestRequiredSnr:
    def test_median(self):
        assert required_snr(1, 2) == pytest.approx(0.0, abs=1e-12)

    def test_known_value(self):
        assert required_snr(8, 64) == pytest.approx(1.1503493803760083, abs=1e-10)

    def test_against_scipy(self):
        for k, n in ((1, 10), (2, 7), (8, 64), (1, 1000)):
            assert abs(required_snr(k, n) - sp.ndtri(1 - k / n)) <= 1e-10

    def test_round_trip(self):
        for k, n in ((1, 2), (8, 64), (3, 11), (1, 100000)):
            assert abs(p_fail(required_snr(k, n)) - k / n) <= 1e-9

    def test_k_equals_n_always_satisfied(self):
        assert required_snr(5, 5) == -math.inf

    def test_k_above_n_rejected(self):
        with pytest.raises(ConfigError):
            required_snr(6, 5)

    def test_norm_ppf_accuracy_sweep(self):
        for p in (1e-9, 1e-4, 0.02, 0.3, 0.5, 0.77, 0.999, 1 - 1e-9):
            assert abs(norm_ppf(p) - sp.ndtri(p)) <= 1e-10
        with pytest.raises(ValueError):
            norm_ppf(0.0)


class TestSignalModelInvariants:
    def test_m_bounds(self):
        with pytest.raises(ConfigError):
            model(m=0)
        with pytest.raises(ConfigError):
            model(m=129)

    def test_mu_ordering(self):
        with pytest.raises(ConfigError):
            model(mu_cluster=-0.1)
        with pytest.raises(ConfigError):
            model(mu_cluster=1.5)

    def test_k_bounds(self):
        with pytest.raises(ConfigError):
            model(k=3, n=2)


class TestSimulation:
    def test_null_model_is_a_coin_flip(self):
        m = model(mu_signal=0.0)
        est = simulate_retrieval(m, 100_000, seed=3)
        assert abs(est.fail_rate - 0.5) <= 4 * est.std_err

    def test_matches_analytic_prediction(self):
        m = model(d=64, B=128)
        est = simulate_retrieval(m, 100_000, seed=4)
        assert abs(est.fail_rate - p_fail(snr(m))) <= max(4 * est.std_err, 0.01)

    def test_deterministic_given_seed(self):
        m = model()
        a = simulate_retrieval(m, 20_000, seed=5)
        b = simulate_retrieval(m, 20_000, seed=5)
        assert a.fail_rate == b.fail_rate

    def test_thread_count_does_not_change_results(self):
        m = model()
        a = simulate_retrieval(m, 30_000, seed=6, threads=1)
        b = simulate_retrieval(m, 30_000, seed=6, threads=4)
        assert a.fail_rate == b.fail_rate

    def test_methods_agree(self):
        m = model(d=16, B=32)
        dots = simulate_retrieval(m, 20_000, seed=7, method="dots")
        keys = simulate_retrieval(m, 3_000, seed=8, method="keys")
        assert abs(dots.fail_rate - keys.fail_rate) <= 4 * (dots.std_err + keys.std_err)

    def test_std_err_formula(self):
        est = simulate_retrieval(model(), 10_000, seed=9)
        assert est.std_err == pytest.approx(
            math.sqrt(est.fail_rate * (1 - est.fail_rate) / est.trials)
        )

    def test_bad_trials(self):
        with pytest.raises(ConfigError):
            simulate_retrieval(model(), 0, seed=1)

    def test_cluster_lift_reduces_failures(self):
        base = simulate_retrieval(model(d=16, B=64, mu_signal=0.5), 60_000, seed=10)
        lifted = simulate_retrieval(
            model(d=16, B=64, m=8, mu_signal=0.5, mu_cluster=0.3), 60_000, seed=10
        )
        assert lifted.fail_rate < base.fail_rate

    def test_rank_based_failure_with_many_blocks(self):
        # with n blocks and rank-k success, failures exceed the pairwise rate
        m_pair = model(d=16, B=32)
        m_many = model(d=16, B=32, n=8, k=1)
        pair = simulate_retrieval(m_pair, 50_000, seed=11)
        many = simulate_retrieval(m_many, 50_000, seed=11)
        assert many.fail_rate > pair.fail_rate
        # and stays below the union bound
        assert many.fail_rate <= min(1.0, (m_many.n - 1) * p_fail(snr(m_many))) + 0.02


class TestKeysGenerator:
    def test_population_moments(self):
        rng = np.random.default_rng(12)
        m = model(d=32, B=16, n=2, m=4, mu_signal=0.9, mu_cluster=0.4)
        dots_sig, dots_cluster, dots_noise = [], [], []
        for _ in range(200):
            q, keys = sample_population(m, rng)
            dots_sig.append(q @ keys[0])
            dots_cluster.extend(q @ keys[1:4].T)
            dots_noise.extend(q @ keys[16:].T)
        assert np.mean(dots_sig) == pytest.approx(0.9, abs=1e-12)
        assert np.mean(dots_cluster) == pytest.approx(0.4, abs=1e-12)
        assert abs(np.mean(dots_noise)) <= 4 / math.sqrt(len(dots_noise) * 32)
        assert np.var(dots_noise) == pytest.approx(1 / 32, rel=0.2)

    def test_unit_norms(self):
        rng = np.random.default_rng(13)
        m = model(d=16, B=8, n=2, mu_signal=0.5)
        q, keys = sample_population(m, rng)
        np.testing.assert_allclose(np.linalg.norm(keys, axis=1), 1.0, atol=1e-12)

    def test_scale_invariance_of_selection(self):
        rng_a = np.random.default_rng(14)
        rng_b = np.random.default_rng(14)
        m = model(d=16, B=16, n=4, k=2, mu_signal=0.6)
        for _ in range(50):
            q, keys = sample_population(m, rng_a)
            q2, keys2 = sample_population(m, rng_b)
            scores = block_scores(q, keys, m.B)
            scaled = block_scores(q2, 3.7 * keys2, m.B)
            assert retrieval_failed(scores, m.k) == retrieval_failed(scaled, m.k)
            assert np.array_equal(np.argsort(scores), np.argsort(scaled))

    def test_nonzero_mu_noise_shift(self):
        rng = np.random.default_rng(15)
        m = model(d=32, B=8, n=2, mu_signal=1.0, mu_noise=0.3, mu_cluster=0.3)
        dots = []
        for _ in range(400):
            q, keys = sample_population(m, rng)
            dots.extend(q @ keys[8:].T)
        assert np.mean(dots) == pytest.approx(0.3, abs=0.02)


class TestAnalyticEmpiricalGrid:
    CELLS = [(16, 128), (32, 128), (64, 128), (128, 128), (128, 64), (128, 32)]

    def test_agreement_and_monotonicity(self):
        rates, snrs = [], []
        for i, (d, B) in enumerate(self.CELLS):
            m = model(d=d, B=B)
            s = snr(m)
            est = simulate_retrieval(m, 30_000, seed=20 + i)
            assert abs(est.fail_rate - p_fail(s)) <= max(4 * est.std_err, 0.01), (d, B)
            rates.append(est.fail_rate)
            snrs.append(s)
        order = np.argsort(snrs)
        sorted_rates = np.asarray(rates)[order]
        assert all(a > b for a, b in zip(sorted_rates, sorted_rates[1:]))

    def test_logit_regression_sign(self):
        # logit(fail rate) falls as sqrt(d/B) grows
        xs, ys = [], []
        for i, (d, B) in enumerate(self.CELLS):
            est = simulate_retrieval(model(d=d, B=B), 20_000, seed=40 + i)
            xs.append(math.sqrt(d / B))
            ys.append(math.log(est.fail_rate / (1 - est.fail_rate)))
        slope = np.polyfit(xs, ys, 1)[0]
        assert slope < 0

    def test_empirical_variance_near_analytic(self):
        m = model(d=64, B=64)
        mean_d, var_d = measure_gap_stats(m, 40_000, seed=50)
        assert mean_d == pytest.approx(expected_diff(m), abs=4 * math.sqrt(var_diff(m) / 40_000))
        assert var_d == pytest.approx(var_diff(m), rel=0.1)


def test_mc_estimate_fields():
    est = McEstimate(fail_rate=0.25, std_err=0.01, trials=100, seed=1)
    assert 0 <= est.fail_rate <= 1
