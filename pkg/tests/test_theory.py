"""Synthetic harnesses for the noise-posterior and variance bounds."""

from __future__ import annotations

import numpy as np
import pytest

from uno.theory import (
    MixtureComponent,
    MixtureConfig,
    check_noise_bound,
    generate_gap_data,
    run_all_checks,
    run_noise_bound_suite,
    run_variance_bound_suite,
    sample_mixture_configs,
    variance_bound_check,
)


class TestMixture:
    def test_cdf_matches_empirical(self):
        comp = MixtureComponent(weight_low=0.7, boundary=0.4)
        rng = np.random.default_rng(0)
        samples = comp.sample(rng, 200_000)
        for tau in (0.1, 0.25, 0.4, 0.6):
            assert comp.cdf(tau) == pytest.approx(float((samples <= tau).mean()), abs=5e-3)

    def test_sampled_configs_respect_separation(self):
        for cfg in sample_mixture_configs(20, seed=5):
            p_h, p_n = cfg.tail_masses()
            assert p_n > 0
            assert p_h / p_n >= 5.0

    def test_single_config_check(self):
        cfg = MixtureConfig(
            alpha=0.6,
            tau=0.2,
            high=MixtureComponent(weight_low=0.8, boundary=0.3),
            noise=MixtureComponent(weight_low=0.02, boundary=0.5),
        )
        row = check_noise_bound(cfg, n_samples=50_000, seed=1)
        assert row["passed"]
        assert row["analytic_posterior"] <= row["bound"] + 1e-12

    def test_suite_passes(self):
        result = run_noise_bound_suite(count=10, n_samples=20_000, seed=3)
        assert result["all_passed"]


class TestVarianceBound:
    def test_singleton_cluster_vacuous(self):
        features = np.array([[0.0, 0.0]])
        rows = variance_bound_check(features, [(0,)], np.array([0.4]), C=1.0, L_psi=1.0)
        assert rows[0]["passed"]
        assert rows[0]["variance"] == 0.0

    def test_lipschitz_generator_all_pass(self):
        result = run_variance_bound_suite(runs=10, seed=2, lipschitz=True)
        assert result["all_passed"], [r for r in result["rows"] if not r["passed"]][:3]
        assert result["clusters_checked"] >= 10

    def test_adversarial_generator_violates(self):
        result = run_variance_bound_suite(runs=3, seed=2, lipschitz=False)
        assert result["violations"] >= 1

    def test_known_violation_detected_directly(self):
        # two nearly identical feature rows with wildly different gaps
        features = np.array([[0.0, 0.0], [1e-4, 0.0]])
        gaps = np.array([0.0, 1.0])
        rows = variance_bound_check(features, [(0, 1)], gaps, C=1.0, L_psi=1.0)
        assert not rows[0]["passed"]


def test_run_all_checks_smoke():
    results = run_all_checks(seed=1, noise_configs=5, variance_runs=5)
    assert results["noise_risk_bound"]["all_passed"]
    assert results["variance_reduction"]["all_passed"]
    assert results["variance_negative_control"]["detected"]
    assert results["all_passed"]
