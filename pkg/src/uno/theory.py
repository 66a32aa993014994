"""Executable checks of the two theoretical guarantees.

These run on synthetic generators only, never on live data: the noise
posterior bound is checked by Monte-Carlo simulation of an explicit
high-quality/noise mixture, and the variance-reduction bound by a rule
generator constructed to be exactly Lipschitz (plus a deliberately
non-Lipschitz generator as a negative control).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .clustering import ward_cluster
from .gap import RiskBoundInput, noise_risk_bound


# ---------------------------------------------------------------------------
# Noise risk bound (posterior of noise given a small gap)


@dataclass(frozen=True)
class MixtureComponent:
    """Piecewise-uniform gap distribution: probability ``weight_low`` of
    U[0, boundary], otherwise U[boundary, 1].  Closed-form CDF keeps the
    tail masses exact."""

    weight_low: float
    boundary: float

    def cdf(self, tau: float) -> float:
        if tau >= self.boundary:
            low = self.weight_low
            high = (1 - self.weight_low) * (tau - self.boundary) / (1 - self.boundary)
            return low + high
        return self.weight_low * tau / self.boundary

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        low_mask = rng.random(n) < self.weight_low
        u = rng.random(n)
        values = np.where(
            low_mask, u * self.boundary, self.boundary + u * (1 - self.boundary)
        )
        return values


@dataclass(frozen=True)
class MixtureConfig:
    alpha: float
    tau: float
    high: MixtureComponent
    noise: MixtureComponent

    def tail_masses(self) -> tuple[float, float]:
        return self.high.cdf(self.tau), self.noise.cdf(self.tau)


def sample_mixture_configs(count: int, seed: int, min_separation: float = 5.0) -> list[MixtureConfig]:
    """Random configurations honoring the low-gap separation assumption:
    the noise tail mass below tau is at least ``min_separation`` times
    smaller than the high-quality tail mass."""
    rng = np.random.default_rng(seed)
    configs: list[MixtureConfig] = []
    while len(configs) < count:
        tau = float(rng.uniform(0.05, 0.3))
        high = MixtureComponent(
            weight_low=float(rng.uniform(0.5, 0.9)),
            boundary=float(rng.uniform(tau, 0.5)),
        )
        noise = MixtureComponent(
            weight_low=float(rng.uniform(0.005, 0.08)),
            boundary=float(rng.uniform(max(tau, 0.3), 0.8)),
        )
        alpha = float(rng.uniform(0.2, 0.95))
        cfg = MixtureConfig(alpha=alpha, tau=tau, high=high, noise=noise)
        p_h, p_n = cfg.tail_masses()
        if p_n <= 0.0 or p_h / p_n < min_separation:
            continue
        configs.append(cfg)
    return configs


def check_noise_bound(
    config: MixtureConfig, n_samples: int = 100_000, seed: int = 0
) -> dict:
    """Monte-Carlo posterior P(noise | gap <= tau) against the closed-form
    bound; passes when the estimate stays within three standard errors."""
    rng = np.random.default_rng(seed)
    p_h, p_n = config.tail_masses()
    bound = noise_risk_bound(RiskBoundInput(alpha=config.alpha, p_h=p_h, p_n=p_n))

    is_high = rng.random(n_samples) < config.alpha
    gaps = np.where(
        is_high,
        config.high.sample(rng, n_samples),
        config.noise.sample(rng, n_samples),
    )
    below = gaps <= config.tau
    denom = int(below.sum())
    if denom == 0:
        empirical, sigma = 0.0, 0.0
    else:
        empirical = float((below & ~is_high).sum() / denom)
        sigma = math.sqrt(max(empirical * (1 - empirical), 1e-12) / denom)

    analytic = ((1 - config.alpha) * p_n) / ((1 - config.alpha) * p_n + config.alpha * p_h)
    return {
        "alpha": config.alpha,
        "tau": config.tau,
        "p_h": p_h,
        "p_n": p_n,
        "bound": bound,
        "analytic_posterior": analytic,
        "empirical_posterior": empirical,
        "sigma": sigma,
        "n_below": denom,
        "passed": bool(empirical <= bound + 3 * sigma and analytic <= bound + 1e-12),
    }


def run_noise_bound_suite(count: int = 50, n_samples: int = 100_000, seed: int = 0) -> dict:
    rows = [
        check_noise_bound(cfg, n_samples=n_samples, seed=seed + i)
        for i, cfg in enumerate(sample_mixture_configs(count, seed))
    ]
    return {"configurations": rows, "all_passed": all(r["passed"] for r in rows)}


# ---------------------------------------------------------------------------
# Variance reduction via clustering


def variance_bound_check(
    features: np.ndarray,
    partition: Sequence[Sequence[int]],
    gaps: np.ndarray,
    C: float,
    L_psi: float,
) -> list[dict]:
    """Per cluster: Var(gap) against [C * (1 + L_psi) * diameter]^2, with
    the diameter measured on the clustering features.  Singletons pass
    vacuously (zero variance against a zero bound)."""
    rows = []
    for k, members in enumerate(partition):
        members = list(members)
        cluster_gaps = gaps[members]
        var = float(np.var(cluster_gaps))
        pts = features[members]
        if len(members) > 1:
            diffs = pts[:, None, :] - pts[None, :, :]
            epsilon = float(np.sqrt((diffs**2).sum(axis=2)).max())
        else:
            epsilon = 0.0
        bound = (C * (1 + L_psi) * epsilon) ** 2
        passed = var < bound or (var == 0.0 and bound == 0.0)
        rows.append(
            {
                "cluster": k,
                "size": len(members),
                "variance": var,
                "epsilon": epsilon,
                "bound": bound,
                "passed": bool(passed),
            }
        )
    return rows


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q


@dataclass(frozen=True)
class SyntheticGapData:
    features: np.ndarray
    gaps: np.ndarray


def generate_gap_data(
    seed: int,
    n_centers: int = 3,
    per_center: int = 8,
    dim: int = 3,
    C: float = 1.0,
    L_psi: float = 1.0,
    lipschitz: bool = True,
) -> SyntheticGapData:
    """Queries in tight blobs; the rule-prediction map is exactly
    L_psi-Lipschitz (a scaled rotation) unless ``lipschitz`` is False, in
    which case predictions jump discontinuously inside each blob."""
    rng = np.random.default_rng(seed)
    rotation = _random_rotation(dim, rng)
    centers = rng.normal(size=(n_centers, dim)) * 10.0
    query_emb = np.concatenate(
        [centers[k] + rng.normal(size=(per_center, dim)) * 0.01 for k in range(n_centers)]
    )
    n = query_emb.shape[0]

    predicted = L_psi * (query_emb @ rotation.T)
    if not lipschitz:
        # Jump direction decided by a fine-grained parity of the query
        # embedding: nearby queries get wildly different predictions.
        parity = (np.floor(query_emb[:, 0] * 1e4).astype(np.int64) % 2).astype(float)
        predicted = predicted + np.outer(parity * 3.0, np.ones(dim))

    # Distilled rules sit near the predictions with a per-center offset.
    offsets = np.concatenate(
        [
            np.full((per_center, dim), 0.3 / math.sqrt(dim)) * (1 + 0.2 * k)
            + rng.normal(size=(per_center, dim)) * 0.005
            for k in range(n_centers)
        ]
    )
    rules_emb = predicted + offsets if lipschitz else (L_psi * (query_emb @ rotation.T)) + offsets

    gaps = np.minimum(1.0, C * np.linalg.norm(rules_emb - predicted, axis=1))
    features = np.concatenate([query_emb, rules_emb], axis=1)
    return SyntheticGapData(features=features, gaps=gaps)


def run_variance_bound_suite(
    runs: int = 100, seed: int = 0, C: float = 1.0, L_psi: float = 1.0, lipschitz: bool = True
) -> dict:
    all_rows = []
    for i in range(runs):
        data = generate_gap_data(seed=seed + i, C=C, L_psi=L_psi, lipschitz=lipschitz)
        result = ward_cluster(data.features, epsilon_var=1.0)
        rows = variance_bound_check(data.features, result.partition, data.gaps, C=C, L_psi=L_psi)
        for row in rows:
            row["run"] = i
        all_rows.extend(rows)
    violations = [r for r in all_rows if not r["passed"]]
    return {
        "runs": runs,
        "clusters_checked": len(all_rows),
        "violations": len(violations),
        "all_passed": not violations,
        "rows": all_rows,
    }


def run_all_checks(seed: int = 0, noise_configs: int = 50, variance_runs: int = 100) -> dict:
    """Everything the `theory` CLI verb reports."""
    theorem1 = run_noise_bound_suite(count=noise_configs, seed=seed)
    theorem2 = run_variance_bound_suite(runs=variance_runs, seed=seed, lipschitz=True)
    negative = run_variance_bound_suite(runs=5, seed=seed + 10_000, lipschitz=False)
    return {
        "noise_risk_bound": {
            "all_passed": theorem1["all_passed"],
            "configurations": theorem1["configurations"],
        },
        "variance_reduction": {
            "all_passed": theorem2["all_passed"],
            "clusters_checked": theorem2["clusters_checked"],
            "violations": theorem2["violations"],
        },
        "variance_negative_control": {
            "violations": negative["violations"],
            "detected": negative["violations"] > 0,
        },
        "all_passed": bool(
            theorem1["all_passed"] and theorem2["all_passed"] and negative["violations"] > 0
        ),
    }
