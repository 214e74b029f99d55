import csv
import math

import numpy as np
import pytest

from mimae.errors import ContractError
from mimae.mi_verify import (
    REPORT_COLUMNS,
    GaussianPairSpec,
    SandwichRow,
    club_estimate,
    club_from_posterior,
    club_of_true_conditional,
    fit_approx,
    gen_correlated_gaussian,
    infonce_estimate,
    sandwich_report,
    true_conditional,
    true_gaussian_mi,
    write_report,
)
from mimae.model import ApproxNet


# -------------------------------------------------------------- sampling
def test_samples_match_requested_correlation():
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, 0.0, 10_000, 0))
    assert abs(np.corrcoef(x[:, 0], z[:, 0])[0, 1]) < 0.05
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, 0.9, 10_000, 0))
    assert np.corrcoef(x[:, 0], z[:, 0])[0, 1] == pytest.approx(0.9, abs=0.02)
    assert z.var() == pytest.approx(1.0, abs=0.05)


def test_samples_are_independent_across_dimensions():
    x, z = gen_correlated_gaussian(GaussianPairSpec(3, 0.6, 10_000, 1))
    c = np.corrcoef(np.concatenate([x, z], axis=1).T)
    assert x.shape == z.shape == (10_000, 3) and x.dtype == np.float32
    for d in range(3):
        assert c[d, 3 + d] == pytest.approx(0.6, abs=0.03)
        for e in range(3):
            if e != d:
                assert abs(c[d, 3 + e]) < 0.05


def test_samples_deterministic_per_seed():
    a = gen_correlated_gaussian(GaussianPairSpec(2, 0.3, 500, 7))
    b = gen_correlated_gaussian(GaussianPairSpec(2, 0.3, 500, 7))
    c = gen_correlated_gaussian(GaussianPairSpec(2, 0.3, 500, 8))
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.array_equal(a[0], c[0])


@pytest.mark.parametrize("kwargs", [dict(rho=1.0), dict(rho=-1.2), dict(n=99), dict(dim=0)])
def test_pair_spec_validation(kwargs):
    with pytest.raises(ContractError):
        GaussianPairSpec(**kwargs)


# ---------------------------------------------------------------- oracle
def test_closed_form_mi_values():
    assert true_gaussian_mi(0.0) == 0.0
    assert true_gaussian_mi(0.5) == pytest.approx(0.1438, abs=5e-5)
    assert true_gaussian_mi(0.9) == pytest.approx(0.8304, abs=5e-5)
    assert true_gaussian_mi(0.5, dim=4) == pytest.approx(4 * true_gaussian_mi(0.5))
    assert true_gaussian_mi(-0.9) == true_gaussian_mi(0.9)
    with pytest.raises(ContractError):
        true_gaussian_mi(1.0)


@pytest.mark.parametrize("rho", [0.0, 0.3, 0.6, 0.9])
def test_club_with_true_conditional_matches_its_expectation(rho):
    """With q the exact conditional, CLUB averages rho^2 / (1 - rho^2) per dimension."""
    n = 10_000
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, rho, n, 3))
    post = true_conditional(rho, x)
    value = club_from_posterior(post.mu.data, post.sigma.data, z)
    # per-sample terms have unit-order spread scaled by 1/(1-rho^2)
    assert value == pytest.approx(club_of_true_conditional(rho), abs=3.0 / math.sqrt(n) / (1 - rho * rho))
    assert value >= true_gaussian_mi(rho) - 3.0 / math.sqrt(n)


@pytest.mark.xfail(strict=True, reason="CLUB under the exact conditional is rho^2/(1-rho^2), not the MI")
def test_club_with_true_conditional_equals_true_mi_literal():
    n = 10_000
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, 0.9, n, 3))
    post = true_conditional(0.9, x)
    assert club_from_posterior(post.mu.data, post.sigma.data, z) == pytest.approx(
        true_gaussian_mi(0.9), abs=3 / math.sqrt(n))


def test_club_from_posterior_matches_all_pairs(rng):
    x = rng.normal(size=(60, 2))
    z = rng.normal(size=(60, 2))
    mu, sigma = 0.4 * x, np.abs(rng.normal(size=(60, 2))) + 0.3
    lp = -0.5 * ((z[None, :, :] - mu[:, None, :]) ** 2 / sigma[:, None, :] ** 2
                 + 2 * np.log(sigma[:, None, :])).sum(axis=2)  # (i, k)
    brute = float((np.diag(lp) - lp.mean(axis=1)).mean())
    assert club_from_posterior(mu, sigma, z) == pytest.approx(brute, rel=1e-10)


# ----------------------------------------------------------- estimators
@pytest.fixture(scope="module")
def independent():
    return gen_correlated_gaussian(GaussianPairSpec(1, 0.0, 10_000, 0))


def test_club_near_zero_without_dependence(independent):
    x, z = independent
    est = club_estimate(fit_approx(x, z, seed=0), x, z)
    assert abs(est.value) < 0.05 and est.reliable


def test_club_untrained_net_is_flagged(independent):
    x, z = independent
    assert not club_estimate(ApproxNet(1, 8, 1, seed=0), x, z).reliable


def test_club_permutation_invariant():
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, 0.5, 2000, 0))
    fit = fit_approx(x, z, epochs=30, seed=0)
    perm = np.random.default_rng(0).permutation(2000)
    a = club_estimate(fit, x, z).value
    assert club_estimate(fit, x[perm], z[perm]).value == pytest.approx(a, rel=1e-5)


def test_club_upper_bounds_at_moderate_correlation():
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, 0.5, 10_000, 0))
    assert club_estimate(fit_approx(x, z, seed=0), x, z).value >= true_gaussian_mi(0.5) - 0.1


def test_infonce_near_zero_without_dependence(independent):
    x, z = independent
    est = infonce_estimate(x, z, seed=0)
    assert abs(est.value) < 0.05 and est.value <= est.bound == pytest.approx(math.log(128))


def test_infonce_never_exceeds_log_batch():
    # a deterministic relation lets the critic separate every pair
    x, _ = gen_correlated_gaussian(GaussianPairSpec(2, 0.0, 2000, 0))
    for batch in (2, 8):
        est = infonce_estimate(x, x.copy(), batch=batch, epochs=3, seed=0)
        assert est.value <= math.log(batch)


def test_infonce_deterministic_and_errors():
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, 0.6, 1000, 0))
    a = infonce_estimate(x, z, epochs=3, seed=4)
    assert a == infonce_estimate(x, z, epochs=3, seed=4)
    with pytest.raises(ContractError):
        infonce_estimate(x, z, batch=1)
    with pytest.raises(ContractError):
        infonce_estimate(x[:200], z[:200], batch=128)


def test_fit_approx_deterministic():
    x, z = gen_correlated_gaussian(GaussianPairSpec(1, 0.6, 1000, 0))
    a = fit_approx(x, z, epochs=5, seed=2).nll_history
    assert a == fit_approx(x, z, epochs=5, seed=2).nll_history


# -------------------------------------------------------------- report
def test_sandwich_report_rows_and_csv(tmp_path):
    rows = sandwich_report([0.0, 0.9], n=2000, data_seed=0, train_seed=0)
    assert len(rows) == 2 and [r.rho for r in rows] == [0.0, 0.9]
    path = write_report(tmp_path / "sub" / "bench.csv", rows)
    with path.open() as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == REPORT_COLUMNS and len(table) == 3
    assert float(table[2][2]) == pytest.approx(0.8304, abs=5e-5)


def test_sandwich_failures_are_listed_not_raised():
    row = SandwichRow(0.5, 1, 0.1438, club=0.0, infonce=0.3, pass_club=False, pass_infonce=False)
    msgs = row.failures()
    assert len(msgs) == 2 and "CLUB" in msgs[0] and "InfoNCE" in msgs[1]
    assert SandwichRow(0.5, 1, 0.1438, 0.2, 0.1, True, True).failures() == []
