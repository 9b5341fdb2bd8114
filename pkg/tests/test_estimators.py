import math

import numpy as np
import pytest

from lyapunov_lab.ensembles import CocycleSpec, NormBoundError, RngStream, rotation
from lyapunov_lab.estimators import (
    MC_CHUNK,
    FrameCollapseError,
    Method,
    PreconditionError,
    SpectrumEstimate,
    Verdict,
    approx_precondition,
    asymptotic_spectrum,
    estimate_approx_mc,
    estimate_direct,
    estimate_exact_mc,
    expected_log_minus_abs,
    gap_conjecture_report,
    paired_approx_difference,
    quadrature_oracle_d1,
    sigma_equivalence_test,
    simulate_sigma_chain,
    theta_log_moment,
)
from lyapunov_lab.stats import combined_se

# Frozen oracles: mpmath quadrature at 30 digits.
E_LOG_1P_01N = -0.005077641677765454235  # E log|1 + 0.1 N|
E_LOG_1P_05N = -0.17279531948605697224  # E log|1 + 0.5 N|
E_LOGMINUS_EPSN = {0.05: 3.6309136962847300784, 0.1: 2.937766515724784769, 3.0: 0.26433604604456235483}
E_LOGMINUS_1P_01N = 0.042705685611878130402  # E log^-|1 + 0.1 N|


def within(a, b, se, k=3.0):
    return np.all(np.abs(np.asarray(a) - np.asarray(b)) <= k * np.asarray(se))


# -- asymptotic ---------------------------------------------------------------------

def test_asymptotic_examples():
    est = asymptotic_spectrum(4, 0.1)
    np.testing.assert_allclose(est.lambdas, [0.01, 0.0, -0.01, -0.02], rtol=1e-14, atol=1e-18)
    assert np.all(est.std_errs == 0) and est.method is Method.ASYMPTOTIC
    for eps in (0.0, 0.3, 2.0):
        assert asymptotic_spectrum(2, eps).lambdas[0] == 0.0
    assert asymptotic_spectrum(3, 0.2).lambdas[2] == pytest.approx(-0.06, rel=1e-14)
    with pytest.raises(ValueError):
        asymptotic_spectrum(0, 0.1)


def test_spectrum_estimate_validation():
    with pytest.raises(ValueError):
        SpectrumEstimate(2, 0.1, [0.0], [0.0, 0.0], Method.EXACT_MC, 10, (0, 1))
    with pytest.raises(ValueError):
        SpectrumEstimate(1, 0.1, [0.0], [np.nan], Method.EXACT_MC, 10, (0, 1))


# -- quadrature oracle ------------------------------------------------------------

def test_quadrature_matches_frozen_values():
    assert quadrature_oracle_d1(0.1) == pytest.approx(E_LOG_1P_01N, abs=1e-12)
    assert quadrature_oracle_d1(0.5) == pytest.approx(E_LOG_1P_05N, abs=1e-10)


def test_quadrature_small_eps():
    assert abs(quadrature_oracle_d1(1e-8)) <= 1e-10


def test_quadrature_near_leading_term():
    eps = 0.1
    assert abs(quadrature_oracle_d1(eps) + eps**2 / 2) <= 10 * eps**4 * abs(math.log(eps)) ** 4


@pytest.mark.parametrize("eps", [0.1, 0.5, 2.0])
def test_quadrature_split_self_consistency(eps):
    assert quadrature_oracle_d1(eps, split=True) == pytest.approx(
        quadrature_oracle_d1(eps, split=False), abs=1e-10)


def test_quadrature_rejects_nonpositive():
    with pytest.raises(ValueError):
        quadrature_oracle_d1(0.0)


def test_expected_log_minus_frozen():
    for eps, ref in E_LOGMINUS_EPSN.items():
        assert expected_log_minus_abs(0.0, eps) == pytest.approx(ref, rel=1e-9)
    assert expected_log_minus_abs(1.0, 0.1) == pytest.approx(E_LOGMINUS_1P_01N, rel=1e-9)


# -- exact Monte Carlo --------------------------------------------------------------

def test_exact_mc_d1_against_quadrature():
    est = estimate_exact_mc(1, 0.1, 200_000, RngStream(1))
    assert within(est.lambdas, E_LOG_1P_01N, est.std_errs)
    assert est.n_units == 200_000 and est.method is Method.EXACT_MC


@pytest.mark.parametrize("d,eps", [(1, 0.5), (3, 0.1), (5, 1.0), (4, 1e-4)])
def test_determinant_sum_rule(d, eps):
    est = estimate_exact_mc(d, eps, 20_000, RngStream(2, d))
    assert abs(est.lambdas.sum() - est.log_det_mean) <= 1e-10


def test_exact_mc_d2_near_leading_terms():
    eps = 0.05
    est = estimate_exact_mc(2, eps, 10**6, RngStream(3))
    band = eps**4 * abs(math.log(eps)) ** 4
    assert np.all(np.abs(est.lambdas - [0.0, -eps**2]) <= 3 * est.std_errs + band)


def test_exact_mc_worker_count_invariance():
    n = 2 * MC_CHUNK + 123
    a = estimate_exact_mc(3, 0.2, n, RngStream(4), workers=1)
    b = estimate_exact_mc(3, 0.2, n, RngStream(4), workers=2)
    assert a.lambdas.tobytes() == b.lambdas.tobytes()
    assert a.std_errs.tobytes() == b.std_errs.tobytes()


def test_exact_mc_clt_scaling():
    se = [estimate_exact_mc(2, 0.1, n, RngStream(5, n)).std_errs for n in (10**4, 10**5, 10**6)]
    for small, big in zip(se, se[1:]):
        np.testing.assert_allclose(small / big, math.sqrt(10), rtol=0.2)


def test_exact_mc_antithetic_is_unbiased():
    plain = estimate_exact_mc(2, 0.3, 400_000, RngStream(6, 0))
    anti = estimate_exact_mc(2, 0.3, 400_000, RngStream(6, 1), antithetic=True)
    assert within(plain.lambdas, anti.lambdas, combined_se(plain.std_errs, anti.std_errs))
    assert np.all(anti.std_errs < plain.std_errs)
    with pytest.raises(ValueError):
        estimate_exact_mc(2, 0.3, 1001, RngStream(6), antithetic=True)


def test_exact_mc_argument_checks():
    with pytest.raises(ValueError):
        estimate_exact_mc(2, 0.0, 100, RngStream(0))
    with pytest.raises(ValueError):
        estimate_exact_mc(2, 0.1, 1, RngStream(0))


def test_large_noise_has_no_degenerate_samples():
    est = estimate_exact_mc(4, 5.0, 50_000, RngStream(7))
    assert est.n_degenerate == 0
    assert np.all(np.diff(est.lambdas) < 0)


# -- approximant ----------------------------------------------------------------

def test_approx_precondition_arithmetic():
    assert not approx_precondition(3, 0.2)
    assert not approx_precondition(3, 1e-3)  # 6.9e-3 >= 1/300
    assert approx_precondition(3, 1e-4)
    with pytest.raises(PreconditionError):
        estimate_approx_mc(3, 0.2, 1000, RngStream(0))


def test_approx_equals_exact_in_one_dimension():
    eps = 1e-3
    a = estimate_approx_mc(1, eps, 10_000, RngStream(8))
    e = estimate_exact_mc(1, eps, 10_000, RngStream(8))
    np.testing.assert_array_equal(a.lambdas, e.lambdas)


def test_approx_difference_within_rate_envelope():
    eps = 1e-3
    diff = paired_approx_difference(3, eps, 200_000, RngStream(9))
    bound = 10 * (eps * abs(math.log(eps))) ** 4 + 3 * diff.std_errs
    assert np.all(np.abs(diff.mean) <= bound)
    assert diff.mean[0] == 0.0


def test_paired_difference_matches_separate_runs():
    eps = 1e-4
    a = estimate_approx_mc(3, eps, 50_000, RngStream(10))
    e = estimate_exact_mc(3, eps, 50_000, RngStream(10))
    diff = paired_approx_difference(3, eps, 50_000, RngStream(10))
    np.testing.assert_allclose(a.lambdas - e.lambdas, diff.mean, atol=1e-17)


# -- direct -------------------------------------------------------------------

@pytest.mark.parametrize("spec", [
    CocycleSpec.identity(3, 0.0),
    CocycleSpec.fixed(rotation(0.7), 0.0),
    CocycleSpec.haar(4, 0.0),
])
def test_direct_isometries_give_zero(spec):
    est = estimate_direct(spec, 3000, 1, RngStream(0))
    assert np.all(np.abs(est.lambdas) <= 1e-15)


def test_direct_diagonal_base():
    spec = CocycleSpec.constant(np.diag([2.0, 0.5]), 0.0)
    est = estimate_direct(spec, 3000, 1, RngStream(0))
    np.testing.assert_allclose(est.lambdas, [math.log(2), -math.log(2)], rtol=1e-15)
    np.testing.assert_allclose(est.std_errs, 0.0, atol=1e-15)


def test_direct_matches_exact_mc_d3():
    direct = estimate_direct(CocycleSpec.haar(3, 0.1), 300_000, 1, RngStream(11, 0))
    exact = estimate_exact_mc(3, 0.1, 300_000, RngStream(11, 1))
    assert within(direct.lambdas, exact.lambdas, combined_se(direct.std_errs, exact.std_errs))


def test_direct_reorth_period_invariance():
    spec = CocycleSpec.identity(3, 0.2)
    a = estimate_direct(spec, 300_000, 1, RngStream(12, 0))
    b = estimate_direct(spec, 300_000, 10, RngStream(12, 1))
    assert within(a.lambdas, b.lambdas, combined_se(a.std_errs, b.std_errs))


def test_direct_partial_final_block():
    spec = CocycleSpec.constant(np.diag([2.0, 0.5]), 0.0)
    est = estimate_direct(spec, 3005, 10, RngStream(0))
    np.testing.assert_allclose(est.lambdas, [math.log(2), -math.log(2)], rtol=1e-13)


def test_direct_is_reproducible():
    spec = CocycleSpec.haar(2, 0.3)
    a = estimate_direct(spec, 10_000, 1, RngStream(13))
    b = estimate_direct(spec, 10_000, 1, RngStream(13))
    assert a.lambdas.tobytes() == b.lambdas.tobytes()


def test_direct_frame_collapse():
    spec = CocycleSpec.constant(np.diag([1e30, 1e-30]), 0.0)
    with pytest.raises(FrameCollapseError):
        estimate_direct(spec, 3000, 100, RngStream(0))


def test_direct_argument_checks():
    with pytest.raises(ValueError):
        estimate_direct(CocycleSpec.identity(2, 0.1), 10, 20)
    with pytest.raises(ValueError):
        estimate_direct(CocycleSpec.identity(2, 0.1), 100, 10)  # 10 blocks < 30 batches


# -- sigma chain ------------------------------------------------------------------

def test_sigma_chain_zero_noise_stays_identity():
    run = simulate_sigma_chain(3, 0.0, 1000, RngStream(0))
    np.testing.assert_array_equal(run.state.diag, np.ones(3))
    assert run.state.step == 1000


def test_sigma_chain_states_are_sorted():
    run, inc = simulate_sigma_chain(3, 0.5, 2000, RngStream(1), keep_increments=True)
    path = np.cumsum(inc, axis=0)
    assert np.all(np.diff(path, axis=1) <= 1e-12)
    np.testing.assert_allclose(path[-1], run.state.log_diag, atol=1e-9)


def test_sigma_chain_matches_exact_mc():
    run = simulate_sigma_chain(2, 0.1, 10**5, RngStream(14, 0))
    exact = estimate_exact_mc(2, 0.1, 10**5, RngStream(14, 1))
    est = run.estimate
    np.testing.assert_allclose(est.lambdas, run.state.log_diag / 10**5, rtol=1e-12)
    assert within(est.lambdas, exact.lambdas, combined_se(est.std_errs, exact.std_errs))


def test_sigma_chain_matches_direct():
    run = simulate_sigma_chain(3, 0.2, 10**5, RngStream(15, 0))
    direct = estimate_direct(CocycleSpec.haar(3, 0.2), 10**5, 1, RngStream(15, 1))
    assert within(run.estimate.lambdas, direct.lambdas,
                  combined_se(run.estimate.std_errs, direct.std_errs))


def test_sigma_chain_long_run_stays_finite():
    run = simulate_sigma_chain(3, 1.0, 50_000, RngStream(16))
    assert np.all(np.isfinite(run.state.log_diag))
    assert run.state.log_diag[0] - run.state.log_diag[-1] > 1000


def test_sigma_equivalence_same_sampler_sanity():
    # n = 1 with O = I: both sides are D(I + eps N)
    passed = sum(sigma_equivalence_test(2, 0.2, 1, 1000, RngStream(17, i), base="identity").top.pvalue > 0.01
                 for i in range(100))
    assert passed >= 98


def test_sigma_equivalence_argument_checks():
    with pytest.raises(ValueError):
        sigma_equivalence_test(2, 0.2, 33, 1000, RngStream(0))
    with pytest.raises(ValueError):
        sigma_equivalence_test(2, 0.2, 4, 999, RngStream(0))


# -- theta -------------------------------------------------------------------------

def test_theta_moment_large_eps_d1():
    rep = theta_log_moment(1, 3.0, 20_000, RngStream(18))
    assert rep.bound == pytest.approx(E_LOGMINUS_EPSN[3.0], rel=1e-9)
    assert rep.satisfied


def test_theta_moment_large_eps_columnwise_bound():
    # For d > 1 and large eps only the per-column form holds: theta is a
    # minimum of d distances, each with E log^- <= E log^-|eps N|.
    d = 3
    rep = theta_log_moment(d, 3.0, 20_000, RngStream(18))
    assert not rep.satisfied
    assert rep.mean <= d * rep.bound + 3 * rep.std_err


def test_theta_moment_d1_against_quadrature():
    rep = theta_log_moment(1, 0.1, 10**5, RngStream(19))
    assert abs(rep.mean - E_LOGMINUS_1P_01N) <= 3 * rep.std_err


# -- gap harness -------------------------------------------------------------------

def test_gap_report_orthogonal_base_matches_baseline():
    rep = gap_conjecture_report(CocycleSpec.haar(3, 0.1), [0.1, 0.2], 100_000, 100_000, RngStream(20))
    assert rep.differences.shape == (2, 2)
    assert np.all(np.abs(rep.differences) <= 3 * rep.std_errs)
    assert all(v is not Verdict.VIOLATION for row in rep.verdicts for v in row)


def test_gap_report_contracting_diagonal():
    rep = gap_conjecture_report(CocycleSpec.constant(np.diag([1.0, 0.5]), 0.05), [0.05],
                                50_000, 50_000, RngStream(21))
    assert rep.verdicts[0][0] in (Verdict.CONSISTENT, Verdict.INCONCLUSIVE)
    (row,) = list(rep.rows())
    assert row["verdict"] == rep.verdicts[0][0].value and row["j"] == 1


def test_gap_report_rejects_large_base():
    with pytest.raises(NormBoundError):
        gap_conjecture_report(CocycleSpec.constant(np.diag([1.5, 1.0]), 0.1), [0.1], 3000, 1000, RngStream(0))
    spec = CocycleSpec.user(2, 0.1, lambda g: 1.5 * np.eye(2))
    with pytest.raises(NormBoundError):
        gap_conjecture_report(spec, [0.1], 3000, 1000, RngStream(0))


def test_gap_report_rejects_bad_grid():
    with pytest.raises(ValueError):
        gap_conjecture_report(CocycleSpec.haar(2, 0.1), [], 3000, 1000, RngStream(0))
    with pytest.raises(ValueError):
        gap_conjecture_report(CocycleSpec.haar(2, 0.1), [0.0], 3000, 1000, RngStream(0))
