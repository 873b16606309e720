import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import noise_arrays_loop
from sigma_mlmc.limitlaw import (
    DegenerateDistributionError,
    clt_report,
    independent_components,
    ks_normality,
    loglog_slope,
    noise_arrays,
    noise_arrays_batch,
    noise_variance_report,
    sigma_ablation,
    strong_rate_report,
    theoretical_variance,
)
from sigma_mlmc.model import constant_payoff, get_model
from sigma_mlmc.noise import FineIncrementGrid, Permutation, StreamKey, sample_grid, sample_grids


def test_z2_hand_example():
    grid = FineIncrementGrid(1, 2, 2, np.array([[[0.1, 0.2], [0.3, -0.4]]]))
    z = noise_arrays(grid)
    assert z.z2[1, 0] == pytest.approx(0.10, abs=1e-15)
    assert z.z2[0, 1] == pytest.approx(-0.10, abs=1e-15)
    assert z.z2[0, 0] == 0 and z.z2[1, 1] == 0


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 4), m=st.integers(2, 5), q=st.integers(1, 3), rep=st.integers(0, 10**6))
def test_vectorised_arrays_match_direct_sums(n, m, q, rep):
    grid = sample_grid(StreamKey(3, "noise", 0, rep), n, m, q)
    z = noise_arrays(grid)
    for got, want in zip((z.z0, z.z1, z.z2, z.z3), noise_arrays_loop(grid.delta)):
        np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-13)


def test_z3_vanishes_and_z2_antisymmetric_on_many_grids():
    arr = noise_arrays_batch(sample_grids(StreamKey(4, "noise", 16), 16, 2, 3, 1000))
    assert not arr["z3"].any()
    np.testing.assert_array_equal(arr["z2"], -np.swapaxes(arr["z2"], 1, 2))
    arr3 = noise_arrays_batch(sample_grids(StreamKey(4, "noise", 9), 9, 3, 2, 1000))
    np.testing.assert_array_equal(arr3["z2"], -np.swapaxes(arr3["z2"], 1, 2))
    assert np.abs(arr3["z3"]).max() > 0


def test_theoretical_variances():
    assert theoretical_variance("z1", (1, 0, 0), 2) == 0.25
    assert theoretical_variance("z1", (0, 0, 1), 2) == 0.5
    assert theoretical_variance("z2", (1, 0), 2) == 0.5
    assert theoretical_variance("z2", (1, 1), 3) == 0.0
    assert theoretical_variance("z3", (1, 0, 0), 3) == pytest.approx(2 / 27)
    assert theoretical_variance("z3", (0, 1, 0), 3) == pytest.approx(4 / 27)
    assert theoretical_variance("z3", (0, 0, 0), 2) == 0.0
    with pytest.raises(ValueError):
        theoretical_variance("z9", (0,), 2)


def test_independent_component_count():
    # q^2(q+1)/2 for each of Z1 and Z3, q(q-1)/2 for Z2, and q for W
    for q in (1, 2, 3):
        comps = independent_components(q)
        assert len(comps) == q * q * (q + 1) + q * (q - 1) // 2 + q


def test_small_noise_report_is_sane():
    rep = noise_variance_report(StreamKey(1, "noise", 8), 8, 2, 2, 4000)
    assert rep.row("Z2[2,1]")["theoretical_var"] == 0.5
    assert rep.row("Z2[2,1]")["empirical_var"] == pytest.approx(0.5, rel=0.1)
    assert rep.z3_max_abs == 0.0 and rep.z2_antisymmetry_defect == 0.0
    np.testing.assert_allclose(rep.z0_mean, np.eye(2), atol=0.03)
    assert rep.cov_bound == pytest.approx(4 / np.sqrt(4000))
    with pytest.raises(ValueError):
        noise_variance_report(StreamKey(1, "noise"), 8, 2, 2, 1)


def test_variance_error_shrinks_like_one_over_r():
    def msd(R):
        errs = []
        for seed in range(20):
            rep = noise_variance_report(StreamKey(seed, "noise", 8), 8, 2, 2, R)
            errs.append((rep.row("Z2[2,1]")["empirical_var"] - 0.5) ** 2)
        return np.mean(errs)

    ratio = msd(500) / msd(2000)
    assert 2.0 < ratio < 8.0


def test_loglog_slope_examples():
    s, e = loglog_slope([(1, 1), (2, 4), (4, 16)])
    assert s == pytest.approx(2.0) and e == pytest.approx(0.0, abs=1e-12)
    assert loglog_slope([(1, 2), (2, 2), (4, 2)])[0] == pytest.approx(0.0, abs=1e-12)
    assert loglog_slope([(1, 1), (2, 0.5), (4, 0.25)])[0] == pytest.approx(-1.0)
    for bad in ([(1, 1), (2, 2)], [(1, 1), (2, 0), (4, 1)], [(1, 1), (1, 2), (4, 1)]):
        with pytest.raises(ValueError):
            loglog_slope(bad)


def test_ks_matches_reference_implementation():
    x = np.random.default_rng(0).standard_normal(500) * 3 + 1
    d, p = ks_normality(x)
    z = (x - x.mean()) / x.std(ddof=1)
    ref = stats.kstest(z, "norm", method="asymp")
    assert d == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_ks_null_and_alternative():
    rng = np.random.default_rng(1)
    assert ks_normality(rng.standard_normal(10**4))[1] > 0.01
    assert ks_normality(rng.uniform(size=10**4))[1] < 1e-6
    with pytest.raises(DegenerateDistributionError):
        ks_normality(np.ones(50))
    with pytest.raises(ValueError):
        ks_normality(np.arange(10.0))
    with pytest.warns(UserWarning):
        ks_normality(rng.standard_normal(50))


def test_ks_under_null_is_conservative():
    # standardising by the sample mean and sd shrinks D, so p-values pile up
    # near 1 instead of being uniform; false rejections stay below nominal
    rng = np.random.default_rng(2)
    ps = np.array([ks_normality(rng.standard_normal(400))[1] for _ in range(200)])
    assert np.mean(ps < 0.05) <= 0.05
    assert np.median(ps) > 0.5


def test_rates_additive_model_flags_zero_error():
    rep = strong_rate_report(get_model("additive-2d"), 2, [4, 8, 16, 32], 200, master_seed=1)
    assert rep.u_zero and rep.v_zero
    assert rep.u_slope is None and rep.v_slope is None


def test_rates_identity_sigma_gives_plain_coupling_rate():
    rep = strong_rate_report(get_model("clark-cameron"), 2, [8, 16, 32, 64, 128, 256], 2000,
                             Permutation.identity(2), master_seed=2)
    assert rep.u_zero
    assert -0.65 <= rep.v_slope <= -0.35


def test_rates_trig_model_slopes_and_determinism():
    model = get_model("trig-2d")
    a = strong_rate_report(model, 2, [8, 16, 32, 64, 128], 1000, master_seed=3, sup=True)
    b = strong_rate_report(model, 2, [8, 16, 32, 64, 128], 1000, master_seed=3, sup=True)
    assert a.to_dict() == b.to_dict()
    assert -0.6 <= a.u_slope <= -0.4
    assert -1.15 <= a.v_slope <= -0.85
    assert all(s >= t for s, t in zip(a.sup_rms_u, a.rms_u))
    with pytest.raises(ValueError):
        strong_rate_report(model, 2, [8, 16, 32], 1000)
    with pytest.raises(ValueError):
        strong_rate_report(model, 2, [8, 16, 32, 64], 50)


def test_ablation_reversal_only_matches_rate_report():
    model = get_model("trig-2d")
    ab = sigma_ablation(model, 3, [Permutation.reversal(3)], [3, 9, 27, 81], 300, master_seed=4)
    rr = strong_rate_report(model, 3, [3, 9, 27, 81], 300, master_seed=4, purpose="ablation")
    assert ab.series("(3,2,1)") == [n * n * v for n, v in zip(rr.n_grid, rr.var_v)]
    assert ab.reversal_min_at_largest is None


def test_ablation_argument_errors():
    model = get_model("clark-cameron")
    with pytest.raises(ValueError):
        sigma_ablation(model, 3, [Permutation.identity(3)], [3, 9], 100)
    with pytest.raises(ValueError):
        sigma_ablation(model, 2, [Permutation.reversal(2)], [2, 4], 100)
    with pytest.raises(ValueError):
        sigma_ablation(model, 3, [], [3, 9], 100)


def test_clt_rejects_constant_payoff_and_small_r():
    model = get_model("clark-cameron")
    with pytest.raises(DegenerateDistributionError):
        clt_report(model, constant_payoff(2.0), 4, 2, R=200)
    with pytest.raises(ValueError):
        clt_report(model, constant_payoff(2.0), 4, 2, R=50)
