"""
Tests for the plug-in estimator, TSLS, first-stage F and the Hausman contrast
"""

import unittest

import attrs
import numpy as np

from mlss_iv.core.data_model import Dataset, DesignPair, FoldAssignment, design_matrices, make_folds
from mlss_iv.core.errors import ConfigError, DegenerateDesignError, WeakIdentificationError
from mlss_iv.core.estimator import (
    F_CAP,
    first_stage_F,
    forbidden_regression,
    fwl_residualize,
    hausman_test,
    mlss_estimate,
    ols_estimate,
    per_fold_estimates,
    subvector_tau,
    transform_instruments,
    tsls,
)
from mlss_iv.core.instruments import InstrumentMatrix, WeightingScheme, generate_instrument
from mlss_iv.core.learners import LearnerSpec


def _pair(t):
    t = np.asarray(t, dtype=float)
    return DesignPair(t=t, z=t, p_d=1, p_x=t.shape[1] - 2)


def _iv_dataset(n=300, p_w=3, p_x=0, seed=0, endogenous=True):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, p_w))
    x = rng.normal(size=(n, p_x))
    u = rng.normal(size=n)
    v = rng.normal(size=n) + (0.8 * u if endogenous else 0.0)
    d = w @ np.linspace(1.0, 0.5, p_w) + x.sum(axis=1) * 0.3 + v
    y = 1.5 * d + x.sum(axis=1) + u
    return Dataset(y=y, d=d[:, None], x=x, w=w)


class TestPluginEstimate(unittest.TestCase):
    """Test cases for mlss_estimate"""

    def test_hand_example(self):
        """Three rows solve to (alpha, tau) = (0, 2)"""
        ups = np.array([[1, 0], [1, 1], [1, 2]], dtype=float)
        t = np.array([[1, 0], [1, 1], [1, 1]], dtype=float)
        y = np.array([0.0, 2.0, 2.0])
        est = mlss_estimate(InstrumentMatrix.from_array(ups, [1]), _pair(t), y)
        np.testing.assert_allclose(est.theta_hat, [0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(est.g_hat * 3, [[3, 2], [3, 3]])

    def test_noiseless_outcome(self):
        """Y = T theta0 gives theta0 and a zero meat matrix"""
        rng = np.random.default_rng(1)
        t = np.column_stack([np.ones(50), rng.normal(size=50)])
        ups = np.column_stack([np.ones(50), t[:, 1] + rng.normal(size=50)])
        theta0 = np.array([0.5, -1.5])
        est = mlss_estimate(InstrumentMatrix.from_array(ups, [1]), _pair(t), t @ theta0)
        np.testing.assert_allclose(est.theta_hat, theta0, atol=1e-10)
        np.testing.assert_allclose(est.omega_hat, 0.0, atol=1e-20)

    def test_exogenous_collapse_to_ols(self):
        """Using T as its own instrument reproduces OLS"""
        rng = np.random.default_rng(2)
        t = np.column_stack([np.ones(40), rng.normal(size=40), rng.normal(size=40)])
        y = t @ np.array([1.0, 2.0, 3.0]) + rng.normal(size=40)
        est = mlss_estimate(InstrumentMatrix.from_array(t, [1]), _pair(t), y)
        np.testing.assert_allclose(est.theta_hat, np.linalg.lstsq(t, y, rcond=None)[0], atol=1e-10)

    def test_sandwich_and_hc1(self):
        """vcov is G^-1 Omega G^-T / n and HC1 rescales it by n/(n-k)"""
        ds = _iv_dataset(n=200, p_w=1)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=0), LearnerSpec("ols"))
        pair = design_matrices(ds)
        est = mlss_estimate(inst, pair, ds.y)
        g_inv = np.linalg.inv(est.g_hat)
        np.testing.assert_allclose(est.vcov, g_inv @ est.omega_hat @ g_inv.T / 200, rtol=1e-10)
        hc1 = mlss_estimate(inst, pair, ds.y, hc1=True)
        np.testing.assert_allclose(hc1.vcov, est.vcov * 200 / 198, rtol=1e-10)
        np.testing.assert_allclose(est.vcov, est.vcov.T)

    def test_singular_g_raises(self):
        """A constant instrument column makes G singular"""
        t = np.column_stack([np.ones(10), np.arange(10.0)])
        ups = np.column_stack([np.ones(10), np.full(10, 2.0)])
        with self.assertRaises(WeakIdentificationError) as ctx:
            mlss_estimate(InstrumentMatrix.from_array(ups, [1]), _pair(t), np.arange(10.0))
        self.assertGreater(ctx.exception.condition_number, 1e12)

    def test_names_and_properties(self):
        """Names default to const/d_/x_ and tau accessors pick the treatment block"""
        ds = _iv_dataset(n=120, p_w=2, p_x=1)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=1), LearnerSpec("ols"))
        est = mlss_estimate(inst, design_matrices(ds), ds.y)
        self.assertEqual(est.names, ("const", "d_0", "x_0"))
        self.assertEqual(est.tau.shape, (1,))
        self.assertAlmostEqual(float(est.tau_se[0]), float(np.sqrt(est.vcov[1, 1])))

    def test_invertible_instrument_transform(self):
        """Replacing the instrument rows by A'u for invertible A changes neither theta nor V"""
        ds = _iv_dataset(n=200, p_w=2, p_x=1, seed=13)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=3), LearnerSpec("ols"))
        pair = design_matrices(ds)
        a = np.array([[2.0, 0.5, 0.0], [0.0, -1.5, 0.3], [1.0, 0.0, 4.0]])
        moved = attrs.evolve(inst, upsilon=inst.upsilon @ a)
        base, est = mlss_estimate(inst, pair, ds.y), mlss_estimate(moved, pair, ds.y)
        np.testing.assert_allclose(est.theta_hat, base.theta_hat, atol=1e-9)
        np.testing.assert_allclose(est.vcov, base.vcov, rtol=1e-7, atol=1e-12)

    def test_outcome_and_treatment_scaling(self):
        """Scaling Y scales theta; scaling D rescales tau only"""
        ds = _iv_dataset(n=200, p_w=2, p_x=1, seed=14)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=5), LearnerSpec("ols"))
        pair = design_matrices(ds)
        base = mlss_estimate(inst, pair, ds.y)
        np.testing.assert_allclose(mlss_estimate(inst, pair, 3.0 * ds.y).theta_hat, 3.0 * base.theta_hat, atol=1e-9)
        t = np.array(pair.t)
        t[:, 1] *= 4.0
        scaled = mlss_estimate(inst, DesignPair(t=t, z=pair.z, p_d=1, p_x=1), ds.y)
        np.testing.assert_allclose(scaled.theta_hat, base.theta_hat * np.array([1.0, 0.25, 1.0]), atol=1e-9)
        self.assertAlmostEqual(float(scaled.tau_se[0]), float(base.tau_se[0]) / 4.0, places=9)

    def test_vcov_positive_semidefinite(self):
        """The sandwich covariance has no negative eigenvalues"""
        for seed, learner in ((15, "ols"), (16, "polynomial"), (17, "gradient_boosting")):
            with self.subTest(learner=learner):
                ds = _iv_dataset(n=200, p_w=3, p_x=2, seed=seed)
                spec = LearnerSpec(learner, {"n_trees": 20} if learner == "gradient_boosting" else {})
                inst = generate_instrument(ds, make_folds(ds.n, 2, seed=seed), spec)
                est = mlss_estimate(inst, design_matrices(ds), ds.y, hc1=True)
                np.testing.assert_allclose(est.vcov, est.vcov.T, atol=1e-14)
                eig = np.linalg.eigvalsh(est.vcov)
                self.assertGreaterEqual(eig.min(), -1e-12 * eig.max())

    def test_forbidden_is_plugin_times_first_stage_slope(self):
        """Without covariates the forbidden tau is the plug-in tau times the slope of D on the instrument"""
        ds = _iv_dataset(n=300, p_w=3, seed=18)
        spec = LearnerSpec("gradient_boosting", {"n_trees": 50}, seed=2)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=7), spec)
        pair = design_matrices(ds)
        est = mlss_estimate(inst, pair, ds.y)
        forbidden = forbidden_regression(inst, pair, ds.y)
        ups = inst.excluded[:, 0]
        slope = np.cov(ups, ds.d[:, 0])[0, 1] / np.var(ups, ddof=1)
        self.assertAlmostEqual(float(forbidden.tau[0]), float(est.tau[0]) * slope, places=9)

    def test_per_fold_and_forbidden(self):
        """Per-fold re-estimates cover every fold; the forbidden regression is labelled"""
        ds = _iv_dataset(n=150, p_w=2)
        inst = generate_instrument(ds, make_folds(ds.n, 3, seed=2), LearnerSpec("ols"))
        pair = design_matrices(ds)
        folds = per_fold_estimates(inst, pair, ds.y)
        self.assertEqual([f.fold for f in folds], [0, 1, 2])
        self.assertEqual(sum(f.n for f in folds), 150)
        self.assertTrue(all(f.error is None and len(f.theta_hat) == 2 for f in folds))
        self.assertEqual(forbidden_regression(inst, pair, ds.y).label, "forbidden")


class TestSubvector(unittest.TestCase):
    """Test cases for the FWL subvector path"""

    def test_residualize_examples(self):
        """Demeaning, orthogonal input and pure projection"""
        ones = np.ones((3, 1))
        np.testing.assert_allclose(fwl_residualize(np.array([1.0, 2.0, 3.0]), ones), [-1, 0, 1], atol=1e-12)
        np.testing.assert_allclose(fwl_residualize(np.array([1.0, -2.0, 1.0]), ones), [1, -2, 1], atol=1e-10)
        xbar = np.column_stack([np.ones(4), [1.0, 2.0, 5.0, 7.0]])
        np.testing.assert_allclose(fwl_residualize(xbar @ np.array([2.0, -1.0]), xbar), 0.0, atol=1e-10)

    def test_residualize_idempotent(self):
        """Partialling [1, X] out twice is the same as once"""
        rng = np.random.default_rng(19)
        xbar = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
        m = rng.normal(size=(40, 3)) + xbar @ rng.normal(size=(3, 3))
        once = fwl_residualize(m, xbar)
        np.testing.assert_allclose(fwl_residualize(once, xbar), once, atol=1e-10)
        np.testing.assert_allclose(xbar.T @ once, 0.0, atol=1e-9)

    def test_matches_full_estimate(self):
        """tau and its variance equal the tau block of the full estimate"""
        ds = _iv_dataset(n=250, p_w=3, p_x=2, seed=4)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=4), LearnerSpec("polynomial"))
        pair = design_matrices(ds)
        est = mlss_estimate(inst, pair, ds.y)
        tau, vcov = subvector_tau(inst, pair, ds.y)
        np.testing.assert_allclose(tau, est.tau, atol=1e-8)
        np.testing.assert_allclose(vcov, est.vcov[1:2, 1:2], rtol=1e-8, atol=1e-12)

    def test_ratio_of_covariances(self):
        """Without covariates tau is cov(u, Y) / cov(u, D)"""
        ds = _iv_dataset(n=100, p_w=1, seed=5)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=5), LearnerSpec("ols"))
        tau, _ = subvector_tau(inst, design_matrices(ds), ds.y)
        ups = inst.excluded[:, 0]
        expected = np.cov(ups, ds.y)[0, 1] / np.cov(ups, ds.d[:, 0])[0, 1]
        self.assertAlmostEqual(float(tau[0]), float(expected), places=10)

    def test_shift_invariance(self):
        """Adding a constant to Y leaves tau unchanged"""
        ds = _iv_dataset(n=100, p_w=1, p_x=1, seed=6)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=6), LearnerSpec("ols"))
        pair = design_matrices(ds)
        a, _ = subvector_tau(inst, pair, ds.y)
        b, _ = subvector_tau(inst, pair, ds.y + 7.0)
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_requires_identity_weighting(self):
        """Efficient instruments are rejected"""
        t = np.column_stack([np.ones(5), np.arange(5.0)])
        inst = InstrumentMatrix.from_array(t, [1], weighting=WeightingScheme.EFFICIENT)
        with self.assertRaises(ConfigError):
            subvector_tau(inst, _pair(t), np.arange(5.0))


class TestTsls(unittest.TestCase):
    """Test cases for the TSLS baseline"""

    def test_own_instrument_is_ols(self):
        """W = D gives OLS"""
        rng = np.random.default_rng(7)
        d = rng.normal(size=80)
        x = rng.normal(size=(80, 1))
        y = 2 * d + x[:, 0] + rng.normal(size=80)
        ds = Dataset(y=y, d=d[:, None], x=x, w=d[:, None])
        design = np.column_stack([np.ones(80), d, x])
        np.testing.assert_allclose(tsls(ds).theta_hat, np.linalg.lstsq(design, y, rcond=None)[0], atol=1e-10)

    def test_full_sample_ols_equivalence(self):
        """A full-sample OLS first stage reproduces TSLS(linear)"""
        for p_x in (0, 2):
            with self.subTest(p_x=p_x):
                ds = _iv_dataset(n=300, p_w=3, p_x=p_x, seed=8)
                inst = generate_instrument(ds, FoldAssignment.full(ds.n), LearnerSpec("ols"))
                est = mlss_estimate(inst, design_matrices(ds), ds.y)
                reference = tsls(ds, "linear")
                np.testing.assert_allclose(est.theta_hat, reference.theta_hat, atol=1e-8)
                np.testing.assert_allclose(est.vcov, reference.vcov, atol=1e-8)

    def test_transform_shapes(self):
        """Quadratic of three columns has six; interactions add cross products"""
        w = np.random.default_rng(0).normal(size=(20, 3))
        self.assertEqual(transform_instruments(w, "linear").shape, (20, 3))
        self.assertEqual(transform_instruments(w, "quadratic").shape, (20, 6))
        self.assertEqual(transform_instruments(w, "quadratic_interact").shape, (20, 9))
        self.assertEqual(transform_instruments(w, "cubic_interact").shape, (20, 19))
        with self.assertRaises(ConfigError):
            transform_instruments(w, "spline")

    def test_discretized_dummies(self):
        """Cell dummies drop the first occupied cell"""
        w = np.array([[-2.0], [-0.5], [0.5], [2.0], [0.7]])
        dummies = transform_instruments(w, "discretized")
        self.assertEqual(dummies.shape, (5, 3))
        np.testing.assert_array_equal(dummies.sum(axis=1), [0, 1, 1, 1, 1])

    def test_under_identified(self):
        """Fewer excluded instruments than treatments is rejected"""
        rng = np.random.default_rng(3)
        ds = Dataset(y=rng.normal(size=20), d=rng.normal(size=(20, 2)), x=np.zeros((20, 0)),
                     w=rng.normal(size=(20, 1)))
        with self.assertRaises(DegenerateDesignError):
            tsls(ds, "linear")

    def test_label(self):
        """The result is labelled with its transform"""
        self.assertEqual(tsls(_iv_dataset(n=60), "quadratic").label, "tsls_quadratic")


class TestFirstStageF(unittest.TestCase):
    """Test cases for first_stage_F"""

    def test_orthogonal_instrument(self):
        """An instrument orthogonal to D gives F near zero"""
        ups = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=float)
        d = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=float)
        t = np.column_stack([np.ones(8), d])
        inst = InstrumentMatrix.from_array(np.column_stack([np.ones(8), ups]), [1])
        (f,) = first_stage_F(inst, _pair(t))
        self.assertLess(f.value, 1e-12)
        self.assertTrue(f.weak)
        self.assertEqual(f.dof, (1, 6))

    def test_perfect_fit(self):
        """D equal to the instrument is capped and flagged"""
        d = np.arange(10.0)
        t = np.column_stack([np.ones(10), d])
        (f,) = first_stage_F(InstrumentMatrix.from_array(t, [1]), _pair(t))
        self.assertEqual(f.value, F_CAP)
        self.assertEqual(f.flag, "perfect_fit")

    def test_irrelevant_instrument_is_weak(self):
        """Pure-noise instruments fall below ten in at least 95% of draws"""
        rng = np.random.default_rng(2024)
        weak = 0
        reps = 200
        for _ in range(reps):
            d = rng.normal(size=1000)
            noise = rng.normal(size=1000)
            t = np.column_stack([np.ones(1000), d])
            inst = InstrumentMatrix.from_array(np.column_stack([np.ones(1000), noise]), [1])
            (f,) = first_stage_F(inst, _pair(t))
            weak += f.value < 10.0
        self.assertGreaterEqual(weak / reps, 0.95)

    def test_weak_warning_in_estimate(self):
        """A weak first stage is reported as a warning"""
        rng = np.random.default_rng(9)
        d = rng.normal(size=200)
        ups = rng.normal(size=200)
        t = np.column_stack([np.ones(200), d])
        est = mlss_estimate(InstrumentMatrix.from_array(np.column_stack([np.ones(200), ups]), [1]),
                            _pair(t), d + rng.normal(size=200))
        weak = est.diagnostics.first_stage_f[0].weak
        self.assertEqual(weak, any("Anderson-Rubin" in w for w in est.warnings))


class TestHausman(unittest.TestCase):
    """Test cases for hausman_test"""

    def setUp(self):
        """Set up IV and OLS fits on exogenous data"""
        ds = _iv_dataset(n=400, p_w=2, seed=10, endogenous=False)
        self.iv = tsls(ds, "linear")
        self.ols = ols_estimate(design_matrices(ds).t, ds.y)

    def test_identical(self):
        """Identical estimates give stat 0 and p-value 1"""
        result = hausman_test(self.iv, self.iv, [1])
        self.assertEqual(result.stat, 0.0)
        self.assertEqual(result.pvalue, 1.0)
        self.assertFalse(result.inconclusive)

    def test_zero_variance_gap(self):
        """Equal variances with different estimates are inconclusive"""
        shifted = attrs.evolve(self.iv, theta_hat=self.iv.theta_hat + 1.0)
        result = hausman_test(shifted, self.iv, [1])
        self.assertEqual(result.dof, 0)
        self.assertTrue(result.inconclusive)

    def test_regular_contrast(self):
        """IV against OLS gives a chi-square p-value"""
        result = hausman_test(self.iv, self.ols, [1])
        self.assertEqual(result.dof, 1)
        self.assertGreaterEqual(result.stat, 0.0)
        self.assertTrue(0.0 <= result.pvalue <= 1.0)

    def test_non_conformable(self):
        """Different parameter lengths are rejected"""
        short = attrs.evolve(self.iv, theta_hat=self.iv.theta_hat[:1], vcov=self.iv.vcov[:1, :1])
        with self.assertRaises(ValueError):
            hausman_test(self.iv, short, [1])


if __name__ == "__main__":
    unittest.main()
