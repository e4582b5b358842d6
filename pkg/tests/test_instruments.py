"""
Tests for cross-fitted instrument construction
"""

import unittest

import numpy as np

from mlss_iv.core.data_model import Dataset, FoldAssignment, design_matrices, make_folds
from mlss_iv.core.errors import DataError
from mlss_iv.core.estimator import mlss_estimate, tsls
from mlss_iv.core.instruments import (
    CovariateMode,
    NuisanceFold,
    WeightingScheme,
    efficient_nuisances,
    generate_instrument,
    partial_linear_predict,
    robinson_fold,
)
from mlss_iv.core.learners import LearnerSpec, fit
from mlss_iv.montecarlo.dgp import dgp_cov, dgp_nocov, propensity


def _linear_dataset(n=120, p_w=1, p_x=1, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, p_w))
    x = rng.normal(size=(n, p_x))
    d = w.sum(axis=1) + 0.5 * x.sum(axis=1) + rng.normal(size=n)
    y = 2.0 * d + x.sum(axis=1) + rng.normal(size=n)
    return Dataset(y=y, d=d[:, None], x=x, w=w)


class TestIdentityInstrument(unittest.TestCase):
    """Test cases for identity-weighted instruments"""

    def setUp(self):
        """Set up a simulated dataset and folds"""
        self.sim = dgp_nocov(400, seed=3)
        self.ds = self.sim.dataset
        self.folds = make_folds(self.ds.n, 2, seed=8)

    def test_oracle_pass_through(self):
        """With the oracle, row i is [1, mu(W_i)]"""
        inst = generate_instrument(self.ds, self.folds, self.sim.oracle_spec())
        self.assertEqual(inst.upsilon.shape, (400, 2))
        np.testing.assert_array_equal(inst.upsilon[:, 0], 1.0)
        np.testing.assert_allclose(inst.upsilon[:, 1], propensity(self.ds.w))
        self.assertEqual(inst.excluded_block, (1,))
        self.assertFalse(inst.degenerate)

    def test_rows_come_from_other_fold(self):
        """Each fold is predicted by a model trained on the other fold"""
        spec = LearnerSpec("ols")
        inst = generate_instrument(self.ds, self.folds, spec)
        ev, tr = self.folds.eval_index(0), self.folds.train_index(0)
        design = np.column_stack([np.ones(tr.size), self.ds.w[tr]])
        coef = np.linalg.lstsq(design, self.ds.d[tr, 0], rcond=None)[0]
        expected = np.column_stack([np.ones(ev.size), self.ds.w[ev]]) @ coef
        np.testing.assert_allclose(inst.upsilon[ev, 1], expected, atol=1e-10)

    def test_fold_rows_ignore_own_targets(self):
        """Changing a treatment in fold 1 moves fold 0's rows but none of fold 1's"""
        spec = LearnerSpec("ols")
        base = generate_instrument(self.ds, self.folds, spec)
        row = int(self.folds.eval_index(1)[0])
        d = self.ds.d.copy()
        d[row, 0] += 5.0
        y = self.ds.y.copy()
        y[row] -= 3.0
        moved = generate_instrument(Dataset(y=y, d=d, x=self.ds.x, w=self.ds.w), self.folds, spec)
        own, other = self.folds.eval_index(1), self.folds.eval_index(0)
        np.testing.assert_array_equal(moved.upsilon[own], base.upsilon[own])
        self.assertFalse(np.allclose(moved.upsilon[other], base.upsilon[other]))

    def test_diagnostics(self):
        """Per-fold and pooled out-of-sample R2 are reported"""
        inst = generate_instrument(self.ds, self.folds, LearnerSpec("ols"))
        self.assertEqual(len(inst.fold_diagnostics), 2)
        self.assertEqual(sum(d.n_eval for d in inst.fold_diagnostics), 400)
        self.assertEqual(len(inst.pooled_oos_r2), 1)
        self.assertLessEqual(inst.pooled_oos_r2[0], 1.0)

    def test_read_only(self):
        """The instrument matrix cannot be modified"""
        inst = generate_instrument(self.ds, self.folds, LearnerSpec("ols"))
        with self.assertRaises(ValueError):
            inst.upsilon[0, 0] = 3.0

    def test_constant_treatment_flagged(self):
        """A constant D gives a constant instrument flagged as degenerate"""
        ds = Dataset(y=self.ds.y, d=np.ones((400, 1)), x=np.zeros((400, 0)), w=self.ds.w)
        inst = generate_instrument(ds, self.folds, LearnerSpec("ols"))
        self.assertTrue(inst.degenerate)
        self.assertTrue(any("constant" in w for w in inst.warnings))

    def test_tiny_fold_rejected(self):
        """Folds need at least two rows"""
        ds = _linear_dataset(n=3, p_x=0)
        with self.assertRaises(DataError):
            generate_instrument(ds, make_folds(3, 3, seed=0), LearnerSpec("ols"))

    def test_seeded_learners_reproducible(self):
        """Same folds and seed give identical instruments"""
        spec = LearnerSpec("random_forest", {"n_trees": 5}, seed=4)
        a = generate_instrument(self.ds, self.folds, spec)
        b = generate_instrument(self.ds, self.folds, spec, n_jobs=2)
        np.testing.assert_array_equal(a.upsilon, b.upsilon)


class TestCovariatePaths(unittest.TestCase):
    """Test cases for instruments with exogenous covariates"""

    def test_robinson_with_linear_nuisances(self):
        """Linear nuisances collapse to OLS of D on [1, W, X] from the training fold"""
        ds = _linear_dataset(n=150, p_w=2, p_x=2, seed=1)
        folds = make_folds(ds.n, 3, seed=2)
        pred = partial_linear_predict(ds, folds, LearnerSpec("ols"))
        for j in range(3):
            tr, ev = folds.train_index(j), folds.eval_index(j)
            design = np.column_stack([np.ones(tr.size), ds.w[tr], ds.x[tr]])
            coef = np.linalg.lstsq(design, ds.d[tr, 0], rcond=None)[0]
            expected = np.column_stack([np.ones(ev.size), ds.w[ev], ds.x[ev]]) @ coef
            np.testing.assert_allclose(pred[ev, 0], expected, atol=1e-8)

    def test_robinson_residuals_orthogonal(self):
        """The treatment residual left after the X step is orthogonal to the residualized X"""
        ds = _linear_dataset(n=200, p_w=2, p_x=2, seed=9)
        folds = make_folds(ds.n, 2, seed=3)
        spec = LearnerSpec("random_forest", {"n_trees": 10}, seed=1)
        out = robinson_fold(ds, folds.train_index(0), folds.eval_index(0), spec, spec)
        gap = out.x_residual.T @ (out.d_residual - out.x_residual @ out.ell)
        np.testing.assert_allclose(gap, 0.0, atol=1e-8)
        self.assertEqual(out.ell.shape, (2, 1))

    def test_partial_linear_needs_covariates(self):
        """partial_linear_predict rejects datasets without X"""
        ds = _linear_dataset(p_x=0)
        with self.assertRaises(DataError):
            partial_linear_predict(ds, make_folds(ds.n, 2, seed=0), LearnerSpec("ols"))

    def test_rows_append_covariates(self):
        """Identity rows are [1, prediction, X]"""
        ds = _linear_dataset(n=80, p_x=2)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=5), LearnerSpec("ols"))
        self.assertEqual(inst.upsilon.shape, (80, 4))
        np.testing.assert_array_equal(inst.upsilon[:, 2:], ds.x)

    def test_all_modes_match_tsls_with_one_instrument(self):
        """With one excluded instrument and full-sample OLS every covariate path reproduces TSLS"""
        ds = _linear_dataset(n=200, p_w=1, p_x=2, seed=6)
        reference = tsls(ds, "linear")
        pair = design_matrices(ds)
        for mode in CovariateMode:
            with self.subTest(mode=mode):
                inst = generate_instrument(ds, FoldAssignment.full(ds.n), LearnerSpec("ols"), covariate_mode=mode)
                est = mlss_estimate(inst, pair, ds.y)
                np.testing.assert_allclose(est.theta_hat, reference.theta_hat, atol=1e-8)

    def test_partial_out_prediction(self):
        """partial_out reports the fitted treatment, not only the excluded column"""
        ds = _linear_dataset(n=100, p_x=1)
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=1), LearnerSpec("ols"),
                                   covariate_mode="partial_out")
        self.assertEqual(inst.covariate_mode, CovariateMode.PARTIAL_OUT)
        self.assertEqual(inst.treatment_prediction.shape, (100, 1))
        self.assertFalse(np.allclose(inst.treatment_prediction, inst.excluded))


class TestEfficientInstrument(unittest.TestCase):
    """Test cases for efficient weighting"""

    def test_homoskedastic_oracle_variance(self):
        """A constant variance truth is passed through"""
        sim = dgp_nocov(200, seed=2)
        spec = LearnerSpec("oracle", truth={"d": propensity, "u2": lambda w: np.full(w.shape[0], 0.7)})
        nuis = efficient_nuisances(sim.dataset, make_folds(200, 2, seed=1), spec)
        np.testing.assert_allclose(nuis.sigma2_hat, 0.7)
        self.assertIsNone(nuis.xu2_hat)
        self.assertFalse(nuis.floored.any())
        self.assertEqual(nuis.prelim_theta.shape, (2, 2))

    def test_negative_variance_floored(self):
        """Negative variance predictions are floored and flagged"""
        w = np.random.default_rng(0).normal(size=(10, 3))
        model = fit(LearnerSpec("oracle", truth=lambda w_: np.full(w_.shape[0], -0.2)), w, np.zeros(10))
        nf = NuisanceFold(fold=0, prelim_theta=np.zeros(2), floor=1e-3, sigma2_model=model, xu2_model=None)
        values, mask = nf.sigma2_at(w)
        np.testing.assert_allclose(values, 1e-3)
        self.assertTrue(mask.all())

    def test_no_covariates_divides_by_variance(self):
        """Without X, efficient rows are the identity rows over sigma2"""
        sim = dgp_nocov(300, seed=5)
        ds = sim.dataset
        inst = generate_instrument(ds, make_folds(300, 2, seed=3), sim.oracle_spec(), WeightingScheme.EFFICIENT)
        sigma2 = sim.truths["u2"](ds.w)
        self.assertEqual(inst.weighting, WeightingScheme.EFFICIENT)
        np.testing.assert_allclose(inst.upsilon[:, 0], 1.0 / sigma2)
        np.testing.assert_allclose(inst.upsilon[:, 1], propensity(ds.w) / sigma2)

    def test_covariate_formula(self):
        """With unit variance and E[XU2|W] = 0 the rows follow the display formula"""
        rng = np.random.default_rng(11)
        n = 60
        w = rng.normal(size=(n, 2))
        x = rng.normal(size=(n, 1))
        d = w[:, 0] + 0.3 * x[:, 0] + rng.normal(size=n)
        y = d + 0.5 * x[:, 0] + rng.normal(size=n)
        ds = Dataset(y=y, d=d[:, None], x=x, w=w)
        spec = LearnerSpec("oracle", truth={
            "d": lambda w_: w_[:, 0],
            "x": lambda w_: np.zeros((w_.shape[0], 1)),
            "u2": lambda w_: np.ones(w_.shape[0]),
            "xu2": lambda w_: np.zeros((w_.shape[0], 1)),
        })
        folds = FoldAssignment.full(n)
        nuis = efficient_nuisances(ds, folds, spec)
        inst = generate_instrument(ds, folds, spec, "efficient")

        t = design_matrices(ds).t
        u2 = (y - t @ nuis.folds[0].prelim_theta) ** 2
        a = t.T @ x / n
        b = (x * u2[:, None]).T @ x / n
        cond_mean = np.column_stack([np.ones(n), w[:, 0], np.zeros(n)])
        expected = cond_mean + x @ np.linalg.solve(b, a.T)
        np.testing.assert_allclose(inst.upsilon, expected, atol=1e-10)

    def test_covariate_mode_ignored_with_covariates(self):
        """Efficient weighting with X keeps its own covariate term and says so"""
        ds = _linear_dataset(n=80, p_w=2, p_x=1, seed=12)
        folds = make_folds(ds.n, 2, seed=0)
        with self.assertLogs("mlss_iv.core.instruments", level="WARNING") as logs:
            inst = generate_instrument(ds, folds, LearnerSpec("ols"), "efficient", covariate_mode="partial_out")
        self.assertTrue(any("ignored under efficient weighting" in line for line in logs.output))
        self.assertTrue(any("ignored under efficient weighting" in w for w in inst.warnings))
        default = generate_instrument(ds, folds, LearnerSpec("ols"), "efficient")
        np.testing.assert_allclose(inst.upsilon, default.upsilon)
        self.assertFalse(any("ignored" in w for w in default.warnings))

    def test_covariate_design_recovers_effect(self):
        """Efficient weighting on the covariate design estimates tau near one"""
        sim = dgp_cov(2000, seed=21)
        ds = sim.dataset
        inst = generate_instrument(ds, make_folds(ds.n, 2, seed=4), sim.oracle_spec(), "efficient")
        self.assertEqual(inst.upsilon.shape, (2000, 4))
        est = mlss_estimate(inst, design_matrices(ds), ds.y)
        self.assertAlmostEqual(float(est.tau[0]), 1.0, delta=0.3)


if __name__ == "__main__":
    unittest.main()
