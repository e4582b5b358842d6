"""
Tests for dataset loading, fold assignment and design assembly
"""

import tempfile
import unittest
from pathlib import Path

import numpy as np

from mlss_iv.core.data_model import Dataset, FoldAssignment, design_matrices, load_csv, make_folds, write_csv
from mlss_iv.core.errors import DataError
from mlss_iv.utils.seeding import derive_seed


class TestLoadCsv(unittest.TestCase):
    """Test cases for CSV ingestion"""

    def setUp(self):
        """Set up a scratch directory"""
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, text, name="data.csv"):
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_minimal_schema(self):
        """Outcome, one treatment and one instrument"""
        path = self._write("y,d_treat,w_judge_age\n1,0,30\n2,1,40\n3,1,50\n")
        ds = load_csv(path)
        self.assertEqual(ds.n, 3)
        self.assertEqual((ds.p_d, ds.p_w, ds.p_x), (1, 1, 0))
        self.assertEqual(ds.d_names, ("d_treat",))
        np.testing.assert_allclose(ds.w[:, 0], [30, 40, 50])

    def test_byte_order_mark(self):
        """A leading UTF-8 BOM does not hide the outcome column"""
        path = self.dir / "bom.csv"
        path.write_bytes(b"\xef\xbb\xbfy,d_t,w_z\n1,0,3\n2,1,4\n")
        ds = load_csv(path)
        np.testing.assert_allclose(ds.y, [1, 2])
        self.assertEqual((ds.p_d, ds.p_w), (1, 1))

    def test_covariates_keep_file_order(self):
        """Columns are grouped by prefix in file order"""
        path = self._write("y,d_t,x_b,w_1,x_a\n1,0,5,1,7\n2,1,6,0,8\n")
        ds = load_csv(path)
        self.assertEqual((ds.p_d, ds.p_x, ds.p_w), (1, 2, 1))
        self.assertEqual(ds.x_names, ("x_b", "x_a"))
        np.testing.assert_allclose(ds.x, [[5, 7], [6, 8]])

    def test_nan_cell_names_row_and_column(self):
        """A NaN cell is rejected with its location"""
        path = self._write("y,d_t,w_1\n1,0,1\n2,NaN,0\n")
        with self.assertRaises(DataError) as ctx:
            load_csv(path)
        self.assertIn("row 2", str(ctx.exception))
        self.assertIn("d_t", str(ctx.exception))

    def test_missing_cell_rejected(self):
        """An empty cell is not a number"""
        path = self._write("y,d_t,w_1\n1,,1\n2,1,0\n")
        with self.assertRaises(DataError):
            load_csv(path)

    def test_schema_errors(self):
        """Missing outcome, treatment or instrument columns"""
        for text in ("d_t,w_1\n1,2\n3,4\n", "y,w_1\n1,2\n3,4\n", "y,d_t\n1,2\n3,4\n", "y,y,d_t,w_1\n1,1,2,3\n1,1,2,3\n"):
            with self.subTest(text=text):
                with self.assertRaises(DataError):
                    load_csv(self._write(text))

    def test_empty_file(self):
        """An empty file is a data error"""
        with self.assertRaises(DataError):
            load_csv(self._write(""))

    def test_header_only(self):
        """A header without rows is a data error"""
        with self.assertRaises(DataError):
            load_csv(self._write("y,d_t,w_1\n"))

    def test_missing_file(self):
        """A missing path raises FileNotFoundError"""
        with self.assertRaises(FileNotFoundError):
            load_csv(self.dir / "nope.csv")

    def test_unknown_columns(self):
        """Unrecognised columns fail in strict mode and are skipped otherwise"""
        path = self._write("y,d_t,w_1,id\n1,0,1,a\n2,1,0,b\n")
        with self.assertRaises(DataError):
            load_csv(path, strict=True)
        ds = load_csv(path, strict=False)
        self.assertEqual(ds.p_w, 1)

    def test_write_then_load(self):
        """write_csv produces a file load_csv reads back exactly"""
        rng = np.random.default_rng(3)
        ds = Dataset(y=rng.normal(size=5), d=rng.normal(size=(5, 1)), x=rng.normal(size=(5, 2)),
                     w=rng.normal(size=(5, 3)))
        back = load_csv(write_csv(ds, self.dir / "out.csv"))
        np.testing.assert_array_equal(back.y, ds.y)
        np.testing.assert_array_equal(back.x, ds.x)
        self.assertEqual(back.w_names, ("w_0", "w_1", "w_2"))


class TestDataset(unittest.TestCase):
    """Test cases for Dataset invariants"""

    def test_single_row_rejected(self):
        """At least two observations are required"""
        with self.assertRaises(DataError):
            Dataset(y=[1.0], d=[[1.0]], x=np.zeros((1, 0)), w=[[1.0]])

    def test_row_mismatch(self):
        """Blocks must share the row count"""
        with self.assertRaises(DataError):
            Dataset(y=[1.0, 2.0], d=[[1.0]], x=np.zeros((2, 0)), w=[[1.0], [2.0]])

    def test_non_finite(self):
        """Infinite values are rejected"""
        with self.assertRaises(DataError):
            Dataset(y=[1.0, np.inf], d=[[1.0], [0.0]], x=np.zeros((2, 0)), w=[[1.0], [2.0]])

    def test_arrays_are_read_only(self):
        """Stored blocks cannot be mutated"""
        ds = Dataset(y=[1.0, 2.0], d=[[1.0], [0.0]], x=np.zeros((2, 0)), w=[[1.0], [2.0]])
        with self.assertRaises(ValueError):
            ds.y[0] = 5.0

    def test_subset(self):
        """subset keeps names and selects rows"""
        ds = Dataset(y=[1.0, 2.0, 3.0], d=[[1.0], [0.0], [1.0]], x=np.zeros((3, 0)), w=[[1.0], [2.0], [3.0]],
                     d_names=["d_t"], w_names=["w_z"])
        sub = ds.subset(np.array([0, 2]))
        np.testing.assert_array_equal(sub.y, [1.0, 3.0])
        self.assertEqual(sub.w_names, ("w_z",))


class TestFolds(unittest.TestCase):
    """Test cases for make_folds"""

    def test_partition(self):
        """Two folds of size 2 cover 0..3"""
        folds = make_folds(4, 2, seed=11)
        self.assertEqual([len(f) for f in folds.folds], [2, 2])
        self.assertEqual(sorted(np.concatenate(folds.folds).tolist()), [0, 1, 2, 3])

    def test_balance(self):
        """Fold sizes differ by at most one"""
        folds = make_folds(5, 2, seed=11)
        self.assertEqual(sorted(len(f) for f in folds.folds), [2, 3])

    def test_deterministic(self):
        """Same arguments give the same assignment"""
        a = make_folds(50, 5, seed=99)
        b = make_folds(50, 5, seed=99)
        for fa, fb in zip(a.folds, b.folds):
            np.testing.assert_array_equal(fa, fb)
        c = make_folds(50, 5, seed=100)
        self.assertFalse(all(np.array_equal(x, y) for x, y in zip(a.folds, c.folds)))

    def test_invalid_k(self):
        """K must lie in [2, n]"""
        for k in (1, 6):
            with self.assertRaises(DataError):
                make_folds(5, k, seed=0)

    def test_train_and_eval_indices(self):
        """S_{-j} is the complement of S_j"""
        folds = make_folds(9, 3, seed=4)
        for j in range(3):
            both = np.concatenate([folds.eval_index(j), folds.train_index(j)])
            self.assertEqual(sorted(both.tolist()), list(range(9)))
        self.assertTrue(np.all(folds.fold_of[folds.eval_index(1)] == 1))

    def test_full_sample_mode(self):
        """The full-sample assignment trains and evaluates on every row"""
        full = FoldAssignment.full(6)
        self.assertTrue(full.full_sample)
        self.assertEqual(full.k, 1)
        np.testing.assert_array_equal(full.train_index(0), np.arange(6))
        np.testing.assert_array_equal(full.eval_index(0), np.arange(6))


class TestDesignMatrices(unittest.TestCase):
    """Test cases for design_matrices"""

    def test_no_covariates(self):
        """T = [1, D] and Z = [1, W]"""
        ds = Dataset(y=[0.0, 1.0], d=[[2.0], [4.0]], x=np.zeros((2, 0)), w=[[5.0], [6.0]])
        pair = design_matrices(ds)
        np.testing.assert_array_equal(pair.t, [[1, 2], [1, 4]])
        np.testing.assert_array_equal(pair.z, [[1, 5], [1, 6]])

    def test_direct_assembly(self):
        """Row (y=0, d=2, x=3, w=5) gives T=(1,2,3), Z=(1,5,3)"""
        ds = Dataset(y=[0.0, 1.0], d=[[2.0], [0.0]], x=[[3.0], [1.0]], w=[[5.0], [1.0]])
        pair = design_matrices(ds)
        np.testing.assert_array_equal(pair.t[0], [1, 2, 3])
        np.testing.assert_array_equal(pair.z[0], [1, 5, 3])
        np.testing.assert_array_equal(pair.xbar[0], [1, 3])

    def test_shapes(self):
        """dim T = 1+p_d+p_x and dim Z = 1+p_w+p_x"""
        rng = np.random.default_rng(0)
        ds = Dataset(y=rng.normal(size=4), d=rng.normal(size=(4, 2)), x=rng.normal(size=(4, 3)),
                     w=rng.normal(size=(4, 5)))
        pair = design_matrices(ds)
        self.assertEqual(pair.t.shape, (4, 6))
        self.assertEqual(pair.z.shape, (4, 9))
        np.testing.assert_array_equal(pair.tau_index, [1, 2])


class TestDeriveSeed(unittest.TestCase):
    """Test cases for derive_seed"""

    def test_stable_and_distinct(self):
        """Same keys give the same seed; different keys differ"""
        self.assertEqual(derive_seed(1, 2, "d"), derive_seed(1, 2, "d"))
        self.assertNotEqual(derive_seed(1, 2, "d"), derive_seed(1, 2, "x"))
        self.assertNotEqual(derive_seed(1, 2), derive_seed(2, 1))
        self.assertGreaterEqual(derive_seed(7), 0)


if __name__ == "__main__":
    unittest.main()
