from __future__ import annotations

import json

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from causalrff.data import (C0_DEFAULT, D0_DEFAULT, RHO_DEFAULT, CsvSchema, GroundTruthParams,
                            SourceDataset, generate_source, load_csv_source, load_truth_csv,
                            make_benchmark, softplus, split_sizes, write_benchmark, write_source_csv)
from causalrff.errors import IngestionError, ParameterError, ShapeError


def zero_params(d_x=4, b0=0.3, c0=1.0, d0=1.0):
    k = 5
    return GroundTruthParams(np.array(RHO_DEFAULT), np.zeros(d_x), np.zeros((d_x, k)), b0, np.zeros(k),
                             c0, np.zeros(k), d0, np.zeros(k))


class TestGroundTruth:
    def test_defaults(self):
        gt = GroundTruthParams.draw(0)
        assert np.array_equal(gt.rho, [0.11, 0.17, 0.34, 0.26, 0.12])
        assert (gt.c0, gt.d0) == (0.9, 7.9) == (C0_DEFAULT, D0_DEFAULT)
        assert gt.d_x == 30 and gt.a1.shape == (30, 5)
        assert gt.sigma0 == gt.sigma1 == 1.0

    def test_coefficient_law(self):
        gt = GroundTruthParams.draw(1, d_x=400)
        assert abs(np.var(gt.a1) - 2.0) < 0.15

    def test_invalid(self):
        with pytest.raises(ParameterError):
            GroundTruthParams([0.5, 0.6], np.zeros(1), np.zeros((1, 2)), 0, np.zeros(2), 0, np.zeros(2),
                              0, np.zeros(2))
        with pytest.raises(ParameterError):
            GroundTruthParams.draw(0, sigma0=0.0)

    def test_dict_round_trip(self):
        gt = GroundTruthParams.draw(5, d_x=3)
        back = GroundTruthParams.from_dict(json.loads(json.dumps(gt.to_dict())))
        assert all(np.array_equal(getattr(gt, k), getattr(back, k)) for k in gt.__dict__)


class TestGenerateSource:
    def test_degenerate_parameters(self):
        src = generate_source(zero_params(), 0.0, 20000, seed=1)
        assert np.all(src.cate == 0.0)
        assert abs(src.observed.w.mean() - expit(0.3)) < 4 * 0.5 / np.sqrt(20000)
        assert abs(src.observed.x.mean() - 0.5) < 0.01

    def test_consistency(self):
        src = generate_source(GroundTruthParams.draw(2), 1.5, 500, seed=3)
        w = src.observed.w
        assert np.array_equal(src.observed.y, np.where(w == 1, src.y1, src.y0))

    def test_cate_is_noise_free_mean_difference(self):
        gt = GroundTruthParams.draw(2, d_x=5)
        src = generate_source(gt, 2.0, 50, seed=0)
        z = np.eye(5)[src.z]
        ref = softplus(gt.d0 + z @ (gt.d1 + 2.0)) - softplus(gt.c0 + z @ (gt.c1 + 2.0))
        assert np.allclose(src.cate, ref, rtol=0, atol=1e-14)

    def test_binary_covariates(self):
        src = generate_source(GroundTruthParams.draw(0), 0.0, 100, seed=0)
        assert src.observed.x.shape == (100, 30)
        assert set(np.unique(src.observed.x)) <= {0.0, 1.0}

    def test_category_frequencies(self):
        src = generate_source(GroundTruthParams.draw(0, d_x=2), 0.0, 50000, seed=4)
        freq = np.bincount(src.z, minlength=5) / 50000
        assert np.max(np.abs(freq - RHO_DEFAULT)) < 0.01

    def test_delta_shifts_treated_outcomes(self):
        gt = GroundTruthParams.draw(7)
        a = generate_source(gt, 0.0, 1000, seed=1)
        b = generate_source(gt, 8.0, 1000, seed=2)
        ya = a.observed.y[a.observed.w == 1]
        yb = b.observed.y[b.observed.w == 1]
        assert stats.ttest_ind(ya, yb, equal_var=False).pvalue < 1e-3

    def test_n_checked(self):
        with pytest.raises(ParameterError):
            generate_source(GroundTruthParams.draw(0), 0.0, 0, seed=0)


class TestBenchmark:
    def test_same(self):
        sources, _ = make_benchmark("same", 5, seed=0, d_x=3)
        assert [s.delta for s in sources] == [0.0] * 5

    def test_diff(self):
        sources, _ = make_benchmark("diff", 5, seed=0, d_x=3)
        assert [s.delta for s in sources] == [0.0, 4.0, 4.0, 4.0, 4.0]

    def test_large_diff_range(self):
        sources, _ = make_benchmark("large_diff", 20, n_per_source=40, seed=1, d_x=2)
        d = np.array([s.delta for s in sources])
        assert np.all((d >= 0) & (d <= 8)) and len(set(d)) == 20

    def test_default_splits(self):
        sources, _ = make_benchmark("same", 2, seed=0, d_x=2)
        assert sources[0].splits == {"train": (0, 50), "test": (50, 500), "val": (500, 900)}
        assert len(sources[1].split("test")) == 450 and len(sources[1].split_truth("val")) == 400

    def test_scaled_splits(self):
        assert split_sizes(200) == {"train": (0, 10), "test": (10, 100), "val": (100, 180)}

    def test_too_small(self):
        with pytest.raises(ParameterError):
            make_benchmark("same", 1, n_per_source=10)
        with pytest.raises(ParameterError):
            make_benchmark("other", 1)
        with pytest.raises(ParameterError):
            make_benchmark("same", 0)

    def test_shared_coefficients_distinct_records(self):
        sources, gt = make_benchmark("same", 3, seed=4, d_x=3)
        assert not np.array_equal(sources[0].observed.x, sources[1].observed.x)
        assert len(set(sources[0].observed.unit_ids) & set(sources[1].observed.unit_ids)) == 0

    def test_determinism(self, tmp_path):
        a, ga = make_benchmark("diff", 3, seed=9, d_x=4)
        b, gb = make_benchmark("diff", 3, seed=9, d_x=4)
        write_benchmark(tmp_path / "a", a, ga)
        write_benchmark(tmp_path / "b", b, gb)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestCsv:
    def test_two_rows(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("unit_id,w,y,x_1,x_2\na,0,1.5,0,1\nb,1,-2,1,1\n")
        ds = load_csv_source(p)
        assert len(ds) == 2 and ds.unit_ids == ["a", "b"]
        assert np.array_equal(ds.x, [[0, 1], [1, 1]]) and np.array_equal(ds.y, [1.5, -2])

    def test_bad_treatment_names_row(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("w,y,x\n0,1,0\n2,1,0\n")
        with pytest.raises(IngestionError, match="row 2"):
            load_csv_source(p)

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("w,y,x\n0,abc,0\n")
        with pytest.raises(IngestionError, match="'y'"):
            load_csv_source(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("w,x\n0,1\n")
        with pytest.raises(IngestionError, match="'y'"):
            load_csv_source(p)

    def test_ragged_and_empty(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("w,y,x\n0,1\n")
        with pytest.raises(IngestionError):
            load_csv_source(p)
        p.write_text("")
        with pytest.raises(IngestionError):
            load_csv_source(p)

    def test_schema(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("treat,out,age,noise\n1,3,40,9\n")
        ds = load_csv_source(p, CsvSchema("treat", "out", None, ["age"]))
        assert ds.x.shape == (1, 1) and ds.unit_ids is None

    def test_round_trip(self, tmp_path):
        sources, gt = make_benchmark("diff", 2, n_per_source=100, seed=3, d_x=3)
        out = write_benchmark(tmp_path, sources, gt, {"kind": "diff"})
        for s, src in enumerate(sources):
            assert load_csv_source(out / f"source_{s}.csv") == src.observed
            truth = load_truth_csv(out / f"source_{s}_truth.csv")
            assert np.array_equal(truth["cate"], src.cate) and truth["unit_id"] == src.observed.unit_ids
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["deltas"] == [0.0, 4.0] and manifest["kind"] == "diff"

    def test_write_without_ids(self, tmp_path):
        ds = SourceDataset([1.0], [2.0], [[3.0]])
        write_source_csv(tmp_path / "a.csv", ds)
        assert load_csv_source(tmp_path / "a.csv") == ds


class TestSourceDataset:
    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            SourceDataset([0, 1], [0.0], [[1.0], [2.0]])
        with pytest.raises(ParameterError):
            SourceDataset([0.5], [0.0], [[1.0]])
        with pytest.raises(ShapeError):
            SourceDataset([0], [0.0], [[1.0]], ["a", "b"])

    def test_subset(self):
        ds = SourceDataset([0, 1, 1], [1.0, 2.0, 3.0], [[1.0], [2.0], [3.0]], ["a", "b", "c"])
        sub = ds.subset([2, 0])
        assert sub.unit_ids == ["c", "a"] and np.array_equal(sub.y, [3.0, 1.0])
