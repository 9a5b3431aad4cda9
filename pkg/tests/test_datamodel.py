import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syndi import (
    CoefficientModel,
    Column,
    Dataset,
    ExternalModelSpec,
    center,
    center_with,
    centering_record,
    dataset_from_arrays,
    default_replication,
    load_dataset,
    uncenter,
    validate_spec,
    write_dataset,
)
from syndi.errors import DomainError, ParseError, ValidationError

SCHEMA = {"y": "y", "x1": "x", "b1": "b"}


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadDataset:
    def test_empty_cell_becomes_masked(self, tmp_path):
        path = write(tmp_path, "y,x1,b1\n1,0.5,\n0,1.5,2.0\n1,-0.5,0.25\n")
        ds = load_dataset(path, SCHEMA)
        assert ds.mask.sum() == 1
        assert ds.mask[0, ds.index("b1")]
        assert np.isnan(ds.values[0, ds.index("b1")])
        assert list(ds.population) == ["I0", "I0", "I0"]

    def test_binomial_outcome_out_of_range(self, tmp_path):
        path = write(tmp_path, "y,x1,b1\n2,0.5,1.0\n")
        with pytest.raises(DomainError):
            load_dataset(path, SCHEMA, family="binomial")

    def test_gaussian_outcome_unrestricted(self, tmp_path):
        path = write(tmp_path, "y,x1,b1\n2.5,0.5,1.0\n")
        ds = load_dataset(path, SCHEMA, family="gaussian")
        assert ds.values[0, 0] == 2.5

    def test_malformed_number_reports_position(self, tmp_path):
        path = write(tmp_path, "y,x1,b1\n1,oops,1.0\n")
        with pytest.raises(ParseError) as exc:
            load_dataset(path, SCHEMA)
        assert "row 2" in str(exc.value)
        assert "x1" in str(exc.value)

    def test_header_schema_mismatch(self, tmp_path):
        path = write(tmp_path, "y,x9\n1,2\n")
        with pytest.raises(ValidationError):
            load_dataset(path, SCHEMA)

    def test_unknown_role(self, tmp_path):
        path = write(tmp_path, "y,x1,b1\n1,1,1\n")
        with pytest.raises(ValidationError):
            load_dataset(path, {"y": "y", "x1": "w", "b1": "b"})

    def test_round_trip(self, tmp_path, rng):
        cols = [Column("y", "y")] + [Column(f"x{i}", "x") for i in range(1, 4)] \
            + [Column(f"b{i}", "b") for i in range(1, 3)]
        values = rng.standard_normal((50, 6))
        values[rng.random((50, 6)) < 0.15] = np.nan
        values[:, 0] = np.abs(values[:, 0]) % 1  # keep y parseable, any float
        ds = dataset_from_arrays(cols, values)
        path = tmp_path / "rt.csv"
        write_dataset(path, ds)
        schema = {c.name: c.role for c in cols}
        back = load_dataset(path, schema)
        assert np.array_equal(back.mask, ds.mask)
        obs = ~ds.mask
        assert np.allclose(back.values[obs], ds.values[obs], atol=1e-12, rtol=0)


class TestDatasetInvariants:
    def test_mask_must_match_nan(self):
        cols = [Column("y", "y"), Column("x1", "x")]
        values = np.array([[1.0, 2.0]])
        mask = np.array([[False, True]])
        with pytest.raises(ValidationError):
            Dataset(cols, values, mask, np.array(["I0"]))

    def test_duplicate_names_rejected(self):
        cols = [Column("x1", "x"), Column("x1", "x")]
        with pytest.raises(ValidationError):
            dataset_from_arrays(cols, np.zeros((2, 2)))

    def test_values_read_only(self, sim1_internal):
        with pytest.raises(ValueError):
            sim1_internal.values[0, 0] = 99.0

    def test_masked_cells_do_not_affect_centering(self):
        cols = [Column("y", "y"), Column("x1", "x")]
        vals = np.array([[1.0, 2.0], [0.0, np.nan], [1.0, 4.0]])
        a = dataset_from_arrays(cols, vals)
        rec_a = centering_record(a)
        # a different sentinel under the same mask must change nothing downstream
        vals_b = vals.copy()
        b = Dataset(a.columns, vals_b, a.mask.copy(), a.population.copy())
        rec_b = centering_record(b)
        assert rec_a.means == rec_b.means == {"x1": 3.0}


class TestCentering:
    def test_simple_column(self):
        cols = [Column("y", "y"), Column("x1", "x")]
        ds = dataset_from_arrays(cols, np.array([[0.0, 1.0], [1.0, 2.0], [0.0, 3.0]]))
        centered, record = center(ds)
        assert np.allclose(centered.column_values("x1"), [-1, 0, 1])
        assert record.means["x1"] == 2.0
        assert np.array_equal(centered.column_values("y"), ds.column_values("y"))

    def test_already_centered_unchanged(self):
        cols = [Column("y", "y"), Column("x1", "x")]
        ds = dataset_from_arrays(cols, np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0]]))
        centered, _ = center(ds)
        assert np.allclose(centered.column_values("x1"), ds.column_values("x1"), atol=1e-12)

    def test_seeded_means_below_tolerance(self, rng):
        cols = [Column("y", "y")] + [Column(f"x{i}", "x") for i in range(4)]
        ds = dataset_from_arrays(cols, rng.normal(5.0, 2.0, size=(200, 5)))
        centered, _ = center(ds)
        for name in centered.x_names:
            assert abs(centered.observed(name).mean()) < 1e-10

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_center_uncenter_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        cols = [Column("y", "y"), Column("x1", "x"), Column("b1", "b")]
        values = rng.normal(rng.normal(0, 10), 3.0, size=(17, 3))
        ds = dataset_from_arrays(cols, values)
        centered, record = center(ds)
        back = uncenter(centered, record)
        assert np.allclose(back.values, ds.values, atol=1e-12, rtol=0)

    def test_center_with_reuses_record(self, sim1_internal):
        _, record = center(sim1_internal)
        again = center_with(sim1_internal, record)
        assert abs(again.observed("x1").mean()) < 1e-10


PCPT = CoefficientModel(
    "logit", -3.686,
    {"log2psa": 0.894, "dre": 1.0, "age": 0.03, "race": 0.96, "biopsy": -0.36},
)


def prostate_like_dataset(n=10):
    names = ["hg", "log2psa", "dre", "age", "race", "biopsy", "log2tpv", "log2pca3"]
    roles = ["y", "x", "x", "x", "x", "x", "x", "b"]
    rng = np.random.default_rng(0)
    vals = rng.random((n, len(names)))
    vals[:, 0] = (vals[:, 0] > 0.7).astype(float)
    return dataset_from_arrays([Column(n_, r_) for n_, r_ in zip(names, roles)], vals)


class TestValidateSpec:
    def test_five_covariate_spec_accepted(self):
        spec = ExternalModelSpec(
            "PCPThg", ("log2psa", "dre", "age", "race", "biopsy"), PCPT, r=2
        )
        validate_spec(spec, prostate_like_dataset())

    def test_missing_covariate_rejected(self):
        spec = ExternalModelSpec(
            "ERSPC", ("log2psa", "dre", "truspv"),
            CoefficientModel("logit", -3.16, {"log2psa": 1.176, "dre": 1.813, "truspv": -1.514}),
            r=1,
        )
        with pytest.raises(ValidationError) as exc:
            validate_spec(spec, prostate_like_dataset())
        assert "truspv" in str(exc.value)

    def test_zero_replication_rejected(self):
        spec = ExternalModelSpec(
            "PCPThg", ("log2psa", "dre", "age", "race", "biopsy"), PCPT, r=0
        )
        with pytest.raises(ValidationError):
            validate_spec(spec, prostate_like_dataset())

    def test_slope_name_mismatch_rejected(self):
        spec = ExternalModelSpec("P", ("log2psa", "dre"), PCPT, r=1)
        with pytest.raises(ValidationError):
            validate_spec(spec, prostate_like_dataset())


class TestReplication:
    def test_default_rule(self):
        assert default_replication(18882, 678) == 28
        assert default_replication(100, 678) == 1
        assert default_replication(678_000, 678) == 50  # clamped

    def test_resolve_order(self):
        spec = ExternalModelSpec(
            "PCPThg", ("log2psa", "dre", "age", "race", "biopsy"), PCPT,
            r=3, study_size=18882,
        )
        assert spec.resolve_r(678) == 3
        spec2 = ExternalModelSpec(
            "PCPThg", ("log2psa", "dre", "age", "race", "biopsy"), PCPT,
            study_size=18882,
        )
        assert spec2.resolve_r(678) == 28
