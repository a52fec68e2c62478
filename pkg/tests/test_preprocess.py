import numpy as np
import pytest

from survshape.preprocess import (
    BIOMARKER_COLUMNS,
    EncoderNotFittedError,
    FeatureEncoder,
    FeatureVector,
    NaturalSpline,
    RawClinicalRecord,
    cross_product_transform,
    natural_spline_basis,
    orthogonal_poly_coding,
    orthogonal_poly_contrasts,
)

from oracles import truncated_power_natural_spline

GRID = np.linspace(50, 90, 41)
SPLINE = NaturalSpline((50, 90), (60, 70, 80))


def residual_after_projection(a, b):
    """Largest residual of the columns of ``b`` after least-squares projection onto span(a)."""
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    return np.abs(a @ coef - b).max()


def make_records(n, seed=0, with_volume=False):
    rng = np.random.default_rng(seed)
    return [
        RawClinicalRecord(
            subject_id=f"s{i}",
            age=float(rng.uniform(55, 90)),
            gender=int(rng.integers(0, 2)),
            education=int(rng.integers(1, 5)),
            csf_abeta42=float(rng.uniform(500, 1500)),
            csf_ttau=float(rng.uniform(100, 500)),
            csf_ptau181=float(rng.uniform(10, 50)),
            fdg_pet=float(rng.normal(6, 0.5)),
            av45_pet=float(rng.normal(1.2, 0.2)),
            hippocampus_volume=float(rng.uniform(0.002, 0.003)) if with_volume else None,
        )
        for i in range(n)
    ]


class TestNaturalSpline:
    def test_matches_truncated_power_oracle(self):
        # both bases (with an intercept) must span the same function space on the grid
        u = (GRID - 50) / 40
        oracle = truncated_power_natural_spline(u, (np.array([50, 60, 70, 80, 90]) - 50) / 40)
        ours = np.column_stack([np.ones_like(GRID), SPLINE(GRID)])
        assert np.linalg.matrix_rank(ours) == 5
        scale = np.abs(oracle).max(axis=0)
        assert residual_after_projection(ours, oracle / scale) < 1e-8
        assert residual_after_projection(oracle / scale, ours) < 1e-8

    def test_oracle_span_holds_outside_boundaries(self):
        x = np.linspace(30, 110, 81)
        u = (x - 50) / 40
        oracle = truncated_power_natural_spline(u, (np.array([50, 60, 70, 80, 90]) - 50) / 40)
        ours = np.column_stack([np.ones_like(x), SPLINE(x)])
        assert residual_after_projection(ours, oracle / np.abs(oracle).max(axis=0)) < 1e-8

    def test_linear_beyond_boundary(self):
        for x0, h in ((20.0, 1.0), (95.0, 2.0), (130.0, 0.5)):
            b = SPLINE(np.array([x0 - h, x0, x0 + h]))
            np.testing.assert_allclose(b[0] - 2 * b[1] + b[2], 0, atol=1e-8)

    def test_second_derivative_vanishes_at_boundaries(self):
        h = 1e-3
        for x0 in (50.0, 90.0):
            b = SPLINE(np.array([x0 - h, x0, x0 + h]))
            np.testing.assert_allclose((b[0] - 2 * b[1] + b[2]) / h**2, 0, atol=1e-6)

    def test_continuity_at_boundaries(self):
        eps = 1e-9
        for x0 in (50.0, 90.0):
            np.testing.assert_allclose(SPLINE(x0 - eps), SPLINE(x0 + eps), atol=1e-8)

    def test_c2_at_interior_knots(self):
        h = 1e-3
        for knot in (60.0, 70.0, 80.0):
            left = SPLINE(np.array([knot - 2 * h, knot - h, knot]))
            right = SPLINE(np.array([knot, knot + h, knot + 2 * h]))
            d2_left = (left[0] - 2 * left[1] + left[2]) / h**2
            d2_right = (right[0] - 2 * right[1] + right[2]) / h**2
            # one-sided second differences agree up to O(h) times the third derivative jump
            np.testing.assert_allclose(d2_left, d2_right, atol=1e-2 * np.abs(d2_left).max() + 1e-6)
            centred = SPLINE(np.array([knot - h, knot, knot + h]))
            d2_centred = (centred[0] - 2 * centred[1] + centred[2]) / h**2
            np.testing.assert_allclose(d2_centred, (d2_left + d2_right) / 2, atol=1e-6 + 1e-2 * np.abs(d2_left).max())

    def test_quartile_knots(self):
        x = np.arange(1.0, 102.0)
        s = NaturalSpline.from_data(x)
        assert s.boundary == (1.0, 101.0)
        np.testing.assert_allclose(s.interior, [26, 51, 76])
        assert s.df == 4

    def test_unfitted(self):
        with pytest.raises(EncoderNotFittedError):
            natural_spline_basis(70.0, None)


class TestContrasts:
    def test_three_levels(self):
        m = orthogonal_poly_contrasts(3)
        np.testing.assert_allclose(m[:, 0], [-1 / np.sqrt(2), 0, 1 / np.sqrt(2)], atol=1e-15)
        np.testing.assert_allclose(m[:, 1], np.array([1, -2, 1]) / np.sqrt(6), atol=1e-15)

    @pytest.mark.parametrize("levels", range(2, 9))
    def test_orthonormal(self, levels):
        m = orthogonal_poly_contrasts(levels)
        assert m.shape == (levels, levels - 1)
        np.testing.assert_allclose(m.T @ m, np.eye(levels - 1), atol=1e-10)
        np.testing.assert_allclose(m.T @ np.ones(levels), 0, atol=1e-10)

    def test_gram_schmidt_oracle(self):
        levels = np.arange(1.0, 6.0)
        basis = []
        for p in range(5):
            v = levels**p
            for b in basis:
                v = v - (v @ b) * b
            basis.append(v / np.linalg.norm(v))
        np.testing.assert_allclose(orthogonal_poly_contrasts(5), np.column_stack(basis[1:]), atol=1e-10)

    def test_coding_row(self):
        np.testing.assert_array_equal(orthogonal_poly_coding(2, 4), orthogonal_poly_contrasts(4)[1])

    @pytest.mark.parametrize("level", [0, 5])
    def test_out_of_range(self, level):
        with pytest.raises(ValueError):
            orthogonal_poly_coding(level, 4)


class TestCrossProducts:
    def test_product(self):
        x = FeatureVector(np.array([2.0, 3.0]), ("a", "b"))
        out = cross_product_transform(x, [("a", "b")])
        assert out.values.tolist() == [6.0]
        assert out.column_names == ("a×b",)

    def test_empty(self):
        out = cross_product_transform(FeatureVector(np.array([1.0]), ("a",)), [])
        assert out.values.size == 0

    def test_unknown_column(self):
        with pytest.raises(KeyError):
            cross_product_transform(FeatureVector(np.array([1.0]), ("a",)), [("a", "z")])


class TestEncoder:
    def test_width(self):
        for with_volume, levels in ((False, 4), (True, 4), (False, 3)):
            enc = FeatureEncoder(num_levels=levels, with_volume=with_volume)
            continuous = len(BIOMARKER_COLUMNS) + with_volume
            # continuous + 4 spline + gender + contrasts + 4 age x gender
            assert enc.width == continuous + 4 + 1 + (levels - 1) + 4

    def test_standardized_columns(self):
        recs = make_records(200, with_volume=True)
        enc = FeatureEncoder(with_volume=True)
        x = enc.fit_transform(recs)
        n_std = len(enc.continuous_columns) + 4
        np.testing.assert_allclose(x[:, :n_std].mean(axis=0), 0, atol=1e-10)
        np.testing.assert_allclose(x[:, :n_std].std(axis=0), 1, atol=1e-10)
        assert not np.isnan(x).any()

    def test_unseen_record_uses_training_statistics(self):
        recs = make_records(50)
        enc = FeatureEncoder().fit(recs)
        new = make_records(1, seed=9)[0]
        fv = enc.transform(new)
        expect = (new.csf_abeta42 - enc.state.means["csf_abeta42"]) / enc.state.scales["csf_abeta42"]
        assert fv["csf_abeta42"] == pytest.approx(expect, rel=1e-14)

    def test_gender_zero_zeroes_interactions(self):
        enc = FeatureEncoder().fit(make_records(50))
        rec = make_records(1, seed=3)[0]
        rec = RawClinicalRecord(**{**rec.__dict__, "gender": 0})
        fv = enc.transform(rec)
        for k in range(1, 5):
            assert fv[f"age_ns{k}×gender"] == 0.0

    def test_transform_is_repeatable_and_serializable(self):
        recs = make_records(40)
        enc = FeatureEncoder().fit(recs)
        a = enc.transform_many(recs)
        np.testing.assert_array_equal(a, enc.transform_many(recs))
        clone = FeatureEncoder.from_dict(enc.to_dict())
        np.testing.assert_array_equal(a, clone.transform_many(recs))
        assert clone.column_names == enc.column_names

    def test_transform_before_fit(self):
        with pytest.raises(EncoderNotFittedError):
            FeatureEncoder().transform_many(make_records(2))

    def test_zero_variance_names_column(self):
        recs = [RawClinicalRecord(**{**r.__dict__, "fdg_pet": 5.0}) for r in make_records(10)]
        with pytest.raises(ValueError, match="fdg_pet"):
            FeatureEncoder().fit(recs)

    def test_fitted_once(self):
        enc = FeatureEncoder().fit(make_records(10))
        with pytest.raises(RuntimeError):
            enc.fit(make_records(10))

    def test_education_out_of_schema(self):
        enc = FeatureEncoder(num_levels=3).fit([r for r in make_records(60) if r.education <= 3])
        bad = RawClinicalRecord(**{**make_records(1)[0].__dict__, "education": 4})
        with pytest.raises(ValueError, match="education"):
            enc.transform(bad)

    @pytest.mark.parametrize(
        "field,value", [("age", 0.0), ("gender", 2), ("csf_ttau", -1.0), ("hippocampus_volume", 1.5), ("fdg_pet", float("nan"))]
    )
    def test_record_invariants(self, field, value):
        with pytest.raises(ValueError):
            RawClinicalRecord(**{**make_records(1)[0].__dict__, field: value})
