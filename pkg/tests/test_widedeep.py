import numpy as np
import pytest

from survshape import autodiff as ad
from survshape.preprocess import FeatureEncoder
from survshape.survival import cox_loss
from survshape.synthdata import generate_cloud
from survshape.widedeep import (
    ModelConfig,
    WideDeepModel,
    load_checkpoint,
    risk_score,
    save_checkpoint,
    wide_only_model,
)

from gradcheck import numeric_grad, rel_error
from models import small_model
from test_preprocess import make_records


def batch(n=6, k=8, d=5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    clouds = np.stack([generate_cloud(rng.normal(), rng, k=k) for _ in range(n)])
    y = rng.uniform(1, 20, size=n)
    e = rng.integers(0, 2, size=n)
    e[0] = 1
    return x, clouds, y, e


class TestComposition:
    def test_additive(self):
        model = small_model().eval()
        x, clouds, _, _ = batch()
        total = model.predict(x, clouds)
        np.testing.assert_allclose(total, model.wide_term(x).data + model.deep_term(clouds).data, rtol=0, atol=0)
        parts = model.score_parts(x, clouds)
        np.testing.assert_array_equal(parts.total, total)

    def test_zero_deep_weight_is_wide_model(self):
        model = small_model().eval()
        model.w_deep.data[:] = 0
        x, clouds, _, _ = batch()
        wide = x @ model.w_wide.data
        np.testing.assert_allclose(model.predict(x, clouds), wide, rtol=1e-14, atol=1e-14)
        assert wide_only_model(x[0], model) == pytest.approx(wide[0], rel=1e-14)

    def test_zero_wide_weight_is_deep_model(self):
        model = small_model().eval()
        model.w_wide.data[:] = 0
        deep = small_model("deep").eval()
        deep.load_state_dict({k: v for k, v in model.state_dict().items() if "w_wide" not in k})
        x, clouds, _, _ = batch()
        np.testing.assert_array_equal(model.predict(x, clouds), deep.predict(None, clouds))

    def test_risk_score_scalar(self):
        model = small_model().eval()
        x, clouds, _, _ = batch()
        assert risk_score(x[2], clouds[2], model) == pytest.approx(model.predict(x, clouds)[2], rel=1e-12)

    def test_fresh_model_scores_zero(self):
        model = small_model(randomize=False).eval()
        x, clouds, _, _ = batch()
        np.testing.assert_array_equal(model.predict(x, clouds), np.zeros(6))

    def test_no_global_bias(self):
        model = small_model()
        assert {n for n, _ in model.own_parameters()} == {"w_wide", "w_deep"}

    def test_wide_shape_mismatch(self):
        model = small_model("wide")
        with pytest.raises(ad.ShapeError):
            model(np.ones((2, 4)))

    def test_missing_inputs(self):
        with pytest.raises(ValueError):
            small_model()(np.ones((2, 5)), None)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="tall")

    def test_weight_decay_set(self):
        names = {n for n, _ in small_model().named_weights()}
        assert "w_wide" in names and "w_deep" in names
        assert not any(n.endswith(("bias", "gamma", "beta")) for n in names)


class TestGradients:
    @pytest.mark.parametrize("variant", ["wide", "deep", "widedeep"])
    def test_cox_loss_of_risk_score(self, variant):
        model = small_model(variant)
        for _, st in model.named_buffers():
            st.momentum = 1.0
        x, clouds, y, e = batch()

        def loss():
            return cox_loss(model(x, clouds), (y, e)).item()

        model.zero_grad()
        ad.backward(cox_loss(model(x, clouds), (y, e)))
        for name, p in model.named_parameters():
            assert rel_error(p.grad, numeric_grad(loss, p.data)) < 1e-4, name


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model()
        enc = FeatureEncoder().fit(make_records(20))
        path = tmp_path / "m.npz"
        save_checkpoint(path, model, enc.to_dict(), {"note": "x"})
        ck = load_checkpoint(path)
        a, b = model.state_dict(), ck.model.state_dict()
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k]), k
        x, clouds, _, _ = batch()
        np.testing.assert_array_equal(model.predict(x, clouds), ck.model.predict(x, clouds))
        assert ck.extra == {"note": "x"}
        assert FeatureEncoder.from_dict(ck.encoder).column_names == enc.column_names

    def test_wide_coefficients(self):
        model = small_model("wide", randomize=False)
        names = [f"c{i}" for i in range(5)]
        assert model.wide_coefficients(names) == [(n, 0.0) for n in names]
        with pytest.raises(ValueError):
            small_model("deep").wide_coefficients(names)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, a=np.zeros(2))
        with pytest.raises(ValueError):
            load_checkpoint(path)
