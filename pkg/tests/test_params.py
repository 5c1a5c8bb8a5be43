import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relrl import autodiff as ad
from relrl.params import (ConsistencyError, GradCheckReport, ParameterStore,
                          ParamError, TargetStore, adamw_step, clip_grad_norm,
                          grad_check, load_checkpoint, polyak_update,
                          randomize, save_checkpoint)


def scalar_store(value=0.0):
    store = ParameterStore()
    store.add_param("w", np.array(value))
    return store


class TestParameterStore:
    def test_grads_match_value_shapes(self):
        store = ParameterStore()
        store.add_linear("layer", 3, 2, np.random.default_rng(0))
        for name in store.names():
            assert store.grads[name].shape == store.entries[name].shape

    def test_duplicate_name_rejected(self):
        store = scalar_store()
        with pytest.raises(ParamError):
            store.add_param("w", np.zeros(1))

    def test_missing_name_is_error_not_creation(self):
        store = scalar_store()
        with pytest.raises(ParamError):
            store.value("nope")
        with pytest.raises(ParamError):
            store.tensor("nope")
        assert store.names() == ["w"]

    def test_init_bounds(self):
        store = ParameterStore()
        store.add_linear("layer", 16, 8, np.random.default_rng(0))
        W = store.value("layer/W")
        assert np.abs(W).max() <= 1 / 4
        assert np.array_equal(store.value("layer/b"), np.zeros(8))


class TestAdamW:
    def test_zero_grads_zero_decay_is_identity(self):
        store = scalar_store(1.5)
        adamw_step(store, lr=0.1, weight_decay=0.0)
        assert store.value("w") == np.float32(1.5)

    def test_first_step_moves_by_lr(self):
        store = scalar_store(0.0)
        store.grads["w"][...] = 1.0
        adamw_step(store, lr=0.1, weight_decay=0.0)
        # bias-corrected first step: m_hat = v_hat = 1
        assert abs(float(store.value("w")) + 0.1) < 1e-6

    def test_decay_only_shrinks_multiplicatively(self):
        store = ParameterStore(dtype=np.float64)
        store.add_param("w", np.array(2.0))
        adamw_step(store, lr=0.5, weight_decay=1e-4)
        assert abs(float(store.value("w")) - 2.0 * (1 - 0.5 * 1e-4)) < 1e-12

    def test_grads_cleared(self):
        store = scalar_store()
        store.grads["w"][...] = 3.0
        adamw_step(store, lr=0.1)
        assert store.grads["w"] == 0.0
        assert store.step_count == 1


class TestClipGradNorm:
    def test_below_threshold_untouched(self):
        store = scalar_store()
        store.grads["w"][...] = 1.0
        assert clip_grad_norm(store, 3.0) == 1.0
        assert store.grads["w"] == 1.0

    def test_scales_down_to_max(self):
        store = ParameterStore()
        store.add_param("a", np.array([6.0]))
        store.grads["a"][...] = 6.0
        assert clip_grad_norm(store, 3.0) == pytest.approx(0.5)
        assert store.grads["a"][0] == pytest.approx(3.0)

    def test_zero_grads_noop(self):
        store = scalar_store()
        assert clip_grad_norm(store, 3.0) == 1.0

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=6),
           st.floats(0.5, 10))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, grads, max_norm):
        store = ParameterStore(dtype=np.float64)
        store.add_param("a", np.zeros(len(grads)))
        store.grads["a"][...] = grads
        clip_grad_norm(store, max_norm)
        first = store.grads["a"].copy()
        scale = clip_grad_norm(store, max_norm)
        assert np.allclose(store.grads["a"], first, rtol=1e-12)
        assert scale == pytest.approx(1.0, abs=1e-9)


class TestPolyak:
    def _pair(self, target_val, source_val):
        store = scalar_store(source_val)
        target = TargetStore.from_store(scalar_store(target_val))
        return target, store

    def test_rho_one_assigns(self):
        target, store = self._pair(7.0, 1.0)
        polyak_update(target, store, 1.0)
        assert target.value("w") == np.float32(1.0)

    def test_rho_zero_is_noop(self):
        target, store = self._pair(7.0, 1.0)
        polyak_update(target, store, 0.0)
        assert target.value("w") == np.float32(7.0)

    def test_paper_rho(self):
        target, store = self._pair(0.0, 1.0)
        polyak_update(target, store, 0.005)
        assert float(target.value("w")) == pytest.approx(0.005)

    def test_two_half_steps(self):
        target, store = self._pair(0.0, 1.0)
        polyak_update(target, store, 0.5)
        polyak_update(target, store, 0.5)
        assert float(target.value("w")) == pytest.approx(0.75)

    def test_key_mismatch_raises(self):
        target, store = self._pair(0.0, 1.0)
        store.add_param("extra", np.zeros(1))
        with pytest.raises(ConsistencyError):
            polyak_update(target, store, 0.5)

    def test_geometric_convergence(self):
        target, store = self._pair(0.0, 1.0)
        gap = 1.0
        for _ in range(5):
            polyak_update(target, store, 0.1)
            new_gap = abs(1.0 - float(target.value("w")))
            assert new_gap == pytest.approx(gap * 0.9, rel=1e-5)
            gap = new_gap


class TestGradCheck:
    def test_linear_layer_passes_tight(self):
        store = ParameterStore()
        store.add_linear("layer", 3, 2, np.random.default_rng(1))
        randomize(store, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=3)

        def loss(s):
            return ad.vsum(ad.leaky_relu(ad.linear(s.tensor("layer/W"), s.tensor("layer/b"),
                                                   ad.constant(x, dtype=s.dtype))))

        report = grad_check(loss, store, epsilon=1e-5, tolerance=1e-6)
        assert report.passed, report.failures

    def test_detects_wrong_gradient(self):
        store = scalar_store(0.7)

        def loss(s):
            t = s.tensor("w")
            out = ad.square(t)
            broken = ad.Tensor(out.data, (t,), lambda g: None, requires_grad=True)
            return broken

        report = grad_check(loss, store, tolerance=1e-6)
        assert not report.passed

    def test_value_head_passes(self):
        store = ParameterStore()
        store.add_linear("value", 4, 1, np.random.default_rng(5))
        randomize(store, np.random.default_rng(6))
        g = np.random.default_rng(7).normal(size=(2, 4))

        def loss(s):
            out = ad.linear(s.tensor("value/W"), s.tensor("value/b"),
                            ad.constant(g, dtype=s.dtype))
            return ad.vsum(out)

        assert grad_check(loss, store, tolerance=1e-6).passed


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        store = ParameterStore()
        rng = np.random.default_rng(9)
        store.add_linear("enc/layer", 7, 5, rng)
        store.add_param("scalar", np.array(np.pi))
        randomize(store, rng)
        store.step_count = 42
        path = tmp_path / "model.rlc"
        save_checkpoint(path, store, {"domain": "blockworld", "hp.gamma": "0.99"})
        loaded, meta = load_checkpoint(path)
        assert loaded.step_count == 42
        assert meta == {"domain": "blockworld", "hp.gamma": "0.99"}
        assert loaded.names() == store.names()
        for name in store.names():
            assert loaded.value(name).shape == store.value(name).shape
            assert np.array_equal(loaded.value(name), store.value(name))

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "bogus.zip"
        import zipfile
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.txt", "something else\n")
        with pytest.raises(ConsistencyError):
            load_checkpoint(path)
