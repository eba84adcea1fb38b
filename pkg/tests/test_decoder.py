import numpy as np
import pytest

from gated_scd.decoder import (
    FeatureTriplet,
    ScdPrediction,
    Weights,
    cagm,
    cbam,
    check_gating_bounds,
    forward_model,
    init_params,
    param_shapes,
    predict_scd_map,
)
from gated_scd.errors import ParameterError, ShapeError
from gated_scd.models import DecoderConfig
from gated_scd.tensor import Graph


def _images(rng, n=1, size=64):
    return rng.uniform(size=(n, 3, size, size)), rng.uniform(size=(n, 3, size, size))


class TestForward:
    def test_output_shapes(self, rng, small_config):
        image_a, image_b = _images(rng, n=2)
        _, pred = forward_model(init_params(small_config, rng), image_a, image_b, small_config)
        assert pred.sem_logits_A.shape == (2, 5, 64, 64)
        assert pred.sem_logits_B.shape == (2, 5, 64, 64)
        assert pred.change_logit.shape == (2, 1, 64, 64)
        assert len(pred.heatmaps) == small_config.num_blocks

    @pytest.mark.parametrize("num_blocks", [1, 2])
    def test_fewer_blocks_keep_full_resolution(self, rng, num_blocks):
        config = DecoderConfig(num_classes=3, encoder_widths=(4, 4, 4, 4), decoder_width=4,
                               num_blocks=num_blocks)
        image_a, image_b = _images(rng)
        _, pred = forward_model(init_params(config, rng), image_a, image_b, config)
        assert pred.change_logit.shape == (1, 1, 64, 64)
        assert len(pred.heatmaps) == num_blocks

    def test_identical_images_give_identical_logits(self, rng, tiny_config):
        image, _ = _images(rng)
        _, pred = forward_model(init_params(tiny_config, rng), image, image.copy(), tiny_config)
        np.testing.assert_array_equal(pred.sem_logits_A.value, pred.sem_logits_B.value)

    def test_swap_symmetry(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        image_a, image_b = _images(rng)
        _, pred = forward_model(params, image_a, image_b, tiny_config)
        _, swapped = forward_model(params, image_b, image_a, tiny_config)
        np.testing.assert_array_equal(pred.sem_logits_A.value, swapped.sem_logits_B.value)
        np.testing.assert_array_equal(pred.sem_logits_B.value, swapped.sem_logits_A.value)
        np.testing.assert_array_equal(pred.change_logit.value, swapped.change_logit.value)

    def test_deterministic(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        image_a, image_b = _images(rng)
        _, first = forward_model(params, image_a, image_b, tiny_config)
        _, second = forward_model(params, image_a, image_b, tiny_config)
        np.testing.assert_array_equal(first.change_logit.value, second.change_logit.value)

    def test_gating_maps_in_open_interval(self, rng, tiny_config):
        image_a, image_b = _images(rng)
        _, pred = forward_model(init_params(tiny_config, rng), image_a, image_b, tiny_config)
        assert check_gating_bounds(pred)

    @pytest.mark.parametrize("seed", range(5))
    def test_gating_bounds_across_passes(self, seed, small_config):
        rng = np.random.default_rng(seed)
        params = init_params(small_config, rng)
        for _ in range(3):
            image_a, image_b = _images(rng, n=2)
            for pair in ((image_a, image_b), (image_a, 1.0 - image_a)):
                _, pred = forward_model(params, *pair, small_config)
                assert check_gating_bounds(pred)
                for w_z, w_h in pred.heatmaps:
                    assert min(w_z.value.min(), w_h.value.min()) >= 0.0
                    assert max(w_z.value.max(), w_h.value.max()) < 2.0

    def test_bound_check_rejects_saturated_map(self):
        g = Graph()
        inside = g.constant(np.full((1, 1, 2, 2), 0.5))
        saturated = g.constant(np.full((1, 1, 2, 2), 2.0))
        pred = ScdPrediction(inside, inside, inside, inside, inside,
                             heatmaps=[(inside, inside), (inside, saturated)])
        assert not check_gating_bounds(pred)

    def test_without_gating(self, rng):
        config = DecoderConfig(num_classes=3, encoder_widths=(4, 4, 4, 4), decoder_width=4,
                               use_cagm=False)
        assert not any(".gate." in name for name in param_shapes(config))
        image_a, image_b = _images(rng)
        _, pred = forward_model(init_params(config, rng), image_a, image_b, config)
        assert pred.heatmaps == []
        assert pred.change_logit.shape == (1, 1, 64, 64)

    def test_untied_change_concat_widens_kernel(self):
        config = DecoderConfig(decoder_width=4, encoder_widths=(4, 4, 4, 4),
                               tie_change_concat=False)
        assert param_shapes(config)["block1.deep.chg.conv1.weight"] == (4, 12, 3, 3)

    def test_image_size_not_divisible(self, rng, tiny_config):
        image_a, image_b = _images(rng, size=48)
        with pytest.raises(ShapeError):
            forward_model(init_params(tiny_config, rng), image_a, image_b, tiny_config)

    def test_missing_parameter(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        del params["head.chg.weight"]
        image_a, image_b = _images(rng)
        with pytest.raises(ShapeError):
            forward_model(params, image_a, image_b, tiny_config)


class TestInit:
    def test_biases_zero_and_kernels_scaled(self, small_config):
        params = init_params(small_config, np.random.default_rng(0))
        assert set(params) == set(param_shapes(small_config))
        assert all(not p.any() for name, p in params.items() if name.endswith(".bias"))
        kernel = params["block1.deep.sem.conv1.weight"]
        fan_in = 8 * 3 * 3
        assert kernel.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.25)

    def test_semantic_head_shared(self, small_config):
        names = param_shapes(small_config)
        assert "head.sem.weight" in names
        assert not any(name.startswith("head.sem_") for name in names)


def _zero_cbam(prefix, channels, hidden):
    return {
        f"{prefix}.mlp1.weight": np.zeros((hidden, channels, 1, 1)),
        f"{prefix}.mlp1.bias": np.zeros((1, hidden, 1, 1)),
        f"{prefix}.mlp2.weight": np.zeros((channels, hidden, 1, 1)),
        f"{prefix}.mlp2.bias": np.zeros((1, channels, 1, 1)),
        f"{prefix}.spatial.weight": np.zeros((1, 2, 7, 7)),
        f"{prefix}.spatial.bias": np.zeros((1, 1, 1, 1)),
    }


class TestCbam:
    def test_zero_weights_quarter_input(self, rng):
        g = Graph()
        f = rng.normal(size=(1, 8, 4, 4))
        out = cbam(g.constant(f), Weights(g, _zero_cbam("c", 8, 2)), "c")
        np.testing.assert_allclose(out.value, 0.25 * f, rtol=1e-15)

    def test_shape_preserved(self, rng):
        g = Graph()
        params = {k: rng.normal(size=v.shape) for k, v in _zero_cbam("c", 8, 2).items()}
        out = cbam(g.constant(rng.normal(size=(2, 8, 5, 3))), Weights(g, params), "c")
        assert out.shape == (2, 8, 5, 3)


class TestCagm:
    def _triplet(self, g, rng, shape=(1, 4, 4, 4)):
        return FeatureTriplet(*(g.constant(rng.normal(size=shape)) for _ in range(3)))

    def test_zero_gates_give_three_quarters(self, rng, tiny_config):
        g = Graph()
        params = init_params(tiny_config, rng)
        for name in list(params):
            if name.startswith("block1.gate."):
                params[name] = np.zeros_like(params[name])
        weights = Weights(g, params)
        _, (w_z, w_h) = cagm(self._triplet(g, rng), self._triplet(g, rng), weights, 1,
                             tiny_config)
        np.testing.assert_allclose(w_z.value, 0.75)
        np.testing.assert_allclose(w_h.value, 0.75)

    def test_shape_mismatch(self, rng, tiny_config):
        g = Graph()
        weights = Weights(g, init_params(tiny_config, rng))
        with pytest.raises(ShapeError):
            cagm(self._triplet(g, rng), self._triplet(g, rng, (1, 4, 2, 2)), weights, 1,
                 tiny_config)

    def test_triplet_rejects_mixed_shapes(self, rng):
        g = Graph()
        with pytest.raises(ShapeError):
            FeatureTriplet(g.constant(np.zeros((1, 4, 4, 4))), g.constant(np.zeros((1, 4, 4, 4))),
                           g.constant(np.zeros((1, 4, 2, 2))))


def _prediction(sem_a, sem_b, change):
    g = Graph()
    nodes = [g.constant(np.asarray(v, dtype=np.float64)) for v in (sem_a, sem_b, change)]
    return ScdPrediction(nodes[0], nodes[1], nodes[2], nodes[0], nodes[1])


class TestPredict:
    def test_unchanged_pixel_gets_class_zero(self):
        pred = _prediction(
            np.array([0.0, 3.0, 1.0]).reshape(1, 3, 1, 1),
            np.array([0.0, 1.0, 3.0]).reshape(1, 3, 1, 1),
            np.full((1, 1, 1, 1), -5.0),
        )
        label_a, label_b, change = predict_scd_map(pred)
        assert (label_a[0, 0, 0], label_b[0, 0, 0], change[0, 0, 0]) == (0, 0, 0)

    def test_changed_pixel_takes_best_nonzero_class(self):
        pred = _prediction(
            np.array([9.0, 3.0, 1.0]).reshape(1, 3, 1, 1),
            np.array([9.0, 1.0, 3.0]).reshape(1, 3, 1, 1),
            np.full((1, 1, 1, 1), 5.0),
        )
        label_a, label_b, change = predict_scd_map(pred)
        assert (label_a[0, 0, 0], label_b[0, 0, 0], change[0, 0, 0]) == (1, 2, 1)

    def test_zero_logit_is_unchanged_at_half(self):
        pred = _prediction(np.zeros((1, 3, 1, 1)), np.zeros((1, 3, 1, 1)), np.zeros((1, 1, 1, 1)))
        assert predict_scd_map(pred, 0.5)[2][0, 0, 0] == 0
        assert predict_scd_map(pred, 0.4)[2][0, 0, 0] == 1

    def test_ties_pick_first_class(self):
        pred = _prediction(np.ones((1, 4, 1, 1)), np.ones((1, 4, 1, 1)), np.full((1, 1, 1, 1), 5.0))
        assert predict_scd_map(pred)[0][0, 0, 0] == 1

    def test_threshold_bounds(self):
        pred = _prediction(np.zeros((1, 3, 1, 1)), np.zeros((1, 3, 1, 1)), np.zeros((1, 1, 1, 1)))
        with pytest.raises(ParameterError):
            predict_scd_map(pred, 1.0)
