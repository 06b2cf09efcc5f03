import numpy as np
import pytest

from s3sharp.corrmap import CorrMap
from s3sharp.raster import StatConfig, window_mean
from s3sharp.s3loss import LossConfig, s3_loss_grad, spectral_loss
from s3sharp.scalepipe import ScenePair, upsample
from s3sharp.toytrain import (
    PARAM_NAMES,
    ToyModelParams,
    TrainConfig,
    TrainingDiverged,
    backward,
    benchmark_scenes,
    compare_modes,
    config_from_mapping,
    forward,
    params_from_bytes,
    params_to_bytes,
    prepare_samples,
    sample_loss,
    side_by_side_csv,
    train,
)


def random_params(seed=0, bands=3, hidden=4):
    params = ToyModelParams.init(bands, hidden, seed=seed)
    rng = np.random.default_rng(seed + 1)
    return params.with_vector(rng.normal(scale=0.3, size=params.count()))


def small_inputs(seed=0, bands=3, n2=4, scale=4):
    rng = np.random.default_rng(seed)
    return rng.random((bands, n2, n2)), rng.random((n2 * scale, n2 * scale))


@pytest.fixture(scope="module")
def scenes():
    return benchmark_scenes(seed=7, count=8, misaligned=True)


class TestForward:
    def test_untrained_is_bicubic(self):
        m2, p1 = small_inputs(1)
        out = forward(ToyModelParams.init(seed=3), m2, p1)
        np.testing.assert_array_equal(out, upsample(m2, 4))

    def test_constant_inputs(self):
        out = forward(random_params(2), np.full((3, 4, 4), 0.4), np.full((16, 16), 0.7))
        spread = out.max(axis=(1, 2)) - out.min(axis=(1, 2))
        assert np.all(spread <= 1e-12)

    def test_deterministic(self):
        m2, p1 = small_inputs(3)
        params = random_params(3)
        np.testing.assert_array_equal(forward(params, m2, p1), forward(params, m2, p1))

    def test_shapes(self):
        m2, p1 = small_inputs(4, n2=5)
        assert forward(random_params(4), m2, p1).shape == (3, 20, 20)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="PAN"):
            forward(random_params(), np.zeros((3, 4, 4)), np.zeros((15, 16)))
        with pytest.raises(ValueError, match="bands"):
            forward(random_params(), np.zeros((2, 4, 4)), np.zeros((16, 16)))

    def test_parameter_budget(self):
        assert ToyModelParams.init().count() <= 5000


class TestBackward:
    @pytest.mark.parametrize("seed", range(2))
    def test_matches_finite_differences(self, seed):
        m2, p1 = small_inputs(seed, n2=3)
        params = random_params(seed)
        upstream = np.random.default_rng(seed + 9).normal(size=(3, 12, 12))
        grads = backward(params, m2, p1, upstream)
        analytic = np.concatenate([grads[n].ravel() for n in PARAM_NAMES])
        theta = params.vector()
        numeric = np.empty_like(theta)
        step = 1e-5
        for i in range(theta.size):
            plus, minus = theta.copy(), theta.copy()
            plus[i] += step
            minus[i] -= step
            f_plus = (upstream * forward(params.with_vector(plus), m2, p1)).sum()
            f_minus = (upstream * forward(params.with_vector(minus), m2, p1)).sum()
            numeric[i] = (f_plus - f_minus) / (2 * step)
        mask = np.abs(analytic) > 1e-6
        rel = np.abs(numeric[mask] - analytic[mask]) / np.abs(analytic[mask])
        assert rel.max() <= 1e-4

    def test_zero_upstream(self):
        m2, p1 = small_inputs(5)
        grads = backward(random_params(5), m2, p1, np.zeros((3, 16, 16)))
        for value in grads.values():
            np.testing.assert_array_equal(value, 0.0)

    def test_alpha_closed_form_under_l2(self):
        m2, p1 = small_inputs(6)
        target = np.random.default_rng(7).random((3, 16, 16))
        params = random_params(6)
        out = forward(params, m2, p1)
        highpass = p1 - window_mean(p1, StatConfig(params.hp_window))
        grads = backward(params, m2, p1, 2 * (out - target))
        expected = [(2 * (out[b] - target[b]) * highpass).sum() for b in range(3)]
        np.testing.assert_allclose(grads["alpha"], expected, rtol=1e-12)

    def test_accepts_loss_grad(self):
        m2, p1 = small_inputs(8)
        params = random_params(8)
        out = forward(params, m2, p1)
        target = np.random.default_rng(9).random(out.shape)
        lg = s3_loss_grad(out, target, p1, CorrMap.ones(p1.shape))
        direct = backward(params, m2, p1, lg.d_g)
        wrapped = backward(params, m2, p1, lg)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(direct[name], wrapped[name])

    def test_upstream_shape_checked(self):
        m2, p1 = small_inputs(10)
        with pytest.raises(ValueError):
            backward(random_params(), m2, p1, np.zeros((3, 8, 8)))


class TestTrain:
    @pytest.mark.parametrize("mode", ["spectral_l2", "s3"])
    def test_descends(self, scenes, mode):
        result = train(scenes, TrainConfig(loss_mode=mode, iterations=200))
        assert result.losses[-1] < result.losses[0]
        assert result.losses.min() < result.losses[0]

    def test_zero_learning_rate(self, scenes):
        result = train(scenes[:2], TrainConfig(loss_mode="spectral_l2", iterations=6, lr=0.0, batch_size=2))
        np.testing.assert_array_equal(result.params.vector(), ToyModelParams.init(seed=0).vector())
        assert np.all(result.losses == result.losses[0])

    def test_deterministic(self, scenes):
        cfg = TrainConfig(iterations=15, seed=4)
        a, b = train(scenes[:4], cfg), train(scenes[:4], cfg)
        np.testing.assert_array_equal(a.params.vector(), b.params.vector())
        assert a.curve_csv() == b.curve_csv()

    def test_seed_changes_result(self, scenes):
        a = train(scenes[:4], TrainConfig(iterations=5, seed=1))
        b = train(scenes[:4], TrainConfig(iterations=5, seed=2))
        assert not np.array_equal(a.params.vector(), b.params.vector())

    def test_mode_isolation(self, scenes):
        cfg = TrainConfig(loss_mode="s3", loss=LossConfig(w_a=0.0, use_corr_map=False))
        params = random_params(11, hidden=8)
        sample = prepare_samples(scenes[:1], params, cfg)[0]
        value, _ = sample_loss(params, sample, cfg, want_grad=False)
        out = forward(params, scenes[0].m2, scenes[0].p1)
        assert value == spectral_loss(out, scenes[0].m1, np.ones(out.shape[1:]))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self, scenes):
        cfg = TrainConfig(loss_mode="spectral_l2", iterations=3)
        bad = ToyModelParams.init(seed=0)
        bad.b2[:] = np.inf
        with pytest.raises(TrainingDiverged, match="iteration 0"):
            train(scenes[:1], cfg, params=bad)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_mode="l1")
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        assert TrainConfig().drop_iteration == 1000

    def test_config_from_mapping(self):
        cfg = config_from_mapping({"iterations": 10, "w_a": 2.0, "window": 7, "loss_mode": "spectral_l2"})
        assert cfg.iterations == 10 and cfg.loss.w_a == 2.0
        assert cfg.loss.stat.window == 7 and cfg.loss.corr.stat.window == 7
        with pytest.raises(ValueError, match="unknown"):
            config_from_mapping({"learning_rate": 1})


class TestEvaluation:
    def test_params_round_trip(self):
        params = random_params(12)
        payload, manifest = params_to_bytes(params)
        back = params_from_bytes(payload, manifest)
        np.testing.assert_array_equal(back.vector(), params.vector())
        assert (back.scale, back.hp_window, back.hidden) == (params.scale, params.hp_window, params.hidden)

    def test_malformed_manifest(self):
        with pytest.raises(ValueError, match="manifest"):
            params_from_bytes(b"", "scale=4\n")

    def test_compare_modes_shapes(self, scenes):
        untrained = ToyModelParams.init()
        spectral, s3 = compare_modes(scenes[:2], untrained, untrained)
        assert [r["scene"] for r in spectral.rows] == ["scene000", "scene001"]
        assert spectral.rows == s3.rows
        lines = side_by_side_csv(spectral, s3).splitlines()
        assert len(lines) == 1 + 2 + 2
        assert lines[0].startswith("scene,ergas1_spectral,")

    def test_original_scale_shape(self, scenes):
        sp = scenes[0]
        g0 = forward(random_params(13, hidden=8), sp.m1, sp.p0)
        assert g0.shape == (sp.bands,) + sp.p0.shape

    def test_benchmark_is_seeded(self):
        a = benchmark_scenes(3, 1, misaligned=True)[0]
        b = benchmark_scenes(3, 1, misaligned=True)[0]
        np.testing.assert_array_equal(a.m1, b.m1)
        aligned = benchmark_scenes(3, 1, misaligned=False)[0]
        assert tuple(aligned.meta["global_shift"]) == (0, 0)
        assert isinstance(aligned, ScenePair)
