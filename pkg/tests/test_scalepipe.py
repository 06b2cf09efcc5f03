import numpy as np
import pytest

from s3sharp.corrmap import corr_map
from s3sharp.metrics import TranslationSearch, n_ergas
from s3sharp.scalepipe import (
    Mover,
    ScenePair,
    SynthConfig,
    degrade,
    make_training_pair,
    mover_footprint,
    synth_scene,
    upsample,
)

PARKING_LOT = dict(buildings=0, texture=0.2, relief=0.03)


def smooth_field(shape, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    out = np.full(shape, 0.5)
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2, size=2) / max(shape)
        out += 0.08 * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 6))
    return out


class TestDegrade:
    def test_constant(self):
        out = degrade(np.full((3, 16, 24), 0.42), 4)
        assert out.shape == (3, 4, 6)
        np.testing.assert_allclose(out, 0.42, atol=1e-15)

    @pytest.mark.parametrize("scale", [0, 1])
    def test_scale_must_reduce(self, scale):
        with pytest.raises(ValueError):
            degrade(np.zeros((8, 8)), scale)

    def test_not_divisible(self):
        with pytest.raises(ValueError, match="divisible"):
            degrade(np.zeros((10, 8)), 4)

    def test_noise_variance_drops(self):
        x = np.random.default_rng(0).random((128, 128))
        assert degrade(x, 4).var() < x.var()

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_dimensions(self, scale):
        x = np.zeros((5, 12 * scale, 6 * scale))
        assert degrade(x, scale).shape == (5, 12, 6)
        assert degrade(x[0], scale).shape == (12, 6)

    def test_preserves_global_mean(self):
        x = smooth_field((256, 256), seed=1)
        assert abs(degrade(x, 4).mean() - x.mean()) <= 1e-3

    def test_plane_matches_stack_band(self):
        x = np.random.default_rng(2).random((2, 16, 16))
        np.testing.assert_array_equal(degrade(x, 2)[1], degrade(x[1], 2))


class TestUpsample:
    def test_constant(self):
        np.testing.assert_allclose(upsample(np.full((2, 5, 5), 0.3), 4), 0.3, atol=1e-14)

    def test_dimensions(self):
        assert upsample(np.zeros((3, 8, 8)), 4).shape == (3, 32, 32)
        assert upsample(np.zeros((8, 5)), 2).shape == (16, 10)

    def test_interpolates_samples(self):
        x = np.random.default_rng(3).random((7, 9))
        np.testing.assert_allclose(upsample(x, 4)[::4, ::4], x, atol=1e-14)

    def test_round_trip_on_smooth_content(self):
        x = smooth_field((32, 32), seed=4)
        assert np.abs(degrade(upsample(x, 4), 4) - x).max() <= 0.02

    def test_rejects_scale_one(self):
        with pytest.raises(ValueError):
            upsample(np.zeros((4, 4)), 1)


class TestTrainingPair:
    def test_dimensions(self):
        sp = ScenePair(p0=np.zeros((128, 128)), m1=np.zeros((3, 32, 32)), scale=4)
        tp = make_training_pair(sp)
        assert tp.p1.shape == (32, 32)
        assert tp.m2.shape == (3, 8, 8)
        assert sp.p1 is None

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        sp = ScenePair(p0=rng.random((64, 64)), m1=rng.random((3, 16, 16)))
        a, b = make_training_pair(sp), make_training_pair(make_training_pair(sp))
        np.testing.assert_array_equal(a.p1, b.p1)
        np.testing.assert_array_equal(a.m2, b.m2)

    def test_shape_contract(self):
        with pytest.raises(ValueError):
            ScenePair(p0=np.zeros((60, 64)), m1=np.zeros((3, 16, 16)))
        with pytest.raises(ValueError):
            ScenePair(p0=np.zeros((64, 64)), m1=np.zeros((3, 16, 16)), g0=np.zeros((3, 16, 16)))


class TestSynth:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(size=64)
        with pytest.raises(ValueError):
            SynthConfig(global_shift=(9, 0))
        with pytest.raises(ValueError):
            SynthConfig(movers=(Mover((4, 4), (0, -12)),))

    def test_mover_outside_canvas(self):
        with pytest.raises(ValueError, match="canvas"):
            synth_scene(SynthConfig(movers=(Mover((10, 10), (-6, 0), position=(100, 2)),)))

    def test_shapes_and_range(self):
        sp = synth_scene(SynthConfig(seed=1))
        assert sp.p0.shape == (512, 512)
        assert sp.m1.shape == (3, 128, 128)
        assert sp.p0.min() >= 0 and sp.p0.max() <= 1
        assert sp.meta["truth0"].shape == (3, 512, 512)

    def test_aligned_scene_is_correlated(self):
        tp = make_training_pair(synth_scene(SynthConfig(seed=2)))
        s = corr_map(tp.m1, tp.p1).s
        assert s[31:-31, 31:-31].mean() >= 0.9

    def test_shift_is_recovered(self):
        sp = synth_scene(SynthConfig(seed=3, global_shift=(4, 0)))
        score, offset = n_ergas(sp.meta["truth0"], sp.m1, sp.scale)
        assert offset == (4, 0)
        zero, _ = n_ergas(sp.meta["truth0"], sp.m1, sp.scale, search=TranslationSearch.zero_only())
        assert score < zero

    def test_deterministic(self):
        cfg = SynthConfig(seed=4, global_shift=(2, -3), movers=(Mover((8, 16), (5, 1)),))
        a, b = synth_scene(cfg), synth_scene(cfg)
        np.testing.assert_array_equal(a.p0, b.p0)
        np.testing.assert_array_equal(a.m1, b.m1)
        assert a.meta["movers"] == b.meta["movers"]

    def test_subpixel_shift(self):
        sp = synth_scene(SynthConfig(seed=5, global_shift=(2.5, 0)))
        assert np.all(np.isfinite(sp.m1))

    @pytest.mark.parametrize("seed", range(4))
    def test_displaced_movers_lose_correlation(self, seed):
        movers = tuple(Mover((12, 12), (6, 0)) for _ in range(32))
        sp = synth_scene(SynthConfig(seed=seed, movers=movers, **PARKING_LOT))
        tp = make_training_pair(sp)
        s = corr_map(tp.m1, tp.p1).s
        assert s[mover_footprint(sp)].mean() < 0.5

    def test_static_movers_keep_correlation(self):
        movers = tuple(Mover((12, 12), (0, 0)) for _ in range(32))
        tp = make_training_pair(synth_scene(SynthConfig(seed=0, movers=movers, **PARKING_LOT)))
        assert corr_map(tp.m1, tp.p1).s.mean() >= 0.9

