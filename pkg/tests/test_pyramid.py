import numpy as np
import pytest

from gestalt_motion.pyramid import gaussian_pyramid


def test_five_levels_of_64_give_halving_sizes():
    video = np.zeros((3, 64, 64))
    levels = gaussian_pyramid(video, 5)
    assert [lv.shape[-1] for lv in levels] == [64, 32, 16, 8, 4]
    assert [lv.shape[-2] for lv in levels] == [64, 32, 16, 8, 4]


def test_odd_sizes_round_up():
    levels = gaussian_pyramid(np.zeros((1, 21, 13)), 3)
    assert [lv.shape[-2:] for lv in levels] == [(21, 13), (11, 7), (6, 4)]


def test_single_level_is_identity():
    video = np.random.default_rng(0).random((2, 8, 8))
    (only,) = gaussian_pyramid(video, 1)
    assert only is video or np.array_equal(only, video)


def test_constant_video_stays_constant_at_every_level():
    video = np.full((2, 32, 32), 0.37)
    for lv in gaussian_pyramid(video, 5):
        assert np.allclose(lv, 0.37, atol=1e-12)


def test_level_zero_is_input():
    video = np.random.default_rng(1).random((2, 16, 16))
    levels = gaussian_pyramid(video, 3)
    assert np.array_equal(levels[0], video)


def test_too_many_levels_rejected():
    with pytest.raises(ValueError):
        gaussian_pyramid(np.zeros((1, 8, 8)), 5)
    with pytest.raises(ValueError):
        gaussian_pyramid(np.zeros((1, 8, 8)), 0)
