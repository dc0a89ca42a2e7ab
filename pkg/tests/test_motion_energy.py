import numpy as np
import pytest
import torch

from gestalt_motion.filterbank import build_filter_bank
from gestalt_motion.motion_energy import (
    AblationConfig,
    MotionEnergyModel,
    VideoVolume,
    channel_norm,
    motion_energy,
    mt_stage,
    read_energy_maps,
    v1_stage,
    write_energy_maps,
)

from synth import drifting_grating, drifting_plaid, drifting_texture

INTERIOR = (slice(8, -8), slice(8, -8))


def interior_argmax_fraction(maps, channel):
    inner = maps.scales[0][:, 0][(slice(None),) + INTERIOR]
    return float((np.argmax(inner, axis=0) == channel).mean())


def test_tuning_oracle_plaids_all_channels(bank):
    """Drifting plaids at each preferred velocity select the tuned channel.

    A plaid (two superimposed gratings) identifies its velocity uniquely
    through the intersection of constraints, making the expected argmax
    well-defined for every channel, including zero velocity.
    """
    for k, velocity in enumerate(bank.velocities):
        stim = drifting_plaid(tuple(velocity))
        maps = motion_energy(stim, bank)
        assert interior_argmax_fraction(maps, k) >= 0.9, f"channel {k} {velocity}"


def test_static_textured_video_selects_zero_velocity_channel(bank):
    stim = drifting_texture((0.0, 0.0), seed=3)
    maps = motion_energy(stim, bank)
    assert interior_argmax_fraction(maps, bank.zero_velocity_channel()) >= 0.9


def test_single_grating_argmax_lies_on_its_constraint_line(bank):
    """Single gratings are aperture-ambiguous: all velocities whose
    constraint plane contains the grating frequency respond alike, so the
    argmax must land on (near) the constraint line rather than exactly on
    the generating channel."""
    for k in (1, 9, 13, 17):
        velocity = bank.velocities[k]
        stim = drifting_grating(tuple(velocity))
        maps = motion_energy(stim, bank)
        inner = maps.scales[0][:, 0][(slice(None),) + INTERIOR]
        counts = np.bincount(np.argmax(inner, axis=0).ravel(), minlength=bank.n_mt)
        winner = int(np.argmax(counts))
        # distance of each candidate velocity from the grating's constraint
        # line {v' : v . v' = |v|^2} in velocity space
        v = np.asarray(velocity)
        speed = np.hypot(*v)
        dists = np.abs(bank.velocities @ v - speed**2) / speed
        consistent = dists <= dists[k] + 0.35
        assert consistent[winner], f"channel {k}: winner {winner} off the line"


def test_channel_norm_examples():
    zeros = np.zeros((4, 3, 3))
    assert np.array_equal(channel_norm(zeros, 0.5), zeros)
    one_hot = np.zeros((5, 1, 1))
    one_hot[2] = 0.125
    out = channel_norm(one_hot, 0.125)
    assert out[2, 0, 0] == pytest.approx(0.5)
    assert np.all(out[[0, 1, 3, 4]] == 0.0)


def test_channel_norm_sum_identity(rng):
    maps = rng.random((7, 4, 4))
    sigma = 0.3
    out = channel_norm(maps, sigma)
    sums = maps.sum(axis=0)
    assert np.allclose(out.sum(axis=0), sums / (sums + sigma))
    assert out.sum(axis=0).max() < 1.0


def test_channel_norm_rejects_bad_inputs():
    with pytest.raises(ValueError):
        channel_norm(np.array([[-1.0]]), 0.1)
    with pytest.raises(ValueError):
        channel_norm(np.ones((2, 2)), 0.0)


def test_video_volume_invariants():
    with pytest.raises(ValueError):
        VideoVolume(np.full((9, 4, 4), 1.5))
    with pytest.raises(ValueError):
        VideoVolume(np.full((9, 4, 4), np.nan))
    vol = VideoVolume(np.zeros((10, 4, 4)))
    assert vol.num_frames == 10


def test_v1_stage_temporal_validity_and_zero_input(bank):
    out = v1_stage(np.zeros((11, 16, 16)), bank)
    assert out.shape == (bank.n_v1, 3, 16, 16)  # 11 - 9 + 1
    assert np.all(out == 0.0)
    with pytest.raises(ValueError):
        v1_stage(np.zeros((8, 16, 16)), bank)


def test_v1_linear_is_dc_invariant(bank, rng):
    video = rng.random((9, 24, 24)) * 0.5
    no_norm = AblationConfig(norm_kind="none", include_v1_blur=False)
    a = v1_stage(video, bank, no_norm)
    b = v1_stage(video + 0.3, bank, no_norm)
    assert np.abs(a - b).max() < 1e-9


def test_v1_squared_responses_are_degree_two_homogeneous(bank, rng):
    video = rng.random((9, 16, 16)) * 0.25
    no_norm = AblationConfig(norm_kind="none", include_v1_blur=False)
    one = v1_stage(video, bank, no_norm)
    two = v1_stage(video * 2.0, bank, no_norm)
    assert np.allclose(two, 4.0 * one, rtol=1e-9, atol=1e-12)


def test_mt_stage_zero_and_identity_pass_through(bank, rng):
    v1_maps = np.zeros((bank.n_v1, 1, 8, 8))
    assert np.all(mt_stage(v1_maps, bank) == 0.0)
    v1_maps = rng.random((bank.n_v1, 1, 8, 8))
    removed = mt_stage(v1_maps, bank, AblationConfig(include_mt_stage=False))
    assert np.array_equal(removed, v1_maps)


def test_mt_stage_channel_mismatch(bank, rng):
    with pytest.raises(ValueError):
        mt_stage(rng.random((bank.n_v1 + 1, 1, 8, 8)), bank)


def test_motion_energy_output_bounds_and_determinism(bank, rng):
    video = rng.random((9, 32, 32))
    maps1 = motion_energy(video, bank)
    maps2 = motion_energy(video, bank)
    for a, b in zip(maps1.scales, maps2.scales):
        assert np.array_equal(a, b)
    for s in maps1.scales:
        assert s.min() >= 0.0 and s.max() < 1.0
        assert s.sum(axis=0).max() < 1.0


def test_motion_energy_does_not_mutate_input(bank):
    video = np.random.default_rng(0).random((9, 16, 16))
    copy = video.copy()
    motion_energy(video, bank)
    assert np.array_equal(video, copy)


def test_uniform_video_gives_zero_energy(bank):
    maps = motion_energy(np.full((9, 32, 32), 0.5), bank)
    assert max(s.max() for s in maps.scales) < 1e-30


def test_ablation_norm_none_reproduces_unnormalized_cascade(bank, rng):
    video = rng.random((9, 16, 16))
    ab = AblationConfig(norm_kind="none")
    got = motion_energy(video, bank, ab, levels=1).scales[0]
    # manual unnormalized cascade from bank weights
    lin = v1_stage(video, bank, AblationConfig(norm_kind="none", include_v1_blur=False))
    from scipy.ndimage import convolve1d

    v1 = lin
    for ax in (2, 3):
        v1 = convolve1d(v1, bank.v1_blur, axis=ax, mode="mirror")
    mt = np.tensordot(bank.mt_weights, v1, axes=(1, 0))
    mt = np.maximum(mt, 0.0) ** 2
    for ax in (2, 3):
        mt = convolve1d(mt, bank.mt_blur, axis=ax, mode="mirror")
    assert np.allclose(got, mt, rtol=1e-8, atol=1e-12)


def test_ablation_switches_change_structure(bank, rng):
    video = rng.random((9, 16, 16))
    base = motion_energy(video, bank, levels=1).scales[0]
    relu = motion_energy(
        video, bank, AblationConfig(mt_nonlinearity="relu"), levels=1
    ).scales[0]
    assert not np.allclose(base, relu)
    no_mt_linear = motion_energy(
        video, bank, AblationConfig(include_mt_linear=False), levels=1
    ).scales[0]
    assert no_mt_linear.shape[0] == bank.n_v1
    instance = motion_energy(
        video, bank, AblationConfig(norm_kind="instance"), levels=1
    ).scales[0]
    assert instance.min() < 0.0  # instance norm recenters


def test_ablation_config_validation():
    with pytest.raises(ValueError):
        AblationConfig(v1_nonlinearity="tanh")
    with pytest.raises(ValueError):
        AblationConfig(v1_linear_mode="frozen")
    ab = AblationConfig(include_mt_stage=False, mt_linear_mode="scratch")
    assert ab.trainable_groups() == []  # MT switches ignored without the MT stage


def test_materialized_v1_matches_separable_path(bank, rng):
    video = torch.as_tensor(rng.random((1, 9, 12, 12)))
    fix = MotionEnergyModel(bank, levels=1, dtype=torch.float64)
    trainable = MotionEnergyModel(
        bank,
        AblationConfig(v1_linear_mode="finetune"),
        levels=1,
        dtype=torch.float64,
    )
    with torch.no_grad():
        a = fix(video)[0]
        b = trainable(video)[0]
    assert torch.allclose(a, b, rtol=1e-10, atol=1e-13)


def test_energy_map_file_round_trip(tmp_path, rng):
    scales = [rng.random((25, 8, 8)).astype(np.float32), rng.random((25, 4, 4)).astype(np.float32)]
    path = tmp_path / "maps.mem"
    write_energy_maps(path, scales)
    back = read_energy_maps(path)
    assert len(back) == 2
    for a, b in zip(scales, back):
        assert np.array_equal(a, b)
    bad = tmp_path / "bad.mem"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        read_energy_maps(bad)


def test_texture_invariance_beats_flow_invariance(bank):
    """Population responses move less than flow estimates when texture is
    replaced by dots carrying the same motion."""
    from gestalt_motion.dataset import SceneConfig, render_scene, sample_scene
    from gestalt_motion.dots import make_kinematogram
    from gestalt_motion.flow import lucas_kanade

    def cosine(a, b):
        a, b = a.ravel(), b.ravel()
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-30))

    wins = 0
    total = 0
    for seed in range(3):
        spec = sample_scene(seed, SceneConfig(duration_frames=15))
        video, gt = render_scene(spec)
        dots = make_kinematogram(gt.flows, rng=seed + 100)
        me_t = motion_energy(video.frames, bank, dtype=np.float32)
        me_d = motion_energy(dots.frames, bank, dtype=np.float32)
        for i in range(me_t.num_frames):
            t = i + 4
            a = np.concatenate([s[:, i, 4:-4, 4:-4].ravel() for s in me_t.scales[:3]])
            b = np.concatenate([s[:, i, 4:-4, 4:-4].ravel() for s in me_d.scales[:3]])
            me_sim = cosine(a, b)
            ft = lucas_kanade(video.frames[t], video.frames[t + 1])
            fd = lucas_kanade(dots.frames[t], dots.frames[t + 1])
            lk_sim = cosine(ft.stacked()[:, 4:-4, 4:-4], fd.stacked()[:, 4:-4, 4:-4])
            wins += me_sim > lk_sim
            total += 1
    assert wins / total >= 0.8
