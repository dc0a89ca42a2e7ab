import numpy as np
import pytest

from gestalt_motion.filterbank import (
    FilterBank,
    ParameterFileError,
    basis_exponents,
    build_filter_bank,
    default_parameter_path,
    direction_weights,
    load_parameter_file,
    velocity_weights,
    write_parameter_file,
)


def test_default_bank_channel_counts_come_from_file(bank):
    values = load_parameter_file(default_parameter_path())
    assert bank.n_v1 == values["directions"].shape[0] == 28
    assert bank.n_mt == values["velocities"].shape[0]
    assert bank.temporal_extent == values["temporal_taps_order0"].size == 9


def test_construction_is_deterministic():
    a = build_filter_bank()
    b = build_filter_bank()
    assert np.array_equal(a.mt_weights, b.mt_weights)
    assert np.array_equal(a.v1_direction_weights, b.v1_direction_weights)


def test_blur_kernels_sum_to_one(bank):
    assert abs(bank.v1_blur.sum() - 1.0) <= 1e-12
    assert abs(bank.mt_blur.sum() - 1.0) <= 1e-12


def test_derivative_taps_reject_dc(bank):
    for taps in (bank.spatial_taps, bank.temporal_taps):
        for order in range(1, 4):
            assert abs(taps[order].sum()) <= 1e-12


def test_basis_kernels_kill_constant_volumes(bank):
    const = np.ones((9, 7, 7))
    for (a, b, c) in basis_exponents():
        kernel = bank.basis_kernel(a, b, c)
        # full-overlap response at the center of a constant volume
        assert abs((kernel * const[: kernel.shape[0]]).sum()) < 1e-12


def test_direction_weights_match_multinomial_expansion():
    d = np.array([[0.6, 0.0, 0.8]])
    w = direction_weights(d)
    exps = basis_exponents()
    # spot-check a few coefficients: 3!/(a!b!c!) dx^a dy^b dt^c
    idx = exps.index((3, 0, 0))
    assert w[0, idx] == pytest.approx(0.6**3)
    idx = exps.index((1, 0, 2))
    assert w[0, idx] == pytest.approx(3 * 0.6 * 0.8**2)
    idx = exps.index((0, 3, 0))
    assert w[0, idx] == pytest.approx(0.0)


def test_mt_weight_rows_peak_on_the_constraint_plane(bank):
    # for each velocity, the most positive V1 channel should lie close
    # to the constraint plane, the most negative close to its normal
    normals = np.concatenate([bank.velocities, np.ones((bank.n_mt, 1))], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    c = np.abs(normals @ bank.directions.T)
    for k in range(bank.n_mt):
        assert c[k, np.argmax(bank.mt_weights[k])] < 0.4
        assert c[k, np.argmin(bank.mt_weights[k])] > 0.5


def test_mt_weight_rows_are_mean_free(bank):
    assert np.abs(bank.mt_weights.mean(axis=1)).max() < 1e-12


def test_preferred_velocities_contain_zero(bank):
    assert bank.zero_velocity_channel() == 0
    assert np.allclose(bank.velocities[0], 0.0)


def test_overrides_replace_fields(bank):
    vels = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = build_filter_bank(overrides={"velocities": vels, "sigma_sq_mt": 0.5})
    assert b.n_mt == 2
    assert b.sigma_sq_mt == 0.5
    with pytest.raises(ParameterFileError):
        build_filter_bank(overrides={"not_a_field": 1})


def test_invalid_parameters_rejected(bank, tmp_path):
    with pytest.raises(ParameterFileError):
        build_filter_bank(overrides={"sigma_sq_v1": 0.0})
    with pytest.raises(ParameterFileError):
        build_filter_bank(overrides={"sigma_sq_mt": -1.0})
    with pytest.raises(ParameterFileError):
        build_filter_bank(overrides={"v1_blur": np.zeros(5)})
    bad = tmp_path / "bad.txt"
    bad.write_text("directions 28 3\n")
    with pytest.raises(ParameterFileError):
        build_filter_bank(bad)


def test_parameter_file_round_trip(tmp_path):
    values = load_parameter_file(default_parameter_path())
    path = tmp_path / "copy.txt"
    write_parameter_file(path, values, header="round trip")
    again = load_parameter_file(path)
    assert set(values) == set(again)
    for key in values:
        assert np.array_equal(values[key], again[key]), key
    rebuilt = build_filter_bank(path)
    assert np.array_equal(rebuilt.mt_weights, build_filter_bank().mt_weights)


def test_velocity_weights_requires_positive_sigma(bank):
    with pytest.raises(ParameterFileError):
        velocity_weights(bank.directions, bank.velocities, 0.0)
