import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mri2pet.dataio import Volume3D
from mri2pet.errors import ConfigurationError, ContractViolation, DataError
from mri2pet.volumetric import (
    SliceStack,
    assemble_volume,
    extract_all_stacks,
    extract_stack,
    gaussian_weights,
    triangular_weights,
    uniform_weights,
)


def test_extract_single_slice():
    vol = np.random.default_rng(0).random((4, 5, 6)).astype(np.float32)
    stack = extract_stack(vol, axis=2, index=3, n_slices=1)
    assert stack.data.shape == (1, 4, 5)
    assert np.array_equal(stack.data[0], vol[:, :, 3])


def test_extract_boundary_clamps():
    vol = np.random.default_rng(1).random((6, 4, 4)).astype(np.float32)
    stack = extract_stack(vol, axis=0, index=0, n_slices=3)
    assert np.array_equal(stack.data[0], vol[0])  # clamped
    assert np.array_equal(stack.data[1], vol[0])
    assert np.array_equal(stack.data[2], vol[1])


def test_extract_constant_slices_identity():
    vol = np.stack([np.full((3, 3), s, dtype=np.float32) for s in range(5)], axis=0)
    stack = extract_stack(vol, axis=0, index=2, n_slices=5)
    assert np.array_equal(stack.data[:, 0, 0], np.array([0, 1, 2, 3, 4], dtype=np.float32))


def test_extract_rejects_even_n_and_bad_index():
    vol = np.zeros((4, 4, 4), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        extract_stack(vol, 0, 1, 2)
    with pytest.raises(ContractViolation):
        extract_stack(vol, 0, 4, 3)
    with pytest.raises(ContractViolation):
        extract_stack(vol, 3, 0, 3)


def test_weight_functions_monotone():
    for k in (0, 1, 3, 7):
        for fn in (triangular_weights, uniform_weights, gaussian_weights):
            w = fn(k)
            assert w.shape == (k + 1,)
            assert np.all(w > 0)
            assert np.all(np.diff(w) <= 0)
    assert np.array_equal(triangular_weights(2), np.array([3.0, 2.0, 1.0]))


def test_assemble_constant_stacks():
    stacks = [
        SliceStack(data=np.full((3, 4, 4), 2.5, dtype=np.float32), axis=0, center_index=i)
        for i in range(6)
    ]
    vol = assemble_volume(stacks)
    assert np.allclose(vol.data, 2.5)


def test_assemble_n1_identity():
    rng = np.random.default_rng(2)
    vol = rng.random((5, 4, 4)).astype(np.float32)
    stacks = extract_all_stacks(vol, axis=0, n_slices=1)
    out = assemble_volume(stacks)
    assert np.array_equal(out.data, vol)


@pytest.mark.parametrize("axis", [0, 1, 2])
@pytest.mark.parametrize("n", [1, 3, 15])
def test_round_trip_oracle(axis, n):
    rng = np.random.default_rng(axis * 100 + n)
    vol = rng.random((16, 16, 16)).astype(np.float32)
    stacks = extract_all_stacks(vol, axis=axis, n_slices=n)
    out = assemble_volume(stacks)
    assert np.abs(out.data - vol).max() < 1e-6


@pytest.mark.parametrize("weight_fn", ["triangular", "uniform", "gaussian"])
def test_round_trip_all_weightings(weight_fn):
    rng = np.random.default_rng(9)
    vol = rng.random((8, 6, 7)).astype(np.float32)
    stacks = extract_all_stacks(vol, axis=1, n_slices=5)
    out = assemble_volume(stacks, weight_fn=weight_fn)
    assert np.abs(out.data - vol).max() < 1e-6


@given(
    seed=st.integers(0, 10**6),
    axis=st.integers(0, 2),
    n=st.sampled_from([1, 3, 5, 7]),
)
@settings(max_examples=25, deadline=None)
def test_round_trip_property(seed, axis, n):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(4, 12, size=3))
    vol = rng.random(shape).astype(np.float32)
    stacks = extract_all_stacks(vol, axis=axis, n_slices=n)
    out = assemble_volume(stacks)
    assert np.abs(out.data - vol).max() < 1e-6


def test_assembly_linearity():
    rng = np.random.default_rng(3)
    a, b = 2.0, -0.5
    s1 = extract_all_stacks(rng.random((6, 5, 5)).astype(np.float32), 0, 3)
    s2 = extract_all_stacks(rng.random((6, 5, 5)).astype(np.float32), 0, 3)
    combined = [
        SliceStack(data=a * x.data + b * y.data, axis=0, center_index=x.center_index)
        for x, y in zip(s1, s2)
    ]
    lhs = assemble_volume(combined).data
    rhs = a * assemble_volume(s1).data + b * assemble_volume(s2).data
    assert np.abs(lhs - rhs).max() < 1e-6


def test_assemble_missing_stack_errors():
    vol = np.zeros((5, 4, 4), dtype=np.float32)
    stacks = extract_all_stacks(vol, 0, 3)
    with pytest.raises(DataError, match="missing"):
        assemble_volume(stacks[:2] + stacks[3:])  # hole in the middle
    with pytest.raises(DataError, match="missing"):
        assemble_volume(stacks[:-1], length=5)  # short of the declared length
    with pytest.raises(DataError, match="duplicate"):
        assemble_volume(stacks + [stacks[0]])


def test_assemble_rejects_inconsistent_stacks():
    s1 = SliceStack(data=np.zeros((3, 4, 4), dtype=np.float32), axis=0, center_index=0)
    s2 = SliceStack(data=np.zeros((5, 4, 4), dtype=np.float32), axis=0, center_index=1)
    with pytest.raises(DataError):
        assemble_volume([s1, s2])


def test_assemble_rejects_unknown_weighting():
    vol = np.zeros((4, 4, 4), dtype=np.float32)
    stacks = extract_all_stacks(vol, 0, 3)
    with pytest.raises(ConfigurationError):
        assemble_volume(stacks, weight_fn="sine")


def test_extract_accepts_volume3d():
    vol = Volume3D(np.random.default_rng(4).random((4, 4, 4)).astype(np.float32))
    stack = extract_stack(vol, 2, 1, 3)
    assert stack.data.shape == (3, 4, 4)
