"""Distribution distances and kernel comparison utilities."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmft_lab.flow import TimeGrid
from dmft_lab.kernels import BlockKernel
from dmft_lab.metrics import (
    SampleCloud,
    cloud_from_csv,
    cloud_to_csv,
    kernel_sup_diff,
    sliced_w2,
    wasserstein2_1d,
)
from dmft_lab.rng import substream


def test_identical_clouds_are_at_distance_zero():
    pts = substream(0, "mc").standard_normal(500)
    cloud = SampleCloud(pts)
    assert wasserstein2_1d(cloud, SampleCloud(pts.copy())) == 0.0
    wide = SampleCloud(substream(0, "mc").standard_normal((200, 3)))
    assert sliced_w2(wide, SampleCloud(wide.points.copy()), 64, seed=1) == 0.0


def test_point_masses_are_separated_by_their_gap():
    a = SampleCloud(np.full(10, -0.75))
    b = SampleCloud(np.full(10, 2.25))
    assert wasserstein2_1d(a, b) == pytest.approx(3.0, abs=1e-15)


def test_gaussian_mean_shift_matches_closed_form():
    xa = substream(1, "mc").standard_normal(100_000)
    xb = substream(2, "mc").standard_normal(100_000) + 0.5
    got = wasserstein2_1d(SampleCloud(xa), SampleCloud(xb))
    assert abs(got - 0.5) <= 0.02


def test_sliced_distance_collapses_to_scalar_distance_in_one_dimension():
    xa = substream(3, "mc").standard_normal(2000)
    xb = substream(4, "mc").standard_normal(2000) * 1.3 + 0.2
    a, b = SampleCloud(xa), SampleCloud(xb)
    assert sliced_w2(a, b, 32, seed=5) == pytest.approx(wasserstein2_1d(a, b), rel=1e-12)


def test_sliced_distance_sees_a_third_of_a_mean_shift():
    shift = np.array([0.3, 0.4, 0.0])
    base = substream(6, "mc").standard_normal((100_000, 3))
    other = substream(7, "mc").standard_normal((100_000, 3)) + shift
    got = sliced_w2(SampleCloud(base), SampleCloud(other), 512, seed=8)
    want = np.linalg.norm(shift) / np.sqrt(3.0)
    assert abs(got - want) <= 0.05 * want


def test_unequal_counts_use_the_quantile_grid():
    xa = substream(9, "mc").standard_normal(30_000)
    got = wasserstein2_1d(SampleCloud(xa[:5000]), SampleCloud(xa))
    assert got < 0.05


def test_subsample_distance_shrinks_as_the_subsample_grows():
    full = substream(0, "mc").standard_normal(100_000)
    fc = SampleCloud(full)
    vals = [wasserstein2_1d(SampleCloud(full[:n]), fc) for n in (100, 1000, 10000)]
    assert vals[0] >= vals[1] >= vals[2]


@settings(deadline=None, max_examples=60, derandomize=True)
@given(
    flat=st.lists(
        st.floats(-50, 50, allow_nan=False, allow_infinity=False), min_size=6, max_size=36
    )
)
def test_scalar_distance_is_symmetric_and_triangular(flat):
    n = len(flat) // 3
    a = SampleCloud(np.asarray(flat[:n]))
    b = SampleCloud(np.asarray(flat[n : 2 * n]))
    c = SampleCloud(np.asarray(flat[2 * n : 3 * n]))
    assert wasserstein2_1d(a, b) == wasserstein2_1d(b, a)
    assert wasserstein2_1d(a, c) <= wasserstein2_1d(a, b) + wasserstein2_1d(b, c) + 1e-12


def _kernel_from(mat, eta=0.1):
    mat = np.asarray(mat, dtype=float)
    return BlockKernel(
        grid=TimeGrid(eta, mat.shape[0] - 1), k=1, blocks=mat[:, :, None, None].copy()
    )


def test_kernel_sup_diff_finds_the_planted_bump():
    base = np.eye(4) + 0.2
    a = _kernel_from(base)
    bumped = base.copy()
    bumped[2, 2] += 0.1
    b = _kernel_from(bumped)
    sup, arg = kernel_sup_diff(a, b)
    assert sup == pytest.approx(0.1, abs=1e-15)
    assert arg == (2, 2)
    sup0, _ = kernel_sup_diff(a, _kernel_from(base))
    assert sup0 == 0.0


def test_kernel_sup_diff_validates_grids_and_components():
    a = _kernel_from(np.eye(3), eta=0.1)
    with pytest.raises(ValueError, match="different time grids"):
        kernel_sup_diff(a, _kernel_from(np.eye(3), eta=0.2))
    other = BlockKernel(grid=TimeGrid(0.1, 2), k=2, blocks=np.zeros((3, 3, 2, 2)))
    with pytest.raises(ValueError, match="component mismatch"):
        kernel_sup_diff(a, other)


def test_cloud_validation_rejects_malformed_inputs():
    with pytest.raises(ValueError, match="at least 2"):
        SampleCloud(np.array([1.0]))
    with pytest.raises(ValueError, match="non-finite"):
        SampleCloud(np.array([1.0, np.nan]))
    with pytest.raises(ValueError, match="N x D"):
        SampleCloud(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="needs 1-d clouds"):
        wasserstein2_1d(SampleCloud(np.zeros((4, 2))), SampleCloud(np.zeros(4)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        sliced_w2(SampleCloud(np.zeros((4, 2))), SampleCloud(np.zeros((4, 3))))
    with pytest.raises(ValueError, match="n_directions"):
        sliced_w2(SampleCloud(np.zeros(4)), SampleCloud(np.zeros(4)), 0)


def test_cloud_csv_round_trip_keeps_points_and_label(tmp_path):
    pts = substream(10, "mc").standard_normal((25, 2))
    cloud = SampleCloud(pts, label="flow d=100 t=0.5")
    path = tmp_path / "cloud.csv"
    cloud_to_csv(cloud, str(path))
    back = cloud_from_csv(str(path))
    assert back.label == "flow d=100 t=0.5"
    assert np.array_equal(back.points, cloud.points)
    skinny = SampleCloud(substream(11, "mc").standard_normal(7))
    cloud_to_csv(skinny, str(tmp_path / "skinny.csv"))
    assert cloud_from_csv(str(tmp_path / "skinny.csv")).points.shape == (7, 1)
