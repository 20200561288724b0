"""Kernel containers, factorization with jitter, GP sampling, persistence."""
from __future__ import annotations

import json

import numpy as np
import pytest

from dmft_lab.flow import TimeGrid
from dmft_lab.kernels import (
    BlockKernel,
    IncrementalGaussianSampler,
    PsdViolationError,
    ResponseKernel,
    assemble_and_factor,
    check_psd,
    project_psd,
    read_kernel_csv,
    sample_gp,
    write_kernel_csv,
)
from dmft_lab.rng import substream


def _scalar_kernel(mat: np.ndarray, eta: float = 0.1) -> BlockKernel:
    mat = np.asarray(mat, dtype=float)
    grid = TimeGrid(eta, mat.shape[0] - 1)
    return BlockKernel(grid=grid, k=1, blocks=mat[:, :, None, None].copy())


def _constant_kernel(c: float, m: int) -> BlockKernel:
    return _scalar_kernel(np.full((m + 1, m + 1), c))


def test_identity_kernel_factors_to_identity():
    kern = _scalar_kernel(np.eye(3))
    ell = assemble_and_factor(kern)
    assert ell == pytest.approx(np.eye(3), abs=1e-9)


def test_rank_one_kernel_factors_thanks_to_jitter():
    kern = _constant_kernel(2.0, 3)
    ell = assemble_and_factor(kern)
    assert np.all(np.isfinite(ell))
    assert ell @ ell.T == pytest.approx(kern.assemble(), abs=1e-8)


@pytest.mark.filterwarnings("ignore:assembled kernel")
def test_indefinite_kernel_raises_with_offending_eigenvalue():
    kern = _scalar_kernel([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(PsdViolationError) as err:
        assemble_and_factor(kern)
    assert err.value.min_eig == pytest.approx(-1.0, abs=1e-6)


def test_slightly_indefinite_kernel_escalates_jitter_with_warning():
    kern = _scalar_kernel([[1.0, 1.0 + 3e-9], [1.0 + 3e-9, 1.0]])
    with pytest.warns(RuntimeWarning, match="escalated factorization jitter"):
        ell = assemble_and_factor(kern)
    assert ell @ ell.T == pytest.approx(kern.assemble(), abs=1e-6)


def test_check_psd_classifies_the_three_cases():
    eig, ok = check_psd(_scalar_kernel(np.eye(3)))
    assert ok and eig == pytest.approx(1.0)
    eig, ok = check_psd(_constant_kernel(1.0, 2))
    assert ok and abs(eig) <= 1e-12
    eig, ok = check_psd(_scalar_kernel([[1.0, 2.0], [2.0, 1.0]]))
    assert not ok and eig == pytest.approx(-1.0)


def test_project_psd_clips_negative_directions():
    kern = _scalar_kernel([[1.0, 2.0], [2.0, 1.0]])
    fixed = project_psd(kern)
    eig, ok = check_psd(fixed)
    assert ok and eig >= -1e-12
    # the positive eigendirection survives untouched
    assert fixed.blocks[0, 0, 0, 0] == pytest.approx(1.5)
    again = project_psd(fixed)
    assert again.blocks == pytest.approx(fixed.blocks, abs=1e-12)


def test_constant_kernel_paths_are_flat_with_matched_variance():
    c = 1.5
    kern = _constant_kernel(c, 3)
    paths, star = sample_gp(kern, 1.0, 10_000, seed=0)
    assert star is None
    assert paths.shape == (10_000, 4, 1)
    # jitter is the only source of knot-to-knot spread
    assert float(np.max(np.ptp(paths[:, :, 0], axis=1))) <= 1e-3
    var = float(np.var(paths[:, 0, 0]))
    se = c * np.sqrt(2.0 / 10_000)
    assert abs(var - c) <= 5 * se


def test_zero_kernel_samples_zero_paths():
    kern = _constant_kernel(0.0, 2)
    paths, _ = sample_gp(kern, 1.0, 100, seed=1)
    assert float(np.max(np.abs(paths))) <= 1e-8


def test_gp_sample_covariance_matches_kernel():
    mat = np.array([[1.0, 0.6], [0.6, 1.0]])
    kern = _scalar_kernel(mat)
    paths, _ = sample_gp(kern, 2.0, 100_000, seed=2)
    flat = paths[:, :, 0]
    emp = flat.T @ flat / flat.shape[0]
    want = 2.0 * mat
    for i in range(2):
        for j in range(2):
            se = np.sqrt((want[i, i] * want[j, j] + want[i, j] ** 2) / flat.shape[0])
            assert abs(emp[i, j] - want[i, j]) <= 5 * se


def test_gp_star_draws_are_correlated_with_paths():
    grid = TimeGrid(0.1, 1)
    blocks = np.full((2, 2, 1, 1), 0.8)
    blocks[0, 0, 0, 0] = blocks[1, 1, 0, 0] = 1.0
    kern = BlockKernel(
        grid=grid,
        k=1,
        blocks=blocks,
        star_cols=np.full((2, 1, 1), 0.5),
        star_star=np.array([[1.0]]),
    )
    paths, star = sample_gp(kern, 1.0, 100_000, seed=3)
    assert star.shape == (100_000, 1)
    emp = float(np.mean(paths[:, 0, 0] * star[:, 0]))
    assert abs(emp - 0.5) <= 5 * np.sqrt((1.0 + 0.25) / 100_000)


def test_incremental_sampler_nests_and_matches_the_target():
    rng = substream(4, "gp")
    base = substream(5, "gp").standard_normal((4, 4))
    cov = base @ base.T + 0.5 * np.eye(4)
    samp = IncrementalGaussianSampler(50_000, 2, 2, rng)
    v1 = samp.extend(np.zeros((2, 0)), cov[:2, :2])
    lead = samp.factor().copy()
    v2 = samp.extend(cov[2:, :2], cov[2:, 2:])
    # the leading factor is untouched by the extension
    assert np.array_equal(samp.factor()[:2, :2], lead)
    full = samp.factor()
    assert full @ full.T == pytest.approx(cov, abs=1e-8)
    vals = np.hstack([v1, v2])
    emp = vals.T @ vals / vals.shape[0]
    for i in range(4):
        for j in range(4):
            se = np.sqrt((cov[i, i] * cov[j, j] + cov[i, j] ** 2) / vals.shape[0])
            assert abs(emp[i, j] - cov[i, j]) <= 5 * se


def test_incremental_sampler_validates_extension_shapes():
    samp = IncrementalGaussianSampler(10, 2, 2, substream(6, "gp"))
    samp.extend(np.zeros((2, 0)), np.eye(2))
    with pytest.raises(ValueError, match="inconsistent shapes"):
        samp.extend(np.zeros((2, 1)), np.eye(2))


@pytest.mark.filterwarnings("ignore:incremental covariance")
def test_incremental_sampler_rejects_indefinite_blocks():
    samp = IncrementalGaussianSampler(10, 1, 2, substream(7, "gp"))
    samp.extend(np.zeros((1, 0)), np.array([[1.0]]))
    with pytest.raises(PsdViolationError, match="incremental covariance"):
        samp.extend(np.array([[2.0]]), np.array([[1.0]]))


def test_kernel_csv_round_trip_with_star_blocks(tmp_path):
    grid = TimeGrid(0.2, 2)
    rng = substream(8, "gp")
    half = rng.standard_normal((3 * 2, 3 * 2))
    full = half @ half.T
    body = full.reshape(3, 2, 3, 2).transpose(0, 2, 1, 3)
    kern = BlockKernel(
        grid=grid,
        k=2,
        blocks=body.copy(),
        star_cols=rng.standard_normal((3, 2, 2)),
        star_star=np.eye(2),
    )
    path = tmp_path / "theta_kernel.csv"
    write_kernel_csv(kern, str(path), kind="theta", seed=9)
    side = json.loads((tmp_path / "theta_kernel.csv.json").read_text())
    assert side == {"eta": 0.2, "m": 2, "k": 2, "kind": "theta", "seed": 9, "has_star": True}
    back = read_kernel_csv(str(path))
    assert isinstance(back, BlockKernel)
    assert back.grid == grid
    assert np.array_equal(back.blocks, kern.blocks)
    assert np.array_equal(back.star_cols, kern.star_cols)
    assert np.array_equal(back.star_star, kern.star_star)


def test_response_kernel_round_trips_through_csv(tmp_path):
    grid = TimeGrid(0.1, 2)
    blocks = np.zeros((3, 3, 1, 1))
    blocks[np.tril_indices(3)] = substream(10, "gp").standard_normal((6, 1, 1))
    kern = ResponseKernel(grid=grid, k=1, blocks=blocks)
    path = tmp_path / "resp.csv"
    write_kernel_csv(kern, str(path), kind="response")
    back = read_kernel_csv(str(path))
    assert isinstance(back, ResponseKernel)
    assert np.array_equal(back.blocks, kern.blocks)


def test_kernel_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,value\n0,1\n")
    (tmp_path / "bad.csv.json").write_text(
        json.dumps({"eta": 0.1, "m": 0, "k": 1, "kind": "theta", "seed": None, "has_star": False})
    )
    with pytest.raises(ValueError, match="unexpected kernel CSV header"):
        read_kernel_csv(str(path))


def test_response_kernel_enforces_causality():
    grid = TimeGrid(0.1, 1)
    blocks = np.zeros((2, 2, 1, 1))
    blocks[0, 1, 0, 0] = 0.3
    with pytest.raises(ValueError, match="vanish above the time diagonal"):
        ResponseKernel(grid=grid, k=1, blocks=blocks)


def test_block_kernel_validates_star_pairing_and_shape():
    grid = TimeGrid(0.1, 1)
    blocks = np.zeros((2, 2, 1, 1))
    with pytest.raises(ValueError, match="given together"):
        BlockKernel(grid=grid, k=1, blocks=blocks, star_cols=np.zeros((2, 1, 1)))
    with pytest.raises(ValueError, match="blocks must be"):
        BlockKernel(grid=grid, k=1, blocks=np.zeros((3, 3, 1, 1)))
