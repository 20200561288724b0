"""Growth envelopes for the solver kernels."""
from __future__ import annotations

import numpy as np
import pytest

from dmft_lab.flow import TimeGrid
from dmft_lab.phi import PhiParams, dominates, phi_bounds


def test_tiny_coefficients_freeze_the_response_envelope():
    params = PhiParams(M_ell=1e-6, M_lambda=1e-6, M_init_noise=1.0, delta=2.0, k=1)
    bounds = phi_bounds(params, TimeGrid.from_horizon(0.01, 1.0))
    assert float(np.max(np.abs(bounds.phi_Rt - bounds.phi_Rt[0]))) <= 1e-3


@pytest.mark.parametrize("m_ell,m_lambda", [(1.0, 0.0), (0.25, 0.5), (2.0, 1.0)])
def test_all_four_envelopes_are_nondecreasing(m_ell, m_lambda):
    params = PhiParams(
        M_ell=m_ell, M_lambda=m_lambda, M_init_noise=1.0, delta=2.0, k=1
    )
    bounds = phi_bounds(params, TimeGrid.from_horizon(0.05, 2.0))
    for seq in (bounds.phi_Rt, bounds.phi_Rl, bounds.phi_Ct, bounds.phi_Cl):
        assert np.all(np.diff(seq) >= 0.0)
        assert np.all(seq >= 0.0)


def test_envelopes_dominate_the_solved_linear_kernels(mp_linear_run):
    _, grid, sol = mp_linear_run
    params = PhiParams(M_ell=1.0, M_lambda=0.0, M_init_noise=1.0, delta=2.0, k=1)
    margins = dominates(phi_bounds(params, grid), sol)
    assert set(margins) == {"R_theta", "R_ell", "C_theta_diag", "C_ell_diag", "Gamma"}
    for name, margin in margins.items():
        assert margin >= 0.0, name
    # the drift derivative of the linear model sits exactly at its bound
    assert margins["Gamma"] == 0.0


def test_envelope_preconditions_are_enforced():
    grid = TimeGrid(0.1, 5)
    with pytest.raises(ValueError, match="phi_Rt0 must exceed 1"):
        phi_bounds(
            PhiParams(M_ell=1.0, M_lambda=0.0, M_init_noise=1.0, delta=2.0, k=1, phi_Rt0=1.0),
            grid,
        )
    with pytest.raises(ValueError, match="phi_Ct0 must exceed"):
        phi_bounds(
            PhiParams(
                M_ell=1.0, M_lambda=0.0, M_init_noise=2.0, delta=2.0, k=1, phi_Ct0=1.5
            ),
            grid,
        )


def test_dominates_requires_matching_grids(mp_linear_run):
    _, _, sol = mp_linear_run
    params = PhiParams(M_ell=1.0, M_lambda=0.0, M_init_noise=1.0, delta=2.0, k=1)
    other = phi_bounds(params, TimeGrid(0.5, 2))
    with pytest.raises(ValueError, match="different grids"):
        dominates(other, sol)
