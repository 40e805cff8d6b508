"""DC power flow: susceptance Laplacian and angle/injection solves."""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .grid import Grid, incidence_matrix, is_connected

# injections must balance to this, scaled by max(1, |P|_inf)
BALANCE_TOL = 1e-6


class DisconnectedTopologyError(ValueError):
    """The active branches do not span the network, so angles are not unique."""


def _check_topology(grid: Grid, s) -> np.ndarray:
    s = np.asarray(s)
    if s.shape != (grid.n_branches,):
        raise ValueError(f"topology shape {s.shape} does not match {grid.n_branches} branches")
    return s


def build_laplacian(grid: Grid, s) -> np.ndarray:
    """``M diag(s / x) M^T`` for the active branches of ``s``."""
    s = _check_topology(grid, s)
    m = incidence_matrix(grid)
    return (m * (s / grid.reactances)) @ m.T


def solve_angles(grid: Grid, s, p) -> np.ndarray:
    """Phase angles (radians) with the reference bus pinned to zero.

    Drops the reference row/column and Cholesky-solves the reduced system;
    this is the pseudoinverse solution shifted so the reference angle is 0.
    """
    s = _check_topology(grid, s)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (grid.n_buses,):
        raise ValueError(f"injection length {p.shape} does not match {grid.n_buses} buses")
    if abs(p.sum()) > BALANCE_TOL * max(1.0, float(np.abs(p).max(initial=0.0))):
        raise ValueError(f"injections do not balance (sum {p.sum():.3e})")
    if not is_connected(grid, s):
        raise DisconnectedTopologyError("topology is disconnected")
    lap = build_laplacian(grid, s)
    keep = np.arange(grid.n_buses) != grid.reference_bus
    theta = np.zeros(grid.n_buses)
    if not keep.any():
        return theta
    try:
        factor = cho_factor(lap[np.ix_(keep, keep)], check_finite=False)
    except LinAlgError:
        raise DisconnectedTopologyError("reduced Laplacian is singular: topology is disconnected") from None
    theta[keep] = cho_solve(factor, p[keep], check_finite=False)
    return theta


def injections_from_angles(grid: Grid, s, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (grid.n_buses,):
        raise ValueError(f"angle length {theta.shape} does not match {grid.n_buses} buses")
    return build_laplacian(grid, s) @ theta


def angle_operator(grid: Grid, s) -> np.ndarray:
    """N x N matrix ``A`` with ``solve_angles(grid, s, p) == A @ p`` for balanced ``p``."""
    s = _check_topology(grid, s)
    if not is_connected(grid, s):
        raise DisconnectedTopologyError("topology is disconnected")
    lap = build_laplacian(grid, s)
    keep = np.arange(grid.n_buses) != grid.reference_bus
    op = np.zeros((grid.n_buses, grid.n_buses))
    if keep.any():
        op[np.ix_(keep, keep)] = np.linalg.inv(lap[np.ix_(keep, keep)])
    return op
