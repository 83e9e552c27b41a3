"""Discretized second-order (ARZ) traffic flow model.

State per cell is the pair (rho, psi): density [veh/m] and relative flow
[veh/s], stacked into a flat vector of length 2N with cell i (1-based)
occupying components 2i-2 and 2i-1. One step of the model is

    x_next = A x + G f(x, u) + noise

where A carries the relaxation of the relative flow toward equilibrium,
G = (dt/dh) I scales the net demand-supply interface fluxes f, and u holds
the three boundary conditions (upstream demand, upstream driver
characteristic, downstream density).

All quantities are SI: m, s, veh/m, veh/s. The driver characteristic
chi = psi/rho uses a density floor of RHO_EPS to stay finite on empty cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Density floor for the relative-flow division chi = psi/rho [veh/m].
RHO_EPS = 1e-9


@dataclass(frozen=True)
class ModelParams:
    """Calibrated model constants plus the space-time grid.

    v_free: free-flow speed [m/s]
    rho_jam: jam density, all lanes combined [veh/m]
    gamma: fundamental-diagram exponent
    tau: relaxation time [s]
    n_cells: number of cells N
    dt: sampling interval [s]
    dh: cell length [m]
    """

    v_free: float
    rho_jam: float
    gamma: float
    tau: float
    n_cells: int
    dt: float
    dh: float

    def __post_init__(self) -> None:
        for name in ("v_free", "rho_jam", "gamma", "tau", "dt", "dh"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.n_cells < 1:
            raise ValueError("n_cells must be at least 1")
        if self.cfl >= 1.0:
            raise ValueError(
                f"CFL condition violated: v_free*dt/dh = {self.cfl:.4f} >= 1"
            )

    @property
    def cfl(self) -> float:
        """Courant number v_free*dt/dh of the explicit scheme."""
        return self.v_free * self.dt / self.dh

    @property
    def psi_max(self) -> float:
        """Upper box-constraint bound for the relative flow [veh/s]."""
        return self.v_free * self.rho_jam

    @property
    def length(self) -> float:
        """Modeled road length n_cells*dh [m]."""
        return self.n_cells * self.dh


class CellState(NamedTuple):
    rho: float  # [veh/m]
    psi: float  # [veh/s]


@dataclass(frozen=True)
class BoundaryInput:
    """Boundary conditions of one step: upstream demand [veh/s], upstream
    driver characteristic [m/s], downstream density [veh/m]."""

    demand_up: float
    chi_up: float
    rho_down: float

    def __post_init__(self) -> None:
        if self.demand_up < 0 or self.chi_up < 0 or self.rho_down < 0:
            raise ValueError("boundary inputs must be nonnegative")


@dataclass(frozen=True)
class Linearization:
    """First-order model x_next ~= transition @ x + offset around one state."""

    transition: np.ndarray  # (2N, 2N)
    offset: np.ndarray  # (2N,)


# ---------------------------------------------------------------------------
# constitutive functions

def pressure(rho, p: ModelParams):
    """Anticipation pressure v_free*(rho/rho_jam)**gamma [m/s]."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("pressure: density must be nonnegative")
    return p.v_free * (rho / p.rho_jam) ** p.gamma


def equilibrium_velocity(rho, p: ModelParams):
    """Equilibrium speed v_free*(1 - (rho/rho_jam)**gamma) [m/s]."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0) or np.any(rho > p.rho_jam):
        raise ValueError("equilibrium_velocity: density outside [0, rho_jam]")
    return p.v_free * (1.0 - (rho / p.rho_jam) ** p.gamma)


def critical_density(chi, p: ModelParams):
    """Density separating the free-flow and congested flux branches [veh/m]."""
    chi = np.asarray(chi, dtype=float)
    if np.any(chi < 0):
        raise ValueError("critical_density: driver characteristic must be >= 0")
    return p.rho_jam * (chi / (p.v_free * (1.0 + p.gamma))) ** (1.0 / p.gamma)


def driver_characteristic(rho: float, psi: float) -> float:
    """chi = psi/rho with the RHO_EPS density floor [m/s]."""
    return psi / max(rho, RHO_EPS)


# ---------------------------------------------------------------------------
# scalar helpers with one-sided gradients (no domain checks, clamped inputs)

def _pressure_grad(rho: float, p: ModelParams) -> tuple[float, float]:
    if rho <= 0.0:
        return 0.0, 0.0
    ratio = rho / p.rho_jam
    val = p.v_free * ratio**p.gamma
    return val, p.v_free * p.gamma * ratio ** (p.gamma - 1.0) / p.rho_jam


def _sigma(chi: float, p: ModelParams) -> float:
    if chi <= 0.0:
        return 0.0
    return p.rho_jam * (chi / (p.v_free * (1.0 + p.gamma))) ** (1.0 / p.gamma)


def _chi_grad(rho: float, psi: float) -> tuple[float, float, float]:
    """(chi, dchi/drho, dchi/dpsi); the floor freezes drho below RHO_EPS."""
    if rho > RHO_EPS:
        return psi / rho, -psi / rho**2, 1.0 / rho
    return psi / RHO_EPS, 0.0, 1.0 / RHO_EPS


def _demand_grad(rho: float, psi: float, p: ModelParams) -> tuple[float, float, float]:
    """Max outflow of a cell and its gradient wrt (rho, psi), clamped >= 0."""
    if rho <= 0.0:
        return 0.0, 0.0, 0.0
    chi, dchi_r, dchi_p = _chi_grad(rho, psi)
    sig = _sigma(chi, p)
    if rho <= sig:
        pr, dpr = _pressure_grad(rho, p)
        val = rho * (chi - pr)
        d_r = (chi - pr) + rho * (dchi_r - dpr)
        d_p = rho * dchi_p
    elif chi <= 0.0:
        return 0.0, 0.0, 0.0
    else:
        # capped branch: sigma(chi)*chi*gamma/(1+gamma); d/dchi = ... cf. dsig
        dsig = sig / (p.gamma * chi)
        val = sig * chi * p.gamma / (1.0 + p.gamma)
        d_chi = (dsig * chi + sig) * p.gamma / (1.0 + p.gamma)
        d_r = d_chi * dchi_r
        d_p = d_chi * dchi_p
    if val < 0.0:
        return 0.0, 0.0, 0.0
    return val, d_r, d_p


def _supply_grad(rho_down: float, chi_up: float, p: ModelParams) -> tuple[float, float, float]:
    """Max inflow into a cell: (value, d/drho_down, d/dchi_up), clamped >= 0."""
    sig = _sigma(chi_up, p)
    if rho_down <= sig:
        # free branch sigma(chi)*chi*gamma/(1+gamma); d/dchi simplifies to sigma
        val = sig * chi_up * p.gamma / (1.0 + p.gamma)
        d_rho = 0.0
        d_chi = sig
    else:
        pr, dpr = _pressure_grad(rho_down, p)
        val = rho_down * (chi_up - pr)
        d_rho = (chi_up - pr) - rho_down * dpr
        d_chi = rho_down
    if val < 0.0:
        return 0.0, 0.0, 0.0
    return val, d_rho, d_chi


def demand(cell: CellState, p: ModelParams) -> float:
    """Maximum flow that can exit a cell [veh/s]."""
    val, _, _ = _demand_grad(cell.rho, cell.psi, p)
    return val


def supply(cell: CellState, chi_upstream: float, p: ModelParams) -> float:
    """Maximum flow a cell can accept from upstream [veh/s]."""
    val, _, _ = _supply_grad(cell.rho, chi_upstream, p)
    return val


def interface_flux(up: CellState, down: CellState, p: ModelParams) -> tuple[float, float]:
    """Godunov flux between two cells: (vehicle flux q, relative-flow flux phi).

    q = min(demand(up), supply(down, chi_up)); ties go to the demand side.
    phi = q * chi_up, clamped nonnegative.
    """
    d_val, _, _ = _demand_grad(up.rho, up.psi, p)
    chi_up = driver_characteristic(up.rho, up.psi)
    s_val, _, _ = _supply_grad(down.rho, chi_up, p)
    q = d_val if d_val <= s_val else s_val
    return q, max(q * chi_up, 0.0)


# ---------------------------------------------------------------------------
# state-vector utilities

def state_from_cells(rho, psi) -> np.ndarray:
    """Interleave per-cell density and relative-flow arrays into a 2N vector."""
    rho = np.asarray(rho, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if rho.shape != psi.shape:
        raise ValueError("rho and psi must have the same length")
    x = np.empty(2 * rho.size)
    x[0::2] = rho
    x[1::2] = psi
    return x


def split_state(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Views of the density and relative-flow components of a 2N vector."""
    return x[0::2], x[1::2]


def _check_state(x: np.ndarray, p: ModelParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (2 * p.n_cells,):
        raise ValueError(f"state must have shape ({2 * p.n_cells},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite entries")
    return x


def system_matrices(p: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Dense (A, G): relaxation/transition matrix and flux scaling matrix."""
    a_block = np.array(
        [[1.0, 0.0], [p.v_free * p.dt / p.tau, 1.0 - p.dt / p.tau]]
    )
    a = np.kron(np.eye(p.n_cells), a_block)
    g = (p.dt / p.dh) * np.eye(2 * p.n_cells)
    return a, g


# ---------------------------------------------------------------------------
# fluxes, stepping, linearization

def _boundary_chi(u: BoundaryInput) -> float:
    return u.chi_up


def flux_vector(x: np.ndarray, u: BoundaryInput, p: ModelParams) -> np.ndarray:
    """Net interface flux per component: pair i is (q_{i-1}-q_i, phi_{i-1}-phi_i)."""
    x = _check_state(x, p)
    rho, psi = split_state(x)
    n = p.n_cells
    q = np.empty(n + 1)
    phi = np.empty(n + 1)

    # upstream boundary: demand given by the input, supply from cell 1
    s_val, _, _ = _supply_grad(rho[0], u.chi_up, p)
    q[0] = u.demand_up if u.demand_up <= s_val else s_val
    phi[0] = max(q[0] * u.chi_up, 0.0)

    for i in range(1, n + 1):
        d_val, _, _ = _demand_grad(rho[i - 1], psi[i - 1], p)
        chi_up = driver_characteristic(rho[i - 1], psi[i - 1])
        if i < n:
            rho_down = rho[i]
        else:
            rho_down = u.rho_down
        s_val, _, _ = _supply_grad(rho_down, chi_up, p)
        q[i] = d_val if d_val <= s_val else s_val
        phi[i] = max(q[i] * chi_up, 0.0)

    f = np.empty(2 * n)
    f[0::2] = q[:-1] - q[1:]
    f[1::2] = phi[:-1] - phi[1:]
    return f


def step(
    x: np.ndarray,
    u: BoundaryInput,
    p: ModelParams,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One model step A x + G f(x, u) + noise. No projection is applied."""
    x = _check_state(x, p)
    rho, psi = split_state(x)
    f = flux_vector(x, u, p)
    out = np.empty_like(x)
    out[0::2] = rho
    out[1::2] = (p.v_free * p.dt / p.tau) * rho + (1.0 - p.dt / p.tau) * psi
    out += (p.dt / p.dh) * f
    if noise is not None:
        out += noise
    return out


def jacobian_flux(x: np.ndarray, u: BoundaryInput, p: ModelParams) -> np.ndarray:
    """Analytic derivative of flux_vector wrt the state (block tridiagonal).

    Branch kinks (demand/supply switch, min ties, clamps) use the derivative
    of the branch that flux_vector itself selects.
    """
    x = _check_state(x, p)
    rho, psi = split_state(x)
    n = p.n_cells
    jac = np.zeros((2 * n, 2 * n))

    # per interface i = 0..n: flux value plus gradients wrt the up cell pair
    # (i-1, zero-based) and the down cell pair (i); boundaries drop one side.
    q = np.empty(n + 1)
    chi = np.empty(n + 1)
    dq_up = np.zeros((n + 1, 2))
    dq_down = np.zeros((n + 1, 2))
    dchi_up = np.zeros((n + 1, 2))  # gradient of the interface's chi_up

    s_val, ds_rho, _ = _supply_grad(rho[0], u.chi_up, p)
    chi[0] = u.chi_up
    if u.demand_up <= s_val:
        q[0] = u.demand_up
    else:
        q[0] = s_val
        dq_down[0] = (ds_rho, 0.0)

    for i in range(1, n + 1):
        ur, up_ = rho[i - 1], psi[i - 1]
        d_val, dd_r, dd_p = _demand_grad(ur, up_, p)
        c, dc_r, dc_p = _chi_grad(ur, up_)
        chi[i] = c
        dchi_up[i] = (dc_r, dc_p)
        rho_down = rho[i] if i < n else u.rho_down
        s_val, ds_rho, ds_chi = _supply_grad(rho_down, c, p)
        if d_val <= s_val:
            q[i] = d_val
            dq_up[i] = (dd_r, dd_p)
        else:
            q[i] = s_val
            dq_up[i] = (ds_chi * dc_r, ds_chi * dc_p)
            if i < n:
                dq_down[i] = (ds_rho, 0.0)

    # phi_i = q_i * chi_i with the >= 0 clamp
    dphi_up = np.zeros((n + 1, 2))
    dphi_down = np.zeros((n + 1, 2))
    for i in range(n + 1):
        if q[i] * chi[i] >= 0.0:
            dphi_up[i] = chi[i] * dq_up[i] + q[i] * dchi_up[i]
            dphi_down[i] = chi[i] * dq_down[i]

    for cell in range(n):  # zero-based cell, rows 2*cell (rho) and 2*cell+1 (psi)
        r_row, p_row = 2 * cell, 2 * cell + 1
        i_in, i_out = cell, cell + 1
        # inflow interface: up pair lives at cell-1, down pair at this cell
        if cell > 0:
            jac[r_row, 2 * cell - 2 : 2 * cell] += dq_up[i_in]
            jac[p_row, 2 * cell - 2 : 2 * cell] += dphi_up[i_in]
        jac[r_row, 2 * cell : 2 * cell + 2] += dq_down[i_in]
        jac[p_row, 2 * cell : 2 * cell + 2] += dphi_down[i_in]
        # outflow interface: up pair at this cell, down pair at cell+1
        jac[r_row, 2 * cell : 2 * cell + 2] -= dq_up[i_out]
        jac[p_row, 2 * cell : 2 * cell + 2] -= dphi_up[i_out]
        if cell < n - 1:
            jac[r_row, 2 * cell + 2 : 2 * cell + 4] -= dq_down[i_out]
            jac[p_row, 2 * cell + 2 : 2 * cell + 4] -= dphi_down[i_out]

    return jac


def linearize(x_hat: np.ndarray, u: BoundaryInput, p: ModelParams) -> Linearization:
    """Tangent model at x_hat: transition = A + G J, offset = G(f - J x_hat).

    Exact by construction: transition @ x_hat + offset == A x_hat + G f(x_hat).
    """
    x_hat = _check_state(x_hat, p)
    a, _ = system_matrices(p)
    jac = jacobian_flux(x_hat, u, p)
    f = flux_vector(x_hat, u, p)
    scale = p.dt / p.dh
    transition = a + scale * jac
    offset = scale * (f - jac @ x_hat)
    return Linearization(transition=transition, offset=offset)
