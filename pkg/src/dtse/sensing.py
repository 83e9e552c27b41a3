"""Roadside-unit and connected-vehicle sensors.

Every sensor observes the (density, relative flow) pair of the single cell it
occupies: RSUs a fixed cell, CVs whichever cell contains their current
position. Measurements are the true cell state plus zero-mean Gaussian noise,
clamped to the physical box afterwards. Cell indices are 1-based at this API
boundary; positions are effective-domain coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .arz import ModelParams
from .ground_truth import GroundTruthFields
from .units import KMH_PER_MPS  # noqa: F401  (re-exported unit helpers live here)

RSU = "rsu"
CV = "cv"


@dataclass
class SensorNode:
    """One sensing node: a fixed RSU or a trajectory-following CV.

    noise_cov is the 2x2 measurement covariance in SI units
    ((veh/m)^2, (veh/s)^2). CVs resolve their position through position_fn,
    which returns the effective-domain position or None when off the road.
    """

    sensor_id: str
    kind: str
    noise_cov: np.ndarray
    cell: int | None = None  # fixed cell, RSUs only
    position_fn: Callable[[int], float | None] | None = field(default=None, repr=False)

    def position_at(self, k: int, p: ModelParams) -> float | None:
        if self.kind == RSU:
            return (self.cell - 0.5) * p.dh if self.cell is not None else None
        return self.position_fn(k) if self.position_fn is not None else None

    def cell_at(self, k: int, p: ModelParams) -> int | None:
        """Occupied cell at step k; None means inactive."""
        if self.kind == RSU:
            return self.cell
        pos = self.position_fn(k) if self.position_fn is not None else None
        return None if pos is None else occupied_cell(pos, p)


@dataclass(frozen=True)
class Measurement:
    """One sensor reading: y = (rho, psi) of the occupied cell, SI units."""

    y: np.ndarray
    cell: int
    sensor_id: str
    k: int


def measurement_matrix(cell: int, n_cells: int) -> np.ndarray:
    """2 x 2N selector picking the (rho, psi) pair of a 1-based cell index."""
    if not 1 <= cell <= n_cells:
        raise ValueError(f"cell {cell} outside 1..{n_cells}")
    c = np.zeros((2, 2 * n_cells))
    c[0, 2 * cell - 2] = 1.0
    c[1, 2 * cell - 1] = 1.0
    return c


def occupied_cell(position: float, p: ModelParams) -> int | None:
    """1-based cell containing an effective-domain position, None if outside."""
    if position < 0.0 or position >= p.length:
        return None
    return int(position // p.dh) + 1


def make_measurement(
    fields: GroundTruthFields,
    sensor: SensorNode,
    k: int,
    rng: np.random.Generator,
) -> Measurement | None:
    """Noisy reading of the sensor's occupied cell; None when inactive.

    Noise is Gaussian with the sensor's covariance; the result is clamped to
    rho in [0, rho_jam], psi in [0, v_free*rho_jam].
    """
    p = fields.params
    cell = sensor.cell_at(k, p)
    if cell is None:
        return None
    row = fields.row(k)
    truth = np.array([fields.rho[row, cell - 1], fields.psi[row, cell - 1]])
    cov = np.asarray(sensor.noise_cov, dtype=float)
    if np.any(cov):
        y = truth + np.linalg.cholesky(cov) @ rng.standard_normal(2)
    else:
        y = truth.copy()
    y[0] = min(max(y[0], 0.0), p.rho_jam)
    y[1] = min(max(y[1], 0.0), p.psi_max)
    return Measurement(y=y, cell=cell, sensor_id=sensor.sensor_id, k=k)


def write_measurements_csv(measurements: list[Measurement], kinds: dict[str, str], path) -> None:
    """Columns: k, sensor_id, kind, cell, rho_meas, psi_meas (reporting units)."""
    with open(path, "w") as fh:
        fh.write("k,sensor_id,kind,cell,rho_vehkm,psi_vehh\n")
        for m in measurements:
            fh.write(
                f"{m.k},{m.sensor_id},{kinds[m.sensor_id]},{m.cell},"
                f"{m.y[0] * 1e3:.6f},{m.y[1] * 3600.0:.4f}\n"
            )
