"""Microscopic ground truth: Krauss car-following on a two-lane road.

Generates vehicle trajectories for the bottleneck scenario, aggregates them
to macroscopic per-cell (density, speed, relative flow) fields, and extracts
the three boundary conditions the macroscopic model needs.

Coordinates: the microsimulator works in absolute road coordinates
[0, total_length]; the first and last buffer_length meters are boundary
buffers, so effective (study-domain) position = absolute - buffer_length.
Vehicle position is the front bumper. Per lane, positions are strictly
decreasing with front-to-back gaps of at least min_gap at all times: the
Krauss safe speed keeps followers out of trouble and a front-to-back position
clamp enforces the gap exactly under synchronous updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .arz import ModelParams, pressure
from .units import KMH_PER_MPS, VEH_PER_H_PER_VEH_PER_S, VEH_PER_KM_PER_VEH_PER_M


@dataclass(frozen=True)
class KraussParams:
    """Car-following constants (microsim defaults; only min_gap is calibrated)."""

    accel: float = 2.6  # [m/s^2]
    decel: float = 4.5  # [m/s^2]
    imperfection: float = 0.5  # dawdling factor in [0, 1]
    length: float = 5.0  # vehicle length [m]
    min_gap: float = 1.5  # [m]
    dt_micro: float = 0.5  # micro time step [s]
    reaction: float = 1.0  # driver reaction headway in the safe-speed rule [s]


@dataclass(frozen=True)
class ScenarioSpec:
    """Two-lane highway scenario with a temporary speed-limit bottleneck.

    Positions are meters; bottleneck_position is in effective coordinates.
    """

    total_length: float = 2700.0
    buffer_length: float = 100.0
    duration: float = 1200.0
    speed_limit: float = 100.0 / 3.6  # [m/s]
    bottleneck_position: float = 2200.0
    bottleneck_limit: float = 10.0 / 3.6  # [m/s]
    bottleneck_start: float = 700.0
    bottleneck_end: float = 760.0
    bottleneck_length: float = 100.0
    mean_headway: float = 1.0  # mean interarrival time [s]
    cv_penetration: float = 0.10
    seed: int = 1
    krauss: KraussParams = KraussParams()

    def __post_init__(self) -> None:
        if not (0.0 <= self.bottleneck_start <= self.bottleneck_end <= self.duration):
            raise ValueError("bottleneck interval must lie within [0, duration]")
        if not 0.0 <= self.cv_penetration <= 1.0:
            raise ValueError("cv_penetration must be in [0, 1]")
        if self.total_length <= 2 * self.buffer_length:
            raise ValueError("total_length must exceed the two buffers")
        if self.mean_headway <= 0 or self.duration < 0:
            raise ValueError("mean_headway must be positive, duration nonnegative")

    @property
    def effective_length(self) -> float:
        return self.total_length - 2.0 * self.buffer_length


@dataclass
class Snapshot:
    """Road state at one macroscopic step, arrays sorted by vehicle id."""

    ids: np.ndarray
    lane: np.ndarray
    pos: np.ndarray  # absolute [m]
    speed: np.ndarray  # [m/s]


@dataclass
class Trajectories:
    """Time-indexed snapshots plus bookkeeping over one microsim run."""

    spec: ScenarioSpec
    dt: float  # macroscopic sampling interval [s]
    snapshots: list[Snapshot]
    entered: np.ndarray  # cumulative vehicles that entered the road, per step
    exited: np.ndarray  # cumulative vehicles that left the road, per step
    _presence: dict[int, tuple[int, int]] | None = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.snapshots) - 1

    def position_of(self, vehicle_id: int, k: int) -> float | None:
        """Absolute position of a vehicle at step k, None when off the road."""
        snap = self.snapshots[k]
        idx = np.searchsorted(snap.ids, vehicle_id)
        if idx < snap.ids.size and snap.ids[idx] == vehicle_id:
            return float(snap.pos[idx])
        return None

    def effective_position_of(self, vehicle_id: int, k: int) -> float | None:
        pos = self.position_of(vehicle_id, k)
        return None if pos is None else pos - self.spec.buffer_length

    def domain_presence(self) -> dict[int, tuple[int, int]]:
        """vehicle id -> (first, last) step present in the effective domain."""
        if self._presence is None:
            presence: dict[int, tuple[int, int]] = {}
            lo = self.spec.buffer_length
            hi = lo + self.spec.effective_length
            for k, snap in enumerate(self.snapshots):
                inside = (snap.pos >= lo) & (snap.pos < hi)
                for vid in snap.ids[inside]:
                    vid = int(vid)
                    if vid in presence:
                        presence[vid] = (presence[vid][0], k)
                    else:
                        presence[vid] = (k, k)
            self._presence = presence
        return self._presence

    def domain_entry_counts(self) -> np.ndarray:
        """Number of vehicles first entering the effective domain at each step."""
        counts = np.zeros(len(self.snapshots), dtype=int)
        for first, _ in self.domain_presence().values():
            counts[first] += 1
        return counts


@dataclass
class GroundTruthFields:
    """Macroscopic per-cell fields over a step window [k0, k0 + K - 1]."""

    params: ModelParams
    k0: int
    rho: np.ndarray  # (K, N) [veh/m], both lanes combined
    v: np.ndarray  # (K, N) [m/s], v_free where empty
    psi: np.ndarray  # (K, N) [veh/s]

    @property
    def k1(self) -> int:
        return self.k0 + self.rho.shape[0] - 1

    def row(self, k: int) -> int:
        if not self.k0 <= k <= self.k1:
            raise IndexError(f"step {k} outside field window [{self.k0}, {self.k1}]")
        return k - self.k0

    def state(self, k: int) -> np.ndarray:
        """Ground-truth state vector (2N,) at step k."""
        r = self.row(k)
        out = np.empty(2 * self.params.n_cells)
        out[0::2] = self.rho[r]
        out[1::2] = self.psi[r]
        return out


# ---------------------------------------------------------------------------
# arrivals and car following

def spawn_arrivals(mean_headway: float, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Exponential arrival process: sorted arrival times in [0, duration)."""
    if mean_headway <= 0:
        raise ValueError("mean_headway must be positive")
    times = []
    t = rng.exponential(mean_headway)
    while t < duration:
        times.append(t)
        t += rng.exponential(mean_headway)
    return np.asarray(times)


def safe_speed(gap: np.ndarray, leader_speed: np.ndarray, kp: KraussParams) -> np.ndarray:
    """Krauss safe speed from the stopping-distance rule with reaction headway."""
    btr = kp.decel * kp.reaction
    margin = np.maximum(gap - kp.min_gap, 0.0)
    return -btr + np.sqrt(btr**2 + leader_speed**2 + 2.0 * kp.decel * margin)


def krauss_step(
    lanes: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    limit_fn: Callable[[np.ndarray], np.ndarray],
    kp: KraussParams,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Advance every lane one micro step.

    lanes: per lane (ids, pos, speed) with positions strictly decreasing.
    limit_fn: vectorized position -> effective speed limit map.
    Returns new per-lane arrays; no collisions: gaps stay >= min_gap.
    """
    out = []
    for ids, pos, speed in lanes:
        n = ids.size
        if n == 0:
            out.append((ids, pos, speed))
            continue
        v_des = np.minimum(speed + kp.accel * kp.dt_micro, limit_fn(pos))
        if n > 1:
            gap = pos[:-1] - kp.length - pos[1:]
            v_des[1:] = np.minimum(v_des[1:], safe_speed(gap, speed[:-1], kp))
        dawdle = kp.imperfection * kp.accel * kp.dt_micro * rng.random(n)
        v_new = np.maximum(0.0, v_des - dawdle)
        pos_new = pos + v_new * kp.dt_micro
        # exact gap enforcement, front to back
        d = kp.length + kp.min_gap
        shift = d * np.arange(n)
        pos_new = np.minimum.accumulate(pos_new + shift) - shift
        v_new = (pos_new - pos) / kp.dt_micro
        out.append((ids, pos_new, v_new))
    return out


# ---------------------------------------------------------------------------
# scenario simulation

def _limit_fn(spec: ScenarioSpec, t: float) -> Callable[[np.ndarray], np.ndarray]:
    kp = spec.krauss
    z0 = spec.buffer_length + spec.bottleneck_position
    z1 = z0 + spec.bottleneck_length
    active = spec.bottleneck_start <= t < spec.bottleneck_end

    def fn(pos: np.ndarray) -> np.ndarray:
        lim = np.full(pos.shape, spec.speed_limit)
        if active:
            inside = (pos >= z0) & (pos < z1)
            # vehicles brake inside the zone: the feasible-deceleration envelope
            # from the zone entrance is the local limit until it meets the
            # reduced value
            depth = pos[inside] - z0
            envelope = np.sqrt(
                np.maximum(
                    spec.speed_limit**2 - 2.0 * kp.decel * depth,
                    spec.bottleneck_limit**2,
                )
            )
            lim[inside] = envelope
        return lim

    return fn


def run_microsim(spec: ScenarioSpec, rng: np.random.Generator | None = None) -> Trajectories:
    """Simulate the scenario and sample it at the macroscopic interval (1 s).

    Vehicles enter at position 0 on the lane with fewer vehicles in the first
    200 m (ties to lane 0), blocked arrivals wait in order, and vehicles leave
    once their front bumper passes total_length.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    kp = spec.krauss
    dt_macro = 1.0
    substeps = int(round(dt_macro / kp.dt_micro))
    if abs(substeps * kp.dt_micro - dt_macro) > 1e-9:
        raise ValueError("dt_micro must divide the 1 s sampling interval")

    arrivals = spawn_arrivals(spec.mean_headway, spec.duration, rng)
    next_arrival = 0
    next_id = 0
    lanes: list[dict[str, np.ndarray]] = [
        {"ids": np.empty(0, dtype=np.int64), "pos": np.empty(0), "speed": np.empty(0)}
        for _ in range(2)
    ]
    n_entered = 0
    n_exited = 0

    def snapshot() -> Snapshot:
        ids = np.concatenate([lanes[0]["ids"], lanes[1]["ids"]])
        lane = np.concatenate(
            [np.zeros(lanes[0]["ids"].size, dtype=np.int8), np.ones(lanes[1]["ids"].size, dtype=np.int8)]
        )
        pos = np.concatenate([lanes[0]["pos"], lanes[1]["pos"]])
        speed = np.concatenate([lanes[0]["speed"], lanes[1]["speed"]])
        order = np.argsort(ids)
        return Snapshot(ids=ids[order], lane=lane[order], pos=pos[order], speed=speed[order])

    n_macro = int(round(spec.duration / dt_macro))
    snapshots = [snapshot()]
    entered_hist = [0]
    exited_hist = [0]

    for k in range(n_macro):
        for sub in range(substeps):
            t = k * dt_macro + sub * kp.dt_micro
            limit_fn = _limit_fn(spec, t)
            stepped = krauss_step(
                [(ln["ids"], ln["pos"], ln["speed"]) for ln in lanes], limit_fn, kp, rng
            )
            for ln, (ids, pos, speed) in zip(lanes, stepped):
                keep = pos < spec.total_length
                n_exited += int((~keep).sum())
                ln["ids"], ln["pos"], ln["speed"] = ids[keep], pos[keep], speed[keep]

            # admit pending arrivals in order; a blocked head blocks the rest
            t_next = t + kp.dt_micro
            while next_arrival < arrivals.size and arrivals[next_arrival] <= t_next:
                counts = [int((ln["pos"] < 200.0).sum()) for ln in lanes]
                order = [0, 1] if counts[0] <= counts[1] else [1, 0]
                placed = False
                for li in order:
                    ln = lanes[li]
                    if ln["ids"].size == 0:
                        entry_speed = float(limit_fn(np.zeros(1))[0])
                    else:
                        tail_pos = ln["pos"][-1]
                        if tail_pos < kp.length + kp.min_gap:
                            continue
                        entry_speed = float(
                            min(
                                limit_fn(np.zeros(1))[0],
                                safe_speed(
                                    np.array([tail_pos - kp.length]),
                                    ln["speed"][-1:],
                                    kp,
                                )[0],
                            )
                        )
                    ln["ids"] = np.append(ln["ids"], next_id)
                    ln["pos"] = np.append(ln["pos"], 0.0)
                    ln["speed"] = np.append(ln["speed"], entry_speed)
                    next_id += 1
                    n_entered += 1
                    next_arrival += 1
                    placed = True
                    break
                if not placed:
                    break

        snapshots.append(snapshot())
        entered_hist.append(n_entered)
        exited_hist.append(n_exited)

    return Trajectories(
        spec=spec,
        dt=dt_macro,
        snapshots=snapshots,
        entered=np.asarray(entered_hist),
        exited=np.asarray(exited_hist),
    )


# ---------------------------------------------------------------------------
# aggregation and boundary extraction

def aggregate(
    traj: Trajectories, p: ModelParams, window: tuple[int, int] | None = None
) -> GroundTruthFields:
    """Per-cell density/speed/relative-flow fields over the step window.

    Density counts both lanes against one cell; empty cells use the free-flow
    speed convention. The relative flow follows psi = rho*(v + pressure(rho)).
    """
    spec = traj.spec
    if abs(p.n_cells * p.dh - spec.effective_length) > 1e-6:
        raise ValueError("model grid does not match the scenario's effective domain")
    k0, k1 = window if window is not None else (0, traj.n_steps)
    if not (0 <= k0 <= k1 <= traj.n_steps):
        raise ValueError(f"window [{k0}, {k1}] outside trajectory range")
    n_rows = k1 - k0 + 1
    rho = np.zeros((n_rows, p.n_cells))
    v = np.full((n_rows, p.n_cells), p.v_free)
    for r, k in enumerate(range(k0, k1 + 1)):
        snap = traj.snapshots[k]
        eff = snap.pos - spec.buffer_length
        inside = (eff >= 0.0) & (eff < spec.effective_length)
        cells = (eff[inside] // p.dh).astype(int)
        counts = np.bincount(cells, minlength=p.n_cells)
        rho[r] = counts / p.dh
        speed_sum = np.bincount(cells, weights=snap.speed[inside], minlength=p.n_cells)
        occupied = counts > 0
        v[r, occupied] = speed_sum[occupied] / counts[occupied]
    psi = rho * (v + np.asarray(pressure(rho, p)))
    return GroundTruthFields(params=p, k0=k0, rho=rho, v=v, psi=psi)


def extract_boundary_input(
    traj: Trajectories, p: ModelParams, k: int, demand_window: int = 10
):
    """Boundary conditions at step k, measured by the boundary roadside units.

    Upstream demand: effective-domain entry crossings over a trailing window
    divided by its span. Upstream driver characteristic: mean speed inside the
    upstream buffer (free-flow speed when empty) plus the pressure at the
    buffer density. Downstream density: vehicle count in the downstream
    buffer, clamped at the jam density.
    """
    from .arz import BoundaryInput

    spec = traj.spec
    entries = traj.domain_entry_counts()
    lo = max(0, k - demand_window + 1)
    elapsed = (k - lo + 1) * traj.dt
    demand_up = float(entries[lo : k + 1].sum()) / elapsed

    snap = traj.snapshots[k]
    in_up = snap.pos < spec.buffer_length
    rho_up = in_up.sum() / spec.buffer_length
    mean_speed = float(snap.speed[in_up].mean()) if in_up.any() else p.v_free
    chi_up = mean_speed + float(pressure(min(rho_up, p.rho_jam), p))

    in_down = snap.pos >= spec.total_length - spec.buffer_length
    rho_down = min(in_down.sum() / spec.buffer_length, p.rho_jam)
    return BoundaryInput(demand_up=demand_up, chi_up=chi_up, rho_down=rho_down)


def wave_peak_cells(
    fields: GroundTruthFields,
    t0: int,
    t1: int,
    block: int = 10,
    threshold_vehkm: float = 150.0,
) -> list[int]:
    """Peak cell index (1-based) per block of block-mean density in [t0, t1).

    Only blocks whose peak exceeds the threshold count as part of the wave.
    Cell counts are quantized at one vehicle per cell, which makes per-second
    argmax sequences flicker between near-tied cells; block means recover the
    wave-crest trajectory at the resolution the data support.
    """
    threshold = threshold_vehkm * 1e-3
    peaks = []
    for start in range(t0, t1, block):
        stop = min(start + block, t1)
        rows = fields.rho[fields.row(start) : fields.row(stop - 1) + 1]
        mean = rows.mean(axis=0)
        if mean.max() > threshold:
            peaks.append(int(np.argmax(mean)) + 1)
    return peaks


# ---------------------------------------------------------------------------
# CSV export

def write_trajectories_csv(traj: Trajectories, path, cv_ids: set[int]) -> None:
    """Columns: t, vehicle_id, lane, position_m, speed_mps, is_cv."""
    with open(path, "w") as fh:
        fh.write("t,vehicle_id,lane,position_m,speed_mps,is_cv\n")
        for k, snap in enumerate(traj.snapshots):
            t = k * traj.dt
            for i in range(snap.ids.size):
                vid = int(snap.ids[i])
                fh.write(
                    f"{t:.1f},{vid},{int(snap.lane[i])},"
                    f"{snap.pos[i]:.3f},{snap.speed[i]:.4f},{int(vid in cv_ids)}\n"
                )


def write_fields_csv(fields: GroundTruthFields, path) -> None:
    """Columns: k, cell, rho_vehkm, v_kmh, psi_vehh (reporting units)."""
    with open(path, "w") as fh:
        fh.write("k,cell,rho_vehkm,v_kmh,psi_vehh\n")
        for r in range(fields.rho.shape[0]):
            k = fields.k0 + r
            for c in range(fields.params.n_cells):
                fh.write(
                    f"{k},{c + 1},"
                    f"{fields.rho[r, c] * VEH_PER_KM_PER_VEH_PER_M:.6f},"
                    f"{fields.v[r, c] * KMH_PER_MPS:.4f},"
                    f"{fields.psi[r, c] * VEH_PER_H_PER_VEH_PER_S:.4f}\n"
                )
