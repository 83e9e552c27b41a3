"""Scenario orchestration, ego-vehicle tracking, error metrics, and the
Monte Carlo penetration-rate study.

One ground-truth trajectory pool is generated per study and shared across
all trials; trials differ only in which vehicles are designated as connected
(the reference ego vehicle is in every subset) and in the sensor noise
streams. Per-trial randomness is derived by counters from the master seed so
results are independent of scheduling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import comms, dkf, sensing
from .arz import BoundaryInput, ModelParams, state_from_cells
from .ground_truth import (
    GroundTruthFields,
    ScenarioSpec,
    Trajectories,
    aggregate,
    extract_boundary_input,
    run_microsim,
)
from .units import VEH_PER_H_PER_VEH_PER_S, VEH_PER_KM_PER_VEH_PER_M

RSU_SEED_OFFSET = 1_000_000_007  # keeps RSU noise streams apart from CV ids


@dataclass(frozen=True)
class RunConfig:
    """Everything one scenario/study needs, SI units throughout."""

    scenario: ScenarioSpec
    model: ModelParams
    rsu_positions: tuple[float, ...] = (50.0, 850.0, 1650.0, 2450.0)
    comm_range: float = 400.0
    consensus_rounds: int = 5
    prior_var: tuple[float, float] = (1.0, 1.0)  # (veh/km)^2, (veh/h)^2
    process_var: tuple[float, float] = (4.0, 400.0)  # (veh/km)^2, (veh/h)^2
    measurement_var: tuple[float, float] = (4.0, 400.0)  # (veh/km)^2, (veh/h)^2
    rho_free: float = 0.05  # prior density guess [veh/m]
    rates: tuple[float, ...] = (0.02, 0.05, 0.10, 0.15, 0.20)
    trials: int = 20
    master_seed: int = 2
    window: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        for pos in self.rsu_positions:
            if not 0.0 <= pos < self.model.length:
                raise ValueError(f"RSU position {pos} outside the effective domain")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.consensus_rounds < 0:
            raise ValueError("consensus_rounds must be nonnegative")
        for rate in self.rates:
            if not 0.0 < rate <= 1.0:
                raise ValueError(f"penetration rate {rate} outside (0, 1]")

    # paper-unit variances converted to SI ((veh/m)^2, (veh/s)^2)
    def r_cov(self) -> np.ndarray:
        return np.diag(_pair_to_si(self.measurement_var))

    def q_diag(self) -> np.ndarray:
        return np.tile(_pair_to_si(self.process_var), self.model.n_cells)

    def p0_diag(self) -> np.ndarray:
        return np.tile(_pair_to_si(self.prior_var), self.model.n_cells)

    def prior_mean(self) -> np.ndarray:
        n = self.model.n_cells
        rho = np.full(n, self.rho_free)
        return state_from_cells(rho, self.model.v_free * rho)


def _pair_to_si(pair: tuple[float, float]) -> np.ndarray:
    rho_var, psi_var = pair
    return np.array([rho_var * 1e-6, psi_var / 3600.0**2])


@dataclass
class ScenarioTruth:
    """Shared per-study ground truth: trajectories, fields, ego, pool."""

    traj: Trajectories
    fields: GroundTruthFields
    window: tuple[int, int]
    ego_id: int
    pool: list[int]


def prepare_truth(config: RunConfig) -> ScenarioTruth:
    """Run the microsimulation once and locate the reference ego vehicle.

    The ego is the first vehicle entering the effective domain at or after the
    bottleneck activation; the default analysis window is its traversal.
    """
    traj = run_microsim(config.scenario)
    fields = aggregate(traj, config.model)
    presence = traj.domain_presence()
    if not presence:
        raise ValueError("scenario produced no vehicles in the effective domain")
    after = sorted(
        (first, vid)
        for vid, (first, last) in presence.items()
        if first >= config.scenario.bottleneck_start
    )
    if after:
        ego_id = after[0][1]
    else:
        ego_id = min(presence, key=lambda v: abs(presence[v][0] - config.scenario.bottleneck_start))
    window = config.window if config.window is not None else presence[ego_id]
    k0 = max(0, int(window[0]))
    k1 = min(traj.n_steps, int(window[1]))
    pool = sorted(
        vid for vid, (first, last) in presence.items() if last >= k0 and first <= k1
    )
    return ScenarioTruth(traj=traj, fields=fields, window=(k0, k1), ego_id=ego_id, pool=pool)


def draw_cv_subset(truth: ScenarioTruth, rate: float, rng: np.random.Generator) -> set[int]:
    """Random CV designation at the given penetration; the ego is always in."""
    size = max(1, int(round(rate * len(truth.pool))))
    others = [vid for vid in truth.pool if vid != truth.ego_id]
    extra = min(size - 1, len(others))
    chosen = rng.choice(len(others), size=extra, replace=False) if extra > 0 else []
    return {truth.ego_id} | {others[i] for i in np.asarray(chosen, dtype=int)}


@dataclass
class RunHistory:
    """Everything recorded while stepping one scenario."""

    window: tuple[int, int]
    ego_node: str
    estimates: dict[str, dict[int, np.ndarray]]
    graphs: list[tuple[int, comms.CommGraph]]
    measurements: list[sensing.Measurement]
    boundary: dict[int, BoundaryInput]

    def estimate_array(self, node_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(steps, states) arrays for one node, steps sorted ascending."""
        per_step = self.estimates[node_id]
        ks = np.array(sorted(per_step))
        return ks, np.stack([per_step[k] for k in ks])


def _sensor_rng(seed_key: tuple[int, ...], sensor_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed_key + (sensor_index,)))


def run_scenario(
    config: RunConfig,
    truth: ScenarioTruth,
    cv_ids: set[int],
    seed_key: tuple[int, ...] = (0,),
) -> RunHistory:
    """Step ground truth, sensing, communication graph, and all node filters
    over the analysis window.

    Nodes hold, at each recorded step k, their projected estimate of the state
    at k formed before assimilating the step-k measurements; joining nodes
    start from the global prior. Numerical failures surface with node id and
    step index.
    """
    p = config.model
    spec = truth.traj.spec
    k0, k1 = truth.window
    ego_node = f"cv{truth.ego_id}"

    sensors: dict[str, sensing.SensorNode] = {}
    for idx, pos in enumerate(config.rsu_positions):
        cell = sensing.occupied_cell(pos, p)
        node_id = f"rsu{idx + 1}"
        sensors[node_id] = sensing.SensorNode(
            sensor_id=node_id, kind=sensing.RSU, noise_cov=config.r_cov(), cell=cell,
        )
    rsu_order = [f"rsu{i + 1}" for i in range(len(config.rsu_positions))]
    rsu_pos = {nid: float(pos) for nid, pos in zip(rsu_order, config.rsu_positions)}

    def cv_position_fn(vid: int):
        return lambda k: truth.traj.effective_position_of(vid, k)

    for vid in sorted(cv_ids):
        node_id = f"cv{vid}"
        sensors[node_id] = sensing.SensorNode(
            sensor_id=node_id, kind=sensing.CV, noise_cov=config.r_cov(),
            position_fn=cv_position_fn(vid),
        )

    streams = {
        node_id: _sensor_rng(
            seed_key,
            int(node_id[3:]) + RSU_SEED_OFFSET if node_id.startswith("rsu") else int(node_id[2:]),
        )
        for node_id in sensors
    }

    q_diag = config.q_diag()
    p0_diag = config.p0_diag()
    x0 = config.prior_mean()

    filters: dict[str, dkf.NodeFilter] = {}
    history = RunHistory(
        window=(k0, k1), ego_node=ego_node,
        estimates={}, graphs=[], measurements=[], boundary={},
    )

    for k in range(k0, k1 + 1):
        active: dict[str, float] = {}
        for node_id in sorted(sensors):
            sensor = sensors[node_id]
            if sensor.cell_at(k, p) is not None:
                active[node_id] = float(sensor.position_at(k, p))

        for node_id in list(filters):
            if node_id not in active:
                del filters[node_id]
        for node_id in active:
            if node_id not in filters:
                filters[node_id] = dkf.init_node(node_id, x0, p0_diag)

        for node_id, node in filters.items():
            history.estimates.setdefault(node_id, {})[k] = node.x_hat.copy()

        graph = comms.build_graph(active, config.comm_range, rsu_order)
        history.graphs.append((k, graph))

        if k == k1:
            break

        measurements: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for node_id in sorted(active):
            m = sensing.make_measurement(truth.fields, sensors[node_id], k, streams[node_id])
            if m is not None:
                history.measurements.append(m)
                c = sensing.measurement_matrix(m.cell, p.n_cells)
                measurements[node_id] = (m.y, c, config.r_cov())

        u = extract_boundary_input(truth.traj, p, k)
        history.boundary[k] = u

        weights = comms.metropolis_weights(graph)
        dkf.network_step(
            filters, u, p, q_diag, measurements, weights,
            rounds=config.consensus_rounds, step_index=k,
        )

    return history


# ---------------------------------------------------------------------------
# error metrics

def rmse(truth: np.ndarray, est: np.ndarray) -> float:
    """Root mean square of per-sample vector errors over (..., n) arrays."""
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    if truth.shape != est.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {est.shape}")
    sq = ((truth - est) ** 2).sum(axis=-1)
    return float(np.sqrt(sq.mean()))


def smape(truth: np.ndarray, est: np.ndarray) -> float:
    """Symmetric mean absolute percentage error in [0, 200], 0/0 terms are 0."""
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    if truth.shape != est.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {est.shape}")
    num = 2.0 * np.linalg.norm(truth - est, axis=-1)
    den = np.linalg.norm(truth, axis=-1) + np.linalg.norm(est, axis=-1)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * terms.mean())


@dataclass(frozen=True)
class TrialResult:
    rate: float
    trial: int
    rmse_rho: float  # [veh/km]
    rmse_psi: float  # [veh/h]
    smape_rho: float  # [%]
    smape_psi: float  # [%]


def ego_trial_metrics(config: RunConfig, truth: ScenarioTruth, history: RunHistory) -> dict[str, float]:
    """Per-trial metrics of the ego node over its active steps, paper units."""
    ks, est = history.estimate_array(history.ego_node)
    rows = [truth.fields.row(int(k)) for k in ks]
    truth_rho = truth.fields.rho[rows] * VEH_PER_KM_PER_VEH_PER_M
    truth_psi = truth.fields.psi[rows] * VEH_PER_H_PER_VEH_PER_S
    est_rho = est[:, 0::2] * VEH_PER_KM_PER_VEH_PER_M
    est_psi = est[:, 1::2] * VEH_PER_H_PER_VEH_PER_S
    return {
        "rmse_rho": rmse(truth_rho, est_rho),
        "rmse_psi": rmse(truth_psi, est_psi),
        "smape_rho": smape(truth_rho, est_rho),
        "smape_psi": smape(truth_psi, est_psi),
    }


@dataclass
class ErrorReport:
    """Per-trial metric rows plus box-plot summary statistics per rate."""

    rows: list[TrialResult] = field(default_factory=list)

    def rates(self) -> list[float]:
        return sorted({row.rate for row in self.rows})

    def metric(self, rate: float, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows if r.rate == rate])

    def summary(self) -> dict:
        out: dict = {}
        for rate in self.rates():
            per_rate = {}
            for name in ("rmse_rho", "rmse_psi", "smape_rho", "smape_psi"):
                values = self.metric(rate, name)
                q1, med, q3 = np.percentile(values, [25, 50, 75])
                iqr = q3 - q1
                in_whisker = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
                per_rate[name] = {
                    "median": float(med),
                    "q1": float(q1),
                    "q3": float(q3),
                    "whisker_lo": float(in_whisker.min()),
                    "whisker_hi": float(in_whisker.max()),
                }
            out[f"{rate:.4f}"] = per_rate
        return out


def monte_carlo(config: RunConfig, truth: ScenarioTruth | None = None) -> ErrorReport:
    """Penetration-rate study: config.trials random CV subsets per rate."""
    if truth is None:
        truth = prepare_truth(config)
    report = ErrorReport()
    for rate in config.rates:
        rate_tag = int(round(rate * 10_000))
        for trial in range(config.trials):
            subset_rng = np.random.default_rng(
                np.random.SeedSequence((config.master_seed, rate_tag, trial))
            )
            cv_ids = draw_cv_subset(truth, rate, subset_rng)
            history = run_scenario(
                config, truth, cv_ids,
                seed_key=(config.master_seed, rate_tag, trial),
            )
            metrics = ego_trial_metrics(config, truth, history)
            report.rows.append(TrialResult(rate=rate, trial=trial, **metrics))
    return report


# ---------------------------------------------------------------------------
# CSV / JSON export

def write_study_csv(report: ErrorReport, path) -> None:
    """Columns: rate, trial, rmse_rho, rmse_psi, smape_rho, smape_psi."""
    with open(path, "w") as fh:
        fh.write("rate,trial,rmse_rho,rmse_psi,smape_rho,smape_psi\n")
        for r in report.rows:
            fh.write(
                f"{r.rate:.4f},{r.trial},{r.rmse_rho:.6f},{r.rmse_psi:.4f},"
                f"{r.smape_rho:.6f},{r.smape_psi:.6f}\n"
            )


def write_summary_json(report: ErrorReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_estimates_csv(history: RunHistory, node_id: str, p: ModelParams, path) -> None:
    """Columns: k, node_id, cell, rho_est_vehkm, psi_est_vehh."""
    ks, est = history.estimate_array(node_id)
    with open(path, "w") as fh:
        fh.write("k,node_id,cell,rho_est_vehkm,psi_est_vehh\n")
        for i, k in enumerate(ks):
            for c in range(p.n_cells):
                fh.write(
                    f"{int(k)},{node_id},{c + 1},"
                    f"{est[i, 2 * c] * VEH_PER_KM_PER_VEH_PER_M:.6f},"
                    f"{est[i, 2 * c + 1] * VEH_PER_H_PER_VEH_PER_S:.4f}\n"
                )


def write_graph_csvs(history: RunHistory, nodes_path, edges_path, ego_node: str) -> None:
    """Graph snapshots: (k, node_id, kind, position_m) and
    (k, node_a, node_b, link_type)."""
    with open(nodes_path, "w") as fh:
        fh.write("k,node_id,kind,position_m\n")
        for k, graph in history.graphs:
            for node in graph.nodes:
                kind = "ego" if node == ego_node else graph.kinds[node]
                fh.write(f"{k},{node},{kind},{graph.positions[node]:.3f}\n")
    with open(edges_path, "w") as fh:
        fh.write("k,node_a,node_b,link_type\n")
        for k, graph in history.graphs:
            for a, b in graph.edges:
                fh.write(f"{k},{a},{b},{comms.link_type(graph, a, b)}\n")


def write_density_grid_csv(
    ks: Iterable[int], rho_si: np.ndarray, n_cells: int, path
) -> None:
    """Matrix CSV: header k,cell_1..cell_N; densities in veh/km."""
    with open(path, "w") as fh:
        fh.write("k," + ",".join(f"cell_{c + 1}" for c in range(n_cells)) + "\n")
        for i, k in enumerate(ks):
            row = ",".join(f"{rho_si[i, c] * 1e3:.4f}" for c in range(n_cells))
            fh.write(f"{int(k)},{row}\n")


def write_ego_trajectory_csv(truth: ScenarioTruth, path) -> None:
    """Columns: k, position_m (effective coordinates, ego active steps)."""
    k0, k1 = truth.window
    with open(path, "w") as fh:
        fh.write("k,position_m\n")
        for k in range(k0, k1 + 1):
            pos = truth.traj.effective_position_of(truth.ego_id, k)
            if pos is not None:
                fh.write(f"{k},{pos:.3f}\n")
