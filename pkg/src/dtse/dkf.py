"""Per-node information-form distributed Kalman filter.

Each sensor node carries an information pair (info_vec, info_mat) and a
projected state estimate. One estimation cycle runs five stages:

  1. linearize the traffic model at the node's current estimate,
  2. assimilate the node's own measurement additively in information space,
  3. fuse pairs with graph neighbors through L doubly stochastic
     consensus rounds (a synchronous, double-buffered exchange),
  4. propagate the fused pair through the linearized dynamics using the
     matrix inversion lemma (no direct covariance inversion),
  5. project the implied state estimate onto the physical box constraints,
     rewriting the information vector while leaving the matrix untouched.

All linear solves go through symmetric positive-definite factorizations;
matrices are re-symmetrized after fusion and prediction to stop
floating-point drift from breaking definiteness over long runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .arz import BoundaryInput, Linearization, ModelParams, linearize


class FilterNumericsError(RuntimeError):
    """Raised when a node's information matrix loses positive definiteness."""

    def __init__(self, message: str, node_id: str | None = None, step: int | None = None):
        super().__init__(message)
        self.node_id = node_id
        self.step = step


@dataclass
class InfoPair:
    """Information-form belief: vec = mat @ mean, mat = covariance inverse."""

    vec: np.ndarray  # (2N,)
    mat: np.ndarray  # (2N, 2N), symmetric positive definite

    def copy(self) -> "InfoPair":
        return InfoPair(self.vec.copy(), self.mat.copy())


@dataclass
class NodeFilter:
    """Filter state owned by one sensor node."""

    node_id: str
    pair: InfoPair  # prior pair for the upcoming step
    x_hat: np.ndarray  # projected estimate for the upcoming step


def _as_cov_matrix(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 1:
        return np.diag(cov)
    return cov


def _spd_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(mat, lower=True), rhs)
    except np.linalg.LinAlgError as exc:
        raise FilterNumericsError(str(exc)) from exc
    except ValueError as exc:  # non-finite entries
        raise FilterNumericsError(f"SPD solve failed: {exc}") from exc


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def init_node(node_id: str, x0_mean: np.ndarray, p0_cov: np.ndarray) -> NodeFilter:
    """Initialize a node from a prior mean and covariance (diag or full)."""
    x0_mean = np.asarray(x0_mean, dtype=float)
    p0 = _as_cov_matrix(p0_cov)
    info_mat = _symmetrize(_spd_solve(p0, np.eye(p0.shape[0])))
    info_vec = info_mat @ x0_mean
    return NodeFilter(node_id=node_id, pair=InfoPair(info_vec, info_mat), x_hat=x0_mean.copy())


def local_update(node: NodeFilter, y: np.ndarray | None, c_matrix: np.ndarray, r_cov: np.ndarray) -> None:
    """Add the node's own measurement contribution; no measurement, no change."""
    if y is None:
        return
    r = _as_cov_matrix(r_cov)
    rinv_c = _spd_solve(r, c_matrix)
    node.pair.vec = node.pair.vec + c_matrix.T @ _spd_solve(r, np.asarray(y, dtype=float))
    node.pair.mat = node.pair.mat + c_matrix.T @ rinv_c


def consensus_round(
    pairs: dict[str, InfoPair], weights: dict[str, dict[str, float]]
) -> dict[str, InfoPair]:
    """One synchronous weighted-averaging round over information pairs.

    Every node's new pair is the weighted sum over itself and its neighbors,
    all reads against the incoming map (double buffering).
    """
    out: dict[str, InfoPair] = {}
    for node, pair in pairs.items():
        w = weights.get(node)
        if not w:
            out[node] = pair.copy()
            continue
        vec = np.zeros_like(pair.vec)
        mat = np.zeros_like(pair.mat)
        for other, weight in w.items():
            vec += weight * pairs[other].vec
            mat += weight * pairs[other].mat
        out[node] = InfoPair(vec, mat)
    return out


def fuse(
    pairs: dict[str, InfoPair],
    weights: dict[str, dict[str, float]],
    rounds: int,
) -> dict[str, InfoPair]:
    """Apply `rounds` consensus rounds and re-symmetrize the results."""
    for _ in range(rounds):
        pairs = consensus_round(pairs, weights)
    for pair in pairs.values():
        pair.mat = _symmetrize(pair.mat)
    return pairs


def predict(pair: InfoPair, lin: Linearization, q_cov: np.ndarray) -> InfoPair:
    """Propagate a fused pair through the linearized dynamics.

    Uses the matrix inversion lemma so the covariance itself is never formed:
    with B = Q^-1 Lambda and M = (mat + Lambda^T Q^-1 Lambda)^-1,

        mat_next = Q^-1 - B M B^T
        vec_next = mat_next (Lambda mat^-1 vec + offset)
    """
    lam = lin.transition
    q = _as_cov_matrix(q_cov)
    if np.asarray(q_cov).ndim == 1:
        q_inv = np.diag(1.0 / np.asarray(q_cov, dtype=float))
    else:
        q_inv = _spd_solve(q, np.eye(q.shape[0]))
    b = q_inv @ lam
    inner = _symmetrize(pair.mat + lam.T @ b)
    m_bt = _spd_solve(inner, b.T)
    mat_next = _symmetrize(q_inv - b @ m_bt)
    x_prev = _spd_solve(pair.mat, pair.vec)
    vec_next = mat_next @ (lam @ x_prev + lin.offset)
    return InfoPair(vec_next, mat_next)


def project(x_hat: np.ndarray, p: ModelParams) -> np.ndarray:
    """Clamp per cell onto the physical box: rho in [0, rho_jam], psi in [0, v_free*rho_jam]."""
    out = np.asarray(x_hat, dtype=float).copy()
    np.clip(out[0::2], 0.0, p.rho_jam, out=out[0::2])
    np.clip(out[1::2], 0.0, p.psi_max, out=out[1::2])
    return out


def finalize_constraint(node: NodeFilter, p: ModelParams) -> None:
    """Project the implied estimate and rewrite the information vector.

    The information matrix stays untouched so the uncertainty shape survives
    the projection.
    """
    x = _spd_solve(node.pair.mat, node.pair.vec)
    node.x_hat = project(x, p)
    node.pair.vec = node.pair.mat @ node.x_hat


def node_step(
    node: NodeFilter,
    u: BoundaryInput,
    p: ModelParams,
    q_cov: np.ndarray,
    measurement: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> None:
    """Full estimation cycle for an isolated node (no neighbors to fuse with).

    measurement, when present, is a (y, C, R) triple. Multi-node stepping with
    consensus goes through network_step.
    """
    lin = linearize(node.x_hat, u, p)
    if measurement is not None:
        y, c_matrix, r_cov = measurement
        local_update(node, y, c_matrix, r_cov)
    node.pair = predict(node.pair, lin, q_cov)
    finalize_constraint(node, p)


def network_step(
    filters: dict[str, NodeFilter],
    u: BoundaryInput,
    p: ModelParams,
    q_cov: np.ndarray,
    measurements: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]],
    weights: dict[str, dict[str, float]],
    rounds: int,
    step_index: int | None = None,
) -> None:
    """Run one synchronized estimation cycle over all active nodes.

    Stages 1-2 and 4-5 are per-node; stage 3 is the joint consensus barrier.
    Numerical failures carry the offending node id and the step index.
    """
    order = sorted(filters)
    lins: dict[str, Linearization] = {}
    for node_id in order:
        node = filters[node_id]
        try:
            lins[node_id] = linearize(node.x_hat, u, p)
            meas = measurements.get(node_id)
            if meas is not None:
                local_update(node, *meas)
        except FilterNumericsError as exc:
            raise FilterNumericsError(str(exc), node_id=node_id, step=step_index) from exc

    fused = fuse({n: filters[n].pair for n in order}, weights, rounds)

    for node_id in order:
        node = filters[node_id]
        try:
            node.pair = predict(fused[node_id], lins[node_id], q_cov)
            finalize_constraint(node, p)
        except FilterNumericsError as exc:
            raise FilterNumericsError(str(exc), node_id=node_id, step=step_index) from exc
