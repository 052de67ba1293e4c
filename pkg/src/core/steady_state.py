"""
Operating-point sampling and AC power flow.

Profiles are drawn by scaling every generator and every bus load with
independent uniform factors, then solved with a polar Newton-Raphson power
flow from a flat start. Non-convergence is reported through the returned
``OperatingPoint`` so the dataset generator can discard the draw.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix

from config.settings import POWER_FLOW_CONFIG
from core.errors import DisconnectedNetworkError, SingularJacobianError
from core.grid_io import BusKind, GridCase, Violation

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_net: np.ndarray
    q_net: np.ndarray
    line_p: np.ndarray
    line_q: np.ndarray
    converged: bool
    iterations: int
    mismatch: float = 0.0


@dataclass(frozen=True)
class ScaledProfile:
    gen_factors: Tuple[float, ...]
    load_factors: Tuple[Tuple[float, float], ...]
    seed: Union[int, Tuple[int, ...]]
    scale_range: Tuple[float, float] = (0.7, 1.5)


# --- profiles --------------------------------------------------------------------

def apply_profile(case: GridCase, profile: ScaledProfile) -> GridCase:
    """Multiply dispatch and loads by the profile factors; dispatch is clamped to its limits."""
    gens = tuple(
        replace(g, p_gen=float(np.clip(g.p_gen * f, g.p_min, g.p_max)))
        for g, f in zip(case.generators, profile.gen_factors)
    )
    buses = tuple(
        replace(b, p_load=b.p_load * fp, q_load=b.q_load * fq)
        for b, (fp, fq) in zip(case.buses, profile.load_factors)
    )
    return replace(case, buses=buses, generators=gens)


def scale_profile(case: GridCase, scale_range: Sequence[float],
                  seed: Union[int, Sequence[int]]) -> Tuple[GridCase, ScaledProfile]:
    """
    Draw a random loading profile.

    Args:
        case: base case
        scale_range: (lo, hi) bounds of every multiplier, 0 < lo <= hi
        seed: integer or integer sequence fed to ``numpy.random.default_rng``

    Returns:
        (scaled case, profile that produced it)
    """
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if not 0 < lo <= hi:
        raise ValueError(f"scale range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")

    rng = np.random.default_rng(seed)
    gen_factors = rng.uniform(lo, hi, size=len(case.generators))
    load_factors = rng.uniform(lo, hi, size=(case.n_buses, 2))

    frozen_seed = int(seed) if np.ndim(seed) == 0 else tuple(int(s) for s in seed)
    profile = ScaledProfile(
        gen_factors=tuple(float(f) for f in gen_factors),
        load_factors=tuple((float(p), float(q)) for p, q in load_factors),
        seed=frozen_seed,
        scale_range=(lo, hi),
    )
    return apply_profile(case, profile), profile


# --- network model ---------------------------------------------------------------

def _active_branches(case: GridCase, outage: Optional[int]) -> np.ndarray:
    status = np.ones(len(case.branches))
    if outage is not None:
        status[outage] = 0.0
    return status


def branch_admittances(case: GridCase, outage: Optional[int] = None):
    """Pi-model two-port entries (Yff, Yft, Ytf, Ytt) for every branch."""
    status = _active_branches(case, outage)
    r = np.array([br.r for br in case.branches], dtype=float)
    x = np.array([br.x for br in case.branches], dtype=float)
    bc = np.array([br.b_shunt for br in case.branches], dtype=float) * status
    ys = status / (r + 1j * x)
    yff = ys + 1j * bc / 2
    return yff, -ys, -ys, yff.copy()


def build_ybus(case: GridCase, outage: Optional[int] = None) -> np.ndarray:
    """Dense bus admittance matrix, optionally with one branch out of service."""
    nb, nl = case.n_buses, len(case.branches)
    if nl == 0:
        return np.zeros((nb, nb), dtype=complex)
    ends = case.branch_ends()
    f, t = ends[:, 0], ends[:, 1]
    yff, yft, ytf, ytt = branch_admittances(case, outage)

    rows = np.r_[np.arange(nl), np.arange(nl)]
    cf = csr_matrix((np.ones(nl), (np.arange(nl), f)), (nl, nb))
    ct = csr_matrix((np.ones(nl), (np.arange(nl), t)), (nl, nb))
    yf = csr_matrix((np.r_[yff, yft], (rows, np.r_[f, t])), (nl, nb))
    yt = csr_matrix((np.r_[ytf, ytt], (rows, np.r_[f, t])), (nl, nb))
    return (cf.T @ yf + ct.T @ yt).toarray()


def is_connected(case: GridCase, outage: Optional[int] = None) -> bool:
    g = nx.MultiGraph()
    g.add_nodes_from(range(case.n_buses))
    g.add_edges_from((int(i), int(j)) for k, (i, j) in enumerate(case.branch_ends()) if k != outage)
    return case.n_buses > 0 and nx.is_connected(g)


def bus_generation(case: GridCase) -> np.ndarray:
    """Scheduled active generation per bus."""
    p = np.zeros(case.n_buses)
    for node, g in zip(case.generator_nodes(), case.generators):
        p[node] += g.p_gen
    return p


# --- Newton-Raphson ---------------------------------------------------------------

def _ds_dv(ybus: np.ndarray, v: np.ndarray):
    """Partial derivatives of bus injections w.r.t. voltage magnitude and angle."""
    i_bus = ybus @ v
    diag_v = np.diag(v)
    diag_vn = np.diag(v / np.abs(v))
    ds_dvm = diag_v @ np.conj(ybus @ diag_vn) + np.conj(np.diag(i_bus)) @ diag_vn
    ds_dva = 1j * diag_v @ np.conj(np.diag(i_bus) - ybus @ diag_v)
    return ds_dvm, ds_dva


def solve_power_flow(case: GridCase, tol: Optional[float] = None, max_iter: Optional[int] = None,
                     outage: Optional[int] = None) -> OperatingPoint:
    """
    Solve the AC power flow in polar form.

    Args:
        case: validated case; generator dispatch is taken as scheduled
        tol: infinity-norm mismatch tolerance (per-unit)
        max_iter: Newton iteration cap
        outage: optional branch index removed from the network

    Returns:
        OperatingPoint; ``converged`` is False when the iteration cap is hit or
        the iterate becomes non-finite

    Raises:
        DisconnectedNetworkError: the (outaged) network is not connected
        SingularJacobianError: exact singularity, with the iteration number
    """
    tol = POWER_FLOW_CONFIG["tol"] if tol is None else tol
    max_iter = POWER_FLOW_CONFIG["max_iter"] if max_iter is None else max_iter

    if not is_connected(case, outage):
        raise DisconnectedNetworkError("power flow needs a connected network")

    n = case.n_buses
    kinds = [b.kind for b in case.buses]
    pv = [i for i, k in enumerate(kinds) if k is BusKind.PV]
    pq = [i for i, k in enumerate(kinds) if k is BusKind.PQ]
    pvpq = sorted(pv + pq)
    n_pvpq = len(pvpq)

    ybus = build_ybus(case, outage)
    p_spec = bus_generation(case) - np.array([b.p_load for b in case.buses])
    q_spec = -np.array([b.q_load for b in case.buses])

    vm = np.ones(n)
    for i, b in enumerate(case.buses):
        if b.kind is not BusKind.PQ:
            vm[i] = b.v_setpoint
    va = np.zeros(n)

    converged = False
    iterations = 0
    norm = np.inf
    # one extra Newton step is taken after the tolerance is met
    accepted = None
    while True:
        v = vm * np.exp(1j * va)
        s = v * np.conj(ybus @ v)
        mis = s - (p_spec + 1j * q_spec)
        f = np.r_[mis.real[pvpq], mis.imag[pq]]
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        logger.debug(f"power flow iteration {iterations}: mismatch {norm:.3e}")

        if accepted is not None:
            if not (np.isfinite(norm) and norm <= accepted[2]):
                vm, va, norm = accepted
            converged = True
            break
        if not np.isfinite(norm):
            break
        if norm < tol:
            if norm == 0.0:
                converged = True
                break
            accepted = (vm.copy(), va.copy(), norm)
        elif iterations >= max_iter:
            break

        ds_dvm, ds_dva = _ds_dv(ybus, v)
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        if accepted is None:
            iterations += 1
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            if accepted is not None:
                converged = True
                break
            raise SingularJacobianError(iterations) from None
        va[pvpq] += dx[:n_pvpq]
        vm[pq] += dx[n_pvpq:]

    if not converged:
        logger.debug(f"power flow did not converge after {iterations} iterations (mismatch {norm:.3e})")

    line_p, line_q = compute_line_flows(case, vm, va, outage=outage)
    v = vm * np.exp(1j * va)
    s = v * np.conj(ybus @ v)
    return OperatingPoint(
        v_mag=vm, v_ang=va, p_net=s.real.copy(), q_net=s.imag.copy(),
        line_p=line_p, line_q=line_q, converged=converged, iterations=iterations,
        mismatch=norm,
    )


# --- flows and limits -------------------------------------------------------------

def branch_end_flows(case: GridCase, v_mag, v_ang, outage: Optional[int] = None):
    """Complex power entering every branch at its from and to ends."""
    if not case.branches:
        return np.zeros(0, dtype=complex), np.zeros(0, dtype=complex)
    v = np.asarray(v_mag, dtype=float) * np.exp(1j * np.asarray(v_ang, dtype=float))
    ends = case.branch_ends()
    vf, vt = v[ends[:, 0]], v[ends[:, 1]]
    yff, yft, ytf, ytt = branch_admittances(case, outage)
    s_from = vf * np.conj(yff * vf + yft * vt)
    s_to = vt * np.conj(ytf * vf + ytt * vt)
    return s_from, s_to


def compute_line_flows(case: GridCase, v_mag, v_ang, outage: Optional[int] = None):
    """Sending-end (line_p, line_q) per branch from the pi model."""
    s_from, _ = branch_end_flows(case, v_mag, v_ang, outage)
    return s_from.real.copy(), s_from.imag.copy()


def bus_power_balance(case: GridCase, op: OperatingPoint) -> np.ndarray:
    """
    Complex residual generation - load - outgoing branch flows at every bus.

    Non-slack active generation is the scheduled dispatch; reactive output of
    PV and slack buses is whatever the solution demands.
    """
    s_from, s_to = branch_end_flows(case, op.v_mag, op.v_ang)
    ends = case.branch_ends()
    out = np.zeros(case.n_buses, dtype=complex)
    if len(ends):
        np.add.at(out, ends[:, 0], s_from)
        np.add.at(out, ends[:, 1], s_to)

    p_load = np.array([b.p_load for b in case.buses])
    q_load = np.array([b.q_load for b in case.buses])
    p_gen = bus_generation(case)
    q_gen = np.zeros(case.n_buses)
    for i, b in enumerate(case.buses):
        if b.kind is BusKind.SLACK:
            p_gen[i] = op.p_net[i] + p_load[i]
        if b.kind is not BusKind.PQ:
            q_gen[i] = op.q_net[i] + q_load[i]
    return (p_gen - p_load - out.real) + 1j * (q_gen - q_load - out.imag)


def check_limits(case: GridCase, op: OperatingPoint) -> List[Violation]:
    """
    Voltage-band and branch-rating violations of a converged point.

    A branch is rated on the larger apparent power of its two ends.
    """
    violations: List[Violation] = []
    for i, b in enumerate(case.buses):
        vm = float(op.v_mag[i])
        if not b.v_min <= vm <= b.v_max:
            violations.append(Violation(
                f"buses[{i}].v_mag", "v_min ≤ v_mag ≤ v_max",
                f"bus {b.id}: voltage {vm:.4f} outside [{b.v_min}, {b.v_max}]",
            ))
    s_from, s_to = branch_end_flows(case, op.v_mag, op.v_ang)
    flows = np.maximum(np.abs(s_from), np.abs(s_to))
    for k, br in enumerate(case.branches):
        if br.rating > 0 and flows[k] > br.rating:
            violations.append(Violation(
                f"branches[{k}].rating", "|S| ≤ rating",
                f"branch {k} ({br.from_bus}-{br.to_bus}): flow {flows[k]:.4f} above rating {br.rating}",
            ))
    return violations
