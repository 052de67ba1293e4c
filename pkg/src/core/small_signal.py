"""
Classical-model small-signal analysis and N-1 security labelling.

Machines are constant EMFs behind transient reactance, loads are constant
admittances taken from the pre-outage operating point, and the network is
Kron-reduced to the machine internal nodes. A slack bus without a machine is
an infinite bus: it stays in the reduced network as a fixed source at angle
zero and carries no states.

State vector is [delta_1..delta_g, dw_1..dw_g] with speed in per-unit::

    d(delta)/dt = omega_s * dw
    2H d(dw)/dt = -L delta - D dw
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from config.settings import SMALL_SIGNAL_CONFIG
from core.errors import (
    ContingencyError,
    EigenSolverError,
    IslandingError,
    NumericalError,
    SingularNetworkError,
)
from core.grid_io import GridCase
from core.steady_state import OperatingPoint, build_ybus, is_connected, solve_power_flow

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StateMatrix:
    a: np.ndarray
    n_machines: int
    omega_s: float


@dataclass(frozen=True)
class Mode:
    sigma: float
    omega: float
    zeta: float


@dataclass(frozen=True)
class SecurityLabel:
    """N-1 verdict for one operating point.

    ``per_contingency`` holds (branch id, min damping) ordered by branch id;
    the damping is None where the outage islanded the grid or, with post-outage
    re-solve enabled, where the post-outage power flow diverged.
    """

    secure: bool
    min_zeta: Optional[float]
    per_contingency: Tuple[Tuple[int, Optional[float]], ...]
    discarded: Optional[str] = None
    islanded: Tuple[int, ...] = ()
    diverged: Tuple[int, ...] = ()

    @classmethod
    def rejected(cls, reason: str) -> "SecurityLabel":
        return cls(secure=False, min_zeta=None, per_contingency=(), discarded=reason)


# --- linearization ----------------------------------------------------------------

def infinite_bus(case: GridCase) -> Optional[int]:
    """Node index of a machine-less slack bus, if any."""
    slack = case.slack_index
    if slack in set(case.generator_nodes().tolist()):
        return None
    return slack


def internal_emfs(case: GridCase, op: OperatingPoint) -> np.ndarray:
    """EMF behind transient reactance of every machine at ``op``."""
    v = op.v_mag * np.exp(1j * op.v_ang)
    p_load = np.array([b.p_load for b in case.buses])
    q_load = np.array([b.q_load for b in case.buses])
    s_gen_bus = (op.p_net + p_load) + 1j * (op.q_net + q_load)

    nodes = case.generator_nodes()
    p_sched = np.array([g.p_gen for g in case.generators], dtype=float)
    emf = np.zeros(len(case.generators), dtype=complex)
    for node in np.unique(nodes):
        members = np.flatnonzero(nodes == node)
        total = p_sched[members].sum()
        share = p_sched[members] / total if total != 0 else np.full(len(members), 1.0 / len(members))
        for k, frac in zip(members, share):
            current = np.conj(s_gen_bus[node] * frac / v[node])
            emf[k] = v[node] + 1j * case.generators[k].xd_prime * current
    return emf


def synchronizing_matrix(case: GridCase, op: OperatingPoint, outage: Optional[int] = None) -> np.ndarray:
    """
    Jacobian of machine electrical power w.r.t. rotor angles.

    Raises:
        IslandingError: the outage disconnects the network
        SingularNetworkError: the eliminated-bus admittance block is singular
    """
    if outage is not None and not is_connected(case, outage):
        raise IslandingError(outage)

    n, g = case.n_buses, len(case.generators)
    nodes = case.generator_nodes()
    inf_bus = infinite_bus(case)

    y_bus = build_ybus(case, outage)
    p_load = np.array([b.p_load for b in case.buses])
    q_load = np.array([b.q_load for b in case.buses])
    y_bus[np.diag_indices(n)] += (p_load - 1j * q_load) / op.v_mag ** 2

    y_gen = 1.0 / (1j * np.array([gen.xd_prime for gen in case.generators]))
    y_aug = np.zeros((n + g, n + g), dtype=complex)
    y_aug[:n, :n] = y_bus
    for k, (node, y) in enumerate(zip(nodes, y_gen)):
        y_aug[node, node] += y
        y_aug[node, n + k] -= y
        y_aug[n + k, node] -= y
        y_aug[n + k, n + k] += y

    keep = list(range(n, n + g)) + ([inf_bus] if inf_bus is not None else [])
    drop = [i for i in range(n) if i != inf_bus]
    y_kk = y_aug[np.ix_(keep, keep)]
    y_kd = y_aug[np.ix_(keep, drop)]
    y_dk = y_aug[np.ix_(drop, keep)]
    y_dd = y_aug[np.ix_(drop, drop)]
    try:
        y_red = y_kk - y_kd @ np.linalg.solve(y_dd, y_dk)
    except np.linalg.LinAlgError:
        raise SingularNetworkError("reduced network admittance is singular") from None

    sources = internal_emfs(case, op)
    if inf_bus is not None:
        sources = np.r_[sources, op.v_mag[inf_bus] * np.exp(1j * op.v_ang[inf_bus])]
    mag, ang = np.abs(sources), np.angle(sources)
    d = ang[:, None] - ang[None, :]
    coupling = np.outer(mag, mag) * (y_red.real * np.sin(d) - y_red.imag * np.cos(d))
    np.fill_diagonal(coupling, 0.0)

    sync = coupling[:g, :g].copy()
    sync[np.diag_indices(g)] = -coupling[:g, :].sum(axis=1)
    return sync


def build_state_matrix(case: GridCase, op: OperatingPoint, outage: Optional[int] = None,
                       omega_s: Optional[float] = None) -> StateMatrix:
    """Linearized swing dynamics A = [[0, ws*I], [-M^-1 L, -M^-1 D]] with M = diag(2H)."""
    omega_s = SMALL_SIGNAL_CONFIG["omega_s"] if omega_s is None else omega_s
    g = len(case.generators)
    sync = synchronizing_matrix(case, op, outage)
    m = 2.0 * np.array([gen.inertia_h for gen in case.generators])
    damp = np.array([gen.damping_d for gen in case.generators])

    a = np.zeros((2 * g, 2 * g))
    a[:g, g:] = omega_s * np.eye(g)
    a[g:, :g] = -sync / m[:, None]
    a[g:, g:] = -np.diag(damp / m)
    if not np.all(np.isfinite(a)):
        raise SingularNetworkError("state matrix has non-finite entries")
    return StateMatrix(a=a, n_machines=g, omega_s=omega_s)


# --- modes -------------------------------------------------------------------------

def eigenvalues(a) -> np.ndarray:
    """
    All eigenvalues of a real square matrix (LAPACK Hessenberg + shifted QR).

    Raises:
        ValueError: non-square, empty or non-finite input
        EigenSolverError: QR iteration failed to converge
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    try:
        return scipy.linalg.eigvals(a, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"eigenvalue iteration did not converge: {exc}") from exc


def damping_ratio(sigma: float, omega: float) -> float:
    if sigma == 0 and omega == 0:
        raise ValueError("damping ratio is undefined at the origin")
    return -sigma / math.hypot(sigma, omega)


def modes(a) -> List[Mode]:
    out = []
    for lam in eigenvalues(a):
        sigma, omega = float(lam.real), float(lam.imag)
        zeta = damping_ratio(sigma, omega) if (sigma, omega) != (0.0, 0.0) else 0.0
        out.append(Mode(sigma, omega, zeta))
    return out


def min_damping(eigs: Iterable[complex], omega_floor: Optional[float] = None,
                sigma_floor: Optional[float] = None) -> float:
    """
    Worst damping ratio over the screened modes.

    Oscillatory modes (|omega| > omega_floor) count with their damping ratio;
    aperiodically unstable real modes (sigma > sigma_floor) count as -1. Any
    other real mode, the rigid-body mode included, is skipped. Returns 1.0
    when nothing is screened.
    """
    omega_floor = SMALL_SIGNAL_CONFIG["omega_floor"] if omega_floor is None else omega_floor
    sigma_floor = SMALL_SIGNAL_CONFIG["sigma_floor"] if sigma_floor is None else sigma_floor
    worst = 1.0
    for lam in eigs:
        sigma, omega = float(np.real(lam)), float(np.imag(lam))
        if abs(omega) > omega_floor:
            worst = min(worst, damping_ratio(sigma, omega))
        elif sigma > sigma_floor:
            worst = -1.0
    return worst


# --- N-1 labelling -------------------------------------------------------------------

def contingency_set(case: GridCase, mode: str = "lines") -> List[int]:
    """Branch ids to outage: ``all`` branches, or the non-islanding ``lines``."""
    if mode == "all":
        return list(range(len(case.branches)))
    if mode == "lines":
        return [k for k in range(len(case.branches)) if is_connected(case, k)]
    raise ValueError(f"unknown contingency mode '{mode}'")


def label_operating_point(case: GridCase, op: OperatingPoint, contingencies: Optional[Sequence[int]] = None,
                          threshold: Optional[float] = None, omega_s: Optional[float] = None,
                          resolve_post_outage: Optional[bool] = None) -> SecurityLabel:
    """
    Screen every branch outage and label the point.

    Args:
        case: case the point was solved on
        op: converged, limit-clean operating point
        contingencies: branch ids; defaults to ``contingency_set(case)``
        threshold: minimum acceptable damping ratio (inclusive)
        omega_s: synchronous speed in rad/s
        resolve_post_outage: re-solve the power flow on each outaged network

    Returns:
        SecurityLabel with results ordered by branch id

    Raises:
        ContingencyError: a numerical failure, carrying the branch id
    """
    cfg = SMALL_SIGNAL_CONFIG
    threshold = cfg["threshold"] if threshold is None else threshold
    resolve = cfg["resolve_post_outage"] if resolve_post_outage is None else resolve_post_outage
    if contingencies is None:
        contingencies = contingency_set(case)

    results: List[Tuple[int, Optional[float]]] = []
    islanded: List[int] = []
    diverged: List[int] = []
    for k in sorted(set(int(c) for c in contingencies)):
        if not is_connected(case, k):
            islanded.append(k)
            results.append((k, None))
            continue
        try:
            base = op
            if resolve:
                base = solve_power_flow(case, outage=k)
                if not base.converged:
                    diverged.append(k)
                    results.append((k, None))
                    continue
            sm = build_state_matrix(case, base, outage=k, omega_s=omega_s)
            zeta = min_damping(eigenvalues(sm.a))
        except NumericalError as exc:
            raise ContingencyError(k, exc) from exc
        logger.debug(f"contingency {k}: min damping {zeta:.5f}")
        results.append((k, zeta))

    analysed = [z for _, z in results if z is not None]
    min_zeta = min(analysed) if analysed else None
    secure = not islanded and not diverged and all(z >= threshold for z in analysed)
    return SecurityLabel(
        secure=secure,
        min_zeta=min_zeta,
        per_contingency=tuple(results),
        islanded=tuple(islanded),
        diverged=tuple(diverged),
    )
