"""
Grid case files
===============

Line-oriented, sectioned text format for static grid data plus the classical
machine dynamics. Sections::

    BASE_MVA       value
    BUS            id kind p_load q_load v_setpoint v_min v_max
    GEN            bus p_gen p_min p_max
    GEN_DYNAMICS   bus inertia_h damping_d xd_prime
    BRANCH         from to r x b_shunt rating

``#`` starts a comment, columns are whitespace separated and a section header
sits on its own line. PQ buses write ``-`` for the absent setpoint.
``GEN_DYNAMICS`` rows attach to ``GEN`` rows of the same bus in order of
appearance. All values are per-unit on ``BASE_MVA``.
"""

import hashlib
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import networkx as nx
import numpy as np

from core.errors import CaseFormatError, CaseValidationError

logger = logging.getLogger(__name__)

SECTIONS = ("BASE_MVA", "BUS", "GEN", "GEN_DYNAMICS", "BRANCH")
_COLUMNS = {"BASE_MVA": 1, "BUS": 7, "GEN": 4, "GEN_DYNAMICS": 4, "BRANCH": 6}
_TOKEN = re.compile(r"\S+")


class BusKind(str, Enum):
    SLACK = "SLACK"
    PV = "PV"
    PQ = "PQ"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_load: float
    q_load: float
    v_setpoint: Optional[float]
    v_min: float
    v_max: float


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float
    p_min: float
    p_max: float
    inertia_h: float
    damping_d: float
    xd_prime: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float
    rating: float


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: Tuple[Bus, ...]
    generators: Tuple[Generator, ...]
    branches: Tuple[Branch, ...]

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_index(self) -> Dict[int, int]:
        """External bus id -> dense 0-based node index (file order)."""
        return {bus.id: i for i, bus in enumerate(self.buses)}

    @property
    def slack_index(self) -> int:
        for i, bus in enumerate(self.buses):
            if bus.kind is BusKind.SLACK:
                return i
        raise CaseValidationError([Violation("buses.kind", "exactly one SLACK bus", "no SLACK bus")])

    def branch_ends(self) -> np.ndarray:
        """(n_branches, 2) array of node indices."""
        idx = self.bus_index
        ends = [(idx[br.from_bus], idx[br.to_bus]) for br in self.branches]
        return np.array(ends, dtype=np.int64).reshape(len(ends), 2)

    def generator_nodes(self) -> np.ndarray:
        idx = self.bus_index
        return np.array([idx[g.bus] for g in self.generators], dtype=np.int64)


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str
    message: str


@dataclass(frozen=True, eq=False)
class GridGraph:
    """Topology seen by the graph filters.

    ``neighbours`` is a padded (n, max_degree) table; padding uses index ``n``,
    which addresses an all-zero row appended to the signals.
    """

    n: int
    shift: np.ndarray
    edge_list: Tuple[Tuple[int, int], ...]
    neighbours: np.ndarray
    degree: np.ndarray


# --- parsing -------------------------------------------------------------------

def _float(token: str, line: int, column: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise CaseFormatError(f"expected a number, got '{token}'", line, column) from None


def _int(token: str, line: int, column: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise CaseFormatError(f"expected an integer bus id, got '{token}'", line, column) from None


def parse_case(text: str) -> GridCase:
    """
    Parse case-file text into a validated GridCase.

    Args:
        text: case file content

    Returns:
        GridCase satisfying every invariant checked by ``validate_case``

    Raises:
        CaseFormatError: syntax problems, with line and column
        CaseValidationError: referential or invariant violations
    """
    section: Optional[str] = None
    base_mva: Optional[float] = None
    buses: List[Bus] = []
    gens: List[Tuple[int, list]] = []
    dynamics: List[Tuple[int, list]] = []
    branches: List[Branch] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0]
        tokens = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(content)]
        if not tokens:
            continue

        head, head_col = tokens[0]
        if len(tokens) == 1 and head[0].isalpha():
            if head not in SECTIONS:
                raise CaseFormatError(f"unknown section '{head}'", lineno, head_col)
            section = head
            continue
        if section is None:
            raise CaseFormatError("data before any section header", lineno, head_col)

        expected = _COLUMNS[section]
        if len(tokens) != expected:
            column = tokens[expected][1] if len(tokens) > expected else len(raw.rstrip()) + 1
            raise CaseFormatError(
                f"{section} rows have {expected} columns, found {len(tokens)}", lineno, column
            )

        if section == "BASE_MVA":
            if base_mva is not None:
                raise CaseFormatError("BASE_MVA given twice", lineno, head_col)
            base_mva = _float(head, lineno, head_col)
        elif section == "BUS":
            bus_id = _int(head, lineno, head_col)
            kind_tok, kind_col = tokens[1]
            try:
                kind = BusKind(kind_tok)
            except ValueError:
                raise CaseFormatError(f"unknown bus kind '{kind_tok}'", lineno, kind_col) from None
            vals = [None if tok == "-" and i == 4 else _float(tok, lineno, col)
                    for i, (tok, col) in enumerate(tokens) if i >= 2]
            buses.append(Bus(bus_id, kind, vals[0], vals[1], vals[2], vals[3], vals[4]))
        elif section == "GEN":
            gens.append((lineno, [_int(head, lineno, head_col)]
                         + [_float(tok, lineno, col) for tok, col in tokens[1:]]))
        elif section == "GEN_DYNAMICS":
            dynamics.append((lineno, [_int(head, lineno, head_col)]
                             + [_float(tok, lineno, col) for tok, col in tokens[1:]]))
        else:
            (f_tok, f_col), (t_tok, t_col) = tokens[0], tokens[1]
            nums = [_float(tok, lineno, col) for tok, col in tokens[2:]]
            branches.append(Branch(_int(f_tok, lineno, f_col), _int(t_tok, lineno, t_col), *nums))

    n_lines = len(text.splitlines())
    if base_mva is None:
        raise CaseFormatError("missing BASE_MVA section", n_lines + 1)

    attached: List[Optional[list]] = [None] * len(gens)
    for lineno, row in dynamics:
        slot = next((k for k, (_, g) in enumerate(gens) if g[0] == row[0] and attached[k] is None), None)
        if slot is None:
            raise CaseFormatError(f"GEN_DYNAMICS row for bus {row[0]} has no matching GEN row", lineno)
        attached[slot] = row
    for (lineno, g), dyn in zip(gens, attached):
        if dyn is None:
            raise CaseFormatError(f"generator at bus {g[0]} has no GEN_DYNAMICS row", lineno)

    generators = tuple(Generator(g[0], g[1], g[2], g[3], d[1], d[2], d[3])
                       for (_, g), d in zip(gens, attached))
    case = GridCase(base_mva, tuple(buses), generators, tuple(branches))

    violations = validate_case(case)
    if violations:
        raise CaseValidationError(violations)
    logger.debug(f"parsed case: {case.n_buses} buses, {len(generators)} generators, {len(branches)} branches")
    return case


# --- serialization ---------------------------------------------------------------

def _num(x: float) -> str:
    return format(x, ".17g")


def serialize_case(case: GridCase) -> str:
    """Write a case so that ``parse_case`` reproduces it bit for bit."""
    lines = ["BASE_MVA", _num(case.base_mva), "", "BUS",
             "# id kind p_load q_load v_setpoint v_min v_max"]
    for b in case.buses:
        vset = "-" if b.v_setpoint is None else _num(b.v_setpoint)
        lines.append(" ".join([str(b.id), b.kind.value, _num(b.p_load), _num(b.q_load),
                               vset, _num(b.v_min), _num(b.v_max)]))
    lines += ["", "GEN", "# bus p_gen p_min p_max"]
    for g in case.generators:
        lines.append(" ".join([str(g.bus), _num(g.p_gen), _num(g.p_min), _num(g.p_max)]))
    lines += ["", "GEN_DYNAMICS", "# bus inertia_h damping_d xd_prime"]
    for g in case.generators:
        lines.append(" ".join([str(g.bus), _num(g.inertia_h), _num(g.damping_d), _num(g.xd_prime)]))
    lines += ["", "BRANCH", "# from to r x b_shunt rating"]
    for br in case.branches:
        lines.append(" ".join([str(br.from_bus), str(br.to_bus), _num(br.r), _num(br.x),
                               _num(br.b_shunt), _num(br.rating)]))
    return "\n".join(lines) + "\n"


def load_case(path: Union[str, Path]) -> GridCase:
    path = Path(path)
    logger.info(f"loading case {path}")
    return parse_case(path.read_text(encoding="utf-8"))


def save_case(case: GridCase, path: Union[str, Path]) -> None:
    Path(path).write_text(serialize_case(case), encoding="utf-8")


def case_hash(case: GridCase) -> str:
    return hashlib.sha256(serialize_case(case).encode("utf-8")).hexdigest()


# --- validation --------------------------------------------------------------------

def validate_case(case: GridCase) -> List[Violation]:
    """Return every invariant violation of ``case``; empty means valid."""
    out: List[Violation] = []

    def bad(field: str, rule: str, message: str) -> None:
        out.append(Violation(field, rule, message))

    if not (math.isfinite(case.base_mva) and case.base_mva > 0):
        bad("base_mva", "base_mva > 0", f"base_mva must be positive, got {case.base_mva}")

    n_slack = sum(1 for b in case.buses if b.kind is BusKind.SLACK)
    if n_slack != 1:
        bad("buses.kind", "exactly one SLACK bus", f"expected exactly one SLACK bus, found {n_slack}")

    ids = [b.id for b in case.buses]
    seen = set()
    for i, bus_id in enumerate(ids):
        if bus_id in seen:
            bad(f"buses[{i}].id", "bus ids unique", f"duplicate bus id {bus_id}")
        seen.add(bus_id)

    for i, b in enumerate(case.buses):
        values = [b.p_load, b.q_load, b.v_min, b.v_max] + ([b.v_setpoint] if b.v_setpoint is not None else [])
        if not all(math.isfinite(v) for v in values):
            bad(f"buses[{i}]", "finite values", f"bus {b.id} has non-finite data")
            continue
        if not b.v_min < b.v_max:
            bad(f"buses[{i}].v_min", "v_min < v_max", f"bus {b.id}: v_min {b.v_min} not below v_max {b.v_max}")
        if b.kind is not BusKind.PQ and b.v_setpoint is None:
            bad(f"buses[{i}].v_setpoint", "v_setpoint present for PV/SLACK",
                f"{b.kind.value} bus {b.id} needs a voltage setpoint")
        if b.v_setpoint is not None and not b.v_min <= b.v_setpoint <= b.v_max:
            bad(f"buses[{i}].v_setpoint", "v_min ≤ v_setpoint ≤ v_max",
                f"bus {b.id}: setpoint {b.v_setpoint} outside [{b.v_min}, {b.v_max}]")

    for i, g in enumerate(case.generators):
        if g.bus not in seen:
            bad(f"generators[{i}].bus", "references existing bus", f"generator {i} references unknown bus {g.bus}")
        values = [g.p_gen, g.p_min, g.p_max, g.inertia_h, g.damping_d, g.xd_prime]
        if not all(math.isfinite(v) for v in values):
            bad(f"generators[{i}]", "finite values", f"generator {i} has non-finite data")
            continue
        if not g.inertia_h > 0:
            bad(f"generators[{i}].inertia_h", "inertia_h > 0", f"generator {i}: inertia_h {g.inertia_h}")
        if not g.xd_prime > 0:
            bad(f"generators[{i}].xd_prime", "xd_prime > 0", f"generator {i}: xd_prime {g.xd_prime}")
        if g.damping_d < 0:
            bad(f"generators[{i}].damping_d", "damping_d ≥ 0", f"generator {i}: damping_d {g.damping_d}")
        if not g.p_min <= g.p_gen <= g.p_max:
            bad(f"generators[{i}].p_gen", "p_min ≤ p_gen ≤ p_max",
                f"generator {i}: p_gen {g.p_gen} outside [{g.p_min}, {g.p_max}]")

    for i, br in enumerate(case.branches):
        for end in ("from_bus", "to_bus"):
            bus_id = getattr(br, end)
            if bus_id not in seen:
                bad(f"branches[{i}].{end}", "references existing bus", f"branch {i} references unknown bus {bus_id}")
        if br.from_bus == br.to_bus:
            bad(f"branches[{i}].to_bus", "from_bus ≠ to_bus", f"branch {i} connects bus {br.from_bus} to itself")
        if not all(math.isfinite(v) for v in (br.r, br.x, br.b_shunt, br.rating)):
            bad(f"branches[{i}]", "finite values", f"branch {i} has non-finite data")
            continue
        if br.x == 0:
            bad(f"branches[{i}].x", "x ≠ 0", f"branch {i} has zero reactance")
        if br.rating < 0:
            bad(f"branches[{i}].rating", "rating ≥ 0", f"branch {i}: rating {br.rating}")
    return out


# --- graph -------------------------------------------------------------------------

def build_graph(case: GridCase) -> GridGraph:
    """Unweighted adjacency of the bus graph; parallel branches collapse to one edge."""
    n = case.n_buses
    shift = np.zeros((n, n), dtype=np.float64)
    ends = case.branch_ends()
    if len(ends):
        shift[ends[:, 0], ends[:, 1]] = 1.0
        shift[ends[:, 1], ends[:, 0]] = 1.0
    np.fill_diagonal(shift, 0.0)

    rows, cols = np.nonzero(np.triu(shift))
    edge_list = tuple((int(i), int(j)) for i, j in zip(rows, cols))
    degree = shift.sum(axis=1).astype(np.int64)

    width = int(degree.max()) if n else 0
    neighbours = np.full((n, width), n, dtype=np.int64)
    for i in range(n):
        nbrs = np.flatnonzero(shift[i])
        neighbours[i, :len(nbrs)] = nbrs
    return GridGraph(n=n, shift=shift, edge_list=edge_list, neighbours=neighbours, degree=degree)


def to_networkx(graph: GridGraph) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(range(graph.n))
    g.add_edges_from(graph.edge_list)
    return g
