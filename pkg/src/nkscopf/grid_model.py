"""Grid data model, case-file parsing, and attack-modulated admittance.

Case files use a MATPOWER-style text subset with the sections ``mpc.baseMVA``,
``mpc.bus``, ``mpc.gen``, ``mpc.branch`` and ``mpc.gencost``.  Column meanings
follow the MATPOWER convention:

* ``bus``:    BUS_I TYPE PD QD GS BS AREA VM VA BASE_KV ZONE VMAX VMIN
  (TYPE 3 marks the slack bus; PD/QD in MW/MVAr; GS/BS in MW/MVAr at V=1)
* ``gen``:    BUS PG QG QMAX QMIN VG MBASE STATUS PMAX PMIN  (extra columns
  ignored; STATUS 0 rows are dropped together with their cost rows)
* ``branch``: F_BUS T_BUS R X B RATEA RATEB RATEC RATIO ANGLE STATUS (extra
  columns ignored; RATIO 0 means tap 1.0; nonzero ANGLE is rejected)
* ``gencost``: MODEL STARTUP SHUTDOWN NCOST C(NCOST-1) ... C0 with MODEL 2
  (polynomial) and NCOST in {2, 3}

Optional extension sections (one value per device row):

* ``mpc.gen_ramp_frac``:  per-generator ramp fraction of PMAX allowed between
  base and contingency dispatch (default 0.1)
* ``mpc.branch_outage`` / ``mpc.gen_outage``: 0/1 outage eligibility flags
  (default: every branch and every generator is outage-eligible)

All powers are converted to per-unit on ``baseMVA`` at parse time.  Cost
coefficients are rescaled so that the quadratic cost is a function of
per-unit power and still yields $/hr.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import CaseFormatError, CaseValidationError

__all__ = [
    "Bus",
    "Generator",
    "Branch",
    "Load",
    "DeviceRef",
    "PowerSystem",
    "AttackVector",
    "EffectiveLimits",
    "parse_case",
    "load_case",
    "build_admittance",
    "effective_generator_limits",
    "validate_system",
]


@dataclass
class Bus:
    id: int
    v_min: float
    v_max: float
    shunt: complex = 0.0 + 0.0j


@dataclass
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: tuple[float, float, float]  # (c2, c1, c0) on per-unit power, $/hr
    ramp_frac: float = 0.1
    nominal_p: float = 0.0
    nominal_v: float = 1.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    series: complex
    charging: float = 0.0
    tap: float = 1.0
    outage_eligible: bool = True


@dataclass
class Load:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class DeviceRef:
    """Reference to an outage-eligible device: a branch or a generator."""

    kind: str  # "branch" | "generator"
    index: int

    def label(self, sys: "PowerSystem") -> str:
        if self.kind == "branch":
            br = sys.branches[self.index]
            return (
                f"branch {self.index} "
                f"({sys.buses[br.from_bus].id}-{sys.buses[br.to_bus].id})"
            )
        gen = sys.generators[self.index]
        return f"generator {self.index} (bus {sys.buses[gen.bus].id})"


class PowerSystem:
    """Static grid description.  Treat as immutable after construction.

    Bus/generator/branch indices used throughout the package are positions in
    the corresponding lists, not the external bus ids from the case file.
    """

    def __init__(self, base_mva, buses, generators, branches, loads, slack_bus,
                 outage_devices=None, name="system"):
        self.base_mva = float(base_mva)
        self.buses = list(buses)
        self.generators = list(generators)
        self.branches = list(branches)
        self.loads = list(loads)
        self.slack_bus = int(slack_bus)
        self.name = name
        if outage_devices is None:
            outage_devices = [
                DeviceRef("branch", i)
                for i, br in enumerate(self.branches)
                if br.outage_eligible
            ] + [DeviceRef("generator", i) for i in range(len(self.generators))]
        self.outage_devices = list(outage_devices)
        self._build_arrays()

    # -- derived arrays ----------------------------------------------------

    def _build_arrays(self):
        nb = len(self.buses)
        ng = len(self.generators)
        nbr = len(self.branches)

        self.n_bus = nb
        self.n_gen = ng
        self.n_branch = nbr
        self.n_outage = len(self.outage_devices)

        self.gen_bus = np.array([g.bus for g in self.generators], dtype=np.int64)
        self.pd = np.zeros(nb)
        self.qd = np.zeros(nb)
        for ld in self.loads:
            self.pd[ld.bus] += ld.p
            self.qd[ld.bus] += ld.q
        self.gsh = np.array([b.shunt.real for b in self.buses])
        self.bsh = np.array([b.shunt.imag for b in self.buses])
        self.v_min = np.array([b.v_min for b in self.buses])
        self.v_max = np.array([b.v_max for b in self.buses])

        gen_at = {}
        for gi, g in enumerate(self.generators):
            gen_at.setdefault(g.bus, []).append(gi)
        self.gens_at_bus = gen_at
        self.is_gen_bus = np.zeros(nb, dtype=bool)
        self.is_gen_bus[self.gen_bus] = True
        self.pq_buses = np.flatnonzero(~self.is_gen_bus)
        self.n_pq = len(self.pq_buses)

        slack_gens = gen_at.get(self.slack_bus, [])
        self.slack_gen = slack_gens[0] if slack_gens else -1
        self.nonslack_gens = np.array(
            [g for g in range(ng) if g != self.slack_gen], dtype=np.int64
        )

        self.branch_from = np.array([b.from_bus for b in self.branches], dtype=np.int64)
        self.branch_to = np.array([b.to_bus for b in self.branches], dtype=np.int64)

        # device index maps: per branch / generator, position in outage_devices
        self.branch_device = np.full(nbr, -1, dtype=np.int64)
        self.gen_device = np.full(ng, -1, dtype=np.int64)
        for j, dev in enumerate(self.outage_devices):
            if dev.kind == "branch":
                self.branch_device[dev.index] = j
            else:
                self.gen_device[dev.index] = j

        # generator limit / cost arrays
        self.gen_p_min = np.array([g.p_min for g in self.generators])
        self.gen_p_max = np.array([g.p_max for g in self.generators])
        self.gen_q_min = np.array([g.q_min for g in self.generators])
        self.gen_q_max = np.array([g.q_max for g in self.generators])
        self.gen_c2 = np.array([g.cost[0] for g in self.generators])
        self.gen_c1 = np.array([g.cost[1] for g in self.generators])
        self.gen_c0 = np.array([g.cost[2] for g in self.generators])
        self.gen_ramp = np.array([g.ramp_frac for g in self.generators])
        self.gen_nominal_p = np.array([g.nominal_p for g in self.generators])
        self.gen_nominal_v = np.array([g.nominal_v for g in self.generators])

        # unscaled per-branch admittance 2x2 blocks (MATPOWER tap convention,
        # tap on the from side, no phase shift)
        yff = np.empty(nbr, dtype=complex)
        yft = np.empty(nbr, dtype=complex)
        ytf = np.empty(nbr, dtype=complex)
        ytt = np.empty(nbr, dtype=complex)
        for i, br in enumerate(self.branches):
            ys = br.series
            bc = 1j * br.charging / 2.0
            tau = br.tap
            yff[i] = (ys + bc) / (tau * tau)
            yft[i] = -ys / tau
            ytf[i] = -ys / tau
            ytt[i] = ys + bc
        self.yff, self.yft, self.ytf, self.ytt = yff, yft, ytf, ytt

        # fixed admittance triplet pattern: 4 slots per branch, then shunt
        # diagonals for every bus; the pattern never changes with the attack
        f, t = self.branch_from, self.branch_to
        self._y_rows = np.concatenate([f, f, t, t, np.arange(nb)])
        self._y_cols = np.concatenate([f, t, f, t, np.arange(nb)])
        self._y_base = np.concatenate([yff, yft, ytf, ytt,
                                       self.gsh + 1j * self.bsh])
        for arr in (self.gen_bus, self.pd, self.qd, self.gen_p_min,
                    self.gen_p_max, self.gen_q_min, self.gen_q_max):
            arr.flags.writeable = False

    # -- attack scaling ----------------------------------------------------

    def branch_scale(self, y: np.ndarray | None) -> np.ndarray:
        """Per-branch multiplier (1 - y_j); 1.0 for ineligible branches."""
        scale = np.ones(self.n_branch)
        if y is not None and self.n_outage:
            mask = self.branch_device >= 0
            scale[mask] = 1.0 - y[self.branch_device[mask]]
        return scale

    def gen_scale(self, y: np.ndarray | None) -> np.ndarray:
        """Per-generator output multiplier (1 - y_j); 1.0 for ineligible."""
        scale = np.ones(self.n_gen)
        if y is not None and self.n_outage:
            mask = self.gen_device >= 0
            scale[mask] = 1.0 - y[self.gen_device[mask]]
        return scale

    def admittance_triplets(self, y: np.ndarray | None = None):
        """COO triplets of the attack-modulated bus admittance matrix."""
        s = self.branch_scale(y)
        data = np.concatenate([
            self.yff * s, self.yft * s, self.ytf * s, self.ytt * s,
            self._y_base[4 * self.n_branch:],
        ])
        return self._y_rows, self._y_cols, data


@dataclass
class AttackVector:
    """Relaxed contingency: per-device outage fractions with an L1 budget."""

    values: np.ndarray
    budget: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def validate(self, n_outage: int | None = None, tol: float = 1e-9):
        if n_outage is not None and len(self.values) != n_outage:
            raise ValueError(
                f"attack vector has length {len(self.values)}, expected {n_outage}"
            )
        if self.budget < 0 or int(self.budget) != self.budget:
            raise ValueError("attack budget must be a nonnegative integer")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attack vector has non-finite entries")
        if self.values.size:
            if self.values.min() < -tol or self.values.max() > 1.0 + tol:
                raise ValueError("attack fractions must lie in [0, 1]")
            if self.values.sum() > self.budget + 1e-9:
                raise ValueError(
                    f"attack L1 norm {self.values.sum():.6g} exceeds budget {self.budget}"
                )
        return self

    @classmethod
    def zeros(cls, sys: PowerSystem, budget: int) -> "AttackVector":
        return cls(np.zeros(sys.n_outage), budget)


@dataclass
class EffectiveLimits:
    """Generator limits after applying the (1 - y_j) outage scaling."""

    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def build_admittance(sys: PowerSystem, attack: AttackVector | None = None):
    """Bus admittance matrix with outaged branches scaled by (1 - y_j).

    Returns a complex CSR matrix of shape (n_bus, n_bus).  Entries of fully
    outaged branches are kept as explicit zeros so the sparsity pattern is
    identical for every attack vector.
    """
    y = None
    if attack is not None:
        attack.validate(sys.n_outage)
        y = attack.values
    rows, cols, data = sys.admittance_triplets(y)
    mat = sp.coo_matrix((data, (rows, cols)), shape=(sys.n_bus, sys.n_bus))
    return mat.tocsr()


def effective_generator_limits(sys: PowerSystem, attack: AttackVector) -> EffectiveLimits:
    """Per-generator limits scaled by (1 - y_j) for outage-eligible units."""
    attack.validate(sys.n_outage)
    s = sys.gen_scale(attack.values)
    return EffectiveLimits(
        p_min=sys.gen_p_min * s,
        p_max=sys.gen_p_max * s,
        q_min=sys.gen_q_min * s,
        q_max=sys.gen_q_max * s,
    )


def validate_system(sys: PowerSystem) -> list[str]:
    """Structural diagnostics; an empty list means every invariant holds."""
    diags = []
    nb = sys.n_bus

    if not (0 <= sys.slack_bus < nb):
        diags.append(f"slack bus index {sys.slack_bus} out of range")
        return diags

    for gi, g in enumerate(sys.generators):
        if not (0 <= g.bus < nb):
            diags.append(f"generator {gi} references nonexistent bus {g.bus}")
        if g.p_min > g.p_max:
            diags.append(f"generator {gi} has p_min > p_max")
        if g.q_min > g.q_max:
            diags.append(f"generator {gi} has q_min > q_max")
        if g.cost[0] < 0:
            diags.append(f"generator {gi} has negative quadratic cost coefficient")
        if not (0.0 < g.ramp_frac <= 1.0):
            diags.append(f"generator {gi} ramp fraction {g.ramp_frac} outside (0, 1]")
    for li, ld in enumerate(sys.loads):
        if not (0 <= ld.bus < nb):
            diags.append(f"load {li} references nonexistent bus {ld.bus}")
        if not (math.isfinite(ld.p) and math.isfinite(ld.q)):
            diags.append(f"load {li} has non-finite demand")
    for bi, b in enumerate(sys.buses):
        if not (0.0 < b.v_min < b.v_max):
            diags.append(f"bus {bi} violates 0 < v_min < v_max")
    for bi, br in enumerate(sys.branches):
        if not (0 <= br.from_bus < nb) or not (0 <= br.to_bus < nb):
            diags.append(f"branch {bi} references a nonexistent bus")
        if br.series == 0:
            diags.append(f"branch {bi} has zero series admittance")
        if br.tap <= 0:
            diags.append(f"branch {bi} has nonpositive tap ratio")

    if sys.slack_gen < 0:
        diags.append("slack bus has no generator")
    for bus, gens in sys.gens_at_bus.items():
        if len(gens) > 1:
            diags.append(f"bus index {bus} hosts more than one generator")

    seen = set()
    for dev in sys.outage_devices:
        key = (dev.kind, dev.index)
        if key in seen:
            diags.append(f"outage device {key} listed more than once")
        seen.add(key)
        limit = sys.n_branch if dev.kind == "branch" else sys.n_gen
        if dev.kind not in ("branch", "generator") or not (0 <= dev.index < limit):
            diags.append(f"outage device {key} is invalid")

    # base-case connectivity (breadth-first search over branches)
    if nb:
        adj = [[] for _ in range(nb)]
        for br in sys.branches:
            if 0 <= br.from_bus < nb and 0 <= br.to_bus < nb:
                adj[br.from_bus].append(br.to_bus)
                adj[br.to_bus].append(br.from_bus)
        seen_b = np.zeros(nb, dtype=bool)
        stack = [sys.slack_bus]
        seen_b[sys.slack_bus] = True
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen_b[v]:
                    seen_b[v] = True
                    stack.append(v)
        isolated = np.flatnonzero(~seen_b)
        if isolated.size:
            ids = ", ".join(str(sys.buses[i].id) for i in isolated[:5])
            diags.append(
                f"base-case network is disconnected ({isolated.size} buses "
                f"unreachable from slack, e.g. bus {ids})"
            )
    return diags


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SCALAR_RE = re.compile(r"^mpc\.(\w+)\s*=\s*([-\d.eE+]+)\s*;")
_MATRIX_OPEN_RE = re.compile(r"^mpc\.(\w+)\s*=\s*\[(.*)$")


def _tokenize_tables(text: str):
    """Extract scalar fields and numeric tables from MATPOWER-style text."""
    scalars = {}
    tables = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i]
        line = raw.split("%", 1)[0].strip()
        i += 1
        if not line or line.startswith("function"):
            continue
        m = _SCALAR_RE.match(line)
        if m:
            scalars[m.group(1)] = float(m.group(2))
            continue
        m = _MATRIX_OPEN_RE.match(line)
        if m:
            name = m.group(1)
            start_line = i
            body = [m.group(2)]
            closed = "]" in m.group(2)
            while not closed:
                if i >= len(lines):
                    raise CaseFormatError(
                        f"table mpc.{name} is never closed with ']'", start_line
                    )
                nxt = lines[i].split("%", 1)[0]
                i += 1
                body.append(nxt)
                closed = "]" in nxt
            blob = "\n".join(body)
            blob = blob[: blob.index("]")]
            rows = []
            for rline_no, rline in enumerate(blob.split("\n")):
                for chunk in rline.split(";"):
                    chunk = chunk.strip()
                    if not chunk:
                        continue
                    try:
                        rows.append([float(t) for t in chunk.replace(",", " ").split()])
                    except ValueError:
                        raise CaseFormatError(
                            f"non-numeric token in mpc.{name}: {chunk!r}",
                            start_line + rline_no,
                        ) from None
            tables[name] = rows
            continue
        if line in ("];", "]"):
            continue
        raise CaseFormatError(f"unrecognized statement: {line!r}", i)
    return scalars, tables


def _column_vector(table, name, expected):
    flat = [v for row in table for v in row]
    if len(flat) != expected:
        raise CaseFormatError(
            f"mpc.{name} must have {expected} entries, found {len(flat)}"
        )
    return flat


def parse_case(text: str, name: str = "case") -> PowerSystem:
    """Parse MATPOWER-style case text into a validated :class:`PowerSystem`."""
    if not text.strip():
        raise CaseFormatError("empty case file", 1)
    scalars, tables = _tokenize_tables(text)

    if "baseMVA" not in scalars:
        raise CaseFormatError("missing mpc.baseMVA")
    base = scalars["baseMVA"]
    if base <= 0:
        raise CaseFormatError("baseMVA must be positive")
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise CaseFormatError(f"missing required table mpc.{required}")

    bus_rows = tables["bus"]
    if any(len(r) < 13 for r in bus_rows):
        raise CaseFormatError("bus table rows need at least 13 columns")
    bus_ids = [int(r[0]) for r in bus_rows]
    if len(set(bus_ids)) != len(bus_ids):
        raise CaseFormatError("duplicate bus ids in bus table")
    bus_index = {bid: i for i, bid in enumerate(bus_ids)}

    buses = []
    loads = []
    slack_buses = []
    for i, r in enumerate(bus_rows):
        btype = int(r[1])
        if btype == 3:
            slack_buses.append(i)
        buses.append(Bus(id=int(r[0]), v_min=float(r[12]), v_max=float(r[11]),
                         shunt=complex(r[4] / base, r[5] / base)))
        if r[2] != 0.0 or r[3] != 0.0:
            loads.append(Load(bus=i, p=r[2] / base, q=r[3] / base))

    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if any(len(r) < 10 for r in gen_rows):
        raise CaseFormatError("gen table rows need at least 10 columns")
    if len(cost_rows) != len(gen_rows):
        raise CaseFormatError(
            f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators"
        )
    ramp = None
    if "gen_ramp_frac" in tables:
        ramp = _column_vector(tables["gen_ramp_frac"], "gen_ramp_frac", len(gen_rows))
    gen_flags = None
    if "gen_outage" in tables:
        gen_flags = _column_vector(tables["gen_outage"], "gen_outage", len(gen_rows))

    generators = []
    kept_gen_rows = []
    for i, r in enumerate(gen_rows):
        if int(r[7]) == 0:
            continue
        bid = int(r[0])
        if bid not in bus_index:
            raise CaseValidationError(
                [f"generator {i} references nonexistent bus {bid}"]
            )
        c = cost_rows[i]
        if int(c[0]) != 2:
            raise CaseFormatError(
                f"gencost row {i}: only polynomial cost model 2 is supported"
            )
        ncost = int(c[3])
        coeffs = c[4:4 + ncost]
        if ncost == 3:
            c2, c1, c0 = coeffs
        elif ncost == 2:
            c2, (c1, c0) = 0.0, coeffs
        else:
            raise CaseFormatError(f"gencost row {i}: NCOST must be 2 or 3, got {ncost}")
        generators.append(Generator(
            bus=bus_index[bid],
            p_min=r[9] / base, p_max=r[8] / base,
            q_min=r[4] / base, q_max=r[3] / base,
            cost=(c2 * base * base, c1 * base, c0),
            ramp_frac=float(ramp[i]) if ramp is not None else 0.1,
            nominal_p=r[1] / base, nominal_v=r[5],
        ))
        kept_gen_rows.append(i)

    branch_rows = tables["branch"]
    if any(len(r) < 11 for r in branch_rows):
        raise CaseFormatError("branch table rows need at least 11 columns")
    br_flags = None
    if "branch_outage" in tables:
        br_flags = _column_vector(tables["branch_outage"], "branch_outage",
                                  len(branch_rows))
    branches = []
    kept_branch_rows = []
    for i, r in enumerate(branch_rows):
        if int(r[10]) == 0:
            continue
        fb, tb = int(r[0]), int(r[1])
        if fb not in bus_index or tb not in bus_index:
            raise CaseValidationError(
                [f"branch {i} references a nonexistent bus ({fb}-{tb})"]
            )
        if r[9] != 0.0:
            raise CaseFormatError(
                f"branch {i}: phase-shift angle is not supported by this subset"
            )
        z = complex(r[2], r[3])
        if z == 0:
            raise CaseValidationError([f"branch {i} has zero impedance"])
        branches.append(Branch(
            from_bus=bus_index[fb], to_bus=bus_index[tb],
            series=1.0 / z, charging=float(r[4]),
            tap=float(r[8]) if r[8] != 0.0 else 1.0,
            outage_eligible=bool(br_flags[i]) if br_flags is not None else True,
        ))
        kept_branch_rows.append(i)

    if len(slack_buses) != 1:
        raise CaseValidationError(
            [f"case must have exactly one slack (type 3) bus, found {len(slack_buses)}"]
        )

    outage = [DeviceRef("branch", i) for i, _ in enumerate(branches)
              if branches[i].outage_eligible]
    for gi, row_i in enumerate(kept_gen_rows):
        eligible = bool(gen_flags[row_i]) if gen_flags is not None else True
        if eligible:
            outage.append(DeviceRef("generator", gi))

    system = PowerSystem(base, buses, generators, branches, loads,
                         slack_bus=slack_buses[0], outage_devices=outage,
                         name=name)
    diags = validate_system(system)
    if diags:
        raise CaseValidationError(diags)
    return system


def load_case(path_or_name: str) -> PowerSystem:
    """Load a case from a file path or a bundled case name like ``case14``."""
    import importlib.resources as resources
    import os

    if os.path.exists(path_or_name):
        with open(path_or_name, encoding="utf-8") as fh:
            text = fh.read()
        name = os.path.splitext(os.path.basename(path_or_name))[0]
        return parse_case(text, name=name)
    pkg_files = resources.files("nkscopf") / "cases" / f"{path_or_name}.m"
    if pkg_files.is_file():
        return parse_case(pkg_files.read_text(encoding="utf-8"), name=path_or_name)
    raise FileNotFoundError(f"no such case file or bundled case: {path_or_name}")
