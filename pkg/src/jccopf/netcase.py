"""Grid case data, MATPOWER parsing and DC power transfer distribution factors."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "CaseError",
    "ParseError",
    "UnsupportedFeatureError",
    "ValidationError",
    "NumericalError",
    "GridCase",
    "PTDFMatrix",
    "parse_matpower",
    "load_case",
    "builtin_case",
    "to_matpower",
    "build_ptdf",
    "nominal_injection",
]


class CaseError(Exception):
    """Base class for problems with grid case data."""


class ParseError(CaseError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFeatureError(CaseError):
    pass


class ValidationError(CaseError):
    pass


class NumericalError(ArithmeticError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridCase:
    """Immutable DC network description in per unit.

    Costs follow ``cost(g) = 0.5 g'Mg + v'g + k0`` with ``g`` in per unit
    and the result in $/h, so ``cost_quad`` holds the diagonal of ``M``.
    Line ratings of ``inf`` mean the line is unconstrained.
    """

    bus_ids: np.ndarray
    line_from: np.ndarray  # bus positions, not ids
    line_to: np.ndarray
    line_x: np.ndarray
    line_rate: np.ndarray
    gen_bus: np.ndarray  # bus positions
    gen_pmin: np.ndarray
    gen_pmax: np.ndarray
    cost_quad: np.ndarray
    cost_lin: np.ndarray
    cost_const: np.ndarray
    load: np.ndarray
    base_mva: float = 100.0
    ref_bus: int = 0  # bus position
    name: str = "case"
    gen_pg: np.ndarray | None = field(default=None)

    def __post_init__(self):
        ints = ("bus_ids", "line_from", "line_to", "gen_bus")
        for name in ints:
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype=np.int64))
        for name in ("line_x", "line_rate", "gen_pmin", "gen_pmax", "cost_quad",
                     "cost_lin", "cost_const", "load"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.gen_pg is not None:
            object.__setattr__(self, "gen_pg", _frozen(self.gen_pg))
        self._validate()

    def _validate(self):
        nb, nl, ng = self.n_bus, self.n_line, self.n_gen
        if self.load.shape != (nb,):
            raise ValidationError("load vector must have one entry per bus")
        for name in ("line_to", "line_x", "line_rate"):
            if getattr(self, name).shape != (nl,):
                raise ValidationError(f"{name} has wrong length")
        for name in ("gen_pmin", "gen_pmax", "cost_quad", "cost_lin", "cost_const"):
            if getattr(self, name).shape != (ng,):
                raise ValidationError(f"{name} has wrong length")
        if nl and (self.line_from.min() < 0 or max(self.line_from.max(), self.line_to.max()) >= nb):
            raise ValidationError("line endpoint outside bus range")
        if ng and (self.gen_bus.min() < 0 or self.gen_bus.max() >= nb):
            raise ValidationError("generator bus outside bus range")
        if not 0 <= self.ref_bus < nb:
            raise ValidationError("reference bus outside bus range")
        if np.any(self.line_x == 0):
            raise ValidationError("in-service line with zero reactance")
        if np.any(self.gen_pmin > self.gen_pmax):
            raise ValidationError("generator with pmin > pmax")
        if np.any(self.cost_quad < 0):
            raise ValidationError("negative quadratic cost coefficient")
        if np.any(self.line_rate <= 0):
            raise ValidationError("line ratings must be positive (use inf for unlimited)")
        if nb > 1:
            adj = coo_matrix((np.ones(nl), (self.line_from, self.line_to)), shape=(nb, nb))
            ncomp, _ = connected_components(adj, directed=False)
            if ncomp != 1:
                raise ValidationError(f"network is not connected ({ncomp} islands)")

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_line(self) -> int:
        return len(self.line_from)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)

    @property
    def limited_lines(self) -> np.ndarray:
        """Positions of lines with a finite rating."""
        return np.flatnonzero(np.isfinite(self.line_rate))

    @property
    def gen_map(self) -> np.ndarray:
        """Bus-by-generator incidence matrix (one unit entry per column)."""
        G = np.zeros((self.n_bus, self.n_gen))
        G[self.gen_bus, np.arange(self.n_gen)] = 1.0
        return G

    def bus_index(self, bus_id: int) -> int:
        hits = np.flatnonzero(self.bus_ids == bus_id)
        if len(hits) != 1:
            raise KeyError(f"unknown bus id {bus_id}")
        return int(hits[0])

    def cost(self, g) -> float:
        g = np.asarray(g, dtype=float)
        return float(0.5 * g @ (self.cost_quad * g) + self.cost_lin @ g + self.cost_const.sum())

    def cost_grad(self, g) -> np.ndarray:
        return self.cost_quad * np.asarray(g, dtype=float) + self.cost_lin

    def to_dict(self) -> dict:
        def enc(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "ref_bus": int(self.bus_ids[self.ref_bus]),
            "buses": [int(b) for b in self.bus_ids],
            "load": enc(self.load),
            "lines": {
                "from": [int(self.bus_ids[i]) for i in self.line_from],
                "to": [int(self.bus_ids[i]) for i in self.line_to],
                "x": enc(self.line_x),
                "rate": enc(self.line_rate),
            },
            "gens": {
                "bus": [int(self.bus_ids[i]) for i in self.gen_bus],
                "pmin": enc(self.gen_pmin),
                "pmax": enc(self.gen_pmax),
                "cost_quad": enc(self.cost_quad),
                "cost_lin": enc(self.cost_lin),
                "cost_const": enc(self.cost_const),
                "pg": None if self.gen_pg is None else enc(self.gen_pg),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridCase":
        def dec(a):
            return np.array([np.inf if v is None else v for v in a], dtype=float)

        buses = np.asarray(data["buses"], dtype=np.int64)
        pos = {int(b): i for i, b in enumerate(buses)}
        lines, gens = data["lines"], data["gens"]
        return cls(
            bus_ids=buses,
            line_from=[pos[b] for b in lines["from"]],
            line_to=[pos[b] for b in lines["to"]],
            line_x=dec(lines["x"]),
            line_rate=dec(lines["rate"]),
            gen_bus=[pos[b] for b in gens["bus"]],
            gen_pmin=dec(gens["pmin"]),
            gen_pmax=dec(gens["pmax"]),
            cost_quad=dec(gens["cost_quad"]),
            cost_lin=dec(gens["cost_lin"]),
            cost_const=dec(gens["cost_const"]),
            load=dec(data["load"]),
            base_mva=float(data["base_mva"]),
            ref_bus=pos[int(data["ref_bus"])],
            name=data.get("name", "case"),
            gen_pg=None if gens.get("pg") is None else dec(gens["pg"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GridCase":
        return cls.from_dict(json.loads(text))

    def equals(self, other: "GridCase", rtol: float = 0.0) -> bool:
        a, b = self.to_dict(), other.to_dict()
        return _nested_close(a, b, rtol)


def _nested_close(a, b, rtol):
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_nested_close(a[k], b[k], rtol) for k in a)
    if isinstance(a, list):
        return len(a) == len(b) and all(_nested_close(x, y, rtol) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float):
        return a == b or abs(a - b) <= rtol * max(abs(a), abs(b))
    return a == b


# MATPOWER column positions (0-based)
_BUS_I, _BUS_TYPE, _PD = 0, 1, 2
_GEN_BUS, _PG, _GEN_STATUS, _PMAX, _PMIN = 0, 1, 7, 8, 9
_F_BUS, _T_BUS, _BR_X, _RATE_A, _BR_STATUS = 0, 1, 3, 5, 10
_MODEL, _NCOST = 0, 3

_BLOCK_RE = re.compile(r"mpc\.(\w+)\s*=\s*(\[|[^;\[]+;)")


def _parse_blocks(text: str) -> dict[str, tuple[int, object]]:
    """Return ``{name: (line_number, value)}`` for every ``mpc.<name> = ...``."""
    blocks = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i].split("%", 1)[0]
        m = _BLOCK_RE.search(raw)
        if not m:
            i += 1
            continue
        name, start = m.group(1), i + 1
        if m.group(2) != "[":
            value = m.group(2).rstrip(";").strip().strip("'\"")
            blocks[name] = (start, value)
            i += 1
            continue
        rows = []
        rest = raw[m.end():]
        while True:
            closed = "]" in rest
            body = rest.split("]", 1)[0]
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                try:
                    rows.append((i + 1, [float(tok) for tok in chunk.replace(",", " ").split()]))
                except ValueError:
                    raise ParseError(f"non-numeric entry in mpc.{name}: {chunk!r}", i + 1) from None
            if closed:
                break
            i += 1
            if i >= len(lines):
                raise ParseError(f"unterminated matrix mpc.{name}", start)
            rest = lines[i].split("%", 1)[0]
        blocks[name] = (start, rows)
        i += 1
    return blocks


def _matrix(blocks, name, min_cols):
    if name not in blocks:
        raise ParseError(f"missing block mpc.{name}")
    start, rows = blocks[name]
    if not isinstance(rows, list) or not rows:
        raise ParseError(f"mpc.{name} is empty", start)
    width = len(rows[0][1])
    for lineno, row in rows:
        if len(row) != width:
            raise ParseError(f"ragged row in mpc.{name} ({len(row)} vs {width} columns)", lineno)
        if len(row) < min_cols:
            raise ParseError(f"mpc.{name} needs at least {min_cols} columns", lineno)
    return np.array([r for _, r in rows]), [ln for ln, _ in rows]


def parse_matpower(text: str, name: str = "case") -> GridCase:
    """Parse MATPOWER case-file text into a per-unit :class:`GridCase`.

    Out-of-service branches and generators are dropped and ``rateA == 0``
    becomes an unlimited line. Only polynomial costs of degree <= 2 are
    accepted.
    """
    blocks = _parse_blocks(text)
    if "baseMVA" not in blocks:
        raise ParseError("missing block mpc.baseMVA")
    ln, val = blocks["baseMVA"]
    try:
        base = float(val)
    except (TypeError, ValueError):
        raise ParseError(f"bad baseMVA value {val!r}", ln) from None
    if base <= 0:
        raise ParseError("baseMVA must be positive", ln)

    bus, _ = _matrix(blocks, "bus", 3)
    gen, gen_lines = _matrix(blocks, "gen", 10)
    branch, br_lines = _matrix(blocks, "branch", 11)
    gencost, cost_lines = _matrix(blocks, "gencost", 4)
    if len(gencost) < len(gen):
        raise ParseError("fewer gencost rows than generators", cost_lines[-1])
    gencost = gencost[: len(gen)]  # extra rows would be reactive costs

    bus_ids = bus[:, _BUS_I].astype(np.int64)
    if len(set(bus_ids.tolist())) != len(bus_ids):
        raise ValidationError("duplicate bus ids")
    pos = {int(b): i for i, b in enumerate(bus_ids)}

    def lookup(bid, lineno):
        try:
            return pos[int(bid)]
        except KeyError:
            raise ParseError(f"reference to unknown bus {int(bid)}", lineno) from None

    quad, lin, const = [], [], []
    for row, lineno in zip(gencost, cost_lines):
        if int(row[_MODEL]) != 2:
            raise UnsupportedFeatureError(f"line {lineno}: piecewise-linear gencost is not supported")
        n = int(row[_NCOST])
        coeffs = row[4:4 + n]
        if len(coeffs) != n:
            raise ParseError("gencost row shorter than its declared degree", lineno)
        if n > 3:
            raise UnsupportedFeatureError(f"line {lineno}: gencost polynomial of degree {n - 1} (max 2)")
        c = np.zeros(3)
        c[3 - n:] = coeffs  # (c2, c1, c0) in $/h with P in MW
        quad.append(2.0 * c[0] * base**2)
        lin.append(c[1] * base)
        const.append(c[2])

    on = gen[:, _GEN_STATUS] > 0
    gen_bus = [lookup(b, ln) for b, ln in zip(gen[on, _GEN_BUS], np.asarray(gen_lines)[on])]

    br_on = branch[:, _BR_STATUS] > 0
    br = branch[br_on]
    br_lines = np.asarray(br_lines)[br_on]
    line_from = [lookup(b, ln) for b, ln in zip(br[:, _F_BUS], br_lines)]
    line_to = [lookup(b, ln) for b, ln in zip(br[:, _T_BUS], br_lines)]
    rate = br[:, _RATE_A] / base
    rate[rate == 0] = np.inf

    ref = np.flatnonzero(bus[:, _BUS_TYPE] == 3)
    ref_bus = int(ref[0]) if len(ref) else 0

    return GridCase(
        bus_ids=bus_ids,
        line_from=line_from,
        line_to=line_to,
        line_x=br[:, _BR_X],
        line_rate=rate,
        gen_bus=gen_bus,
        gen_pmin=gen[on, _PMIN] / base,
        gen_pmax=gen[on, _PMAX] / base,
        cost_quad=np.array(quad)[on],
        cost_lin=np.array(lin)[on],
        cost_const=np.array(const)[on],
        load=bus[:, _PD] / base,
        base_mva=base,
        ref_bus=ref_bus,
        name=name,
        gen_pg=gen[on, _PG] / base,
    )


def load_case(path) -> GridCase:
    """Read a ``.m`` MATPOWER file or a ``.json`` file written by :meth:`GridCase.to_json`."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return GridCase.from_json(text)
    return parse_matpower(text, name=path.stem)


BUILTIN_CASES = {
    "case14": "pglib_opf_case14_ieee.m",
    "case57": "pglib_opf_case57_ieee.m",
    "case118": "pglib_opf_case118_ieee.m",
}


def builtin_case(name: str) -> GridCase:
    """One of the vendored pglib-opf v23.07 cases: ``case14``, ``case57``, ``case118``."""
    fname = BUILTIN_CASES.get(name, name)
    text = resources.files("jccopf.data").joinpath(fname).read_text()
    return parse_matpower(text, name=name)


def to_matpower(case: GridCase) -> str:
    """Serialize to a minimal MATPOWER file that :func:`parse_matpower` reads back exactly."""
    base = case.base_mva
    def r(v):
        return repr(float(v))

    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {r(base)};", "mpc.bus = ["]
    for i, b in enumerate(case.bus_ids):
        btype = 3 if i == case.ref_bus else 1
        out.append(f"\t{int(b)}\t{btype}\t{r(case.load[i] * base)};")
    out += ["];", "mpc.gen = ["]
    pg = case.gen_pg if case.gen_pg is not None else np.zeros(case.n_gen)
    for k in range(case.n_gen):
        out.append(
            f"\t{int(case.bus_ids[case.gen_bus[k]])}\t{r(pg[k] * base)}\t0\t0\t0\t1\t{r(base)}\t1"
            f"\t{r(case.gen_pmax[k] * base)}\t{r(case.gen_pmin[k] * base)};"
        )
    out += ["];", "mpc.branch = ["]
    for k in range(case.n_line):
        rate = 0.0 if not np.isfinite(case.line_rate[k]) else case.line_rate[k] * base
        out.append(
            f"\t{int(case.bus_ids[case.line_from[k]])}\t{int(case.bus_ids[case.line_to[k]])}\t0\t{r(case.line_x[k])}"
            f"\t0\t{r(rate)}\t0\t0\t0\t0\t1;"
        )
    out += ["];", "mpc.gencost = ["]
    for k in range(case.n_gen):
        c2 = case.cost_quad[k] / (2.0 * base**2)
        c1 = case.cost_lin[k] / base
        out.append(f"\t2\t0\t0\t3\t{r(c2)}\t{r(c1)}\t{r(case.cost_const[k])};")
    out += ["];", ""]
    return "\n".join(out)


@dataclass(frozen=True, eq=False)
class PTDFMatrix:
    matrix: np.ndarray  # lines x buses
    slack: int  # bus position

    def flows(self, injection) -> np.ndarray:
        return self.matrix @ np.asarray(injection, dtype=float)


def build_ptdf(case: GridCase, slack: int | None = None) -> PTDFMatrix:
    """Dense DC PTDF matrix with the given slack bus position (default: reference bus).

    Rows are ``b_l * A_l * X`` where ``X`` inverts the Laplacian with the
    slack row and column removed; the slack column is identically zero.
    """
    slack = case.ref_bus if slack is None else int(slack)
    if not 0 <= slack < case.n_bus:
        raise ValueError(f"slack position {slack} outside 0..{case.n_bus - 1}")
    nb, nl = case.n_bus, case.n_line
    A = np.zeros((nl, nb))
    A[np.arange(nl), case.line_from] = 1.0
    A[np.arange(nl), case.line_to] = -1.0
    b = 1.0 / case.line_x
    B = A.T @ (b[:, None] * A)
    keep = np.delete(np.arange(nb), slack)
    Bred = B[np.ix_(keep, keep)]
    X = np.zeros((nb, nb))
    if len(keep):
        cond = np.linalg.cond(Bred)
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericalError(f"reduced Laplacian is singular (condition estimate {cond:.3g})")
        X[np.ix_(keep, keep)] = scipy.linalg.solve(Bred, np.eye(len(keep)), assume_a="sym")
    Phi = (b[:, None] * A) @ X
    Phi[:, slack] = 0.0
    Phi.setflags(write=False)
    return PTDFMatrix(Phi, slack)


def nominal_injection(case: GridCase, g) -> np.ndarray:
    """Bus injection ``GenMap @ g - d`` for a generator dispatch ``g``."""
    g = np.asarray(g, dtype=float)
    if g.shape != (case.n_gen,):
        raise ValueError(f"expected {case.n_gen} generator values, got shape {g.shape}")
    p = -case.load.copy()
    np.add.at(p, case.gen_bus, g)
    return p
