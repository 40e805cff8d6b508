"""Transmission network topology: case parsing, network reduction, connectivity."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Sequence

import numpy as np


class CaseFormatError(ValueError):
    """Malformed case text. Carries the 1-based line/column of the problem."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class GridValidationError(ValueError):
    """The parsed network violates a structural invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    name: str | None = None


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    reactance: float
    switchable: bool = True


@dataclass(frozen=True)
class Grid:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    reference_bus: int = 0
    # original case-file bus numbers, indexed by internal id
    bus_labels: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.bus_labels:
            object.__setattr__(self, "bus_labels", tuple(b.id for b in self.buses))
        _validate(self)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def switchable_mask(self) -> np.ndarray:
        return np.array([br.switchable for br in self.branches], dtype=bool)

    @property
    def n_switchable(self) -> int:
        return sum(br.switchable for br in self.branches)

    @property
    def reactances(self) -> np.ndarray:
        return np.array([br.reactance for br in self.branches], dtype=np.float64)

    def bus_index(self, label: int) -> int:
        """Internal 0-based id for a case-file bus number."""
        try:
            return self.bus_labels.index(label)
        except ValueError:
            raise KeyError(f"unknown bus label {label}") from None

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_buses, dtype=np.int64)
        for br in self.branches:
            deg[br.from_bus] += 1
            deg[br.to_bus] += 1
        return deg

    def all_active(self) -> np.ndarray:
        return np.ones(self.n_branches, dtype=np.uint8)

    def to_dict(self) -> dict:
        return {
            "buses": [
                {"id": label, **({"name": b.name} if b.name is not None else {})}
                for b, label in zip(self.buses, self.bus_labels)
            ],
            "branches": [
                {
                    "from": self.bus_labels[br.from_bus],
                    "to": self.bus_labels[br.to_bus],
                    "x": br.reactance,
                    "switchable": br.switchable,
                }
                for br in self.branches
            ],
            "reference_bus": self.bus_labels[self.reference_bus],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def fingerprint(self) -> bytes:
        """SHA-256 over the canonical JSON form (32 raw bytes)."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()


def _validate(grid: Grid) -> None:
    n = len(grid.buses)
    if n == 0:
        raise GridValidationError("grid has no buses")
    if [b.id for b in grid.buses] != list(range(n)):
        raise GridValidationError("bus ids must be contiguous 0..N-1")
    if len(grid.bus_labels) != n or len(set(grid.bus_labels)) != n:
        raise GridValidationError("bus labels must be unique, one per bus")
    if not 0 <= grid.reference_bus < n:
        raise GridValidationError(f"reference bus {grid.reference_bus} is not a valid bus id")
    seen: set[tuple[int, int]] = set()
    for i, br in enumerate(grid.branches):
        if br.id != i:
            raise GridValidationError("branch ids must be contiguous 0..L-1")
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise GridValidationError(f"branch {i} references an unknown bus")
        if br.from_bus == br.to_bus:
            raise GridValidationError(f"branch {i} is a self-loop at bus {br.from_bus}")
        if not (br.reactance > 0 and np.isfinite(br.reactance)):
            raise GridValidationError(f"branch {i} has nonpositive reactance {br.reactance}")
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
        if key in seen:
            raise GridValidationError(f"parallel branches between buses {key} must be merged")
        seen.add(key)
    if not _spans(n, [(br.from_bus, br.to_bus) for br in grid.branches]):
        raise GridValidationError("baseline network (all branches active) is disconnected")


def _find(parent: list[int], i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def _spans(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    parent = list(range(n))
    components = n
    for a, b in edges:
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb:
            parent[ra] = rb
            components -= 1
            if components == 1:
                return True
    return components == 1


def is_connected(grid: Grid, s: Sequence[int] | np.ndarray) -> bool:
    """True iff the active branches of ``s`` span every bus."""
    if len(s) != grid.n_branches:
        raise ValueError(f"topology length {len(s)} does not match {grid.n_branches} branches")
    return _spans(
        grid.n_buses,
        ((br.from_bus, br.to_bus) for br, on in zip(grid.branches, s) if on),
    )


def find_bridges(grid: Grid) -> list[int]:
    """Branch ids whose removal disconnects the baseline graph."""
    edges = [(br.from_bus, br.to_bus) for br in grid.branches]
    return [
        i for i in range(len(edges))
        if not _spans(grid.n_buses, edges[:i] + edges[i + 1:])
    ]


def reduce_grid(grid: Grid) -> Grid:
    """Mark bridges non-switchable and every other branch switchable."""
    bridges = set(find_bridges(grid))
    branches = tuple(replace(br, switchable=br.id not in bridges) for br in grid.branches)
    return replace(grid, branches=branches)


def incidence_matrix(grid: Grid) -> np.ndarray:
    m = np.zeros((grid.n_buses, grid.n_branches), dtype=np.float64)
    for br in grid.branches:
        m[br.from_bus, br.id] = 1.0
        m[br.to_bus, br.id] = -1.0
    return m


def build_grid(
    bus_labels: Sequence[int],
    edges: Sequence[tuple[int, int, float]],
    reference_label: int | None = None,
    names: Sequence[str | None] | None = None,
    switchable: Sequence[bool] | None = None,
) -> Grid:
    """Assemble a Grid from case-file labels, merging parallel branches.

    Parallel reactances combine as ``1 / sum(1/x_i)``. A merged branch is
    switchable only if every constituent was.
    """
    labels = list(bus_labels)
    if len(set(labels)) != len(labels):
        dup = next(b for b in labels if labels.count(b) > 1)
        raise GridValidationError(f"duplicate bus id {dup}")
    index = {label: i for i, label in enumerate(labels)}
    merged: dict[tuple[int, int], list] = {}
    for k, (f, t, x) in enumerate(edges):
        if f not in index or t not in index:
            raise GridValidationError(f"branch {k} references unknown bus {f if f not in index else t}")
        if not x > 0:
            raise GridValidationError(f"branch {k} ({f}-{t}) has nonpositive reactance {x}")
        a, b = index[f], index[t]
        if a == b:
            raise GridValidationError(f"branch {k} is a self-loop at bus {f}")
        key = (min(a, b), max(a, b))
        sw = True if switchable is None else bool(switchable[k])
        if key in merged:
            entry = merged[key]
            entry[2] += 1.0 / x
            entry[3] = entry[3] and sw
        else:
            merged[key] = [a, b, 1.0 / x, sw]
    branches = tuple(
        Branch(i, a, b, 1.0 / y, sw) for i, (a, b, y, sw) in enumerate(merged.values())
    )
    if reference_label is None:
        ref = 0
    elif reference_label in index:
        ref = index[reference_label]
    else:
        raise GridValidationError(f"reference bus {reference_label} is not a valid bus id")
    names = names or [None] * len(labels)
    buses = tuple(Bus(i, names[i]) for i in range(len(labels)))
    return Grid(buses, branches, ref, tuple(labels))


def load_grid(case_text: str) -> Grid:
    """Parse a JSON case (``buses``, ``branches``, ``reference_bus``)."""
    return _read_json_case(case_text)[0]


def _read_json_case(case_text: str) -> tuple[Grid, int]:
    try:
        doc = json.loads(case_text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise CaseFormatError("case must be a JSON object")
    for key in ("buses", "branches"):
        if not isinstance(doc.get(key), list):
            raise CaseFormatError(f"missing or non-array key {key!r}")
    labels, names = [], []
    for i, b in enumerate(doc["buses"]):
        if not isinstance(b, dict) or not isinstance(b.get("id"), int):
            raise CaseFormatError(f"bus entry {i} needs an integer 'id'")
        labels.append(b["id"])
        names.append(b.get("name"))
    edges, flags = [], []
    for i, br in enumerate(doc["branches"]):
        try:
            edges.append((int(br["from"]), int(br["to"]), float(br["x"])))
        except (KeyError, TypeError, ValueError):
            raise CaseFormatError(f"branch entry {i} needs numeric 'from', 'to', 'x'") from None
        flags.append(bool(br.get("switchable", True)))
    ref = doc.get("reference_bus")
    if ref is not None and not isinstance(ref, int):
        raise CaseFormatError("reference_bus must be an integer bus id")
    return build_grid(labels, edges, ref, names, flags), len(edges)


_TABLE_RE = re.compile(r"mpc\.(bus|branch)\s*=\s*\[")
_CELL_RE = re.compile(r";|[^\s;,]+")


def parse_matpower(text: str) -> Grid:
    """Read bus ids, slack flag, branch endpoints and reactances from MATPOWER text.

    Every other column is ignored. Errors report the 1-based line and column.
    """
    return _read_matpower(text)[0]


def _read_matpower(text: str) -> tuple[Grid, int]:
    tables: dict[str, list[tuple[int, list[tuple[int, str]]]]] = {}
    current: str | None = None
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("%", 1)[0]
        start = 0
        if current is None:
            m = _TABLE_RE.search(line)
            if not m:
                continue
            current = m.group(1)
            tables[current] = []
            start = m.end()
        close = line.find("]", start)
        stop = len(line) if close < 0 else close
        # rows end at ';' or at end of line; cells keep their 1-based column
        row: list[tuple[int, str]] = []
        for tok in _CELL_RE.finditer(line, start, stop):
            if tok.group() == ";":
                if row:
                    tables[current].append((lineno, row))
                row = []
            else:
                row.append((tok.start() + 1, tok.group()))
        if row:
            tables[current].append((lineno, row))
        if close >= 0:
            current = None
    if current is not None:
        raise CaseFormatError(f"unterminated mpc.{current} table", len(lines))
    for name in ("bus", "branch"):
        if name not in tables:
            raise CaseFormatError(f"no mpc.{name} table found")

    def num(row: tuple[int, list[tuple[int, str]]], col: int, what: str) -> float:
        lineno, cells = row
        if col >= len(cells):
            raise CaseFormatError(
                f"{what} row has {len(cells)} columns, need at least {col + 1}", lineno
            )
        column, cell = cells[col]
        try:
            return float(cell)
        except ValueError:
            raise CaseFormatError(f"{what} column {col + 1}: not a number: {cell!r}", lineno, column) from None

    labels, ref = [], None
    for row in tables["bus"]:
        bus_id = num(row, 0, "bus")
        if not bus_id.is_integer():
            raise CaseFormatError(f"bus id {bus_id} is not an integer", row[0], row[1][0][0])
        labels.append(int(bus_id))
        if num(row, 1, "bus") == 3 and ref is None:
            ref = int(bus_id)
    edges = []
    for row in tables["branch"]:
        f, t, x = num(row, 0, "branch"), num(row, 1, "branch"), num(row, 3, "branch")
        edges.append((int(f), int(t), x))
    if ref is None and labels:
        ref = labels[0]
    return build_grid(labels, edges, ref), len(edges)


def read_case(text: str) -> tuple[Grid, int]:
    """Parse JSON or MATPOWER case text; also returns the raw branch-row count."""
    if text.lstrip().startswith("{"):
        return _read_json_case(text)
    return _read_matpower(text)


def load_case_file(path) -> Grid:
    """Load a JSON or MATPOWER case by sniffing the content."""
    with open(path, encoding="utf-8") as fh:
        return read_case(fh.read())[0]


def bundled_case(name: str) -> Grid:
    """One of the cases shipped in ``gridinfer/data`` (``case30``, ``case5_ring``)."""
    data = resources.files("gridinfer") / "data"
    for suffix in (".json", ".m"):
        res = data / f"{name}{suffix}"
        if res.is_file():
            return read_case(res.read_text(encoding="utf-8"))[0]
    raise FileNotFoundError(f"no bundled case named {name!r}")


def default_sensor_buses(grid: Grid, count: int) -> list[int]:
    """Pick ``count`` PMU buses: highest degree first, ties by lowest id.

    Equivalently drops the ``N - count`` lowest-degree buses.
    """
    if not 0 < count <= grid.n_buses:
        raise ValueError(f"sensor count must be in 1..{grid.n_buses}")
    deg = grid.degrees()
    order = sorted(range(grid.n_buses), key=lambda b: (-deg[b], b))
    return sorted(order[:count])
