"""Grid road networks and signalized-intersection geometry.

A network is a rectangular lattice of nodes. Interior nodes carry traffic
signals; the boundary ring is unsignalized and acts as source/sink territory
plus a bypass route. Columns are lettered west to east (A, B, ...), rows are
numbered south to north starting at 0, so node "D3" sits in column D, row 3.
A directed edge is named by concatenating its endpoint names ("D3C3" runs
from D3 westward to C3). Every edge has 3 lanes: lane 0 turns left, lane 1
goes straight, lane 2 goes straight or right.

Turning movements at an intersection are modeled as chords across a unit
square, entry and exit points offset to the driver's right. Two movements
conflict exactly when their chords properly cross; merges and diverges
(shared endpoints) are compatible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum


class Approach(Enum):
    """Compass side a vehicle enters an intersection from."""

    N = "N"
    E = "E"
    S = "S"
    W = "W"


class Turn(Enum):
    LEFT = "left"
    STRAIGHT = "straight"
    RIGHT = "right"


# A movement is "vehicles from this approach making this turn".
Movement = tuple[Approach, Turn]

# Unit compass vectors, y pointing north.
_COMPASS = {
    Approach.N: (0.0, 1.0),
    Approach.E: (1.0, 0.0),
    Approach.S: (0.0, -1.0),
    Approach.W: (-1.0, 0.0),
}

# Lateral offset of entry/exit points toward the driver's right, as a
# fraction of the half-width of the intersection box.
_LANE_OFFSET = 0.3


def _heading(approach: Approach) -> tuple[float, float]:
    """Travel direction of vehicles arriving from `approach`."""
    dx, dy = _COMPASS[approach]
    return (-dx, -dy)


def _turn_heading(h: tuple[float, float], turn: Turn) -> tuple[float, float]:
    x, y = h
    if turn is Turn.STRAIGHT:
        return h
    if turn is Turn.LEFT:
        return (-y, x)
    return (y, -x)


def _right_of(h: tuple[float, float]) -> tuple[float, float]:
    x, y = h
    return (y, -x)


def movement_chord(m: Movement) -> tuple[tuple[float, float], tuple[float, float]]:
    """Entry and exit points of a movement on the [-1, 1]^2 intersection box."""
    approach, turn = m
    h_in = _heading(approach)
    h_out = _turn_heading(h_in, turn)
    r_in = _right_of(h_in)
    r_out = _right_of(h_out)
    entry = (-h_in[0] + _LANE_OFFSET * r_in[0], -h_in[1] + _LANE_OFFSET * r_in[1])
    exit_ = (h_out[0] + _LANE_OFFSET * r_out[0], h_out[1] + _LANE_OFFSET * r_out[1])
    return entry, exit_


def conflicting(a: Movement, b: Movement) -> bool:
    """True when the two movements cannot safely share a green.

    Same-approach movements never conflict (parallel lanes), and neither do
    movements that merely merge into or diverge from the same point. Only a
    proper interior crossing of the chords counts.
    """
    if a == b or a[0] is b[0]:
        return False
    (p0, p1) = movement_chord(a)
    (q0, q1) = movement_chord(b)
    return _proper_crossing(p0, p1, q0, q1)


def _proper_crossing(p0, p1, q0, q1, tol: float = 1e-9) -> bool:
    # Solve p0 + t*(p1-p0) == q0 + u*(q1-q0); crossing must be interior to
    # both segments. Parallel chords at distinct offsets never cross.
    rx, ry = p1[0] - p0[0], p1[1] - p0[1]
    sx, sy = q1[0] - q0[0], q1[1] - q0[1]
    denom = rx * sy - ry * sx
    wx, wy = q0[0] - p0[0], q0[1] - p0[1]
    if abs(denom) < tol:
        return False
    t = (wx * sy - wy * sx) / denom
    u = (wx * ry - wy * rx) / denom
    return tol < t < 1.0 - tol and tol < u < 1.0 - tol


ALL_MOVEMENTS: tuple[Movement, ...] = tuple(
    (a, t) for a in Approach for t in Turn
)

# The 8 signal-controlled movements (rights are always permitted).
CONTROLLED_MOVEMENTS: tuple[Movement, ...] = tuple(
    (a, t) for a in Approach for t in (Turn.LEFT, Turn.STRAIGHT)
)


@dataclass(frozen=True)
class PhaseTable:
    """Signal phase scheme shared by every signalized intersection.

    `phases[k]` holds the left/straight movements given green in phase k;
    right turns are green in every phase and are therefore kept implicit.
    A phase change first runs a yellow interval of `yellow_s` for movements
    losing their green; a phase must be held at least `min_hold_s` before
    the next change is accepted.
    """

    phases: tuple[frozenset[Movement], ...]
    names: tuple[str, ...]
    yellow_s: float = 3.0
    min_hold_s: float = 10.0

    def __post_init__(self) -> None:
        if len(self.phases) != len(self.names):
            raise ValueError("one name per phase required")
        if self.yellow_s < 0 or self.min_hold_s < 0:
            raise ValueError("yellow_s and min_hold_s must be nonnegative")
        for k, movs in enumerate(self.phases):
            for m in movs:
                if m[1] is Turn.RIGHT:
                    raise ValueError(f"phase {k} lists a right turn; rights are implicit")

    def allows(self, phase: int, m: Movement) -> bool:
        if m[1] is Turn.RIGHT:
            return True
        return m in self.phases[phase]

    def permitted(self, phase: int) -> frozenset[Movement]:
        """Full permitted set of a phase, right turns included."""
        rights = frozenset((a, Turn.RIGHT) for a in Approach)
        return self.phases[phase] | rights

    @property
    def n_phases(self) -> int:
        return len(self.phases)


def default_phase_table(yellow_s: float = 3.0, min_hold_s: float = 10.0) -> PhaseTable:
    """The 8-phase scheme: paired straights, paired lefts, then one
    all-green phase per approach. Every controlled movement appears in
    exactly two phases."""
    N, E, S, W = Approach.N, Approach.E, Approach.S, Approach.W
    L, T = Turn.LEFT, Turn.STRAIGHT
    scheme = [
        ("ns-straight", [(N, T), (S, T)]),
        ("ns-left", [(N, L), (S, L)]),
        ("ew-straight", [(E, T), (W, T)]),
        ("ew-left", [(E, L), (W, L)]),
        ("n-all", [(N, T), (N, L)]),
        ("e-all", [(E, T), (E, L)]),
        ("s-all", [(S, T), (S, L)]),
        ("w-all", [(W, T), (W, L)]),
    ]
    return PhaseTable(
        phases=tuple(frozenset(movs) for _, movs in scheme),
        names=tuple(name for name, _ in scheme),
        yellow_s=yellow_s,
        min_hold_s=min_hold_s,
    )


@dataclass(frozen=True)
class Node:
    name: str
    row: int
    col: int
    signalized: bool


@dataclass(frozen=True)
class Edge:
    id: str
    frm: str
    to: str
    length_m: float
    lanes: int = 3


def column_letter(col: int) -> str:
    """0 -> A, 25 -> Z, 26 -> AA (spreadsheet style)."""
    if col < 0:
        raise ValueError("column index must be nonnegative")
    out = ""
    col += 1
    while col:
        col, r = divmod(col - 1, 26)
        out = chr(ord("A") + r) + out
    return out


def node_name(row: int, col: int) -> str:
    return f"{column_letter(col)}{row}"


@dataclass
class RoadNetwork:
    rows: int
    cols: int
    spacing_m: float
    nodes: dict[str, Node]
    edges: dict[str, Edge]
    in_edges: dict[str, tuple[str, ...]] = field(default_factory=dict)
    out_edges: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.in_edges:
            ins: dict[str, list[str]] = {n: [] for n in self.nodes}
            outs: dict[str, list[str]] = {n: [] for n in self.nodes}
            for e in self.edges.values():
                ins[e.to].append(e.id)
                outs[e.frm].append(e.id)
            self.in_edges = {n: tuple(sorted(v)) for n, v in ins.items()}
            self.out_edges = {n: tuple(sorted(v)) for n, v in outs.items()}

    @property
    def signal_nodes(self) -> tuple[str, ...]:
        """Signalized node names in geographic raster order: north to south,
        then west to east (matches the global observation matrix layout)."""
        named = [
            (self.rows - 2 - n.row, n.col, n.name)
            for n in self.nodes.values()
            if n.signalized
        ]
        return tuple(name for _, _, name in sorted(named))

    @property
    def boundary_nodes(self) -> tuple[str, ...]:
        return tuple(sorted(n.name for n in self.nodes.values() if not n.signalized))

    @property
    def interior_shape(self) -> tuple[int, int]:
        """(rows, cols) of the signalized interior."""
        return (self.rows - 2, self.cols - 2)

    def grid_position(self, name: str) -> tuple[int, int]:
        """Raster position of a signalized node: (0, 0) is the northwest
        interior corner, i grows southward, j eastward."""
        n = self.nodes[name]
        if not n.signalized:
            raise ValueError(f"{name} is not a signalized node")
        return (self.rows - 2 - n.row, n.col - 1)

    def reverse_edge(self, edge_id: str) -> str:
        e = self.edges[edge_id]
        return e.to + e.frm

    def approach_of(self, edge_id: str) -> Approach:
        """Which compass side of the downstream node this edge arrives from."""
        e = self.edges[edge_id]
        a, b = self.nodes[e.frm], self.nodes[e.to]
        if a.row > b.row:
            return Approach.N
        if a.row < b.row:
            return Approach.S
        if a.col > b.col:
            return Approach.E
        return Approach.W

    def turn_between(self, edge_in: str, edge_out: str) -> Turn | None:
        """Turn that continues from edge_in onto edge_out, or None for a
        U-turn / disconnected pair."""
        ei, eo = self.edges[edge_in], self.edges[edge_out]
        if ei.to != eo.frm or eo.to == ei.frm:
            return None
        h_in = _heading(self.approach_of(edge_in))
        a2, b2 = self.nodes[eo.frm], self.nodes[eo.to]
        h_out = (
            float((b2.col > a2.col) - (b2.col < a2.col)),
            float((b2.row > a2.row) - (b2.row < a2.row)),
        )
        for turn in Turn:
            if _turn_heading(h_in, turn) == h_out:
                return turn
        return None

    def incoming_by_approach(self, node: str) -> dict[Approach, str]:
        return {self.approach_of(eid): eid for eid in self.in_edges[node]}

    def next_edges(self, edge_id: str) -> tuple[str, ...]:
        """Outgoing edges continuing from edge_id, U-turn excluded."""
        e = self.edges[edge_id]
        return tuple(o for o in self.out_edges[e.to] if self.edges[o].to != e.frm)


def build_grid(rows: int, cols: int, spacing_m: float = 200.0) -> RoadNetwork:
    """Build a full rows x cols lattice with bidirectional edges between
    every pair of adjacent nodes. Needs at least one interior (signalized)
    node, so rows and cols must both be >= 3."""
    if rows < 3 or cols < 3:
        raise ValueError(
            f"grid {rows}x{cols} has no interior nodes to signalize; need rows>=3 and cols>=3"
        )
    if spacing_m <= 0:
        raise ValueError("spacing_m must be positive")
    nodes: dict[str, Node] = {}
    for row in range(rows):
        for col in range(cols):
            name = node_name(row, col)
            signal = 0 < row < rows - 1 and 0 < col < cols - 1
            nodes[name] = Node(name, row, col, signal)
    edges: dict[str, Edge] = {}
    for row in range(rows):
        for col in range(cols):
            a = node_name(row, col)
            for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                r2, c2 = row + dr, col + dc
                if 0 <= r2 < rows and 0 <= c2 < cols:
                    b = node_name(r2, c2)
                    edges[a + b] = Edge(a + b, a, b, spacing_m)
    return RoadNetwork(rows, cols, spacing_m, nodes, dict(sorted(edges.items())))


def network_to_json(net: RoadNetwork, table: PhaseTable) -> str:
    doc = {
        "rows": net.rows,
        "cols": net.cols,
        "spacing_m": net.spacing_m,
        "nodes": [
            {"name": n.name, "row": n.row, "col": n.col, "signalized": n.signalized}
            for n in sorted(net.nodes.values(), key=lambda n: n.name)
        ],
        "edges": [
            {"id": e.id, "from": e.frm, "to": e.to, "length_m": e.length_m, "lanes": e.lanes}
            for e in net.edges.values()
        ],
        "phases": {
            "names": list(table.names),
            "movements": [
                sorted(f"{a.value}:{t.value}" for a, t in movs) for movs in table.phases
            ],
            "yellow_s": table.yellow_s,
            "min_hold_s": table.min_hold_s,
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def network_from_json(text: str) -> tuple[RoadNetwork, PhaseTable]:
    doc = json.loads(text)
    nodes = {
        d["name"]: Node(d["name"], d["row"], d["col"], d["signalized"])
        for d in doc["nodes"]
    }
    edges = {
        d["id"]: Edge(d["id"], d["from"], d["to"], d["length_m"], d["lanes"])
        for d in doc["edges"]
    }
    net = RoadNetwork(doc["rows"], doc["cols"], doc["spacing_m"], nodes, edges)
    ph = doc["phases"]
    phases = tuple(
        frozenset((Approach(s.split(":")[0]), Turn(s.split(":")[1])) for s in movs)
        for movs in ph["movements"]
    )
    table = PhaseTable(phases, tuple(ph["names"]), ph["yellow_s"], ph["min_hold_s"])
    return net, table
