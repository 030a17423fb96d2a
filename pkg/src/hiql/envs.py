"""Deterministic goal-reaching environments with exact shortest-path oracles.

States are integer cell indices ``0..num_states-1``. Goals live in the same
space. A move that would leave the map or enter a wall is a no-op, and the
goal cell is absorbing once reached.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "GoalEnv",
    "Chain",
    "Grid",
    "LEFT",
    "RIGHT",
    "UP",
    "DOWN",
    "GRID_LEFT",
    "GRID_RIGHT",
    "load_map",
    "parse_map",
    "builtin_map",
]

# chain actions
LEFT, RIGHT = 0, 1
# grid actions; ``up`` increases y
UP, DOWN, GRID_LEFT, GRID_RIGHT = 0, 1, 2, 3
_GRID_MOVES = {UP: (0, 1), DOWN: (0, -1), GRID_LEFT: (-1, 0), GRID_RIGHT: (1, 0)}


class GoalEnv:
    """A deterministic MDP given by a successor table ``next_state[s, a]``.

    Subclasses only need to supply the table (and, optionally, features). All
    oracles are derived from breadth-first search over the table.
    """

    action_names: tuple[str, ...] = ()

    def __init__(self, next_state: np.ndarray):
        next_state = np.asarray(next_state, dtype=np.int64)
        if next_state.ndim != 2:
            raise ValueError("next_state must be a (num_states, num_actions) table")
        n = next_state.shape[0]
        if next_state.size and (next_state.min() < 0 or next_state.max() >= n):
            raise ValueError("successor table references unknown states")
        self.next_state = next_state
        self.next_state.setflags(write=False)

    @property
    def num_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def num_actions(self) -> int:
        return self.next_state.shape[1]

    def step(self, state: int, action: int, goal: int | None = None) -> int:
        if not 0 <= int(action) < self.num_actions:
            raise ValueError(f"unknown action id {action!r} for {type(self).__name__}")
        if goal is not None and state == goal:
            return int(state)
        return int(self.next_state[state, action])

    def neighbors(self, state: int) -> frozenset[int]:
        return frozenset(int(x) for x in self.next_state[state])

    @cached_property
    def distances(self) -> np.ndarray:
        """All-pairs shortest-path step counts, ``-1`` where unreachable."""
        n = self.num_states
        dist = np.full((n, n), -1, dtype=np.int64)
        for src in range(n):
            row = dist[src]
            row[src] = 0
            queue = deque([src])
            while queue:
                u = queue.popleft()
                for v in self.next_state[u]:
                    if row[v] < 0:
                        row[v] = row[u] + 1
                        queue.append(v)
        dist.setflags(write=False)
        return dist

    def distance(self, s: int, g: int) -> int:
        d = int(self.distances[s, g])
        if d < 0:
            raise ValueError(f"goal {g} is unreachable from state {s}")
        return d

    @cached_property
    def diameter(self) -> int:
        return int(self.distances.max())

    def optimal_value(self, s: int, g: int, gamma: float = 1.0) -> float:
        """Optimal return under reward 0 at the goal and -1 elsewhere."""
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        d = self.distance(s, g)
        if gamma == 1.0:
            return -float(d)
        return -(1.0 - gamma**d) / (1.0 - gamma)

    def optimal_values(self, gamma: float = 1.0) -> np.ndarray:
        """Dense ``V*[s, g]`` table; unreachable pairs get ``-1/(1-gamma)``."""
        d = self.distances.astype(np.float64)
        if gamma == 1.0:
            if (d < 0).any():
                raise ValueError("unreachable pairs have no finite value at gamma=1")
            return -d
        v = -(1.0 - gamma**d) / (1.0 - gamma)
        v[d < 0] = -1.0 / (1.0 - gamma)
        return v

    def optimal_action_set(self, s: int, g: int) -> frozenset[int]:
        """Actions that strictly shorten the distance to ``g``.

        Returns the empty set iff ``s == g``; in a connected environment that is
        the only way to obtain it.
        """
        if s == g:
            return frozenset()
        here = self.distance(s, g)
        succ_d = self.distances[self.next_state[s], g]
        return frozenset(int(a) for a in np.flatnonzero((succ_d >= 0) & (succ_d < here)))

    @cached_property
    def optimal_action_mask(self) -> np.ndarray:
        """Boolean ``[s, g, a]`` mask of optimal actions (all False on s == g)."""
        d = self.distances
        succ = d[self.next_state]  # [s, a, g]
        mask = (succ >= 0) & (succ < d[:, None, :])
        mask = np.transpose(mask, (0, 2, 1)).copy()
        mask.setflags(write=False)
        return mask

    def features(self, states) -> np.ndarray:
        """Float feature matrix for function approximators (default: one-hot)."""
        states = np.asarray(states, dtype=np.int64)
        return np.eye(self.num_states)[states]

    @property
    def feature_dim(self) -> int:
        return self.features(np.zeros(1, dtype=np.int64)).shape[1]

    def spec_dict(self) -> dict:
        return {"kind": "table", "next_state": self.next_state.tolist()}

    def spec_hash(self) -> str:
        blob = json.dumps(self.spec_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Chain(GoalEnv):
    """1-D chain of ``length`` cells with left/right moves."""

    action_names = ("left", "right")

    def __init__(self, length: int):
        if int(length) < 3:
            raise ValueError("chain length must be at least 3")
        self.length = int(length)
        idx = np.arange(self.length)
        table = np.stack([np.maximum(idx - 1, 0), np.minimum(idx + 1, self.length - 1)], axis=1)
        super().__init__(table)

    def features(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        return (2.0 * states / (self.length - 1) - 1.0)[..., None]

    def spec_dict(self) -> dict:
        return {"kind": "chain", "length": self.length}

    def __repr__(self) -> str:
        return f"Chain(length={self.length})"


class Grid(GoalEnv):
    """Four-connected 2-D grid with wall cells.

    Free cells are indexed in row-major order of ``(y, x)``. Construction fails
    if the free cells are not mutually reachable.

    ``feature_kind`` selects the network input encoding: ``"xy"`` (coordinates
    scaled to [-1, 1]), ``"onehot"``, or ``"both"``.
    """

    action_names = ("up", "down", "left", "right")

    def __init__(self, width: int, height: int, walls=(), feature_kind: str = "xy"):
        width, height = int(width), int(height)
        if width < 1 or height < 1:
            raise ValueError("grid dimensions must be positive")
        walls = frozenset((int(x), int(y)) for x, y in walls)
        for x, y in walls:
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError(f"wall {(x, y)} lies outside the {width}x{height} grid")
        if feature_kind not in ("xy", "onehot", "both"):
            raise ValueError(f"unknown feature kind {feature_kind!r}")
        self.width, self.height, self.walls = width, height, walls
        self.feature_kind = feature_kind
        self.coords = [(x, y) for y in range(height) for x in range(width) if (x, y) not in walls]
        if not self.coords:
            raise ValueError("grid has no free cells")
        self._index = {c: i for i, c in enumerate(self.coords)}
        table = np.empty((len(self.coords), 4), dtype=np.int64)
        for i, (x, y) in enumerate(self.coords):
            for a, (dx, dy) in _GRID_MOVES.items():
                table[i, a] = self._index.get((x + dx, y + dy), i)
        super().__init__(table)
        self._check_connected()
        xy = np.asarray(self.coords, dtype=np.float64)
        scale = np.array([max(width - 1, 1), max(height - 1, 1)], dtype=np.float64)
        self._xy_features = 2.0 * xy / scale - 1.0

    def _check_connected(self) -> None:
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in self.next_state[u]:
                if int(v) not in seen:
                    seen.add(int(v))
                    queue.append(int(v))
        if len(seen) != self.num_states:
            stranded = self.coords[min(set(range(self.num_states)) - seen)]
            raise ValueError(f"free cells are not mutually reachable (e.g. {stranded})")

    def cell(self, xy) -> int:
        try:
            return self._index[(int(xy[0]), int(xy[1]))]
        except KeyError:
            raise ValueError(f"{tuple(xy)} is a wall or outside the grid") from None

    def coord(self, index: int) -> tuple[int, int]:
        return self.coords[index]

    def features(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        if self.feature_kind == "xy":
            return self._xy_features[states]
        onehot = np.eye(self.num_states)[states]
        if self.feature_kind == "onehot":
            return onehot
        return np.concatenate([self._xy_features[states], onehot], axis=-1)

    def spec_dict(self) -> dict:
        return {
            "kind": "grid",
            "width": self.width,
            "height": self.height,
            "walls": sorted(list(w) for w in self.walls),
        }

    def render(self, marks: dict[int, str] | None = None) -> str:
        marks = marks or {}
        rows = []
        for y in reversed(range(self.height)):
            row = []
            for x in range(self.width):
                if (x, y) in self.walls:
                    row.append("#")
                else:
                    row.append(marks.get(self._index[(x, y)], "."))
            rows.append("".join(row))
        return "\n".join(rows)

    def __repr__(self) -> str:
        return f"Grid({self.width}x{self.height}, {len(self.walls)} walls)"


def parse_map(text: str, feature_kind: str = "xy") -> Grid:
    """Build a grid from ``#``/``.`` rows; the first line is the top (largest y)."""
    lines = [ln.rstrip() for ln in text.strip("\n").splitlines()]
    lines = [ln for ln in lines if ln and not ln.lstrip().startswith(";")]
    if not lines:
        raise ValueError("empty map")
    width = len(lines[0])
    if any(len(ln) != width for ln in lines):
        raise ValueError("map rows must all have the same width")
    height = len(lines)
    walls = []
    for row, line in enumerate(lines):
        y = height - 1 - row
        for x, ch in enumerate(line):
            if ch == "#":
                walls.append((x, y))
            elif ch != ".":
                raise ValueError(f"unexpected map character {ch!r} at row {row}, column {x}")
    return Grid(width, height, walls, feature_kind=feature_kind)


_MAP_DIR = Path(__file__).with_name("maps")


def builtin_map(name: str) -> Path:
    path = _MAP_DIR / f"{name}.txt"
    if not path.exists():
        known = sorted(p.stem for p in _MAP_DIR.glob("*.txt"))
        raise ValueError(f"unknown built-in map {name!r}; known: {known}")
    return path


def load_map(spec: str | Path, feature_kind: str = "xy") -> GoalEnv:
    """Load an environment from a map path, a built-in map name, or ``chain:N``/``open:WxH``."""
    spec = str(spec)
    if spec.startswith("chain:"):
        return Chain(int(spec.split(":", 1)[1]))
    if spec.startswith("open:"):
        w, h = spec.split(":", 1)[1].lower().split("x")
        return Grid(int(w), int(h), feature_kind=feature_kind)
    path = Path(spec)
    if not path.exists():
        path = builtin_map(spec)
    return parse_map(path.read_text(), feature_kind=feature_kind)
