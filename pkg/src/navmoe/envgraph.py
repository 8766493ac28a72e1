"""Synthetic graph worlds: geometry, panoramic observations, task generation.

A world is a connected undirected graph of 3D-positioned nodes inside a
20 x 20 x 3 m box.  Observations are 36 views (12 heading sectors x 3
elevation buckets) of seeded unit-norm feature vectors; a node's landmark
categories perturb every view of that node, and a neighbor's landmarks
perturb the single view facing it, so category tokens are groundable.
Edges are placed so that no two neighbors of a node share a view slot,
keeping the one-neighbor-per-view invariant by construction.

Episodes pair a start state with an instruction at one of three language
granularities: fine (a direction token per reference edge plus terminator),
coarse (goal landmark category plus nearby context categories), zero (the
goal category token alone).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from heapq import heappop, heappush

import numpy as np

FEATURE_DIM = 32
N_HEADINGS = 12
N_ELEVATIONS = 3
N_VIEWS = N_HEADINGS * N_ELEVATIONS
ELEVATIONS = (-np.pi / 6, 0.0, np.pi / 6)
BOX_SIZE = (20.0, 20.0, 3.0)

VOCAB_SIZE = 64
TOKEN_EOS = 0
TOKEN_DIR_BASE = 1
TOKEN_LANDMARK_BASE = 9
N_CATEGORIES = 21
N_DIRECTIONS = 8
DIRECTION_NAMES = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")

GRANULARITIES = ("fine", "coarse", "zero")
TASK_IDS = {"fine": 0, "coarse": 1, "zero": 2}

_WORLD_SALT = 101
_FEATURE_SALT = 202
_LANDMARK_SALT = 303
_EPISODE_SALT = 404

_REFERENCE_EDGES = (3, 10)


def wrap_angle(a: float) -> float:
    """Normalize an angle to [0, 2*pi)."""
    return float(np.mod(a, 2.0 * np.pi))


def heading_sector(bearing: float) -> int:
    """Nearest of the 12 view headings (multiples of 30 degrees)."""
    step = 2.0 * np.pi / N_HEADINGS
    return int(np.floor(wrap_angle(bearing) / step + 0.5)) % N_HEADINGS


def elevation_bucket(angle: float) -> int:
    return int(np.argmin([abs(angle - e) for e in ELEVATIONS]))


def view_index(bearing: float, elev_angle: float) -> int:
    return elevation_bucket(elev_angle) * N_HEADINGS + heading_sector(bearing)


def view_heading(idx: int) -> float:
    return (idx % N_HEADINGS) * 2.0 * np.pi / N_HEADINGS


def view_elevation(idx: int) -> float:
    return ELEVATIONS[idx // N_HEADINGS]


def direction_token(bearing: float) -> int:
    """8-way direction token for an edge bearing, sectors centered on E, NE, ..."""
    step = 2.0 * np.pi / N_DIRECTIONS
    sector = int(np.floor(wrap_angle(bearing) / step + 0.5)) % N_DIRECTIONS
    return TOKEN_DIR_BASE + sector


def landmark_token(category: int) -> int:
    if not 0 <= category < N_CATEGORIES:
        raise ValueError(f"landmark category {category} outside 0..{N_CATEGORIES - 1}")
    return TOKEN_LANDMARK_BASE + category


@dataclass(frozen=True)
class AgentState:
    node: int
    heading: float
    elevation: float = 0.0


@dataclass(frozen=True, eq=False)
class Observation:
    """36 view feature rows plus the adjacent node visible in each view."""

    views: np.ndarray
    navigable: tuple

    def view_of(self, node_id: int) -> int:
        return self.navigable.index(node_id)


@dataclass(frozen=True)
class Instruction:
    tokens: tuple
    granularity: str
    goal: int
    reference_path: tuple

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("instruction tokens must be nonempty")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "zero" and len(self.tokens) != 1:
            raise ValueError("zero-granularity instructions are a single token")
        for t in self.tokens:
            if not 0 <= t < VOCAB_SIZE:
                raise ValueError(f"token {t} outside vocabulary")

    @property
    def task_id(self) -> int:
        return TASK_IDS[self.granularity]


class NavGraph:
    """Connected undirected graph with positions, edge lengths, landmarks."""

    def __init__(self, positions: dict[int, np.ndarray], edges, landmarks: dict[int, list[int]],
                 world_seed: int = 0):
        self.positions = {int(n): np.asarray(p, dtype=np.float64) for n, p in positions.items()}
        self.landmarks = {int(n): sorted(int(c) for c in cats)
                          for n, cats in landmarks.items() if cats}
        self.world_seed = int(world_seed)
        self.edges: set[tuple[int, int]] = set()
        adj: dict[int, set[int]] = {n: set() for n in self.positions}
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            if a not in self.positions or b not in self.positions:
                raise ValueError(f"edge ({a},{b}) references unknown node")
            self.edges.add((min(a, b), max(a, b)))
            adj[a].add(b)
            adj[b].add(a)
        self._adj = {n: tuple(sorted(nbs)) for n, nbs in adj.items()}
        for n in self.landmarks:
            if n not in self.positions:
                raise ValueError(f"landmark on unknown node {n}")
        self._check_connected()
        self._dijkstra_cache: dict[int, tuple[dict, dict]] = {}
        self._obs_cache: dict[int, Observation] = {}

    def _check_connected(self) -> None:
        nodes = list(self.positions)
        if len(nodes) < 2:
            raise ValueError("graph needs at least 2 nodes")
        seen = {nodes[0]}
        stack = [nodes[0]]
        while stack:
            for nb in self._adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != len(nodes):
            raise ValueError("graph is not connected")

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.positions)

    def neighbors(self, node: int) -> tuple:
        return self._adj[node]

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def edge_length(self, a: int, b: int) -> float:
        if not self.has_edge(a, b):
            raise ValueError(f"({a},{b}) is not an edge")
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def bearing(self, a: int, b: int) -> float:
        d = self.positions[b] - self.positions[a]
        return wrap_angle(np.arctan2(d[1], d[0]))

    def elevation_angle(self, a: int, b: int) -> float:
        d = self.positions[b] - self.positions[a]
        return float(np.arctan2(d[2], np.hypot(d[0], d[1])))

    def _dijkstra(self, source: int):
        """Shortest paths from source; equal-length ties pick the
        lexicographically smallest node sequence."""
        cached = self._dijkstra_cache.get(source)
        if cached is not None:
            return cached
        dist: dict[int, float] = {}
        best: dict[int, tuple] = {}
        heap: list[tuple[float, tuple]] = [(0.0, (source,))]
        while heap:
            d, path = heappop(heap)
            node = path[-1]
            if node in dist:
                continue
            dist[node] = d
            best[node] = path
            for nb in self._adj[node]:
                if nb not in dist:
                    heappush(heap, (d + self.edge_length(node, nb), path + (nb,)))
        self._dijkstra_cache[source] = (dist, best)
        return dist, best

    def shortest_path(self, a: int, b: int) -> tuple[list[int], float]:
        if a not in self.positions or b not in self.positions:
            raise ValueError(f"unknown node in ({a},{b})")
        dist, best = self._dijkstra(a)
        return list(best[b]), dist[b]

    def geodesic(self, a: int, b: int) -> float:
        return self.shortest_path(a, b)[1]


# -- observations ---------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _base_feature(world_seed: int, node: int, view: int) -> np.ndarray:
    rng = np.random.default_rng([_FEATURE_SALT, world_seed, node, view])
    return _unit(rng.standard_normal(FEATURE_DIM))


_LM_CACHE: dict[int, np.ndarray] = {}


def landmark_embedding(category: int) -> np.ndarray:
    """Unit-norm category vector, shared across worlds so categories transfer."""
    emb = _LM_CACHE.get(category)
    if emb is None:
        rng = np.random.default_rng([_LANDMARK_SALT, category])
        emb = _unit(rng.standard_normal(FEATURE_DIM))
        _LM_CACHE[category] = emb
    return emb


def observe(g: NavGraph, s: AgentState) -> Observation:
    """36 deterministic view features; each neighbor marks exactly one view.

    A neighbor's landmarks perturb the view facing it; the current node's own
    landmarks perturb all 36 views (standing at a landmark is observable).
    """
    if s.node not in g.positions:
        raise ValueError(f"unknown node {s.node}")
    cached = g._obs_cache.get(s.node)
    if cached is not None:
        return cached
    views = np.stack([_base_feature(g.world_seed, s.node, v) for v in range(N_VIEWS)])
    navigable: list = [None] * N_VIEWS
    for nb in g.neighbors(s.node):
        idx = view_index(g.bearing(s.node, nb), g.elevation_angle(s.node, nb))
        if navigable[idx] is not None:
            raise ValueError(f"view collision at node {s.node}: "
                             f"{navigable[idx]} and {nb} share view {idx}")
        navigable[idx] = nb
        for cat in g.landmarks.get(nb, ()):
            views[idx] += landmark_embedding(cat)
    for cat in g.landmarks.get(s.node, ()):
        views += landmark_embedding(cat)
    views.setflags(write=False)
    obs = Observation(views=views, navigable=tuple(navigable))
    g._obs_cache[s.node] = obs
    return obs


def transition(g: NavGraph, s: AgentState, target: int) -> AgentState:
    """Move to an adjacent node (heading = edge bearing) or stop in place."""
    if target == s.node:
        return AgentState(node=s.node, heading=s.heading, elevation=0.0)
    if not g.has_edge(s.node, target):
        raise ValueError(f"{target} is not adjacent to {s.node}")
    return AgentState(node=target, heading=g.bearing(s.node, target), elevation=0.0)


# -- world generation -------------------------------------------------------------


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def _edge_slots(positions, a, b):
    d = positions[b] - positions[a]
    fwd = view_index(wrap_angle(np.arctan2(d[1], d[0])),
                     float(np.arctan2(d[2], np.hypot(d[0], d[1]))))
    rev = view_index(wrap_angle(np.arctan2(-d[1], -d[0])),
                     float(np.arctan2(-d[2], np.hypot(d[0], d[1]))))
    return fwd, rev


def generate_world(seed: int, n_nodes: int, mean_degree: float,
                   n_landmarks: int) -> NavGraph:
    """Random connected world: EMST edges plus shortest extra edges until the
    mean degree is met, skipping any edge that would put two neighbors of a
    node in the same view slot."""
    if n_nodes < 2:
        raise ValueError("n_nodes must be >= 2")
    if mean_degree < 2:
        raise ValueError("mean_degree must be >= 2")
    if not 0 <= n_landmarks <= n_nodes:
        raise ValueError("n_landmarks must be in [0, n_nodes]")
    for attempt in range(50):
        g = _try_generate(seed, n_nodes, mean_degree, n_landmarks, attempt)
        if g is not None:
            return g
    raise ValueError(f"could not build a connected world for seed={seed}, "
                     f"n_nodes={n_nodes}")


def _try_generate(seed, n_nodes, mean_degree, n_landmarks, attempt):
    rng = np.random.default_rng([_WORLD_SALT, seed, attempt])
    box = np.array(BOX_SIZE)
    positions = {i: rng.uniform(0.0, 1.0, 3) * box for i in range(n_nodes)}

    candidates = sorted(
        (float(np.linalg.norm(positions[a] - positions[b])), a, b)
        for a in range(n_nodes) for b in range(a + 1, n_nodes))
    used_slots: dict[int, set] = {i: set() for i in range(n_nodes)}
    uf = _UnionFind(range(n_nodes))
    edges: list[tuple[int, int]] = []

    def try_add(a, b) -> bool:
        fwd, rev = _edge_slots(positions, a, b)
        if fwd in used_slots[a] or rev in used_slots[b]:
            return False
        used_slots[a].add(fwd)
        used_slots[b].add(rev)
        edges.append((a, b))
        uf.union(a, b)
        return True

    in_tree = set()
    for _, a, b in candidates:
        if uf.find(a) != uf.find(b) and try_add(a, b):
            in_tree.add((a, b))
    if len({uf.find(i) for i in range(n_nodes)}) != 1:
        return None
    for _, a, b in candidates:
        if 2.0 * len(edges) / n_nodes >= mean_degree:
            break
        if (a, b) not in in_tree and not any(e == (a, b) for e in edges):
            try_add(a, b)

    landmark_nodes = sorted(rng.choice(n_nodes, size=n_landmarks, replace=False))
    if n_landmarks <= N_CATEGORIES:
        cats = rng.permutation(N_CATEGORIES)[:n_landmarks]
    else:
        cats = rng.integers(0, N_CATEGORIES, size=n_landmarks)
    landmarks = {int(n): [int(c)] for n, c in zip(landmark_nodes, cats)}
    return NavGraph(positions, edges, landmarks, world_seed=seed)


# -- episodes ----------------------------------------------------------------------


def generate_episode(g: NavGraph, seed: int, granularity: str) -> tuple[AgentState, Instruction]:
    """Sample a start state and instruction whose reference path is a shortest
    path of 3..10 edges; coarse/zero goals carry a landmark."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    rng = np.random.default_rng([_EPISODE_SALT, g.world_seed, seed])
    nodes = g.node_ids
    if granularity == "fine":
        goal_pool = nodes
    else:
        goal_pool = sorted(g.landmarks)
        if not goal_pool:
            raise ValueError(f"{granularity} episodes need at least one landmark")
    lo, hi = _REFERENCE_EDGES
    for _ in range(500):
        goal = int(goal_pool[rng.integers(len(goal_pool))])
        start = int(nodes[rng.integers(len(nodes))])
        if start == goal:
            continue
        path, _ = g.shortest_path(start, goal)
        if lo <= len(path) - 1 <= hi:
            break
    else:
        raise ValueError("graph too small for a reference path of >= 3 edges")

    if granularity == "fine":
        tokens = [direction_token(g.bearing(a, b)) for a, b in zip(path, path[1:])]
        tokens.append(TOKEN_EOS)
    elif granularity == "coarse":
        goal_cat = g.landmarks[goal][0]
        others = sorted((g.geodesic(goal, n), n) for n in g.landmarks if n != goal)
        n_ctx = min(int(rng.integers(2, 5)), len(others))
        context = [landmark_token(g.landmarks[n][0]) for _, n in others[:n_ctx]]
        tokens = [landmark_token(goal_cat)] + context + [TOKEN_EOS]
    else:
        tokens = [landmark_token(g.landmarks[goal][0])]

    start_state = AgentState(node=path[0], heading=float(rng.uniform(0.0, 2.0 * np.pi)))
    instr = Instruction(tokens=tuple(tokens), granularity=granularity,
                        goal=goal, reference_path=tuple(path))
    return start_state, instr


# -- serialization -----------------------------------------------------------------


def save_world(path: str, g: NavGraph) -> None:
    doc = {
        "nodes": [{"id": n, "pos": [float(x) for x in g.positions[n]]}
                  for n in g.node_ids],
        "edges": sorted([a, b] for a, b in g.edges),
        "landmarks": {str(n): g.landmarks[n] for n in sorted(g.landmarks)},
        "seed": g.world_seed,
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_world(path: str) -> NavGraph:
    with open(path) as f:
        doc = json.load(f)
    positions = {int(e["id"]): np.array(e["pos"], dtype=np.float64) for e in doc["nodes"]}
    landmarks = {int(n): list(cats) for n, cats in doc.get("landmarks", {}).items()}
    return NavGraph(positions, doc["edges"], landmarks, world_seed=doc.get("seed", 0))


def save_episodes(path: str, episodes) -> None:
    with open(path, "w") as f:
        for state, instr in episodes:
            f.write(json.dumps({
                "start": state.node,
                "heading": state.heading,
                "tokens": list(instr.tokens),
                "granularity": instr.granularity,
                "goal": instr.goal,
                "reference_path": list(instr.reference_path),
            }, sort_keys=True) + "\n")


def load_episodes(path: str) -> list[tuple[AgentState, Instruction]]:
    episodes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            state = AgentState(node=int(doc["start"]), heading=float(doc["heading"]))
            instr = Instruction(tokens=tuple(int(t) for t in doc["tokens"]),
                                granularity=doc["granularity"],
                                goal=int(doc["goal"]),
                                reference_path=tuple(int(n) for n in doc["reference_path"]))
            episodes.append((state, instr))
    return episodes
