"""World generator and navigation graph tests.

Shortest paths are checked against a brute-force simple-path enumerator,
observations against their construction rules, and generated worlds against
the connectivity / view-slot / landmark invariants they promise."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import navmoe.envgraph as env


def line_world(n=4, spacing=2.0, landmarks=None):
    """Nodes on the x axis, consecutive edges; handy for hand calculations."""
    positions = {i: np.array([i * spacing, 0.0, 0.0]) for i in range(n)}
    edges = [(i, i + 1) for i in range(n - 1)]
    return env.NavGraph(positions, edges, landmarks or {}, world_seed=1)


def all_simple_paths(g, a, b):
    """Exhaustive DFS over simple paths, the oracle for shortest_path."""
    out = []

    def walk(node, seen, acc, cost):
        if node == b:
            out.append((cost, list(acc)))
            return
        for nxt in g.neighbors(node):
            if nxt in seen:
                continue
            walk(nxt, seen | {nxt}, acc + [nxt], cost + g.edge_length(node, nxt))

    walk(a, {a}, [a], 0.0)
    return out


# ------------------------------------------------------------------ geometry

def test_wrap_angle_range():
    for a in (-9.0, -np.pi, 0.0, np.pi, 7.5, 100.0):
        w = env.wrap_angle(a)
        assert 0.0 <= w < 2.0 * np.pi
        assert np.isclose(math.sin(w), math.sin(a), atol=1e-12)
        assert np.isclose(math.cos(w), math.cos(a), atol=1e-12)


def test_heading_sector_nearest_30_degrees():
    assert env.heading_sector(0.0) == 0
    assert env.heading_sector(np.pi / 6) == 1
    assert env.heading_sector(np.pi / 6 + 0.1) == 1
    assert env.heading_sector(-np.pi / 6) == 11
    assert env.heading_sector(2 * np.pi) == 0


def test_elevation_bucket_nearest():
    assert env.elevation_bucket(-0.6) == 0
    assert env.elevation_bucket(-0.01) == 1
    assert env.elevation_bucket(0.0) == 1
    assert env.elevation_bucket(0.4) == 2


def test_view_index_layout():
    # row-major: elevation bucket * 12 + heading sector
    assert env.view_index(0.0, 0.0) == 1 * 12 + 0
    assert env.view_index(np.pi / 2, np.pi / 6) == 2 * 12 + 3
    for idx in range(env.N_VIEWS):
        assert env.view_index(env.view_heading(idx), env.view_elevation(idx)) == idx


def test_direction_token_octants():
    assert env.direction_token(0.0) == env.TOKEN_DIR_BASE  # east
    assert env.direction_token(np.pi / 2) == env.TOKEN_DIR_BASE + 2  # north
    assert env.direction_token(np.pi) == env.TOKEN_DIR_BASE + 4  # west
    assert env.direction_token(-np.pi / 2) == env.TOKEN_DIR_BASE + 6  # south


def test_landmark_token_range():
    assert env.landmark_token(0) == env.TOKEN_LANDMARK_BASE
    top = env.landmark_token(env.N_CATEGORIES - 1)
    assert top < env.VOCAB_SIZE
    with pytest.raises(ValueError):
        env.landmark_token(env.N_CATEGORIES)
    with pytest.raises(ValueError):
        env.landmark_token(-1)


# --------------------------------------------------------------------- graph

def test_graph_requires_two_nodes():
    with pytest.raises(ValueError):
        env.NavGraph({0: np.zeros(3)}, [], {})


def test_graph_rejects_disconnected():
    positions = {i: np.array([float(i), 0.0, 0.0]) for i in range(4)}
    with pytest.raises(ValueError):
        env.NavGraph(positions, [(0, 1), (2, 3)], {})


def test_graph_rejects_self_loop():
    positions = {0: np.zeros(3), 1: np.array([1.0, 0.0, 0.0])}
    with pytest.raises(ValueError):
        env.NavGraph(positions, [(0, 0), (0, 1)], {})


def test_edge_length_is_euclidean():
    g = line_world(3, spacing=2.5)
    assert g.edge_length(0, 1) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        g.edge_length(0, 2)


def test_bearing_and_elevation():
    positions = {0: np.zeros(3), 1: np.array([1.0, 1.0, 0.0]),
                 2: np.array([0.0, 0.0, 1.0]), 3: np.array([1.0, 0.0, 0.0])}
    g = env.NavGraph(positions, [(0, 1), (0, 2), (0, 3)], {})
    assert g.bearing(0, 1) == pytest.approx(np.pi / 4)
    assert g.elevation_angle(0, 3) == pytest.approx(0.0)
    assert g.elevation_angle(0, 2) == pytest.approx(np.pi / 2)


def test_shortest_path_trivial_and_line():
    g = line_world(4, spacing=2.0)
    assert g.shortest_path(2, 2) == ([2], 0.0)
    path, dist = g.shortest_path(0, 3)
    assert path == [0, 1, 2, 3]
    assert dist == pytest.approx(6.0)
    assert g.geodesic(3, 0) == pytest.approx(6.0)


def test_shortest_path_tie_prefers_smaller_node():
    # square: 0 -> 3 via 1 or via 2 at identical cost
    positions = {0: np.array([0.0, 0.0, 0.0]), 1: np.array([1.0, 0.0, 0.0]),
                 2: np.array([0.0, 1.0, 0.0]), 3: np.array([1.0, 1.0, 0.0])}
    g = env.NavGraph(positions, [(0, 1), (0, 2), (1, 3), (2, 3)], {})
    path, _ = g.shortest_path(0, 3)
    assert path == [0, 1, 3]


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_shortest_path_matches_enumeration(seed):
    g = env.generate_world(seed=seed, n_nodes=7, mean_degree=3, n_landmarks=2)
    nodes = g.node_ids
    rng = np.random.default_rng(seed)
    for _ in range(4):
        a, b = rng.choice(nodes, size=2, replace=False)
        path, dist = g.shortest_path(int(a), int(b))
        best = min(all_simple_paths(g, int(a), int(b)))
        assert dist == pytest.approx(best[0], abs=1e-9)
        assert path[0] == a and path[-1] == b
        got = sum(g.edge_length(u, v) for u, v in zip(path, path[1:]))
        assert got == pytest.approx(dist, abs=1e-12)


def test_geodesic_symmetry():
    g = env.generate_world(seed=5, n_nodes=12, mean_degree=3, n_landmarks=3)
    nodes = g.node_ids
    for a, b in itertools.islice(itertools.combinations(nodes, 2), 20):
        assert g.geodesic(a, b) == pytest.approx(g.geodesic(b, a), abs=1e-12)


# -------------------------------------------------------------- observations

def test_observe_views_shape_and_navigable():
    g = env.generate_world(seed=2, n_nodes=10, mean_degree=3, n_landmarks=2)
    node = g.node_ids[0]
    obs = env.observe(g, env.AgentState(node=node, heading=0.0))
    assert obs.views.shape == (env.N_VIEWS, env.FEATURE_DIM)
    present = [n for n in obs.navigable if n is not None]
    assert sorted(present) == sorted(g.neighbors(node))
    for view, n in enumerate(obs.navigable):
        if n is None:
            continue
        assert obs.view_of(n) == view
        assert env.view_index(g.bearing(node, n), g.elevation_angle(node, n)) == view


def test_observe_is_deterministic_and_cached():
    g = env.generate_world(seed=3, n_nodes=8, mean_degree=3, n_landmarks=2)
    s = env.AgentState(node=g.node_ids[1], heading=1.0)
    o1, o2 = env.observe(g, s), env.observe(g, s)
    assert o1 is o2  # per-node cache
    assert not o1.views.flags.writeable


def test_neighbor_landmark_perturbs_only_facing_view():
    positions = {0: np.zeros(3), 1: np.array([4.0, 0.0, 0.0]),
                 2: np.array([0.0, 4.0, 0.0])}
    edges = [(0, 1), (0, 2)]
    bare = env.NavGraph(positions, edges, {}, world_seed=9)
    marked = env.NavGraph(positions, edges, {1: [5]}, world_seed=9)
    v_bare = env.observe(bare, env.AgentState(node=0, heading=0.0)).views
    v_marked = env.observe(marked, env.AgentState(node=0, heading=0.0)).views
    facing = env.view_index(bare.bearing(0, 1), 0.0)
    diff = np.abs(v_bare - v_marked).sum(axis=1)
    assert diff[facing] > 0
    assert np.count_nonzero(diff) == 1


def test_own_landmark_perturbs_every_view():
    positions = {0: np.zeros(3), 1: np.array([4.0, 0.0, 0.0])}
    bare = env.NavGraph(positions, [(0, 1)], {}, world_seed=9)
    marked = env.NavGraph(positions, [(0, 1)], {0: [7]}, world_seed=9)
    v_bare = env.observe(bare, env.AgentState(node=0, heading=0.0)).views
    v_marked = env.observe(marked, env.AgentState(node=0, heading=0.0)).views
    diff = np.abs(v_bare - v_marked).sum(axis=1)
    assert (diff > 0).all()


def test_landmark_embedding_is_world_independent():
    e1 = env.landmark_embedding(4)
    e2 = env.landmark_embedding(4)
    np.testing.assert_array_equal(e1, e2)
    assert np.abs(env.landmark_embedding(4) - env.landmark_embedding(5)).max() > 0


def test_transition_moves_and_faces_edge():
    g = line_world(3, spacing=2.0)
    s = env.AgentState(node=0, heading=2.0, elevation=0.1)
    s2 = env.transition(g, s, 1)
    assert s2.node == 1
    assert s2.heading == pytest.approx(g.bearing(0, 1))
    s3 = env.transition(g, s2, 1)  # stop in place
    assert s3.node == 1
    assert s3.heading == s2.heading
    assert s3.elevation == 0.0


def test_transition_rejects_non_adjacent():
    g = line_world(4)
    with pytest.raises(ValueError):
        env.transition(g, env.AgentState(node=0, heading=0.0), 2)


# ---------------------------------------------------------- world generation

def test_two_node_world_single_edge():
    # the only connected 2-node graph; the degree target is unreachable and
    # the generator must settle for what the node pair allows
    g = env.generate_world(seed=7, n_nodes=2, mean_degree=2, n_landmarks=1)
    assert len(g.node_ids) == 2
    assert len(g.edges) == 1
    assert len(g.landmarks) == 1


def test_generate_world_is_deterministic():
    a = env.generate_world(seed=42, n_nodes=15, mean_degree=3, n_landmarks=4)
    b = env.generate_world(seed=42, n_nodes=15, mean_degree=3, n_landmarks=4)
    assert a.edges == b.edges
    assert a.landmarks == b.landmarks
    for n in a.node_ids:
        np.testing.assert_array_equal(a.positions[n], b.positions[n])
    c = env.generate_world(seed=43, n_nodes=15, mean_degree=3, n_landmarks=4)
    assert c.edges != a.edges or any(
        not np.array_equal(c.positions[n], a.positions[n]) for n in c.node_ids)


def test_generate_world_validates_args():
    with pytest.raises(ValueError):
        env.generate_world(seed=0, n_nodes=1, mean_degree=2, n_landmarks=0)
    with pytest.raises(ValueError):
        env.generate_world(seed=0, n_nodes=5, mean_degree=0, n_landmarks=0)
    with pytest.raises(ValueError):
        env.generate_world(seed=0, n_nodes=5, mean_degree=2, n_landmarks=30)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=15, deadline=None)
def test_generated_world_invariants(seed):
    g = env.generate_world(seed=seed, n_nodes=20, mean_degree=4, n_landmarks=5)
    assert len(g.node_ids) == 20
    # positions inside the box
    for n in g.node_ids:
        p = g.positions[n]
        assert (0 <= p[0] <= env.BOX_SIZE[0] and 0 <= p[1] <= env.BOX_SIZE[1]
                and 0 <= p[2] <= env.BOX_SIZE[2])
    # requested density, no self loops
    degrees = [len(g.neighbors(n)) for n in g.node_ids]
    assert sum(degrees) / 20 >= 4
    assert all(a != b for a, b in g.edges)
    # every neighbor lands in a distinct view slot at both endpoints
    for n in g.node_ids:
        slots = [env.view_index(g.bearing(n, m), g.elevation_angle(n, m))
                 for m in g.neighbors(n)]
        assert len(slots) == len(set(slots))
    # landmarks: 5 nodes, distinct categories when they fit the category space
    assert len(g.landmarks) == 5
    cats = [c for cats in g.landmarks.values() for c in cats]
    assert len(cats) == len(set(cats))
    assert all(0 <= c < env.N_CATEGORIES for c in cats)


def test_view_collision_rejected_in_observe():
    # two neighbors stuffed into the same slot must be caught
    positions = {0: np.zeros(3), 1: np.array([4.0, 0.0, 0.0]),
                 2: np.array([8.0, 0.0, 0.0])}
    g = env.NavGraph(positions, [(0, 1), (0, 2), (1, 2)], {})
    with pytest.raises(ValueError):
        env.observe(g, env.AgentState(node=0, heading=0.0))


# ------------------------------------------------------------------ episodes

def test_episode_reference_path_is_shortest_and_bounded():
    g = env.generate_world(seed=6, n_nodes=30, mean_degree=4, n_landmarks=6)
    for gran in env.GRANULARITIES:
        for seed in range(5):
            state, instr = env.generate_episode(g, seed=seed, granularity=gran)
            path = list(instr.reference_path)
            assert 3 <= len(path) - 1 <= 10
            assert path[0] == state.node
            assert path[-1] == instr.goal
            ref, _ = g.shortest_path(path[0], path[-1])
            assert ref == path
            assert instr.task_id == env.TASK_IDS[gran]


def test_fine_tokens_encode_reference_directions():
    g = env.generate_world(seed=7, n_nodes=30, mean_degree=4, n_landmarks=4)
    state, instr = env.generate_episode(g, seed=1, granularity="fine")
    path = instr.reference_path
    assert instr.tokens[-1] == env.TOKEN_EOS
    assert len(instr.tokens) == len(path)  # one per edge plus EOS
    for tok, (a, b) in zip(instr.tokens, zip(path, path[1:])):
        assert tok == env.direction_token(g.bearing(a, b))


def test_coarse_tokens_lead_with_goal_category():
    g = env.generate_world(seed=8, n_nodes=30, mean_degree=4, n_landmarks=6)
    for seed in range(8):
        _, instr = env.generate_episode(g, seed=seed, granularity="coarse")
        assert instr.goal in g.landmarks
        assert instr.tokens[0] == env.landmark_token(g.landmarks[instr.goal][0])
        assert instr.tokens[-1] == env.TOKEN_EOS
        assert 2 <= len(instr.tokens) - 2 <= 4  # context categories
        for tok in instr.tokens[1:-1]:
            assert env.TOKEN_LANDMARK_BASE <= tok < env.TOKEN_LANDMARK_BASE + env.N_CATEGORIES


def test_zero_grained_is_single_category_token():
    g = env.generate_world(seed=9, n_nodes=30, mean_degree=4, n_landmarks=6)
    _, instr = env.generate_episode(g, seed=2, granularity="zero")
    assert len(instr.tokens) == 1
    assert instr.tokens[0] == env.landmark_token(g.landmarks[instr.goal][0])


def test_episode_goals_cover_world_landmarks():
    g = env.generate_world(seed=10, n_nodes=30, mean_degree=4, n_landmarks=5)
    goals = {env.generate_episode(g, seed=s, granularity="zero")[1].goal
             for s in range(120)}
    assert goals == set(g.landmarks)


def test_episode_determinism():
    g = env.generate_world(seed=11, n_nodes=25, mean_degree=3, n_landmarks=4)
    a = env.generate_episode(g, seed=3, granularity="coarse")
    b = env.generate_episode(g, seed=3, granularity="coarse")
    assert a == b


def test_episode_rejects_unknown_granularity():
    g = env.generate_world(seed=12, n_nodes=10, mean_degree=3, n_landmarks=2)
    with pytest.raises(ValueError):
        env.generate_episode(g, seed=0, granularity="medium")


def test_instruction_validation():
    with pytest.raises(ValueError):
        env.Instruction(tokens=(), granularity="fine", goal=0, reference_path=(0, 1))
    with pytest.raises(ValueError):
        env.Instruction(tokens=(1, 2), granularity="zero", goal=0,
                        reference_path=(0, 1))
    with pytest.raises(ValueError):
        env.Instruction(tokens=(env.VOCAB_SIZE,), granularity="zero", goal=0,
                        reference_path=(0,))


# ------------------------------------------------------------- serialization

def test_world_roundtrip(tmp_path):
    g = env.generate_world(seed=13, n_nodes=12, mean_degree=3, n_landmarks=3)
    p = tmp_path / "world.json"
    env.save_world(str(p), g)
    h = env.load_world(str(p))
    assert h.edges == g.edges
    assert h.landmarks == g.landmarks
    assert h.world_seed == g.world_seed
    for n in g.node_ids:
        np.testing.assert_array_equal(h.positions[n], g.positions[n])
    # identical observations after a roundtrip (features keyed by world seed)
    s = env.AgentState(node=g.node_ids[0], heading=0.0)
    np.testing.assert_array_equal(env.observe(g, s).views, env.observe(h, s).views)


def test_world_save_is_byte_deterministic(tmp_path):
    g = env.generate_world(seed=14, n_nodes=10, mean_degree=3, n_landmarks=2)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    env.save_world(str(p1), g)
    env.save_world(str(p2), g)
    assert p1.read_bytes() == p2.read_bytes()


def test_episodes_roundtrip(tmp_path):
    g = env.generate_world(seed=15, n_nodes=25, mean_degree=3, n_landmarks=4)
    eps = [env.generate_episode(g, seed=s, granularity=gr)
           for s in range(3) for gr in env.GRANULARITIES]
    p = tmp_path / "eps.jsonl"
    env.save_episodes(str(p), eps)
    back = env.load_episodes(str(p))
    assert back == eps
