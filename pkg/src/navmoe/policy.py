"""Dual-branch navigation policy over a topological map, with optional MoE.

A step encodes the instruction (cached per episode), embeds the 36-view
panorama, folds the panorama into a persistent topological map, then scores
candidates twice: a local branch over {stop} + views via cross-attention to
the text, and a global branch over {stop} + map nodes via cross-attention,
graph-aware self-attention (distance-biased logits), and an FFN.  A sigmoid
head on the current node's embedding produces the fusion weight between the
two score vectors; the fused scores are softmaxed over {stop} + map nodes.

Mixture-of-experts layers can replace the visual query projections, the
textual key/value projections, or the block FFNs; the router conditions on
a configurable routing feature (input rows, task embedding, text CLS, or
the state-adaptive [mean view; CLS] projection, optionally task-added).

Map node embeddings stay in the episode's computation graph, so a step's
loss backpropagates through every earlier panorama that fed the map; the
analytic gradient therefore matches finite differences end to end.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import envgraph as env
from . import moe as moe_mod
from . import numcore as nc
from .envgraph import AgentState, Instruction, NavGraph, Observation
from .numcore import ParamBlock, Tensor

STOP = -1

STEP_TABLE = 17
_DIST_SCALE = 10.0
_DZ_SCALE = 3.0
_MASK_VALUE = -1e9
_PARAM_SALT = 505


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 32
    layers_local: int = 2
    layers_global: int = 2
    heads: int = 2
    moe_placement: str = "visual_query"
    routing_kind: str = "multimodal"
    n_experts: int = 3
    k: int = 2
    mask_visited: bool = False
    tau: float = 1.0

    def __post_init__(self):
        if self.moe_placement not in ("none",) + moe_mod.PLACEMENTS:
            raise ValueError(f"unknown moe_placement {self.moe_placement!r}")
        if self.moe_placement != "none" and self.routing_kind not in moe_mod.ROUTING_KINDS:
            raise ValueError(f"unknown routing_kind {self.routing_kind!r}")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.moe_placement != "none" and not 1 <= self.k <= self.n_experts:
            raise ValueError("need 1 <= k <= n_experts")

    def to_dict(self) -> dict:
        return {
            "d": self.d, "layers_local": self.layers_local,
            "layers_global": self.layers_global, "heads": self.heads,
            "moe_placement": self.moe_placement, "routing_kind": self.routing_kind,
            "n_experts": self.n_experts, "k": self.k,
            "mask_visited": self.mask_visited, "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyConfig":
        return cls(**{k: doc[k] for k in cls().to_dict() if k in doc})


@dataclass(frozen=True)
class EncodedInstruction:
    tokens: Tensor
    cls: Tensor


@dataclass(frozen=True)
class RouteRecord:
    site: str
    kind: str
    probs: Tensor
    selected: tuple


@dataclass
class StepOutput:
    scores: Tensor
    distribution: np.ndarray
    candidates: list
    sigma: Tensor
    route_records: list
    local_scores: Tensor
    global_scores: Tensor


class TopoMap:
    """Visited and frontier nodes with embeddings that live on the tape.

    A visit overwrites the node's embedding with its panorama mean and stamps
    last_visit_step (>= 1; 0 marks an unvisited frontier).  Frontier nodes
    average the panorama rows of the views that sighted them; a node already
    visited keeps its visited embedding on later sightings.
    """

    def __init__(self):
        self.emb: dict[int, Tensor] = {}
        self.visit_step: dict[int, int] = {}
        self._front_sum: dict[int, Tensor] = {}
        self._front_count: dict[int, int] = {}

    def sorted_nodes(self) -> list[int]:
        return sorted(self.emb)

    def update(self, current: int, pano: Tensor, navigable, step: int) -> None:
        if step < 1:
            raise ValueError("steps are counted from 1")
        self.emb[current] = nc.mean_rows(pano)
        self.visit_step[current] = step
        for view, node in enumerate(navigable):
            if node is None:
                continue
            if self.visit_step.get(node, 0) > 0:
                continue
            row = nc.slice_rows(pano, view, view + 1)
            prev = self._front_sum.get(node)
            self._front_sum[node] = row if prev is None else nc.add(prev, row)
            self._front_count[node] = self._front_count.get(node, 0) + 1
            self.emb[node] = nc.scale(self._front_sum[node],
                                      1.0 / self._front_count[node])
            self.visit_step.setdefault(node, 0)


_ANG_CACHE: Optional[Tensor] = None


def _view_angle_features() -> Tensor:
    """Constant 36 x 4 sin/cos of each view's absolute heading and elevation."""
    global _ANG_CACHE
    if _ANG_CACHE is None:
        ang = np.empty((env.N_VIEWS, 4))
        for v in range(env.N_VIEWS):
            h, e = env.view_heading(v), env.view_elevation(v)
            ang[v] = (np.sin(h), np.cos(h), np.sin(e), np.cos(e))
        _ANG_CACHE = nc.constant(ang)
    return _ANG_CACHE


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    return np.where(np.arange(d)[None, :] % 2 == 0, np.sin(angles), np.cos(angles))


def _name_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")


class Policy:
    """Parameter container plus the per-step forward pass."""

    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.params = ParamBlock()
        self._moe_layers: dict[str, moe_mod.MoELayer] = {}
        self._build_params()

    # -- construction -----------------------------------------------------

    def _weight(self, name: str, rows: int, cols: int) -> Tensor:
        """Each parameter is seeded by (policy seed, name), so the set of
        other parameters never shifts its initialization."""
        rng = np.random.default_rng([_PARAM_SALT, self.seed, _name_seed(name)])
        return self.params.add(name, rng.normal(0.0, 1.0 / np.sqrt(rows), (rows, cols)))

    def _zeros(self, name: str, rows: int, cols: int) -> Tensor:
        return self.params.add(name, np.zeros((rows, cols)))

    def _moe_site(self, site: str) -> None:
        cfg = self.config
        self._weight(f"{site}_router", cfg.d, cfg.n_experts)
        experts = []
        for j in range(cfg.n_experts):
            if site.endswith("_ffn"):
                experts.append({
                    "w1": self._weight(f"{site}_e{j}_w1", cfg.d, cfg.d),
                    "b1": self._zeros(f"{site}_e{j}_b1", 1, cfg.d),
                    "w2": self._weight(f"{site}_e{j}_w2", cfg.d, cfg.d),
                    "b2": self._zeros(f"{site}_e{j}_b2", 1, cfg.d),
                })
            else:
                experts.append({"w": self._weight(f"{site}_e{j}_w", cfg.d, cfg.d)})
        self._moe_layers[site] = moe_mod.MoELayer(
            self.params[f"{site}_router"], experts, cfg.k, cfg.moe_placement, name=site)

    def _build_params(self) -> None:
        cfg = self.config
        d = cfg.d
        moe_q = cfg.moe_placement == "visual_query"
        moe_kv = cfg.moe_placement == "textual_kv"
        moe_ffn = cfg.moe_placement == "ffn"

        self._weight("tok_emb", env.VOCAB_SIZE, d)
        self._weight("cls_emb", 1, d)
        for i in range(2):
            for proj in ("wq", "wk", "wv"):
                self._weight(f"text{i}_{proj}", d, d)

        self._weight("w_view", env.FEATURE_DIM, d)
        self._zeros("b_view", 1, d)
        self._weight("w_ang", 4, d)
        self._weight("nav_emb", 2, d)
        for proj in ("wq", "wk", "wv"):
            self._weight(f"pano_{proj}", d, d)

        self._weight("step_now", STEP_TABLE, d)
        self._weight("step_visit", STEP_TABLE, d)
        self._weight("w_loc", 4, d)
        self._weight("stop_local", 1, d)
        self._weight("stop_global", 1, d)

        def block(prefix: str, with_gasa: bool) -> None:
            if moe_q:
                self._moe_site(f"{prefix}_ca_wq")
            else:
                self._weight(f"{prefix}_ca_wq", d, d)
            for proj in ("wk", "wv"):
                if moe_kv:
                    self._moe_site(f"{prefix}_ca_{proj}")
                else:
                    self._weight(f"{prefix}_ca_{proj}", d, d)
            if with_gasa:
                for proj in ("wq", "wk", "wv"):
                    self._weight(f"{prefix}_sa_{proj}", d, d)
            if moe_ffn:
                self._moe_site(f"{prefix}_ffn")
            else:
                self._weight(f"{prefix}_ffn_w1", d, d)
                self._zeros(f"{prefix}_ffn_b1", 1, d)
                self._weight(f"{prefix}_ffn_w2", d, d)
                self._zeros(f"{prefix}_ffn_b2", 1, d)

        for i in range(cfg.layers_local):
            block(f"loc{i}", with_gasa=False)
        for i in range(cfg.layers_global):
            block(f"glob{i}", with_gasa=True)

        for head in ("loc_score", "glob_score"):
            self._weight(f"{head}_w1", d, d)
            self._zeros(f"{head}_b1", 1, d)
            self._weight(f"{head}_w2", d, 1)
            self._zeros(f"{head}_b2", 1, 1)
        self._zeros("sigma_w", d, 1)
        self._zeros("sigma_b", 1, 1)

        self._weight("w_m", 2 * d, d)
        self._weight("task_table", len(env.GRANULARITIES), d)

    # -- encoders -----------------------------------------------------------

    def encode_instruction(self, tokens) -> EncodedInstruction:
        if not tokens:
            raise ValueError("instruction tokens must be nonempty")
        p = self.params
        rows = nc.concat_rows([p["cls_emb"], nc.take_rows(p["tok_emb"], tokens)])
        x = nc.add(rows, nc.constant(sinusoidal_positions(rows.rows, self.config.d)))
        for i in range(2):
            att = nc.cross_attention(x, x, p[f"text{i}_wq"], p[f"text{i}_wk"],
                                     p[f"text{i}_wv"], n_heads=self.config.heads)
            x = nc.add(x, att)
        return EncodedInstruction(tokens=x, cls=nc.slice_rows(x, 0, 1))

    def embed_panorama(self, obs: Observation) -> Tensor:
        p = self.params
        base = nc.linear(nc.constant(obs.views), p["w_view"], p["b_view"])
        flags = [0 if n is None else 1 for n in obs.navigable]
        x = nc.add(nc.add(base, nc.matmul(_view_angle_features(), p["w_ang"])),
                   nc.take_rows(p["nav_emb"], flags))
        att = nc.cross_attention(x, x, p["pano_wq"], p["pano_wk"], p["pano_wv"],
                                 n_heads=self.config.heads)
        return nc.add(x, att)

    # -- MoE plumbing ---------------------------------------------------------

    def _routing_feature(self, enc: EncodedInstruction, pano: Tensor,
                         task_id: int) -> Optional[Tensor]:
        cfg = self.config
        if cfg.moe_placement == "none" or cfg.routing_kind == "token":
            return None
        return moe_mod.build_routing_feature(
            cfg.routing_kind, task_id=task_id, text_cls=enc.cls, view_features=pano,
            w_m=self.params["w_m"], task_table=self.params["task_table"])

    def _moe_apply(self, site: str, x: Tensor, route_feat: Optional[Tensor],
                   records: list) -> Optional[Tensor]:
        layer = self._moe_layers.get(site)
        if layer is None:
            return None
        x_r = x if self.config.routing_kind == "token" else route_feat
        y, probs = moe_mod.moe_forward(layer, x, x_r)
        selected = tuple(moe_mod.top_k_indices(probs.data[0], layer.k))
        records.append(RouteRecord(site=site, kind=self.config.routing_kind,
                                   probs=probs, selected=selected))
        return y

    def _block(self, prefix: str, x: Tensor, text: Tensor, route_feat,
               records: list, affinity: Optional[Tensor] = None) -> Tensor:
        p = self.params
        heads = self.config.heads

        def proj(name, inp):
            override = self._moe_apply(f"{prefix}_ca_{name}", inp, route_feat, records)
            return override if override is not None else nc.matmul(inp, p[f"{prefix}_ca_{name}"])

        att = nc.cross_attention(x, text, None, None, None, n_heads=heads,
                                 q_override=proj("wq", x), k_override=proj("wk", text),
                                 v_override=proj("wv", text))
        x = nc.add(x, att)
        if affinity is not None:
            sa = nc.gasa(x, p[f"{prefix}_sa_wq"], p[f"{prefix}_sa_wk"],
                         p[f"{prefix}_sa_wv"], affinity, n_heads=heads)
            x = nc.add(x, sa)
        f = self._moe_apply(f"{prefix}_ffn", x, route_feat, records)
        if f is None:
            f = nc.ffn(x, p[f"{prefix}_ffn_w1"], p[f"{prefix}_ffn_b1"],
                       p[f"{prefix}_ffn_w2"], p[f"{prefix}_ffn_b2"])
        return nc.add(x, f)

    # -- branches ---------------------------------------------------------------

    def _step_row(self, step: int) -> Tensor:
        return nc.take_rows(self.params["step_now"], [min(step, STEP_TABLE - 1)])

    def local_branch(self, pano: Tensor, enc: EncodedInstruction, step: int,
                     route_feat, records: list) -> Tensor:
        """Scores (1 x 37) over [stop] + the 36 views."""
        x = nc.concat_rows([self.params["stop_local"],
                            nc.add(pano, self._step_row(step))])
        for i in range(self.config.layers_local):
            x = self._block(f"loc{i}", x, enc.tokens, route_feat, records)
        p = self.params
        scores = nc.ffn(x, p["loc_score_w1"], p["loc_score_b1"],
                        p["loc_score_w2"], p["loc_score_b2"])
        return nc.transpose(scores)

    def global_branch(self, g: NavGraph, topo: TopoMap, state: AgentState,
                      enc: EncodedInstruction, step: int,
                      route_feat, records: list) -> tuple[Tensor, list, Tensor]:
        """Scores (1 x 1+M) over [stop] + sorted map nodes, plus the current
        node's final embedding for the fusion head."""
        nodes = topo.sorted_nodes()
        cur = state.node
        cur_pos = g.positions[cur]

        emb_rows = nc.concat_rows([topo.emb[n] for n in nodes])
        loc_feats = np.zeros((len(nodes), 4))
        for r, n in enumerate(nodes):
            if n == cur:
                continue
            rel = env.wrap_angle(g.bearing(cur, n) - state.heading)
            delta = g.positions[n] - cur_pos
            loc_feats[r] = (np.sin(rel), np.cos(rel),
                            np.hypot(delta[0], delta[1]) / _DIST_SCALE,
                            delta[2] / _DZ_SCALE)
        visit_idx = [min(topo.visit_step[n], STEP_TABLE - 1) for n in nodes]
        p = self.params
        node_x = nc.add(nc.add(emb_rows, nc.matmul(nc.constant(loc_feats), p["w_loc"])),
                        nc.add(nc.take_rows(p["step_visit"], visit_idx),
                               self._step_row(step)))
        x = nc.concat_rows([p["stop_global"], node_x])

        pos = np.stack([g.positions[n] for n in nodes])
        diff = pos[:, None, :] - pos[None, :, :]
        aff = np.zeros((len(nodes) + 1, len(nodes) + 1))
        aff[1:, 1:] = -np.sqrt((diff ** 2).sum(axis=2)) / self.config.tau
        affinity = nc.constant(aff)

        for i in range(self.config.layers_global):
            x = self._block(f"glob{i}", x, enc.tokens, route_feat, records,
                            affinity=affinity)
        scores = nc.transpose(nc.ffn(x, p["glob_score_w1"], p["glob_score_b1"],
                                     p["glob_score_w2"], p["glob_score_b2"]))
        current_row = nc.slice_rows(x, 1 + nodes.index(cur), 2 + nodes.index(cur))
        return scores, nodes, current_row

    def predict_sigma(self, current_row: Tensor) -> Tensor:
        return nc.sigmoid(nc.linear(current_row, self.params["sigma_w"],
                                    self.params["sigma_b"]))

    # -- fusion and the full step --------------------------------------------

    def step(self, g: NavGraph, topo: TopoMap, state: AgentState,
             enc: EncodedInstruction, instr: Instruction, step: int) -> StepOutput:
        obs = env.observe(g, state)
        pano = self.embed_panorama(obs)
        topo.update(state.node, pano, obs.navigable, step)

        records: list[RouteRecord] = []
        route_feat = self._routing_feature(enc, pano, instr.task_id)
        local_scores = self.local_branch(pano, enc, step, route_feat, records)
        global_scores, nodes, current_row = self.global_branch(
            g, topo, state, enc, step, route_feat, records)
        sigma = self.predict_sigma(current_row)

        candidates = [STOP] + [n for n in nodes if n != state.node]
        cand_col = {c: j for j, c in enumerate(candidates)}

        lift = np.zeros((1 + env.N_VIEWS, len(candidates)))
        lift[0, 0] = 1.0
        for v, node in enumerate(obs.navigable):
            if node is None:
                continue
            if node not in cand_col:
                raise ValueError(f"view {v} sees node {node} missing from the map")
            lift[1 + v, cand_col[node]] = 1.0
        lifted = nc.matmul(local_scores, nc.constant(lift))

        select = np.zeros((1 + len(nodes), len(candidates)))
        select[0, 0] = 1.0
        for r, n in enumerate(nodes):
            if n != state.node:
                select[1 + r, cand_col[n]] = 1.0
        global_sel = nc.matmul(global_scores, nc.constant(select))

        one_minus = nc.add(nc.constant([[1.0]]), nc.scale(sigma, -1.0))
        fused = nc.add(nc.mul(lifted, sigma), nc.mul(global_sel, one_minus))
        if self.config.mask_visited:
            bias = np.zeros((1, len(candidates)))
            for c in candidates[1:]:
                if topo.visit_step.get(c, 0) > 0:
                    bias[0, cand_col[c]] = _MASK_VALUE
            fused = nc.add(fused, nc.constant(bias))

        dist = nc.softmax_row(fused).data[0]
        return StepOutput(scores=fused, distribution=dist, candidates=candidates,
                          sigma=sigma, route_records=records,
                          local_scores=lifted, global_scores=global_sel)

    def act(self, g: NavGraph, topo: TopoMap, state: AgentState,
            enc: EncodedInstruction, instr: Instruction, step: int,
            rng: Optional[np.random.Generator] = None) -> tuple[int, StepOutput]:
        """Greedy action (rng=None) or a sample from the fused distribution."""
        out = self.step(g, topo, state, enc, instr, step)
        if not np.isfinite(out.distribution).all():
            raise RuntimeError("non-finite action distribution")
        if rng is None:
            choice = int(np.argmax(out.distribution))
        else:
            p = out.distribution / out.distribution.sum()
            choice = int(rng.choice(len(p), p=p))
        return out.candidates[choice], out


def execute_action(g: NavGraph, state: AgentState, target: int) -> tuple[AgentState, list[int]]:
    """Walk to `target` along the shortest path (map nodes may be non-adjacent);
    returns the new state and the traversed nodes in order."""
    if target == STOP or target == state.node:
        return env.transition(g, state, state.node), []
    path, _ = g.shortest_path(state.node, target)
    for node in path[1:]:
        state = env.transition(g, state, node)
    return state, list(path[1:])


def save_checkpoint(path: str, policy: Policy) -> None:
    nc.save_params(path, policy.params, header={"config": policy.config.to_dict(),
                                                "seed": policy.seed})


def load_checkpoint(path: str) -> Policy:
    header, state = nc.load_params(path)
    policy = Policy(PolicyConfig.from_dict(header["config"]),
                    seed=header.get("seed", 0))
    policy.params.load_state_dict(state)
    return policy
