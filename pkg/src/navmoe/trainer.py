"""Imitation and DAgger training over multi-granularity episode streams.

The teacher is interactive: at any visited state it picks the map candidate
minimizing geodesic(current, candidate) + geodesic(candidate, goal), so it
supervises recovery off the reference path.  Imitation executes the teacher;
DAgger executes samples from the policy's own distribution while labeling
every visited state with the teacher's choice.

The per-episode loss is mean step cross-entropy plus balance_coef times the
mean over MoE layers of the balance loss accumulated over the episode's
routing rows; episodes backpropagate one at a time (gradients add up), which
keeps tape memory bounded at one episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import metrics as met
from . import moe as moe_mod
from . import numcore as nc
from .envgraph import AgentState, Instruction, NavGraph, generate_episode
from .numcore import ParamBlock, Tensor
from .policy import STOP, Policy, PolicyConfig, TopoMap, execute_action

_SAMPLE_SALT = 606
_POOL_SALT = 707

DEFAULT_TASK_RATIOS = {"fine": 1.0, "coarse": 1.0, "zero": 1.0}


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "dagger"
    batch_mode: str = "sequential"
    batch_size: int = 16
    balance_coef: float = 0.8
    lr: float = 3e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    max_steps: int = 15
    updates: int = 1000
    seed: int = 0
    task_ratios: dict = field(default_factory=lambda: dict(DEFAULT_TASK_RATIOS))
    tf_decay: bool = False
    eval_every: int = 0

    def __post_init__(self):
        if self.algorithm not in ("imitation", "dagger"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.batch_mode not in ("sequential", "mixed"):
            raise ValueError(f"unknown batch_mode {self.batch_mode!r}")
        if self.balance_coef < 0:
            raise ValueError("balance_coef must be >= 0")
        if any(w <= 0 for w in self.task_ratios.values()):
            raise ValueError("task ratios must be positive")

    def to_dict(self) -> dict:
        doc = {f: getattr(self, f) for f in (
            "algorithm", "batch_mode", "batch_size", "balance_coef", "lr",
            "weight_decay", "beta1", "beta2", "max_steps", "updates", "seed",
            "tf_decay", "eval_every")}
        doc["task_ratios"] = dict(self.task_ratios)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        keys = set(cls().to_dict())
        return cls(**{k: v for k, v in doc.items() if k in keys})


class AdamW:
    """Decoupled-weight-decay Adam; parameters without a gradient are left
    untouched (no moment update, no decay), preserving unselected experts."""

    def __init__(self, params: ParamBlock, lr: float = 3e-3,
                 weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            v = self._v[name]
            t = self._t[name] + 1
            self._t[name] = t
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            m_hat = m / (1.0 - self.b1 ** t)
            v_hat = v / (1.0 - self.b2 ** t)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * p.data)


# -- teacher and rollouts ----------------------------------------------------


def teacher_action(g: NavGraph, topo: TopoMap, current: int, goal: int) -> int:
    """STOP at the goal, else the map candidate minimizing the through-route
    geodesic(current, c) + geodesic(c, goal); ties take the smaller id."""
    if current == goal:
        return STOP
    best = None
    for c in topo.sorted_nodes():
        if c == current:
            continue
        cost = g.geodesic(current, c) + g.geodesic(c, goal)
        if best is None or cost < best[0] - 1e-12:
            best = (cost, c)
    if best is None:
        return STOP
    return best[1]


def total_loss(action_loss: Tensor, balance_losses, balance_coef: float) -> Tensor:
    """action + coef * mean over MoE layers of the balance loss."""
    if not balance_losses or balance_coef == 0.0:
        return action_loss
    acc = balance_losses[0]
    for b in balance_losses[1:]:
        acc = nc.add(acc, b)
    return nc.add(action_loss, nc.scale(acc, balance_coef / len(balance_losses)))


@dataclass
class RolloutResult:
    loss: Tensor
    action_loss: float
    balance_loss: float
    executed_path: list
    records: list


def _mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = nc.add(acc, t)
    return nc.scale(acc, 1.0 / len(terms))


def rollout(policy: Policy, g: NavGraph, state: AgentState, instr: Instruction,
            max_steps: int, balance_coef: float, episode_id: str = "",
            rng: np.random.Generator | None = None,
            tf_prob: float = 0.0) -> RolloutResult:
    """One supervised episode: teacher-executed when rng is None (imitation),
    policy-sampled otherwise (DAgger), teacher-labeled either way."""
    topo = TopoMap()
    enc = policy.encode_instruction(instr.tokens)
    executed = [state.node]
    ce_terms: list[Tensor] = []
    site_probs: dict[str, list[Tensor]] = {}
    records = []
    for t in range(1, max_steps + 1):
        action, out = policy.act(g, topo, state, enc, instr, t, rng=rng)
        teacher = teacher_action(g, topo, state.node, instr.goal)
        target = out.candidates.index(teacher)
        ce = nc.cross_entropy_logits(out.scores, target)
        ce_terms.append(ce)

        routing = []
        for rec in out.route_records:
            site_probs.setdefault(rec.site, []).append(rec.probs)
            routing.append(moe_mod.routing_log_entry(
                t, rec.site, rec.kind, rec.probs.data[0], rec.selected))
        if rng is None:
            chosen = teacher
        elif tf_prob > 0.0 and rng.random() < tf_prob:
            chosen = teacher
        else:
            chosen = action
        records.append({
            "episode_id": episode_id, "t": t, "teacher_action": teacher,
            "taken_action": chosen, "loss_action": ce.item(), "routing": routing,
        })
        if chosen == STOP:
            break
        state, traversed = execute_action(g, state, chosen)
        executed.extend(traversed)

    action_loss = _mean(ce_terms)
    balance_terms = [moe_mod.balance_loss_term(rows, policy.config.n_experts)
                     for _, rows in sorted(site_probs.items())]
    loss = total_loss(action_loss, balance_terms, balance_coef)
    balance_value = (float(np.mean([b.item() for b in balance_terms]))
                     if balance_terms else 0.0)
    for r in records:
        r["loss_balance"] = balance_value
    return RolloutResult(loss=loss, action_loss=action_loss.item(),
                         balance_loss=balance_value, executed_path=executed,
                         records=records)


def greedy_rollout(policy: Policy, g: NavGraph, state: AgentState,
                   instr: Instruction, max_steps: int = 15) -> list:
    """Evaluation rollout: argmax actions, no loss bookkeeping."""
    topo = TopoMap()
    enc = policy.encode_instruction(instr.tokens)
    executed = [state.node]
    for t in range(1, max_steps + 1):
        action, _ = policy.act(g, topo, state, enc, instr, t, rng=None)
        if action == STOP:
            break
        state, traversed = execute_action(g, state, action)
        executed.extend(traversed)
    return executed


def random_walk_rollout(g: NavGraph, state: AgentState,
                        rng: np.random.Generator, max_steps: int = 15) -> list:
    """Uniform choice over {stop} + neighbors at every step; the measured
    floor that trained policies are compared against."""
    executed = [state.node]
    node = state.node
    for _ in range(max_steps):
        options = [STOP] + list(g.neighbors(node))
        choice = options[int(rng.integers(len(options)))]
        if choice == STOP:
            break
        executed.append(choice)
        node = choice
    return executed


# -- episode sampling --------------------------------------------------------


def sample_batch(draw, mode: str, ratios: dict, batch_size: int,
                 rng: np.random.Generator) -> list:
    """sequential: one granularity per batch; mixed: per-episode draws."""
    grans = sorted(ratios)
    weights = np.array([ratios[k] for k in grans], dtype=np.float64)
    weights /= weights.sum()
    if mode == "sequential":
        gran = grans[int(rng.choice(len(grans), p=weights))]
        return [draw(gran) for _ in range(batch_size)]
    return [draw(grans[int(rng.choice(len(grans), p=weights))])
            for _ in range(batch_size)]


class EpisodePool:
    """Deterministic stream of generated episodes over a fixed world list."""

    def __init__(self, worlds: list[NavGraph], seed: int):
        if not worlds:
            raise ValueError("need at least one world")
        self.worlds = worlds
        self.rng = np.random.default_rng([_POOL_SALT, seed])

    def draw(self, granularity: str):
        g = self.worlds[int(self.rng.integers(len(self.worlds)))]
        state, instr = generate_episode(g, int(self.rng.integers(2 ** 31)), granularity)
        return g, state, instr


# -- training loop ------------------------------------------------------------


def train(config: TrainConfig, policy_config: PolicyConfig,
          worlds: list[NavGraph], log_file=None,
          eval_episodes=None) -> Policy:
    """Run the full loop; returns the trained policy.  Raises RuntimeError on
    a non-finite loss.  Log lines (JSON) go to `log_file` when given."""
    policy = Policy(policy_config, seed=config.seed)
    opt = AdamW(policy.params, lr=config.lr, weight_decay=config.weight_decay,
                betas=(config.beta1, config.beta2))
    pool = EpisodePool(worlds, config.seed)

    def emit(doc):
        if log_file is not None:
            log_file.write(json.dumps(doc, sort_keys=True) + "\n")

    for update in range(config.updates):
        batch = sample_batch(pool.draw, config.batch_mode, config.task_ratios,
                             config.batch_size, pool.rng)
        policy.params.zero_grad()
        tf_prob = (1.0 - update / max(config.updates - 1, 1)) if config.tf_decay else 0.0
        action_sum = balance_sum = loss_sum = 0.0
        for ep_idx, (g, state, instr) in enumerate(batch):
            ep_rng = (np.random.default_rng([_SAMPLE_SALT, config.seed, update, ep_idx])
                      if config.algorithm == "dagger" else None)
            result = rollout(policy, g, state, instr, config.max_steps,
                             config.balance_coef, episode_id=f"{update}:{ep_idx}",
                             rng=ep_rng, tf_prob=tf_prob)
            nc.scale(result.loss, 1.0 / config.batch_size).backward()
            action_sum += result.action_loss
            balance_sum += result.balance_loss
            loss_sum += result.loss.item()
            for rec in result.records:
                emit(rec)
        mean_loss = loss_sum / config.batch_size
        if not np.isfinite(mean_loss):
            raise RuntimeError(f"non-finite loss at update {update}")
        opt.step()
        emit({"update": update, "loss": mean_loss,
              "loss_action": action_sum / config.batch_size,
              "loss_balance": balance_sum / config.batch_size})
        if (config.eval_every and eval_episodes
                and (update + 1) % config.eval_every == 0):
            reports, agg = evaluate_policy(policy, eval_episodes,
                                           max_steps=config.max_steps)
            emit({"update": update, "eval": agg.to_dict()})
    return policy


# -- evaluation ----------------------------------------------------------------


def evaluate_policy(policy: Policy, episodes, max_steps: int = 15,
                    success_threshold_m: float = met.DEFAULT_SUCCESS_THRESHOLD_M):
    reports = []
    for g, state, instr in episodes:
        executed = greedy_rollout(policy, g, state, instr, max_steps)
        result = met.EpisodeResult(executed_path=tuple(executed),
                                   reference_path=instr.reference_path,
                                   goal=instr.goal)
        reports.append(met.evaluate_episode(result, g, success_threshold_m))
    return reports, met.aggregate(reports)


def evaluate_random_walk(episodes, seed: int, max_steps: int = 15,
                         success_threshold_m: float = met.DEFAULT_SUCCESS_THRESHOLD_M):
    reports = []
    for idx, (g, state, instr) in enumerate(episodes):
        rng = np.random.default_rng([_SAMPLE_SALT, seed, idx])
        executed = random_walk_rollout(g, state, rng, max_steps)
        result = met.EpisodeResult(executed_path=tuple(executed),
                                   reference_path=instr.reference_path,
                                   goal=instr.goal)
        reports.append(met.evaluate_episode(result, g, success_threshold_m))
    return reports, met.aggregate(reports)
