"""Sparse mixture-of-experts: softmax router, top-k dispatch, balance loss.

The router maps a routing feature x_r through a linear layer and softmax to
expert probabilities.  The layer output is the probability-weighted sum of
the top-k experts' outputs with the raw probabilities (no renormalization
over the selected subset).  Selection is a hard constant: unselected experts
are never evaluated (single routing row) or enter with an exact 0.0 weight
(per-row routing), so they receive no gradient and cannot affect the output.

Routing features come in six kinds: the input token itself, a learned task
embedding, the instruction CLS vector, a projection of [mean view feature;
CLS] capturing the agent's current state, and the two task-added variants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

ROUTING_KINDS = ("token", "task", "text", "multimodal", "text_task", "multimodal_task")
PLACEMENTS = ("ffn", "visual_query", "textual_kv")


class MoELayer:
    """N same-shaped expert parameter blocks plus a d x N router."""

    def __init__(self, router_w: Tensor, experts: Sequence[dict[str, Tensor]],
                 k: int, placement: str, name: str = "moe"):
        experts = list(experts)
        n = len(experts)
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
        if router_w.cols != n:
            raise ValueError(f"router has {router_w.cols} columns for {n} experts")
        ref = {key: t.shape for key, t in experts[0].items()}
        for e in experts[1:]:
            if {key: t.shape for key, t in e.items()} != ref:
                raise ValueError("experts must be shape-identical")
        self.router_w = router_w
        self.experts = experts
        self.k = k
        self.placement = placement
        self.name = name

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def apply_expert(expert: dict[str, Tensor], x: Tensor) -> Tensor:
    """Default expert transform: FFN when the block has w1/w2, else linear."""
    if "w1" in expert:
        return nc.ffn(x, expert["w1"], expert["b1"], expert["w2"], expert["b2"])
    return nc.linear(x, expert["w"], expert.get("b"))


def route(layer: MoELayer, x_r: Tensor) -> Tensor:
    """Expert probabilities softmax(x_r W), one row per routing input."""
    if x_r.cols != layer.router_w.rows:
        raise ValueError(f"routing feature dim {x_r.cols} != router input "
                         f"dim {layer.router_w.rows}")
    return nc.softmax_row(nc.matmul(x_r, layer.router_w))


def top_k_indices(p: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest entries, ties broken by smaller index."""
    order = np.argsort(-p, kind="stable")
    return sorted(int(i) for i in order[:k])


def moe_forward(layer: MoELayer, x: Tensor, x_r: Tensor,
                apply: Callable[[dict[str, Tensor], Tensor], Tensor] = apply_expert,
                ) -> tuple[Tensor, Tensor]:
    """y = sum over top-k experts of P_i * f_i(x); returns (y, probs).

    A single routing row weights whole expert outputs (state routing); a
    routing row per input row weights experts row-wise (token routing).
    """
    probs = route(layer, x_r)
    if probs.rows == 1:
        selected = top_k_indices(probs.data[0], layer.k)
        y = None
        for i in selected:
            term = nc.mul(apply(layer.experts[i], x), nc.pick(probs, 0, i))
            y = term if y is None else nc.add(y, term)
        return y, probs
    if probs.rows != x.rows:
        raise ValueError(f"per-row routing needs one routing row per input row, "
                         f"got {probs.rows} for {x.rows}")
    mask = np.zeros(probs.shape)
    for r in range(probs.rows):
        mask[r, top_k_indices(probs.data[r], layer.k)] = 1.0
    weights = nc.mul(probs, nc.constant(mask))
    y = None
    for i in range(layer.n_experts):
        if not mask[:, i].any():
            continue
        term = nc.mul(apply(layer.experts[i], x), nc.slice_cols(weights, i, i + 1))
        y = term if y is None else nc.add(y, term)
    return y, probs


# -- load balancing -------------------------------------------------------------


@dataclass(frozen=True)
class BalanceStats:
    """F: argmax-assignment fraction per expert; D: mean probability; K: inputs."""

    F: np.ndarray
    D: np.ndarray
    K: int

    def __post_init__(self):
        if self.K > 0:
            if not np.isclose(self.F.sum(), 1.0, atol=1e-9):
                raise ValueError("F must sum to 1")
            if not np.isclose(self.D.sum(), 1.0, atol=1e-9):
                raise ValueError("D must sum to 1")


def routing_stats(layer: MoELayer, x_r_batch: Tensor) -> tuple[BalanceStats, np.ndarray]:
    """Balance stats plus a per-expert top-k selection histogram over a batch."""
    probs = route(layer, x_r_batch).data
    k_inputs = probs.shape[0]
    if k_inputs == 0:
        raise ValueError("empty routing batch")
    n = layer.n_experts
    counts = np.zeros(n)
    np.add.at(counts, probs.argmax(axis=1), 1.0)
    hist = np.zeros(n, dtype=np.int64)
    for r in range(k_inputs):
        hist[top_k_indices(probs[r], layer.k)] += 1
    stats = BalanceStats(F=counts / k_inputs, D=probs.mean(axis=0), K=k_inputs)
    return stats, hist


def balance_loss(stats: BalanceStats, n_experts: int) -> float:
    """N * sum_i F_i D_i; 1.0 under uniform routing, N under full collapse."""
    if stats.K <= 0:
        raise ValueError("balance loss undefined for empty stats")
    return n_experts * float(np.dot(stats.F, stats.D))


def balance_loss_term(prob_rows: Sequence[Tensor], n_experts: int) -> Tensor:
    """Differentiable balance loss from a layer's routing rows within a batch.

    F comes from argmax counts (a constant: selection carries no gradient);
    D is the mean probability tensor, which carries the router gradient.
    """
    all_probs = prob_rows[0] if len(prob_rows) == 1 else nc.concat_rows(prob_rows)
    counts = np.zeros(n_experts)
    np.add.at(counts, all_probs.data.argmax(axis=1), 1.0)
    f_col = nc.constant((counts / all_probs.rows).reshape(-1, 1))
    d_row = nc.mean_rows(all_probs)
    return nc.scale(nc.matmul(d_row, f_col), float(n_experts))


# -- routing features -----------------------------------------------------------


def build_routing_feature(kind: str, token: Tensor | None = None,
                          task_id: int | None = None,
                          text_cls: Tensor | None = None,
                          view_features: Tensor | None = None,
                          w_m: Tensor | None = None,
                          task_table: Tensor | None = None) -> Tensor:
    """Construct the routing feature for `kind` from whichever inputs it needs.

    token: the input rows themselves (per-row routing).  task: a row of the
    task embedding table.  text: the instruction CLS vector.  multimodal:
    W_m [mean of the 36 view rows ; CLS], the state-adaptive feature.  The
    *_task variants add the task embedding to the base feature.
    """
    if kind not in ROUTING_KINDS:
        raise ValueError(f"unknown routing kind {kind!r}")

    def need(value, label):
        if value is None:
            raise ValueError(f"routing kind {kind!r} requires {label}")
        return value

    if kind == "token":
        return need(token, "the token rows")
    if kind in ("task", "text_task", "multimodal_task"):
        table = need(task_table, "a task embedding table")
        task_row = nc.take_rows(table, [need(task_id, "a task id")])
        if kind == "task":
            return task_row
    if kind in ("text", "text_task"):
        base = need(text_cls, "the instruction CLS vector")
    else:
        views = need(view_features, "the 36 view features")
        cls = need(text_cls, "the instruction CLS vector")
        fused = nc.concat_cols([nc.mean_rows(views), cls])
        base = nc.matmul(fused, need(w_m, "the W_m projection"))
    if kind.endswith("_task"):
        return nc.add(base, task_row)
    return base


def routing_log_entry(step: int, layer: str, kind: str,
                      probs_row: np.ndarray, selected: Sequence[int]) -> dict:
    return {
        "step": step,
        "layer": layer,
        "kind": kind,
        "probs": [float(p) for p in probs_row],
        "selected": [int(i) for i in selected],
    }
