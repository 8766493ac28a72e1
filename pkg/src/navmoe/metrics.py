"""Navigation metrics: TL, NE, SR, SPL, nDTW, GP, and their aggregation.

Distances are geodesic (graph shortest-path) except TL, which sums the
executed edges.  nDTW uses the standard monotone dynamic program with
geodesic local cost and exp(-cost / (|ref| * d_th)) normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .envgraph import NavGraph

DEFAULT_SUCCESS_THRESHOLD_M = 3.0
DEFAULT_DTW_THRESHOLD_M = 3.0


@dataclass(frozen=True)
class EpisodeResult:
    executed_path: tuple
    reference_path: tuple
    goal: int

    def __post_init__(self):
        if not self.executed_path or not self.reference_path:
            raise ValueError("paths must be nonempty")


@dataclass(frozen=True)
class MetricsReport:
    tl_m: float
    ne_m: float
    sr: float
    spl: float
    ndtw: float
    gp_m: float
    success_threshold_m: float

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def trajectory_length(path, g: NavGraph) -> float:
    return float(sum(g.edge_length(a, b) for a, b in zip(path, path[1:])))


def navigation_error(path, goal: int, g: NavGraph) -> float:
    return g.geodesic(path[-1], goal)


def success(ne_m: float, threshold_m: float = DEFAULT_SUCCESS_THRESHOLD_M) -> int:
    return 1 if ne_m <= threshold_m else 0


def spl(succ: int, shortest_m: float, executed_m: float) -> float:
    if shortest_m < 0 or executed_m < 0:
        raise ValueError("lengths must be nonnegative")
    denom = max(executed_m, shortest_m)
    if denom == 0.0:
        return float(succ)
    return succ * shortest_m / denom


def ndtw(pred, ref, g: NavGraph, d_th: float = DEFAULT_DTW_THRESHOLD_M) -> float:
    """exp(-DTW(pred, ref) / (|ref| * d_th)) over monotone alignments."""
    if not pred or not ref:
        raise ValueError("paths must be nonempty")
    if d_th <= 0:
        raise ValueError("d_th must be positive")
    n, m = len(pred), len(ref)
    cost = np.full((n, m), np.inf)
    for i in range(n):
        for j in range(m):
            d = g.geodesic(pred[i], ref[j])
            if i == 0 and j == 0:
                prev = 0.0
            elif i == 0:
                prev = cost[0, j - 1]
            elif j == 0:
                prev = cost[i - 1, 0]
            else:
                prev = min(cost[i - 1, j], cost[i, j - 1], cost[i - 1, j - 1])
            cost[i, j] = d + prev
    return float(np.exp(-cost[n - 1, m - 1] / (m * d_th)))


def goal_progress(start: int, end: int, goal: int, g: NavGraph) -> float:
    """Reduction in geodesic distance to the goal over the episode."""
    return g.geodesic(start, goal) - g.geodesic(end, goal)


def evaluate_episode(result: EpisodeResult, g: NavGraph,
                     success_threshold_m: float = DEFAULT_SUCCESS_THRESHOLD_M,
                     d_th: float = DEFAULT_DTW_THRESHOLD_M) -> MetricsReport:
    executed = result.executed_path
    tl = trajectory_length(executed, g)
    ne = navigation_error(executed, result.goal, g)
    sr = success(ne, success_threshold_m)
    shortest = g.geodesic(executed[0], result.goal)
    return MetricsReport(
        tl_m=tl,
        ne_m=ne,
        sr=float(sr),
        spl=spl(sr, shortest, tl),
        ndtw=ndtw(executed, result.reference_path, g, d_th),
        gp_m=goal_progress(executed[0], executed[-1], result.goal, g),
        success_threshold_m=success_threshold_m,
    )


def aggregate(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate zero reports")
    return MetricsReport(**{
        f.name: float(np.mean([getattr(r, f.name) for r in reports]))
        for f in fields(MetricsReport)})


def save_report(path: str, reports) -> MetricsReport:
    """Per-episode JSON lines plus one trailing aggregate line."""
    agg = aggregate(reports)
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        f.write(json.dumps(agg.to_dict(), sort_keys=True) + "\n")
    return agg
