"""Snap continuous trajectories onto graph nodes with rejection rules.

Each point maps to its nearest node (ties to the smaller id), consecutive
duplicates merge, and the result is rejected when consecutive snapped nodes
are not adjacent (disconnected) or when the final snapped node lies more
than the threshold from the trajectory's true endpoint (endpoint_too_far).
An endpoint error of exactly the threshold is kept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .envgraph import NavGraph

DEFAULT_ENDPOINT_THRESHOLD_M = 0.5


@dataclass(frozen=True)
class ContinuousTrajectory:
    points: tuple
    source_id: str = ""

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("trajectory needs at least one point")


@dataclass(frozen=True)
class DiscretePath:
    nodes: tuple
    endpoint_error_m: float
    source_id: str = ""


@dataclass(frozen=True)
class Rejection:
    reason: str
    source_id: str = ""

    def __post_init__(self):
        if self.reason not in ("disconnected", "endpoint_too_far"):
            raise ValueError(f"unknown rejection reason {self.reason!r}")


def nearest_node(g: NavGraph, point) -> int:
    """Nearest node by Euclidean distance; equidistant ties take the smaller id."""
    p = np.asarray(point, dtype=np.float64)
    ids = g.node_ids
    dists = [float(np.linalg.norm(g.positions[n] - p)) for n in ids]
    return ids[int(np.argmin(dists))]


def snap_trajectory(g: NavGraph, traj: ContinuousTrajectory,
                    threshold_m: float = DEFAULT_ENDPOINT_THRESHOLD_M):
    """DiscretePath for an accepted trajectory, else a Rejection."""
    snapped = [nearest_node(g, p) for p in traj.points]
    nodes = [snapped[0]]
    for n in snapped[1:]:
        if n != nodes[-1]:
            nodes.append(n)
    for a, b in zip(nodes, nodes[1:]):
        if not g.has_edge(a, b):
            return Rejection("disconnected", source_id=traj.source_id)
    endpoint_error = float(np.linalg.norm(
        g.positions[nodes[-1]] - np.asarray(traj.points[-1], dtype=np.float64)))
    if endpoint_error > threshold_m:
        return Rejection("endpoint_too_far", source_id=traj.source_id)
    return DiscretePath(nodes=tuple(nodes), endpoint_error_m=endpoint_error,
                        source_id=traj.source_id)


def snap_batch(g: NavGraph, trajectories,
               threshold_m: float = DEFAULT_ENDPOINT_THRESHOLD_M):
    """Elementwise snap; returns (accepted paths, outcome stats)."""
    paths: list[DiscretePath] = []
    rejected = {"disconnected": 0, "endpoint_too_far": 0}
    for traj in trajectories:
        result = snap_trajectory(g, traj, threshold_m)
        if isinstance(result, DiscretePath):
            paths.append(result)
        else:
            rejected[result.reason] += 1
    stats = {
        "kept": len(paths),
        "rejected_disconnected": rejected["disconnected"],
        "rejected_endpoint": rejected["endpoint_too_far"],
    }
    if paths:
        stats["mean_len"] = float(np.mean([len(p.nodes) for p in paths]))
    return paths, stats


def load_trajectories(path: str) -> list[ContinuousTrajectory]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            out.append(ContinuousTrajectory(
                points=tuple(tuple(float(x) for x in p) for p in doc["points"]),
                source_id=str(doc.get("source_id", ""))))
    return out


def save_snap_results(path: str, paths, stats: dict) -> None:
    """Accepted paths as JSON lines, then one trailing stats object."""
    with open(path, "w") as f:
        for p in paths:
            f.write(json.dumps({"source_id": p.source_id, "nodes": list(p.nodes),
                                "endpoint_error_m": p.endpoint_error_m},
                               sort_keys=True) + "\n")
        f.write(json.dumps({"stats": stats}, sort_keys=True) + "\n")
