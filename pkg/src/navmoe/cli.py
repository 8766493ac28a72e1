"""Command-line surface: world/episode generation, discretization, training,
evaluation, ablation sweeps, and gradient checks.

Every run writes a manifest (<output>.manifest.json) with the command, its
config snapshot, seed, sha256 hashes of inputs and outputs, and wall-clock
seconds, so any reported number can be traced to exact artifacts.

Exit codes: 0 success, 2 usage, 3 validation failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time

import numpy as np

from . import discretize as disc
from . import envgraph as env
from . import metrics as met
from . import moe as moe_mod
from . import numcore as nc
from . import trainer as tr
from .policy import Policy, PolicyConfig, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4

GRAD_TOL = 1e-4

ROUTING_GRID = list(moe_mod.ROUTING_KINDS) + ["none"]
PLACEMENT_GRID = list(moe_mod.PLACEMENTS)
LAMBDA_GRID = [0.2, 0.5, 0.8, 1.0]
NK_GRID = [(2, 1), (3, 1), (3, 2), (4, 2)]


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_out: str, command: str, config: dict, seed,
                    inputs: list[str], outputs: list[str], started: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": {p: _sha256(p) for p in outputs},
        "wall_clock_s": time.monotonic() - started,
    }
    with open(primary_out + ".manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


# -- commands ----------------------------------------------------------------


def cmd_gen_world(args) -> int:
    started = time.monotonic()
    g = env.generate_world(args.seed, args.nodes, args.degree, args.landmarks)
    env.save_world(args.out, g)
    _write_manifest(args.out, "gen-world",
                    {"seed": args.seed, "nodes": args.nodes,
                     "degree": args.degree, "landmarks": args.landmarks},
                    args.seed, [], [args.out], started)
    print(f"wrote {args.out}: {len(g.node_ids)} nodes, {len(g.edges)} edges")
    return EXIT_OK


def cmd_gen_episodes(args) -> int:
    started = time.monotonic()
    g = env.load_world(args.world)
    grans = env.GRANULARITIES if args.granularity == "all" else (args.granularity,)
    episodes = []
    for gran in grans:
        for i in range(args.n):
            episodes.append(env.generate_episode(g, args.seed * 100003 + i, gran))
    env.save_episodes(args.out, episodes)
    _write_manifest(args.out, "gen-episodes",
                    {"world": args.world, "n": args.n,
                     "granularity": args.granularity, "seed": args.seed},
                    args.seed, [args.world], [args.out], started)
    print(f"wrote {args.out}: {len(episodes)} episodes")
    return EXIT_OK


def cmd_discretize(args) -> int:
    started = time.monotonic()
    g = env.load_world(args.world)
    trajectories = disc.load_trajectories(args.traj)
    paths, stats = disc.snap_batch(g, trajectories, args.threshold)
    disc.save_snap_results(args.out, paths, stats)
    _write_manifest(args.out, "discretize",
                    {"world": args.world, "traj": args.traj,
                     "threshold": args.threshold},
                    None, [args.world, args.traj], [args.out], started)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def _load_train_configs(args) -> tuple[tr.TrainConfig, PolicyConfig]:
    train_doc, policy_doc = {}, {}
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
        train_doc = doc.get("train", {})
        policy_doc = doc.get("policy", {})
    overrides = {
        "algorithm": args.algorithm, "batch_mode": args.batch_mode,
        "balance_coef": args.balance_coef, "seed": args.seed,
        "updates": args.updates, "lr": args.lr,
    }
    train_doc.update({k: v for k, v in overrides.items() if v is not None})
    p_overrides = {"moe_placement": args.placement, "routing_kind": args.routing,
                   "n_experts": args.n_experts, "k": args.k}
    policy_doc.update({k: v for k, v in p_overrides.items() if v is not None})
    return tr.TrainConfig.from_dict(train_doc), PolicyConfig.from_dict(policy_doc)


def cmd_train(args) -> int:
    started = time.monotonic()
    train_cfg, policy_cfg = _load_train_configs(args)
    worlds = [env.load_world(p) for p in args.worlds]
    with open(args.log, "w") as log_f:
        policy = tr.train(train_cfg, policy_cfg, worlds, log_file=log_f)
    save_checkpoint(args.out_checkpoint, policy)
    inputs = list(args.worlds) + ([args.config] if args.config else [])
    _write_manifest(args.out_checkpoint, "train",
                    {"train": train_cfg.to_dict(), "policy": policy_cfg.to_dict()},
                    train_cfg.seed, inputs, [args.out_checkpoint, args.log], started)
    print(f"wrote {args.out_checkpoint} and {args.log}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.monotonic()
    policy = load_checkpoint(args.checkpoint)
    g = env.load_world(args.world)
    episodes = [(g, state, instr) for state, instr in env.load_episodes(args.episodes)]
    if not episodes:
        raise ValueError(f"no episodes in {args.episodes}")
    reports, agg = tr.evaluate_policy(policy, episodes, max_steps=args.max_steps)
    met.save_report(args.out_report, reports)
    _write_manifest(args.out_report, "eval",
                    {"checkpoint": args.checkpoint, "world": args.world,
                     "episodes": args.episodes, "max_steps": args.max_steps},
                    None, [args.checkpoint, args.world, args.episodes],
                    [args.out_report], started)
    print(json.dumps(agg.to_dict(), sort_keys=True))
    return EXIT_OK


def _parse_grid(axis: str, raw: str | None) -> list:
    if raw is None:
        return {"routing": ROUTING_GRID, "placement": PLACEMENT_GRID,
                "lambda": LAMBDA_GRID, "nk": NK_GRID}[axis]
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if axis == "lambda":
        return [float(s) for s in items]
    if axis == "nk":
        pairs = []
        for s in items:
            n, k = s.split(":")
            pairs.append((int(n), int(k)))
        return pairs
    return items


def _cell_configs(axis: str, value, base_train: tr.TrainConfig,
                  base_policy: PolicyConfig) -> tuple[tr.TrainConfig, PolicyConfig]:
    train_doc = base_train.to_dict()
    policy_doc = base_policy.to_dict()
    if axis == "routing":
        if value == "none":
            policy_doc["moe_placement"] = "none"
        else:
            policy_doc["routing_kind"] = value
    elif axis == "placement":
        policy_doc["moe_placement"] = value
    elif axis == "lambda":
        train_doc["balance_coef"] = value
    elif axis == "nk":
        policy_doc["n_experts"], policy_doc["k"] = value
    return tr.TrainConfig.from_dict(train_doc), PolicyConfig.from_dict(policy_doc)


def _render_table(headers: list[str], rows: list[list]) -> str:
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    started = time.monotonic()
    grid = _parse_grid(args.axis, args.grid)
    worlds = [env.load_world(p) for p in args.worlds]
    eval_worlds = [env.generate_world(args.eval_seed + i, args.eval_nodes, 3.0, 6)
                   for i in range(args.eval_worlds)]
    eval_episodes = []
    for w_idx, g in enumerate(eval_worlds):
        for gran in env.GRANULARITIES:
            for i in range(args.episodes_per_world):
                state, instr = env.generate_episode(
                    g, args.eval_seed * 1009 + w_idx * 101 + i, gran)
                eval_episodes.append((g, state, instr))

    base_train = tr.TrainConfig(seed=args.seed, updates=args.updates,
                                balance_coef=args.balance_coef)
    base_policy = PolicyConfig()
    cells = []
    for value in grid:
        train_cfg, policy_cfg = _cell_configs(args.axis, value, base_train, base_policy)
        policy = tr.train(train_cfg, policy_cfg, worlds)
        _, agg = tr.evaluate_policy(policy, eval_episodes, max_steps=train_cfg.max_steps)
        label = f"{value[0]}:{value[1]}" if args.axis == "nk" else str(value)
        cells.append({"value": label, "metrics": agg.to_dict()})
        print(f"[{args.axis}={label}] sr={agg.sr:.3f} spl={agg.spl:.3f}")

    doc = {"axis": args.axis, "seed": args.seed, "updates": args.updates,
           "cells": cells}
    with open(args.out, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    headers = [args.axis, "SR", "SPL", "nDTW", "NE", "TL", "GP"]
    rows = [[c["value"]] + [f"{c['metrics'][k]:.3f}" for k in
                            ("sr", "spl", "ndtw", "ne_m", "tl_m", "gp_m")]
            for c in cells]
    table = _render_table(headers, rows)
    with open(args.out + ".txt", "w") as f:
        f.write(table + "\n")
    print(table)
    _write_manifest(args.out, "ablate",
                    {"axis": args.axis, "grid": [c["value"] for c in cells],
                     "updates": args.updates, "seed": args.seed},
                    args.seed, list(args.worlds), [args.out, args.out + ".txt"],
                    started)
    return EXIT_OK


# -- gradient checks -----------------------------------------------------------


def _layer_checks(trial: int):
    """One (name, fn, wrt) triple per differentiable numcore/moe operation."""
    rng = np.random.default_rng([808, trial])

    def t(rows, cols):
        return nc.parameter(rng.standard_normal((rows, cols)))

    checks = []
    a, b = t(3, 4), t(4, 2)
    checks.append(("matmul", lambda: nc.mean_all(nc.matmul(a, b)), [a, b]))
    c, d = t(3, 4), t(1, 4)
    checks.append(("add_broadcast", lambda: nc.mean_all(nc.add(c, d)), [c, d]))
    e, f = t(3, 4), t(3, 1)
    checks.append(("mul_broadcast", lambda: nc.mean_all(nc.mul(e, f)), [e, f]))
    g = t(3, 4)
    checks.append(("scale", lambda: nc.mean_all(nc.scale(g, -2.5)), [g]))
    h = t(3, 4)
    checks.append(("relu", lambda: nc.mean_all(nc.relu(h)), [h]))
    i = t(3, 4)
    checks.append(("sigmoid", lambda: nc.mean_all(nc.sigmoid(i)), [i]))
    j = nc.parameter(np.abs(rng.standard_normal((3, 4))) + 0.5)
    checks.append(("log", lambda: nc.mean_all(nc.log(j)), [j]))
    k = t(3, 5)
    k_mix = nc.constant(rng.standard_normal((3, 5)))
    checks.append(("softmax_row", lambda: nc.mean_all(
        nc.mul(nc.softmax_row(k), k_mix)), [k]))
    l = t(3, 4)
    checks.append(("sum_all", lambda: nc.sum_all(l), [l]))
    m = t(4, 3)
    checks.append(("mean_rows", lambda: nc.mean_all(nc.mean_rows(m)), [m]))
    n = t(3, 4)
    checks.append(("transpose", lambda: nc.mean_all(nc.transpose(n)), [n]))
    o = t(5, 3)
    checks.append(("slice_rows", lambda: nc.mean_all(nc.slice_rows(o, 1, 4)), [o]))
    p = t(3, 6)
    checks.append(("slice_cols", lambda: nc.mean_all(nc.slice_cols(p, 2, 5)), [p]))
    q, r = t(2, 4), t(3, 4)
    checks.append(("concat_rows", lambda: nc.mean_all(nc.concat_rows([q, r])), [q, r]))
    s, u = t(3, 2), t(3, 3)
    checks.append(("concat_cols", lambda: nc.mean_all(nc.concat_cols([s, u])), [s, u]))
    v = t(6, 4)
    checks.append(("take_rows", lambda: nc.mean_all(nc.take_rows(v, [1, 3, 1])), [v]))
    w = t(3, 4)
    checks.append(("pick", lambda: nc.pick(w, 1, 2), [w]))
    x = t(1, 5)
    checks.append(("cross_entropy_logits",
                   lambda: nc.cross_entropy_logits(x, 2), [x]))
    y, yw, yb = t(3, 4), t(4, 2), t(1, 2)
    checks.append(("linear", lambda: nc.mean_all(nc.linear(y, yw, yb)), [y, yw, yb]))
    xq, xkv = t(3, 4), t(5, 4)
    wq, wk, wv = t(4, 4), t(4, 4), t(4, 4)
    checks.append(("cross_attention", lambda: nc.mean_all(
        nc.cross_attention(xq, xkv, wq, wk, wv, n_heads=2)),
        [xq, xkv, wq, wk, wv]))
    gx = t(4, 4)
    gq, gk, gv = t(4, 4), t(4, 4), t(4, 4)
    aff = nc.constant(-np.abs(rng.standard_normal((4, 4))))
    checks.append(("gasa", lambda: nc.mean_all(
        nc.gasa(gx, gq, gk, gv, aff, n_heads=2)), [gx, gq, gk, gv]))
    fx = t(3, 4)
    f1, fb1, f2, fb2 = t(4, 6), t(1, 6), t(6, 2), t(1, 2)
    checks.append(("ffn", lambda: nc.mean_all(nc.ffn(fx, f1, fb1, f2, fb2)),
                   [fx, f1, fb1, f2, fb2]))

    def moe_fixture(k_sel):
        router = t(4, 3)
        experts = [{"w": t(4, 4)} for _ in range(3)]
        layer = moe_mod.MoELayer(router, experts, k_sel, "visual_query")
        return layer, [router] + [ex["w"] for ex in experts]

    layer_s, wrt_s = moe_fixture(2)
    xs, xr = t(3, 4), t(1, 4)
    checks.append(("moe_state_routing", lambda: nc.mean_all(
        moe_mod.moe_forward(layer_s, xs, xr)[0]), wrt_s + [xs, xr]))
    layer_t, wrt_t = moe_fixture(2)
    xt = t(3, 4)
    checks.append(("moe_token_routing", lambda: nc.mean_all(
        moe_mod.moe_forward(layer_t, xt, xt)[0]), wrt_t + [xt]))
    layer_b, wrt_b = moe_fixture(2)
    xb = t(4, 4)
    checks.append(("balance_loss_term", lambda: moe_mod.balance_loss_term(
        [moe_mod.route(layer_b, xb)], 3), [layer_b.router_w, xb]))
    wm = t(8, 4)
    table = t(3, 4)
    cls_row, views = t(1, 4), t(6, 4)
    checks.append(("routing_feature_multimodal_task", lambda: nc.mean_all(
        moe_mod.build_routing_feature("multimodal_task", task_id=1, text_cls=cls_row,
                                      view_features=views, w_m=wm, task_table=table)),
        [wm, table, cls_row, views]))
    return checks


def _policy_fixture():
    g = env.generate_world(seed=11, n_nodes=4, mean_degree=2, n_landmarks=2)
    nodes = g.node_ids
    goal = nodes[-1]
    instr = env.Instruction(
        tokens=(env.landmark_token(3), env.landmark_token(5), env.TOKEN_EOS),
        granularity="coarse", goal=goal,
        reference_path=tuple(g.shortest_path(nodes[0], goal)[0]))
    state = env.AgentState(node=nodes[0], heading=0.0)
    return g, state, instr


def run_gradcheck(scope: str, trials: int, eps: float = 1e-5,
                  report=print) -> float:
    """Max relative error across all checks in the scope."""
    worst = 0.0
    if scope == "layer":
        for trial in range(trials):
            for name, fn, wrt in _layer_checks(trial):
                err = nc.grad_check(fn, wrt, eps=eps)
                worst = max(worst, err)
                if trial == 0:
                    report(f"  {name}: max rel err {err:.3e}")
    else:
        g, state, instr = _policy_fixture()
        policy = Policy(PolicyConfig(moe_placement="visual_query",
                                     routing_kind="multimodal"), seed=3)

        def loss_fn():
            return tr.rollout(policy, g, state, instr, max_steps=3,
                              balance_coef=0.8).loss

        worst = nc.grad_check(loss_fn, policy.params.tensors(), eps=eps,
                              max_coords_per_tensor=2, seed=0)
        report(f"  policy end-to-end: max rel err {worst:.3e}")
    return worst


def cmd_gradcheck(args) -> int:
    started = time.monotonic()
    worst = run_gradcheck(args.scope, args.trials)
    print(f"scope={args.scope} worst rel err {worst:.3e} "
          f"({time.monotonic() - started:.1f}s)")
    if worst >= GRAD_TOL or not np.isfinite(worst):
        print(f"FAIL: exceeds {GRAD_TOL}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navmoe",
        description="Graph-world language navigation with state-routed MoE policies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic world")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--degree", type=float, default=3.0)
    p.add_argument("--landmarks", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("gen-episodes", help="generate instruction episodes")
    p.add_argument("--world", required=True)
    p.add_argument("--n", type=int, default=10, help="episodes per granularity")
    p.add_argument("--granularity", choices=list(env.GRANULARITIES) + ["all"],
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_episodes)

    p = sub.add_parser("discretize", help="snap continuous trajectories to a world")
    p.add_argument("--world", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--threshold", type=float,
                   default=disc.DEFAULT_ENDPOINT_THRESHOLD_M)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_discretize)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", help="JSON file with train/policy sections")
    p.add_argument("--worlds", nargs="+", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--algorithm", choices=["imitation", "dagger"])
    p.add_argument("--batch-mode", choices=["sequential", "mixed"])
    p.add_argument("--lambda", dest="balance_coef", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--updates", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--placement", choices=["none"] + PLACEMENT_GRID)
    p.add_argument("--routing", choices=list(moe_mod.ROUTING_KINDS))
    p.add_argument("--n-experts", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--max-steps", type=int, default=15)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis with shared seeds")
    p.add_argument("--axis", choices=["routing", "placement", "lambda", "nk"],
                   required=True)
    p.add_argument("--grid", help="comma-separated cells (nk as N:k)")
    p.add_argument("--worlds", nargs="+", required=True)
    p.add_argument("--updates", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="balance_coef", type=float, default=0.8)
    p.add_argument("--eval-worlds", type=int, default=3)
    p.add_argument("--eval-nodes", type=int, default=40)
    p.add_argument("--eval-seed", type=int, default=9000)
    p.add_argument("--episodes-per-world", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--scope", choices=["layer", "policy"], default="layer")
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
