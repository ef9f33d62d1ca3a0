"""Forward-pass timing against the number of edges."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .model import Graph, SakeModel, make_state, model_forward


def random_graph(num_nodes: int, num_edges: int, seed) -> Graph:
    rng = np.random.default_rng(seed)
    possible = num_nodes * (num_nodes - 1)
    if num_edges > possible:
        raise ValueError(f"{num_edges} edges requested, only {possible} possible")
    flat = rng.choice(possible, size=num_edges, replace=False)
    src = flat // (num_nodes - 1)
    dst = flat % (num_nodes - 1)
    dst = dst + (dst >= src)
    return Graph(src, dst, num_nodes)


def time_forward(model: SakeModel, state, repeats: int = 5) -> float:
    """Best-of-``repeats`` forward wall time after one warm-up call."""
    with T.no_grad():
        model_forward(model, state)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            model_forward(model, state)
            best = min(best, time.perf_counter() - t0)
    return best


def run_bench(
    num_nodes: int = 200,
    base_edges: int = 5000,
    factors=(1, 2, 4),
    hidden: int = 32,
    depth: int = 2,
    dim: int = 3,
    repeats: int = 5,
    seed: int = 2666,
) -> dict:
    model = SakeModel(2, hidden=hidden, depth=depth, dim=dim, seed=seed)
    rng = np.random.default_rng(seed)
    attr = rng.standard_normal((num_nodes, 2))
    x = 3.0 * rng.standard_normal((num_nodes, dim))
    v = rng.standard_normal((num_nodes, dim))
    edges, times, states = [], [], []
    for f in factors:
        g = random_graph(num_nodes, base_edges * f, seed + f)
        state = make_state(attr, x, v, g)
        states.append(state)
        edges.append(g.num_edges)
        times.append(time_forward(model, state, repeats))
    slope = np.polyfit(np.log(edges), np.log(times), 1)[0] if len(edges) > 1 else np.nan

    # per-stage accounting on the largest graph
    with T.no_grad(), T.profile_ops() as prof:
        t0 = time.perf_counter()
        model_forward(model, states[-1])
        total = time.perf_counter() - t0
    stages = dict(sorted(prof.items(), key=lambda kv: -kv[1]))
    return {
        "edges": edges,
        "seconds": times,
        "exponent": float(slope),
        "stage_seconds": stages,
        "stage_total": total,
        "stage_coverage": sum(stages.values()) / total,
    }


def format_bench(rep: dict) -> str:
    lines = ["edges\tseconds"]
    lines += [f"{e}\t{t:.6f}" for e, t in zip(rep["edges"], rep["seconds"])]
    lines.append(f"exponent\t{rep['exponent']:.3f}")
    lines += [f"stage:{k}\t{v:.6f}" for k, v in rep["stage_seconds"].items()]
    lines.append(f"stage_coverage\t{rep['stage_coverage']:.3f}")
    return "\n".join(lines)
