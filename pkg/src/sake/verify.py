"""Property checks: equivariance, finite differences, Jacobian log-determinants,
and the suites run by ``sake verify``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .geometry import EnTransform, apply_transform, compute_edge_geometry, pairwise_distances, random_en_transform
from .model import Graph, GraphState, SakeLayer, SakeModel, complete_graph, make_state, model_forward, predict_energy_forces, theorem1_lambda_oracle
from .tensor import Tensor


class SingularJacobianError(ArithmeticError):
    pass


@dataclass
class PropertyResult:
    suite: str
    seed: int
    deviation: float
    tolerance: float
    passed: bool
    expect_violation: bool = False  # mutation controls pass by exceeding the tolerance

    @classmethod
    def of(cls, suite, seed, deviation, tolerance, expect_violation=False):
        ok = deviation > tolerance if expect_violation else deviation <= tolerance
        return cls(suite, int(seed), float(deviation), float(tolerance), bool(ok), expect_violation)

    def line(self) -> str:
        return f"{self.suite}\t{self.seed}\t{self.deviation:.3e}\t{self.tolerance:.1e}\t{'pass' if self.passed else 'FAIL'}"


def format_report(results: Iterable[PropertyResult]) -> str:
    return "\n".join(r.line() for r in results)


# --- equivariance ----------------------------------------------------------------


def random_state(n: int, seed, num_nodes: int = 5, attr_dim: int = 2, graph: Graph | None = None) -> GraphState:
    rng = np.random.default_rng(seed)
    graph = complete_graph(num_nodes) if graph is None else graph
    return make_state(
        rng.standard_normal((graph.num_nodes, attr_dim)),
        rng.standard_normal((graph.num_nodes, n)),
        rng.standard_normal((graph.num_nodes, n)),
        graph,
    )


def transform_state(t: EnTransform, state: GraphState) -> GraphState:
    x, v = apply_transform(t, state.x, state.v)
    perm = t.permutation
    return GraphState(
        None if state.h is None else Tensor(state.h.data[perm]),
        Tensor(x),
        Tensor(v),
        state.graph.permuted(perm),
        None if state.node_attr is None else Tensor(state.node_attr.data[perm]),
    )


def equivariance_deviation(fn: Callable[[GraphState], GraphState], state: GraphState, t: EnTransform) -> float:
    """max |fn(T s) - S fn(s)| relative to the output scale (floored at 1)."""
    out = fn(state)
    out_t = fn(transform_state(t, state))
    x_exp, v_exp = apply_transform(t, out.x, out.v)
    pairs = [(out_t.x.data, x_exp), (out_t.v.data, v_exp)]
    if out.h is not None:
        pairs.append((out_t.h.data, out.h.data[t.permutation]))
    dev = max(float(np.max(np.abs(a - b))) for a, b in pairs)
    scale = max(1.0, max(float(np.max(np.abs(b))) for _, b in pairs))
    return dev / scale


def check_equivariance(
    fn: Callable[[GraphState], GraphState],
    n: int,
    seeds: int = 20,
    tol: float = 1e-8,
    num_nodes: int = 5,
    attr_dim: int = 2,
    suite: str = "equivariance",
    first_seed: int = 0,
) -> PropertyResult:
    worst, worst_seed = 0.0, first_seed
    with T.no_grad():
        for seed in range(first_seed, first_seed + seeds):
            state = random_state(n, seed, num_nodes, attr_dim)
            t = random_en_transform(n, 10_000 + seed, num_nodes)
            dev = equivariance_deviation(fn, state, t)
            if dev > worst or seed == first_seed:
                worst, worst_seed = max(dev, worst), seed
    return PropertyResult.of(suite, worst_seed, worst, tol)


# --- finite differences --------------------------------------------------------


def finite_diff_grad(scalar_fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``point``."""
    p = np.array(point, dtype=np.float64)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar_fn(p.copy())
        flat[i] = orig - h
        down = scalar_fn(p.copy())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """max |a-b| / max(|b|, floor); below ``floor`` the comparison is absolute."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Error normalized by the gradient's overall magnitude."""
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-7))


def centered_basis(num_nodes: int, dim: int) -> np.ndarray:
    """Orthonormal basis [N*dim, (N-1)*dim] of zero-center configurations (row-major)."""
    center = np.eye(num_nodes) - 1.0 / num_nodes
    u, s, _ = np.linalg.svd(center)
    b = u[:, s > 0.5]
    return np.kron(b, np.eye(dim))


def numeric_subspace_logdet(fn: Callable[[np.ndarray], np.ndarray], point, basis: np.ndarray, h: float = 1e-5) -> float:
    """log|det| of the finite-difference Jacobian of ``fn`` restricted to ``basis``."""
    p = np.asarray(point, dtype=np.float64).reshape(-1)
    cols = []
    for j in range(basis.shape[1]):
        d = basis[:, j] * h
        cols.append(basis.T @ (np.ravel(fn(p + d)) - np.ravel(fn(p - d))) / (2 * h))
    jac = np.stack(cols, axis=1)
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0 or not np.isfinite(logdet):
        raise SingularJacobianError(f"Jacobian is singular (smallest singular value {np.linalg.svd(jac, compute_uv=False).min():.3e})")
    return float(logdet)


# --- mutation controls ---------------------------------------------------------


class CoordinateLeakLayer(SakeLayer):
    """Broken on purpose: raw coordinates enter the node embedding."""

    def __call__(self, state: GraphState) -> GraphState:
        out = super().__call__(state)
        n = state.x.shape[1]
        pad = np.zeros((n, self.hidden))
        pad[:, :n] = np.eye(n)[:, : self.hidden]
        return replace(out, h=out.h + state.x @ Tensor(pad))


def direction_norm_deviation(layer: SakeLayer, seed: int, n: int = 3) -> float:
    """max | |f(e)| - 1 | over edges of a random cloud; f must return unit vectors."""
    rng = np.random.default_rng(seed)
    x = 2.0 * rng.standard_normal((6, n))
    g = complete_graph(6)
    geo = compute_edge_geometry(Tensor(x), g.src, g.dst)
    norms = np.linalg.norm(layer.directions(geo).data, axis=1)
    return float(np.max(np.abs(norms - 1.0)))


# --- suites --------------------------------------------------------------------

SUITES = ("equivariance", "gradient", "theorem1", "normalization", "flow_roundtrip", "logdet", "scaling", "mutation")


def suite_equivariance(seeds: int = 200, dims=(2, 3, 5)) -> list[PropertyResult]:
    out = []
    for n in dims:
        model = SakeModel(2, hidden=16, depth=2, dim=n, seed=n)
        out.append(check_equivariance(lambda s: model_forward(model, s), n, seeds, 1e-8, suite=f"equivariance[n={n}]"))
    return out


def energy_force_error(model: SakeModel, state: GraphState, h: float = 1e-5) -> float:
    _, force = predict_energy_forces(model, state)

    def energy(xflat):
        with T.no_grad():
            out = model_forward(model, replace(state, x=Tensor(xflat)))
            return float(np.sum(model.energy_head(out.h).data))

    numeric = -finite_diff_grad(energy, state.x.data, h)
    return gradient_error(force, numeric)


def suite_gradient(seeds: int = 20) -> list[PropertyResult]:
    model = SakeModel(2, hidden=16, depth=2, dim=3, seed=7)
    worst, worst_seed = 0.0, 0
    for seed in range(seeds):
        st = random_state(3, seed, num_nodes=5)
        st = replace(st, v=Tensor(np.zeros_like(st.v.data)))
        err = energy_force_error(model, st)
        if err >= worst:
            worst, worst_seed = err, seed
    return [PropertyResult.of("gradient", worst_seed, worst, 1e-4)]


def suite_theorem1(seeds: int = 100) -> list[PropertyResult]:
    worst, worst_seed = 0.0, 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 9))
        x = rng.standard_normal((m + 1, 3))
        rec = theorem1_lambda_oracle(x, 0)
        d = pairwise_distances(x)
        expected = d[1:, 1:].copy()
        expected[np.diag_indices(m)] = d[0, 1:]
        err = float(np.max(np.abs(rec - expected)))
        if err >= worst:
            worst, worst_seed = err, seed
    return [PropertyResult.of("theorem1", worst_seed, worst, 1e-10)]


def suite_normalization(seeds: int = 10) -> list[PropertyResult]:
    layer = SakeLayer(np.random.default_rng(0), 8)
    worst = max(direction_norm_deviation(layer, s) for s in range(seeds))
    return [PropertyResult.of("normalization", 0, worst, 1e-9)]


def suite_mutation(seeds: int = 20) -> list[PropertyResult]:
    leak = SakeModel(2, hidden=16, depth=2, dim=3, seed=1, layer_cls=CoordinateLeakLayer)
    leak_res = check_equivariance(lambda s: model_forward(leak, s), 3, seeds, 1e-8)
    skip = SakeLayer(np.random.default_rng(0), 8, normalize_directions=False)
    skip_model = SakeModel(2, hidden=16, depth=2, dim=3, seed=1)
    for layer in skip_model.layers:
        layer.normalize_directions = False
    skip_eq = check_equivariance(lambda s: model_forward(skip_model, s), 3, seeds, 1e-8)
    return [
        PropertyResult.of("mutation:coordinate_leak", leak_res.seed, leak_res.deviation, 1e-8, expect_violation=True),
        PropertyResult.of("mutation:skip_normalization/equivariance", skip_eq.seed, skip_eq.deviation, 1e-8),
        PropertyResult.of(
            "mutation:skip_normalization/normalization", 0, direction_norm_deviation(skip, 0), 1e-9, expect_violation=True
        ),
    ]


def suite_flow_roundtrip(seeds: int = 50) -> list[PropertyResult]:
    from .flow import FlowStack, centered_normal, start_state

    worst_rt, worst_center, seed_rt, seed_c = 0.0, 0.0, 0, 0
    for seed in range(seeds):
        stack = FlowStack(4, 3, depth=4, hidden=8, sake_depth=1, seed=seed, identity_init=False)
        g = stack.graph()
        rng = np.random.default_rng(seed)
        s0 = start_state(centered_normal(rng, g, 3), centered_normal(rng, g, 3), g)
        with T.no_grad():
            fwd = stack.forward(s0)
            back = stack.inverse(fwd)
        rt = max(np.abs(back.z.data - s0.z.data).max(), np.abs(back.a.data - s0.a.data).max(), abs(back.logdet.data).max())
        center = max(np.abs(fwd.z.data.sum(0)).max(), np.abs(fwd.a.data.sum(0)).max())
        if rt >= worst_rt:
            worst_rt, seed_rt = rt, seed
        if center >= worst_center:
            worst_center, seed_c = center, seed
    return [
        PropertyResult.of("flow_roundtrip", seed_rt, worst_rt, 1e-6),
        PropertyResult.of("flow_roundtrip:center", seed_c, worst_center, 1e-8),
    ]


def coupling_logdet_gap(seed: int, num_nodes: int = 3, dim: int = 2, depth: int = 1) -> float:
    from .flow import FlowStack, centered_normal, start_state

    stack = FlowStack(num_nodes, dim, depth=depth, hidden=8, sake_depth=1, seed=seed, identity_init=False)
    g = stack.graph()
    rng = np.random.default_rng(seed)
    z, a = centered_normal(rng, g, dim), centered_normal(rng, g, dim)
    size = num_nodes * dim

    def fn(flat):
        with T.no_grad():
            s = stack.forward(start_state(Tensor(flat[:size].reshape(num_nodes, dim)), Tensor(flat[size:].reshape(num_nodes, dim)), g))
        return np.concatenate([s.z.data.ravel(), s.a.data.ravel()])

    b = centered_basis(num_nodes, dim)
    zero = np.zeros_like(b)
    basis = np.block([[b, zero], [zero, b]])
    numeric = numeric_subspace_logdet(fn, np.concatenate([z.data.ravel(), a.data.ravel()]), basis)
    with T.no_grad():
        accumulated = float(stack.forward(start_state(z, a, g)).logdet.data[0])
    return abs(numeric - accumulated)


def suite_logdet(seeds: int = 10) -> list[PropertyResult]:
    gaps = [coupling_logdet_gap(s, depth=4) for s in range(seeds)]
    k = int(np.argmax(gaps))
    return [PropertyResult.of("logdet", k, gaps[k], 1e-4)]


def suite_scaling() -> list[PropertyResult]:
    from .bench import run_bench

    rep = run_bench()
    return [PropertyResult.of("scaling", 0, abs(rep["exponent"] - 1.05), 0.25)]


_RUNNERS = {
    "equivariance": suite_equivariance,
    "gradient": suite_gradient,
    "theorem1": suite_theorem1,
    "normalization": suite_normalization,
    "flow_roundtrip": suite_flow_roundtrip,
    "logdet": suite_logdet,
    "scaling": suite_scaling,
    "mutation": suite_mutation,
}


def run_verify(suites: Iterable[str] | None = None) -> list[PropertyResult]:
    names = list(SUITES if suites is None else suites)
    unknown = [s for s in names if s not in _RUNNERS]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {SUITES}")
    results = []
    for name in names:
        results.extend(_RUNNERS[name]())
    return results
