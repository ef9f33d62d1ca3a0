"""Augmented normalizing flow from alternating SAKE-parametrized affine couplings.

The state is a pair (z, a) of zero-centered point clouds of the same shape.
A coupling keeps one half fixed and maps the other half to
``exp(S) * passive + T`` with ``S`` one invariant scalar per graph and ``T``
an equivariant, centered displacement, both computed by a SAKE model run on
the fixed half.  Everything works on batched graphs; log-densities and
log-determinants are per graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Graph, GraphState, SakeModel, batch_graphs, complete_graph, segment_mean_nodes
from .nn import Dense, Module
from .tensor import Tensor

LOG_2PI = np.log(2.0 * np.pi)
MAX_LOG_SCALE = 20.0


class ScaleRangeError(ArithmeticError):
    """Raised when a coupling's log-scale leaves [-20, 20]."""


@dataclass
class AugmentedState:
    z: Tensor
    a: Tensor
    logdet: Tensor  # [G]
    graph: Graph


def _graph_for(x: Tensor, graph: Graph | None) -> Graph:
    return complete_graph(x.shape[0]) if graph is None else graph


def _node_counts(graph: Graph) -> np.ndarray:
    return np.bincount(graph.node_graph, minlength=graph.num_graphs).astype(np.float64)


def project_center(x, graph: Graph | None = None) -> Tensor:
    """Subtract each graph's center of gravity."""
    x = T.as_tensor(x)
    return x - segment_mean_nodes(x, _graph_for(x, graph))


def centered_gaussian_logp(z, graph: Graph | None = None, tol: float = 1e-9) -> Tensor:
    """Standard normal log-density on the zero-center subspace, one value per graph."""
    z = T.as_tensor(z)
    graph = _graph_for(z, graph)
    center = graph.members @ z.data
    if np.any(np.abs(center) > tol * np.maximum(1.0, _node_counts(graph))[:, None]):
        raise ValueError(f"input is not centered: max |sum| = {np.abs(center).max():.3e}")
    dims = (_node_counts(graph) - 1.0) * z.shape[1]
    sq = T.segment_sum(T.reduce_sum(T.square(z), axis=1), graph.node_graph, graph.num_graphs, graph.members)
    return sq * -0.5 - dims * (0.5 * LOG_2PI)


class CouplingLayer(Module):
    def __init__(self, direction: str, net: SakeModel, rng: np.random.Generator, identity_init: bool = True):
        if direction not in ("z->a", "a->z"):
            raise ValueError(f"direction must be 'z->a' or 'a->z', got {direction!r}")
        self.direction = direction
        self.net = net
        self.scale_head = Dense(rng, net.metadata["hidden"], 1, "none")
        if identity_init:
            self.scale_head.weight.data[:] = 0.0
            for layer in net.layers:
                layer.velocity_mix.data[:] = 0.0

    def shift_and_log_scale(self, cond: Tensor, graph: Graph) -> tuple[Tensor, Tensor]:
        state = GraphState(
            None, cond, Tensor(np.zeros(cond.shape)), graph, Tensor(np.ones((cond.shape[0], 1)))
        )
        out = self.net(state)
        shift = project_center(out.x - cond, graph)
        per_node = T.reshape(self.scale_head(out.h), (-1,))
        counts = _node_counts(graph)
        log_scale = T.segment_sum(per_node, graph.node_graph, graph.num_graphs, graph.members) / counts
        if np.any(np.abs(log_scale.data) > MAX_LOG_SCALE):
            raise ScaleRangeError(f"coupling log-scale {np.abs(log_scale.data).max():.3g} exceeds {MAX_LOG_SCALE}")
        return shift, log_scale

    def _split(self, s: AugmentedState):
        return (s.z, s.a) if self.direction == "z->a" else (s.a, s.z)

    def _join(self, s: AugmentedState, cond, passive, logdet):
        if self.direction == "z->a":
            return AugmentedState(cond, passive, logdet, s.graph)
        return AugmentedState(passive, cond, logdet, s.graph)

    def _subspace_dims(self, graph: Graph, n: int) -> np.ndarray:
        return (_node_counts(graph) - 1.0) * n

    def forward(self, s: AugmentedState) -> AugmentedState:
        cond, passive = self._split(s)
        shift, log_scale = self.shift_and_log_scale(cond, s.graph)
        scale = T.take_rows(T.reshape(T.exp(log_scale), (-1, 1)), s.graph.node_graph)
        new = scale * passive + shift
        logdet = s.logdet + log_scale * self._subspace_dims(s.graph, passive.shape[1])
        return self._join(s, cond, new, logdet)

    def inverse(self, s: AugmentedState) -> AugmentedState:
        cond, passive = self._split(s)
        shift, log_scale = self.shift_and_log_scale(cond, s.graph)
        inv_scale = T.take_rows(T.reshape(T.exp(log_scale * -1.0), (-1, 1)), s.graph.node_graph)
        old = (passive - shift) * inv_scale
        logdet = s.logdet - log_scale * self._subspace_dims(s.graph, passive.shape[1])
        return self._join(s, cond, old, logdet)


def coupling_forward(layer: CouplingLayer, s: AugmentedState) -> AugmentedState:
    return layer.forward(s)


def coupling_inverse(layer: CouplingLayer, s: AugmentedState) -> AugmentedState:
    return layer.inverse(s)


class FlowStack(Module):
    """Couplings alternating z->a, a->z, ... over (num_nodes x dim) clouds."""

    def __init__(
        self,
        num_nodes: int,
        dim: int,
        depth: int = 4,
        hidden: int = 16,
        sake_depth: int = 2,
        heads: int = 4,
        n_basis: int = 16,
        d_max: float = 5.0,
        seed: int = 2666,
        identity_init: bool = True,
    ):
        self.num_nodes = num_nodes
        self.dim = dim
        rng = np.random.default_rng(seed)
        self.metadata = {
            "num_nodes": num_nodes,
            "dim": dim,
            "depth": depth,
            "hidden": hidden,
            "sake_depth": sake_depth,
            "heads": heads,
            "n_basis": n_basis,
            "d_max": d_max,
            "seed": seed,
        }
        self.couplings = []
        for k in range(depth):
            net = SakeModel(
                1, hidden, sake_depth, heads=heads, n_basis=n_basis, d_max=d_max, dim=dim,
                seed=int(rng.integers(2**31)),
            )
            self.couplings.append(CouplingLayer("z->a" if k % 2 == 0 else "a->z", net, rng, identity_init))

    def graph(self, batch: int = 1) -> Graph:
        g = complete_graph(self.num_nodes)
        return g if batch == 1 else batch_graphs([g] * batch)

    def forward(self, s: AugmentedState) -> AugmentedState:
        for c in self.couplings:
            s = c.forward(s)
        return s

    def inverse(self, s: AugmentedState) -> AugmentedState:
        for c in reversed(self.couplings):
            s = c.inverse(s)
        return s


def start_state(z, a, graph: Graph) -> AugmentedState:
    return AugmentedState(T.as_tensor(z), T.as_tensor(a), Tensor(np.zeros(graph.num_graphs)), graph)


def centered_normal(rng: np.random.Generator, graph: Graph, dim: int) -> Tensor:
    return project_center(Tensor(rng.standard_normal((graph.num_nodes, dim))), graph)


def flow_logprob(stack: FlowStack, x, aux_seed=None, a=None, graph: Graph | None = None) -> Tensor:
    """Single-draw estimate log p(x, a) - log q_a(a), one value per graph."""
    x = T.as_tensor(x)
    graph = _graph_for(x, graph)
    if a is None:
        a = centered_normal(np.random.default_rng(aux_seed), graph, x.shape[1])
    a = T.as_tensor(a)
    back = stack.inverse(start_state(x, a, graph))
    return (
        centered_gaussian_logp(back.z, graph, tol=1e-8)
        + centered_gaussian_logp(back.a, graph, tol=1e-8)
        + back.logdet
        - centered_gaussian_logp(a, graph)
    )


def flow_sample_from(stack: FlowStack, z, a, graph: Graph | None = None) -> AugmentedState:
    z = T.as_tensor(z)
    graph = _graph_for(z, graph)
    return stack.forward(start_state(z, a, graph))


def flow_sample(stack: FlowStack, seed, batch: int = 1) -> Tensor:
    rng = np.random.default_rng(seed)
    graph = stack.graph(batch)
    z = centered_normal(rng, graph, stack.dim)
    a = centered_normal(rng, graph, stack.dim)
    return flow_sample_from(stack, z, a, graph).z
