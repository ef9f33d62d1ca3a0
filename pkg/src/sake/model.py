"""SAKE layer and model: attention-weighted edge messages, spatial attention,
and a fictitious-velocity update of positions.

Graphs are edge lists.  An edge ``(u, v)`` carries a message from ``u`` to the
receiving node ``v`` with displacement ``x_v - x_u``.  Several graphs can be
batched as one disjoint union; ``Graph.node_graph`` says which graph owns
each node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .geometry import EPS_NORM, EdgeGeometry, compute_edge_geometry, rbf_expand, cutoff_weight, smoothed_norm
from .nn import MLP, Dense, Module, glorot
from .tensor import Tensor, timed


@dataclass
class Graph:
    src: np.ndarray
    dst: np.ndarray
    num_nodes: int
    node_graph: np.ndarray | None = None
    num_graphs: int = 1
    _incoming: object = field(default=None, repr=False, compare=False)
    _members: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.intp).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.intp).reshape(-1)
        if self.src.shape != self.dst.shape:
            raise ValueError("src and dst must have the same length")
        if len(self.src) and (max(self.src.max(), self.dst.max()) >= self.num_nodes or min(self.src.min(), self.dst.min()) < 0):
            raise ValueError("edge endpoint out of range")
        if np.any(self.src == self.dst):
            raise ValueError("self-edges are not allowed")
        if self.node_graph is None:
            self.node_graph = np.zeros(self.num_nodes, dtype=np.intp)
        self.node_graph = np.asarray(self.node_graph, dtype=np.intp)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def incoming(self):
        """Sparse [N, E] matrix summing edges into their receivers."""
        if self._incoming is None:
            self._incoming = T.segment_matrix(self.dst, self.num_nodes)
        return self._incoming

    @property
    def members(self):
        """Sparse [G, N] matrix summing nodes into their graphs."""
        if self._members is None:
            self._members = T.segment_matrix(self.node_graph, self.num_graphs)
        return self._members

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes)

    def permuted(self, perm: np.ndarray) -> "Graph":
        """The same graph after reordering nodes so that new i is old perm[i]."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Graph(inv[self.src], inv[self.dst], self.num_nodes, self.node_graph[perm], self.num_graphs)


def complete_graph(num_nodes: int) -> Graph:
    src, dst = np.nonzero(~np.eye(num_nodes, dtype=bool))
    return Graph(src, dst, num_nodes)


def batch_graphs(graphs: list[Graph]) -> Graph:
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    gid = np.cumsum([0] + [g.num_graphs for g in graphs])
    return Graph(
        np.concatenate([g.src + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]),
        int(offsets[-1]),
        np.concatenate([g.node_graph + k for g, k in zip(graphs, gid)]),
        int(gid[-1]),
    )


@dataclass
class GraphState:
    h: Tensor | None
    x: Tensor
    v: Tensor
    graph: Graph
    node_attr: Tensor | None = None

    def __post_init__(self):
        n = self.graph.num_nodes
        for name in ("h", "x", "v", "node_attr"):
            t = getattr(self, name)
            if t is not None and not isinstance(t, Tensor):
                t = Tensor(t)
                setattr(self, name, t)
            if t is not None and t.shape[0] != n:
                raise ValueError(f"{name} has {t.shape[0]} rows, graph has {n} nodes")


def make_state(node_attr, x, v=None, graph: Graph | None = None) -> GraphState:
    x = np.asarray(x, dtype=np.float64)
    node_attr = np.asarray(node_attr, dtype=np.float64)
    if node_attr.ndim == 1:
        node_attr = node_attr[:, None]
    if v is None:
        v = np.zeros_like(x)
    return GraphState(None, Tensor(x), Tensor(v), graph or complete_graph(len(x)), Tensor(node_attr))


def segment_mean_nodes(t: Tensor, graph: Graph) -> Tensor:
    """Per-graph mean of node rows, broadcast back to nodes."""
    counts = np.bincount(graph.node_graph, minlength=graph.num_graphs).astype(np.float64)
    sums = T.segment_sum(t, graph.node_graph, graph.num_graphs, graph.members)
    means = sums / counts.reshape((-1,) + (1,) * (t.ndim - 1))
    return T.take_rows(means, graph.node_graph)


# --- the layer -----------------------------------------------------------------


class SakeLayer(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        hidden: int,
        n_lambda: int | None = None,
        heads: int = 4,
        n_basis: int = 50,
        d_max: float = 5.0,
        normalize_directions: bool = True,
    ):
        n_lambda = hidden if n_lambda is None else n_lambda
        if heads < 1 or n_lambda < 1:
            raise ValueError("need at least one head and one spatial combination")
        if hidden % heads:
            raise ValueError(f"width {hidden} is not divisible by {heads} heads")
        self.hidden = hidden
        self.n_lambda = n_lambda
        self.heads = heads
        self.n_basis = n_basis
        self.d_max = d_max
        self.cutoffs = [d_max * (k + 1) / heads for k in range(heads)]
        self.normalize_directions = normalize_directions

        c = hidden
        self.filter_net = Dense(rng, 2 * c, n_basis, "silu")
        self.edge_mlp = MLP(rng, [2 * c + 1 + n_basis, c, c])
        self.attention = glorot(rng, c, heads)
        self.lambda_proj = glorot(rng, c, n_lambda)
        self.spatial_mlp = MLP(rng, [n_lambda, c, c])
        self.velocity_gate = MLP(rng, [c, c, 1], last_activation="none")
        self.velocity_mix = Tensor(glorot(rng, n_lambda, 1).data.reshape(-1), requires_grad=True)
        self.node_mlp = MLP(rng, [3 * c, c, c])

    # each stage mirrors one line of the layer update

    def edge_embed(self, h: Tensor, geo: EdgeGeometry, graph: Graph) -> Tensor:
        if self.filter_net.fan_out != self.n_basis:
            raise ValueError("filter width does not match the number of radial bases")
        pair = T.concat([T.take_rows(h, graph.src), T.take_rows(h, graph.dst)], axis=1)
        radial = rbf_expand(geo.dist, self.n_basis, self.d_max) * self.filter_net(pair)
        feats = T.concat([pair, T.reshape(geo.dist, (-1, 1)), radial], axis=1)
        return self.edge_mlp(feats)

    def combined_attention(self, h_e: Tensor, geo: EdgeGeometry, graph: Graph) -> Tensor:
        score = T.celu(h_e @ self.attention)  # [E, H]
        seg_max = np.full((graph.num_nodes, self.heads), -np.inf)
        np.maximum.at(seg_max, graph.dst, score.data)
        e = T.exp(score - seg_max[graph.dst])
        semantic = e / T.take_rows(T.segment_sum(e, graph.dst, graph.num_nodes, graph.incoming), graph.dst)
        distance = T.concat([T.reshape(cutoff_weight(geo.dist, d0), (-1, 1)) for d0 in self.cutoffs], axis=1)
        w = distance * semantic
        denom = T.segment_sum(w, graph.dst, graph.num_nodes, graph.incoming)
        denom = denom + 1e-10 * (denom.data == 0.0)
        return w / T.take_rows(denom, graph.dst)

    def weight_edges(self, h_e: Tensor, att: Tensor) -> Tensor:
        """Scale each head's slice of the edge embedding by that head's weight."""
        e = h_e.shape[0]
        chunks = T.reshape(h_e, (e, self.heads, self.hidden // self.heads))
        return T.reshape(chunks * T.reshape(att, (e, self.heads, 1)), (e, self.hidden))

    def directions(self, geo: EdgeGeometry) -> Tensor:
        return geo.unit if self.normalize_directions else geo.vec

    def combinations(self, h_e_att: Tensor, geo: EdgeGeometry, graph: Graph) -> Tensor:
        """Per node, N_lambda linear combinations of edge directions: [N, N_lambda, n]."""
        lam = h_e_att @ self.lambda_proj
        return combine_edges(lam, self.directions(geo), graph)

    def spatial_attention(self, h_e_att: Tensor, geo: EdgeGeometry, graph: Graph) -> Tensor:
        comb = self.combinations(h_e_att, geo, graph)
        return self.spatial_mlp(smoothed_norm(comb, axis=2))

    def velocity_position_update(self, h, v, x, h_e_att=None, geo=None, graph=None, comb=None):
        if comb is None:
            comb = self.combinations(h_e_att, geo, graph)
        gate = T.sigmoid(self.velocity_gate(h)) * 2.0
        norms = smoothed_norm(comb, axis=2)
        squashed = comb * T.reshape(T.tanh(norms) / norms, norms.shape + (1,))
        delta = T.reduce_sum(squashed * T.reshape(self.velocity_mix, (1, -1, 1)), axis=1)
        v_new = gate * v + delta
        return v_new, x + v_new

    def __call__(self, state: GraphState) -> GraphState:
        graph = state.graph
        h, x, v = state.h, state.x, state.v
        with timed("edge_geometry"):
            geo = compute_edge_geometry(x, graph.src, graph.dst)
        with timed("edge_embed"):
            h_e = self.edge_embed(h, geo, graph)
        with timed("combined_attention"):
            h_e_att = self.weight_edges(h_e, self.combined_attention(h_e, geo, graph))
        with timed("spatial_attention"):
            comb = self.combinations(h_e_att, geo, graph)
            h_sa = self.spatial_mlp(smoothed_norm(comb, axis=2))
        with timed("aggregate"):
            agg = T.segment_sum(h_e_att, graph.dst, graph.num_nodes, graph.incoming)
        with timed("velocity_position_update"):
            v_new, x_new = self.velocity_position_update(h, v, x, comb=comb)
        with timed("node_update"):
            h_new = self.node_mlp(T.concat([h, agg, h_sa], axis=1))
        return replace(state, h=h_new, x=x_new, v=v_new)


def combine_edges(lam: Tensor, directions: Tensor, graph: Graph) -> Tensor:
    """sum over incoming edges of lam[e, i] * directions[e]: [N, N_lambda, n]."""
    e, k = lam.shape
    n = directions.shape[1]
    outer = T.reshape(lam, (e, k, 1)) * T.reshape(directions, (e, 1, n))
    return T.segment_sum(outer, graph.dst, graph.num_nodes, graph.incoming)


# --- the model -----------------------------------------------------------------


class SakeModel(Module):
    def __init__(
        self,
        in_features: int,
        hidden: int = 32,
        depth: int = 4,
        n_lambda: int | None = None,
        heads: int = 4,
        n_basis: int = 50,
        d_max: float = 5.0,
        dim: int = 3,
        seed: int = 2666,
        layer_cls=SakeLayer,
    ):
        rng = np.random.default_rng(seed)
        self.metadata = {
            "in_features": in_features,
            "hidden": hidden,
            "depth": depth,
            "n_lambda": hidden if n_lambda is None else n_lambda,
            "heads": heads,
            "n_basis": n_basis,
            "d_max": d_max,
            "dim": dim,
            "seed": seed,
        }
        self.embed_in = Dense(rng, in_features, hidden, "silu")
        self.layers = [
            layer_cls(rng, hidden, n_lambda, heads, n_basis, d_max) for _ in range(depth)
        ]
        self.energy_head = MLP(rng, [hidden, hidden, 1], last_activation="none")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __call__(self, state: GraphState) -> GraphState:
        return model_forward(self, state)


def model_forward(model: SakeModel, state: GraphState) -> GraphState:
    if state.node_attr is None or state.node_attr.shape[1] != model.embed_in.fan_in:
        raise ValueError(
            f"node attributes {None if state.node_attr is None else state.node_attr.shape} "
            f"do not match encoder input width {model.embed_in.fan_in}"
        )
    with timed("embed"):
        state = replace(state, h=model.embed_in(state.node_attr))
    for layer in model.layers:
        state = layer(state)
    return state


def predict_energy_forces(model: SakeModel, state: GraphState) -> tuple[float, np.ndarray]:
    """Energy as a sum of per-node readouts and forces as -dE/dx."""
    x = Tensor(state.x.data.copy(), requires_grad=True)
    params = model.parameters()
    saved = [p.grad for p in params]
    try:
        out = model_forward(model, replace(state, x=x))
        energy = T.reduce_sum(model.energy_head(out.h))
        T.check_finite(energy, "energy")
        T.backward(energy)
    finally:
        for p, g in zip(params, saved):
            p.grad = g
    return energy.item(), -x.grad


def forecast_positions(model: SakeModel, state: GraphState) -> Tensor:
    return model_forward(model, state).x


# --- distance-recovery oracle ---------------------------------------------------


def theorem1_lambda_oracle(x, center: int, neighbors=None) -> np.ndarray:
    """Recover the center/neighbor distance matrix from spatial-attention norms.

    Uses identity ``f`` and the indicator weight sets lambda_i(e_j) = [i=j]
    and lambda_kl(e_j) = [k=j] - [l=j].  Entry (i, i) is |x_v - x_ui| and
    entry (i, j) is |x_uj - x_ui|.
    """
    x = np.asarray(x, dtype=np.float64)
    if neighbors is None:
        neighbors = [u for u in range(len(x)) if u != center]
    neighbors = np.asarray(neighbors, dtype=np.intp)
    m = len(neighbors)
    graph = Graph(neighbors, np.full(m, center), len(x))
    geo = compute_edge_geometry(Tensor(x), graph.src, graph.dst)

    eye = np.eye(m)
    pair = (eye[:, None, :] - eye[None, :, :]).reshape(m * m, m)  # row (k, l)
    lam = np.concatenate([eye, pair], axis=0).T  # [E, m + m^2]
    comb = combine_edges(Tensor(lam), geo.vec, graph)
    norms = smoothed_norm(comb, axis=2).data[center]

    out = norms[m:].reshape(m, m)
    out[np.diag_indices(m)] = norms[:m]
    return out
