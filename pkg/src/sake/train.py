"""Training loops for the forecasting model and the flow."""

from __future__ import annotations

import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from . import tensor as T
from .checkpoint import load_into, read_checkpoint, save_checkpoint, save_module
from .flow import FlowStack, ScaleRangeError, flow_logprob, project_center
from .model import Graph, GraphState, SakeModel, batch_graphs, complete_graph
from .nbody import TrajectoryDataset, baseline_mse, read_dataset
from .tensor import Tensor

log = logging.getLogger(__name__)

LR_FLOOR = 1e-6
FLOW_PREFIX = "flow."


@dataclass
class TrainConfig:
    task: str = "forecast"
    depth: int = 4
    width: int = 32
    n_lambda: int = 0  # 0 means "same as width"
    heads: int = 4
    lr: float = 5e-4
    epochs: int = 1000
    batch_size: int = 100
    l2: float = 1e-12
    schedule: str = "constant"
    seed: int = 2666
    data: str = ""
    checkpoint: str = "sake.ckpt"
    max_train: int = 0  # 0 means the whole split
    max_eval: int = 0
    # flow task
    flow_nodes: int = 3
    flow_dim: int = 2
    flow_depth: int = 4
    flow_train: int = 512
    flow_valid: int = 512

    def __post_init__(self):
        if self.task not in ("forecast", "flow", "verify", "bench"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.schedule not in ("constant", "cosine-warmup"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        for name in ("depth", "width", "heads", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def parse_config(text: str, **overrides) -> TrainConfig:
    """Read flat ``key = value`` lines; '#' starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or key not in types:
            raise ValueError(f"config line {lineno}: unknown or malformed entry {line!r}")
        value = value.strip("\"'")
        values[key] = {"int": int, "float": float}.get(types[key], str)(value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray | None], lr: float, l2: float = 0.0) -> bool:
    """Bias-corrected Adam update in place; returns False if the step was skipped."""
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient, skipping step (%d skipped so far)", state.skipped)
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if l2:
            g = g + l2 * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def lr_schedule(epoch: int, total_epochs: int, peak: float, kind: str = "cosine-warmup") -> float:
    """Linear warmup from 1e-6 over the first 10% of epochs, then cosine back to 1e-6."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if kind == "constant":
        return peak
    warm = max(1, round(0.1 * total_epochs))
    if epoch <= warm:
        return LR_FLOOR + (peak - LR_FLOOR) * epoch / warm
    span = max(1, total_epochs - 1 - warm)
    return LR_FLOOR + (peak - LR_FLOOR) * 0.5 * (1.0 + math.cos(math.pi * (epoch - warm) / span))


# --- forecasting ---------------------------------------------------------------


class MetricLog:
    """Writes one line per epoch to stdout and to a log file."""

    def __init__(self, path=None, stream: TextIO | None = None):
        self.stream = sys.stdout if stream is None else stream
        self.file = open(path, "w") if path else None
        self.rows: list[dict] = []

    def __call__(self, **fields):
        self.rows.append(fields)
        line = " ".join(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items())
        print(line, file=self.stream, flush=True)
        if self.file:
            self.file.write(line + "\n")
            self.file.flush()

    def close(self):
        if self.file:
            self.file.close()


def node_attributes(charges: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """Per-particle invariant inputs: charge and speed."""
    return np.stack([charges, np.linalg.norm(v0, axis=-1)], axis=-1)


def forecast_model(cfg: TrainConfig, dim: int) -> SakeModel:
    return SakeModel(
        in_features=2,
        hidden=cfg.width,
        depth=cfg.depth,
        n_lambda=cfg.n_lambda or None,
        heads=cfg.heads,
        dim=dim,
        seed=cfg.seed,
    )


class BatchMaker:
    def __init__(self, num_nodes: int):
        self.num_nodes = num_nodes
        self._graphs: dict[int, Graph] = {}

    def graph(self, batch: int) -> Graph:
        if batch not in self._graphs:
            self._graphs[batch] = batch_graphs([complete_graph(self.num_nodes)] * batch)
        return self._graphs[batch]

    def state(self, ds: TrajectoryDataset, idx: np.ndarray) -> tuple[GraphState, np.ndarray]:
        B, N, n = len(idx), ds.N, ds.n
        attr = node_attributes(ds.charges[idx], ds.v0[idx]).reshape(B * N, -1)
        state = GraphState(
            None,
            Tensor(ds.x0[idx].reshape(B * N, n)),
            Tensor(ds.v0[idx].reshape(B * N, n)),
            self.graph(B),
            Tensor(attr),
        )
        return state, ds.x1[idx].reshape(B * N, n)


def forecast_mse(model: SakeModel, ds: TrajectoryDataset, batch_size: int = 500) -> float:
    maker = BatchMaker(ds.N)
    total = 0.0
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            state, target = maker.state(ds, idx)
            pred = model(state).x.data
            total += float(((pred - target) ** 2).sum())
    return total / (len(ds) * ds.N * ds.n)


def _limit(ds: TrajectoryDataset, count: int) -> TrajectoryDataset:
    if not count or count >= len(ds):
        return ds
    return TrajectoryDataset(ds.charges[:count], ds.x0[:count], ds.v0[:count], ds.x1[:count], {}, ds.meta)


def model_meta(model: SakeModel, task: str = "forecast") -> dict:
    return {"task": task, **model.metadata}


def model_from_meta(meta: dict) -> SakeModel:
    return SakeModel(
        in_features=int(meta["in_features"]),
        hidden=int(meta["hidden"]),
        depth=int(meta["depth"]),
        n_lambda=int(meta["n_lambda"]),
        heads=int(meta["heads"]),
        n_basis=int(meta["n_basis"]),
        d_max=float(meta["d_max"]),
        dim=int(meta["dim"]),
        seed=int(meta["seed"]),
    )


def load_model(path) -> SakeModel:
    params, meta = read_checkpoint(path)
    model = model_from_meta(meta)
    load_into(model, params)
    return model


def train_forecast(cfg: TrainConfig, dataset: TrajectoryDataset | None = None, stream=None) -> dict:
    ds = dataset if dataset is not None else read_dataset(cfg.data)
    train = _limit(ds.split("train"), cfg.max_train)
    valid = _limit(ds.split("valid"), cfg.max_eval)
    test = _limit(ds.split("test"), cfg.max_eval)

    model = forecast_model(cfg, ds.n)
    if model.metadata["dim"] != ds.n:
        raise ValueError(f"model dimension {model.metadata['dim']} != dataset dimension {ds.n}")
    params = model.parameters()
    opt = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    maker = BatchMaker(ds.N)
    ckpt = Path(cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    metrics = MetricLog(ckpt.with_suffix(ckpt.suffix + ".log"), stream)

    best = math.inf
    best_epoch = -1
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg.epochs, cfg.lr, cfg.schedule)
            order = rng.permutation(len(train))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                state, target = maker.state(train, order[start:start + cfg.batch_size])
                T.zero_grads(params)
                pred = model(state).x
                loss = T.reduce_mean(T.square(pred - target))
                T.backward(loss)
                adam_step(opt, params, [p.grad for p in params], lr, cfg.l2)
                losses.append(loss.item())
            train_mse = float(np.mean(losses))
            valid_mse = forecast_mse(model, valid)
            metrics(epoch=epoch, lr=lr, train_mse=train_mse, valid_mse=valid_mse)
            if valid_mse < best:
                best, best_epoch = valid_mse, epoch
                save_module(ckpt, model, model_meta(model))
    finally:
        metrics.close()

    best_model = load_model(ckpt)
    result = {
        "best_epoch": best_epoch,
        "valid_mse": forecast_mse(best_model, valid),
        "test_mse": forecast_mse(best_model, test),
        "baseline_test_mse": baseline_mse(test),
        "skipped_steps": opt.skipped,
        "history": metrics.rows,
    }
    return result


# --- flow ----------------------------------------------------------------------


def mixture_target(num_samples: int, num_nodes: int, dim: int, seed: int) -> np.ndarray:
    """Centered two-component Gaussian mixture, wider than the base density."""
    rng = np.random.default_rng(seed)
    g = np.random.default_rng(12345).standard_normal((num_nodes, dim))
    g -= g.mean(0)
    means = np.stack([1.5 * g, -1.5 * g])
    k = rng.integers(0, 2, size=num_samples)
    x = means[k] + 1.8 * rng.standard_normal((num_samples, num_nodes, dim))
    return x - x.mean(axis=1, keepdims=True)


def flow_nll(stack: FlowStack, samples: np.ndarray, aux_seed: int, draws: int = 1) -> float:
    """Mean negative log-likelihood estimate over samples [S, N, n]."""
    S, N, n = samples.shape
    graph = stack.graph(S)
    x = Tensor(samples.reshape(S * N, n))
    rng = np.random.default_rng(aux_seed)
    total = np.zeros(S)
    with T.no_grad():
        for _ in range(draws):
            a = project_center(Tensor(rng.standard_normal((S * N, n))), graph)
            total += flow_logprob(stack, x, a=a, graph=graph).data
    return float(-np.mean(total / draws))


def flow_meta(stack: FlowStack) -> dict:
    return {"task": "flow", **stack.metadata}


def flow_from_meta(meta: dict) -> FlowStack:
    keys = {"num_nodes": int, "dim": int, "depth": int, "hidden": int, "sake_depth": int, "heads": int,
            "n_basis": int, "d_max": float, "seed": int}
    return FlowStack(**{k: f(meta[k]) for k, f in keys.items()})


def train_flow(cfg: TrainConfig, stream=None, samples: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
    if samples is None:
        train = mixture_target(cfg.flow_train, cfg.flow_nodes, cfg.flow_dim, cfg.seed)
        valid = mixture_target(cfg.flow_valid, cfg.flow_nodes, cfg.flow_dim, cfg.seed + 1)
    else:
        train, valid = samples
    N, n = train.shape[1:]
    stack = FlowStack(N, n, depth=cfg.flow_depth, hidden=cfg.width, sake_depth=cfg.depth, heads=cfg.heads,
                      seed=cfg.seed)
    params = stack.parameters()
    opt = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    ckpt = Path(cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    metrics = MetricLog(ckpt.with_suffix(ckpt.suffix + ".log"), stream)
    initial = flow_nll(stack, valid, cfg.seed)
    lr_scale = 1.0
    try:
        epoch = 0
        retries = 0
        while epoch < cfg.epochs:
            lr = lr_schedule(epoch, cfg.epochs, cfg.lr, cfg.schedule) * lr_scale
            snapshot = [p.data.copy() for p in params]
            opt_snapshot = dataclasses.replace(opt, m=[m.copy() for m in opt.m], v=[v.copy() for v in opt.v])
            try:
                losses = _flow_epoch(stack, params, opt, train, cfg, lr, rng)
            except ScaleRangeError:
                if retries >= 3:
                    raise
                retries += 1
                lr_scale *= 0.5
                log.warning("scale explosion at epoch %d, halving lr (retry %d)", epoch, retries)
                for p, s in zip(params, snapshot):
                    p.data = s
                opt = opt_snapshot
                continue
            valid_nll = flow_nll(stack, valid, cfg.seed)
            metrics(epoch=epoch, lr=lr, train_nll=float(np.mean(losses)), valid_nll=valid_nll)
            epoch += 1
    finally:
        metrics.close()
    save_module(ckpt, stack, flow_meta(stack), prefix=FLOW_PREFIX)
    final = flow_nll(stack, valid, cfg.seed)
    return {
        "initial_valid_nll": initial,
        "valid_nll": final,
        "improvement": (initial - final) / abs(initial),
        "history": metrics.rows,
    }


def _flow_epoch(stack, params, opt, train, cfg, lr, rng):
    S, N, n = train.shape
    order = rng.permutation(S)
    losses = []
    for start in range(0, S, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        graph = stack.graph(len(idx))
        x = Tensor(train[idx].reshape(-1, n))
        a = project_center(Tensor(rng.standard_normal((len(idx) * N, n))), graph)
        T.zero_grads(params)
        loss = T.reduce_mean(flow_logprob(stack, x, a=a, graph=graph)) * -1.0
        T.backward(loss)
        adam_step(opt, params, [p.grad for p in params], lr, cfg.l2)
        losses.append(loss.item())
    return losses


def load_flow(path) -> FlowStack:
    params, meta = read_checkpoint(path)
    stack = flow_from_meta(meta)
    load_into(stack, params, prefix=FLOW_PREFIX)
    return stack
