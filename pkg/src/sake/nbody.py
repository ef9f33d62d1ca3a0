"""Charged-particle simulator and the forecasting dataset built from it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass
class NBodySystem:
    charges: np.ndarray  # [N]
    positions: np.ndarray  # [N, n]
    velocities: np.ndarray  # [N, n]
    softening: float = 0.1

    def __post_init__(self):
        self.charges = np.asarray(self.charges, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if len(self.charges) < 2:
            raise ValueError("need at least two particles")
        if np.any(self.charges == 0):
            raise ValueError("charges must be nonzero")


def pair_forces(q: np.ndarray, x: np.ndarray, softening: float) -> np.ndarray:
    """Softened Coulomb forces for arrays with any leading batch axes.

    q: [..., N], x: [..., N, n] -> [..., N, n]
    """
    diff = x[..., :, None, :] - x[..., None, :, :]  # x_i - x_j
    r2 = (diff * diff).sum(-1) + softening**2
    w = q[..., :, None] * q[..., None, :] * r2**-1.5
    idx = np.arange(x.shape[-2])
    w[..., idx, idx] = 0.0
    return (w[..., None] * diff).sum(-2)


def coulomb_forces(system: NBodySystem) -> np.ndarray:
    return pair_forces(system.charges, system.positions, system.softening)


def potential_energy(q, x, softening: float) -> np.ndarray:
    diff = x[..., :, None, :] - x[..., None, :, :]
    r = np.sqrt((diff * diff).sum(-1) + softening**2)
    pair = q[..., :, None] * q[..., None, :] / r
    return 0.5 * (pair.sum((-1, -2)) - (q * q).sum(-1) / softening)


def total_energy(system: NBodySystem) -> float:
    kinetic = 0.5 * float((system.velocities**2).sum())
    return kinetic + float(potential_energy(system.charges, system.positions, system.softening))


def _verlet(q, x, v, dt, steps, softening):
    f = pair_forces(q, x, softening)
    for _ in range(steps):
        v = v + 0.5 * dt * f
        x = x + dt * v
        f = pair_forces(q, x, softening)
        v = v + 0.5 * dt * f
    return x, v


def leapfrog_step(system: NBodySystem, dt: float) -> NBodySystem:
    """One kick-drift-kick step; negative dt integrates backwards."""
    if dt == 0:
        raise ValueError("dt must be nonzero")
    x, v = _verlet(system.charges, system.positions, system.velocities, dt, 1, system.softening)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise FloatingPointError(f"non-finite state after step: x={x}, v={v}")
    return NBodySystem(system.charges, x, v, system.softening)


def simulate(q, x, v, dt: float = 1e-3, steps: int = 1000, softening: float = 0.1):
    """Integrate ``steps`` Verlet steps; works on single systems or batches."""
    return _verlet(np.asarray(q, float), np.asarray(x, float), np.asarray(v, float), dt, steps, softening)


# --- dataset -------------------------------------------------------------------


@dataclass
class DatasetConfig:
    n_train: int = 3000
    n_valid: int = 2000
    n_test: int = 2000
    N: int = 5
    n: int = 3
    steps: int = 1000
    dt: float = 1e-3
    seed: int = 2666
    softening: float = 0.1
    init_scale: float = 0.5


@dataclass
class TrajectoryDataset:
    charges: np.ndarray  # [R, N]
    x0: np.ndarray  # [R, N, n]
    v0: np.ndarray
    x1: np.ndarray
    split_sizes: dict[str, int]
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.x0.shape[1]

    @property
    def n(self) -> int:
        return self.x0.shape[2]

    @property
    def horizon(self) -> float:
        return float(self.meta["dt"]) * int(self.meta["steps"])

    def split(self, name: str) -> "TrajectoryDataset":
        start = 0
        for s in SPLITS:
            if s == name:
                sl = slice(start, start + self.split_sizes[s])
                return TrajectoryDataset(
                    self.charges[sl], self.x0[sl], self.v0[sl], self.x1[sl], {s: self.split_sizes[s]}, self.meta
                )
            start += self.split_sizes[s]
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.charges)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TrajectoryDataset)
            and self.split_sizes == other.split_sizes
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("charges", "x0", "v0", "x1"))
        )


def _initial_condition(cfg: DatasetConfig, index: int, attempt: int):
    rng = np.random.default_rng([cfg.seed, index, attempt])
    q = rng.choice([-1.0, 1.0], size=cfg.N)
    x = cfg.init_scale * rng.standard_normal((cfg.N, cfg.n))
    v = cfg.init_scale * rng.standard_normal((cfg.N, cfg.n))
    return q, x, v


def generate_dataset(cfg: DatasetConfig) -> TrajectoryDataset:
    sizes = {"train": cfg.n_train, "valid": cfg.n_valid, "test": cfg.n_test}
    if min(sizes.values()) <= 0:
        raise ValueError("split sizes must be positive")
    total = sum(sizes.values())
    attempts = np.zeros(total, dtype=int)
    q, x, v = map(np.stack, zip(*(_initial_condition(cfg, i, 0) for i in range(total))))
    x1 = np.empty_like(x)
    todo = np.arange(total)
    resampled = 0
    while len(todo):
        xt, _ = simulate(q[todo], x[todo], v[todo], cfg.dt, cfg.steps, cfg.softening)
        x1[todo] = xt
        bad = todo[~np.isfinite(xt).all(axis=(1, 2))]
        for i in bad:
            attempts[i] += 1
            q[i], x[i], v[i] = _initial_condition(cfg, i, attempts[i])
        resampled += len(bad)
        todo = bad
    if resampled:
        log.info("resampled %d non-finite trajectories", resampled)
    meta = {k: getattr(cfg, k) for k in ("N", "n", "dt", "steps", "seed", "softening", "init_scale")}
    return TrajectoryDataset(q, x, v, x1, sizes, meta)


def _fmt(a) -> str:
    return " ".join(format(float(t), ".17g") for t in a)


def write_dataset(ds: TrajectoryDataset, path) -> None:
    m = ds.meta
    lines = [
        f"SAKE-NBODY v1 N={ds.N} n={ds.n} dt={m['dt']!r} steps={m['steps']} seed={m['seed']}",
        f"#META softening={m.get('softening', 0.1)!r} init_scale={m.get('init_scale', 0.5)!r}",
    ]
    lines += [f"#SPLIT {s} {ds.split_sizes.get(s, 0)}" for s in SPLITS]
    for r in range(len(ds)):
        lines.append(" ".join(str(int(c)) for c in ds.charges[r]))
        for block in (ds.x0, ds.v0, ds.x1):
            lines.extend(_fmt(row) for row in block[r])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_dataset(path) -> TrajectoryDataset:
    text = Path(path).read_text().splitlines()
    head = text[0].split()
    if head[:2] != ["SAKE-NBODY", "v1"]:
        raise ValueError(f"{path}: not a SAKE-NBODY v1 file")
    meta = dict(tok.split("=", 1) for tok in head[2:])
    sizes = {}
    body = []
    for line in text[1:]:
        if line.startswith("#SPLIT"):
            _, name, count = line.split()
            sizes[name] = int(count)
        elif line.startswith("#META"):
            meta.update(tok.split("=", 1) for tok in line.split()[1:])
        elif line.strip():
            body.append(line)
    N, n = int(meta["N"]), int(meta["n"])
    meta = {
        "N": N,
        "n": n,
        "dt": float(meta["dt"]),
        "steps": int(meta["steps"]),
        "seed": int(meta["seed"]),
        "softening": float(meta.get("softening", 0.1)),
        "init_scale": float(meta.get("init_scale", 0.5)),
    }
    per = 1 + 3 * N
    if len(body) % per:
        raise ValueError(f"{path}: truncated record block")
    R = len(body) // per
    if sum(sizes.values()) != R:
        raise ValueError(f"{path}: split counts {sizes} do not add up to {R} records")
    charges = np.array([[float(c) for c in body[r * per].split()] for r in range(R)])
    rows = np.array(
        [[float(t) for t in body[r * per + 1 + k].split()] for r in range(R) for k in range(3 * N)]
    ).reshape(R, 3, N, n)
    return TrajectoryDataset(charges, rows[:, 0], rows[:, 1], rows[:, 2], sizes, meta)


def baseline_mse(ds: TrajectoryDataset) -> float:
    """MSE of the constant-velocity guess x0 + v0 * horizon."""
    pred = ds.x0 + ds.v0 * ds.horizon
    return float(np.mean((pred - ds.x1) ** 2))
