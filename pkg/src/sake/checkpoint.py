"""Checkpoint files: a text manifest followed by raw little-endian float64 data.

Layout::

    SAKE-CKPT v1
    meta <key>=<value> ...
    param <name> <d0,d1,...> <byte offset>     (shape '-' for a scalar)
    ...
    END
    <binary payload>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "SAKE-CKPT v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    header = [MAGIC, "meta " + " ".join(f"{k}={v}" for k, v in meta.items())]
    offset = 0
    blobs = []
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8", order="C")
        dims = ",".join(map(str, arr.shape)) or "-"  # "-" marks a 0-d value
        header.append(f"param {name} {dims} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header.append("END")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + b"".join(blobs))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a {MAGIC} file")
    lines = raw[:end].decode("ascii").splitlines()
    payload = raw[end + len(b"\nEND\n"):]
    meta: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta.update(tok.split("=", 1) for tok in rest.split())
        elif kind == "param":
            name, shape_s, off = rest.split()
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            count = int(np.prod(shape, dtype=np.int64))
            start = int(off)
            if start + 8 * count > len(payload):
                raise CheckpointError(f"{path}: parameter {name} runs past the end of the file")
            params[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)
        else:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
    return params, meta


def save_module(path, module, meta: dict, prefix: str = "") -> None:
    save_checkpoint(path, {prefix + k: p.data for k, p in module.named_parameters()}, meta)


def load_into(module, params: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy stored values into ``module``; names and shapes must match exactly."""
    own = dict(module.named_parameters())
    stored = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    missing = own.keys() - stored.keys()
    extra = stored.keys() - own.keys()
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, p in own.items():
        if p.shape != stored[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {stored[name].shape} != model shape {p.shape}")
    for name, p in own.items():
        p.data = stored[name].copy()
