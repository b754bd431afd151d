"""Binary checkpoints of flow states.

Layout (little-endian): magic b"CFCK", u32 version, u32 header length, UTF-8
JSON header (domain, grid construction parameters, state scalars), then the
field payload as float64.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .flow import FlowState
from .geometry import Domain, Field, Grid, build_grid

MAGIC = b"CFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def grid_header(grid: Grid) -> dict:
    return {"domain": {"kind": grid.domain.kind, "n": grid.domain.n,
                       "params": list(grid.domain.params)},
            "grid": dict(grid.spec)}


def grid_from_header(hdr: dict) -> Grid:
    d = hdr["domain"]
    dom = Domain(d["kind"], int(d["n"]), tuple(float(x) for x in d["params"]))
    g = dict(hdr["grid"])
    mode = g.pop("mode")
    return build_grid(dom, mode, **g)


def write_checkpoint(path, state: FlowState) -> None:
    """Write atomically: a temporary file is renamed over the target."""
    path = Path(path)
    scalars = {f.name: getattr(state, f.name) for f in fields(state) if f.name != "u"}
    hdr = grid_header(state.u.grid)
    hdr["state"] = {k: float(v) if k != "step_index" else int(v) for k, v in scalars.items()}
    hdr["size"] = int(state.u.grid.size)
    raw = json.dumps(hdr, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(state.u.values, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path, grid: Grid | None = None) -> FlowState:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        hdr = json.loads(fh.read(hlen).decode("utf-8"))
        vals = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    if len(vals) != hdr["size"]:
        raise CheckpointError(f"{path}: payload has {len(vals)} values, header says {hdr['size']}")
    grid = grid_from_header(hdr) if grid is None else grid
    if grid.size != len(vals):
        raise CheckpointError("checkpoint does not match the supplied grid")
    st = hdr["state"]
    return FlowState(u=Field(grid, vals), s_time=st["s_time"], t_time=st["t_time"], r=st["r"],
                     step_index=int(st["step_index"]), dt=st["dt"], vol_drift=st["vol_drift"],
                     clock=st["clock"])
