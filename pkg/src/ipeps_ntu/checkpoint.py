"""Bit-exact checkpoint container for iPEPS states and their CTMRG environments.

Layout::

    b"IPEPSCKP"                     8 bytes magic
    header length                   8 bytes, unsigned little-endian
    header                          UTF-8 JSON
    array payloads                  raw little-endian IEEE-754, C order

The header lists every array with its name, dtype, shape and byte offset
relative to the start of the payload block.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctmrg import CtmEnvironment
from .gates import ModelParams
from .lattice import IpepsState
from .thermal import PurificationState

MAGIC = b"IPEPSCKP"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: IpepsState | PurificationState
    step_index: int
    time_or_beta: float
    params: ModelParams
    scheme: str
    env: CtmEnvironment | None = None
    rng_seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "purification" if isinstance(self.state, PurificationState) else "ipeps"


def _le(arr: np.ndarray) -> np.ndarray:
    kind = "<c16" if np.iscomplexobj(arr) else "<f8"
    return np.ascontiguousarray(arr, dtype=kind)


def save(path, ck: Checkpoint) -> None:
    """Write ``ck`` atomically (temporary file plus rename)."""
    inner = ck.state.inner if ck.kind == "purification" else ck.state
    arrays = [("A", inner.a), ("B", inner.b)]
    env_meta = None
    if ck.env is not None:
        e = ck.env
        for k in range(4):
            for s in range(2):
                arrays.append((f"C{k}{s}", e.c[k][s]))
                arrays.append((f"T{k}{s}", e.t[k][s]))
        env_meta = {
            "chi": e.chi,
            "converged": e.converged,
            "sweeps": e.sweeps,
            "bond_shape": list(e.bond_shape),
        }
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        a = _le(arr)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": ck.kind,
        "p": inner.phys_dim,
        "D": inner.bond_dim,
        "scalar_kind": inner.scalar_kind,
        "step_index": ck.step_index,
        "time_or_beta": ck.time_or_beta,
        "normalization_log": inner.normalization_log,
        "model_params": ck.params.to_dict(),
        "scheme": ck.scheme,
        "rng_seed": ck.rng_seed,
        "arrays": entries,
        "environment": env_meta,
        "extra": ck.extra,
    }
    raw = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode())
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {header.get('schema_version')}")
    base = 16 + n
    arrays = {}
    for ent in header["arrays"]:
        dt = np.dtype(ent["dtype"])
        count = int(np.prod(ent["shape"], dtype=np.int64))
        start = base + ent["offset"]
        buf = data[start : start + count * dt.itemsize]
        if len(buf) != count * dt.itemsize:
            raise CheckpointError(f"truncated array {ent['name']}")
        arrays[ent["name"]] = np.frombuffer(buf, dtype=dt).reshape(ent["shape"]).astype(dt.newbyteorder("="))
    inner = IpepsState(arrays["A"], arrays["B"], header["normalization_log"])
    if header["kind"] == "purification":
        state = PurificationState(inner, header["time_or_beta"])
    else:
        state = inner
    env = None
    meta = header.get("environment")
    if meta is not None:
        env = CtmEnvironment(
            c=[[arrays[f"C{k}{s}"] for s in range(2)] for k in range(4)],
            t=[[arrays[f"T{k}{s}"] for s in range(2)] for k in range(4)],
            chi=meta["chi"],
            converged=meta["converged"],
            sweeps=meta["sweeps"],
            bond_shape=tuple(meta["bond_shape"]),
        )
        env.spectra = env.corner_spectra()
    return Checkpoint(
        state=state,
        step_index=header["step_index"],
        time_or_beta=header["time_or_beta"],
        params=ModelParams(**header["model_params"]),
        scheme=header["scheme"],
        env=env,
        rng_seed=header["rng_seed"],
        extra=header.get("extra", {}),
    )
