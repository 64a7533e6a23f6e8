"""Single-file binary checkpoints.

Layout (documented, versioned):

    bytes 0..7    magic b"VLPTCKPT"
    bytes 8..11   little-endian uint32: length of the JSON manifest
    manifest      UTF-8 JSON
    blob          raw little-endian IEEE-754 arrays, back to back

The manifest carries {"version", "dtype", "step", "seed", "model_config",
"arrays"} where "arrays" maps a name to {"offset", "shape"}; offsets are
relative to the blob start. Parameter values live under "p/<name>" and
optimizer moments under "m1/<name>" / "m2/<name>", so a load/resume
reproduces the training trajectory bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .tensor import Parameter

MAGIC = b"VLPTCKPT"
VERSION = 1

_DTYPE_TAGS = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


@dataclass
class Checkpoint:
    step: int
    seed: int
    model_config: dict
    arrays: dict[str, np.ndarray]
    extra: dict

    def build_parameters(self) -> dict[str, Parameter]:
        """Reconstruct named Parameters including optimizer moments."""
        params = {}
        for key, arr in self.arrays.items():
            if not key.startswith("p/"):
                continue
            name = key[2:]
            p = Parameter(arr, name=name, dtype=arr.dtype)
            if "m1/" + name in self.arrays:
                p.m1 = self.arrays["m1/" + name].copy()
            if "m2/" + name in self.arrays:
                p.m2 = self.arrays["m2/" + name].copy()
            params[name] = p
        return params


def save_checkpoint(
    path,
    params: dict[str, Parameter],
    *,
    step: int,
    seed: int,
    model_config: dict,
    extra: dict | None = None,
) -> None:
    dtype = next(iter(params.values())).data.dtype
    tag = "<f8" if dtype == np.float64 else "<f4"
    blobs: list[bytes] = []
    table = {}
    offset = 0

    def put(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=tag).tobytes()
        table[name] = {"offset": offset, "shape": list(arr.shape)}
        blobs.append(raw)
        offset += len(raw)

    for name in sorted(params):
        p = params[name]
        put("p/" + name, p.data)
        put("m1/" + name, p.m1)
        put("m2/" + name, p.m2)

    manifest = {
        "version": VERSION,
        "dtype": tag,
        "step": int(step),
        "seed": int(seed),
        "model_config": model_config,
        "extra": extra or {},
        "arrays": table,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        manifest = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted manifest: {e}") from e
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {manifest.get('version')!r}"
        )
    dtype = _DTYPE_TAGS.get(manifest.get("dtype"))
    if dtype is None:
        raise CheckpointError(f"{path}: unknown dtype tag {manifest.get('dtype')!r}")
    blob = data[12 + hlen :]
    arrays = {}
    for name, entry in manifest["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"{path}: array table points past end of file ({name})")
        arrays[name] = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()
    return Checkpoint(
        step=manifest["step"],
        seed=manifest["seed"],
        model_config=manifest["model_config"],
        arrays=arrays,
        extra=manifest.get("extra", {}),
    )
