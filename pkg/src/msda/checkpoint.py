"""Binary checkpoints: a JSON manifest followed by raw little-endian float64 arrays.

Layout::

    b"MSDACKPT" | u32 version | u32 header_len | header (UTF-8 JSON) | data

The header lists every array as {name, shape, dtype, offset} (offset relative
to the start of the data block) next to free-form metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelConfig, ModelParams
from .optim import AdamState

MAGIC = b"MSDACKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(Exception):
    pass


def write_arrays(path: Path, arrays: dict, meta: dict) -> None:
    manifest, offset = [], 0
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "dtype": "<f8", "offset": offset})
        blobs.append(a.tobytes(order="C"))
        offset += a.nbytes
    header = json.dumps({"arrays": manifest, "meta": meta}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_arrays(path: Path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] != "<f8":
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']} for {entry['name']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = start + entry["offset"]
        if lo + 8 * count > len(raw):
            raise CheckpointError(f"{path}: array {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=lo).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def checkpoint_name(role: str, stage: str, step: int) -> str:
    return f"{role}-{stage}-{step}.ckpt"


@dataclass
class TrainState:
    """Everything one role needs to continue training bit-exactly.

    Random streams are derived from (seed, step), so the seed and step counter
    stand in for generator state.
    """

    role: str
    stage: str
    params: ModelParams
    optim: AdamState
    step: int = 0
    epoch: int = 0
    seed: int = 0
    best_dev_wer: float = float("inf")
    best_step: int = -1
    extra: dict = field(default_factory=dict)

    def copy(self) -> "TrainState":
        return TrainState(
            self.role, self.stage, self.params.copy(), self.optim.copy(), self.step, self.epoch,
            self.seed, self.best_dev_wer, self.best_step, json.loads(json.dumps(self.extra)),
        )


def save_params(path: Path, params: ModelParams, meta: Optional[dict] = None) -> Path:
    meta = dict(meta or {})
    meta["model_config"] = params.config.to_dict()
    write_arrays(path, {f"params/{k}": v for k, v in params.arrays().items()}, meta)
    return Path(path)


def load_params(path: Path) -> tuple[ModelParams, dict]:
    arrays, meta = read_arrays(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: missing model_config")
    config = ModelConfig(**meta["model_config"])
    params = {k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")}
    return ModelParams(config, params), meta


def save_state(path: Path, state: TrainState, meta: Optional[dict] = None) -> Path:
    arrays = {f"params/{k}": v for k, v in state.params.arrays().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.optim.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.optim.v.items()})
    meta = dict(meta or {})
    best = state.best_dev_wer
    meta.update(
        model_config=state.params.config.to_dict(),
        role=state.role,
        stage=state.stage,
        step=state.step,
        epoch=state.epoch,
        seed=state.seed,
        best_dev_wer=None if best == float("inf") else best,
        best_step=state.best_step,
        adam_t=state.optim.t,
        adam_skipped=state.optim.skipped,
        extra=state.extra,
    )
    write_arrays(path, arrays, meta)
    return Path(path)


def load_state(path: Path) -> tuple[TrainState, dict]:
    arrays, meta = read_arrays(path)
    for key in ("role", "stage", "step", "adam_t"):
        if key not in meta:
            raise CheckpointError(f"{path}: not a training state (missing {key})")
    config = ModelConfig(**meta["model_config"])

    def section(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    params = ModelParams(config, section("params/"))
    optim = AdamState(section("adam_m/"), section("adam_v/"), meta["adam_t"], meta["adam_skipped"])
    best = meta["best_dev_wer"]
    state = TrainState(
        meta["role"], meta["stage"], params, optim, meta["step"], meta["epoch"], meta["seed"],
        float("inf") if best is None else best, meta["best_step"], meta.get("extra", {}),
    )
    return state, meta
