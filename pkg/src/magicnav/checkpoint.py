"""Binary checkpoint format.

Layout::

    b"MAGICNAV" | u32 version | u64 header length | JSON header | float64 blob | sha256 digest

The header indexes the blob as ``name -> [offset, shape]`` (offsets in
elements).  The digest covers every byte before it, so truncation or
corruption is detected before anything is restored.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .model import AgentModel, ModelConfig

MAGIC = b"MAGICNAV"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig | None
    arrays: dict
    iteration: int
    rng_state: dict | None
    optimizer: dict | None
    extra: dict

    def model_arrays(self, prefix="model/"):
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def build_model(self):
        model = AgentModel(self.model_config, seed=0)
        model.load_state_dict(self.model_arrays())
        return model

    def rng(self):
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def _encode(arrays):
    index, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index[name] = [offset, list(a.shape)]
        chunks.append(a.tobytes())
        offset += a.size
    return index, b"".join(chunks)


def save_checkpoint(path, model=None, optimizer=None, rng=None, iteration=0, arrays=None, extra=None):
    """Write a checkpoint; ``arrays`` adds named float arrays beside the model."""
    payload = {}
    if model is not None:
        payload.update({f"model/{k}": v for k, v in model.state_dict().items()})
    if optimizer is not None:
        payload.update({f"opt/{k}": v for k, v in optimizer.state_arrays().items()})
    payload.update(arrays or {})
    index, blob = _encode(payload)
    header = {
        "model_config": model.config.to_dict() if model is not None else None,
        "index": index,
        "iteration": int(iteration),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "optimizer": None if optimizer is None else {
            "step": optimizer.state.step, "lr": optimizer.state.lr,
            "weight_decay": optimizer.state.weight_decay, "beta1": optimizer.state.beta1,
            "beta2": optimizer.state.beta2, "eps": optimizer.state.eps},
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + blob
    data = body + hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC): len(MAGIC) + 12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    start = len(MAGIC) + 12
    header = json.loads(body[start: start + hlen])
    blob = np.frombuffer(body[start + hlen:], dtype="<f8")
    arrays = {}
    for name, (offset, shape) in header["index"].items():
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = blob[offset: offset + n].reshape(shape).astype(np.float64)
    cfg = header["model_config"]
    return Checkpoint(ModelConfig(**cfg) if cfg else None, arrays, header["iteration"], header["rng_state"],
                      header["optimizer"], header["extra"])


def restore_optimizer(ckpt, optimizer):
    meta = ckpt.optimizer
    if meta is None:
        raise CheckpointError("checkpoint has no optimizer state")
    optimizer.load_state_arrays({k[4:]: v for k, v in ckpt.arrays.items() if k.startswith("opt/")}, meta["step"])
    optimizer.state.lr = meta["lr"]
