"""MIMAE1 checkpoint format.

Layout (little-endian)::

    magic      6 bytes  b"MIMAE1"
    version    u32
    config     u32 length + UTF-8 JSON (model and training configuration)
    scalars    u32 length + UTF-8 JSON (counters, gate state, history, optimizer scalars)
    n_tensors  u32
    tensors    n x [u16 name length, name UTF-8, u8 ndim, ndim x u32 dims, f32 row-major payload]
    crc32      u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from mimae.errors import ContractError, FormatError

MAGIC = b"MIMAE1"
VERSION = 1


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def encode_checkpoint(config: dict, scalars: dict, tensors: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    for blob in (_dumps(config), _dumps(scalars)):
        out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ContractError(f"tensor {name!r} has dtype {arr.dtype}; checkpoints store float32 only")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.path, self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes, path=None) -> tuple[dict, dict, dict]:
    if len(buf) < len(MAGIC) + 8:
        raise FormatError("file too short for a checkpoint", path, len(buf))
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}", path, 0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC32 mismatch; file is corrupted", path, len(buf) - 4)
    r = _Reader(body, path)
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})", path, len(MAGIC))
    blobs = []
    for what in ("config", "scalars"):
        (n,) = r.unpack("<I", f"{what} length")
        at = r.pos
        try:
            blobs.append(json.loads(r.take(n, what).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"invalid {what} JSON: {exc}", path, at) from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} unexpected trailing bytes", path, r.pos)
    return blobs[0], blobs[1], tensors


def write_checkpoint(path, config: dict, scalars: dict, tensors: dict) -> Path:
    path = Path(path)
    data = encode_checkpoint(config, scalars, tensors)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"{path}: cannot write checkpoint: {exc.strerror or exc}") from exc
    return path


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: cannot read checkpoint: {exc.strerror or exc}") from exc
    return decode_checkpoint(buf, path)


# ------------------------------------------------------------ train state
def _opt_scalars(opt) -> dict:
    return {"beta1": opt.beta1, "beta2": opt.beta2, "weight_decay": opt.weight_decay, "eps": opt.eps,
            "t": opt.t, "no_decay": sorted(opt.no_decay)}


def state_to_parts(state) -> tuple[dict, dict, dict]:
    config = {"model": state.model_config.to_dict(), "train": state.train_config.to_dict()}
    scalars = {
        "epoch": state.epoch,
        "global_step": state.global_step,
        "gate_open": state.gate_open,
        "gate_epoch": state.gate_epoch,
        "running_rec_loss": state.running_rec_loss,
        "steps_per_epoch": state.steps_per_epoch,
        "rng": {"kind": "counter", "seed": state.train_config.seed, "counter": state.global_step},
        "opt_main": _opt_scalars(state.opt_main),
        "opt_approx": _opt_scalars(state.opt_approx),
        "history": state.history,
    }
    tensors = {}
    for prefix, module in (("model", state.model), ("approx", state.approx)):
        for name, p in module.parameters().items():
            tensors[f"{prefix}/{name}"] = p.data
    for prefix, opt in (("opt_main", state.opt_main), ("opt_approx", state.opt_approx)):
        for name in sorted(opt.m):
            tensors[f"{prefix}/m/{name}"] = opt.m[name]
            tensors[f"{prefix}/v/{name}"] = opt.v[name]
    return config, scalars, tensors


def save_checkpoint(path, state) -> Path:
    """Persist a :class:`~mimae.trainer.TrainState`."""
    return write_checkpoint(path, *state_to_parts(state))


def load_checkpoint(path):
    """Restore a :class:`~mimae.trainer.TrainState` saved by :func:`save_checkpoint`."""
    from mimae.autodiff import OptimizerState
    from mimae.model import ModelConfig
    from mimae.trainer import TrainConfig, init_state

    config, scalars, tensors = read_checkpoint(path)
    try:
        model_config = ModelConfig(**config["model"])
        train_config = TrainConfig.from_dict(config["train"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint configuration is incomplete: {exc}", path) from exc
    state = init_state(model_config, train_config, scalars["steps_per_epoch"])
    for prefix, module in (("model", state.model), ("approx", state.approx)):
        for name, p in module.parameters().items():
            key = f"{prefix}/{name}"
            if key not in tensors:
                raise FormatError(f"missing tensor {key}", path)
            if tensors[key].shape != p.shape:
                raise FormatError(f"tensor {key} has shape {tensors[key].shape}, expected {p.shape}", path)
            p.data = tensors[key].copy()
    for prefix in ("opt_main", "opt_approx"):
        s = scalars[prefix]
        opt = OptimizerState(s["beta1"], s["beta2"], s["weight_decay"], s["eps"], s["t"],
                             no_decay=frozenset(s["no_decay"]))
        for key, arr in tensors.items():
            head = f"{prefix}/m/"
            if key.startswith(head):
                name = key[len(head):]
                opt.m[name] = arr.copy()
                opt.v[name] = tensors[f"{prefix}/v/{name}"].copy()
        setattr(state, prefix, opt)
    state.epoch = scalars["epoch"]
    state.global_step = scalars["global_step"]
    state.gate_open = scalars["gate_open"]
    state.gate_epoch = scalars["gate_epoch"]
    state.running_rec_loss = scalars["running_rec_loss"]
    state.history = scalars["history"]
    return state
