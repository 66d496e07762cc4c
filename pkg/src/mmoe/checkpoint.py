"""Binary checkpoint container.

Layout::

    b"MMOE"  u32 version  u64 header_len  header (UTF-8 JSON, sorted keys)
    payloads, little-endian, at the header's offsets from the payload start

The header maps each tensor name to shape, dtype, offset, nbytes, frozen
flag and a row-mask descriptor (``[lo, hi)`` of trainable rows, or null),
and carries the model configuration.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .config import ModelConfig, MoEConfig, PLoRAConfig
from .model import Decoder
from .plora import TARGETS

MAGIC = b"MMOE"
VERSION = 1
_DTYPES = {"f64": "<f8", "f32": "<f4", "i64": "<i8"}


class CheckpointError(ValueError):
    pass


def _mask_descriptor(mask: np.ndarray | None):
    if mask is None:
        return None
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return [0, 0]
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    if hi - lo != idx.size:
        raise CheckpointError("row masks must be a contiguous range")
    return [lo, hi]


def _model_meta(model: Decoder) -> dict:
    return {
        "model": dataclasses.asdict(model.config),
        "moe": None if model.moe is None else dataclasses.asdict(model.moe),
        "plora": None if model.plora is None else dataclasses.asdict(model.plora),
        "vocab_new": model.vocab_new,
        "adapter_mode": model.adapter_mode,
    }


def save_checkpoint(model: Decoder, path: str | Path, precision: str = "f64") -> None:
    if precision not in ("f64", "f32"):
        raise CheckpointError(f"precision must be f64 or f32, got {precision!r}")
    tensors, blobs, offset = {}, [], 0
    items = [(n, t.data, precision, not t.requires_grad, _mask_descriptor(t.row_mask), "param")
             for n, t in model.params.items()]
    items += [(n, b, "i64", True, None, "buffer") for n, b in model.buffers.items()]
    for name, arr, dt, frozen, mask, kind in items:
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        tensors[name] = {"shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw),
                         "frozen": bool(frozen), "rows": mask, "kind": kind}
        blobs.append(raw)
        offset += len(raw)
    header = {"meta": _model_meta(model), "order": [i[0] for i in items], "tensors": tensors}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes)
        for b in blobs:
            fh.write(b)


def read_header(path: str | Path) -> tuple[dict, int]:
    """Parsed header and the file offset where payloads start."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<IQ", head[4:])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    return header, 16 + hlen


def expected_shapes(config: ModelConfig, moe: MoEConfig | None = None, vocab_new: int = 0,
                    plora: PLoRAConfig | None = None) -> dict[str, tuple[int, ...]]:
    """Parameter shapes implied by a configuration, in canonical order."""
    d, f, V = config.d_model, config.d_ffn, config.vocab_text + vocab_new
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d)}
    for i in range(config.n_layers):
        pre = f"layer.{i}"
        shapes[f"{pre}.attn_norm"] = (d,)
        for t in TARGETS:
            shapes[f"{pre}.{t}.weight"] = (d, d)
            if plora is not None and t in plora.targets:
                shapes[f"{pre}.{t}.plora.A"] = (plora.rank, d)
                shapes[f"{pre}.{t}.plora.B"] = (d, plora.rank)
        if config.attn_out_bias:
            shapes[f"{pre}.out.bias"] = (d,)
        shapes[f"{pre}.ffn_norm"] = (d,)
        if moe is None:
            shapes[f"{pre}.ffn.gate"] = (f, d)
            shapes[f"{pre}.ffn.up"] = (f, d)
            shapes[f"{pre}.ffn.down"] = (d, f)
        else:
            N, fe = moe.n_experts, f // moe.n_experts
            shapes[f"{pre}.moe.router"] = (N, d)
            shapes[f"{pre}.moe.noise.weight"] = (N, d)
            shapes[f"{pre}.moe.noise.bias"] = (N,)
            for e in range(N):
                shapes[f"{pre}.moe.expert.{e}.gate"] = (fe, d)
                shapes[f"{pre}.moe.expert.{e}.up"] = (fe, d)
                shapes[f"{pre}.moe.expert.{e}.down"] = (d, fe)
    shapes["final_norm"] = (d,)
    if not config.tie_head:
        shapes["head"] = (V, d)
    return shapes


def load_checkpoint(path: str | Path, expect: dict[str, tuple[int, ...]] | None = None) -> Decoder:
    """Rebuild a decoder. ``expect`` (see ``expected_shapes``) is checked first."""
    header, start = read_header(path)
    tensors = header["tensors"]
    size = Path(path).stat().st_size
    prev_end = 0
    for name in header["order"]:
        info = tensors[name]
        if info["offset"] < prev_end or start + info["offset"] + info["nbytes"] > size:
            raise CheckpointError(f"{path}: tensor {name} has an invalid byte range")
        prev_end = info["offset"] + info["nbytes"]
    if expect is not None:
        for name, shape in expect.items():
            if name not in tensors:
                raise CheckpointError(f"tensor {name} expected with shape {tuple(shape)} is missing")
            if tuple(tensors[name]["shape"]) != tuple(shape):
                raise CheckpointError(f"tensor {name} has shape {tuple(tensors[name]['shape'])}, "
                                      f"expected {tuple(shape)}")
    meta = header["meta"]
    config = ModelConfig(**meta["model"])
    moe = None if meta["moe"] is None else MoEConfig(**meta["moe"])
    plora = None if meta["plora"] is None else PLoRAConfig(**meta["plora"])
    implied = expected_shapes(config, moe, meta["vocab_new"], plora)
    for name, shape in implied.items():
        if name not in tensors or tuple(tensors[name]["shape"]) != shape:
            raise CheckpointError(f"{path}: tensor {name} does not match the stored configuration")
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for name in header["order"]:
            info = tensors[name]
            fh.seek(start + info["offset"])
            arr = np.frombuffer(fh.read(info["nbytes"]), dtype=_DTYPES[info["dtype"]])
            arr = arr.reshape(info["shape"])
            if info["kind"] == "buffer":
                buffers[name] = arr.astype(np.int64)
                continue
            t = Tensor(arr.astype(np.float64), requires_grad=not info["frozen"], name=name)
            if info["rows"] is not None:
                lo, hi = info["rows"]
                mask = np.zeros(info["shape"][0], dtype=bool)
                mask[lo:hi] = True
                t.row_mask = mask
            params[name] = t
    return Decoder(config, params, buffers, moe, meta["vocab_new"], plora, meta["adapter_mode"])
