"""Partial low-rank adapters on the attention projections.

New-modality tokens get ``W x + b + scale * B (A x)``; text tokens get the
base projection and nothing else. The adapter rows are added into a copy of
the base output by row index, so text rows are never touched by adapter
arithmetic and stay bit-identical to the base path.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor

TARGETS = ("query", "key", "value", "out")


@dataclass
class PLoRAAdapter:
    A: Tensor  # (rank, C_in)
    B: Tensor  # (C_out, rank)
    alpha: float
    target: str

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        # rank-stabilised: alpha / sqrt(rank)
        return self.alpha / math.sqrt(self.rank)

    def n_params(self) -> int:
        return self.A.data.size + self.B.data.size


def new_adapter(c_in: int, c_out: int, rank: int, alpha: float, target: str,
                rng: np.random.Generator) -> PLoRAAdapter:
    if rank < 1:
        raise ValueError("adapter rank must be >= 1")
    A = Tensor(rng.standard_normal((rank, c_in)) / math.sqrt(c_in), requires_grad=True)
    B = Tensor(np.zeros((c_out, rank)), requires_grad=True)
    return PLoRAAdapter(A, B, float(alpha), target)


def modality_mask_from_tokens(ids, vocab_text: int, vocab_total: int) -> np.ndarray:
    """True where the token belongs to the new modality (id >= vocab_text)."""
    ids = np.asarray(ids)
    bad = (ids < 0) | (ids >= vocab_total)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"token id {int(ids[pos])} at position {pos} is outside [0, {vocab_total})")
    return ids >= vocab_text


def plora_linear_forward(weight: Tensor, bias: Tensor | None, adapter: PLoRAAdapter | None,
                         x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Base projection plus adapter delta on rows where ``mask`` is True."""
    base = ag.linear(x, weight, bias)
    if adapter is None or mask is None:
        return base
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match tokens {x.shape[:-1]}")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return base
    c_in, c_out = x.shape[-1], base.shape[-1]
    x2 = ag.reshape(x, (-1, c_in))
    delta = ag.linear(ag.linear(ag.gather_rows(x2, rows), adapter.A), adapter.B)
    delta = ag.mul(delta, adapter.scale)
    out = ag.scatter_add_rows(ag.reshape(base, (-1, c_out)), rows, delta)
    return ag.reshape(out, base.shape)


def lora_mode_forward(weight: Tensor, bias: Tensor | None, adapter: PLoRAAdapter | None,
                      x: Tensor) -> Tensor:
    """Conventional LoRA: the adapter applies to every token."""
    return plora_linear_forward(weight, bias, adapter, x, np.ones(x.shape[:-1], dtype=bool))


def attach_adapters(model, targets=TARGETS, rank: int = 8, alpha: float = 16.0,
                    seed: int = 0, mode: str = "plora"):
    """Add one adapter per target per layer; base projections become frozen."""
    from .config import PLoRAConfig

    if model.has_adapters():
        raise ValueError("adapters are already attached")
    if not model.is_moe:
        raise ValueError("adapters attach to the MoE form; convert the model first")
    targets = tuple(targets)
    model.plora = PLoRAConfig(rank=rank, alpha=float(alpha), targets=list(targets))
    model.plora.validate()
    rng = np.random.default_rng(seed)
    d = model.config.d_model
    params = {}
    for name, t in model.params.items():
        params[name] = t
        parts = name.split(".")
        if len(parts) == 4 and parts[0] == "layer" and parts[2] in TARGETS and parts[3] == "weight":
            t.requires_grad = False
            if parts[2] in targets:
                ad = new_adapter(d, d, rank, alpha, parts[2], rng)
                base = f"layer.{parts[1]}.{parts[2]}.plora"
                params[f"{base}.A"], params[f"{base}.B"] = ad.A, ad.B
                ad.A.name, ad.B.name = f"{base}.A", f"{base}.B"
    model.params = params
    model.adapter_mode = mode
    return model
