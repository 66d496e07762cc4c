"""LLaMA-style causal decoder in dense or MoE form, with optional adapters.

Parameters live in one ordered ``name -> Tensor`` map so that trainability,
optimisation and checkpointing can address them uniformly:

    embed, head                      (V, d); head absent when tied
    layer.{i}.attn_norm, .ffn_norm   (d,)
    layer.{i}.{query,key,value,out}.weight   (d, d);  layer.{i}.out.bias
    layer.{i}.ffn.{gate,up,down}     dense FFN
    layer.{i}.moe.router             (N, d)
    layer.{i}.moe.noise.{weight,bias}
    layer.{i}.moe.expert.{e}.{gate,up,down}
    layer.{i}.{target}.plora.{A,B}   adapters
    final_norm                       (d,)
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig, MoEConfig, PLoRAConfig
from .moe import DenseFFN, ExpertCounter, ExpertSlice, MoELayer, RoutingDecision, Router
from .moe import moe_layer_forward, swiglu_ffn_forward
from .plora import TARGETS, PLoRAAdapter, plora_linear_forward


@dataclass
class LayerRouting:
    layer: int
    token_index: np.ndarray   # flat (B*L) row index of each routed token
    decision: RoutingDecision


class Decoder:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 buffers: dict[str, np.ndarray] | None = None,
                 moe: MoEConfig | None = None, vocab_new: int = 0,
                 plora: PLoRAConfig | None = None, adapter_mode: str = "plora"):
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else {}
        self.moe = moe
        self.vocab_new = vocab_new
        self.plora = plora
        self.adapter_mode = adapter_mode
        d = config.d_model // config.n_heads
        self._rope = ag.rope_tables(config.max_seq_len, d, config.rope_base)

    # -- construction ---------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Decoder":
        config.validate()
        rng = np.random.default_rng(seed)
        std = config.init_std
        resid = std / np.sqrt(2 * config.n_layers)
        d, f, V = config.d_model, config.d_ffn, config.vocab_text
        p: dict[str, Tensor] = {}

        def normal(shape, s):
            return Tensor(rng.normal(0.0, s, size=shape))

        p["embed"] = normal((V, d), std)
        for i in range(config.n_layers):
            pre = f"layer.{i}"
            p[f"{pre}.attn_norm"] = Tensor(np.ones(d))
            for t in TARGETS:
                p[f"{pre}.{t}.weight"] = normal((d, d), resid if t == "out" else std)
            if config.attn_out_bias:
                p[f"{pre}.out.bias"] = Tensor(np.zeros(d))
            p[f"{pre}.ffn_norm"] = Tensor(np.ones(d))
            p[f"{pre}.ffn.gate"] = normal((f, d), std)
            p[f"{pre}.ffn.up"] = normal((f, d), std)
            p[f"{pre}.ffn.down"] = normal((d, f), resid)
        p["final_norm"] = Tensor(np.ones(d))
        if not config.tie_head:
            p["head"] = normal((V, d), std)
        for name, t in p.items():
            t.name = name
        return cls(config, p)

    def copy(self) -> "Decoder":
        params = {}
        for name, t in self.params.items():
            nt = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
            nt.row_mask = None if t.row_mask is None else t.row_mask.copy()
            params[name] = nt
        return Decoder(copy.deepcopy(self.config), params,
                       {k: v.copy() for k, v in self.buffers.items()},
                       copy.deepcopy(self.moe), self.vocab_new,
                       copy.deepcopy(self.plora), self.adapter_mode)

    # -- views ----------------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_text + self.vocab_new

    @property
    def is_moe(self) -> bool:
        return self.moe is not None

    @property
    def head(self) -> Tensor:
        return self.params["embed"] if self.config.tie_head else self.params["head"]

    def has_adapters(self) -> bool:
        return any(".plora." in k for k in self.params)

    def ffn(self, i: int) -> DenseFFN:
        p = self.params
        return DenseFFN(p[f"layer.{i}.ffn.gate"], p[f"layer.{i}.ffn.up"], p[f"layer.{i}.ffn.down"])

    def moe_layer(self, i: int) -> MoELayer:
        p, pre = self.params, f"layer.{i}.moe"
        router = Router(p[f"{pre}.router"], p[f"{pre}.noise.weight"], p[f"{pre}.noise.bias"],
                        self.moe.top_k, self.moe.renormalize_gates)
        experts = [ExpertSlice(self.buffers[f"{pre}.expert.{e}.neurons"],
                               p[f"{pre}.expert.{e}.gate"], p[f"{pre}.expert.{e}.up"],
                               p[f"{pre}.expert.{e}.down"])
                   for e in range(self.moe.n_experts)]
        return MoELayer(router, experts)

    def adapter(self, i: int, target: str) -> PLoRAAdapter | None:
        a = self.params.get(f"layer.{i}.{target}.plora.A")
        if a is None:
            return None
        return PLoRAAdapter(a, self.params[f"layer.{i}.{target}.plora.B"], self.plora.alpha, target)

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def _check_ids(ids: np.ndarray, vocab: int) -> None:
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"token id {int(ids[pos])} at position {pos} is outside the vocabulary [0, {vocab})")


def decoder_forward(model: Decoder, ids, *, train: bool = False,
                    rng: np.random.Generator | None = None,
                    adapter_mode: str | None = None,
                    routing: list[LayerRouting] | None = None,
                    valid: np.ndarray | None = None,
                    counter: ExpertCounter | None = None,
                    aux: list | None = None,
                    diagnostic_all_experts: bool = False) -> Tensor:
    """Logits for every position of ``ids`` (shape (L,) or (B, L)).

    ``adapter_mode`` selects where adapters apply: ``"plora"`` (new-modality
    tokens only), ``"lora"`` (every token) or ``"off"``. ``routing`` collects
    per-layer decisions for the tokens flagged in ``valid``.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    B, L = ids.shape
    if L > cfg.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    _check_ids(ids, model.vocab_size)
    mode = adapter_mode or model.adapter_mode
    if mode == "plora":
        mask = ids >= cfg.vocab_text
    elif mode == "lora":
        mask = np.ones(ids.shape, dtype=bool)
    elif mode == "off":
        mask = None
    else:
        raise ValueError(f"unknown adapter mode {mode!r}")
    keep = None if valid is None else np.flatnonzero(np.asarray(valid, bool).reshape(-1))
    cos, sin = model._rope
    p = model.params
    H = cfg.n_heads

    h = ag.embedding(p["embed"], ids)
    for i in range(cfg.n_layers):
        pre = f"layer.{i}"
        a = ag.rms_norm(h, p[f"{pre}.attn_norm"], cfg.norm_eps)
        q = plora_linear_forward(p[f"{pre}.query.weight"], None, model.adapter(i, "query"), a, mask)
        k = plora_linear_forward(p[f"{pre}.key.weight"], None, model.adapter(i, "key"), a, mask)
        v = plora_linear_forward(p[f"{pre}.value.weight"], None, model.adapter(i, "value"), a, mask)
        att = ag.causal_attention(ag.rope(q, H, cos, sin), ag.rope(k, H, cos, sin), v, H)
        o = plora_linear_forward(p[f"{pre}.out.weight"], p.get(f"{pre}.out.bias"),
                                 model.adapter(i, "out"), att, mask)
        h = ag.add(h, o)
        f_in = ag.rms_norm(h, p[f"{pre}.ffn_norm"], cfg.norm_eps)
        if model.is_moe:
            flat = ag.reshape(f_in, (B * L, cfg.d_model))
            y, decision = moe_layer_forward(model.moe_layer(i), flat, train=train, rng=rng,
                                            diagnostic_all=diagnostic_all_experts,
                                            counter=counter, aux=aux)
            if routing is not None:
                idx = np.arange(B * L) if keep is None else keep
                routing.append(LayerRouting(i, idx, RoutingDecision(decision.experts[idx],
                                                                    decision.gates[idx])))
            y = ag.reshape(y, (B, L, cfg.d_model))
        else:
            y = swiglu_ffn_forward(model.ffn(i), f_in)
        h = ag.add(h, y)
    h = ag.rms_norm(h, p["final_norm"], cfg.norm_eps)
    logits = ag.linear(h, model.head)
    if single:
        logits = ag.reshape(logits, (L, model.vocab_size))
    return logits


def generate(model: Decoder, prompt, max_new: int, *, temperature: float = 0.0,
             top_k: int | None = None, seed: int = 0, stop_token: int | None = None,
             allowed: tuple[int, int] | None = None) -> list[int]:
    """Autoregressive continuation of ``prompt``.

    ``temperature`` 0 is greedy. ``allowed`` restricts sampling to the id
    range ``[lo, hi)``. Eval-mode routing only.
    """
    ids = [int(t) for t in prompt]
    if not ids:
        raise ValueError("prompt must be nonempty")
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for _ in range(max_new):
        window = ids[-model.config.max_seq_len:]
        logits = decoder_forward(model, np.array(window)).data[-1].copy()
        if allowed is not None:
            lo, hi = allowed
            logits[:lo] = -np.inf
            logits[hi:] = -np.inf
        if temperature <= 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            if top_k is not None and top_k < z.size:
                cut = np.sort(z)[-top_k]
                z = np.where(z < cut, -np.inf, z)
            z = z - z.max()
            pr = np.exp(z)
            pr /= pr.sum()
            nxt = int(rng.choice(z.size, p=pr))
        ids.append(nxt)
        out.append(nxt)
        if stop_token is not None and nxt == stop_token:
            break
    return out
