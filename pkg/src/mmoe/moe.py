"""Dense FFN to sparse MoE conversion and the noisy top-K gated forward.

Experts are built by splitting the intermediate neurons of a SwiGLU FFN into
equal random disjoint groups. Because the FFN output is a sum over
intermediate neurons, the experts summed with weight one reproduce the
parent exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class PartitionError(ValueError):
    pass


@dataclass
class DenseFFN:
    w_gate: Tensor  # (d_ffn, d_model)
    w_up: Tensor    # (d_ffn, d_model)
    w_down: Tensor  # (d_model, d_ffn)

    @property
    def d_ffn(self) -> int:
        return self.w_gate.shape[0]


@dataclass
class ExpertSlice:
    neuron_indices: np.ndarray
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class Router:
    w_g: Tensor       # (N, d_model)
    w_noise: Tensor   # (N, d_model)
    b_noise: Tensor   # (N,)
    top_k: int
    renormalize: bool = False

    @property
    def n_experts(self) -> int:
        return self.w_g.shape[0]


@dataclass
class RoutingDecision:
    """Selected experts per token, best first, with their gate values."""

    experts: np.ndarray  # (T, K) int
    gates: np.ndarray    # (T, K) float


@dataclass
class MoELayer:
    router: Router
    experts: list[ExpertSlice]


@dataclass
class ExpertCounter:
    token_evals: int = 0
    by_expert: dict[int, int] = field(default_factory=dict)

    def add(self, expert: int, n: int) -> None:
        self.token_evals += n
        self.by_expert[expert] = self.by_expert.get(expert, 0) + n


def swiglu_ffn_forward(ffn: DenseFFN | ExpertSlice, x: Tensor) -> Tensor:
    """``W_down (silu(W_gate x) * (W_up x))`` with no biases."""
    return ag.linear(ag.mul(ag.silu(ag.linear(x, ffn.w_gate)), ag.linear(x, ffn.w_up)), ffn.w_down)


def partition_ffn(ffn: DenseFFN, n_experts: int, seed: int) -> list[ExpertSlice]:
    """Randomly split the FFN's intermediate neurons into equal disjoint experts."""
    d_ffn = ffn.d_ffn
    if n_experts < 2:
        raise PartitionError(f"need at least 2 experts, got {n_experts}")
    if d_ffn % n_experts:
        raise PartitionError(f"{n_experts} experts do not divide d_ffn={d_ffn}")
    perm = np.random.default_rng(seed).permutation(d_ffn)
    slices = []
    for group in perm.reshape(n_experts, -1):
        idx = np.sort(group)
        slices.append(ExpertSlice(
            neuron_indices=idx,
            w_gate=Tensor(ffn.w_gate.data[idx].copy()),
            w_up=Tensor(ffn.w_up.data[idx].copy()),
            w_down=Tensor(ffn.w_down.data[:, idx].copy()),
        ))
    return slices


def check_partition(experts: list[ExpertSlice], d_ffn: int) -> None:
    sizes = {len(e.neuron_indices) for e in experts}
    if len(sizes) != 1:
        raise PartitionError(f"experts have unequal sizes {sorted(sizes)}")
    allidx = np.concatenate([e.neuron_indices for e in experts])
    if len(np.unique(allidx)) != len(allidx):
        raise PartitionError("a neuron is assigned to more than one expert")
    if len(allidx) != d_ffn or set(allidx.tolist()) != set(range(d_ffn)):
        raise PartitionError(f"experts do not cover all {d_ffn} neurons")


def merge_experts(experts: list[ExpertSlice], d_ffn: int) -> DenseFFN:
    """Scatter expert slices back into a dense FFN (inverse of the partition)."""
    check_partition(experts, d_ffn)
    d_model = experts[0].w_gate.shape[1]
    gate = np.zeros((d_ffn, d_model))
    up = np.zeros((d_ffn, d_model))
    down = np.zeros((d_model, d_ffn))
    for e in experts:
        gate[e.neuron_indices] = e.w_gate.data
        up[e.neuron_indices] = e.w_up.data
        down[:, e.neuron_indices] = e.w_down.data
    return DenseFFN(Tensor(gate), Tensor(up), Tensor(down))


def dense_equivalence_check(parent: DenseFFN, experts: list[ExpertSlice], x: np.ndarray) -> float:
    """Max abs deviation between the summed experts and the parent FFN."""
    check_partition(experts, parent.d_ffn)
    xt = Tensor(x)
    total = np.zeros_like(swiglu_ffn_forward(parent, xt).data)
    for e in experts:
        total += swiglu_ffn_forward(e, xt).data
    return float(np.max(np.abs(total - swiglu_ffn_forward(parent, xt).data)))


def gate_scores(router: Router, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Softmax expert scores per token, with softplus-scaled Gaussian noise when training."""
    logits = ag.linear(x, router.w_g)
    if train:
        if rng is None:
            raise ValueError("training-mode gating needs an rng for the noise draw")
        eps = Tensor(rng.standard_normal(logits.shape))
        noise = ag.mul(eps, ag.softplus(ag.linear(x, router.w_noise, router.b_noise)))
        logits = ag.add(logits, noise)
    return ag.softmax_rows(logits)


def select_top_k(s: np.ndarray, k: int, renormalize: bool = False) -> RoutingDecision:
    """Keep the ``k`` largest scores per row; ties go to the lower index."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if not 1 <= k <= s.shape[-1]:
        raise ValueError(f"k={k} outside [1, {s.shape[-1]}]")
    order = np.argsort(-s, axis=-1, kind="stable")[:, :k]
    gates = np.take_along_axis(s, order, axis=-1)
    if renormalize:
        gates = gates / gates.sum(axis=-1, keepdims=True)
    return RoutingDecision(order, gates)


def _selected_gates(s: Tensor, experts: np.ndarray, renormalize: bool) -> Tensor:
    """(T, K) gate values taken from ``s`` at ``experts``, differentiable in ``s``."""
    sd = s.data
    picked = np.take_along_axis(sd, experts, axis=-1)
    total = picked.sum(axis=-1, keepdims=True)
    out = picked / total if renormalize else picked

    def backward(g, needs):
        if renormalize:
            gp = (g - (g * out).sum(axis=-1, keepdims=True)) / total
        else:
            gp = g
        gs = np.zeros_like(sd)
        np.put_along_axis(gs, experts, gp, axis=-1)
        return (gs,)

    return ag._record(out, (s,), backward, "topk_gates")


def _pick(gates: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    shape = gates.shape

    def backward(g, needs):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return ag._record(gates.data[rows, cols], (gates,), backward, "pick")


def importance_cv2(s: Tensor, experts: np.ndarray) -> Tensor:
    """Squared coefficient of variation of per-expert summed gate mass."""
    sd = s.data
    mask = np.zeros_like(sd)
    np.put_along_axis(mask, experts, 1.0, axis=-1)
    imp = (sd * mask).sum(axis=0)
    n = imp.size
    mu = imp.mean()
    var = ((imp - mu) ** 2).mean()
    val = var / (mu * mu)

    def backward(g, needs):
        dimp = (2.0 * (imp - mu) / n) / (mu * mu) - 2.0 * var / (mu ** 3) / n
        return (float(g) * mask * dimp[None, :],)

    return ag._record(np.asarray(val), (s,), backward, "importance_cv2")


def moe_layer_forward(layer: MoELayer, x: Tensor, train: bool = False,
                      rng: np.random.Generator | None = None,
                      diagnostic_all: bool = False,
                      counter: ExpertCounter | None = None,
                      aux: list | None = None) -> tuple[Tensor, RoutingDecision]:
    """Gated sum over the selected experts for a (T, d_model) token batch.

    Only experts selected for at least one token are evaluated, and only on
    their tokens. ``diagnostic_all`` evaluates every expert with gate 1.
    """
    T = x.shape[0]
    router = layer.router
    n = router.n_experts
    if len(layer.experts) != n:
        raise ValueError(f"router has {n} outputs but layer holds {len(layer.experts)} experts")
    if diagnostic_all:
        experts = np.tile(np.arange(n), (T, 1))
        decision = RoutingDecision(experts, np.ones((T, n)))
        gates = Tensor(decision.gates)
    else:
        s = gate_scores(router, x, train=train, rng=rng)
        decision = select_top_k(s.data, router.top_k, router.renormalize)
        gates = _selected_gates(s, decision.experts, router.renormalize)
        if aux is not None:
            aux.append(importance_cv2(s, decision.experts))
    out = Tensor(np.zeros(x.shape))
    for e in range(n):
        rows, slots = np.nonzero(decision.experts == e)
        if rows.size == 0:
            continue
        if counter is not None:
            counter.add(e, int(rows.size))
        h = swiglu_ffn_forward(layer.experts[e], ag.gather_rows(x, rows))
        h = ag.scale_rows(h, _pick(gates, rows, slots))
        out = ag.scatter_add_rows(out, rows, h)
    return out, decision


def load_balance_stats(decisions: list[RoutingDecision] | RoutingDecision,
                       n_experts: int) -> tuple[np.ndarray, float]:
    """Fraction of routed token-slots per expert and their coefficient of variation."""
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    if not decisions:
        raise ValueError("no routing decisions given")
    ids = np.concatenate([d.experts.reshape(-1) for d in decisions])
    if ids.size == 0:
        raise ValueError("no routed tokens")
    counts = np.bincount(ids, minlength=n_experts).astype(np.float64)
    frac = counts / counts.sum()
    cov = float(frac.std() / frac.mean())
    return frac, cov


def convert_to_moe(model, n_experts: int, top_k: int, seed: int = 0,
                   renormalize_gates: bool = False,
                   noise_bias_init: float = -10.0,
                   aux_load_balance_weight: float = 0.0):
    """Return an MoE copy of a dense decoder; every FFN is split into experts.

    Routers start at zero (uniform scores) and the noise gate at
    ``softplus(noise_bias_init)``, about 4.5e-5 for the default.
    """
    from .config import MoEConfig

    if model.is_moe:
        raise ValueError("model is already in MoE form")
    cfg = MoEConfig(n_experts=n_experts, top_k=top_k, renormalize_gates=renormalize_gates,
                    aux_load_balance_weight=aux_load_balance_weight,
                    noise_bias_init=noise_bias_init, partition_seed=seed)
    cfg.validate(model.config)
    out = model.copy()
    d = model.config.d_model
    params: dict[str, Tensor] = {}
    for name, t in out.params.items():
        if ".ffn." in name:
            continue
        params[name] = t
        if name.endswith(".ffn_norm"):
            i = int(name.split(".")[1])
            pre = f"layer.{i}.moe"
            experts = partition_ffn(model.ffn(i), n_experts, seed + i)
            params[f"{pre}.router"] = Tensor(np.zeros((n_experts, d)))
            params[f"{pre}.noise.weight"] = Tensor(np.zeros((n_experts, d)))
            params[f"{pre}.noise.bias"] = Tensor(np.full(n_experts, noise_bias_init))
            for e, sl in enumerate(experts):
                params[f"{pre}.expert.{e}.gate"] = sl.w_gate
                params[f"{pre}.expert.{e}.up"] = sl.w_up
                params[f"{pre}.expert.{e}.down"] = sl.w_down
                out.buffers[f"{pre}.expert.{e}.neurons"] = sl.neuron_indices.astype(np.int64)
    for name, t in params.items():
        t.name = name
    out.params = params
    out.moe = cfg
    return out
