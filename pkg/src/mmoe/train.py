"""Optimisation, evaluation and the mode x init comparison matrix."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .analytics import RoutingTrace, collect_trace
from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .data import pack_batches
from .model import Decoder, decoder_forward


class NumericError(FloatingPointError):
    pass


class InvariantError(AssertionError):
    pass


MODES = ("plora", "lora", "frozen-adapter-only", "text")


# -- schedule -------------------------------------------------------------------

def lr_at(step: int, total_steps: int, lr_max: float, lr_min: float, warmup_steps: int) -> float:
    """Linear warmup from 0 to ``lr_max``, then cosine decay to ``lr_min`` at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr_max
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


# -- trainable set ----------------------------------------------------------------

def _is_router(name: str) -> bool:
    return ".moe.router" in name or ".moe.noise." in name


def _is_expert(name: str) -> bool:
    return ".moe.expert." in name


def trainable_names(model: Decoder, mode: str) -> list[str]:
    """The tensors a mode updates; ``embed``/``head`` are restricted to new rows by their row masks."""
    if mode not in MODES:
        raise ValueError(f"unknown train mode {mode!r}")
    if mode == "text":
        if model.vocab_new:
            raise ValueError("text mode trains an unexpanded model")
        return list(model.params)
    if not model.vocab_new or not model.has_adapters():
        raise ValueError(f"{mode} mode needs an expanded model with adapters attached")
    names = []
    for name in model.params:
        if name in ("embed", "head") or ".plora." in name:
            names.append(name)
        elif mode != "frozen-adapter-only" and (_is_router(name) or _is_expert(name)):
            names.append(name)
    return names


def apply_trainable_set(model: Decoder, mode: str) -> list[str]:
    names = set(trainable_names(model, mode))
    for name, t in model.params.items():
        t.requires_grad = name in names
        t.grad = None
    if mode in ("plora", "frozen-adapter-only"):
        model.adapter_mode = "plora"
    elif mode == "lora":
        model.adapter_mode = "lora"
    return [n for n in model.params if n in names]


def frozen_digest(model: Decoder) -> dict[str, str]:
    """SHA-256 of every frozen tensor and of the frozen rows of row-masked tensors."""
    out = {}
    for name, t in model.params.items():
        if not t.requires_grad:
            out[name] = hashlib.sha256(t.data.tobytes()).hexdigest()
        elif t.row_mask is not None:
            out[name + "[frozen rows]"] = hashlib.sha256(t.data[~t.row_mask].tobytes()).hexdigest()
    return out


# -- optimizer --------------------------------------------------------------------

def decays(name: str, t: ag.Tensor) -> bool:
    """Weight decay applies to expert, router and other 2-D projection weights."""
    if name in ("embed", "head") or ".plora." in name:
        return False
    return t.data.ndim == 2


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    lr_scale: Callable[[str], float] | None = None
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, ag.Tensor], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            rows = p.row_mask
            g = p.grad if rows is None else p.grad[rows]
            x = p.data if rows is None else p.data[rows]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and decays(name, p):
                upd = upd + self.weight_decay * x
            if self.lr_scale is not None:
                upd = upd * self.lr_scale(name)
            if rows is None:
                p.data -= lr * upd
            else:
                p.data[rows] = x - lr * upd


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    traces: list[RoutingTrace] = field(default_factory=list)
    steps: int = 0

    @property
    def losses(self) -> np.ndarray:
        return np.array([c[1] for c in self.curve])


def batch_loss(model: Decoder, batch, *, train: bool, rng=None, aux_weight: float = 0.0) -> ag.Tensor:
    aux: list | None = [] if aux_weight else None
    logits = decoder_forward(model, batch.inputs, train=train, rng=rng, valid=batch.valid, aux=aux)
    loss = ag.cross_entropy_next_token(logits, batch.targets, batch.ignore_mask)
    if aux:
        for a in aux:
            loss = ag.add(loss, ag.mul(a, aux_weight / len(aux)))
    return loss


def train(model: Decoder, sequences, cfg: TrainConfig, *, epochs: int = 1,
          max_steps: int | None = None, lr_max: float | None = None,
          seed: int | None = None, loss_on: str | None = None,
          checkpoint_dir: str | Path | None = None, checkpoint_tag: str = "",
          probe=None, aux_weight: float = 0.0,
          on_epoch: Callable[[int, Decoder], None] | None = None,
          stop_below: float | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """AdamW on the model's ``requires_grad`` tensors; returns the per-step loss curve.

    Batches are reshuffled every epoch from ``seed``. Gating noise is on.
    After each epoch the frozen tensors are re-hashed, a checkpoint is
    written when ``checkpoint_dir`` is set, and an eval-mode routing trace
    of ``probe`` is recorded, then ``on_epoch(epoch, model)`` is called.
    ``stop_below`` ends training once a step's loss is below it.
    """
    seed = cfg.seed if seed is None else seed
    loss_on = loss_on or cfg.loss_on
    lr_max = cfg.lr_max if lr_max is None else lr_max
    lr_min = cfg.lr_min * (lr_max / cfg.lr_max) if cfg.lr_max else cfg.lr_min
    loss_from = model.config.vocab_text if loss_on == "new" else None
    per_epoch = math.ceil(len(sequences) / cfg.batch_size)
    total = (epochs * per_epoch) // cfg.grad_accum
    if max_steps is not None:
        total = min(total, max_steps)
    moe_scale = cfg.moe_lr_scale if loss_on == "new" or model.vocab_new else 1.0
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
                lr_scale=lambda n: moe_scale if (_is_router(n) or _is_expert(n)) else 1.0)
    rng = np.random.default_rng(seed)
    params = model.params
    digest = frozen_digest(model)
    result = TrainResult()
    step = 0
    for epoch in range(epochs):
        if step >= total:
            break
        batches = pack_batches(sequences, cfg.batch_size, model.config.max_seq_len, model.vocab_size,
                               seed=seed * 1009 + epoch, loss_from=loss_from)
        for start in range(0, len(batches) - cfg.grad_accum + 1, cfg.grad_accum):
            if step >= total:
                break
            lr = lr_at(step + 1, total, lr_max, lr_min, cfg.warmup_steps)
            value = 0.0
            for b in batches[start:start + cfg.grad_accum]:
                with ag.Tape() as tape:
                    loss = batch_loss(model, b, train=True, rng=rng, aux_weight=aux_weight)
                    if not np.isfinite(loss.data):
                        _dump_nonfinite(b, step, checkpoint_dir)
                        raise NumericError(f"non-finite loss at step {step} (epoch {epoch}); "
                                           f"batch of {b.inputs.shape[0]} sequences, "
                                           f"{b.n_targets} targets")
                    scaled = ag.mul(loss, 1.0 / cfg.grad_accum)
                    tape.backward(scaled)
                value += float(loss.data) / cfg.grad_accum
            opt.step(params, lr)
            for p in params.values():
                p.grad = None
            step += 1
            result.curve.append((step, value, lr))
            if log and (step % 50 == 0 or step == total):
                log(f"step {step}/{total} loss {value:.4f} lr {lr:.3g}")
            if stop_below is not None and value < stop_below:
                total = step
        check_frozen(model, digest)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(checkpoint_dir) / f"{checkpoint_tag}epoch{epoch + 1}.mmoe")
        if probe is not None and model.is_moe:
            result.traces.append(collect_trace(model, probe, meta={"epoch": epoch + 1}))
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    result.steps = step
    return result


def check_frozen(model: Decoder, digest: dict[str, str]) -> None:
    now = frozen_digest(model)
    for name, h in digest.items():
        if now.get(name) != h:
            raise InvariantError(f"frozen tensor {name} changed during training")


def _dump_nonfinite(batch, step: int, directory) -> None:
    if directory is None:
        return
    Path(directory).mkdir(parents=True, exist_ok=True)
    np.savez(Path(directory) / f"nonfinite_step{step}.npz", inputs=batch.inputs,
             targets=batch.targets, ignore_mask=batch.ignore_mask)


def write_curve_csv(path: str | Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for s, loss, lr in curve:
            w.writerow([s, repr(float(loss)), repr(float(lr))])


# -- evaluation -------------------------------------------------------------------

def token_nll(model: Decoder, sequences, which: str, batch_size: int = 32,
              adapter_mode: str | None = None) -> np.ndarray:
    """Per-position NLL for the positions selected by ``which``.

    ``text``: text targets, scored by a softmax over the text slice of the
    logits. ``image``: new-modality targets over the full vocabulary.
    ``all``: every target over the full vocabulary. Eval mode (no noise).
    """
    if which not in ("text", "image", "all"):
        raise ValueError(f"unknown position filter {which!r}")
    if len(sequences) == 0:
        raise ValueError("empty evaluation set")
    Vt = model.config.vocab_text
    out = []
    for b in pack_batches(sequences, batch_size, model.config.max_seq_len, model.vocab_size, seed=None):
        logits = decoder_forward(model, b.inputs, valid=b.valid, adapter_mode=adapter_mode).data
        keep = ~b.ignore_mask
        if which == "text":
            keep &= b.targets < Vt
            logits = logits[..., :Vt]
        elif which == "image":
            keep &= b.targets >= Vt
        if not keep.any():
            continue
        logp = ag.log_softmax_np(logits[keep])
        out.append(-logp[np.arange(logp.shape[0]), b.targets[keep]])
    if not out:
        raise ValueError(f"no {which} positions in the evaluation set")
    return np.concatenate(out)


def perplexity(model: Decoder, sequences, which: str = "all", batch_size: int = 32,
               adapter_mode: str | None = None) -> float:
    return float(np.exp(token_nll(model, sequences, which, batch_size, adapter_mode).mean()))


def smoothed(losses, window: int = 10) -> np.ndarray:
    """Trailing mean over up to ``window`` steps."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_threshold(losses, threshold: float, window: int = 10) -> int | None:
    """First step (1-based) whose trailing-mean loss is at or below ``threshold``."""
    hits = np.flatnonzero(smoothed(losses, window) <= threshold)
    return int(hits[0]) + 1 if hits.size else None


# -- comparison matrix -------------------------------------------------------------

@dataclass
class MatrixCell:
    mode: str
    init: str
    seed: int
    ppl_text_before: float
    ppl_text_after: float
    ppl_image: float
    curve: list
    steps_to_threshold: int | None = None
    trace_before: RoutingTrace | None = None
    trace_after: RoutingTrace | None = None

    @property
    def dppl_text(self) -> float:
        return self.ppl_text_after - self.ppl_text_before

    @property
    def dppl_text_rel(self) -> float:
        return self.dppl_text / self.ppl_text_before


def prepare_cell(base: Decoder, cfg: RunConfig, init: str, seed: int, mode: str,
                 geometry=None, init_cache: dict | None = None) -> Decoder:
    """Expand, initialize, attach adapters and select the trainable set for one run."""
    from .plora import attach_adapters
    from .vocab_gw import VocabLayout, expand_vocabulary, init_new_rows

    m = base.copy()
    layout = VocabLayout(m.config.vocab_text, cfg.vocab.vocab_image, cfg.vocab.n_special, m.config.d_model)
    expand_vocabulary(m, layout)
    key = (init, None if init in ("mean", "gw") else seed)
    names = ["embed"] if m.config.tie_head else ["embed", "head"]
    Vt = m.config.vocab_text
    if init_cache is not None and key in init_cache:
        for n in names:
            m.params[n].data[Vt:] = init_cache[key][n]
    else:
        init_new_rows(m, init, geometry, seed=seed if init == "random" else 0,
                      gw_options=gw_options(cfg))
        if init_cache is not None:
            init_cache[key] = {n: m.params[n].data[Vt:].copy() for n in names}
    attach_adapters(m, cfg.plora.targets, cfg.plora.rank, cfg.plora.alpha, seed=seed,
                    mode="lora" if mode == "lora" else "plora")
    apply_trainable_set(m, mode)
    return m


def gw_options(cfg: RunConfig) -> dict:
    g = cfg.gw
    return {"metric": g.metric, "epsilon": g.epsilon, "epsilon_scale": g.epsilon_scale,
            "max_outer": g.max_outer, "max_sinkhorn": g.max_sinkhorn, "tol": g.tol,
            "anchors": g.anchors}


def run_comparison_matrix(base: Decoder, train_seqs, eval_text, eval_image, cfg: RunConfig, *,
                          modes=("plora", "lora"), inits=("random", "mean", "gw"),
                          seeds=(0, 1, 2), geometry=None, max_steps: int | None = None,
                          epochs: int = 1, probe=None, threshold: float | None = None,
                          out_dir: str | Path | None = None,
                          log: Callable[[str], None] | None = None) -> tuple[list[MatrixCell], float]:
    """Train every (mode, init, seed) cell from the same base model and data order.

    Returns the cells and the loss threshold used for steps-to-threshold.
    With no ``threshold`` given it is the loosest level every cell reaches:
    the maximum over cells of the minimum smoothed training loss.
    """
    if len(seeds) < 2:
        raise ValueError("the comparison matrix needs at least 2 seeds")
    ppl_before = perplexity(base, eval_text, "text")
    cells: list[MatrixCell] = []
    cache: dict = {}
    for seed in seeds:
        for init in inits:
            for mode in modes:
                m = prepare_cell(base, cfg, init, seed, mode, geometry, cache)
                before = collect_trace(m, probe) if probe is not None else None
                res = train(m, train_seqs, cfg.train, epochs=epochs, max_steps=max_steps, seed=seed)
                cell = MatrixCell(mode, init, seed, ppl_before, perplexity(m, eval_text, "text"),
                                  perplexity(m, eval_image, "image"), res.curve,
                                  trace_before=before,
                                  trace_after=collect_trace(m, probe) if probe is not None else None)
                cells.append(cell)
                if log:
                    log(f"cell mode={mode} init={init} seed={seed}: dppl_text={cell.dppl_text:+.4f} "
                        f"({100 * cell.dppl_text_rel:+.2f}%) ppl_image={cell.ppl_image:.3f}")
    if threshold is None:
        threshold = max(float(smoothed([c[1] for c in cell.curve]).min()) for cell in cells)
    for cell in cells:
        cell.steps_to_threshold = steps_to_threshold([c[1] for c in cell.curve], threshold)
    if out_dir is not None:
        write_matrix(cells, out_dir)
    return cells, threshold


def write_matrix(cells: list[MatrixCell], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "init", "seed", "dppl_text", "ppl_image", "steps_to_threshold"])
        for c in cells:
            w.writerow([c.mode, c.init, c.seed, repr(c.dppl_text), repr(c.ppl_image),
                        "" if c.steps_to_threshold is None else c.steps_to_threshold])
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for c in cells:
        write_curve_csv(curves / f"{c.mode}_{c.init}_seed{c.seed}.csv", c.curve)
