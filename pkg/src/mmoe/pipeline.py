"""End-to-end run: pretrain, convert, expand, initialize, two-stage training, evaluation, analysis.

Output layout under the run directory::

    ckpt/     dense, MoE, initialized and per-epoch checkpoints
    traces/   routing traces (before training and after every epoch)
    reports/  equivalence, ECA, histograms, exclusivity, redundancy, summary.json
    curves/   per-step loss curves as CSV
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import analytics as an
from .checkpoint import save_checkpoint
from .config import ConfigError, RunConfig
from .data import Corpus, CorpusSpec, SyntheticSource, generate_corpus, generate_text_corpus
from .model import Decoder
from .moe import convert_to_moe, dense_equivalence_check, partition_ffn
from .train import NumericError, apply_trainable_set, perplexity, prepare_cell, train, write_curve_csv
from .vocab_gw import image_side_geometry

EQUIVALENCE_TOL = 1e-6


class StageError(RuntimeError):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunDirs:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        for sub in ("ckpt", "traces", "reports", "curves"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    @property
    def ckpt(self) -> Path:
        return self.root / "ckpt"

    @property
    def traces(self) -> Path:
        return self.root / "traces"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def curves(self) -> Path:
        return self.root / "curves"


@dataclass
class Corpora:
    source: SyntheticSource
    pretrain: list[np.ndarray]
    low: Corpus
    high: Corpus
    eval_text: list[np.ndarray]
    eval_low: list[np.ndarray]
    eval_high: list[np.ndarray]
    probe: list[np.ndarray]


def corpus_spec(cfg: RunConfig, image_len: int, n_samples: int, seed: int) -> CorpusSpec:
    d = cfg.data
    return CorpusSpec(vocab_text=cfg.model.vocab_text, vocab_image=cfg.vocab.vocab_image,
                      n_classes=d.n_classes, text_len=d.text_len, image_len=image_len,
                      n_samples=n_samples, seed=seed, table_seed=d.table_seed,
                      text_branching=d.text_branching, text_skip_weight=d.text_skip_weight,
                      image_branching=d.image_branching, image_class_weight=d.image_class_weight,
                      image_text_overlap=d.image_text_overlap)


def build_corpora(cfg: RunConfig) -> Corpora:
    """All data of a run, every split from its own seed offset of ``cfg.seed``."""
    if cfg.vocab.n_special != 2:
        raise ConfigError("the synthetic corpus uses exactly two boundary tokens (n_special = 2)")
    d, base = cfg.data, 1000 * cfg.seed
    low = corpus_spec(cfg, d.low_image_len, d.low_samples, base + 1)
    high = corpus_spec(cfg, d.high_image_len, d.high_samples, base + 2)
    src = SyntheticSource(low)

    def held_out(spec: CorpusSpec, n: int, seed: int) -> list[np.ndarray]:
        return generate_corpus(CorpusSpec(**{**spec.__dict__, "n_samples": n, "seed": seed}), src).sequences

    return Corpora(
        source=src,
        pretrain=generate_text_corpus(low, d.pretrain_samples, d.pretrain_len, base + 100, src),
        low=generate_corpus(low, src),
        high=generate_corpus(high, src),
        eval_text=generate_text_corpus(low, d.eval_text_samples, d.pretrain_len, base + 200, src),
        eval_low=held_out(low, d.eval_image_samples, base + 300),
        eval_high=held_out(high, d.eval_image_samples, base + 301),
        probe=held_out(low, d.probe_samples, base + 400),
    )


def pretrain_dense(cfg: RunConfig, sequences, log=None) -> tuple[Decoder, list]:
    """Text-only pretraining of a fresh dense decoder (stands in for the released LLM)."""
    model = Decoder.init(cfg.model, seed=cfg.seed)
    apply_trainable_set(model, "text")
    res = train(model, sequences, cfg.train, epochs=10 ** 6, max_steps=cfg.train.pretrain_steps,
                lr_max=cfg.train.pretrain_lr, seed=cfg.seed, loss_on="all", log=log)
    return model, res.curve


def convert_checked(dense: Decoder, cfg: RunConfig, n_inputs: int = 100) -> tuple[Decoder, list[float]]:
    """Convert to MoE and verify every layer's experts sum back to the dense FFN."""
    m = cfg.moe
    moe = convert_to_moe(dense, m.n_experts, m.top_k, seed=m.partition_seed,
                         renormalize_gates=m.renormalize_gates, noise_bias_init=m.noise_bias_init,
                         aux_load_balance_weight=m.aux_load_balance_weight)
    rng = np.random.default_rng(m.partition_seed)
    devs = []
    for i in range(dense.config.n_layers):
        x = rng.standard_normal((n_inputs, dense.config.d_model))
        experts = partition_ffn(dense.ffn(i), m.n_experts, m.partition_seed + i)
        devs.append(dense_equivalence_check(dense.ffn(i), experts, x))
    worst = max(devs)
    if not worst <= EQUIVALENCE_TOL:
        raise NumericError(f"dense/MoE equivalence deviation {worst:.3g} exceeds {EQUIVALENCE_TOL}")
    return moe, devs


def adapt_moe(moe: Decoder, cfg: RunConfig, sequences, log=None) -> list:
    """Short text-only training of the converted model so routers and experts settle."""
    if cfg.train.moe_adapt_steps <= 0:
        return []
    apply_trainable_set(moe, "text")
    res = train(moe, sequences, cfg.train, epochs=10 ** 6, max_steps=cfg.train.moe_adapt_steps,
                lr_max=cfg.train.moe_adapt_lr, seed=cfg.seed + 1, loss_on="all", log=log)
    return res.curve


def geometry_for(cfg: RunConfig, corpora: Corpora):
    g = cfg.gw
    T = cfg.vocab.vocab_image + cfg.vocab.n_special
    return image_side_geometry(T, g.geometry, sequences=corpora.low.sequences,
                               vocab_text=cfg.model.vocab_text, seed=cfg.seed, dim=g.geometry_dim,
                               window=g.window, codebook_path=g.codebook_path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def analyze_traces(before: an.RoutingTrace, after: an.RoutingTrace, out: Path) -> dict:
    """ECA, histograms, exclusivity and redundancy outputs for one before/after pair."""
    out.mkdir(parents=True, exist_ok=True)
    an.write_eca_csv(before, out / "eca_before.csv")
    an.write_eca_csv(after, out / "eca_after.csv")
    an.write_histogram_csv(after, out / "histograms.csv")
    for layer in sorted({0, after.n_layers - 1}):
        an.histogram_svg(out / f"histogram_layer{layer}.svg", after, layer)
    rows = an.redundancy_delta_report(before, after, out)
    top = an.redundancy_delta_report(before, after, statistic=an.top_partner_redundancy)
    excl_before, excl_after = an.layer_exclusivity(before), an.layer_exclusivity(after)
    with open(out / "exclusivity.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "before", "after"])
        for l, (b, a) in enumerate(zip(excl_before, excl_after)):
            w.writerow([l, repr(b), repr(a)])
    q = an.first_quartile_layers(after.n_layers)
    return {
        "eca_mean_before": [r.before for r in rows],
        "eca_mean_after": [r.after for r in rows],
        "top_partner_before": [r.before for r in top],
        "top_partner_after": [r.after for r in top],
        "top_partner_first_quartile_delta": float(np.mean([top[l].delta for l in q])),
        "exclusivity_before": excl_before,
        "exclusivity_after": excl_after,
    }


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: RunConfig, out_dir: str | Path, *, stage: str = "both",
                 log: Callable[[str], None] | None = None) -> dict:
    """Run every stage and return the summary written to ``reports/summary.json``."""
    if stage not in ("both", "low-only"):
        raise ConfigError(f"stage must be 'both' or 'low-only', got {stage!r}")
    cfg.validate()
    dirs = RunDirs(out_dir)
    say = log or (lambda s: None)
    (dirs.root / "config.json").write_text(cfg.dumps())
    summary: dict = {"seed": cfg.seed, "stage": stage}

    say("data")
    corpora = _stage("data", build_corpora, cfg)

    say("pretrain")
    dense, curve = _stage("pretrain", pretrain_dense, cfg, corpora.pretrain, log)
    write_curve_csv(dirs.curves / "pretrain.csv", curve)
    save_checkpoint(dense, dirs.ckpt / "dense.mmoe")
    summary["ppl_text_dense"] = perplexity(dense, corpora.eval_text, "text")

    say("convert")
    moe, devs = _stage("convert", convert_checked, dense, cfg)
    save_checkpoint(moe, dirs.ckpt / "moe.mmoe")
    _write_json(dirs.reports / "equivalence.json", {"max_abs_deviation_per_layer": devs})
    summary["equivalence_max_deviation"] = max(devs)
    summary["ppl_text_moe_converted"] = perplexity(moe, corpora.eval_text, "text")

    say("moe-adapt")
    curve = _stage("moe-adapt", adapt_moe, moe, cfg, corpora.pretrain, log)
    write_curve_csv(dirs.curves / "moe_adapt.csv", curve)
    save_checkpoint(moe, dirs.ckpt / "moe_adapted.mmoe")
    ppl_base = perplexity(moe, corpora.eval_text, "text")
    summary["ppl_text_base"] = ppl_base

    say("init")
    scheme = cfg.vocab.init_scheme
    geometry = _stage("init", geometry_for, cfg, corpora) if scheme == "gw" else None
    model = _stage("init", prepare_cell, moe, cfg, scheme, cfg.seed, cfg.train.mode, geometry)
    save_checkpoint(model, dirs.ckpt / "init.mmoe")
    before = an.collect_trace(model, corpora.probe, meta={"model_id": "init", "dataset_id": "probe"})
    an.save_trace(before, dirs.traces / "before.rtrc")

    stages = [("low", corpora.low)] + ([("high", corpora.high)] if stage == "both" else [])
    after = before
    for name, corpus in stages:
        say(f"train-{name}")
        res = _stage(f"train-{name}", train, model, corpus.sequences, cfg.train,
                     epochs=cfg.data.epochs_per_stage, max_steps=cfg.train.max_steps_per_stage,
                     seed=cfg.seed, checkpoint_dir=dirs.ckpt, checkpoint_tag=f"{name}_",
                     probe=corpora.probe, log=log)
        write_curve_csv(dirs.curves / f"{name}.csv", res.curve)
        for tr in res.traces:
            tr.meta.update({"model_id": name, "dataset_id": "probe"})
            an.save_trace(tr, dirs.traces / f"{name}_epoch{tr.meta['epoch']}.rtrc")
        after = res.traces[-1] if res.traces else after
        save_checkpoint(model, dirs.ckpt / f"{name}.mmoe")
        summary[f"{name}_steps"] = res.steps
        summary[f"{name}_final_loss"] = float(res.losses[-1]) if res.steps else None

    say("eval")
    ppl_after = _stage("eval", perplexity, model, corpora.eval_text, "text")
    summary["ppl_text_after"] = ppl_after
    summary["dppl_text_rel"] = ppl_after / ppl_base - 1.0
    summary["ppl_image_low"] = perplexity(model, corpora.eval_low, "image")
    if stage == "both":
        summary["ppl_image_high"] = perplexity(model, corpora.eval_high, "image")

    say("analyze")
    summary["routing"] = _stage("analyze", analyze_traces, before, after, dirs.reports)
    _write_json(dirs.reports / "summary.json", summary)
    return summary
