"""Command-line interface; ``mmoe <command> --help`` lists the options of each command.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analytics as an
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load, preset
from .data import Corpus, load_corpus, save_corpus
from .model import decoder_forward, generate
from .moe import PartitionError
from .pipeline import (StageError, adapt_moe, analyze_traces, build_corpora, convert_checked,
                       pretrain_dense, run_pipeline)
from .plora import attach_adapters
from .train import (InvariantError, NumericError, apply_trainable_set, gw_options, perplexity,
                    train, write_curve_csv)
from .vocab_gw import (GeometryError, SinkhornError, VocabLayout, expand_vocabulary,
                       image_side_geometry, init_new_rows, save_coupling)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

SPLITS = ("pretrain", "low", "high", "eval_text", "eval_low", "eval_high", "probe")


def _config(args) -> RunConfig:
    cfg = load(args.config) if getattr(args, "config", None) else preset(getattr(args, "preset", "desk"))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _sequences(path) -> list[np.ndarray]:
    return load_corpus(path).sequences


def _data_dir(args, cfg: RunConfig):
    """Sequences per split, from ``--data`` files when given, else generated from the config."""
    if getattr(args, "data", None):
        return {s: _sequences(Path(args.data) / f"{s}.txt") for s in SPLITS
                if (Path(args.data) / f"{s}.txt").exists()}
    c = build_corpora(cfg)
    return {"pretrain": c.pretrain, "low": c.low.sequences, "high": c.high.sequences,
            "eval_text": c.eval_text, "eval_low": c.eval_low, "eval_high": c.eval_high,
            "probe": c.probe}


# -- commands -----------------------------------------------------------------------

def cmd_make_data(args) -> int:
    cfg = _config(args)
    c = build_corpora(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = c.low.spec
    for name, seqs in (("pretrain", c.pretrain), ("eval_text", c.eval_text), ("eval_low", c.eval_low),
                       ("eval_high", c.eval_high), ("probe", c.probe)):
        labels = c.source.class_of_token[np.array([s[0] for s in seqs], dtype=np.int64)]
        save_corpus(Corpus(spec, seqs, labels), out / f"{name}.txt")
    save_corpus(c.low, out / "low.txt")
    save_corpus(c.high, out / "high.txt")
    _emit({s: len(_sequences(out / f"{s}.txt")) for s in SPLITS})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.train.pretrain_steps = args.steps
    data = _data_dir(args, cfg)
    model, curve = pretrain_dense(cfg, data["pretrain"], log=_say)
    save_checkpoint(model, args.out)
    if args.curve:
        write_curve_csv(args.curve, curve)
    report = {"steps": len(curve)}
    if "eval_text" in data:
        report["ppl_text"] = perplexity(model, data["eval_text"], "text")
    _emit(report)
    return EXIT_OK


def cmd_convert(args) -> int:
    cfg = _config(args)
    if args.experts < 2:
        raise ConfigError(f"N={args.experts} is not a mixture of experts (need N >= 2)")
    cfg.moe.n_experts = args.experts
    cfg.moe.top_k = args.top_k if args.top_k is not None else min(cfg.moe.top_k, args.experts)
    cfg.moe.partition_seed = args.seed
    dense = load_checkpoint(args.ckpt)
    if dense.is_moe:
        raise ConfigError(f"{args.ckpt} is already an MoE checkpoint")
    cfg.moe.validate(dense.config)
    moe, devs = convert_checked(dense, cfg)
    ids = np.random.default_rng(args.seed).integers(0, dense.vocab_size, size=(2, 16))
    logit_dev = float(np.max(np.abs(decoder_forward(moe, ids, diagnostic_all_experts=True).data
                                    - decoder_forward(dense, ids).data)))
    if not logit_dev <= 1e-6:
        raise NumericError(f"all-expert forward deviates from dense by {logit_dev:.3g}")
    if args.adapt_steps:
        cfg.train.moe_adapt_steps = args.adapt_steps
        adapt_moe(moe, cfg, _data_dir(args, cfg)["pretrain"], log=_say)
    save_checkpoint(moe, args.out)
    _emit({"n_experts": cfg.moe.n_experts, "top_k": cfg.moe.top_k,
           "ffn_max_abs_deviation_per_layer": devs, "all_expert_logit_max_abs_deviation": logit_dev})
    return EXIT_OK


def cmd_expand_vocab(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.ckpt)
    vi = args.vocab_image if args.vocab_image is not None else cfg.vocab.vocab_image
    ns = args.n_special if args.n_special is not None else cfg.vocab.n_special
    layout = VocabLayout(model.config.vocab_text, vi, ns, model.config.d_model)
    expand_vocabulary(model, layout)
    save_checkpoint(model, args.out)
    _emit({"vocab_text": layout.vocab_text, "new_tokens": layout.T, "vocab_total": layout.total,
           "added_per_matrix": layout.added_per_matrix,
           "matrices": 1 if model.config.tie_head else 2})
    return EXIT_OK


def cmd_init_embeds(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.ckpt)
    geometry = None
    if args.scheme == "gw":
        g = cfg.gw
        seqs = None
        if g.geometry == "cooccurrence":
            seqs = _sequences(args.corpus) if args.corpus else build_corpora(cfg).low.sequences
        geometry = image_side_geometry(model.vocab_new, g.geometry, sequences=seqs,
                                       vocab_text=model.config.vocab_text, seed=cfg.seed,
                                       dim=g.geometry_dim, window=g.window,
                                       codebook_path=args.codebook or g.codebook_path)
    report = init_new_rows(model, args.scheme, geometry, seed=cfg.seed, gw_options=gw_options(cfg))
    save_checkpoint(model, args.out)
    out = {"scheme": args.scheme}
    for name, res in report.results.items():
        out[name] = {"objective": res.objective, "converged": res.converged,
                     "outer_iterations": res.n_outer,
                     "marginal_violation": res.coupling.marginal_error()}
        if args.coupling_out:
            save_coupling(f"{args.coupling_out}.{name}.txt", res.coupling.gamma)
    _emit(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.ckpt)
    if not model.has_adapters():
        p = cfg.plora
        attach_adapters(model, p.targets, p.rank, p.alpha, seed=cfg.seed,
                        mode="lora" if args.mode == "lora" else "plora")
    apply_trainable_set(model, args.mode)
    data = _data_dir(args, cfg)
    seqs = _sequences(args.corpus) if args.corpus else data[args.stage]
    probe = data.get("probe")
    res = train(model, seqs, cfg.train, epochs=args.epochs or cfg.data.epochs_per_stage,
                max_steps=args.max_steps if args.max_steps is not None else cfg.train.max_steps_per_stage,
                seed=cfg.seed, checkpoint_dir=args.ckpt_dir, checkpoint_tag=f"{args.stage}_",
                probe=probe if args.traces else None, log=_say)
    save_checkpoint(model, args.out)
    if args.curve:
        write_curve_csv(args.curve, res.curve)
    if args.traces:
        Path(args.traces).mkdir(parents=True, exist_ok=True)
        for tr in res.traces:
            an.save_trace(tr, Path(args.traces) / f"{args.stage}_epoch{tr.meta['epoch']}.rtrc")
    _emit({"steps": res.steps, "final_loss": float(res.losses[-1]) if res.steps else None})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.ckpt)
    data = _data_dir(args, cfg)
    out = {"ppl_text": perplexity(model, data["eval_text"], "text")}
    if model.vocab_new:
        for split in ("eval_low", "eval_high"):
            if split in data:
                out[f"ppl_image_{split[5:]}"] = perplexity(model, data[split], "image")
    _emit(out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.before_trace and args.after_trace:
        before, after = an.load_trace(args.before_trace), an.load_trace(args.after_trace)
    else:
        if not (args.before and args.after and args.probe):
            raise ConfigError("analyze needs --before/--after checkpoints with --probe, "
                              "or --before-trace/--after-trace")
        a, b = load_checkpoint(args.before), load_checkpoint(args.after)
        if not (a.is_moe and b.is_moe):
            raise ConfigError("analyze needs MoE checkpoints")
        if (a.moe.n_experts, a.moe.top_k) != (b.moe.n_experts, b.moe.top_k):
            raise ConfigError(f"incompatible checkpoints: N/K {(a.moe.n_experts, a.moe.top_k)} vs "
                              f"{(b.moe.n_experts, b.moe.top_k)}")
        probe = _sequences(args.probe)
        before = an.collect_trace(a, probe, meta={"model_id": str(args.before), "dataset_id": str(args.probe)})
        after = an.collect_trace(b, probe, meta={"model_id": str(args.after), "dataset_id": str(args.probe)})
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        an.save_trace(before, out / "before.rtrc")
        an.save_trace(after, out / "after.rtrc")
    if (before.n_experts, before.top_k) != (after.n_experts, after.top_k):
        raise ConfigError(f"incompatible traces: N/K {(before.n_experts, before.top_k)} vs "
                          f"{(after.n_experts, after.top_k)}")
    _emit(analyze_traces(before, after, Path(args.out)))
    return EXIT_OK


def cmd_generate(args) -> int:
    model = load_checkpoint(args.ckpt)
    prompt = [int(t) for t in args.prompt.split()]
    allowed = None
    if args.image_only:
        if not model.vocab_new:
            raise ConfigError("--image-only needs an expanded checkpoint")
        allowed = (model.config.vocab_text, model.vocab_size)
    out = generate(model, prompt, args.max_new, temperature=args.temperature, top_k=args.top_k,
                   seed=args.seed, stop_token=args.stop_token, allowed=allowed)
    print(" ".join(str(t) for t in out))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    summary = run_pipeline(cfg, args.out, stage=args.stage, log=_say)
    _emit(summary)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _add_config(p) -> None:
    p.add_argument("--config", help="JSON run configuration (overrides --preset)")
    p.add_argument("--preset", default="desk", choices=["desk", "paper-7b"])
    p.add_argument("--seed", type=int, default=None, help="override the run seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmoe", description="Dense-to-MoE multimodal extension toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write the synthetic corpora of a configuration")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("pretrain", help="pretrain a dense text decoder")
    _add_config(p)
    p.add_argument("--data", help="directory written by make-data")
    p.add_argument("--steps", type=int)
    p.add_argument("--curve")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("convert", help="split every FFN of a dense checkpoint into experts")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--experts", "-N", type=int, required=True)
    p.add_argument("--top-k", "-K", type=int)
    p.add_argument("--adapt-steps", type=int, default=0, help="text-only steps after converting")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert, seed=0)

    p = sub.add_parser("expand-vocab", help="append new-modality rows to embedding and head")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab-image", type=int)
    p.add_argument("--n-special", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_expand_vocab)

    p = sub.add_parser("init-embeds", help="initialize the new rows")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scheme", choices=["random", "mean", "gw"], required=True)
    p.add_argument("--corpus", help="corpus file for the co-occurrence geometry")
    p.add_argument("--codebook", help="codebook file for the codebook-file geometry")
    p.add_argument("--coupling-out", help="prefix for the GW coupling text files")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init_embeds)

    p = sub.add_parser("train", help="train an expanded MoE checkpoint on one stage")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["plora", "lora", "frozen-adapter-only"], default="plora")
    p.add_argument("--stage", choices=["low", "high"], default="low")
    p.add_argument("--data")
    p.add_argument("--corpus", help="train on this corpus file instead of the stage split")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--ckpt-dir", help="write per-epoch checkpoints here")
    p.add_argument("--traces", help="write per-epoch probe routing traces here")
    p.add_argument("--curve")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="text and image perplexity")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="routing analytics between two checkpoints or traces")
    p.add_argument("--before")
    p.add_argument("--after")
    p.add_argument("--probe", help="probe corpus file")
    p.add_argument("--before-trace")
    p.add_argument("--after-trace")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("generate", help="sample a continuation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True, help="space-separated token ids")
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-token", type=int)
    p.add_argument("--image-only", action="store_true", help="restrict sampling to new-modality ids")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _add_config(p)
    p.add_argument("--stage", choices=["both", "low-only"], default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pipeline)
    return ap


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code(exc.cause)
    if isinstance(exc, (NumericError, SinkhornError, InvariantError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, CheckpointError, an.TraceError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, PartitionError, GeometryError, ValueError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
