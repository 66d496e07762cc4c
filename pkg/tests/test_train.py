import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmoe.config import RunConfig, TrainConfig, preset
from mmoe.data import CorpusSpec, generate_corpus, generate_text_corpus
from mmoe.model import Decoder
from mmoe.moe import convert_to_moe
from mmoe.train import (AdamW, InvariantError, NumericError, apply_trainable_set, check_frozen,
                        frozen_digest, lr_at, perplexity, prepare_cell, run_comparison_matrix,
                        smoothed, steps_to_threshold, token_nll, train, trainable_names,
                        write_curve_csv, write_matrix)
from mmoe.vocab_gw import VocabLayout, expand_vocabulary, init_new_rows
from mmoe.plora import attach_adapters

from conftest import randomize, tiny_config


def _closed_form(step, total, lr_max, lr_min, warmup):
    if step < warmup:
        return lr_max * step / warmup
    if total <= warmup:
        return lr_max
    prog = min((step - warmup) / (total - warmup), 1.0)
    return lr_min + (lr_max - lr_min) * (1 + math.cos(math.pi * prog)) / 2


def test_schedule_full_scale_values():
    assert lr_at(0, 10_000, 2e-4, 2e-5, 1000) == 0.0
    assert lr_at(1000, 10_000, 2e-4, 2e-5, 1000) == pytest.approx(2e-4, abs=1e-12)
    assert lr_at(10_000, 10_000, 2e-4, 2e-5, 1000) == pytest.approx(2e-5, abs=1e-12)


@given(st.integers(1, 500), st.integers(0, 100), st.floats(1e-5, 1e-2), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_schedule_matches_closed_form(total, warmup, lr_max, frac):
    lr_min = lr_max * frac
    for step in range(0, total + 1, max(1, total // 20)):
        assert abs(lr_at(step, total, lr_max, lr_min, warmup)
                   - _closed_form(step, total, lr_max, lr_min, warmup)) <= 1e-12


def test_schedule_rejects_negative_step():
    with pytest.raises(ValueError):
        lr_at(-1, 10, 1.0, 0.1, 2)


# -- model preparation ------------------------------------------------------------

def _adapted(seed=0, mode="plora"):
    dense = Decoder.init(tiny_config(), seed=seed)
    moe = randomize(convert_to_moe(dense, 4, 2, seed=0), seed + 1)
    expand_vocabulary(moe, VocabLayout(20, 4, 2, 16))
    init_new_rows(moe, "random", seed=seed)
    attach_adapters(moe, rank=2, alpha=4.0, seed=seed, mode="lora" if mode == "lora" else "plora")
    apply_trainable_set(moe, mode)
    return moe


def _mm_sequences(n=24, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        text = rng.integers(0, 20, size=4)
        img = rng.integers(20, 24, size=5)
        out.append(np.concatenate([text, [24], img, [25]]))
    return out


def test_trainable_set_enumeration():
    m = _adapted()
    names = set(trainable_names(m, "plora"))
    for n in m.params:
        expect = (n in ("embed", "head") or ".plora." in n or ".moe.router" in n
                  or ".moe.noise." in n or ".moe.expert." in n)
        assert (n in names) == expect, n
    frozen = set(trainable_names(m, "frozen-adapter-only"))
    assert not any(".moe." in n for n in frozen)


def test_text_mode_rejects_expanded_model():
    with pytest.raises(ValueError):
        trainable_names(_adapted(), "text")
    with pytest.raises(ValueError):
        trainable_names(Decoder.init(tiny_config(), seed=0), "plora")


def test_zero_steps_leave_model_unchanged():
    m = _adapted()
    before = {k: v.data.copy() for k, v in m.params.items()}
    res = train(m, _mm_sequences(), TrainConfig(batch_size=4), epochs=1, max_steps=0)
    assert res.steps == 0
    for k, v in m.params.items():
        assert np.array_equal(v.data, before[k])


@pytest.mark.parametrize("mode", ["plora", "lora"])
def test_frozen_tensors_and_old_rows_conserved(mode):
    m = _adapted(mode=mode)
    digest = frozen_digest(m)
    old = {n: m.params[n].data.copy() for n in ("embed", "head")}
    train(m, _mm_sequences(), TrainConfig(batch_size=4, warmup_steps=5), epochs=20, max_steps=100,
          loss_on="all")
    check_frozen(m, digest)
    for n in ("embed", "head"):
        assert np.array_equal(m.params[n].data[:20], old[n][:20])
        assert not np.array_equal(m.params[n].data[20:], old[n][20:])


def test_check_frozen_detects_change():
    m = _adapted()
    digest = frozen_digest(m)
    m.params["layer.0.query.weight"].data[0, 0] += 1e-12
    with pytest.raises(InvariantError, match="layer.0.query.weight"):
        check_frozen(m, digest)


def test_masked_adamw_updates_only_masked_rows():
    from mmoe.autograd import Tensor
    t = Tensor(np.ones((4, 2)), requires_grad=True)
    t.row_mask = np.array([False, False, True, True])
    t.grad = np.ones((4, 2))
    AdamW(weight_decay=0.0).step({"embed": t}, 0.1)
    assert np.all(t.data[:2] == 1.0) and np.all(t.data[2:] < 1.0)


def test_training_is_deterministic():
    curves = []
    for _ in range(2):
        m = _adapted(seed=3)
        curves.append(train(m, _mm_sequences(), TrainConfig(batch_size=4), epochs=2, seed=5).curve)
    assert curves[0] == curves[1]


def test_non_finite_loss_aborts_with_dump(tmp_path):
    m = _adapted()
    m.params["head"].data[20:] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        train(m, _mm_sequences(), TrainConfig(batch_size=4), epochs=1, checkpoint_dir=tmp_path)
    assert (tmp_path / "nonfinite_step0.npz").exists()


def test_checkpoints_and_traces_per_epoch(tmp_path):
    m = _adapted()
    probe = _mm_sequences(4, seed=9)
    res = train(m, _mm_sequences(), TrainConfig(batch_size=8), epochs=2, checkpoint_dir=tmp_path,
                checkpoint_tag="low_", probe=probe)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["low_epoch1.mmoe", "low_epoch2.mmoe"]
    assert len(res.traces) == 2 and res.traces[1].meta["epoch"] == 2


def test_grad_accumulation_counts_optimizer_steps():
    m = _adapted()
    res = train(m, _mm_sequences(), TrainConfig(batch_size=4, grad_accum=2), epochs=1)
    assert res.steps == 3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_overfit_small_set_at_desk_size(seed):
    cfg = preset("desk")
    model = Decoder.init(cfg.model, seed=seed)
    apply_trainable_set(model, "text")
    seqs = [s[:16] for s in generate_corpus(CorpusSpec(n_samples=8, seed=seed)).sequences]
    ppl = []
    res = train(model, seqs, TrainConfig(batch_size=8, lr_max=1e-3, warmup_steps=20,
                                             weight_decay=0.0),
                epochs=1000, max_steps=2000, seed=seed, loss_on="all", stop_below=0.05,
                on_epoch=lambda e, m: ppl.append(perplexity(m, seqs, "all")))
    assert res.losses[-1] < 0.05 and res.steps <= 2000
    assert np.all(np.diff(ppl) < 0), "train-split perplexity must fall every epoch"


# -- evaluation -------------------------------------------------------------------

def test_uniform_logits_give_vocab_perplexity():
    m = Decoder.init(tiny_config(), seed=0)
    m.params["head"].data[:] = 0.0
    seqs = [np.array([1, 2, 3, 4]), np.array([5, 6, 7])]
    assert perplexity(m, seqs, "all") == pytest.approx(20.0, rel=1e-12)


def test_text_perplexity_unchanged_by_expansion():
    m = Decoder.init(tiny_config(), seed=0)
    seqs = [np.random.default_rng(i).integers(0, 20, size=9) for i in range(4)]
    before = perplexity(m, seqs, "text")
    expand_vocabulary(m, VocabLayout(20, 4, 2, 16))
    init_new_rows(m, "random", seed=0)
    assert abs(perplexity(m, seqs, "text") / before - 1) < 1e-3


def test_empty_filter_rejected():
    m = _adapted()
    with pytest.raises(ValueError, match="no image"):
        token_nll(m, [np.array([1, 2, 3])], "image")
    with pytest.raises(ValueError):
        token_nll(m, [], "all")
    with pytest.raises(ValueError):
        token_nll(m, [np.array([1, 2])], "pixels")


def test_evaluation_is_deterministic():
    m = _adapted()
    seqs = _mm_sequences(5)
    assert perplexity(m, seqs, "image") == perplexity(m, seqs, "image")


def test_smoothing_and_threshold():
    loss = [5, 4, 3, 2, 1]
    np.testing.assert_allclose(smoothed(loss, 2), [5, 4.5, 3.5, 2.5, 1.5])
    assert steps_to_threshold(loss, 3.5, window=2) == 3
    assert steps_to_threshold(loss, 0.1, window=2) is None


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [(1, 2.5, 0.001)])
    assert (tmp_path / "c.csv").read_text().splitlines() == ["step,loss,lr", "1,2.5,0.001"]


# -- comparison matrix -------------------------------------------------------------

def _matrix_setup():
    cfg = RunConfig()
    cfg.model = tiny_config(vocab_text=24, max_seq_len=40)
    cfg.moe.n_experts, cfg.moe.top_k = 4, 2
    cfg.vocab.vocab_image = 8
    cfg.plora.rank, cfg.plora.alpha = 2, 4.0
    cfg.train.batch_size = 8
    cfg.train.warmup_steps = 5
    cfg.validate()
    spec = CorpusSpec(vocab_text=24, vocab_image=8, n_classes=2, text_len=4, image_len=6,
                      n_samples=32, seed=0, table_seed=1)
    base = randomize(convert_to_moe(Decoder.init(cfg.model, seed=0), 4, 2), 0)
    train_seqs = generate_corpus(spec).sequences
    ev_text = generate_text_corpus(spec, 8, 12, seed=5)
    ev_img = generate_corpus(CorpusSpec(**{**spec.__dict__, "seed": 9, "n_samples": 8})).sequences
    return cfg, base, train_seqs, ev_text, ev_img


def test_frozen_moe_plora_keeps_text_perplexity():
    cfg, base, seqs, ev_text, _ = _matrix_setup()
    before = perplexity(base, ev_text, "text")
    m = prepare_cell(base, cfg, "random", 0, "frozen-adapter-only")
    train(m, seqs, cfg.train, epochs=2)
    assert abs(perplexity(m, ev_text, "text") - before) <= 1e-9


def test_matrix_cells_and_csv(tmp_path):
    cfg, base, seqs, ev_text, ev_img = _matrix_setup()
    cells, thr = run_comparison_matrix(base, seqs, ev_text, ev_img, cfg, inits=("random", "mean"),
                                       seeds=(0, 1), max_steps=4, out_dir=tmp_path)
    assert len(cells) == 2 * 2 * 2
    assert all(c.steps_to_threshold is not None for c in cells)
    lines = (tmp_path / "matrix.csv").read_text().splitlines()
    assert lines[0] == "mode,init,seed,dppl_text,ppl_image,steps_to_threshold" and len(lines) == 9
    assert len(list((tmp_path / "curves").iterdir())) == 8
    assert np.isfinite(thr)
    with pytest.raises(ValueError):
        run_comparison_matrix(base, seqs, ev_text, ev_img, cfg, seeds=(0,))


def test_write_matrix_blank_threshold(tmp_path):
    cfg, base, seqs, ev_text, ev_img = _matrix_setup()
    cells, _ = run_comparison_matrix(base, seqs, ev_text, ev_img, cfg, modes=("plora",),
                                     inits=("mean",), seeds=(0, 1), max_steps=2, threshold=-1.0)
    write_matrix(cells, tmp_path)
    assert all(line.endswith(",") for line in (tmp_path / "matrix.csv").read_text().splitlines()[1:])
