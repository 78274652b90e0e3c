"""Decoder: vocab round trips, prefix conditioning, generation, LoRA, warmup."""

import numpy as np
import pytest

import refimpl
from vtlm import tensor as T
from vtlm.decoder import (BOS, EOS, PAD, SEP, UNK, Decoder, DecoderConfig, LoraAdapter,
                          Vocab, attach_lora, lm_warmup, lora_param_names, merge_lora,
                          unmerge_lora, words_of)
from vtlm.errors import ConfigError, ContractError, ShapeError
from vtlm.nn import RunCtx
from vtlm.optim import AdamW, OptimConfig
from vtlm.tensor import Tensor

WORDS = ["answer", "hard", "hello", "metal", "rough", "smooth", "soft", "world"]


def make_vocab():
    return Vocab(WORDS)


def make_decoder(seed=11, max_len=64, layers=2, heads=4, d=32):
    vocab = make_vocab()
    cfg = DecoderConfig(d_llm=d, layers=layers, heads=heads,
                        vocab_size=len(vocab), max_len=max_len)
    return Decoder(cfg, vocab, np.random.default_rng(seed))


# -- vocab / tokenize -----------------------------------------------------------

def test_tokenize_empty_is_bos_eos():
    assert make_vocab().tokenize("") == [BOS, EOS]


def test_tokenize_round_trip_up_to_normalization():
    v = make_vocab()
    text = "Hello, WORLD! hard metal."
    ids = v.tokenize(text)
    assert ids[0] == BOS and ids[-1] == EOS
    assert v.detokenize(ids) == "hello world hard metal"


def test_tokenize_unknown_word_maps_to_unk():
    v = make_vocab()
    ids = v.tokenize("hello zyzzyva world")
    assert ids == [BOS, v.id_of("hello"), UNK, v.id_of("world"), EOS]


def test_words_of_treats_punctuation_as_space():
    assert words_of("Scratch-Edge, ok?") == ["scratch", "edge", "ok"]


def test_vocab_file_round_trip(tmp_path):
    v = make_vocab()
    path = tmp_path / "vocab.txt"
    v.save(path)
    lines = path.read_text().splitlines()
    assert lines == sorted(WORDS) if WORDS == sorted(WORDS) else lines
    loaded = Vocab.load(path)
    assert len(loaded) == len(v)
    for w in WORDS:
        assert loaded.id_of(w) == v.id_of(w)
    # line number = id after the specials block
    assert loaded.id_of(lines[0]) == 5


def test_vocab_rejects_special_collision():
    with pytest.raises(ConfigError):
        Vocab(["<pad>", "x"])


# -- forward --------------------------------------------------------------------

def test_forward_deterministic_with_zero_prefix():
    dec = make_decoder()
    prefix = Tensor(np.zeros((4, 32)))
    ids = dec.vocab.tokenize("hello world")
    a = dec.forward_with_prefix(prefix, ids).data
    b = dec.forward_with_prefix(prefix, ids).data
    assert a.tobytes() == b.tobytes()
    assert a.shape == (len(ids), len(dec.vocab))


def test_prefix_row_permutation_leaves_logits_unchanged():
    dec = make_decoder()
    prefix = np.random.default_rng(0).normal(size=(6, 32))
    ids = dec.vocab.tokenize("hard metal")
    base = dec.forward_with_prefix(Tensor(prefix), ids).data
    perm = np.random.default_rng(1).permutation(6)
    shuffled = dec.forward_with_prefix(Tensor(prefix[perm]), ids).data
    np.testing.assert_allclose(shuffled, base, atol=1e-10)


def test_forward_golden_vs_independent_reimpl():
    dec = make_decoder(seed=11)
    prefix = np.random.default_rng(8).normal(size=(6, 32)) * 0.1
    ids = [1, 5, 6, 3, 7, 2]
    out = dec.forward_with_prefix(Tensor(prefix), ids).data
    params = {k: v.data for k, v in dec.params().items()}
    np.testing.assert_allclose(out, refimpl.decoder_forward(prefix, ids, params, 2, 4),
                               atol=1e-12)


def test_forward_batch_matches_single():
    dec = make_decoder()
    rng = np.random.default_rng(2)
    prefix = rng.normal(size=(3, 4, 32))
    ids = rng.integers(5, len(dec.vocab), size=(3, 5))
    batched = dec.forward_batch(Tensor(prefix), ids).data
    for i in range(3):
        single = dec.forward_with_prefix(Tensor(prefix[i]), ids[i]).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_length_overflow_is_hard_error():
    dec = make_decoder(max_len=8)
    prefix = Tensor(np.zeros((4, 32)))
    with pytest.raises(ContractError, match="max_len"):
        dec.forward_with_prefix(prefix, list(range(5)))


def test_prefix_width_mismatch():
    dec = make_decoder()
    with pytest.raises(ShapeError):
        dec.forward_with_prefix(Tensor(np.zeros((4, 16))), [1, 2])


# -- generation -------------------------------------------------------------------

def test_generate_eos_first_yields_empty():
    dec = make_decoder()
    dec.head.b.data[:] = -5.0
    dec.head.b.data[EOS] = 50.0  # rig: EOS dominates every position
    out = dec.generate(None, dec.vocab.tokenize("hello")[:-1], max_new=8)
    assert out == ""


def test_generate_greedy_deterministic():
    dec = make_decoder()
    prompt = dec.vocab.tokenize("hello world")[:-1]
    a = dec.generate(None, prompt, max_new=6)
    b = dec.generate(None, prompt, max_new=6)
    assert a == b


def test_generate_respects_length_cap():
    dec = make_decoder(max_len=12)
    prefix = Tensor(np.random.default_rng(0).normal(size=(4, 32)))
    dec.head.b.data[:] = 0.0
    dec.head.b.data[dec.vocab.id_of("hard")] = 50.0  # never emits EOS
    prompt = [BOS, 5, 6]
    out = dec.generate(prefix, prompt, max_new=50)
    assert len(out.split()) == 12 - 4 - 3  # prefix + prompt + generated == cap


def test_generate_sampled_needs_rng_and_is_seeded():
    dec = make_decoder()
    prompt = dec.vocab.tokenize("hello")[:-1]
    with pytest.raises(ContractError):
        dec.generate(None, prompt, max_new=3, greedy=False)
    a = dec.generate(None, prompt, max_new=3, greedy=False, rng=np.random.default_rng(3))
    b = dec.generate(None, prompt, max_new=3, greedy=False, rng=np.random.default_rng(3))
    assert a == b


def test_generate_batch_matches_generate():
    dec = make_decoder()
    rng = np.random.default_rng(4)
    prefix = rng.normal(size=(2, 4, 32))
    prompts = [dec.vocab.tokenize("hello")[:-1], dec.vocab.tokenize("hard world")[:-1]]
    batch = dec.generate_batch(Tensor(prefix), prompts, max_new=4)
    for i, prompt in enumerate(prompts):
        assert batch[i] == dec.generate(Tensor(prefix[i]), prompt, max_new=4)


# -- LoRA --------------------------------------------------------------------------

def test_lora_zero_init_is_bitwise_noop():
    dec = make_decoder()
    ids = dec.vocab.tokenize("hello world hard")
    base = dec.forward_with_prefix(None, ids).data.copy()
    attach_lora(dec, targets=("q", "v"), r=4, alpha=8, rng=np.random.default_rng(5))
    with_adapters = dec.forward_with_prefix(None, ids).data
    assert base.tobytes() == with_adapters.tobytes()


def test_lora_scale_factor():
    adapter = LoraAdapter(8, 8, r=16, alpha=32, dropout_rate=0.1,
                          rng=np.random.default_rng(0))
    assert adapter.alpha / adapter.r == 2.0


def test_lora_hand_delta():
    adapter = LoraAdapter(2, 2, r=1, alpha=2, dropout_rate=0.0,
                          rng=np.random.default_rng(0))
    adapter.B.data = np.array([[1.0], [0.0]])
    adapter.A.data = np.array([[0.0, 1.0]])
    expected = (2 / 1) * (adapter.B.data @ adapter.A.data)  # matmul oracle
    np.testing.assert_array_equal(adapter.delta(), [[0.0, 2.0], [0.0, 0.0]])
    np.testing.assert_array_equal(adapter.delta(), expected)


def test_lora_duplicate_attach_rejected():
    dec = make_decoder()
    attach_lora(dec, targets=("q",), rng=np.random.default_rng(0))
    with pytest.raises(ConfigError, match="duplicate"):
        attach_lora(dec, targets=("q",), rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        attach_lora(dec, targets=("z",), rng=np.random.default_rng(0))


def _train_adapters_a_little(dec, adapters):
    rng = np.random.default_rng(6)
    for a in adapters.values():
        a.B.data = rng.normal(0, 0.05, size=a.B.shape)
        a.A.data = rng.normal(0, 0.05, size=a.A.shape)


def test_lora_merge_equivalence_and_bitwise_round_trip():
    dec = make_decoder()
    adapters = attach_lora(dec, targets=("q", "v"), r=3, alpha=6,
                           rng=np.random.default_rng(0))
    _train_adapters_a_little(dec, adapters)
    base_weights = {n: p.data.copy() for n, p in dec.params().items() if ".lora." not in n}

    rng = np.random.default_rng(7)
    inputs = [rng.integers(5, len(dec.vocab), size=rng.integers(2, 8)) for _ in range(100)]
    adapter_out = [dec.forward_with_prefix(None, ids).data.copy() for ids in inputs]

    merged = merge_lora(dec)
    assert len(merged) == 4  # 2 layers x {q, v}
    for ids, expected in zip(inputs, adapter_out):
        got = dec.forward_with_prefix(None, ids).data
        np.testing.assert_allclose(got, expected, atol=1e-6)

    unmerge_lora(dec)
    for n, p in dec.params().items():
        if ".lora." not in n:
            assert p.data.tobytes() == base_weights[n].tobytes(), n
    # adapter forward again matches the pre-merge captures
    np.testing.assert_allclose(
        dec.forward_with_prefix(None, inputs[0]).data, adapter_out[0], atol=1e-12)


def test_lora_merge_zero_b_is_bitwise_identity():
    dec = make_decoder()
    attach_lora(dec, targets=("q",), rng=np.random.default_rng(0))
    before = {n: p.data.copy() for n, p in dec.params().items() if ".lora." not in n}
    merge_lora(dec)
    for n, p in dec.params().items():
        if ".lora." not in n:
            assert p.data.tobytes() == before[n].tobytes()


def test_lora_dropout_applies_only_in_train_mode():
    dec = make_decoder()
    adapters = attach_lora(dec, targets=("q", "v"), r=3, alpha=6, dropout_rate=0.5,
                           rng=np.random.default_rng(0))
    _train_adapters_a_little(dec, adapters)
    ids = dec.vocab.tokenize("hello world")
    eval_a = dec.forward_with_prefix(None, ids).data
    eval_b = dec.forward_with_prefix(None, ids, ctx=RunCtx(train=False)).data
    assert eval_a.tobytes() == eval_b.tobytes()
    train_out = dec.forward_with_prefix(
        None, ids, ctx=RunCtx(train=True, rng=np.random.default_rng(1))).data
    assert not np.array_equal(train_out, eval_a)


def test_stage3_style_training_touches_only_adapters():
    dec = make_decoder()
    lm_warmup(dec, [dec.vocab.tokenize("hello world"), dec.vocab.tokenize("hard metal")],
              steps=5, batch_size=2, seed=0)
    adapters = attach_lora(dec, targets=("q", "v"), r=2, alpha=4,
                           rng=np.random.default_rng(1))
    for a in adapters.values():
        a.set_trainable(True)
    params = dec.params()
    frozen_before = {n: p.data.copy() for n, p in params.items() if ".lora." not in n}

    opt = AdamW(OptimConfig(peak_lr=1e-3, warmup_steps=0))
    ids = np.array([dec.vocab.tokenize("hello world hard")])
    for _ in range(3):
        logits = dec.forward_batch(None, ids[:, :-1])
        from vtlm.objectives import sequence_loss_batched
        loss = sequence_loss_batched(logits, ids[:, 1:], ids[:, 1:] != PAD)
        T.zero_grads(params)
        T.backward(loss)
        opt.step(params, 1e-3)

    for n, p in dec.params().items():
        if ".lora." not in n:
            assert p.data.tobytes() == frozen_before[n].tobytes(), n
    assert any(".lora." in n for n in lora_param_names(dec))
    changed = [n for n, p in dec.params().items()
               if ".lora.B" in n and np.abs(p.data).sum() > 0]
    assert changed  # adapters actually moved


# -- warmup -------------------------------------------------------------------------

def test_lm_warmup_zero_steps_unchanged():
    dec = make_decoder()
    before = dec.state_dict()
    lm_warmup(dec, [dec.vocab.tokenize("hello")], steps=0)
    after = dec.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert dec.frozen


def test_lm_warmup_500_steps_reduces_loss_and_freezes():
    dec = make_decoder(seed=3, layers=1, heads=2, d=16)
    texts = ["hello world", "hard metal", "smooth answer", "soft world",
             "rough metal answer", "hello hard world"]
    seqs = [dec.vocab.tokenize(t) for t in texts]
    losses = lm_warmup(dec, seqs, steps=500, batch_size=4, seed=1)
    assert losses[-1] < losses[0]
    assert min(losses[-20:]) < 0.5 * losses[0]
    assert dec.frozen
    assert not any(p.requires_grad for p in dec.params().values())
