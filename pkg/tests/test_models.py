import itertools
import math

import numpy as np
import pytest

from ilmfusion import models as M
from ilmfusion.corpus import Utterance
from ilmfusion.ctc import ctc_log_likelihood
from ilmfusion.models import (
    AsrConfig,
    AsrModel,
    CrossAttentionMode,
    LmConfig,
    LmModel,
    Schedule,
    average_checkpoints,
    ctc_log_posteriors,
    decoder_sequence_logprobs,
    decoder_step,
    encode,
    joint_loss,
    loss_components,
)
from ilmfusion.vocab import Vocab

from conftest import TINY_ASR, TINY_LM, perturb, tiny_features


def _utts(vocab, n, seed, frames=12, d_feat=6, max_len=3):
    rng = np.random.default_rng(seed)
    ids = vocab.token_ids
    out = []
    for i in range(n):
        k = int(rng.integers(1, max_len + 1))
        toks = vocab.decode(rng.choice(ids, size=k).tolist())
        out.append(Utterance(f"u{i:03d}", toks, 1, rng.standard_normal((frames, d_feat))))
    return out


# ---------------------------------------------------------------------------
# hand computation of one decoder step


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _hand_decoder_step(P, tokens, h_enc, d):
    """Single-head, single-block decoder written out sublayer by sublayer."""
    L = len(tokens)
    pos = M.positional_encoding(L, d)
    x = P["dec.emb"][tokens] + pos
    # masked self-attention
    h = _ln(x, P["dec.0.self.ln.g"], P["dec.0.self.ln.b"])
    q = h @ P["dec.0.self.q.W"] + P["dec.0.self.q.b"]
    k = h @ P["dec.0.self.k.W"] + P["dec.0.self.k.b"]
    v = h @ P["dec.0.self.v.W"] + P["dec.0.self.v.b"]
    s = q @ k.T / math.sqrt(d)
    s = np.where(np.tril(np.ones((L, L))) > 0, s, -np.inf)
    x = x + (_softmax(s) @ v) @ P["dec.0.self.o.W"] + P["dec.0.self.o.b"]
    # cross-attention sublayer: x' = LN(x); x'' = MHCA(x', h_enc); x = x'' + x
    xp = _ln(x, P["dec.0.cross.ln.g"], P["dec.0.cross.ln.b"])
    q = xp @ P["dec.0.cross.q.W"] + P["dec.0.cross.q.b"]
    k = h_enc @ P["dec.0.cross.k.W"] + P["dec.0.cross.k.b"]
    v = h_enc @ P["dec.0.cross.v.W"] + P["dec.0.cross.v.b"]
    xpp = (_softmax(q @ k.T / math.sqrt(d)) @ v) @ P["dec.0.cross.o.W"] + P["dec.0.cross.o.b"]
    x = xpp + x
    # feed-forward
    h = _ln(x, P["dec.0.ff.ln.g"], P["dec.0.ff.ln.b"])
    x = x + np.maximum(h @ P["dec.0.ff.1.W"] + P["dec.0.ff.1.b"], 0) @ P["dec.0.ff.2.W"] + P["dec.0.ff.2.b"]
    z = _ln(x, P["dec.ln.g"], P["dec.ln.b"])[-1] @ P["dec.out.W"] + P["dec.out.b"]
    return z - np.logaddexp.reduce(z)


def test_decoder_step_matches_hand_computation():
    vocab = Vocab.build(1, 1)
    cfg = AsrConfig(d_feat=4, d_model=4, n_heads=1, d_ff=6, n_enc=1, n_dec=1, subsample=2, dropout=0.0)
    model = perturb(AsrModel(vocab, cfg, seed=3), 4, scale=0.3)
    enc = encode(model, tiny_features(5, frames=6, d_feat=4))
    prefix = [vocab.token_ids[0], vocab.token_ids[1], vocab.token_ids[1]]
    got = decoder_step(model, prefix, enc)
    P = {k: p.values for k, p in model.params.items()}
    want = _hand_decoder_step(P, [vocab.sos] + prefix, enc.h_enc, cfg.d_model)
    np.testing.assert_allclose(got[vocab.output_ids], want, atol=1e-12)
    assert np.all(np.isneginf(got[[vocab.blank, vocab.pad]]))


def test_cross_attention_residual_identity():
    vocab = Vocab.build(2, 2)
    model = perturb(AsrModel(vocab, AsrConfig(**TINY_ASR), seed=0), 1)
    for i in range(model.config.n_dec):
        model.params[f"dec.{i}.cross.o.W"].values[:] = 0.0
        model.params[f"dec.{i}.cross.o.b"].values[:] = 0.0
    enc = encode(model, tiny_features(2))
    probe: dict = {}
    net = M._Net(M.Tape(record=False), model.params)
    tokens = np.array([[vocab.sos, 3, 4]])
    M._decoder_forward(net, model, tokens, net.t.const(enc.h_enc[None]), None, CrossAttentionMode.FULL,
                       probe=probe)
    for i in range(model.config.n_dec):
        assert np.array_equal(probe[f"dec.{i}.x_out"], probe[f"dec.{i}.x_in"])


# ---------------------------------------------------------------------------
# shapes and normalisation


def test_encode_length_and_determinism():
    vocab = Vocab.build(2, 2)
    model = AsrModel(vocab, AsrConfig(**TINY_ASR), seed=0)
    enc = encode(model, tiny_features(0, frames=8))
    assert enc.h_enc.shape == (4, 8) and enc.lengths == 4
    assert encode(model, tiny_features(0, frames=7)).lengths == 4
    again = encode(model, tiny_features(0, frames=8))
    assert np.array_equal(enc.h_enc, again.h_enc)
    zeros = encode(model, np.zeros((5, 6)))
    assert np.all(np.isfinite(zeros.h_enc))


def test_encode_rejects_bad_input():
    model = AsrModel(Vocab.build(2, 2), AsrConfig(**TINY_ASR))
    with pytest.raises(M.ModelError):
        encode(model, np.zeros((0, 6)))
    bad = np.zeros((4, 6))
    bad[1, 1] = np.nan
    with pytest.raises(M.ModelError):
        encode(model, bad)


@pytest.mark.parametrize("seed", range(3))
def test_distributions_are_normalised(seed):
    vocab = Vocab.build(3, 2)
    model = perturb(AsrModel(vocab, AsrConfig(**TINY_ASR), seed=seed), seed)
    lm = perturb(LmModel(vocab, LmConfig(**TINY_LM), seed=seed), seed + 1)
    enc = encode(model, tiny_features(seed, frames=9))
    for prefix in ([], [3], [4, 5, 6]):
        for dist in (decoder_step(model, prefix, enc), M.lm_step(lm, prefix)):
            assert abs(np.logaddexp.reduce(dist)) < 1e-6
            assert np.isneginf(dist[vocab.blank])
    post = ctc_log_posteriors(model, enc)
    assert post.shape == (enc.lengths, len(vocab))
    np.testing.assert_allclose(np.logaddexp.reduce(post, axis=1), 0.0, atol=1e-6)
    assert np.all(np.isneginf(post[:, vocab.eos]))


def test_full_mode_requires_encoder():
    model = AsrModel(Vocab.build(2, 2), AsrConfig(**TINY_ASR))
    with pytest.raises(M.ModelError):
        decoder_step(model, [3], None)
    with pytest.raises(M.ModelError):
        decoder_step(model, [3], None, CrossAttentionMode.OTCL, None)


def test_teacher_forcing_matches_chained_steps():
    vocab = Vocab.build(2, 2)
    model = perturb(AsrModel(vocab, AsrConfig(**TINY_ASR), seed=1), 2)
    enc = encode(model, tiny_features(1))
    ids = [int(t) for t in vocab.token_ids]
    seqs = [list(s) for L in range(3) for s in itertools.product(ids, repeat=L)]
    tf = decoder_sequence_logprobs(model, seqs, enc)
    for s, lp in zip(seqs, tf):
        chained = sum(decoder_step(model, s[:i], enc)[t] for i, t in enumerate(s + [vocab.eos]))
        assert lp == pytest.approx(chained, abs=1e-8)
    # attention loss of the training path agrees with the scoring path
    utts = [Utterance(f"u{i}", vocab.decode(s), 1, tiny_features(1)) for i, s in enumerate(seqs) if s]
    want = -np.mean([lp for s, lp in zip(seqs, tf) if s])
    assert loss_components(model, utts)[1] == pytest.approx(want, abs=1e-8)


# ---------------------------------------------------------------------------
# joint loss


def test_joint_loss_boundaries():
    vocab = Vocab.build(2, 2)
    model = perturb(AsrModel(vocab, AsrConfig(**TINY_ASR), seed=2), 3)
    batch = _utts(vocab, 4, 0)
    ctc, att = loss_components(model, batch)
    assert joint_loss(model, batch, 0.0) == pytest.approx(att, abs=1e-12)
    assert joint_loss(model, batch, 1.0) == pytest.approx(ctc, abs=1e-12)
    assert joint_loss(model, batch, 0.3) == pytest.approx(0.3 * ctc + 0.7 * att, abs=1e-12)
    with pytest.raises(M.ModelError):
        joint_loss(model, batch, 1.5)


def test_ctc_loss_equals_alignment_enumeration():
    vocab = Vocab.build(1, 1)
    cfg = AsrConfig(d_feat=3, d_model=4, n_heads=1, d_ff=4, n_enc=1, n_dec=1, subsample=2, dropout=0.0)
    model = perturb(AsrModel(vocab, cfg, seed=0), 1)
    feats = tiny_features(3, frames=4, d_feat=3)  # 2 encoder frames
    u = Utterance("u0", [vocab.symbols[3]], 1, feats)
    post = ctc_log_posteriors(model, encode(model, feats))[:, vocab.ctc_ids]  # blank, a, b
    total = 0.0
    for path in itertools.product(range(3), repeat=2):
        collapsed = [k for i, k in enumerate(path) if k != 0 and (i == 0 or path[i - 1] != k)]
        if collapsed == [1]:
            total += math.exp(post[0, path[0]] + post[1, path[1]])
    assert loss_components(model, [u])[0] == pytest.approx(-math.log(total), abs=1e-9)
    # every label sequence together: probability one
    seqs = [[], [1], [2], [1, 2], [2, 1]]
    assert sum(math.exp(ctc_log_likelihood(post, s)) for s in seqs) == pytest.approx(1.0, abs=1e-9)


def test_ctc_infeasible_names_utterance():
    vocab = Vocab.build(2, 2)
    model = AsrModel(vocab, AsrConfig(**TINY_ASR))
    u = Utterance("too-long", vocab.decode([3, 4, 5, 6]), 1, tiny_features(0, frames=4))
    with pytest.raises(M.CtcInfeasibleError, match="too-long"):
        joint_loss(model, [u])


# ---------------------------------------------------------------------------
# training


def test_zero_epochs_is_a_no_op():
    vocab = Vocab.build(2, 2)
    model = AsrModel(vocab, AsrConfig(**TINY_ASR), seed=0)
    before = model.state_dict()
    model, log_ = M.train_asr(model, _utts(vocab, 4, 0), None, Schedule(epochs=0))
    assert not log_.rows
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())


def test_loss_log_bookkeeping_and_determinism():
    vocab = Vocab.build(2, 2)
    train, valid = _utts(vocab, 8, 0), _utts(vocab, 3, 1)

    def run():
        model = AsrModel(vocab, AsrConfig(**{**TINY_ASR, "dropout": 0.1}), seed=0)
        return M.train_asr(model, train, valid, Schedule(epochs=3, batch_size=4, n_average=2))

    m1, log1 = run()
    m2, log2 = run()
    assert len(log1.rows) == 3 * 2 * 2
    assert {(r[1], r[2]) for r in log1.rows} == {(s, c) for s in ("train", "valid") for c in ("ctc", "att")}
    assert log1.rows == log2.rows
    assert all(np.array_equal(v, m2.state_dict()[k]) for k, v in m1.state_dict().items())


def test_overfitting_sanity():
    vocab = Vocab.build(2, 2)
    train = _utts(vocab, 20, 3)
    model = AsrModel(vocab, AsrConfig(**TINY_ASR), seed=0)
    _, log_ = M.train_asr(model, train, None, Schedule(epochs=200, batch_size=20, warmup_steps=20,
                                                       lr_factor=2.0, n_average=1), ctc_weight=0.3)
    joint = [0.3 * c + 0.7 * a for c, a in zip(log_.series("train", "ctc"), log_.series("train", "att"))]
    assert joint[-1] < 0.1 * joint[0]


def test_lm_trains_to_degenerate_perplexity():
    vocab = Vocab.build(2, 2)
    lm = LmModel(vocab, LmConfig(**TINY_LM), seed=0)
    text = [[vocab.symbols[3]] for _ in range(16)]
    lm, _ = M.train_lm(lm, text, Schedule(epochs=150, batch_size=16, warmup_steps=10, lr_factor=2.0))
    assert math.exp(M.lm_cross_entropy(lm, [vocab.encode(t) for t in text])) < 1.01


def test_lm_held_out_perplexity_falls():
    from ilmfusion.corpus import generate_corpus, preset

    spec = preset("seame_like", n_utts=80, seed=1)
    vocab = spec.vocab()
    text = [u.tokens for u in generate_corpus(spec)]
    train, held = text[:60], text[60:]
    lm = LmModel(vocab, LmConfig(**TINY_LM), seed=0)
    before = M.lm_cross_entropy(lm, [vocab.encode(t) for t in held])
    lm, log_ = M.train_lm(lm, train, Schedule(epochs=10, batch_size=8, warmup_steps=50, lr_factor=0.5), valid_text=held)
    after = M.lm_cross_entropy(lm, [vocab.encode(t) for t in held])
    assert after < before
    assert log_.series("valid", "ce")[-1] < log_.series("valid", "ce")[0]


def test_zero_epoch_lm_unchanged():
    vocab = Vocab.build(2, 2)
    lm = LmModel(vocab, LmConfig(**TINY_LM), seed=0)
    before = lm.state_dict()
    lm, _ = M.train_lm(lm, [["丁"]], Schedule(epochs=0))
    assert all(np.array_equal(before[k], v) for k, v in lm.state_dict().items())


# ---------------------------------------------------------------------------
# averaging and checkpoints


def test_average_checkpoints_examples():
    assert average_checkpoints([{"w": np.array(0.0)}, {"w": np.array(2.0)}])["w"] == 1.0
    snap = {"w": np.array([0.1, -3.7, 1e-9])}
    assert np.array_equal(average_checkpoints([snap] * 7)["w"], snap["w"])
    rng = np.random.default_rng(0)
    cks = [{"a": rng.standard_normal(5)} for _ in range(4)]
    ref = average_checkpoints(cks)["a"]
    for perm in itertools.permutations(range(4)):
        assert np.array_equal(average_checkpoints([cks[i] for i in perm])["a"], ref)
    np.testing.assert_allclose(ref, np.mean([c["a"] for c in cks], axis=0), atol=1e-15)


def test_average_checkpoints_mismatch():
    with pytest.raises(ValueError):
        average_checkpoints([{"a": np.zeros(2)}, {"b": np.zeros(2)}])
    with pytest.raises(ValueError):
        average_checkpoints([{"a": np.zeros(2)}, {"a": np.zeros(3)}])
    with pytest.raises(ValueError):
        average_checkpoints([])


def test_checkpoint_round_trip(tmp_path):
    vocab = Vocab.build(2, 2)
    model = AsrModel(vocab, AsrConfig(**TINY_ASR), seed=5)
    path = tmp_path / "asr.ckpt"
    model.save(path)
    loaded = AsrModel.load(path, vocab)
    for k, v in model.state_dict().items():
        assert np.array_equal(loaded.params[k].values, v.astype(np.float32).astype(np.float64))
    loaded.save(tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    with pytest.raises(M.CheckpointError):
        AsrModel.load(path, Vocab.build(3, 2))
    with pytest.raises(M.CheckpointError):
        LmModel.load(path, vocab)
    (tmp_path / "cut.ckpt").write_bytes(path.read_bytes()[:-3])
    with pytest.raises(M.CheckpointError):
        AsrModel.load(tmp_path / "cut.ckpt", vocab)
