"""Toy attention-encoder-decoder ASR with a CTC head, and a decoder-only LM.

All blocks are pre-norm.  The decoder's cross-attention sublayer is written
so that the context vector can be produced by multi-head attention over the
encoder output (``FULL``) or by an internal-LM estimator that never touches
the encoder (``OTCL`` and ``LSCL``, see :mod:`ilmfusion.ilme`)::

    x'  = LayerNorm(x)
    x'' = MHCA(x', h_enc)          # or: b, or FFN(x')
    x   = x'' + x
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from ilmfusion.autodiff import (
    Param,
    Tape,
    Var,
    embedding,
    gather,
    gradients,
    layer_norm,
    log_softmax,
    relu,
    softmax,
)
from ilmfusion.autodiff import ctc_loss as _ctc_loss
from ilmfusion.ctc import ctc_min_frames
from ilmfusion.vocab import Vocab

log = logging.getLogger(__name__)

MASK_VALUE = -1e9


class ModelError(ValueError):
    pass


class CtcInfeasibleError(ModelError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CrossAttentionMode(str, Enum):
    FULL = "full"
    OTCL = "otcl"
    LSCL = "lscl"


@dataclass
class AsrConfig:
    d_feat: int = 16
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    n_enc: int = 2
    n_dec: int = 2
    subsample: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.subsample < 1:
            raise ModelError("subsample must be >= 1")


@dataclass
class LmConfig:
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    n_layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")


@dataclass
class EncoderOutput:
    h_enc: np.ndarray  # [T_enc, d_model]
    lengths: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.h_enc)):
            raise ModelError("non-finite encoder activations")


# ---------------------------------------------------------------------------
# parameter construction


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Param] = {}

    def add(self, name, values):
        if name in self.params:
            raise ModelError(f"duplicate parameter {name}")
        self.params[name] = Param(name, values)

    def linear(self, name, d_in, d_out):
        self.add(f"{name}.W", _glorot(self.rng, d_in, d_out))
        self.add(f"{name}.b", np.zeros(d_out))

    def norm(self, name, d):
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))

    def attention(self, name, d):
        for proj in "qkvo":
            self.linear(f"{name}.{proj}", d, d)

    def ffn(self, name, d, d_ff):
        self.norm(f"{name}.ln", d)
        self.linear(f"{name}.1", d, d_ff)
        self.linear(f"{name}.2", d_ff, d)


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class _Net:
    """Forward context: binds parameters to a tape and carries dropout state."""

    def __init__(self, tape: Tape, params: dict, dropout: float = 0.0, rng=None):
        self.t = tape
        self.params = params
        self.dropout = dropout if rng is not None else 0.0
        self.rng = rng

    def p(self, name) -> Var:
        return self.t.param(self.params[name])

    def linear(self, x, name):
        return x @ self.p(f"{name}.W") + self.p(f"{name}.b")

    def norm(self, x, name):
        return layer_norm(x) * self.p(f"{name}.g") + self.p(f"{name}.b")

    def drop(self, x):
        if self.dropout <= 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
        return x * self.t.const(keep)

    def attention(self, xq, xkv, name, n_heads, mask=None):
        B, Lq, d = xq.shape
        Bk, Lk, _ = xkv.shape
        dh = d // n_heads
        q = self.linear(xq, f"{name}.q").reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
        k = self.linear(xkv, f"{name}.k").reshape(Bk, Lk, n_heads, dh).transpose(0, 2, 3, 1)
        v = self.linear(xkv, f"{name}.v").reshape(Bk, Lk, n_heads, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        ctx = (softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
        return self.linear(ctx, f"{name}.o")

    def ffn(self, x, name):
        h = relu(self.linear(self.norm(x, f"{name}.ln"), f"{name}.1"))
        return self.linear(h, f"{name}.2")

    def self_attention(self, x, name, n_heads, mask):
        h = self.norm(x, f"{name}.self.ln")
        return self.attention(h, h, f"{name}.self", n_heads, mask)


def _causal_mask(L: int) -> np.ndarray:
    return np.triu(np.full((L, L), MASK_VALUE), k=1)[None, None]


def _key_mask(lengths, T: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    m = np.where(np.arange(T)[None, :] < lengths[:, None], 0.0, MASK_VALUE)
    return m[:, None, None, :]


def _full_dist(logp: np.ndarray, support: np.ndarray, size: int) -> np.ndarray:
    out = np.full(logp.shape[:-1] + (size,), -np.inf)
    out[..., support] = logp
    return out


# ---------------------------------------------------------------------------


class AsrModel:
    """Transformer encoder, transformer decoder and CTC head over ``vocab``."""

    def __init__(self, vocab: Vocab, config: AsrConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.config = config or AsrConfig()
        self.seed = seed
        c = self.config
        b = _Builder(seed)
        b.linear("enc.in", c.subsample * c.d_feat, c.d_model)
        for i in range(c.n_enc):
            b.norm(f"enc.{i}.self.ln", c.d_model)
            b.attention(f"enc.{i}.self", c.d_model)
            b.ffn(f"enc.{i}.ff", c.d_model, c.d_ff)
        b.norm("enc.ln", c.d_model)
        b.add("dec.emb", b.rng.normal(0.0, 1.0, size=(len(vocab), c.d_model)))
        for i in range(c.n_dec):
            b.norm(f"dec.{i}.self.ln", c.d_model)
            b.attention(f"dec.{i}.self", c.d_model)
            b.norm(f"dec.{i}.cross.ln", c.d_model)
            b.attention(f"dec.{i}.cross", c.d_model)
            b.ffn(f"dec.{i}.ff", c.d_model, c.d_ff)
        b.norm("dec.ln", c.d_model)
        b.linear("dec.out", c.d_model, len(vocab.output_ids))
        b.linear("ctc", c.d_model, len(vocab.ctc_ids))
        self.params: dict[str, Param] = b.params
        self._out_index = {int(t): k for k, t in enumerate(vocab.output_ids)}
        self._ctc_index = {int(t): k for k, t in enumerate(vocab.ctc_ids)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            raise CheckpointError("parameter names do not match the model")
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {p.shape}")
            p.values = v.copy()

    def decoder_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("dec.")]

    def metadata(self) -> dict:
        return {"kind": "asr", "config": asdict(self.config), "vocab_hash": self.vocab.hash(), "seed": self.seed}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict(), self.metadata())

    @classmethod
    def load(cls, path, vocab: Vocab) -> "AsrModel":
        state, meta = load_checkpoint(path)
        if meta.get("kind") != "asr":
            raise CheckpointError(f"{path} is not an ASR checkpoint")
        _check_vocab(meta, vocab, path)
        model = cls(vocab, AsrConfig(**meta["config"]), seed=meta.get("seed", 0))
        model.load_state_dict(state)
        return model


class LmModel:
    """Decoder-only transformer LM (self-attention and FFN blocks)."""

    def __init__(self, vocab: Vocab, config: LmConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.config = config or LmConfig()
        self.seed = seed
        c = self.config
        b = _Builder(seed)
        b.add("lm.emb", b.rng.normal(0.0, 1.0, size=(len(vocab), c.d_model)))
        for i in range(c.n_layers):
            b.norm(f"lm.{i}.self.ln", c.d_model)
            b.attention(f"lm.{i}.self", c.d_model)
            b.ffn(f"lm.{i}.ff", c.d_model, c.d_ff)
        b.norm("lm.ln", c.d_model)
        b.linear("lm.out", c.d_model, len(vocab.output_ids))
        self.params: dict[str, Param] = b.params
        self._out_index = {int(t): k for k, t in enumerate(vocab.output_ids)}

    state_dict = AsrModel.state_dict
    load_state_dict = AsrModel.load_state_dict

    def metadata(self) -> dict:
        return {"kind": "lm", "config": asdict(self.config), "vocab_hash": self.vocab.hash(), "seed": self.seed}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict(), self.metadata())

    @classmethod
    def load(cls, path, vocab: Vocab) -> "LmModel":
        state, meta = load_checkpoint(path)
        if meta.get("kind") != "lm":
            raise CheckpointError(f"{path} is not an LM checkpoint")
        _check_vocab(meta, vocab, path)
        model = cls(vocab, LmConfig(**meta["config"]), seed=meta.get("seed", 0))
        model.load_state_dict(state)
        return model


def _check_vocab(meta, vocab, path):
    if meta.get("vocab_hash") != vocab.hash():
        raise CheckpointError(f"{path}: vocab hash {meta.get('vocab_hash')} does not match {vocab.hash()}")


# ---------------------------------------------------------------------------
# forward passes on a tape


def _encoder_forward(net: _Net, model: AsrModel, feats: np.ndarray, lengths):
    """feats [B, T, d_feat] -> (h_enc Var [B, T_enc, d], enc lengths, key mask)."""
    c = model.config
    B, T, D = feats.shape
    if D != c.d_feat:
        raise ModelError(f"expected {c.d_feat}-dim features, got {D}")
    s = c.subsample
    T_enc = -(-T // s)
    padded = np.zeros((B, T_enc * s, D))
    padded[:, :T] = feats
    x = net.t.const(padded.reshape(B, T_enc, s * D))
    h = net.linear(x, "enc.in") + positional_encoding(T_enc, c.d_model)
    h = net.drop(h)
    enc_len = -(-np.asarray(lengths) // s)
    mask = _key_mask(enc_len, T_enc)
    for i in range(c.n_enc):
        h = h + net.drop(net.self_attention(h, f"enc.{i}", c.n_heads, mask))
        h = h + net.drop(net.ffn(h, f"enc.{i}.ff"))
    return net.norm(h, "enc.ln"), enc_len, mask


def _decoder_forward(net: _Net, model: AsrModel, tokens: np.ndarray, enc: Var | None, enc_mask,
                     mode: CrossAttentionMode, ilm=None, probe: dict | None = None) -> Var:
    """tokens [B, L] (starting with sos) -> log-probs [B, L, |output_ids|]."""
    c = model.config
    B, L = tokens.shape
    x = embedding(net.p("dec.emb"), tokens) + positional_encoding(L, c.d_model)
    x = net.drop(x)
    causal = _causal_mask(L)
    for i in range(c.n_dec):
        name = f"dec.{i}"
        x = x + net.drop(net.self_attention(x, name, c.n_heads, causal))
        x_prime = net.norm(x, f"{name}.cross.ln")
        if mode is CrossAttentionMode.FULL:
            context = net.attention(x_prime, enc, f"{name}.cross", c.n_heads, enc_mask)
        else:
            context = ilm.context_vector(net.t, x_prime)
        x_out = x + net.drop(context)
        if probe is not None:
            probe[f"{name}.x_in"] = np.array(x.value)
            probe[f"{name}.x_prime"] = np.array(x_prime.value)
            probe[f"{name}.context"] = np.array(context.value)
            probe[f"{name}.x_out"] = np.array(x_out.value)
        x = x_out
        x = x + net.drop(net.ffn(x, f"{name}.ff"))
    x = net.norm(x, "dec.ln")
    return log_softmax(net.linear(x, "dec.out"))


def _lm_forward(net: _Net, model: LmModel, tokens: np.ndarray) -> Var:
    c = model.config
    B, L = tokens.shape
    x = embedding(net.p("lm.emb"), tokens) + positional_encoding(L, c.d_model)
    x = net.drop(x)
    causal = _causal_mask(L)
    for i in range(c.n_layers):
        x = x + net.drop(net.self_attention(x, f"lm.{i}", c.n_heads, causal))
        x = x + net.drop(net.ffn(x, f"lm.{i}.ff"))
    x = net.norm(x, "lm.ln")
    return log_softmax(net.linear(x, "lm.out"))


def _check_mode(mode, enc, ilm):
    mode = CrossAttentionMode(mode)
    if mode is CrossAttentionMode.FULL:
        if enc is None:
            raise ModelError("FULL cross-attention needs an encoder output")
    else:
        if ilm is None:
            raise ModelError(f"{mode.value} mode needs internal-LM parameters")
        if ilm.kind is not mode:
            raise ModelError(f"{mode.value} mode given {ilm.kind.value} parameters")
    return mode


def _pad_tokens(seqs: Sequence[Sequence[int]], sos: int, fill: int) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs) + 1
    inp = np.full((len(seqs), L), fill, dtype=np.int64)
    for b, s in enumerate(seqs):
        inp[b, 0] = sos
        inp[b, 1:len(s) + 1] = s
    return inp, np.array([len(s) + 1 for s in seqs])


# ---------------------------------------------------------------------------
# public scoring API


def encode(model: AsrModel, features: np.ndarray) -> EncoderOutput:
    """Run the encoder on one utterance [T_in, d_feat] in eval mode."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ModelError("features must be a non-empty [T, d_feat] array")
    if not np.all(np.isfinite(feats)):
        raise ModelError("non-finite features")
    net = _Net(Tape(record=False), model.params)
    h, enc_len, _ = _encoder_forward(net, model, feats[None], [feats.shape[0]])
    return EncoderOutput(h_enc=h.value[0], lengths=int(enc_len[0]))


def decoder_step_batch(model: AsrModel, prefixes: np.ndarray, enc: EncoderOutput | None,
                       mode=CrossAttentionMode.FULL, ilm=None) -> np.ndarray:
    """Next-token log-distributions for equal-length prefixes [B, L] (no sos).

    Returns [B, |vocab|] with ``-inf`` on ids outside the decoder support.
    """
    mode = _check_mode(mode, enc, ilm)
    prefixes = np.asarray(prefixes, dtype=np.int64).reshape(len(prefixes), -1)
    B = prefixes.shape[0]
    tokens = np.concatenate([np.full((B, 1), model.vocab.sos, dtype=np.int64), prefixes], axis=1)
    net = _Net(Tape(record=False), model.params)
    enc_var = None
    if mode is CrossAttentionMode.FULL:
        enc_var = net.t.const(enc.h_enc[None])
    logp = _decoder_forward(net, model, tokens, enc_var, None, mode, ilm)
    return _full_dist(logp.value[:, -1], model.vocab.output_ids, len(model.vocab))


def decoder_step(model: AsrModel, prefix: Sequence[int], enc: EncoderOutput | None,
                 mode=CrossAttentionMode.FULL, ilm=None) -> np.ndarray:
    """log P(next | sos + prefix [, h_enc]) over the full vocabulary."""
    return decoder_step_batch(model, np.asarray([list(prefix)], dtype=np.int64), enc, mode, ilm)[0]


def decoder_sequence_logprobs(model: AsrModel, seqs: Sequence[Sequence[int]], enc: EncoderOutput | None,
                              mode=CrossAttentionMode.FULL, ilm=None) -> np.ndarray:
    """Teacher-forced log P(seq + eos) for each sequence (eos term included)."""
    mode = _check_mode(mode, enc, ilm)
    if not seqs:
        return np.zeros(0)
    inp, n = _pad_tokens(seqs, model.vocab.sos, model.vocab.eos)
    net = _Net(Tape(record=False), model.params)
    enc_var = net.t.const(enc.h_enc[None]) if mode is CrossAttentionMode.FULL else None
    logp = _decoder_forward(net, model, inp, enc_var, None, mode, ilm).value
    return _sum_targets(logp, seqs, model._out_index, model.vocab.eos)


def _sum_targets(logp, seqs, out_index, eos):
    out = np.zeros(len(seqs))
    for b, s in enumerate(seqs):
        tgt = [out_index[int(t)] for t in list(s) + [eos]]
        out[b] = logp[b, np.arange(len(tgt)), tgt].sum()
    return out


def ctc_log_posteriors(model: AsrModel, enc: EncoderOutput) -> np.ndarray:
    """Per-frame log-distributions [T_enc, |vocab|]; eos and pad carry ``-inf``."""
    net = _Net(Tape(record=False), model.params)
    lp = log_softmax(net.linear(net.t.const(enc.h_enc[None, : enc.lengths]), "ctc")).value[0]
    return _full_dist(lp, model.vocab.ctc_ids, len(model.vocab))


def lm_step_batch(model: LmModel, prefixes: np.ndarray) -> np.ndarray:
    prefixes = np.asarray(prefixes, dtype=np.int64).reshape(len(prefixes), -1)
    B = prefixes.shape[0]
    tokens = np.concatenate([np.full((B, 1), model.vocab.sos, dtype=np.int64), prefixes], axis=1)
    logp = _lm_forward(_Net(Tape(record=False), model.params), model, tokens).value
    return _full_dist(logp[:, -1], model.vocab.output_ids, len(model.vocab))


def lm_step(model: LmModel, prefix: Sequence[int]) -> np.ndarray:
    return lm_step_batch(model, np.asarray([list(prefix)], dtype=np.int64))[0]


def lm_sequence_logprobs(model: LmModel, seqs: Sequence[Sequence[int]], batch_size: int = 64) -> np.ndarray:
    """log P_LM(seq + eos) for each sequence."""
    out = []
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        inp, _ = _pad_tokens(chunk, model.vocab.sos, model.vocab.eos)
        logp = _lm_forward(_Net(Tape(record=False), model.params), model, inp).value
        out.append(_sum_targets(logp, chunk, model._out_index, model.vocab.eos))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# losses


def _batch_arrays(model: AsrModel, batch):
    ids = [model.vocab.encode(u.tokens) for u in batch]
    if any(len(s) == 0 for s in ids):
        raise ModelError("empty transcript in batch")
    lengths = np.array([u.features.shape[0] for u in batch])
    feats = np.zeros((len(batch), lengths.max(), model.config.d_feat))
    for b, u in enumerate(batch):
        feats[b, : lengths[b]] = u.features
    return ids, feats, lengths


def _attention_nll(logp: Var, model, ids) -> Var:
    """Sum over the batch of teacher-forced -log P(y + eos)."""
    B, L = logp.shape[:2]
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L))
    for b, s in enumerate(ids):
        tgt = [model._out_index[t] for t in s] + [model._out_index[model.vocab.eos]]
        targets[b, : len(tgt)] = tgt
        mask[b, : len(tgt)] = 1.0
    return -(gather(logp, targets) * mask).sum()


def _joint_terms(net: _Net, model: AsrModel, batch, need_ctc=True, need_att=True):
    ids, feats, lengths = _batch_arrays(model, batch)
    h, enc_len, enc_mask = _encoder_forward(net, model, feats, lengths)
    B = len(batch)
    ctc = att = None
    if need_ctc:
        lp = log_softmax(net.linear(h, "ctc"))
        terms = []
        for b, (u, s) in enumerate(zip(batch, ids)):
            if ctc_min_frames(s) > enc_len[b]:
                raise CtcInfeasibleError(
                    f"utterance {getattr(u, 'utt_id', b)}: {len(s)} labels need "
                    f"{ctc_min_frames(s)} frames, encoder gives {enc_len[b]}")
            labels = [model._ctc_index[t] for t in s]
            terms.append(_ctc_loss(lp[b, : enc_len[b]], labels, blank=0))
        ctc = terms[0]
        for t in terms[1:]:
            ctc = ctc + t
        ctc = ctc * (1.0 / B)
    if need_att:
        inp, _ = _pad_tokens(ids, model.vocab.sos, model.vocab.eos)
        logp = _decoder_forward(net, model, inp, h, enc_mask, CrossAttentionMode.FULL)
        att = _attention_nll(logp, model, ids) * (1.0 / B)
    return ctc, att


def _combine(ctc, att, w):
    if w == 0.0:
        return att
    if w == 1.0:
        return ctc
    return ctc * w + att * (1.0 - w)


def joint_loss(model: AsrModel, batch, ctc_weight: float = 0.3) -> float:
    """ctc_weight * CTC + (1 - ctc_weight) * attention NLL, both per utterance."""
    if not 0.0 <= ctc_weight <= 1.0:
        raise ModelError("ctc_weight must lie in [0, 1]")
    net = _Net(Tape(record=False), model.params)
    ctc, att = _joint_terms(net, model, batch, need_ctc=ctc_weight > 0, need_att=ctc_weight < 1)
    return float(_combine(ctc, att, ctc_weight).value)


def loss_components(model: AsrModel, batch) -> tuple[float, float]:
    """(CTC, attention) per-utterance losses in eval mode."""
    net = _Net(Tape(record=False), model.params)
    ctc, att = _joint_terms(net, model, batch)
    return float(ctc.value), float(att.value)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Schedule:
    epochs: int = 20
    batch_size: int = 16
    warmup_steps: int = 100
    lr_factor: float = 1.0
    seed: int = 0
    n_average: int = 10
    grad_clip: float = 5.0
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)


class NoamAdam:
    """Adam with the inverse-square-root warmup learning-rate schedule."""

    def __init__(self, params: Sequence[Param], d_model: int, schedule: Schedule):
        self.params = list(params)
        self.d_model = d_model
        self.s = schedule
        self.step_num = 0
        self.m = {p.name: np.zeros_like(p.values) for p in self.params}
        self.v = {p.name: np.zeros_like(p.values) for p in self.params}

    def lr(self, step: int | None = None) -> float:
        n = step or max(self.step_num, 1)
        return self.s.lr_factor * self.d_model**-0.5 * min(n**-0.5, n * self.s.warmup_steps**-1.5)

    def step(self, grads: dict) -> None:
        self.step_num += 1
        if self.s.grad_clip:
            norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            if norm > self.s.grad_clip:
                grads = {k: g * (self.s.grad_clip / norm) for k, g in grads.items()}
        b1, b2 = self.s.betas
        lr = self.lr()
        c1 = 1 - b1**self.step_num
        c2 = 1 - b2**self.step_num
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + self.s.eps)


@dataclass
class LossLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, split, criterion, loss):
        self.rows.append((int(epoch), split, criterion, float(loss)))

    def series(self, split: str, criterion: str) -> list[float]:
        return [r[3] for r in self.rows if r[1] == split and r[2] == criterion]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "criterion", "loss"])
            for e, s, c, v in self.rows:
                w.writerow([e, s, c, repr(v)])

    @classmethod
    def from_csv(cls, path) -> "LossLog":
        log_ = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log_.add(row["epoch"], row["split"], row["criterion"], row["loss"])
        return log_


def average_checkpoints(checkpoints: Sequence[dict]) -> dict:
    """Element-wise mean of parameter snapshots with identical names and shapes."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    names = set(checkpoints[0])
    for ck in checkpoints[1:]:
        if set(ck) != names:
            raise ValueError("checkpoints have different parameter names")
    out = {}
    for name in checkpoints[0]:
        arrs = [np.asarray(ck[name], dtype=np.float64) for ck in checkpoints]
        if any(a.shape != arrs[0].shape for a in arrs):
            raise ValueError(f"shape mismatch for {name}")
        if len(arrs) == 1:
            out[name] = arrs[0].copy()
            continue
        # sorted, offset summation: order-independent and exact for identical copies
        stacked = np.sort(np.stack(arrs), axis=0)
        out[name] = stacked[0] + (stacked - stacked[0]).sum(axis=0) / len(arrs)
    return out


def _minibatches(items, batch_size, rng):
    order = rng.permutation(len(items))
    for i in range(0, len(items), batch_size):
        yield [items[j] for j in order[i:i + batch_size]]


class _BestK:
    def __init__(self, k):
        self.k = k
        self.items: list = []

    def offer(self, score, epoch, state):
        if self.k <= 0:
            return
        self.items.append((score, epoch, state))
        self.items.sort(key=lambda x: (x[0], x[1]))
        del self.items[self.k:]


def train_asr(model: AsrModel, train, valid, schedule: Schedule, ctc_weight: float = 0.3):
    """Joint CTC/attention training with checkpoint averaging.

    Returns ``(model, LossLog)``.  The log has one row per epoch, split
    (train/valid) and criterion (ctc/att); the train rows are running means
    over the epoch's minibatches.  The ``n_average`` epochs with the lowest
    validation joint loss are averaged into the final parameters.
    """
    if not train:
        raise ModelError("empty training set")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ModelError("ctc_weight must lie in [0, 1]")
    valid = list(valid) if valid else []
    rng = np.random.default_rng(schedule.seed)
    params = [p for p in model.params.values() if p.trainable]
    opt = NoamAdam(params, model.config.d_model, schedule)
    log_ = LossLog()
    best = _BestK(schedule.n_average)
    for epoch in range(1, schedule.epochs + 1):
        sums = np.zeros(2)
        count = 0
        for batch in _minibatches(train, schedule.batch_size, rng):
            tape = Tape()
            net = _Net(tape, model.params, model.config.dropout, rng)
            ctc, att = _joint_terms(net, model, batch)
            loss = _combine(ctc, att, ctc_weight)
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(f"non-finite loss at step {opt.step_num + 1}")
            opt.step(gradients(tape, loss, params))
            sums += len(batch) * np.array([ctc.value, att.value])
            count += len(batch)
        log_.add(epoch, "train", "ctc", sums[0] / count)
        log_.add(epoch, "train", "att", sums[1] / count)
        vc, va = _eval_components(model, valid or train, schedule.batch_size)
        log_.add(epoch, "valid", "ctc", vc)
        log_.add(epoch, "valid", "att", va)
        best.offer(ctc_weight * vc + (1 - ctc_weight) * va, epoch, model.state_dict())
        log.info("asr epoch %d train ctc %.3f att %.3f valid ctc %.3f att %.3f",
                 epoch, sums[0] / count, sums[1] / count, vc, va)
    if best.items:
        model.load_state_dict(average_checkpoints([s for _, _, s in best.items]))
    return model, log_


def _eval_components(model, data, batch_size):
    tot = np.zeros(2)
    for i in range(0, len(data), batch_size):
        chunk = data[i:i + batch_size]
        tot += len(chunk) * np.array(loss_components(model, chunk))
    return tuple(tot / len(data))


def _lm_nll(net: _Net, model: LmModel, seqs) -> tuple[Var, int]:
    inp, _ = _pad_tokens(seqs, model.vocab.sos, model.vocab.eos)
    logp = _lm_forward(net, model, inp)
    n_tok = sum(len(s) + 1 for s in seqs)
    return _attention_nll(logp, model, seqs), n_tok


def lm_cross_entropy(model: LmModel, seqs, batch_size: int = 64) -> float:
    """Mean per-token negative log-likelihood (eos counted)."""
    tot, n = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        nll, k = _lm_nll(_Net(Tape(record=False), model.params), model, seqs[i:i + batch_size])
        tot += float(nll.value)
        n += k
    return tot / n


def train_lm(model: LmModel, text, schedule: Schedule, valid_text=None):
    """Per-token cross-entropy training of the external LM.

    ``text`` holds symbol sequences.  Returns ``(model, LossLog)`` with
    criterion ``ce`` rows for train and valid.
    """
    seqs = [model.vocab.encode(s) for s in text]
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ModelError("LM text must be a non-empty list of non-empty sequences")
    vseqs = [model.vocab.encode(s) for s in valid_text] if valid_text else seqs
    rng = np.random.default_rng(schedule.seed)
    params = [p for p in model.params.values() if p.trainable]
    opt = NoamAdam(params, model.config.d_model, schedule)
    log_ = LossLog()
    best = _BestK(schedule.n_average)
    for epoch in range(1, schedule.epochs + 1):
        tot, n = 0.0, 0
        for batch in _minibatches(seqs, schedule.batch_size, rng):
            tape = Tape()
            nll, k = _lm_nll(_Net(tape, model.params, model.config.dropout, rng), model, batch)
            loss = nll * (1.0 / k)
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(f"non-finite loss at step {opt.step_num + 1}")
            opt.step(gradients(tape, loss, params))
            tot += float(nll.value)
            n += k
        vce = lm_cross_entropy(model, vseqs)
        log_.add(epoch, "train", "ce", tot / n)
        log_.add(epoch, "valid", "ce", vce)
        best.offer(vce, epoch, model.state_dict())
    if best.items:
        model.load_state_dict(average_checkpoints([s for _, _, s in best.items]))
    return model, log_


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"ILMCKPT1"


def save_checkpoint(path, arrays: dict, metadata: dict) -> None:
    """Named float32 little-endian arrays with shape headers plus JSON metadata."""
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return arrays, meta
