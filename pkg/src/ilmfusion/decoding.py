"""Joint CTC/attention beam search with shallow fusion and ILM-subtracting fusion.

Every hypothesis keeps a ledger of four accumulated log-scores (attention
decoder, CTC prefix, external LM, internal LM) and its combined score is a
fixed linear function of that ledger::

    combined = w_att*att + w_ctc*ctc + w_lm*lm + w_ilm*ilm + length_penalty*len

with ``w_att = 1 - ctc_weight``, ``w_ctc = ctc_weight``, ``w_lm = lambda_lm``
and ``w_ilm = -(1 - ctc_weight)*lambda_ilm`` when the ILM is subtracted from
the attention branch only (default) or ``-lambda_ilm`` when it is subtracted
from the joint score.  Scores are accumulated one label at a time.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from ilmfusion.ctc import CtcPrefixScorer, CtcState, ctc_log_likelihood
from ilmfusion.ilme import IlmParams, ilm_step_batch
from ilmfusion.models import (
    AsrModel,
    EncoderOutput,
    LmModel,
    ctc_log_posteriors,
    decoder_sequence_logprobs,
    decoder_step_batch,
    encode,
    lm_sequence_logprobs,
    lm_step_batch,
)


class DecodeError(ValueError):
    pass


class IlmTarget(str, Enum):
    ATTENTION_ONLY = "attention_only"
    JOINT = "joint"


@dataclass
class FusionConfig:
    lambda_lm: float = 0.0
    lambda_ilm: float = 0.0
    ctc_weight: float = 0.4
    ilm_target: IlmTarget = IlmTarget.ATTENTION_ONLY
    beam_size: int = 4
    max_len_ratio: float = 1.0
    length_penalty: float = 0.0

    def __post_init__(self):
        self.ilm_target = IlmTarget(self.ilm_target)
        for key in ("lambda_lm", "lambda_ilm", "ctc_weight", "max_len_ratio", "length_penalty"):
            if not math.isfinite(getattr(self, key)):
                raise DecodeError(f"{key} must be finite")
        if self.lambda_lm < 0 or self.lambda_ilm < 0:
            raise DecodeError("fusion weights must be non-negative")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise DecodeError("ctc_weight must lie in [0, 1]")
        if self.beam_size < 1:
            raise DecodeError("beam_size must be >= 1")
        if self.max_len_ratio <= 0:
            raise DecodeError("max_len_ratio must be positive")

    @property
    def weights(self) -> dict:
        g = self.ctc_weight
        w_ilm = -(1.0 - g) * self.lambda_ilm if self.ilm_target is IlmTarget.ATTENTION_ONLY else -self.lambda_ilm
        return {"att": 1.0 - g, "ctc": g, "lm": self.lambda_lm, "ilm": w_ilm}

    def combine(self, att, ctc, lm, ilm, n_tokens) -> float:
        w = self.weights
        total = self.length_penalty * n_tokens
        for key, v in (("att", att), ("ctc", ctc), ("lm", lm), ("ilm", ilm)):
            if w[key] != 0.0:
                total = total + w[key] * v
        return total


@dataclass
class Hypothesis:
    tokens: tuple = ()
    att: float = 0.0
    ctc: float = 0.0
    lm: float = 0.0
    ilm: float = 0.0
    combined: float = 0.0
    ctc_state: CtcState | None = field(default=None, repr=False)
    finished: bool = False

    def recompute(self, cfg: FusionConfig) -> float:
        return cfg.combine(self.att, self.ctc, self.lm, self.ilm, len(self.tokens))

    def ledger(self) -> dict:
        return {"att": self.att, "ctc": self.ctc, "lm": self.lm, "ilm": self.ilm, "combined": self.combined}


@dataclass
class DecodeModels:
    asr: AsrModel
    lm: LmModel | None = None
    ilm: IlmParams | None = None


@dataclass
class StepScores:
    candidates: np.ndarray  # token ids, eos first
    combined: np.ndarray  # [B, K] combined increments
    att: np.ndarray
    ctc: np.ndarray
    lm: np.ndarray
    ilm: np.ndarray
    ctc_r: list  # per hypothesis [K, T, 2] forward variables, or None


def _active(cfg: FusionConfig, models: DecodeModels) -> dict:
    w = cfg.weights
    if w["lm"] != 0.0 and models.lm is None:
        raise DecodeError("lambda_lm > 0 needs an external LM")
    if w["ilm"] != 0.0 and models.ilm is None:
        raise DecodeError("lambda_ilm > 0 needs internal-LM parameters")
    return {k: v != 0.0 for k, v in w.items()}


def fused_step_scores(hyps: Sequence[Hypothesis], enc: EncoderOutput, models: DecodeModels,
                      cfg: FusionConfig, ctc_scorer: CtcPrefixScorer | None = None,
                      candidates: np.ndarray | None = None) -> StepScores:
    """Per-candidate increments for equal-length hypotheses.

    Sources with zero weight are not evaluated and contribute zero.
    """
    active = _active(cfg, models)
    vocab = models.asr.vocab
    cand = vocab.output_ids if candidates is None else np.asarray(candidates, dtype=np.int64)
    B, K = len(hyps), cand.size
    lengths = {len(h.tokens) for h in hyps}
    if len(lengths) != 1:
        raise DecodeError("hypotheses must share one prefix length")
    prefixes = np.array([h.tokens for h in hyps], dtype=np.int64).reshape(B, -1)
    zeros = np.zeros((B, K))
    att = decoder_step_batch(models.asr, prefixes, enc)[:, cand] if active["att"] else zeros
    lm = lm_step_batch(models.lm, prefixes)[:, cand] if active["lm"] else zeros
    ilm = ilm_step_batch(models.asr, models.ilm, prefixes)[:, cand] if active["ilm"] else zeros
    ctc = zeros
    rs: list = [None] * B
    if active["ctc"]:
        if ctc_scorer is None:
            ctc_scorer = CtcPrefixScorer(ctc_log_posteriors(models.asr, enc), vocab.blank, vocab.eos)
        ctc = np.zeros((B, K))
        for b, h in enumerate(hyps):
            state = h.ctc_state
            if state is None:
                if h.tokens:
                    raise DecodeError("hypothesis has no CTC state")
                state = ctc_scorer.initial_state()
            psi, r = ctc_scorer.extend(state, cand)
            with np.errstate(invalid="ignore"):
                ctc[b] = np.where(np.isneginf(psi), -np.inf, psi - h.ctc)
            rs[b] = r
    w = cfg.weights
    combined = cfg.length_penalty * (cand != vocab.eos)[None, :].astype(float) + np.zeros((B, K))
    for key, inc in (("att", att), ("ctc", ctc), ("lm", lm), ("ilm", ilm)):
        if active[key]:
            combined = combined + w[key] * inc
    return StepScores(cand, combined, att, ctc, lm, ilm, rs)


def _root(models: DecodeModels, ctc_scorer) -> Hypothesis:
    return Hypothesis(ctc_state=ctc_scorer.initial_state() if ctc_scorer is not None else None)


def _search(enc: EncoderOutput, models: DecodeModels, cfg: FusionConfig, max_len: int,
            nbest: int | None) -> list[Hypothesis]:
    vocab = models.asr.vocab
    active = _active(cfg, models)
    scorer = None
    if active["ctc"]:
        scorer = CtcPrefixScorer(ctc_log_posteriors(models.asr, enc), vocab.blank, vocab.eos)
    live = [_root(models, scorer)]
    ended: list[Hypothesis] = []
    eos_only = np.array([vocab.eos], dtype=np.int64)
    while live:
        at_limit = len(live[0].tokens) >= max_len
        st = fused_step_scores(live, enc, models, cfg, scorer, eos_only if at_limit else None)
        pool = []
        for b, h in enumerate(live):
            for k, tok in enumerate(st.candidates):
                pool.append((-(h.combined + st.combined[b, k]), h.tokens + (int(tok),), b, k))
        # ties resolve in lexicographic token order
        pool.sort(key=lambda x: (x[0], x[1]))
        parents, live = live, []
        for neg, _, b, k in pool[: cfg.beam_size]:
            src = parents[b]
            tok = int(st.candidates[k])
            new = Hypothesis(
                tokens=src.tokens if tok == vocab.eos else src.tokens + (tok,),
                att=src.att + st.att[b, k],
                ctc=src.ctc + st.ctc[b, k],
                lm=src.lm + st.lm[b, k],
                ilm=src.ilm + st.ilm[b, k],
                combined=-neg,
            )
            if tok == vocab.eos:
                new.finished = True
                ended.append(new)
            else:
                if scorer is not None:
                    new.ctc_state = scorer.advance(src.ctc_state, tok, new.ctc, st.ctc_r[b][k])
                live.append(new)
    ended.sort(key=lambda h: (-h.combined, h.tokens))
    return ended[: nbest or cfg.beam_size]


def beam_search(features: np.ndarray, models: DecodeModels, cfg: FusionConfig,
                max_len: int | None = None, nbest: int | None = None) -> list[Hypothesis]:
    """n-best hypotheses (best first) under the configured fusion.

    Hypothesis length is bounded by ``max_len_ratio * T_enc`` and, when
    given, by ``max_len``.
    """
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise DecodeError("empty features")
    enc = encode(models.asr, feats)
    limit = int(math.floor(cfg.max_len_ratio * enc.lengths + 1e-9))
    if max_len is not None:
        limit = min(limit, int(max_len))
    return _search(enc, models, cfg, limit, nbest)


def shallow_fusion_search(features, models: DecodeModels, cfg: FusionConfig, **kw) -> list[Hypothesis]:
    """Attention + CTC + lambda * external LM, with no internal-LM scorer at all."""
    return beam_search(features, replace(models, ilm=None), replace(cfg, lambda_ilm=0.0), **kw)


def baseline_search(features, models: DecodeModels, cfg: FusionConfig, **kw) -> list[Hypothesis]:
    """Joint CTC/attention decoding without any language model."""
    return beam_search(features, DecodeModels(models.asr), replace(cfg, lambda_lm=0.0, lambda_ilm=0.0), **kw)


# ---------------------------------------------------------------------------
# exhaustive oracle


def score_sequences(features, models: DecodeModels, seqs: Sequence[Sequence[int]]) -> list[dict]:
    """Whole-sequence ledgers computed without any prefix machinery.

    The CTC term comes from the forward algorithm on the complete label
    sequence, the others from teacher-forced sequence log-probabilities.
    """
    asr = models.asr
    vocab = asr.vocab
    enc = encode(asr, np.asarray(features))
    seqs = [list(s) for s in seqs]
    post = ctc_log_posteriors(asr, enc)[:, vocab.ctc_ids]
    ctc_index = {int(t): k for k, t in enumerate(vocab.ctc_ids)}
    att = decoder_sequence_logprobs(asr, seqs, enc)
    lm = lm_sequence_logprobs(models.lm, seqs) if models.lm is not None else np.zeros(len(seqs))
    if models.ilm is not None:
        ilm = decoder_sequence_logprobs(asr, seqs, None, models.ilm.kind, models.ilm)
    else:
        ilm = np.zeros(len(seqs))
    out = []
    for i, s in enumerate(seqs):
        ctc = ctc_log_likelihood(post, [ctc_index[t] for t in s], blank=0)
        out.append({"tokens": tuple(s), "att": float(att[i]), "ctc": ctc, "lm": float(lm[i]), "ilm": float(ilm[i])})
    return out


def all_sequences(n_tokens_ids: Sequence[int], max_len: int):
    for L in range(max_len + 1):
        yield from itertools.product(n_tokens_ids, repeat=L)


def exhaustive_search(features, models: DecodeModels, cfg: FusionConfig, max_len: int,
                      budget: int = 10**6) -> tuple[tuple, float]:
    """Argmax of the fused sequence score over every sequence up to ``max_len``."""
    ids = [int(t) for t in models.asr.vocab.token_ids]
    total = sum(len(ids) ** L for L in range(max_len + 1))
    if len(ids) ** max_len > budget or total > 2 * budget:
        raise DecodeError(f"{total} sequences exceed the enumeration budget")
    _active(cfg, models)
    ledgers = score_sequences(features, models, list(all_sequences(ids, max_len)))
    best = None
    for led in ledgers:
        score = cfg.combine(led["att"], led["ctc"], led["lm"], led["ilm"], len(led["tokens"]))
        key = (-score, led["tokens"])
        if best is None or key < best[0]:
            best = (key, led["tokens"], score)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# corpus-level decoding


def _record(utt_id, hyps, vocab) -> dict:
    return {
        "utt_id": utt_id,
        "nbest": [
            {"tokens": vocab.decode(h.tokens), "text": vocab.render(h.tokens), "att": float(h.att),
             "ctc": float(h.ctc), "lm": float(h.lm), "ilm": float(h.ilm), "combined": float(h.combined)}
            for h in hyps
        ],
    }


def _decode_one(args):
    utt, models, cfg, shallow = args
    fn = shallow_fusion_search if shallow else beam_search
    return _record(utt.utt_id, fn(utt.features, models, cfg), models.asr.vocab)


def decode_utterances(utts, models: DecodeModels, cfg: FusionConfig, jobs: int = 1,
                      shallow: bool = False) -> list[dict]:
    """Decode records in utt_id order; ``jobs > 1`` spreads utterances over processes."""
    work = [(u, models, cfg, shallow) for u in sorted(utts, key=lambda u: u.utt_id)]
    if jobs <= 1 or len(work) <= 1:
        return [_decode_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_decode_one, work, chunksize=max(1, len(work) // (4 * jobs))))
