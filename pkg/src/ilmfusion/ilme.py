"""Internal LM estimation by replacing the decoder's cross-attention context.

Two estimators share one parameter set across all decoder blocks:

* OTCL: the context vector is a single learned bias ``b`` (no history).
* LSCL: the context vector is a small two-layer ReLU FFN of the normalised
  decoder state ``x'``, so it follows the label history.

The residual around the cross-attention sublayer is kept in both cases.
Training touches only these parameters; every encoder, decoder and CTC
weight stays bit-identical.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ilmfusion.autodiff import Param, Tape, gradients, relu
from ilmfusion.models import (
    AsrModel,
    CheckpointError,
    CrossAttentionMode,
    ModelError,
    NoamAdam,
    Schedule,
    _attention_nll,
    _decoder_forward,
    _Net,
    _pad_tokens,
    decoder_sequence_logprobs,
    decoder_step_batch,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

NAMESPACE = "ilm."


@dataclass
class IlmParams:
    kind: CrossAttentionMode
    params: dict
    hidden: int | None = None

    def context_vector(self, tape: Tape, x_prime):
        if self.kind is CrossAttentionMode.OTCL:
            return tape.param(self.params["ilm.otcl.b"])
        p = self.params
        h = relu(x_prime @ tape.param(p["ilm.lscl.1.W"]) + tape.param(p["ilm.lscl.1.b"]))
        return h @ tape.param(p["ilm.lscl.2.W"]) + tape.param(p["ilm.lscl.2.b"])

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict:
        return {k: p.values.copy() for k, p in self.params.items()}

    def metadata(self, model: AsrModel) -> dict:
        return {"kind": "ilm", "method": self.kind.value, "hidden": self.hidden, "activation": "relu",
                "d_model": model.config.d_model, "vocab_hash": model.vocab.hash()}

    def save(self, path, model: AsrModel) -> None:
        save_checkpoint(path, self.state_dict(), self.metadata(model))

    @classmethod
    def load(cls, path, model: AsrModel) -> "IlmParams":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "ilm":
            raise CheckpointError(f"{path} is not an ILM checkpoint")
        if meta.get("vocab_hash") != model.vocab.hash() or meta.get("d_model") != model.config.d_model:
            raise CheckpointError(f"{path} does not belong to this ASR model")
        if any(not k.startswith(NAMESPACE) for k in arrays):
            raise CheckpointError(f"{path}: parameters outside the {NAMESPACE!r} namespace")
        ilm = attach_ilm(model, meta["method"], hidden=meta.get("hidden") or 1)
        for k, p in ilm.params.items():
            if arrays[k].shape != p.shape:
                raise CheckpointError(f"{path}: shape mismatch for {k}")
            p.values = arrays[k].copy()
        return ilm


@dataclass
class IlmTrainReport:
    train_ce: list = field(default_factory=list)
    valid_ce: list = field(default_factory=list)
    valid_perplexity: float = float("nan")
    checksum_before: str = ""
    checksum_after: str = ""


def attach_ilm(model: AsrModel, kind, hidden: int = 32, seed: int = 0) -> IlmParams:
    """Fresh estimator parameters for ``model``; the model itself is untouched."""
    kind = CrossAttentionMode(kind)
    d = model.config.d_model
    if kind is CrossAttentionMode.OTCL:
        return IlmParams(kind, {"ilm.otcl.b": Param("ilm.otcl.b", np.zeros(d))})
    if kind is CrossAttentionMode.LSCL:
        if hidden <= 0:
            raise ValueError("LSCL hidden size must be positive")
        rng = np.random.default_rng(seed)
        params = {
            "ilm.lscl.1.W": Param("ilm.lscl.1.W", rng.normal(0.0, 0.02, (d, hidden))),
            "ilm.lscl.1.b": Param("ilm.lscl.1.b", np.zeros(hidden)),
            "ilm.lscl.2.W": Param("ilm.lscl.2.W", rng.normal(0.0, 0.02, (hidden, d))),
            "ilm.lscl.2.b": Param("ilm.lscl.2.b", np.zeros(d)),
        }
        return IlmParams(kind, params, hidden)
    raise ValueError("internal LM estimation needs kind otcl or lscl")


def model_checksum(model: AsrModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].values).tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def frozen(model: AsrModel):
    """Flag every model parameter as non-trainable for the duration."""
    saved = {k: p.trainable for k, p in model.params.items()}
    for p in model.params.values():
        p.trainable = False
    try:
        yield model
    finally:
        for k, p in model.params.items():
            p.trainable = saved[k]


def _ilm_nll(net: _Net, model: AsrModel, ilm: IlmParams, seqs):
    inp, _ = _pad_tokens(seqs, model.vocab.sos, model.vocab.eos)
    logp = _decoder_forward(net, model, inp, None, None, ilm.kind, ilm)
    return _attention_nll(logp, model, seqs), sum(len(s) + 1 for s in seqs)


def ilm_cross_entropy(model: AsrModel, ilm: IlmParams, seqs, batch_size: int = 64) -> float:
    """Mean per-token negative log-likelihood of id sequences under the ILM."""
    tot, n = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        nll, k = _ilm_nll(_Net(Tape(record=False), model.params), model, ilm, seqs[i:i + batch_size])
        tot += float(nll.value)
        n += k
    return tot / n


def train_ilm(model: AsrModel, ilm: IlmParams, transcripts, schedule: Schedule | None = None,
              valid_transcripts=None):
    """Fit the estimator on transcripts with the decoder frozen and no encoder.

    The objective is next-token cross-entropy of the decoder run in the
    estimator's mode.  Dropout is off, so per-epoch losses are exact.
    Returns ``(ilm, IlmTrainReport)``.
    """
    schedule = schedule or Schedule(epochs=20)
    seqs = [model.vocab.encode(t) for t in transcripts]
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ModelError("ILM training needs non-empty transcripts")
    vseqs = [model.vocab.encode(t) for t in valid_transcripts] if valid_transcripts else seqs
    report = IlmTrainReport(checksum_before=model_checksum(model))
    rng = np.random.default_rng(schedule.seed)
    params = list(ilm.params.values())
    opt = NoamAdam(params, model.config.d_model, schedule)
    with frozen(model):
        for epoch in range(1, schedule.epochs + 1):
            order = rng.permutation(len(seqs))
            for i in range(0, len(seqs), schedule.batch_size):
                batch = [seqs[j] for j in order[i:i + schedule.batch_size]]
                tape = Tape()
                nll, k = _ilm_nll(_Net(tape, model.params), model, ilm, batch)
                loss = nll * (1.0 / k)
                grads = gradients(tape, loss, params, strict=True)
                opt.step(grads)
            report.train_ce.append(ilm_cross_entropy(model, ilm, seqs))
            report.valid_ce.append(ilm_cross_entropy(model, ilm, vseqs))
            log.info("ilm %s epoch %d train %.4f valid %.4f", ilm.kind.value, epoch,
                     report.train_ce[-1], report.valid_ce[-1])
    report.valid_perplexity = math.exp(ilm_cross_entropy(model, ilm, vseqs))
    report.checksum_after = model_checksum(model)
    if report.checksum_after != report.checksum_before:
        raise RuntimeError("model parameters changed during ILM training")
    return ilm, report


def _as_ids(model, tokens):
    tokens = list(tokens)
    if tokens and isinstance(tokens[0], str):
        return model.vocab.encode(tokens)
    valid = set(int(t) for t in model.vocab.token_ids)
    for t in tokens:
        if int(t) not in valid:
            raise ModelError(f"token id {t} is not a language symbol")
    return [int(t) for t in tokens]


def ilm_sequence_logprob(model: AsrModel, ilm: IlmParams, tokens) -> float:
    """log P_ILM(tokens + eos); no encoder output is involved."""
    ids = _as_ids(model, tokens)
    return float(decoder_sequence_logprobs(model, [ids], None, ilm.kind, ilm)[0])


def ilm_sequence_logprobs(model: AsrModel, ilm: IlmParams, seqs) -> np.ndarray:
    return decoder_sequence_logprobs(model, [_as_ids(model, s) for s in seqs], None, ilm.kind, ilm)


def ilm_step_batch(model: AsrModel, ilm: IlmParams, prefixes) -> np.ndarray:
    return decoder_step_batch(model, prefixes, None, ilm.kind, ilm)
