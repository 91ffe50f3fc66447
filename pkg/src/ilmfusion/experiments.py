"""End-to-end toy experiments: cross-domain fusion and monolingual-to-CS transfer.

Both runners train an ASR model, an external LM and an LSCL internal LM on
synthetic data, then compare shallow fusion with ILM-subtracting fusion on
code-switched test utterances.  The ILM weight is picked on a validation
split from the same domain as the test set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from ilmfusion import corpus as C
from ilmfusion.decoding import DecodeModels, FusionConfig, beam_search, shallow_fusion_search
from ilmfusion.evalkit import MixedTokenSeq, corpus_mer
from ilmfusion.ilme import attach_ilm, train_ilm
from ilmfusion.models import AsrConfig, AsrModel, LmConfig, LmModel, LossLog, Schedule, train_asr, train_lm

log = logging.getLogger(__name__)

ILM_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
LM_WEIGHTS = {"seame_like": 0.4, "asru_like": 0.1}


@dataclass
class ExperimentConfig:
    """Sizes and weights for one toy run.

    The defaults put the ASR model in a small-data regime without dropout,
    which is where the attention criterion overfits to its training label
    context within a few dozen epochs.
    """

    n_train: int = 150
    n_valid: int = 60
    n_test: int = 100
    n_lm_text: int = 600
    asr_epochs: int = 40
    lm_epochs: int = 20
    ilm_epochs: int = 20
    n_average: int = 5
    batch_size: int = 16
    warmup_steps: int = 200
    lr_factor: float = 0.3
    lambda_lm: float | None = None
    ctc_weight_train: float = 0.3
    ctc_weight_decode: float = 0.4
    beam_size: int = 4
    ilm_method: str = "lscl"
    ilm_hidden: int = 32
    ilm_grid: tuple = ILM_GRID
    noise: float = 1.0
    spread: float = 1.0
    asr: dict = field(default_factory=lambda: {"dropout": 0.0})


@dataclass
class ExperimentResult:
    seed: int
    shallow_mer: float
    ilme_mer: float
    baseline_mer: float
    best_lambda_ilm: float
    sweep: dict
    loss_log: LossLog | None = None
    extra: dict = field(default_factory=dict)


def mer_of(utts, hyps_tokens, vocab) -> float:
    classes = vocab.class_map()
    pairs = [(MixedTokenSeq.from_symbols(u.tokens, classes), MixedTokenSeq.from_symbols(h, classes))
             for u, h in zip(utts, hyps_tokens)]
    return corpus_mer(pairs)


def decode_mer(utts, models: DecodeModels, cfg: FusionConfig, shallow: bool = False) -> float:
    fn = shallow_fusion_search if shallow else beam_search
    hyps = []
    for u in utts:
        best = fn(u.features, models, cfg, nbest=1)
        hyps.append(models.asr.vocab.decode(best[0].tokens) if best else [])
    return mer_of(utts, hyps, models.asr.vocab)


def sweep_ilm_weight(utts, models: DecodeModels, cfg: FusionConfig, grid=ILM_GRID) -> dict:
    """MER for each lambda_ilm in ``grid``; the 0.0 entry is plain shallow fusion."""
    out = {}
    for lam in grid:
        lam = float(lam)
        if lam == 0.0:
            out[lam] = decode_mer(utts, models, replace(cfg, lambda_ilm=0.0), shallow=True)
        else:
            out[lam] = decode_mer(utts, models, replace(cfg, lambda_ilm=lam))
    return out


def pick_lambda(sweep: dict) -> float:
    """Lowest MER; ties go to the smaller weight."""
    return min(sweep, key=lambda k: (sweep[k], k))


def _schedule(cfg: ExperimentConfig, epochs: int, seed: int, n_average: int | None = None) -> Schedule:
    return Schedule(epochs=epochs, batch_size=cfg.batch_size, warmup_steps=cfg.warmup_steps,
                    lr_factor=cfg.lr_factor, seed=seed,
                    n_average=cfg.n_average if n_average is None else n_average)


def _fit_all(cfg, seed, vocab, train, valid, lm_text, lm_valid):
    asr = AsrModel(vocab, AsrConfig(d_feat=train[0].features.shape[1], **cfg.asr), seed=seed)
    asr, loss_log = train_asr(asr, train, valid, _schedule(cfg, cfg.asr_epochs, seed), cfg.ctc_weight_train)
    lm = LmModel(vocab, LmConfig(), seed=seed + 1)
    lm, _ = train_lm(lm, lm_text, _schedule(cfg, cfg.lm_epochs, seed + 1), valid_text=lm_valid)
    ilm = attach_ilm(asr, cfg.ilm_method, hidden=cfg.ilm_hidden, seed=seed + 2)
    ilm, report = train_ilm(asr, ilm, [u.tokens for u in train], _schedule(cfg, cfg.ilm_epochs, seed + 2, 0))
    return DecodeModels(asr, lm, ilm), loss_log, report


def _compare(cfg, seed, models, valid_tgt, test_tgt, loss_log, extra, target_preset):
    lam_lm = LM_WEIGHTS[target_preset] if cfg.lambda_lm is None else cfg.lambda_lm
    fcfg = FusionConfig(lambda_lm=lam_lm, ctc_weight=cfg.ctc_weight_decode, beam_size=cfg.beam_size)
    sweep = sweep_ilm_weight(valid_tgt, models, fcfg, cfg.ilm_grid)
    lam = pick_lambda(sweep)
    shallow = decode_mer(test_tgt, models, fcfg, shallow=True)
    ilme = shallow if lam == 0.0 else decode_mer(test_tgt, models, replace(fcfg, lambda_ilm=lam))
    base = decode_mer(test_tgt, DecodeModels(models.asr), replace(fcfg, lambda_lm=0.0))
    log.info("seed %d: baseline %.4f shallow %.4f ilme %.4f (lambda_ilm %.1f)", seed, base, shallow, ilme, lam)
    return ExperimentResult(seed, shallow, ilme, base, lam, sweep, loss_log, extra)


def run_cross_domain(seed: int, cfg: ExperimentConfig | None = None) -> ExperimentResult:
    """ASR on domain 1, external LM on domain-2 text, test on domain 2."""
    cfg = cfg or ExperimentConfig()
    cb_spec = C.CodebookSpec(seed=seed, cluster_mode="within", spread=cfg.spread)
    src = C.preset("seame_like", seed=seed, noise=cfg.noise)
    tgt = C.preset("asru_like", seed=seed, noise=cfg.noise)
    vocab = src.vocab()
    cb = C.make_codebook(vocab, cb_spec)
    train = C.build_dataset(replace(src, name="train", seed=seed * 10 + 1, n_utts=cfg.n_train), cb)
    valid_src = C.build_dataset(replace(src, name="dev1", seed=seed * 10 + 2, n_utts=cfg.n_valid), cb)
    valid_tgt = C.build_dataset(replace(tgt, name="dev2", seed=seed * 10 + 3, n_utts=cfg.n_valid), cb)
    test_tgt = C.build_dataset(replace(tgt, name="test2", seed=seed * 10 + 4, n_utts=cfg.n_test), cb)
    lm_text = C.text_set("LM4", n_utts=cfg.n_lm_text // 4, seed=seed * 10 + 5, noise=cfg.noise)
    lm_valid = [u.tokens for u in valid_tgt]
    models, loss_log, report = _fit_all(cfg, seed, vocab, train, valid_src, lm_text, lm_valid)
    return _compare(cfg, seed, models, valid_tgt, test_tgt, loss_log, {"ilm_ppl": report.valid_perplexity}, "asru_like")


def run_multilingual(seed: int, cfg: ExperimentConfig | None = None) -> ExperimentResult:
    """ASR on monolingual utterances of both languages, test on code-switched speech.

    The validation split used for the loss log and checkpoint selection is
    code-switched, so the log shows how each criterion generalises to
    switching it never saw in training.
    """
    cfg = cfg or ExperimentConfig()
    cb_spec = C.CodebookSpec(seed=seed, cluster_mode="across", spread=cfg.spread)
    mono = C.preset("multilingual", seed=seed, noise=cfg.noise)
    cs = C.preset("seame_like", seed=seed, noise=cfg.noise, mix=0.6, tilt=0.0)
    vocab = mono.vocab()
    cb = C.make_codebook(vocab, cb_spec)
    train = C.build_dataset(replace(mono, name="mono", seed=seed * 10 + 1, n_utts=cfg.n_train), cb)
    valid_cs = C.build_dataset(replace(cs, name="csdev", seed=seed * 10 + 2, n_utts=cfg.n_valid), cb)
    test_cs = C.build_dataset(replace(cs, name="cstest", seed=seed * 10 + 4, n_utts=cfg.n_test), cb)
    lm_text = [u.tokens for u in C.generate_corpus(replace(cs, name="cstext", seed=seed * 10 + 5,
                                                           n_utts=cfg.n_lm_text))]
    models, loss_log, report = _fit_all(cfg, seed, vocab, train, valid_cs, lm_text, [u.tokens for u in valid_cs])
    return _compare(cfg, seed, models, valid_cs, test_cs, loss_log, {"ilm_ppl": report.valid_perplexity}, "seame_like")
