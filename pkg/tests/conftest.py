import numpy as np
import pytest

from ilmfusion.decoding import DecodeModels
from ilmfusion.ilme import attach_ilm
from ilmfusion.models import AsrConfig, AsrModel, LmConfig, LmModel
from ilmfusion.vocab import Vocab

TINY_ASR = dict(d_feat=6, d_model=8, n_heads=2, d_ff=16, n_enc=1, n_dec=2, subsample=2, dropout=0.0)
TINY_LM = dict(d_model=8, n_heads=2, d_ff=16, n_layers=1, dropout=0.0)


def perturb(model, seed, scale=0.5):
    """Spread random-init weights so output distributions are far from uniform."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.values = p.values + scale * rng.standard_normal(p.shape)
    return model


def tiny_models(seed=0, n_char=2, n_word=2, ilm_kind="lscl", spread=True):
    vocab = Vocab.build(n_char, n_word)
    asr = AsrModel(vocab, AsrConfig(**TINY_ASR), seed=seed)
    lm = LmModel(vocab, LmConfig(**TINY_LM), seed=seed + 100)
    if spread:
        perturb(asr, seed + 200)
        perturb(lm, seed + 300)
    ilm = attach_ilm(asr, ilm_kind, hidden=5, seed=seed + 400) if ilm_kind else None
    if ilm is not None and spread:
        for p in ilm.params.values():
            p.values = p.values + 0.5 * np.random.default_rng(seed + 500).standard_normal(p.shape)
    return DecodeModels(asr, lm, ilm)


def tiny_features(seed=0, frames=10, d_feat=6):
    return np.random.default_rng(seed).standard_normal((frames, d_feat))


@pytest.fixture
def models():
    return tiny_models(0)


@pytest.fixture
def feats():
    return tiny_features(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
