"""Internal-LM-subtracting LM fusion for code-switching speech recognition, at toy scale."""

from ilmfusion.decoding import DecodeModels, FusionConfig, IlmTarget, beam_search, shallow_fusion_search
from ilmfusion.evalkit import MixedTokenSeq, corpus_mer, mer, perplexity, tokenize_mixed
from ilmfusion.ilme import attach_ilm, train_ilm
from ilmfusion.models import AsrConfig, AsrModel, CrossAttentionMode, LmConfig, LmModel, Schedule
from ilmfusion.vocab import Vocab

__version__ = "0.1.0"

__all__ = [
    "AsrConfig", "AsrModel", "CrossAttentionMode", "DecodeModels", "FusionConfig", "IlmTarget", "LmConfig",
    "LmModel", "MixedTokenSeq", "Schedule", "Vocab", "attach_ilm", "beam_search", "corpus_mer", "mer",
    "perplexity", "shallow_fusion_search", "tokenize_mixed", "train_ilm",
]
