"""Synthetic code-switched corpora with controllable language mix and domain shift.

Transcripts come from a two-state Markov language process.  Inside a
language state a symbol is drawn from that language's unigram, exponentially
tilted per domain.  Acoustic features are noisy copies of per-symbol base
vectors taken from a shared codebook, ``frames_per_token`` frames per symbol.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ilmfusion.vocab import CHAR_LIKE, WORD_LIKE, Vocab


class CorpusError(ValueError):
    pass


class CorruptDataError(CorpusError):
    pass


class DatasetMismatchError(CorpusError):
    pass


@dataclass
class CorpusSpec:
    name: str = "corpus"
    seed: int = 0
    n_char: int = 12
    n_word: int = 8
    mix: float = 0.83
    persistence: float = 0.5
    domain: int = 1
    tilt: float = 1.0
    n_utts: int = 200
    min_len: int = 3
    max_len: int = 8
    geom_p: float = 0.3
    frames_per_token: int = 4
    noise: float = 1.0
    d_feat: int = 16
    initial: str = "stationary"

    def __post_init__(self):
        for key in ("mix", "persistence", "geom_p"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{key} must lie in [0, 1], got {v}")
        if self.n_char < 2 or self.n_word < 2:
            raise CorpusError("vocab sizes must be >= 2")
        if self.frames_per_token < 1:
            raise CorpusError("frames_per_token must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("need 1 <= min_len <= max_len")
        if self.noise < 0 or self.n_utts < 0:
            raise CorpusError("noise and n_utts must be non-negative")
        if self.initial not in ("stationary", "A", "B"):
            raise CorpusError("initial must be 'stationary', 'A' or 'B'")

    def vocab(self) -> Vocab:
        return Vocab.build(self.n_char, self.n_word)

    def switch_rates(self) -> tuple[float, float]:
        """Probabilities of leaving language A and language B at each step.

        The minority language is left with probability ``1 - persistence``;
        the majority language's rate is scaled so that the stationary share
        of language A equals ``mix``.
        """
        m = self.mix
        top = max(m, 1.0 - m)
        k = 1.0 - self.persistence
        return k * (1.0 - m) / top, k * m / top


PRESETS = {
    # conversational and heavily mixed vs. read and dominated by language A
    "seame_like": dict(mix=0.83, persistence=0.5, domain=1, tilt=1.0),
    "asru_like": dict(mix=0.97, persistence=0.0, domain=2, tilt=-1.0),
    # monolingual utterances of both languages, no intra-utterance switching
    "multilingual": dict(mix=0.53, persistence=1.0, domain=0, tilt=0.0),
}


def preset(key: str, /, **overrides) -> CorpusSpec:
    if key not in PRESETS:
        raise CorpusError(f"unknown preset {key!r}; choose from {sorted(PRESETS)}")
    return CorpusSpec(name=overrides.pop("name", key), **{**PRESETS[key], **overrides})


@dataclass
class Utterance:
    utt_id: str
    tokens: list
    domain: int
    features: np.ndarray | None = None


def language_unigram(n: int, tilt: float) -> np.ndarray:
    """Tilted unigram over one language: even positions weigh exp(+tilt), odd exp(-tilt)."""
    z = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    w = np.exp(tilt * z)
    return w / w.sum()


def expected_unigram(spec: CorpusSpec) -> np.ndarray:
    """Stationary per-position symbol distribution over the full vocabulary."""
    vocab = spec.vocab()
    p = np.zeros(len(vocab))
    p[vocab.ids_of(CHAR_LIKE)] = spec.mix * language_unigram(spec.n_char, spec.tilt)
    p[vocab.ids_of(WORD_LIKE)] = (1.0 - spec.mix) * language_unigram(spec.n_word, spec.tilt)
    return p


def expected_length(spec: CorpusSpec) -> float:
    lengths = np.arange(spec.min_len, spec.max_len + 1)
    q = spec.geom_p
    probs = q * (1 - q) ** (lengths - spec.min_len)
    probs[-1] = (1 - q) ** (spec.max_len - spec.min_len)
    return float((lengths * probs).sum())


def generate_corpus(spec: CorpusSpec) -> list[Utterance]:
    """Transcripts only; see :func:`attach_features` for acoustics."""
    rng = np.random.default_rng(spec.seed)
    vocab = spec.vocab()
    langs = [vocab.ids_of(CHAR_LIKE), vocab.ids_of(WORD_LIKE)]
    unis = [language_unigram(spec.n_char, spec.tilt), language_unigram(spec.n_word, spec.tilt)]
    leave = spec.switch_rates()
    utts = []
    for i in range(spec.n_utts):
        extra = rng.geometric(spec.geom_p) - 1 if spec.geom_p > 0 else spec.max_len
        n = int(min(spec.min_len + extra, spec.max_len))
        if spec.initial == "stationary":
            state = 0 if rng.random() < spec.mix else 1
        else:
            state = 0 if spec.initial == "A" else 1
        ids = []
        for pos in range(n):
            if pos > 0 and rng.random() < leave[state]:
                state = 1 - state
            ids.append(int(langs[state][rng.choice(len(unis[state]), p=unis[state])]))
        utts.append(Utterance(f"{spec.name}-{spec.seed}-{i:05d}", vocab.decode(ids), spec.domain))
    return utts


# ---------------------------------------------------------------------------
# acoustics


@dataclass
class CodebookSpec:
    seed: int = 0
    d_feat: int = 16
    cluster_mode: str = "within"  # none | within | across
    spread: float = 0.15

    def __post_init__(self):
        if self.cluster_mode not in ("none", "within", "across"):
            raise CorpusError("cluster_mode must be none, within or across")


@dataclass
class Codebook:
    vectors: np.ndarray  # [|vocab|, d_feat]; rows of special ids are unused
    vocab: Vocab
    clusters: list = field(default_factory=list)

    def vector(self, symbol: str) -> np.ndarray:
        idx = self.vocab.index.get(symbol)
        if idx is None or self.vocab.classes[idx] not in (CHAR_LIKE, WORD_LIKE):
            raise CorpusError(f"no codebook entry for {symbol!r}")
        return self.vectors[idx]

    def nearest(self, frames: np.ndarray) -> list[str]:
        ids = self.vocab.token_ids
        d = ((frames[:, None, :] - self.vectors[ids][None]) ** 2).sum(-1)
        return [self.vocab.symbols[ids[k]] for k in d.argmin(axis=1)]


def make_codebook(vocab: Vocab, spec: CodebookSpec | None = None) -> Codebook:
    """Per-symbol base vectors; members of a cluster sit ``spread`` apart per dim.

    ``within`` pairs neighbouring symbols of the same language (2j, 2j+1),
    whose unigram weights are tilted in opposite directions; ``across``
    pairs the k-th symbols of the two languages.
    """
    spec = spec or CodebookSpec()
    rng = np.random.default_rng(spec.seed)
    a, b = list(vocab.ids_of(CHAR_LIKE)), list(vocab.ids_of(WORD_LIKE))
    if spec.cluster_mode == "none":
        clusters = [[t] for t in a + b]
    elif spec.cluster_mode == "within":
        clusters = [lang[i:i + 2] for lang in (a, b) for i in range(0, len(lang), 2)]
    else:
        k = min(len(a), len(b))
        clusters = [[a[i], b[i]] for i in range(k)] + [[t] for t in a[k:] + b[k:]]
    vec = np.zeros((len(vocab), spec.d_feat))
    for members in clusters:
        centre = rng.normal(0.0, 1.0, spec.d_feat)
        for t in members:
            offset = rng.normal(0.0, spec.spread, spec.d_feat) if len(members) > 1 else 0.0
            vec[t] = centre + offset
    return Codebook(vectors=vec.astype(np.float32).astype(np.float64), vocab=vocab,
                    clusters=[[int(t) for t in c] for c in clusters])


def synthesize_features(tokens, spec: CorpusSpec, codebook: Codebook, rng=None) -> np.ndarray:
    """``frames_per_token`` noisy copies of each symbol's base vector, in order."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    base = np.stack([codebook.vector(s) for s in tokens]) if tokens else np.zeros((0, codebook.vectors.shape[1]))
    frames = np.repeat(base, spec.frames_per_token, axis=0)
    if spec.noise > 0:
        frames = frames + rng.normal(0.0, spec.noise, frames.shape)
    return frames.astype(np.float32)


def attach_features(utts: list[Utterance], spec: CorpusSpec, codebook: Codebook) -> list[Utterance]:
    rng = np.random.default_rng([spec.seed, 0xFEA7])
    return [replace(u, features=synthesize_features(u.tokens, spec, codebook, rng)) for u in utts]


def build_dataset(spec: CorpusSpec, codebook: Codebook) -> list[Utterance]:
    return attach_features(generate_corpus(spec), spec, codebook)


# ---------------------------------------------------------------------------
# LM text sets


TEXT_SETS = {
    "LM1": (("seame_like",), False),
    "LM2": (("seame_like",), True),
    "LM3": (("asru_like",), False),
    "LM4": (("asru_like",), True),
    "LM5": (("seame_like", "asru_like"), False),
    "LM6": (("seame_like", "asru_like"), True),
}


def text_set(name: str, n_utts: int = 400, seed: int = 0, extra_factor: int = 3, **overrides) -> list[list[str]]:
    """Token sequences for one of the six external-LM text sets.

    Small sets are in-domain transcripts; ``+extra`` sets add
    ``extra_factor`` times as much monolingual text of the same domains.
    """
    if name not in TEXT_SETS:
        raise CorpusError(f"unknown text set {name!r}")
    domains, extra = TEXT_SETS[name]
    out: list[list[str]] = []
    for k, dom in enumerate(domains):
        spec = preset(dom, name=f"{name}-{dom}", seed=seed * 101 + k, n_utts=n_utts, **overrides)
        out += [u.tokens for u in generate_corpus(spec)]
        if extra:
            mono = replace(spec, name=f"{name}-{dom}-extra", seed=spec.seed + 7919,
                           n_utts=extra_factor * n_utts, persistence=1.0)
            out += [u.tokens for u in generate_corpus(mono)]
    return out


# ---------------------------------------------------------------------------
# persistence

_FEAT_MAGIC = b"ILMFEAT1"
_FEAT_VERSION = 1
_HEADER = struct.Struct("<8sIII16s")
_ENTRY = struct.Struct("<QI")


def save_transcripts(path, utts: list[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(json.dumps({"utt_id": u.utt_id, "tokens": list(u.tokens), "domain": u.domain},
                                ensure_ascii=False) + "\n")


def load_transcripts(path) -> list[Utterance]:
    utts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                utts.append(Utterance(r["utt_id"], list(r["tokens"]), int(r["domain"])))
    return utts


def save_features(path, utts: list[Utterance], vocab: Vocab) -> None:
    """Header, per-utterance (frame offset, frame count) table, float32 LE frames."""
    d = utts[0].features.shape[1] if utts else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_FEAT_MAGIC, _FEAT_VERSION, d, len(utts), vocab.hash().encode("ascii")))
        off = 0
        for u in utts:
            fh.write(_ENTRY.pack(off, u.features.shape[0]))
            off += u.features.shape[0]
        for u in utts:
            fh.write(np.asarray(u.features, dtype="<f4").tobytes(order="C"))


def load_features(path, vocab: Vocab) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptDataError(f"{path}: truncated header")
    magic, version, d, n, vhash = _HEADER.unpack_from(data, 0)
    if magic != _FEAT_MAGIC:
        raise CorruptDataError(f"{path}: bad magic")
    if version != _FEAT_VERSION:
        raise DatasetMismatchError(f"{path}: feature file version {version}, expected {_FEAT_VERSION}")
    if vhash.decode("ascii") != vocab.hash():
        raise DatasetMismatchError(f"{path}: vocab hash {vhash.decode()} does not match {vocab.hash()}")
    pos = _HEADER.size
    table_end = pos + n * _ENTRY.size
    if len(data) < table_end:
        raise CorruptDataError(f"{path}: truncated offset table")
    entries = [_ENTRY.unpack_from(data, pos + k * _ENTRY.size) for k in range(n)]
    total = sum(c for _, c in entries)
    if len(data) != table_end + 4 * d * total:
        raise CorruptDataError(f"{path}: expected {table_end + 4 * d * total} bytes, found {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=table_end).reshape(total, d) if d else np.zeros((0, 0))
    return [frames[o:o + c].astype(np.float32) for o, c in entries]


def save_dataset(directory, name: str, utts: list[Utterance], vocab: Vocab) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_transcripts(directory / f"{name}.jsonl", utts)
    if utts and utts[0].features is not None:
        save_features(directory / f"{name}.feats", utts, vocab)


def load_dataset(directory, name: str, vocab: Vocab) -> list[Utterance]:
    directory = Path(directory)
    utts = load_transcripts(directory / f"{name}.jsonl")
    fpath = directory / f"{name}.feats"
    if fpath.exists():
        feats = load_features(fpath, vocab)
        if len(feats) != len(utts):
            raise DatasetMismatchError(f"{fpath}: {len(feats)} feature entries for {len(utts)} transcripts")
        utts = [replace(u, features=f) for u, f in zip(utts, feats)]
    return utts


def save_text(path, seqs, domain: int = -1, prefix: str = "text") -> None:
    save_transcripts(path, [Utterance(f"{prefix}-{i:06d}", list(s), domain) for i, s in enumerate(seqs)])


def load_text(path) -> list[list[str]]:
    return [u.tokens for u in load_transcripts(path)]


def corpus_hash(utts: list[Utterance]) -> str:
    h = hashlib.sha256()
    for u in utts:
        h.update(json.dumps([u.utt_id, list(u.tokens), u.domain], ensure_ascii=False).encode("utf-8"))
        if u.features is not None:
            h.update(np.asarray(u.features, dtype="<f4").tobytes())
    return h.hexdigest()


def spec_to_dict(spec) -> dict:
    return asdict(spec)
