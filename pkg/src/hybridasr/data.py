"""Vocabulary, synthetic multilingual corpora, feature/transcript files, CER/WER."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPACE = " "
BLANK = "<blank>"
SOS = "<sos>"
EOS = "<eos>"
UNK = "<unk>"
SPECIALS = (BLANK, SOS, EOS, UNK)

FEATS_MAGIC = b"HASRFEAT"
FEATS_VERSION = 1


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Sorted grapheme inventory plus reserved specials.

    Id layout: graphemes ``0..G-1``, ``unk = G``. The ``V = G + 1`` labels are
    shared by both heads. Id ``V`` is the blank in CTC space and the eos in
    attention/LM output space; ``sos = V + 1`` is an input-only symbol.
    """

    graphemes: tuple[str, ...]

    def __post_init__(self):
        if list(self.graphemes) != sorted(set(self.graphemes)):
            raise VocabularyError("graphemes must be unique and sorted")
        for g in self.graphemes:
            if g in SPECIALS:
                raise VocabularyError(f"grapheme collides with special symbol {g!r}")
            if len(g) != 1:
                raise VocabularyError(f"graphemes are single characters, got {g!r}")
        object.__setattr__(self, "_index", {g: i for i, g in enumerate(self.graphemes)})

    @property
    def unk(self) -> int:
        return len(self.graphemes)

    @property
    def n_labels(self) -> int:
        return len(self.graphemes) + 1

    @property
    def blank(self) -> int:
        return self.n_labels

    @property
    def eos(self) -> int:
        return self.n_labels

    @property
    def sos(self) -> int:
        return self.n_labels + 1

    @property
    def n_inputs(self) -> int:
        """Embedding rows: labels, eos, sos."""
        return self.n_labels + 2

    @property
    def space(self) -> int:
        return self._index[SPACE]

    def __len__(self) -> int:
        return self.n_labels

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def encode(self, text: str, allow_unk: bool = False) -> list[int]:
        out = []
        for ch in text:
            idx = self._index.get(ch)
            if idx is None:
                if not allow_unk:
                    raise VocabularyError(f"character {ch!r} not in vocabulary")
                idx = self.unk
            out.append(idx)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        chars = []
        for i in ids:
            i = int(i)
            if i < len(self.graphemes):
                chars.append(self.graphemes[i])
            elif i == self.unk:
                chars.append("?")
        return "".join(chars)

    def to_list(self) -> list[str]:
        return list(self.graphemes)

    @classmethod
    def from_list(cls, graphemes: Sequence[str]) -> "Vocabulary":
        return cls(tuple(graphemes))


def build_vocab(sources: Iterable) -> Vocabulary:
    """Union of graphemes over language specs, corpora, utterances or strings, plus space."""
    symbols: set[str] = {SPACE}
    seen_any = False
    for src in sources:
        seen_any = True
        if isinstance(src, SyntheticLanguageSpec):
            symbols.update(src.inventory)
        elif isinstance(src, Corpus):
            for u in src.all():
                symbols.update(u.transcript)
        elif isinstance(src, Utterance):
            symbols.update(src.transcript)
        elif isinstance(src, str):
            symbols.update(src)
        else:
            for item in src:
                symbols.update(item.transcript if isinstance(item, Utterance) else item)
    if not seen_any:
        raise VocabularyError("build_vocab needs at least one source")
    clash = symbols & set(SPECIALS)
    if clash:
        raise VocabularyError(f"special symbol collision: {sorted(clash)}")
    return Vocabulary(tuple(sorted(symbols)))


# ---------------------------------------------------------------- utterances / corpora


@dataclass
class Utterance:
    id: str
    lang: str
    features: np.ndarray
    transcript: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.id}: features must be (T >= 1, D), got {self.features.shape}")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    lang: str
    train: list[Utterance] = field(default_factory=list)
    dev: list[Utterance] = field(default_factory=list)
    eval: list[Utterance] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        if name not in ("train", "dev", "eval"):
            raise KeyError(name)
        return getattr(self, name)

    def all(self) -> list[Utterance]:
        return self.train + self.dev + self.eval


def split_sizes(n: int) -> tuple[int, int, int]:
    """80/10/10 train/dev/eval."""
    n_dev = n // 10
    n_eval = n // 10
    return n - n_dev - n_eval, n_dev, n_eval


# ---------------------------------------------------------------- synthetic languages


def symbol_embedding(symbol: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic emission vector for a grapheme, shared by every language."""
    rng = np.random.default_rng([seed, zlib.crc32(symbol.encode("utf-8"))])
    return rng.normal(size=dim)


def emission_table(
    symbols: Iterable[str],
    dim: int,
    seed: int,
    confusable: Sequence[Sequence[str]] = (),
    confusable_distance: float = 1.0,
) -> dict[str, np.ndarray]:
    """Emission vectors; the second member of each confusable pair sits near the first."""
    table = {s: symbol_embedding(s, dim, seed) for s in sorted(set(symbols))}
    for a, b in confusable:
        if a not in table or b not in table:
            continue
        direction = symbol_embedding(a + "->" + b, dim, seed + 1)
        direction /= np.linalg.norm(direction)
        table[b] = table[a] + confusable_distance * direction
    return table


@dataclass
class SyntheticLanguageSpec:
    name: str
    inventory: tuple[str, ...]
    embeddings: dict[str, np.ndarray]
    lexicon_size: int = 40
    word_len: tuple[int, int] = (2, 5)
    words_per_utt: tuple[int, int] = (1, 3)
    frames_per_grapheme: tuple[int, int] = (2, 5)
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.inventory = tuple(self.inventory)
        missing = [g for g in (*self.inventory, SPACE) if g not in self.embeddings]
        if missing:
            raise ValueError(f"{self.name}: no emission vector for {missing}")
        if SPACE in self.inventory:
            raise ValueError("space is implicit; leave it out of the inventory")

    @property
    def dim(self) -> int:
        return len(next(iter(self.embeddings.values())))

    def lexicon(self) -> list[str]:
        rng = np.random.default_rng([self.seed, zlib.crc32(self.name.encode("utf-8")), 1])
        words: list[str] = []
        seen: set[str] = set()
        attempts = 0
        while len(words) < self.lexicon_size:
            attempts += 1
            if attempts > 100 * self.lexicon_size:
                raise ValueError(f"{self.name}: cannot draw {self.lexicon_size} distinct words")
            n = int(rng.integers(self.word_len[0], self.word_len[1] + 1))
            w = "".join(self.inventory[int(i)] for i in rng.integers(0, len(self.inventory), size=n))
            if w not in seen:
                seen.add(w)
                words.append(w)
        return words


def render_features(
    text: str, spec: SyntheticLanguageSpec, rng: np.random.Generator
) -> np.ndarray:
    lo, hi = spec.frames_per_grapheme
    frames = []
    for ch in text:
        k = int(rng.integers(lo, hi + 1))
        base = spec.embeddings[ch]
        frames.append(base[None, :] + spec.noise * rng.normal(size=(k, base.size)))
    return np.concatenate(frames, axis=0)


def generate_corpus(spec: SyntheticLanguageSpec, n_utts: int, seed: int) -> Corpus:
    """Sample transcripts from the language's lexicon and render noisy frames."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    words = spec.lexicon()
    rng = np.random.default_rng([seed, zlib.crc32(spec.name.encode("utf-8")), 2])
    utts = []
    for i in range(n_utts):
        n_words = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
        text = SPACE.join(words[int(j)] for j in rng.integers(0, len(words), size=n_words))
        utts.append(Utterance(f"{spec.name}_{i:05d}", spec.name, render_features(text, spec, rng), text))
    n_train, n_dev, _ = split_sizes(n_utts)
    return Corpus(spec.name, utts[:n_train], utts[n_train : n_train + n_dev], utts[n_train + n_dev :])


def subset(utts: Sequence[Utterance], n: int) -> list[Utterance]:
    """First ``n`` utterances (generation order is already random)."""
    if n > len(utts):
        raise ValueError(f"subset of {n} requested from {len(utts)} utterances")
    return list(utts[:n])


# ---------------------------------------------------------------- file formats


def write_features(path: str | Path, utts: Sequence[Utterance]) -> None:
    """Feature archive: magic, version, count, then per utterance
    (u16 id length, id, u16 lang length, lang, u32 T, u32 D, T*D float64), all little-endian."""
    with open(path, "wb") as fh:
        fh.write(FEATS_MAGIC)
        fh.write(struct.pack("<II", FEATS_VERSION, len(utts)))
        for u in utts:
            uid = u.id.encode("utf-8")
            lang = u.lang.encode("utf-8")
            t, d = u.features.shape
            fh.write(struct.pack("<H", len(uid)) + uid)
            fh.write(struct.pack("<H", len(lang)) + lang)
            fh.write(struct.pack("<II", t, d))
            fh.write(np.ascontiguousarray(u.features, dtype="<f8").tobytes())


def read_features(path: str | Path) -> list[tuple[str, str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != FEATS_MAGIC:
        raise ValueError(f"{path}: not a feature archive")
    version, count = struct.unpack_from("<II", data, 8)
    if version != FEATS_VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    off = 16
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        uid = data[off + 2 : off + 2 + n].decode("utf-8")
        off += 2 + n
        (n,) = struct.unpack_from("<H", data, off)
        lang = data[off + 2 : off + 2 + n].decode("utf-8")
        off += 2 + n
        t, d = struct.unpack_from("<II", data, off)
        off += 8
        feats = np.frombuffer(data, dtype="<f8", count=t * d, offset=off).reshape(t, d).astype(np.float64)
        off += 8 * t * d
        out.append((uid, lang, feats))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out


def write_transcripts(path: str | Path, records: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for uid, text in records:
            if "\t" in text or "\n" in text:
                raise ValueError(f"{uid}: transcript contains tab/newline")
            fh.write(f"{uid}\t{text}\n")


def read_transcripts(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            uid, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'id<TAB>transcript'")
            if uid in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {uid}")
            out[uid] = text
    return out


def save_split(directory: Path, split: str, utts: Sequence[Utterance]) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    feats = directory / f"{split}.feats"
    text = directory / f"{split}.txt"
    write_features(feats, utts)
    write_transcripts(text, [(u.id, u.transcript) for u in utts])
    return {"feats": feats.name, "text": text.name, "count": len(utts)}


def load_split(directory: Path, entry: dict) -> list[Utterance]:
    texts = read_transcripts(directory / entry["text"])
    utts = []
    for uid, lang, feats in read_features(directory / entry["feats"]):
        if uid not in texts:
            raise ValueError(f"{uid}: missing transcript")
        utts.append(Utterance(uid, lang, feats, texts[uid]))
    if len(utts) != len(texts):
        raise ValueError(f"{directory}: transcript/feature id mismatch")
    return utts


def save_corpus(root: Path, corpus: Corpus) -> dict:
    lang_dir = Path(root) / corpus.lang
    return {s: save_split(lang_dir, s, corpus.split(s)) for s in ("train", "dev", "eval")}


def load_corpus(root: str | Path, lang: str, manifest: dict | None = None) -> Corpus:
    root = Path(root)
    if manifest is None:
        manifest = read_manifest(root)
    try:
        entries = manifest["languages"][lang]["splits"]
    except KeyError as err:
        raise ValueError(f"language {lang!r} not in manifest") from err
    lang_dir = root / lang
    return Corpus(lang, *(load_split(lang_dir, entries[s]) for s in ("train", "dev", "eval")))


def read_manifest(root: str | Path) -> dict:
    with open(Path(root) / "manifest.json", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------- scoring


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit costs (two-row DP)."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def words(text: Sequence[str] | str) -> list[str]:
    s = text if isinstance(text, str) else "".join(text)
    return [w for w in s.split(SPACE) if w]


def cer(hyp: Sequence[str] | str, ref: Sequence[str] | str) -> float:
    if len(ref) == 0:
        raise ValueError("cer: empty reference")
    return 100.0 * edit_distance(list(hyp), list(ref)) / len(ref)


def wer(hyp: Sequence[str] | str, ref: Sequence[str] | str) -> float:
    ref_words = words(ref)
    if not ref_words:
        raise ValueError("wer: empty reference")
    return 100.0 * edit_distance(words(hyp), ref_words) / len(ref_words)


@dataclass
class ScoreReport:
    metric: str
    errors: int
    ref_len: int
    per_utt: list[tuple[str, int, int]]

    @property
    def rate(self) -> float:
        return 100.0 * self.errors / self.ref_len if self.ref_len else 0.0


def corpus_score(pairs: Iterable[tuple[str, str, str]], metric: str = "cer") -> ScoreReport:
    """Corpus error rate = total edits / total reference length (not a mean of rates)."""
    if metric not in ("cer", "wer"):
        raise ValueError(f"unknown metric {metric!r}")
    split = list if metric == "cer" else words
    total_err = total_ref = 0
    per_utt = []
    for uid, hyp, ref in pairs:
        h, r = split(hyp), split(ref)
        e = edit_distance(h, r)
        total_err += e
        total_ref += len(r)
        per_utt.append((uid, e, len(r)))
    return ScoreReport(metric, total_err, total_ref, per_utt)
