"""Dataset ingestion, vocabulary and pretrained-embedding handling.

Produces integer-encoded, right-padded token sequences for the encoder.
Corpus and EmbeddingTable are immutable after construction.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"
PAD_INDEX = 0
OOV_INDEX = 1

SPLITS = ("train", "validation", "test")

# accepted aliases for split directories / file stems on disk
_SPLIT_ALIASES = {
    "train": "train",
    "valid": "validation",
    "validation": "validation",
    "dev": "validation",
    "test": "test",
}

_PUNCT_RE = re.compile(r"([^\w\s])")


class CorpusParseError(ValueError):
    """Malformed dataset record; message names the file and line."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, then whitespace-split."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    label: str
    split: str

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"empty utterance in split {self.split!r}")
        if not self.label:
            raise ValueError(f"utterance without label in split {self.split!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    classes: tuple[str, ...]
    max_len: int

    def __post_init__(self):
        known = set(self.classes)
        for u in self.utterances:
            if u.label not in known:
                raise ValueError(f"label {u.label!r} not in corpus class set")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")

    def split_indices(self, split: str) -> list[int]:
        return [i for i, u in enumerate(self.utterances) if u.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for u in self.utterances:
            counts[u.split] += 1
        return counts

    def class_train_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for u in self.utterances:
            if u.split == "train":
                counts[u.label] += 1
        return counts

    def subset(self, classes: tuple[str, ...] | list[str],
               splits: tuple[str, ...] = SPLITS) -> "Corpus":
        """Corpus restricted to the given classes and splits; max_len is kept."""
        keep = set(classes)
        kept = tuple(u for u in self.utterances
                     if u.label in keep and u.split in splits)
        return Corpus(kept, tuple(sorted(keep)), self.max_len)


def _build_corpus(records: list[tuple[list[str], str, str]],
                  seen_splits: set[str], max_len: int | None) -> Corpus:
    utterances = tuple(Utterance(tuple(toks), label, split)
                       for toks, label, split in records)
    if not utterances:
        raise ValueError("dataset contains no utterances")
    for split in seen_splits:
        if not any(u.split == split for u in utterances):
            raise ValueError(f"split {split!r} is present but empty")
    if not any(u.split == "train" for u in utterances):
        raise ValueError("dataset has no training split")
    classes = tuple(sorted({u.label for u in utterances}))
    if max_len is None:
        max_len = max(len(u.tokens) for u in utterances if u.split == "train")
    return Corpus(utterances, classes, max_len)


def _resolve_split_name(name: str) -> str | None:
    return _SPLIT_ALIASES.get(name.lower())


def _load_snips_dir(root: Path):
    """One directory per split, one text file per intent, one utterance per line."""
    records = []
    seen = set()
    for entry in sorted(root.iterdir()):
        split = _resolve_split_name(entry.name) if entry.is_dir() else None
        if split is None:
            continue
        seen.add(split)
        for intent_file in sorted(entry.iterdir()):
            label = intent_file.stem
            with open(intent_file, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    tokens = tokenize(line)
                    if not tokens:
                        raise CorpusParseError(
                            f"{intent_file}:{lineno}: utterance has no tokens")
                    records.append((tokens, label, split))
    return records, seen


def _load_delimited(root: Path):
    """Per-split delimited files with text<TAB>label columns."""
    records = []
    seen = set()
    for entry in sorted(root.iterdir()):
        if not entry.is_file():
            continue
        split = _resolve_split_name(entry.stem)
        if split is None:
            continue
        seen.add(split)
        with open(entry, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                    raise CorpusParseError(
                        f"{entry}:{lineno}: expected text<TAB>label, got {line!r}")
                tokens = tokenize(parts[0])
                if not tokens:
                    raise CorpusParseError(f"{entry}:{lineno}: utterance has no tokens")
                records.append((tokens, parts[1].strip(), split))
    return records, seen


def _load_atis_dir(root: Path):
    """IOB-style files: words<TAB>slot tags + intent; slot columns are ignored."""
    records = []
    seen = set()
    for entry in sorted(root.iterdir()):
        if not entry.is_file():
            continue
        split = None
        for alias, canonical in _SPLIT_ALIASES.items():
            if alias in entry.stem.lower():
                split = canonical
                break
        if split is None:
            continue
        seen.add(split)
        with open(entry, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CorpusParseError(
                        f"{entry}:{lineno}: expected words<TAB>tags, got {line!r}")
                words = [w for w in parts[0].split()
                         if w.upper() not in ("BOS", "EOS")]
                tag_fields = parts[1].split()
                if not words or not tag_fields:
                    raise CorpusParseError(
                        f"{entry}:{lineno}: missing words or intent label")
                label = tag_fields[-1]
                tokens = tokenize(" ".join(words))
                records.append((tokens, label, split))
    return records, seen


def load_corpus(path: str | Path, format: str,
                max_len: int | None = None) -> Corpus:
    """Load a labeled utterance dataset.

    format "snips": directory of per-split subdirectories holding one file per
    intent, or of per-split .tsv files (autodetected).  format "atis":
    directory of per-split IOB files, intent taken from the last tag column.
    max_len defaults to the longest training utterance.
    """
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"dataset path does not exist: {root}")
    if format == "snips":
        has_split_dirs = any(e.is_dir() and _resolve_split_name(e.name)
                             for e in root.iterdir())
        records, seen = (_load_snips_dir(root) if has_split_dirs
                         else _load_delimited(root))
    elif format == "atis":
        records, seen = _load_atis_dir(root)
    else:
        raise ValueError(f"unsupported dataset format {format!r}")
    return _build_corpus(records, seen, max_len)


def _oov_vector(word: str, dim: int) -> np.ndarray:
    """Deterministic stand-in vector for a word missing from the pretrained file."""
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.uniform(-0.25, 0.25, size=dim)


@dataclass(frozen=True)
class EmbeddingTable:
    vocab: dict[str, int]
    vectors: np.ndarray  # |vocab| x dim, float64; row PAD_INDEX is all-zero
    pretrained_hits: int = 0
    _hash: str = field(default="", compare=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, word: str) -> int:
        return self.vocab.get(word, OOV_INDEX)

    def inverse_vocab(self) -> dict[int, str]:
        return {i: w for w, i in self.vocab.items()}

    def content_hash(self) -> str:
        """Identity of the vocabulary and its vectors, for checkpoint compatibility."""
        if self._hash:
            return self._hash
        h = hashlib.sha256()
        for word in sorted(self.vocab, key=self.vocab.get):
            h.update(word.encode("utf-8"))
            h.update(b"\x00")
        h.update(np.ascontiguousarray(self.vectors).tobytes())
        object.__setattr__(self, "_hash", h.hexdigest())
        return self._hash


def _read_pretrained(path: str | Path, dim: int) -> dict[str, np.ndarray]:
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values for {word!r}, "
                    f"got {len(values)}")
            vectors[word] = np.array([float(v) for v in values], dtype=np.float64)
    return vectors


def build_embeddings(corpus: Corpus, pretrained_path: str | Path,
                     dim: int) -> EmbeddingTable:
    """Vocabulary over the training split plus pretrained vectors.

    Words present in the pretrained file keep their vector bit-exact; missing
    words get a reproducible seeded vector.  Index 0 is padding (all-zero),
    index 1 the out-of-vocabulary token.
    """
    words = sorted({t for u in corpus.utterances if u.split == "train"
                    for t in u.tokens})
    vocab = {PAD_TOKEN: PAD_INDEX, OOV_TOKEN: OOV_INDEX}
    for w in words:
        vocab[w] = len(vocab)

    pretrained = _read_pretrained(pretrained_path, dim)
    vectors = np.zeros((len(vocab), dim), dtype=np.float64)
    hits = 0
    vectors[OOV_INDEX] = _oov_vector(OOV_TOKEN, dim)
    for w in words:
        vec = pretrained.get(w)
        if vec is not None:
            vectors[vocab[w]] = vec
            hits += 1
        else:
            vectors[vocab[w]] = _oov_vector(w, dim)
    vectors.setflags(write=False)
    return EmbeddingTable(vocab=vocab, vectors=vectors, pretrained_hits=hits)


def encode_batch(corpus: Corpus, table: EmbeddingTable,
                 ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Index matrix (|ids| x max_len, right-padded) plus clipped true lengths."""
    L = corpus.max_len
    batch = np.full((len(ids), L), PAD_INDEX, dtype=np.int64)
    lengths = np.zeros(len(ids), dtype=np.int64)
    for row, idx in enumerate(ids):
        tokens = corpus.utterances[idx].tokens[:L]
        lengths[row] = len(tokens)
        batch[row, :len(tokens)] = [table.index(t) for t in tokens]
    return batch, lengths
