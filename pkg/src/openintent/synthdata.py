"""Deterministic benchmark-shaped fixture datasets.

The real intent benchmarks can't be redistributed with this package, so this
module fabricates stand-ins that reproduce their published shape exactly: a
balanced 7-class personal-assistant-style corpus (13,084 / 700 / 700 splits,
11,971 training word types) in the per-intent-file layout, and an imbalanced
18-class flight-domain-style corpus (4,978 / 500 / 893, 938 word types) in
the IOB layout.  A companion pretrained-embedding file gives topic words
correlated vectors, mimicking distributional embeddings.

Utterances mix class-topic words with shared fillers; neighboring classes
share part of their topic vocabulary so held-out classes genuinely overlap
the known ones.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .corpus import tokenize

SNIPS_CLASSES = ("add_list", "book_table", "find_event", "get_weather",
                 "play_media", "rate_item", "search_work")
SNIPS_TRAIN, SNIPS_VAL, SNIPS_TEST = 13_084, 700, 700
SNIPS_VOCAB = 11_971

ATIS_CLASSES = tuple(f"task_{chr(ord('a') + i)}" for i in range(18))
ATIS_TRAIN_COUNTS = (3600, 400, 300, 180, 120, 80, 60, 50, 40, 35,
                     30, 25, 20, 15, 10, 6, 4, 3)          # sums to 4,978
ATIS_VAL, ATIS_TEST = 500, 893
ATIS_VOCAB = 938

_ONSETS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _make_words(rng: np.random.Generator, count: int,
                taken: set[str]) -> list[str]:
    """Unique pronounceable nonce words (2-4 consonant-vowel syllables)."""
    words = []
    while len(words) < count:
        n_syll = int(rng.integers(2, 5))
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))]
                       + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(n_syll))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


class _TopicLexicon:
    """Per-class topic pools with neighbor overlap, shared fillers, rare tail."""

    def __init__(self, rng, n_classes, own_size, shared_size, common_size,
                 filler_size, vocab_target, taken):
        self.fillers = _make_words(rng, filler_size, taken)
        self.common = _make_words(rng, common_size, taken)
        own = [_make_words(rng, own_size, taken) for _ in range(n_classes)]
        shared = [_make_words(rng, shared_size, taken)
                  for _ in range(n_classes)]
        # pool c = own words + blocks shared with both neighbors + domain words
        self.pools = [own[c] + shared[c] + shared[(c - 1) % n_classes]
                      + self.common for c in range(n_classes)]
        self.own, self.shared = own, shared
        core = (filler_size + common_size
                + n_classes * (own_size + shared_size))
        if core >= vocab_target:
            raise ValueError("core lexicon already exceeds the vocab target")
        self.rare = _make_words(rng, vocab_target - core, taken)

    def core_words(self) -> list[str]:
        out = list(self.fillers) + list(self.common)
        for block in self.own + self.shared:
            out.extend(block)
        return out


def _compose(rng, pool, fillers, n_topic_range, n_filler_range) -> list[str]:
    n_topic = int(rng.integers(*n_topic_range))
    n_filler = int(rng.integers(*n_filler_range))
    words = [pool[rng.integers(len(pool))] for _ in range(n_topic)]
    words += [fillers[rng.integers(len(fillers))] for _ in range(n_filler)]
    rng.shuffle(words)
    return words


def _balance(total: int, n: int) -> list[int]:
    base = total // n
    counts = [base] * n
    for i in range(total - base * n):
        counts[i] += 1
    return counts


def _proportional(total: int, weights, minimum: int) -> list[int]:
    weights = np.asarray(weights, dtype=np.float64)
    raw = np.maximum(minimum, np.floor(weights / weights.sum() * total))
    raw = raw.astype(int)
    # distribute the remainder over the largest classes first
    order = np.argsort(-weights)
    i = 0
    while raw.sum() < total:
        raw[order[i % len(raw)]] += 1
        i += 1
    while raw.sum() > total:
        j = order[i % len(raw)]
        if raw[j] > minimum:
            raw[j] -= 1
        i += 1
    return raw.tolist()


def _generate_split(rng, lexicon, counts, n_topic_range, n_filler_range,
                    rare_prob=0.0):
    """One split: list of (class_index, token list)."""
    rows = []
    for c, count in enumerate(counts):
        for _ in range(count):
            words = _compose(rng, lexicon.pools[c], lexicon.fillers,
                             n_topic_range, n_filler_range)
            if rare_prob and rng.random() < rare_prob:
                words.append(lexicon.rare[rng.integers(len(lexicon.rare))])
            rows.append((c, words))
    rng.shuffle(rows)
    return rows


def _patch_vocab(rng, lexicon, train_rows, vocab_target: int) -> None:
    """Make the training vocabulary hit the target exactly.

    Unused core words and the whole rare tail are appended to training
    utterances, one word each, so every allocated word occurs.
    """
    seen = {t for _, words in train_rows for t in words}
    missing = [w for w in lexicon.core_words() + lexicon.rare if w not in seen]
    if len(missing) > len(train_rows):
        raise ValueError("not enough training utterances to place all words")
    slots = rng.choice(len(train_rows), size=len(missing), replace=False)
    for word, slot in zip(missing, slots):
        train_rows[slot][1].append(word)
    vocab = {t for _, words in train_rows for t in words}
    if len(vocab) != vocab_target:
        raise AssertionError(f"vocabulary came out at {len(vocab)}, "
                             f"expected {vocab_target}")


def generate_snips_like(out_dir: str | Path, seed: int = 7) -> dict:
    """Balanced 7-class corpus in the directory-per-split layout."""
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    lexicon = _TopicLexicon(rng, n_classes=7, own_size=200, shared_size=60,
                            common_size=0, filler_size=200,
                            vocab_target=SNIPS_VOCAB, taken=taken)
    train = _generate_split(rng, lexicon, _balance(SNIPS_TRAIN, 7),
                            (2, 5), (2, 7), rare_prob=0.35)
    val = _generate_split(rng, lexicon, _balance(SNIPS_VAL, 7),
                          (2, 5), (2, 7), rare_prob=0.15)
    test = _generate_split(rng, lexicon, _balance(SNIPS_TEST, 7),
                           (2, 5), (2, 7), rare_prob=0.15)
    _patch_vocab(rng, lexicon, train, SNIPS_VOCAB)
    # a few test-only words keep the out-of-vocabulary path honest
    unseen = _make_words(rng, 5, taken)
    for i, word in enumerate(unseen):
        test[i][1].append(word)

    root = Path(out_dir)
    for split, rows in (("train", train), ("valid", val), ("test", test)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        per_class = {c: [] for c in range(7)}
        for c, words in rows:
            per_class[c].append(" ".join(words))
        for c, lines in per_class.items():
            (split_dir / f"{SNIPS_CLASSES[c]}.txt").write_text(
                "\n".join(lines) + "\n", encoding="utf-8")
    return {"classes": SNIPS_CLASSES, "lexicon": lexicon,
            "counts": (SNIPS_TRAIN, SNIPS_VAL, SNIPS_TEST)}


def generate_atis_like(out_dir: str | Path, seed: int = 11) -> dict:
    """Imbalanced 18-class single-domain corpus in the IOB layout."""
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    lexicon = _TopicLexicon(rng, n_classes=18, own_size=20, shared_size=6,
                            common_size=80, filler_size=120,
                            vocab_target=ATIS_VOCAB, taken=taken)
    val_counts = _proportional(ATIS_VAL, ATIS_TRAIN_COUNTS, minimum=0)
    test_counts = _proportional(ATIS_TEST, ATIS_TRAIN_COUNTS, minimum=1)
    train = _generate_split(rng, lexicon, ATIS_TRAIN_COUNTS, (2, 5), (3, 8))
    val = _generate_split(rng, lexicon, val_counts, (2, 5), (3, 8))
    test = _generate_split(rng, lexicon, test_counts, (2, 5), (3, 8))
    _patch_vocab(rng, lexicon, train, ATIS_VOCAB)

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    names = {"train": "fixture.train.w-intent.iob",
             "dev": "fixture.dev.w-intent.iob",
             "test": "fixture.test.w-intent.iob"}
    for split, rows in (("train", train), ("dev", val), ("test", test)):
        lines = []
        for c, words in rows:
            tags = " ".join(["O"] * len(words)) + f" {ATIS_CLASSES[c]}"
            lines.append(f"BOS {' '.join(words)} EOS\t{tags}")
        (root / names[split]).write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")
    return {"classes": ATIS_CLASSES, "lexicon": lexicon,
            "counts": (sum(ATIS_TRAIN_COUNTS), ATIS_VAL, ATIS_TEST)}


def write_embeddings(path: str | Path, lexicons: list, dim: int = 50,
                     seed: int = 3, coverage: float = 0.85) -> int:
    """Pretrained-style embedding file over the fixture vocabularies.

    Words of one topic pool cluster around a class direction, overlap words
    sit between their two classes, fillers and rare words stay diffuse.  A
    fraction of the rare tail is left out of the file on purpose.
    """
    rng = np.random.default_rng(seed)
    entries: list[tuple[str, np.ndarray]] = []

    def noise(scale):
        return rng.standard_normal(dim) * scale / np.sqrt(dim)

    for lexicon in lexicons:
        n_classes = len(lexicon.own)
        axes = rng.standard_normal((n_classes, dim))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        for c in range(n_classes):
            for word in lexicon.own[c]:
                entries.append((word, axes[c] + noise(0.45)))
            mid = axes[c] + axes[(c + 1) % n_classes]
            mid = mid / np.linalg.norm(mid)
            for word in lexicon.shared[c]:
                entries.append((word, mid + noise(0.45)))
        for word in lexicon.common:
            entries.append((word, noise(0.8)))
        for word in lexicon.fillers:
            entries.append((word, noise(0.6)))
        kept = int(len(lexicon.rare) * coverage)
        keep = rng.permutation(len(lexicon.rare))[:kept]
        for i in sorted(keep):
            entries.append((lexicon.rare[i], noise(1.0)))

    with open(path, "w", encoding="utf-8") as fh:
        for word, vec in entries:
            fh.write(word + " " + " ".join(f"{v:.5f}" for v in vec) + "\n")
    return len(entries)


def generate_benchmark(root: str | Path, dim: int = 50, seed: int = 7) -> dict:
    """Write both fixture datasets plus a shared embedding file under root."""
    root = Path(root)
    snips = generate_snips_like(root / "snips", seed=seed)
    atis = generate_atis_like(root / "atis", seed=seed + 4)
    emb_path = root / f"embeddings_{dim}d.txt"
    n_vectors = write_embeddings(emb_path, [snips["lexicon"],
                                            atis["lexicon"]],
                                 dim=dim, seed=seed + 8)
    return {"snips_dir": str(root / "snips"), "atis_dir": str(root / "atis"),
            "embeddings": str(emb_path), "embedding_dim": dim,
            "n_vectors": n_vectors}


def _verify_tokenizer_stability(sample: str) -> None:
    if tokenize(sample) != sample.split():
        raise AssertionError("generated words must be tokenizer-stable")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="generate fixture datasets and embeddings")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--dim", type=int, default=50,
                        help="embedding dimension")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    _verify_tokenizer_stability("bodu kafi lemo")
    info = generate_benchmark(args.out, dim=args.dim, seed=args.seed)
    for key, value in info.items():
        print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
