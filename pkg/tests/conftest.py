"""Shared fixtures: tiny hand-built corpora for unit tests and the full
benchmark-shaped fixture datasets for protocol and acceptance tests."""

import numpy as np
import pytest

from openintent import corpus as cp
from openintent import synthdata


def make_embedding_file(path, words, dim, seed=1, skip=()):
    """Whitespace-format pretrained file with seeded random vectors."""
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for w in sorted(words):
            vec = rng.normal(size=dim)
            if w in skip:
                continue
            fh.write(w + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")
    return path


def make_keyword_corpus(class_keywords: dict, n_train=20, n_val=8, n_test=8,
                        seed=0, max_len=None, fillers=("the", "a", "please")):
    """Small corpus whose classes are separable by their keyword pools."""
    rng = np.random.default_rng(seed)
    utts = []
    labels = sorted(class_keywords)
    for split, count in (("train", n_train), ("validation", n_val),
                         ("test", n_test)):
        for i in range(count):
            label = labels[i % len(labels)]
            pool = class_keywords[label]
            toks = [pool[rng.integers(len(pool))]
                    for _ in range(int(rng.integers(2, 5)))]
            toks += [fillers[rng.integers(len(fillers))]
                     for _ in range(int(rng.integers(1, 3)))]
            rng.shuffle(toks)
            utts.append(cp.Utterance(tuple(toks), label, split))
    length = max_len or max(len(u.tokens) for u in utts if u.split == "train")
    return cp.Corpus(tuple(utts), tuple(labels), length)


@pytest.fixture(scope="session")
def toy_corpus():
    return make_keyword_corpus({
        "alarm": ("wake", "alarm", "morning", "clock"),
        "music": ("play", "song", "track", "band"),
    }, n_train=24, n_val=12, n_test=12, seed=3)


@pytest.fixture(scope="session")
def toy_table(toy_corpus, tmp_path_factory):
    words = {t for u in toy_corpus.utterances for t in u.tokens}
    path = tmp_path_factory.mktemp("emb") / "toy_vectors.txt"
    make_embedding_file(path, words, dim=8, seed=11)
    return cp.build_embeddings(toy_corpus, path, 8)


@pytest.fixture(scope="session")
def benchmark_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    info = synthdata.generate_benchmark(root, dim=50, seed=7)
    return info


@pytest.fixture(scope="session")
def snips_corpus(benchmark_dir):
    return cp.load_corpus(benchmark_dir["snips_dir"], "snips")


@pytest.fixture(scope="session")
def snips_table(benchmark_dir, snips_corpus):
    return cp.build_embeddings(snips_corpus, benchmark_dir["embeddings"], 50)


@pytest.fixture(scope="session")
def atis_corpus(benchmark_dir):
    return cp.load_corpus(benchmark_dir["atis_dir"], "atis")


@pytest.fixture(scope="session")
def atis_table(benchmark_dir, atis_corpus):
    return cp.build_embeddings(atis_corpus, benchmark_dir["embeddings"], 50)
