"""Synthetic corpora for desk-scale experiments.

Two domains with clearly different statistics:

* a natural-language-like corpus of sentences over a Zipf-weighted invented
  vocabulary (word structure, spaces, punctuation), and
* a bracket-grammar "code" corpus of small function definitions (keywords,
  identifiers, nested braces).

Both are deterministic for a fixed seed.
"""

from __future__ import annotations

import numpy as np

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


def _word_pool(rng: np.random.Generator, size: int) -> list[str]:
    pool = set()
    while len(pool) < size:
        syllables = int(rng.integers(1, 4))
        word = "".join(
            _CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
            + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(syllables))
        pool.add(word)
    return sorted(pool)


def ngram_language_docs(seed: int, n_docs: int, sentences_per_doc=(3, 9),
                        words_per_sentence=(4, 10), vocab_words: int = 400) -> list[str]:
    """Sentence-structured documents over a Zipf-weighted synthetic vocabulary.

    The word pool itself derives from ``seed``, so two seeds produce two
    different invented languages. Held-out sets for generalization
    measurements should therefore slice one generated corpus rather than use
    a second seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11CE)))
    words = _word_pool(rng, vocab_words)
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    weights = 1.0 / ranks
    weights /= weights.sum()
    docs = []
    for _ in range(n_docs):
        sentences = []
        for _ in range(int(rng.integers(*sentences_per_doc))):
            n_words = int(rng.integers(*words_per_sentence))
            picks = rng.choice(len(words), size=n_words, p=weights)
            sentence = " ".join(words[int(i)] for i in picks)
            sentences.append(sentence.capitalize() + ".")
        docs.append(" ".join(sentences))
    return docs


def bracket_code_docs(seed: int, n_docs: int, fns_per_doc=(1, 4),
                      stmts_per_fn=(2, 6)) -> list[str]:
    """Small bracket-grammar programs: typed functions with assignments,
    conditionals, and returns over a pool of short identifiers."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    names = [f"{c}{i}" for c in "abcdefgh" for i in range(10)]
    ops = ["+", "-", "*"]

    def ident():
        return names[int(rng.integers(len(names)))]

    def expr():
        if rng.random() < 0.4:
            return f"{ident()} {ops[int(rng.integers(3))]} {int(rng.integers(100))}"
        return f"{ident()} {ops[int(rng.integers(3))]} {ident()}"

    def stmt(indent: str) -> str:
        roll = rng.random()
        if roll < 0.55:
            return f"{indent}let {ident()} = {expr()};"
        if roll < 0.8:
            return (f"{indent}if ({ident()} > {int(rng.integers(50))}) "
                    f"{{ ret {expr()}; }}")
        return f"{indent}ret {expr()};"

    docs = []
    for _ in range(n_docs):
        fns = []
        for _ in range(int(rng.integers(*fns_per_doc))):
            args = ", ".join(ident() for _ in range(int(rng.integers(1, 4))))
            body = "\n".join(stmt("  ") for _ in range(int(rng.integers(*stmts_per_fn))))
            fns.append(f"fn {ident()}({args}) {{\n{body}\n}}")
        docs.append("\n\n".join(fns) + "\n")
    return docs
