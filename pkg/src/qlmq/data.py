"""Deterministic synthetic text corpus and batching utilities.

The corpus generator emits Zipf-weighted words under a first-order word
Markov chain with punctuation structure, so a small autoregressive model
has real statistical signal to learn (byte-level entropy well under the
uniform bound) without any external data or tokenizer dependency.

Byte-level encoding (vocab 256) is the default; a word-level encoding over
the generator's own vocabulary is available for small-vocab experiments.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

BYTE_VOCAB = 256


def synth_corpus(size_bytes: int = 1 << 20, seed: int = 0,
                 n_words: int = 400, succ_count: int = 12,
                 alphabet: str = "ascii", word_len: tuple[int, int] = (2, 10),
                 dirichlet: float = 0.4) -> bytes:
    """Generate ``size_bytes`` of Markov-structured text, deterministically.

    ``alphabet="ascii"`` builds words over lowercase letters; ``"bytes"``
    spreads words over all byte values except the separators, which pushes
    the active vocabulary toward 256 and makes per-token discrimination a
    real part of the task. ``succ_count`` and ``dirichlet`` set the
    branching factor and flatness at word boundaries, the main entropy
    knobs.
    """
    if size_bytes < 64:
        raise ContractError("corpus size must be at least 64 bytes")
    if alphabet not in ("ascii", "bytes"):
        raise ContractError("alphabet must be one of: ascii, bytes")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    if alphabet == "ascii":
        letters = np.frombuffer(string.ascii_lowercase.encode(), dtype=np.uint8)
    else:
        letters = np.setdiff1d(np.arange(256, dtype=np.uint8),
                               np.frombuffer(b" .\n", dtype=np.uint8))
    words = []
    seen = set()
    while len(words) < n_words:
        length = int(rng.integers(word_len[0], word_len[1]))
        w = rng.choice(letters, size=length).tobytes()
        if w not in seen:
            seen.add(w)
            words.append(w)
    # Zipf-ish unigram weights for choosing each word's successor pool
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    unigram = ranks ** -1.1
    unigram /= unigram.sum()
    succ_ids = np.empty((n_words, succ_count), dtype=np.int64)
    succ_cum = np.empty((n_words, succ_count), dtype=np.float64)
    for i in range(n_words):
        ids = rng.choice(n_words, size=succ_count, replace=False, p=unigram)
        probs = rng.dirichlet(np.full(succ_count, dirichlet))
        succ_ids[i] = ids
        succ_cum[i] = probs.cumsum()
    out = bytearray()
    word = int(rng.integers(0, n_words))
    words_in_sentence = 0
    sentence_len = int(rng.integers(8, 15))
    sentences = 0
    while len(out) < size_bytes:
        out += words[word]
        words_in_sentence += 1
        if words_in_sentence >= sentence_len:
            out += b"."
            out += b"\n" if sentences % 6 == 5 else b" "
            sentences += 1
            words_in_sentence = 0
            sentence_len = int(rng.integers(8, 15))
        else:
            out += b" "
        j = int(np.searchsorted(succ_cum[word], rng.random()))
        word = int(succ_ids[word, min(j, succ_count - 1)])
    return bytes(out[:size_bytes])


def encode_bytes(data: bytes) -> np.ndarray:
    """Byte-level token ids; vocabulary size 256."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def word_vocab(data: bytes, max_vocab: int = 2000) -> dict[str, int]:
    """Frequency-ranked word vocabulary with an <unk> entry at index 0."""
    tokens = data.decode("ascii", errors="replace").split()
    uniq, counts = np.unique(np.array(tokens), return_counts=True)
    order = np.argsort(-counts, kind="stable")
    vocab = {"<unk>": 0}
    for w in uniq[order][: max_vocab - 1]:
        vocab[str(w)] = len(vocab)
    return vocab


def encode_words(data: bytes, vocab: dict[str, int]) -> np.ndarray:
    tokens = data.decode("ascii", errors="replace").split()
    return np.array([vocab.get(t, 0) for t in tokens], dtype=np.int64)


def make_windows(ids: np.ndarray, seq_len: int) -> np.ndarray:
    """Fixed non-overlapping [N, seq_len+1] windows (inputs plus next-token targets)."""
    if seq_len < 1:
        raise ContractError("window length must be at least 1")
    n = (ids.size - 1) // seq_len
    if n == 0:
        raise ContractError(
            f"corpus of {ids.size} tokens is too short for windows of {seq_len}"
        )
    out = np.empty((n, seq_len + 1), dtype=np.int64)
    for i in range(n):
        out[i] = ids[i * seq_len: i * seq_len + seq_len + 1]
    return out


def split_windows(windows: np.ndarray, val_frac: float = 0.05,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation split over whole windows."""
    if not 0.0 < val_frac < 1.0:
        raise ContractError("validation fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    order = rng.permutation(windows.shape[0])
    n_val = max(1, int(round(windows.shape[0] * val_frac)))
    return windows[order[n_val:]], windows[order[:n_val]]


@dataclass
class Batch:
    inputs: np.ndarray   # [B, n]
    targets: np.ndarray  # [B, n]


class Batcher:
    """Seeded epoch iterator over shuffled window batches.

    Batch order is a pure function of (seed, epoch); the final short batch
    is dropped so every batch has identical shape.
    """

    def __init__(self, windows: np.ndarray, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if windows.shape[0] < batch_size:
            raise ContractError(
                f"{windows.shape[0]} windows cannot fill a batch of {batch_size}"
            )
        self.windows = windows
        self.batch_size = batch_size
        self.seed = seed

    @property
    def batches_per_epoch(self) -> int:
        return self.windows.shape[0] // self.batch_size

    def epoch(self, epoch_index: int):
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, epoch_index)))
        order = rng.permutation(self.windows.shape[0])
        bs = self.batch_size
        for b in range(self.batches_per_epoch):
            w = self.windows[order[b * bs:(b + 1) * bs]]
            yield Batch(inputs=w[:, :-1], targets=w[:, 1:])
