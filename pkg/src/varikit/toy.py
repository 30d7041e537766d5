"""Deterministic synthetic corpora and tasks standing in for real text data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOCAB_SIZE = 64
SEQ_LEN = 16
MASK_ID = VOCAB_SIZE - 1

# seq_cls symbols; filler tokens never collide with them
SYMBOL_A, SYMBOL_B = 1, 2
# token_tag marker; everything else is filler
MARKER = 1
FILLER_LOW, FILLER_HIGH = 3, MASK_ID  # half-open


@dataclass(frozen=True)
class ToyCorpus:
    tokens: np.ndarray  # (N, n) int64

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ToyTask:
    kind: str
    tokens: np.ndarray  # (N, n) int64
    labels: np.ndarray  # (N,) for seq_cls, (N, n) for token_tag
    n_classes: int

    def __len__(self) -> int:
        return len(self.tokens)

    def majority_baseline(self) -> float:
        counts = np.bincount(self.labels.reshape(-1), minlength=self.n_classes)
        return float(counts.max() / counts.sum())


def make_toy_corpus(seed: int, size: int, seq_len: int = SEQ_LEN, n_motifs: int = 8) -> ToyCorpus:
    """Token streams built from a small bank of recurring motifs plus noise.

    Local structure (repeated 3-4 token motifs) gives neighbouring hidden
    vectors redundant content, which is what sequence compression exploits.
    """
    rng = np.random.default_rng(seed)
    motifs = [rng.integers(FILLER_LOW, FILLER_HIGH, size=rng.integers(3, 5)) for _ in range(n_motifs)]
    out = np.empty((size, seq_len), dtype=np.int64)
    for i in range(size):
        row: list[int] = []
        while len(row) < seq_len:
            if rng.random() < 0.75:
                row.extend(motifs[rng.integers(n_motifs)].tolist())
            else:
                row.append(int(rng.integers(FILLER_LOW, FILLER_HIGH)))
        out[i] = row[:seq_len]
    return ToyCorpus(out)


def _seq_cls(rng: np.random.Generator, size: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(size) % 2
    rng.shuffle(labels)
    tokens = rng.integers(FILLER_LOW, FILLER_HIGH, size=(size, seq_len))
    for i, y in enumerate(labels):
        total = int(rng.integers(3, seq_len // 2 + 1))
        minority = int(rng.integers(0, (total - 1) // 2 + 1))
        majority = total - minority
        pos = rng.permutation(seq_len)[:total]
        win, lose = (SYMBOL_A, SYMBOL_B) if y == 1 else (SYMBOL_B, SYMBOL_A)
        tokens[i, pos[:majority]] = win
        tokens[i, pos[majority:]] = lose
    return tokens, labels.astype(np.int64)


def prefix_parity(row: np.ndarray) -> np.ndarray:
    return (np.cumsum(row == MARKER) % 2).astype(np.int64)


def _token_tag(rng: np.random.Generator, size: int, seq_len: int, marker_rate: float) -> tuple[np.ndarray, np.ndarray]:
    tokens = rng.integers(FILLER_LOW, FILLER_HIGH, size=(size, seq_len))
    tokens[rng.random((size, seq_len)) < marker_rate] = MARKER
    labels = np.stack([prefix_parity(row) for row in tokens])
    return tokens, labels


def make_toy_task(kind: str, seed: int, size: int, seq_len: int = SEQ_LEN,
                  marker_rate: float = 0.1) -> ToyTask:
    """Synthetic labelled task.

    ``seq_cls``: which of two symbols occurs more often (exactly balanced).
    ``token_tag``: per-position parity of the number of markers seen so far,
    which forces token-level information to survive to the output.
    """
    rng = np.random.default_rng(seed)
    if kind == "seq_cls":
        tokens, labels = _seq_cls(rng, size, seq_len)
    elif kind == "token_tag":
        tokens, labels = _token_tag(rng, size, seq_len, marker_rate)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return ToyTask(kind, tokens.astype(np.int64), labels, 2)


def mask_tokens(tokens: np.ndarray, rng: np.random.Generator, rate: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Masked-reconstruction inputs: returns (corrupted tokens, boolean mask)."""
    mask = rng.random(tokens.shape) < rate
    # at least one masked position per row keeps the loss defined
    empty = ~mask.any(axis=1)
    mask[empty, rng.integers(0, tokens.shape[1], size=int(empty.sum()))] = True
    corrupted = np.where(mask, MASK_ID, tokens)
    return corrupted, mask
