"""Subword vocabulary, sequence encoding and MLM masking.

The vocabulary is a WordPiece stand-in built from frequency counts: whole
words first, then single-character pieces so unseen words can still be
spelled, then greedy pair merges learned on the words that did not make it
in whole. Encoding uses WordPiece's longest-match-first rule.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import IGNORE_INDEX

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
RESERVED = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)
CONT = "##"

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocab must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        entries = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                tok, idx = line.rsplit("\t", 1)
                entries.append((int(idx), tok))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected token<TAB>id") from None
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: ids are not dense")
        return cls([t for _, t in entries])


def _word_pieces(word: str) -> list[str]:
    return [word[0]] + [CONT + c for c in word[1:]]


def build_vocab(corpus: Iterable[str], target_size: int, min_freq: int = 1) -> Vocab:
    if target_size < len(RESERVED):
        raise ValueError(f"target_size {target_size} < {len(RESERVED)} reserved tokens")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(split_words(text))
    if n_texts == 0:
        raise ValueError("corpus is empty")

    tokens = list(RESERVED)
    have = set(tokens)
    budget = target_size - len(tokens)

    def take(candidates):
        nonlocal budget
        for tok in candidates:
            if budget <= 0:
                return
            if tok not in have:
                tokens.append(tok)
                have.add(tok)
                budget -= 1

    # ties broken lexicographically so the result depends only on the counts
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    take(w for w, c in ranked if c >= min_freq)

    chars: Counter[str] = Counter()
    for w, c in counts.items():
        for piece in _word_pieces(w):
            chars[piece] += c
    take(p for p, _ in sorted(chars.items(), key=lambda kv: (-kv[1], kv[0])))

    # greedy pair merges over the words still spelled in pieces
    rest = {w: _word_pieces(w) for w in counts if w not in have}
    while budget > 0 and rest:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, pieces in rest.items():
            for a, b in zip(pieces, pieces[1:]):
                pairs[(a, b)] += counts[w]
        if not pairs:
            break
        (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = a + b[len(CONT):]
        take([merged])
        for w, pieces in rest.items():
            out, i = [], 0
            while i < len(pieces):
                if i + 1 < len(pieces) and pieces[i] == a and pieces[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            rest[w] = out
        rest = {w: p for w, p in rest.items() if len(p) > 1}
    return Vocab(tokens)


def tokenize_word(word: str, vocab: Vocab) -> list[int]:
    if word in vocab.token_to_id:
        return [vocab.token_to_id[word]]
    ids, start = [], 0
    while start < len(word):
        end = len(word)
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            if piece in vocab.token_to_id:
                ids.append(vocab.token_to_id[piece])
                break
            end -= 1
        else:
            return [UNK_ID]
        start = end
    return ids


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray | None = None

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())


def encode(text: str, vocab: Vocab, max_len: int = 128) -> TokenSequence:
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    body: list[int] = []
    for w in split_words(text):
        body.extend(tokenize_word(w, vocab))
    body = body[: max_len - 2]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1 : 1 + len(body)] = body
    ids[1 + len(body)] = SEP_ID
    mask = np.zeros(max_len, dtype=np.int64)
    mask[: len(body) + 2] = 1
    return TokenSequence(ids, mask)


def decode(seq: TokenSequence, vocab: Vocab) -> str:
    words: list[str] = []
    for i in seq.ids[seq.attention_mask == 1]:
        tok = vocab.id_to_token[int(i)]
        if tok in (CLS, SEP, PAD):
            continue
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)


def eligible_positions(ids: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    return (attention_mask == 1) & (ids != CLS_ID) & (ids != SEP_ID) & (ids != PAD_ID)


def mask_tokens(ids: np.ndarray, attention_mask: np.ndarray, vocab_size: int, rate: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise MLM corruption of an id array of any shape.

    Each eligible position is selected with probability ``rate``; a selected
    position becomes [MASK] 80% of the time, a uniform non-reserved id 10% of
    the time and is left alone otherwise. Returns (corrupted ids, labels) with
    labels holding the original id at selected positions and IGNORE_INDEX
    elsewhere.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    eligible = eligible_positions(ids, attention_mask)
    selected = eligible & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    random_ids = rng.integers(len(RESERVED), vocab_size, size=ids.shape)

    out = ids.copy()
    labels = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    labels[selected] = ids[selected]
    out[selected & (action < 0.8)] = MASK_ID
    to_random = selected & (action >= 0.8) & (action < 0.9)
    out[to_random] = random_ids[to_random]
    return out, labels


def apply_mlm_mask(seq: TokenSequence, vocab: Vocab, rate: float,
                   rng: np.random.Generator) -> TokenSequence:
    ids, labels = mask_tokens(seq.ids, seq.attention_mask, vocab.size, rate, rng)
    return TokenSequence(ids, seq.attention_mask.copy(), labels)


@dataclass
class Batch:
    """Stacked sequences trimmed to the longest real length in the batch."""

    ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray | None = None
    labels: np.ndarray | None = None
    example_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def collate(seqs: Sequence[TokenSequence], labels=None, example_ids=None, trim: bool = True) -> Batch:
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.attention_mask for s in seqs])
    mlm = None
    if seqs and seqs[0].mlm_labels is not None:
        mlm = np.stack([s.mlm_labels for s in seqs])
    if trim:
        width = int(mask.sum(axis=1).max())
        ids, mask = ids[:, :width], mask[:, :width]
        if mlm is not None:
            mlm = mlm[:, :width]
    return Batch(ids, mask, mlm,
                 None if labels is None else np.asarray(labels, dtype=np.int64),
                 list(example_ids or []))
