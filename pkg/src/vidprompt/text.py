"""Tokenisation, prompt-vector injection, and text encoding.

A toy closed vocabulary (whitespace + hyphen subwords) replaces a learned BPE
scheme; the embedding table and text-encoder weights are frozen, only the
prompt bank trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Parameter, Tensor

DEFAULT_TOKEN_BUDGET = 77

START_TOKEN = "<start>"
END_TOKEN = "<end>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
_SPECIALS = (START_TOKEN, END_TOKEN, PAD_TOKEN, UNK_TOKEN)


class Vocabulary:
    """Dense subword-id mapping plus a frozen embedding table."""

    def __init__(self, subwords: list[str], width: int,
                 rng: np.random.Generator | None = None,
                 dtype=ag.DEFAULT_DTYPE,
                 embedding: np.ndarray | None = None):
        words = list(_SPECIALS) + [w for w in subwords if w not in _SPECIALS]
        if len(set(words)) != len(words):
            raise ValueError("duplicate subwords in vocabulary")
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}
        self.start_id = self.ids[START_TOKEN]
        self.end_id = self.ids[END_TOKEN]
        self.pad_id = self.ids[PAD_TOKEN]
        self.unk_id = self.ids[UNK_TOKEN]
        if embedding is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            embedding = rng.normal(0.0, 0.02, size=(len(words), width)).astype(dtype)
        if embedding.shape != (len(words), width):
            raise ValueError("embedding table shape mismatch")
        self.embedding = Parameter("vocab.embedding", np.asarray(embedding, dtype=dtype),
                                   trainable=False)

    def __len__(self):
        return len(self.words)

    @property
    def width(self) -> int:
        return self.embedding.data.shape[1]

    def save_words(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, w in enumerate(self.words):
                fh.write(f"{i}\t{w}\n")

    @classmethod
    def load_words(cls, path, width, rng=None, dtype=ag.DEFAULT_DTYPE):
        words = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                idx, word = line.rstrip("\n").split("\t", 1)
                assert int(idx) == len(words), "vocabulary file out of order"
                words.append(word)
        subwords = [w for w in words if w not in _SPECIALS]
        return cls(subwords, width, rng=rng, dtype=dtype)


@dataclass
class TokenSequence:
    ids: list[int]

    def __len__(self):
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Whitespace split, falling back to hyphen subwords, then <unk>."""
    if not text or not text.strip():
        raise ValueError("cannot tokenize empty text")
    ids: list[int] = []
    for word in text.lower().split():
        if word in vocab.ids:
            ids.append(vocab.ids[word])
        else:
            parts = word.split("-")
            if len(parts) > 1 and all(p in vocab.ids for p in parts):
                ids.extend(vocab.ids[p] for p in parts)
            else:
                ids.append(vocab.unk_id)
    return TokenSequence(ids)


class PromptBank:
    """2k shared learnable vectors: k prepended, k appended around the text.

    One bank per task head; the same vectors serve every category or query.
    """

    def __init__(self, k: int, width: int, rng: np.random.Generator | None = None,
                 dtype=ag.DEFAULT_DTYPE, name: str = "prompt.bank"):
        if k < 0:
            raise ValueError("prompt count k must be >= 0")
        self.k = k
        rng = rng if rng is not None else np.random.default_rng(0)
        data = rng.normal(0.0, nn.TRAINABLE_INIT_STD, size=(2 * k, width)).astype(dtype)
        self.vectors = Parameter(name, data, trainable=True)

    @property
    def pattern(self) -> str:
        return f"{self.k}+X+{self.k}"


class TokenBudgetError(ValueError):
    pass


def truncate_to_budget(tokens: TokenSequence, k: int, budget: int) -> TokenSequence:
    """Keep the first (budget - 2k - 2) content tokens; the prompt pattern and
    start/end markers are never dropped."""
    keep = budget - 2 * k - 2
    if keep < 1:
        raise TokenBudgetError(
            f"budget {budget} cannot fit {2 * k} prompt vectors plus start/end "
            f"and at least one content token (needs >= {2 * k + 3})")
    if len(tokens.ids) <= keep:
        return tokens
    return TokenSequence(tokens.ids[:keep])


def inject_prompts(tokens: TokenSequence, bank: PromptBank, vocab: Vocabulary,
                   budget: int = DEFAULT_TOKEN_BUDGET) -> Tensor:
    """[start, a_1..a_k, content embeddings, a_{k+1}..a_{2k}, end] as one
    (2k + len + 2) x D sequence; prompt slots stay tape-connected to the bank."""
    k = bank.k
    tokens = truncate_to_budget(tokens, k, budget)
    total = 2 * k + len(tokens.ids) + 2
    if total > budget:
        raise TokenBudgetError(f"sequence of {total} exceeds budget {budget}")
    emb = vocab.embedding.value
    parts = [ag.take_rows(emb, [vocab.start_id])]
    if k > 0:
        parts.append(ag.slice_rows(bank.vectors.value, 0, k))
    if tokens.ids:
        parts.append(ag.take_rows(emb, tokens.ids))
    if k > 0:
        parts.append(ag.slice_rows(bank.vectors.value, k, 2 * k))
    parts.append(ag.take_rows(emb, [vocab.end_id]))
    return ag.concat_rows(parts)


def encode_text(sequence: Tensor, config: nn.TransformerConfig,
                params: dict[str, Parameter], prefix: str = "text") -> Tensor:
    """Run the frozen encoder; the embedding is the output at the end-token
    position (always the last row). Returns a (1, D) tensor."""
    y = nn.transformer_encoder_forward(sequence, config, params, prefix)
    n = y.shape[0]
    return ag.slice_rows(y, n - 1, n)


def generate_classifiers(names: list[str], bank: PromptBank, vocab: Vocabulary,
                         config: nn.TransformerConfig, params: dict[str, Parameter],
                         prefix: str = "text",
                         budget: int = DEFAULT_TOKEN_BUDGET) -> Tensor:
    """One classifier row per category name, all sharing the same bank."""
    if len(set(names)) != len(names):
        raise ValueError("duplicate category names")
    rows = [encode_text(inject_prompts(tokenize(name, vocab), bank, vocab, budget),
                        config, params, prefix)
            for name in names]
    return rows[0] if len(rows) == 1 else ag.concat_rows(rows)


def nearest_subwords(bank: PromptBank, vocab: Vocabulary):
    """For each prompt slot, the vocab entry with smallest cosine distance.

    Returns a list of (slot, subword, distance); a zero prompt vector yields
    (slot, None, None).
    """
    emb = vocab.embedding.data.astype(np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("vocabulary embedding has a zero row")
    unit = emb / norms[:, None]
    out = []
    for slot in range(bank.vectors.data.shape[0]):
        v = bank.vectors.data[slot].astype(np.float64)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            out.append((slot, None, None))
            continue
        dist = 1.0 - unit @ (v / nv)
        best = int(np.argmin(dist))  # argmin takes the lowest id on ties
        out.append((slot, vocab.words[best], float(dist[best])))
    return out
