"""The full dual-encoder adaptation model.

A frozen text encoder plus frozen per-frame image encoder, adapted through a
trainable prompt bank and (optionally) a trainable temporal transformer with
learnable position tables. Only the adapters ever receive optimizer updates.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import nn, objectives, text, video
from .autograd import Parameter, Tensor


def seeded_rng(global_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """One generator per (seed, purpose, trial) so replay is exact."""
    return np.random.default_rng([global_seed, zlib.crc32(tag.encode("utf-8")), index])


@dataclass
class ModelConfig:
    width: int = 64
    frame_dim: int = 32
    text_depth: int = 2
    temporal_depth: int = 2      # 0 bypasses the temporal encoder entirely
    heads: int = 4
    mlp_ratio: int = 2
    prompt_k: int = 16
    token_budget: int = text.DEFAULT_TOKEN_BUDGET
    clip_length: int = video.DEFAULT_CLIP_LENGTH
    max_frames: int = 256
    gap_set: list[int] = field(default_factory=lambda: list(video.RECOGNITION_GAP_SET))
    dtype: str = "f32"

    def __post_init__(self):
        if self.prompt_k < 0:
            raise ValueError("prompt_k must be >= 0")
        if self.temporal_depth < 0:
            raise ValueError("temporal_depth must be >= 0")
        if self.token_budget < 2 * self.prompt_k + 3:
            raise ValueError(
                f"token budget {self.token_budget} too small for "
                f"{2 * self.prompt_k} prompt vectors (needs >= {2 * self.prompt_k + 3})")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32


class PromptedVideoModel:
    def __init__(self, config: ModelConfig, vocab_words: list[str], seed: int = 0):
        self.config = config
        dtype = config.np_dtype

        self.vocab = text.Vocabulary(vocab_words, config.width,
                                     rng=seeded_rng(seed, "vocab"), dtype=dtype)
        self.text_config = nn.TransformerConfig(
            depth=config.text_depth, width=config.width, heads=config.heads,
            mlp_ratio=config.mlp_ratio, max_seq_len=config.token_budget)
        self.text_params = nn.init_transformer_params(
            self.text_config, "text", seeded_rng(seed, "text-encoder"),
            trainable=False, dtype=dtype)
        self.image_encoder = video.FrozenImageEncoder(
            config.frame_dim, config.width, seeded_rng(seed, "image-encoder"),
            dtype=dtype)
        self.prompt_bank = text.PromptBank(config.prompt_k, config.width,
                                           rng=seeded_rng(seed, "prompt-bank"),
                                           dtype=dtype)

        if config.temporal_depth > 0:
            self.temporal_config = nn.TransformerConfig(
                depth=config.temporal_depth, width=config.width, heads=config.heads,
                mlp_ratio=config.mlp_ratio, max_seq_len=config.clip_length)
            self.temporal_params = nn.init_transformer_params(
                self.temporal_config, "temporal", seeded_rng(seed, "temporal-encoder"),
                trainable=True, dtype=dtype)
            self.position_table = nn.TemporalPositionTable.create(
                config.max_frames, config.width, config.gap_set,
                seeded_rng(seed, "position-table"), dtype=dtype)
        else:
            self.temporal_config = None
            self.temporal_params = {}
            self.position_table = None

        self._image_pinv: np.ndarray | None = None

    # -- parameter registry -------------------------------------------------

    def parameters(self) -> dict[str, Parameter]:
        params: dict[str, Parameter] = {"vocab.embedding": self.vocab.embedding}
        params.update(self.text_params)
        for p in self.image_encoder.parameters():
            params[p.name] = p
        params[self.prompt_bank.vectors.name] = self.prompt_bank.vectors
        params.update(self.temporal_params)
        if self.position_table is not None:
            for p in self.position_table.parameters():
                params[p.name] = p
        return params

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters().values() if p.trainable]

    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters().values() if not p.trainable]

    # -- text side ----------------------------------------------------------

    def classifiers(self, names: list[str], bank: text.PromptBank | None = None) -> Tensor:
        bank = bank if bank is not None else self.prompt_bank
        return text.generate_classifiers(names, bank, self.vocab, self.text_config,
                                         self.text_params, budget=self.config.token_budget)

    def query_embedding(self, query: str, bank: text.PromptBank | None = None) -> Tensor:
        bank = bank if bank is not None else self.prompt_bank
        seq = text.inject_prompts(text.tokenize(query, self.vocab), bank, self.vocab,
                                  self.config.token_budget)
        return text.encode_text(seq, self.text_config, self.text_params)

    # -- video side ---------------------------------------------------------

    def clip_feature(self, sample: video.VideoSample, indices: list[int],
                     gap: int) -> Tensor:
        """Pooled snippet feature for one sampled clip (trainable through the
        temporal encoder only)."""
        ff = video.encode_frames(sample, indices, self.image_encoder, gap)
        if self.temporal_config is None:
            return video.mean_pool_snippet(Tensor(ff.features))
        dense = video.encode_video(ff, self.position_table, self.temporal_config,
                                   self.temporal_params)
        return video.mean_pool_snippet(dense)

    def sampled_clip_feature(self, sample: video.VideoSample,
                             rng: np.random.Generator) -> Tensor:
        indices, gap = video.sample_frames(sample, self.config.clip_length,
                                           self.config.gap_set, rng)
        return self.clip_feature(sample, indices, gap)

    def proposal_feature(self, sample: video.VideoSample,
                         proposal: video.Proposal) -> Tensor:
        """Dense features over the proposal's frames (subsampled to the clip
        length), temporally encoded, then pooled inside the interval."""
        lo = max(0, int(np.floor(proposal.start)))
        hi = min(sample.frames.shape[0], int(np.ceil(proposal.end)))
        covered = [i for i in range(lo, hi) if proposal.start <= i < proposal.end]
        if not covered:
            raise video.EmptyProposalError(
                f"no frame inside [{proposal.start}, {proposal.end})")
        if len(covered) > self.config.clip_length:
            picks = np.linspace(0, len(covered) - 1, self.config.clip_length)
            covered = [covered[int(round(p))] for p in picks]
        covered = [min(i, self.config.max_frames - 1) for i in covered]
        ff = video.encode_frames(sample, covered, self.image_encoder, gap=1)
        if self.temporal_config is None:
            return video.mean_pool_snippet(Tensor(ff.features))
        dense = video.encode_video(ff, self.position_table, self.temporal_config,
                                   self.temporal_params)
        return video.mean_pool_snippet(dense)

    # -- similarity ---------------------------------------------------------

    def logits(self, pooled: Tensor, classifiers: Tensor) -> Tensor:
        """Cosine similarity rows between pooled features and classifiers."""
        return objectives.similarity_matrix(objectives.l2_normalize(pooled),
                                            objectives.l2_normalize(classifiers))

    # -- synthetic-content hook ----------------------------------------------

    def prototype_for_name(self, name: str) -> np.ndarray:
        """Frame-space direction whose frozen-encoded feature aligns with the
        promptless text embedding of the name *in caption context*.

        Gives synthetic videos a content/label relationship that generalizes
        to unseen categories, standing in for real visual semantics. Anchoring
        on the captioned form rather than the bare name leaves a systematic
        context gap that prompt vectors can close.
        """
        from . import data as datagen
        empty = text.PromptBank(0, self.config.width, name="prompt.anchor",
                                dtype=self.config.np_dtype)
        anchor = self.query_embedding(datagen.pseudo_sentence(name),
                                      bank=empty).data.reshape(-1)
        # every anchor shares a large non-discriminative component (caption
        # template, end token); subtract a fixed reference so the prototype
        # encodes what distinguishes this name
        reference = self.query_embedding(datagen.pseudo_sentence(text.UNK_TOKEN),
                                         bank=empty).data.reshape(-1)
        if self._image_pinv is None:
            self._image_pinv = np.linalg.pinv(
                self.image_encoder.weight.data.astype(np.float64))
        proto = (anchor - reference).astype(np.float64) @ self._image_pinv
        return proto / np.linalg.norm(proto)
