"""Toy tokenizer and frozen text encoder with one learnable embedding row.

The encoder is a seeded, randomly initialized 2-layer causal self-attention
stack standing in for a large pretrained text model. Everything in it is
frozen; the only trainable text parameter is the placeholder row, injected
at encode time so gradients reach it and nothing else. Causal masking keeps
the identity of the placeholder word out of earlier token positions, which
is what lets the cross-attention column of the placeholder stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as N

PAD, BOS, EOT, PLACEHOLDER = 0, 1, 2, 3
PLACEHOLDER_SLOT = "{}"

DEFAULT_WORDS = [
    "a", "an", "the", "of", "on", "in", "with", "at", "and",
    "photo", "picture", "image", "rendering", "painting", "style",
    "beach", "snow", "jungle", "street", "city", "mountain", "house",
    "floor", "water", "grass", "forest", "background", "top", "wooden",
    "red", "purple", "green", "blue", "yellow", "shiny", "wet", "small", "large",
    "object", "animal", "thing",
    "toy", "cat", "dog", "duck", "bear", "clock", "boot", "vase", "barn",
    "pot", "bowl", "plush",
]


class VocabularyError(ValueError):
    """Unknown word or malformed placeholder usage in a prompt."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense word-to-id table with the four special ids up front."""

    word_to_id: dict

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls.from_words(DEFAULT_WORDS)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        table = {"<pad>": PAD, "<bos>": BOS, "<eot>": EOT, "<s*>": PLACEHOLDER}
        for w in words:
            if w not in table:
                table[w] = len(table)
        return cls(table)

    @classmethod
    def from_json_dict(cls, mapping: dict) -> "Vocabulary":
        vocab = cls({str(k): int(v) for k, v in mapping.items()})
        ids = sorted(vocab.word_to_id.values())
        if ids != list(range(len(ids))):
            raise VocabularyError("vocabulary ids are not dense in [0, V)")
        return vocab

    def to_json_dict(self) -> dict:
        return dict(self.word_to_id)

    def __len__(self) -> int:
        return len(self.word_to_id)

    def lookup(self, word: str) -> int:
        try:
            return self.word_to_id[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None


@dataclass(frozen=True)
class TokenSequence:
    """Padded prompt ids plus the placeholder and end-of-text positions."""

    ids: tuple
    s_star_index: int
    eot_index: int

    def __post_init__(self):
        i, j = self.s_star_index, self.eot_index
        if not (0 <= i < j < len(self.ids)):
            raise VocabularyError(f"bad token indices i={i}, j={j} for length {len(self.ids)}")
        if self.ids[i] != PLACEHOLDER or self.ids[j] != EOT:
            raise VocabularyError("token indices do not point at the placeholder / EOT ids")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class PlainTokens:
    """Padded ids of a prompt without a placeholder (backbone warm-up, metrics)."""

    ids: tuple
    eot_index: int

    def __len__(self) -> int:
        return len(self.ids)


def _split_prompt(prompt: str) -> list[str]:
    words = prompt.strip().split()
    if not words:
        raise VocabularyError("empty prompt")
    return words


def tokenize(prompt: str, vocab: Vocabulary, context_len: int = 16) -> TokenSequence:
    """Tokenize a prompt containing exactly one "{}" slot."""
    words = _split_prompt(prompt)
    slots = [k for k, w in enumerate(words) if w == PLACEHOLDER_SLOT]
    if len(slots) != 1:
        raise VocabularyError(f"prompt needs exactly one {PLACEHOLDER_SLOT!r} slot, found {len(slots)}")
    ids = [BOS]
    s_star = None
    for word in words:
        if word == PLACEHOLDER_SLOT:
            s_star = len(ids)
            ids.append(PLACEHOLDER)
        else:
            ids.append(vocab.lookup(word.lower()))
    eot = len(ids)
    ids.append(EOT)
    if len(ids) > context_len:
        raise VocabularyError(f"prompt of {len(ids)} tokens exceeds context length {context_len}")
    ids.extend([PAD] * (context_len - len(ids)))
    return TokenSequence(tuple(ids), s_star, eot)


def tokenize_plain(prompt: str, vocab: Vocabulary, context_len: int = 16) -> PlainTokens:
    """Tokenize a prompt with no placeholder slot."""
    words = _split_prompt(prompt)
    if PLACEHOLDER_SLOT in words:
        raise VocabularyError("plain prompts must not contain a placeholder slot")
    ids = [BOS] + [vocab.lookup(w.lower()) for w in words]
    eot = len(ids)
    ids.append(EOT)
    if len(ids) > context_len:
        raise VocabularyError(f"prompt of {len(ids)} tokens exceeds context length {context_len}")
    ids.extend([PAD] * (context_len - len(ids)))
    return PlainTokens(tuple(ids), eot)


@dataclass
class TextConfig:
    d_text: int = 32
    context_len: int = 16
    heads: int = 2
    layers: int = 2
    ff_mult: int = 2

    def __post_init__(self):
        if self.d_text % self.heads:
            raise ValueError(f"d_text {self.d_text} not divisible by {self.heads} heads")


class TextEncoderState:
    """Frozen embedding table + encoder weights, plus the learnable row.

    The placeholder row of the table is *not* used directly; ``encode``
    splices ``s_star`` into that position so the rest of the table can stay
    a plain frozen array.
    """

    NEG = -1e30  # additive key mask; exp() underflows to exactly 0

    def __init__(self, cfg: TextConfig, vocab: Vocabulary, seed: int):
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        rng = np.random.default_rng(seed)
        d, dt = cfg.d_text, N.get_default_dtype()
        self.table = rng.standard_normal((len(vocab), d)).astype(dt) * 0.3
        self.pos = N.const(rng.standard_normal((cfg.context_len, d)).astype(dt) * 0.1)
        self.layers = []
        for _ in range(cfg.layers):
            self.layers.append(
                {
                    "ln1_g": N.ones((d,)), "ln1_b": N.zeros((d,)),
                    "wq": _frozen(rng, (d, d)), "wk": _frozen(rng, (d, d)), "wv": _frozen(rng, (d, d)),
                    "wo": _frozen(rng, (d, d)), "bo": N.zeros((d,)),
                    "ln2_g": N.ones((d,)), "ln2_b": N.zeros((d,)),
                    "w1": _frozen(rng, (d, d * cfg.ff_mult)), "b1": N.zeros((d * cfg.ff_mult,)),
                    "w2": _frozen(rng, (d * cfg.ff_mult, d)), "b2": N.zeros((d,)),
                }
            )
        self.ln_f_g = N.ones((d,))
        self.ln_f_b = N.zeros((d,))
        self.s_star = N.tensor(self.table[PLACEHOLDER].copy(), requires_grad=True)

    # -- placeholder management -----------------------------------------
    def init_placeholder(self, word: str) -> None:
        """Copy a frozen word row into the learnable placeholder row."""
        row = self.table[self.vocab.lookup(word)]
        self.s_star.data[...] = row
        self.s_star.zero_grad()

    def get_placeholder(self) -> np.ndarray:
        return self.s_star.data.copy()

    def set_placeholder(self, values) -> None:
        values = np.asarray(values)
        if values.shape != (self.cfg.d_text,):
            raise ValueError(f"placeholder must have shape ({self.cfg.d_text},), got {values.shape}")
        self.s_star.data[...] = values.astype(self.s_star.data.dtype)

    # -- freeze bookkeeping ----------------------------------------------
    def frozen_parameters(self) -> dict:
        params = {"text.table": self.table, "text.pos": self.pos.data}
        for li, layer in enumerate(self.layers):
            for name, t in layer.items():
                params[f"text.layer{li}.{name}"] = t.data
        params["text.ln_f_g"] = self.ln_f_g.data
        params["text.ln_f_b"] = self.ln_f_b.data
        return params

    # -- encoding ----------------------------------------------------------
    def encode(self, tokens: TokenSequence) -> N.Tensor:
        """Context rows [D_t, d_text] for one prompt; grads reach s_star only."""
        return N.reshape(self.encode_batch([tokens]), (self.cfg.context_len, self.cfg.d_text))

    def encode_batch(self, tokens: list) -> N.Tensor:
        ids = np.stack([np.asarray(t.ids, dtype=np.int64) for t in tokens])
        base = self.table[ids].copy()
        onehot = np.zeros(ids.shape + (1,), dtype=self.table.dtype)
        has_learnable = False
        for b, t in enumerate(tokens):
            if isinstance(t, TokenSequence):
                base[b, t.s_star_index] = 0.0
                onehot[b, t.s_star_index, 0] = 1.0
                has_learnable = True
        x = N.const(base + self.pos.data[None])
        if has_learnable:
            row = N.reshape(self.s_star, (1, self.cfg.d_text))
            x = N.add(x, N.matmul(N.const(onehot), row))
        key_mask = self._causal_key_mask(ids.shape[0], [t.eot_index for t in tokens])
        for layer in self.layers:
            x = self._block(x, layer, key_mask)
        return N.layer_norm(x, self.ln_f_g, self.ln_f_b)

    def encode_plain_batch(self, tokens: list) -> np.ndarray:
        """Frozen-only encode of placeholder-free prompts (no graph)."""
        with N.no_grad():
            return self.encode_batch(tokens).data

    def _causal_key_mask(self, batch: int, eots: list) -> np.ndarray:
        t = self.cfg.context_len
        causal = np.triu(np.full((t, t), self.NEG, dtype=self.table.dtype), k=1)
        mask = np.broadcast_to(causal, (batch, 1, t, t)).copy()
        for b, j in enumerate(eots):
            mask[b, :, :, j + 1 :] = self.NEG  # pads after EOT are never keys
        return mask

    def _block(self, x: N.Tensor, layer: dict, key_mask: np.ndarray) -> N.Tensor:
        cfg = self.cfg
        b, t, d = x.shape
        h = N.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
        q = _split_heads(N.matmul(h, layer["wq"]), cfg.heads)
        k = _split_heads(N.matmul(h, layer["wk"]), cfg.heads)
        v = _split_heads(N.matmul(h, layer["wv"]), cfg.heads)
        scale = 1.0 / np.sqrt(d // cfg.heads)
        mask = N.const(np.broadcast_to(key_mask, (b, cfg.heads, t, t)))
        logits = N.add(N.mul(N.matmul(q, N.transpose(k, (0, 1, 3, 2))), scale), mask)
        att = N.matmul(N.softmax_last(logits), v)
        merged = N.reshape(N.transpose(att, (0, 2, 1, 3)), (b, t, d))
        x = N.add(x, N.add(N.matmul(merged, layer["wo"]), layer["bo"]))
        h2 = N.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
        ff = N.add(N.matmul(N.silu(N.add(N.matmul(h2, layer["w1"]), layer["b1"])), layer["w2"]), layer["b2"])
        return N.add(x, ff)


def _frozen(rng: np.random.Generator, shape) -> N.Tensor:
    std = 1.0 / float(np.sqrt(shape[0]))
    return N.const((rng.standard_normal(shape) * std).astype(N.get_default_dtype()))


def _split_heads(x: N.Tensor, heads: int) -> N.Tensor:
    b, t, d = x.shape
    return N.transpose(N.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))
