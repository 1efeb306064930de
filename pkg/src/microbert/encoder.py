"""The MicroBERT encoder: embeddings, post-LN transformer layers, word pooling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import Tensor, ops
from .tokenizer import PAD_ID, EncodedSentence

PREFIX = "encoder"


@dataclass
class EncoderConfig:
    layers: int = 3
    hidden: int = 100
    heads: int = 5
    ffn: Optional[int] = None
    max_positions: int = 512
    vocab_size: int = 8000
    dropout: float = 0.1
    attention_dropout: float = 0.1
    # only used to size reference models such as BERT-base
    type_vocab_size: int = 0
    pooler: bool = False

    def __post_init__(self):
        if self.ffn is None:
            self.ffn = 4 * self.hidden
        if self.layers < 0 or self.hidden <= 0 or self.heads <= 0 or self.vocab_size <= 0:
            raise ValueError(f"invalid encoder config {self}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def micro_config(vocab_size: int = 8000, **overrides) -> EncoderConfig:
    """3 layers, 100 hidden units, 5 heads."""
    return EncoderConfig(**{"layers": 3, "hidden": 100, "heads": 5, "vocab_size": vocab_size, **overrides})


def micro4_config(vocab_size: int = 8000, **overrides) -> EncoderConfig:
    """The roughly 4x larger variant: 6 layers, 200 hidden units, 8 heads."""
    return EncoderConfig(**{"layers": 6, "hidden": 200, "heads": 8, "vocab_size": vocab_size, **overrides})


def bert_base_config() -> EncoderConfig:
    """bert-base-cased as instantiated by a standard BertModel (incl. pooler)."""
    return EncoderConfig(
        layers=12, hidden=768, heads=12, ffn=3072, max_positions=512,
        vocab_size=28996, type_vocab_size=2, pooler=True,
    )


PRESETS = {"micro": micro_config, "micro4": micro4_config}


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form count of embedding + encoder-stack parameters (no task heads)."""
    h, f = config.hidden, config.ffn
    embeddings = (config.vocab_size + config.max_positions + config.type_vocab_size) * h + 2 * h
    attention = 4 * (h * h + h) + 2 * h
    feedforward = (h * f + f) + (f * h + h) + 2 * h
    pooler = h * h + h if config.pooler else 0
    return embeddings + config.layers * (attention + feedforward) + pooler


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden, config.ffn
    shapes: dict[str, tuple[int, ...]] = {
        f"{PREFIX}.embeddings.word.weight": (config.vocab_size, h),
        f"{PREFIX}.embeddings.position.weight": (config.max_positions, h),
    }
    if config.type_vocab_size:
        shapes[f"{PREFIX}.embeddings.type.weight"] = (config.type_vocab_size, h)
    shapes[f"{PREFIX}.embeddings.ln.gamma"] = (h,)
    shapes[f"{PREFIX}.embeddings.ln.beta"] = (h,)
    for layer in range(config.layers):
        p = f"{PREFIX}.layer{layer}"
        for proj in ("query", "key", "value", "output"):
            shapes[f"{p}.attn.{proj}.weight"] = (h, h)
            shapes[f"{p}.attn.{proj}.bias"] = (h,)
        shapes[f"{p}.attn.ln.gamma"] = (h,)
        shapes[f"{p}.attn.ln.beta"] = (h,)
        shapes[f"{p}.ffn.in.weight"] = (h, f)
        shapes[f"{p}.ffn.in.bias"] = (f,)
        shapes[f"{p}.ffn.out.weight"] = (f, h)
        shapes[f"{p}.ffn.out.bias"] = (h,)
        shapes[f"{p}.ffn.ln.gamma"] = (h,)
        shapes[f"{p}.ffn.ln.beta"] = (h,)
    if config.pooler:
        shapes[f"{PREFIX}.pooler.weight"] = (h, h)
        shapes[f"{PREFIX}.pooler.bias"] = (h,)
    return shapes


def init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator, std: float = 0.02) -> Tensor:
    """Normal(0, std) weights, zero biases/betas, unit gammas."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        data = np.ones(shape, dtype=np.float32)
    elif leaf in ("bias", "beta"):
        data = np.zeros(shape, dtype=np.float32)
    else:
        data = (rng.standard_normal(shape) * std).astype(np.float32)
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Batch:
    """Right-padded wordpiece ids plus everything needed to pool to words."""

    sentences: list[EncodedSentence]
    ids: np.ndarray            # (B, T) int64
    attention_mask: np.ndarray  # (B, T) bool, True at real pieces
    word_mask: np.ndarray       # (B, W) bool, True at real words
    pool: np.ndarray            # (B, W, T) float32 averaging weights

    @property
    def size(self) -> int:
        return len(self.sentences)

    @property
    def n_words(self) -> np.ndarray:
        return self.word_mask.sum(axis=1)


def collate(sentences: Sequence[EncodedSentence], pad_to: Optional[int] = None) -> Batch:
    if not sentences:
        raise ValueError("cannot collate an empty batch")
    sentences = list(sentences)
    t = max(len(s.ids) for s in sentences)
    if pad_to is not None:
        t = max(t, pad_to)
    w = max(max(s.n_words for s in sentences), 1)
    b = len(sentences)
    ids = np.full((b, t), PAD_ID, dtype=np.int64)
    attention = np.zeros((b, t), dtype=bool)
    word_mask = np.zeros((b, w), dtype=bool)
    pool = np.zeros((b, w, t), dtype=np.float32)
    for i, s in enumerate(sentences):
        ids[i, : len(s.ids)] = s.ids
        attention[i, : len(s.ids)] = True
        word_mask[i, : s.n_words] = True
        for j, (start, end) in enumerate(s.spans):
            pool[i, j, start:end] = 1.0 / (end - start)
    return Batch(sentences, ids, attention, word_mask, pool)


@dataclass
class EncoderOutput:
    hidden_states: list[Tensor]  # L+1 tensors of shape (B, T, H); index 0 = embeddings
    batch: Batch
    input_ids: np.ndarray
    _pooled: Optional[Tensor] = field(default=None, repr=False)

    @property
    def last(self) -> Tensor:
        return self.hidden_states[-1]

    @property
    def attention_mask(self) -> np.ndarray:
        return self.batch.attention_mask

    @property
    def pooled(self) -> Tensor:
        """Word-level states: mean of each word's last-layer wordpiece vectors."""
        if self._pooled is None:
            self._pooled = self.pool(self.last)
        return self._pooled

    def pool(self, states: Tensor) -> Tensor:
        return ops.matmul(Tensor(self.batch.pool.astype(states.dtype)), states)


class Encoder:
    """Parameters live in ``self.params`` under ``encoder.*`` names."""

    def __init__(self, config: EncoderConfig, seed: int = 0, params: Optional[dict[str, Tensor]] = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            params = {name: init_tensor(name, shape, rng) for name, shape in parameter_shapes(config).items()}
        else:
            expected = parameter_shapes(config)
            missing = set(expected) - set(params)
            if missing:
                raise ValueError(f"missing encoder parameters: {sorted(missing)[:5]}")
            for name, shape in expected.items():
                if params[name].shape != shape:
                    raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
            params = {name: params[name] for name in expected}
        self.params = params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def p(self, name: str) -> Tensor:
        return self.params[f"{PREFIX}.{name}"]

    def __call__(
        self,
        batch: Batch,
        mask_plans: Optional[Sequence] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> EncoderOutput:
        cfg = self.config
        ids = batch.ids
        if mask_plans is not None:
            ids = ids.copy()
            for row, plan in enumerate(mask_plans):
                if plan is not None:
                    ids[row] = plan.apply(ids[row])
        b, t = ids.shape
        if t > cfg.max_positions:
            raise ValueError(f"sequence of {t} wordpieces exceeds max_positions={cfg.max_positions}")
        if training and rng is None:
            raise ValueError("training forward requires an RNG for dropout")

        x = ops.embedding(self.p("embeddings.word.weight"), ids)
        x = x + self.p("embeddings.position.weight")[:t]
        if cfg.type_vocab_size:
            x = x + self.p("embeddings.type.weight")[0]
        x = ops.layer_norm(x, self.p("embeddings.ln.gamma"), self.p("embeddings.ln.beta"))
        x = ops.dropout(x, cfg.dropout, rng, training)
        states = [x]

        neg = np.where(batch.attention_mask, 0.0, -1e9).astype(x.dtype)[:, None, None, :]
        mask_add = Tensor(neg)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        for layer in range(cfg.layers):
            x = self._layer(x, layer, mask_add, scale, training, rng)
            states.append(x)
        return EncoderOutput(states, batch, ids)

    def _layer(self, x, layer, mask_add, scale, training, rng):
        cfg = self.config
        b, t, h = x.shape
        a, d = cfg.heads, cfg.head_dim
        pre = f"layer{layer}"

        def proj(name, inp):
            return ops.linear(inp, self.p(f"{pre}.{name}.weight"), self.p(f"{pre}.{name}.bias"))

        def split(y):
            return y.reshape(b, t, a, d).transpose(0, 2, 1, 3)

        q = split(proj("attn.query", x))
        k = split(proj("attn.key", x))
        v = split(proj("attn.value", x))
        scores = ops.matmul(q, k.transpose(0, 1, 3, 2)) * scale + mask_add
        probs = ops.dropout(ops.softmax(scores, axis=-1), cfg.attention_dropout, rng, training)
        ctx = ops.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, t, h)
        attn = ops.dropout(proj("attn.output", ctx), cfg.dropout, rng, training)
        x = ops.layer_norm(x + attn, self.p(f"{pre}.attn.ln.gamma"), self.p(f"{pre}.attn.ln.beta"))

        hidden = ops.gelu(proj("ffn.in", x))
        out = ops.dropout(proj("ffn.out", hidden), cfg.dropout, rng, training)
        return ops.layer_norm(x + out, self.p(f"{pre}.ffn.ln.gamma"), self.p(f"{pre}.ffn.ln.beta"))

    def encode(self, sentences: Sequence[EncodedSentence], **kwargs) -> EncoderOutput:
        return self(collate(sentences), **kwargs)
