"""Desk-scale T5-style encoder used as the frozen host model.

Each block is pre-norm self-attention followed by a pre-norm ReLU FFN, both
with residual adds. Normalisation is RMS (scale only). Sublayers are routed
through a :class:`Hooks` object so that insertable modules can wrap them
without the encoder knowing about them.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from varikit import tensor as T
from varikit.optim import Adam, AdamConfig
from varikit.tensor import Tensor
from varikit.toy import ToyCorpus, ToyTask, mask_tokens


class InputError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


HEAD_KINDS = ("none", "seq_cls", "token_tag", "lm")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 64

    def __post_init__(self):
        for name in ("vocab_size", "d", "n_layers", "n_heads", "ffn_mult", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


def parameter_names(config: BackboneConfig) -> list[str]:
    """Fixed parameter order used by checkpoints and checksums (head excluded)."""
    names = ["embed", "pos"]
    for l in range(config.n_layers):
        p = f"layers.{l}."
        names += [p + s for s in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "b1", "w2", "b2")]
    names.append("final_norm")
    return names


def parameter_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d, config.d_ff
    shapes = {"embed": (config.vocab_size, d), "pos": (config.max_seq_len, d)}
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ffn_norm": (d,),
            p + "w1": (f, d), p + "b1": (f,),
            p + "w2": (d, f), p + "b2": (d,),
        })
    shapes["final_norm"] = (d,)
    return shapes


@dataclass
class BackboneWeights:
    """Encoder parameters plus an optional readout head.

    ``head_kind`` is one of ``none``, ``seq_cls`` (mean-pooled linear
    readout), ``token_tag`` (per-token readout) or ``lm`` (per-token readout
    over the vocabulary).
    """

    config: BackboneConfig
    params: dict[str, Tensor]
    head_kind: str = "none"
    n_classes: int = 0
    frozen: bool = False

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if self.head_kind != "none":
            if self.params["head.w"].shape != (self.n_classes, self.config.d):
                raise ValueError("head.w shape does not match n_classes x d")
        self._apply_freeze()

    def _apply_freeze(self):
        for t in self.params.values():
            t.requires_grad = not self.frozen

    def freeze(self) -> "BackboneWeights":
        self.frozen = True
        self._apply_freeze()
        return self

    def unfreeze(self) -> "BackboneWeights":
        self.frozen = False
        self._apply_freeze()
        return self

    def names(self) -> list[str]:
        names = parameter_names(self.config)
        if self.head_kind != "none":
            names += ["head.w", "head.b"]
        return names

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "BackboneWeights":
        params = {k: Tensor(v.data, dtype=dtype) for k, v in self.params.items()}
        return BackboneWeights(self.config, params, self.head_kind, self.n_classes, self.frozen)

    def copy(self) -> "BackboneWeights":
        return self.astype(None)

    def with_head(self, head_kind: str, n_classes: int, rng: np.random.Generator) -> "BackboneWeights":
        """Copy of these weights with a freshly initialised readout head."""
        params = {k: Tensor(v.data) for k, v in self.params.items() if not k.startswith("head.")}
        dtype = params["embed"].dtype
        if head_kind != "none":
            bound = 1.0 / math.sqrt(self.config.d)
            params["head.w"] = Tensor(rng.uniform(-bound, bound, (n_classes, self.config.d)), dtype=dtype)
            params["head.b"] = Tensor(np.zeros(n_classes), dtype=dtype)
        return BackboneWeights(self.config, params, head_kind, n_classes if head_kind != "none" else 0, False)


def init_weights(config: BackboneConfig, rng: np.random.Generator, head_kind: str = "none",
                 n_classes: int = 0, dtype=np.float32) -> BackboneWeights:
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            arr = np.ones(shape)
        elif leaf in ("b1", "b2"):
            arr = np.zeros(shape)
        elif leaf in ("embed", "pos"):
            arr = rng.normal(0.0, 1.0 if leaf == "embed" else 0.1, shape)
        else:
            arr = rng.uniform(-1.0, 1.0, shape) / math.sqrt(shape[1])
        params[name] = Tensor(arr, dtype=dtype)
    weights = BackboneWeights(config, params)
    if head_kind != "none":
        weights = weights.with_head(head_kind, n_classes, rng)
    return weights


# --------------------------------------------------------------------------- #
# Forward pass
# --------------------------------------------------------------------------- #

Sublayer = Callable[[Tensor], Tensor]


class Hooks:
    """Identity routing for sublayers; insertable modules override these."""

    def attention(self, layer: int, x: Tensor, sublayer: Sublayer) -> Tensor:
        return sublayer(x)

    def ffn(self, layer: int, x: Tensor, sublayer: Sublayer) -> Tensor:
        return sublayer(x)

    def keys_values(self, layer: int, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        return k, v


NO_HOOKS = Hooks()


@dataclass
class Taps:
    """Collector for intermediates exposed by :func:`encode`.

    Keys are ``(layer, name)`` with names ``attn_in``, ``attn_k``,
    ``attn_v``, ``attn_probs``, ``ffn_in``, ``ffn_pre_act`` and ``ffn_out``.
    ``ffn_pre_act`` is the first FFN projection before ReLU for the rows the
    FFN actually processed (compressed rows when a plugin is inserted).
    """

    values: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    def put(self, layer: int, name: str, t: Tensor) -> None:
        self.values[(layer, name)] = t.data

    def get(self, layer: int, name: str) -> np.ndarray:
        return self.values[(layer, name)]


def check_tokens(tokens, config: BackboneConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError(f"tokens must be a non-empty sequence or batch, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(f"token ids must lie in [0, {config.vocab_size})")
    return ids


def attention_sublayer(h: Tensor, weights: BackboneWeights, layer: int, hooks: Hooks,
                       taps: Taps | None) -> Tensor:
    cfg = weights.config
    p = f"layers.{layer}."
    with T.flop_scope(f"L{layer}.attention"):
        x = T.rms_norm(h, weights[p + "attn_norm"])
        q = T.linear(x, weights[p + "wq"])
        k = T.linear(x, weights[p + "wk"])
        v = T.linear(x, weights[p + "wv"])
    k, v = hooks.keys_values(layer, k, v)
    with T.flop_scope(f"L{layer}.attention"):
        if taps is not None:
            taps.put(layer, "attn_k", k)
            taps.put(layer, "attn_v", v)
        qh = T.split_heads(q, cfg.n_heads)
        kh = T.split_heads(k, cfg.n_heads)
        vh = T.split_heads(v, cfg.n_heads)
        scores = T.matmul(qh, T.transpose(kh)) * (1.0 / math.sqrt(cfg.d_head))
        probs = T.softmax(scores, axis=-1)
        if taps is not None:
            taps.put(layer, "attn_probs", probs)
        ctx = T.merge_heads(T.matmul(probs, vh), cfg.n_heads)
        return T.linear(ctx, weights[p + "wo"])


def ffn_sublayer(h: Tensor, weights: BackboneWeights, layer: int, taps: Taps | None) -> Tensor:
    p = f"layers.{layer}."
    with T.flop_scope(f"L{layer}.ffn"):
        x = T.rms_norm(h, weights[p + "ffn_norm"])
        pre = T.linear(x, weights[p + "w1"], weights[p + "b1"])
        if taps is not None:
            taps.put(layer, "ffn_pre_act", pre)
        out = T.linear(T.relu(pre), weights[p + "w2"], weights[p + "b2"])
        if taps is not None:
            taps.put(layer, "ffn_out", out)
        return out


def encode(tokens, weights: BackboneWeights, config: BackboneConfig | None = None,
           taps: Taps | None = None, hooks: Hooks | None = None) -> Tensor:
    """Run the encoder and return final hidden states.

    ``tokens`` is a length-n id sequence (result shape n x d) or a B x n
    batch (result shape B x n x d).
    """
    config = config or weights.config
    if config != weights.config:
        raise InputError("config does not match the weights' config")
    single = np.ndim(tokens) == 1
    ids = check_tokens(tokens, config)
    hooks = hooks or NO_HOOKS
    n = ids.shape[1]
    x = T.embedding(weights["embed"], ids) + T.getitem(weights["pos"], slice(0, n))
    for l in range(config.n_layers):
        if taps is not None:
            taps.put(l, "attn_in", x)
        x = x + hooks.attention(l, x, lambda h, l=l: attention_sublayer(h, weights, l, hooks, taps))
        if taps is not None:
            taps.put(l, "ffn_in", x)
        x = x + hooks.ffn(l, x, lambda h, l=l: ffn_sublayer(h, weights, l, taps))
    out = T.rms_norm(x, weights["final_norm"])
    if single:
        out = T.reshape(out, out.shape[1:])
    return out


def head_logits(states: Tensor, weights: BackboneWeights) -> Tensor:
    """Readout logits: (B, C) for ``seq_cls``, (B, n, C) for per-token heads."""
    if weights.head_kind == "none":
        raise InputError("weights carry no readout head")
    if states.ndim == 2:
        states = T.reshape(states, (1,) + states.shape)
    if weights.head_kind == "seq_cls":
        pooled = T.mean(states, axis=1)
        return T.linear(pooled, weights["head.w"], weights["head.b"])
    return T.linear(states, weights["head.w"], weights["head.b"])


def predict(states: Tensor, weights: BackboneWeights) -> np.ndarray:
    return head_logits(states, weights).data.argmax(axis=-1)


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #

@dataclass
class BackboneTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-3
    mask_rate: float = 0.15


def task_loss(weights: BackboneWeights, tokens: np.ndarray, labels: np.ndarray,
              hooks: Hooks | None = None) -> Tensor:
    """Cross-entropy of the readout head on a labelled batch."""
    states = encode(tokens, weights, hooks=hooks)
    return T.cross_entropy(head_logits(states, weights), labels)


def _masked_lm_loss(weights: BackboneWeights, tokens: np.ndarray, rng: np.random.Generator,
                    rate: float) -> Tensor:
    corrupted, mask = mask_tokens(tokens, rng, rate)
    logits = head_logits(encode(corrupted, weights), weights)
    flat = T.reshape(logits, (-1, logits.shape[-1]))
    rows = np.flatnonzero(mask.reshape(-1))
    return T.cross_entropy(T.getitem(flat, rows), tokens.reshape(-1)[rows])


def accuracy(weights: BackboneWeights, task: ToyTask, hooks: Hooks | None = None,
             batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(task), batch_size):
        toks = task.tokens[start:start + batch_size]
        pred = predict(encode(toks, weights, hooks=hooks), weights)
        correct += int((pred == task.labels[start:start + batch_size]).sum())
    return correct / task.labels.size


def train_backbone(task: ToyTask | ToyCorpus, config: BackboneConfig, hyper: BackboneTrainConfig,
                   seed: int, init: BackboneWeights | None = None,
                   log: Callable[[dict], None] | None = None) -> BackboneWeights:
    """Train all encoder and head parameters on ``task``; returns frozen weights.

    A :class:`ToyCorpus` trains masked-token reconstruction (the pre-trained
    model); a :class:`ToyTask` trains the task head and the encoder jointly
    (the task model), optionally starting from ``init``.
    """
    rng = np.random.default_rng(seed)
    if isinstance(task, ToyCorpus):
        head_kind, n_classes = "lm", config.vocab_size
    else:
        head_kind, n_classes = task.kind, task.n_classes
    if init is None:
        weights = init_weights(config, rng, head_kind, n_classes)
    else:
        if init.config != config:
            raise ValueError("init weights do not match config")
        weights = init.with_head(head_kind, n_classes, rng)
    weights.unfreeze()
    params = [weights[name] for name in weights.names()]
    opt = Adam(params, AdamConfig(learning_rate=hyper.learning_rate))
    for step in range(hyper.steps):
        idx = rng.integers(0, len(task), size=hyper.batch_size)
        with T.Tape() as tape:
            if isinstance(task, ToyCorpus):
                loss = _masked_lm_loss(weights, task.tokens[idx], rng, hyper.mask_rate)
            else:
                loss = task_loss(weights, task.tokens[idx], task.labels[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("backbone loss diverged", step)
        tape.backward(loss)
        opt.step()
        if log is not None:
            log({"step": step, "task_loss": value})
    return weights.freeze()


# --------------------------------------------------------------------------- #
# Checkpoints: "VBKB" | u32 version | config block | f32 LE arrays
# --------------------------------------------------------------------------- #

BACKBONE_MAGIC = b"VBKB"
BACKBONE_VERSION = 1
_CONFIG_FMT = "<9I"  # vocab, d, layers, heads, ffn_mult, max_len, head kind, classes, frozen


def save_backbone(weights: BackboneWeights, path) -> None:
    c = weights.config
    header = BACKBONE_MAGIC + struct.pack("<I", BACKBONE_VERSION) + struct.pack(
        _CONFIG_FMT, c.vocab_size, c.d, c.n_layers, c.n_heads, c.ffn_mult, c.max_seq_len,
        HEAD_KINDS.index(weights.head_kind), weights.n_classes, int(weights.frozen),
    )
    chunks = [header]
    for name in weights.names():
        chunks.append(np.ascontiguousarray(weights[name].data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_backbone(path) -> BackboneWeights:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != BACKBONE_MAGIC:
        raise FormatError("bad backbone magic", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != BACKBONE_VERSION:
        raise FormatError(f"unsupported backbone version {version}", 4)
    size = struct.calcsize(_CONFIG_FMT)
    if len(buf) < 8 + size:
        raise FormatError("truncated config block", len(buf))
    vals = struct.unpack_from(_CONFIG_FMT, buf, 8)
    try:
        config = BackboneConfig(*vals[:6])
    except ValueError as exc:
        raise FormatError(f"invalid config block: {exc}", 8) from None
    head_idx, n_classes, frozen = vals[6:]
    if head_idx >= len(HEAD_KINDS):
        raise FormatError(f"unknown head kind {head_idx}", 8 + 24)
    head_kind = HEAD_KINDS[head_idx]
    shapes = parameter_shapes(config)
    if head_kind != "none":
        shapes["head.w"] = (n_classes, config.d)
        shapes["head.b"] = (n_classes,)
    offset = 8 + size
    params = {}
    order = parameter_names(config) + (["head.w", "head.b"] if head_kind != "none" else [])
    for name in order:
        count = int(np.prod(shapes[name]))
        end = offset + 4 * count
        if end > len(buf):
            raise FormatError(f"truncated array {name}", offset)
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shapes[name])
        params[name] = Tensor(arr, dtype=np.float32)
        offset = end
    if offset != len(buf):
        raise FormatError("trailing bytes after last array", offset)
    return BackboneWeights(config, params, head_kind, n_classes, bool(frozen))


def config_dict(config: BackboneConfig) -> dict:
    return asdict(config)
