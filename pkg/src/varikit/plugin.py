"""Insertable sequence-compression plugins for the frozen encoder.

A plugin wraps one sublayer per encoder block. Its compression layer merges
each contiguous group of ``k`` hidden vectors into a softmax-weighted
average, the host sublayer runs on the shorter sequence, and the
decompression layer restores one output per original position with a
bottleneck adapter over ``concat(group_output, original_vector)`` plus a
residual from the group output.

Sequences whose length is not a multiple of ``k`` are right-padded with
zero vectors; padded members take part in the softmax and are dropped again
after decompression.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from varikit import tensor as T
from varikit.backbone import BackboneWeights, FormatError, Hooks, Sublayer, Taps, encode
from varikit.tensor import Tensor

SITES = ("FFN", "ATT", "ATT_KV")
STAGES = ("init", "pretrained", "adapted")
COMPRESS_MODES = ("learned", "mean_pool")
DECOMPRESS_MODES = ("learned", "copy")


class ConfigurationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class LayerPlugin:
    w_c: Tensor
    b_c: Tensor
    w_u1: Tensor | None = None
    b_u1: Tensor | None = None
    w_u2: Tensor | None = None
    b_u2: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.w_c, self.b_c, self.w_u1, self.b_u1, self.w_u2, self.b_u2) if t is not None]


ARRAY_ORDER = ("w_c", "b_c", "w_u1", "b_u1", "w_u2", "b_u2")


def layer_shapes(d: int, k: int, r: int, site: str) -> dict[str, tuple[int, ...]]:
    shapes = {"w_c": (k, k * d), "b_c": (k,)}
    if site != "ATT_KV":
        shapes.update({"w_u1": (r, 2 * d), "b_u1": (r,), "w_u2": (d, r), "b_u2": (d,)})
    return shapes


@dataclass
class PluginBundle:
    """All plugin parameters for one (site, k, r) configuration, one set per host layer."""

    d: int
    k: int
    r: int
    site: str
    layers: list[LayerPlugin] = field(default_factory=list)
    trained_stage: str = "init"

    def __post_init__(self):
        if self.k < 1 or self.r < 1 or self.d < 1:
            raise ConfigurationError(f"d, k, r must be positive (got d={self.d}, k={self.k}, r={self.r})")
        if self.r >= self.d:
            raise ConfigurationError(f"bottleneck r={self.r} must be smaller than d={self.d}")
        if self.site not in SITES:
            raise ConfigurationError(f"unknown site {self.site!r}")
        if self.trained_stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.trained_stage!r}")
        shapes = layer_shapes(self.d, self.k, self.r, self.site)
        for i, lp in enumerate(self.layers):
            for name in ARRAY_ORDER:
                t = getattr(lp, name)
                if name not in shapes:
                    if t is not None:
                        raise ConfigurationError(f"layer {i}: {self.site} bundles carry no {name}")
                elif t is None or t.shape != shapes[name]:
                    got = None if t is None else t.shape
                    raise ConfigurationError(f"layer {i}: {name} has shape {got}, expected {shapes[name]}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def has_decompression(self) -> bool:
        return self.site != "ATT_KV"

    def parameters(self) -> list[Tensor]:
        return [t for lp in self.layers for t in lp.tensors()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def copy(self, dtype=None) -> "PluginBundle":
        layers = [
            LayerPlugin(*(None if t is None else Tensor(t.data, dtype=dtype) for t in
                          (getattr(lp, n) for n in ARRAY_ORDER)))
            for lp in self.layers
        ]
        return PluginBundle(self.d, self.k, self.r, self.site, layers, self.trained_stage)

    def astype(self, dtype) -> "PluginBundle":
        return self.copy(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PluginBundle):
            return NotImplemented
        head = (self.d, self.k, self.r, self.site, self.n_layers, self.trained_stage)
        if head != (other.d, other.k, other.r, other.site, other.n_layers, other.trained_stage):
            return False
        for a, b in zip(self.layers, other.layers):
            for name in ARRAY_ORDER:
                x, y = getattr(a, name), getattr(b, name)
                if (x is None) != (y is None):
                    return False
                if x is not None and (x.dtype != y.dtype or x.data.tobytes() != y.data.tobytes()):
                    return False
        return True


def init_plugin(d: int, k: int, r: int, site: str, n_layers: int, rng: np.random.Generator,
                dtype=np.float32, zero_adapter: bool = False) -> PluginBundle:
    """Fresh bundle: projections ~ U(+-1/sqrt(fan_in)), biases zero.

    ``zero_adapter=True`` zeroes the decompression adapter, which makes
    decompression an exact copy of the group output.
    """
    shapes = layer_shapes(d, k, r, site)
    layers = []
    for _ in range(n_layers):
        arrays = {}
        for name, shape in shapes.items():
            if name.startswith("b") or (zero_adapter and name.startswith("w_u")):
                arrays[name] = Tensor(np.zeros(shape), dtype=dtype)
            else:
                bound = 1.0 / math.sqrt(shape[1])
                arrays[name] = Tensor(rng.uniform(-bound, bound, shape), dtype=dtype)
        layers.append(LayerPlugin(**arrays))
    return PluginBundle(d, k, r, site, layers)


def identity_bundle(d: int, r: int, site: str, n_layers: int, dtype=np.float32) -> PluginBundle:
    """k = 1 bundle with zero parameters; plugging it in changes nothing."""
    return init_plugin(d, 1, r, site, n_layers, np.random.default_rng(0), dtype, zero_adapter=True)


# --------------------------------------------------------------------------- #
# Compression / decompression
# --------------------------------------------------------------------------- #

def compressed_length(n: int, k: int) -> int:
    return -(-n // k)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def group_weights(hidden: Tensor, bundle: PluginBundle, mode: str = "learned", layer: int = 0) -> Tensor:
    """Softmax weights over group members, shape (B * groups, k)."""
    hidden, _ = _as_batch(hidden)
    b, n, d = hidden.shape
    k = bundle.k
    m = compressed_length(n, k)
    padded = T.pad_axis(hidden, 1, m * k - n)
    if mode == "learned":
        lp = bundle.layers[layer]
        return T.softmax(T.linear(T.reshape(padded, (b * m, k * d)), lp.w_c, lp.b_c), axis=-1)
    if mode == "mean_pool":
        return Tensor(np.ones((b * m, k), dtype=hidden.dtype) / np.asarray(k, dtype=hidden.dtype))
    raise ValueError(f"unknown compression mode {mode!r}")


def compress(hidden: Tensor, bundle: PluginBundle, mode: str = "learned", layer: int = 0,
             label: str = "compress") -> Tensor:
    """Merge each group of ``k`` consecutive rows into one weighted average.

    ``hidden`` is n x d or B x n x d; the result has ceil(n / k) rows per sequence.
    """
    if mode not in COMPRESS_MODES:
        raise ValueError(f"unknown compression mode {mode!r}")
    hidden, single = _as_batch(hidden)
    b, n, d = hidden.shape
    if d != bundle.d:
        raise ShapeError(f"hidden size {d} does not match bundle d={bundle.d}")
    k = bundle.k
    m = compressed_length(n, k)
    with T.flop_scope(f"L{layer}.{label}", elementwise=True):
        a = group_weights(hidden, bundle, mode, layer)
        groups = T.reshape(T.pad_axis(hidden, 1, m * k - n), (b * m, k, d))
        g = T.tsum(groups * T.reshape(a, (b * m, k, 1)), axis=1)
    g = T.reshape(g, (b, m, d))
    return T.reshape(g, (m, d)) if single else g


def decompress(group_out: Tensor, original: Tensor, bundle: PluginBundle, mode: str = "learned",
               layer: int = 0) -> Tensor:
    """Restore one output row per original position.

    learned: ``o = g + W2 (W1 concat(g, h) + b1) + b2`` with ``g`` the
    output row of the member's group; copy: ``o = g``.
    """
    if mode not in DECOMPRESS_MODES:
        raise ValueError(f"unknown decompression mode {mode!r}")
    if not bundle.has_decompression:
        raise ConfigurationError(f"{bundle.site} bundles have no decompression layer")
    group_out, single = _as_batch(group_out)
    original, _ = _as_batch(original)
    b, m, d = group_out.shape
    n = original.shape[1]
    if m != compressed_length(n, bundle.k) or original.shape[0] != b or original.shape[2] != d or d != bundle.d:
        raise ShapeError(
            f"group outputs {group_out.shape} inconsistent with originals {original.shape} at k={bundle.k}"
        )
    with T.flop_scope(f"L{layer}.decompress", elementwise=True):
        rep = T.repeat(group_out, bundle.k, axis=1)
        if rep.shape[1] != n:
            rep = T.getitem(rep, (slice(None), slice(0, n)))
        if mode == "copy":
            out = rep
        else:
            lp = bundle.layers[layer]
            hidden = T.linear(T.concat([rep, original], axis=-1), lp.w_u1, lp.b_u1)
            out = rep + T.linear(hidden, lp.w_u2, lp.b_u2)
    return T.reshape(out, (n, d)) if single else out


def att_kv_compress(keys: Tensor, values: Tensor, bundle: PluginBundle, layer: int = 0,
                    mode: str = "learned") -> tuple[Tensor, Tensor]:
    """Compress keys and values independently with the layer's shared weights.

    Queries are untouched, so attention produces one output per query and no
    decompression is needed.
    """
    if bundle.site != "ATT_KV":
        raise ConfigurationError(f"att_kv_compress needs an ATT_KV bundle, got {bundle.site}")
    return (compress(keys, bundle, mode, layer, label="kv_compress"),
            compress(values, bundle, mode, layer, label="kv_compress"))


# --------------------------------------------------------------------------- #
# Insertion
# --------------------------------------------------------------------------- #

class PluginHooks(Hooks):
    def __init__(self, bundle: PluginBundle, compress_mode: str = "learned", decompress_mode: str = "learned"):
        self.bundle = bundle
        self.compress_mode = compress_mode
        self.decompress_mode = decompress_mode

    def _wrap(self, layer: int, x: Tensor, sublayer: Sublayer) -> Tensor:
        g = compress(x, self.bundle, self.compress_mode, layer)
        return decompress(sublayer(g), x, self.bundle, self.decompress_mode, layer)

    def ffn(self, layer: int, x: Tensor, sublayer: Sublayer) -> Tensor:
        if self.bundle.site == "FFN":
            return self._wrap(layer, x, sublayer)
        return sublayer(x)

    def attention(self, layer: int, x: Tensor, sublayer: Sublayer) -> Tensor:
        if self.bundle.site == "ATT":
            return self._wrap(layer, x, sublayer)
        return sublayer(x)

    def keys_values(self, layer: int, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        if self.bundle.site == "ATT_KV":
            return att_kv_compress(k, v, self.bundle, layer, self.compress_mode)
        return k, v


def check_compatible(weights: BackboneWeights, bundle: PluginBundle) -> None:
    if bundle.d != weights.config.d:
        raise ConfigurationError(f"bundle d={bundle.d} does not match backbone d={weights.config.d}")
    if bundle.n_layers != weights.config.n_layers:
        raise ConfigurationError(
            f"bundle has {bundle.n_layers} layers, backbone has {weights.config.n_layers}"
        )


def plugged_forward(tokens, weights: BackboneWeights, bundle: PluginBundle | None = None,
                    taps: Taps | None = None, compress_mode: str = "learned",
                    decompress_mode: str = "learned") -> Tensor:
    """Encode with ``bundle`` inserted; ``bundle=None`` is the plain encoder."""
    if bundle is None:
        return encode(tokens, weights, taps=taps)
    if not weights.frozen:
        raise ConfigurationError("plugins are only inserted into frozen backbones")
    check_compatible(weights, bundle)
    return encode(tokens, weights, taps=taps, hooks=PluginHooks(bundle, compress_mode, decompress_mode))


class PluggableModel:
    """Frozen backbone with a swappable plugin reference.

    Swapping replaces the reference in one assignment; a forward pass reads
    it once at entry, so a swap never lands mid-sequence.
    """

    def __init__(self, weights: BackboneWeights, bundle: PluginBundle | None = None):
        if not weights.frozen:
            raise ConfigurationError("plugins are only inserted into frozen backbones")
        self.weights = weights
        self.bundle = None
        if bundle is not None:
            self.plug(bundle)

    def plug(self, bundle: PluginBundle) -> None:
        check_compatible(self.weights, bundle)
        self.bundle = bundle

    def unplug(self) -> None:
        self.bundle = None

    def forward(self, tokens) -> Tensor:
        bundle = self.bundle
        return plugged_forward(tokens, self.weights, bundle)


# --------------------------------------------------------------------------- #
# Files: "VPLG" | u32 version | u32 d, k, r, site, n_layers, stage | f32 LE arrays
# --------------------------------------------------------------------------- #

PLUGIN_MAGIC = b"VPLG"
PLUGIN_VERSION = 1
_HEADER_FMT = "<6I"
HEADER_SIZE = 8 + struct.calcsize(_HEADER_FMT)


def save_plugin(bundle: PluginBundle, path) -> None:
    header = PLUGIN_MAGIC + struct.pack("<I", PLUGIN_VERSION) + struct.pack(
        _HEADER_FMT, bundle.d, bundle.k, bundle.r, SITES.index(bundle.site), bundle.n_layers,
        STAGES.index(bundle.trained_stage),
    )
    chunks = [header]
    for lp in bundle.layers:
        for name in ARRAY_ORDER:
            t = getattr(lp, name)
            if t is not None:
                chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_plugin(path) -> PluginBundle:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != PLUGIN_MAGIC:
        raise FormatError("bad plugin magic", 0)
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated plugin header", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != PLUGIN_VERSION:
        raise FormatError(f"unsupported plugin version {version}", 4)
    d, k, r, site_idx, n_layers, stage_idx = struct.unpack_from(_HEADER_FMT, buf, 8)
    if site_idx >= len(SITES):
        raise FormatError(f"unknown site enum {site_idx}", 8 + 12)
    if stage_idx >= len(STAGES):
        raise FormatError(f"unknown stage enum {stage_idx}", 8 + 20)
    if not (d >= 1 and k >= 1 and 1 <= r < d and n_layers >= 1):
        raise FormatError(f"invalid shape header d={d} k={k} r={r} n_layers={n_layers}", 8)
    site = SITES[site_idx]
    shapes = layer_shapes(d, k, r, site)
    per_layer = sum(int(np.prod(s)) for s in shapes.values())
    expected = HEADER_SIZE + 4 * per_layer * n_layers
    if len(buf) != expected:
        raise FormatError(f"payload size {len(buf)} != expected {expected}", min(len(buf), expected))
    offset = HEADER_SIZE
    layers = []
    for _ in range(n_layers):
        arrays = {}
        for name in ARRAY_ORDER:
            if name not in shapes:
                continue
            count = int(np.prod(shapes[name]))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shapes[name])
            arrays[name] = Tensor(arr, dtype=np.float32)
            offset += 4 * count
        layers.append(LayerPlugin(**arrays))
    return PluginBundle(d, k, r, site, layers, STAGES[stage_idx])
