"""Frozen vision transformer with key/value prompt prefixes.

The backbone (patch embedding, attention blocks, MLPs) is initialized
once from a seed and never trained; learning capacity lives entirely in
per-layer prompt prefixes concatenated to attention keys and values,
plus a small evidence head on the class token. Attention probabilities
from every layer are kept so rollout maps can be extracted, and the
rollout stays differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class ModelConfigError(ValueError):
    """Inconsistent model dimensions or malformed weight files."""


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    num_heads: int = 6
    num_layers: int = 12
    prompt_len: int = 50
    split_layer: int = 3
    num_classes: int = 2
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ModelConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ModelConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not (1 <= self.split_layer < self.num_layers):
            raise ModelConfigError(
                f"split_layer must satisfy 1 <= l < {self.num_layers}, got {self.split_layer}"
            )
        if self.prompt_len < 0:
            raise ModelConfigError("prompt_len must be >= 0")
        if self.num_classes < 2:
            raise ModelConfigError("num_classes must be >= 2")
        if self.channels < 1:
            raise ModelConfigError("channels must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return 4 * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size * self.channels


def _param_specs(cfg: ViTConfig):
    """Canonical (name, shape) list; fixes init order and file layout."""
    d, t = cfg.embed_dim, cfg.num_tokens
    specs = [
        ("patch_embed.weight", (cfg.patch_dim, d)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (1, d)),
        ("pos_embed", (t, d)),
    ]
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        specs += [
            (p + "ln1.gamma", (d,)),
            (p + "ln1.beta", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.gamma", (d,)),
            (p + "ln2.beta", (d,)),
            (p + "mlp.w1", (d, cfg.mlp_dim)),
            (p + "mlp.b1", (cfg.mlp_dim,)),
            (p + "mlp.w2", (cfg.mlp_dim, d)),
            (p + "mlp.b2", (d,)),
        ]
    specs += [("final_ln.gamma", (d,)), ("final_ln.beta", (d,))]
    return specs


def _init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith((".bias", ".beta", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
        return np.zeros(shape)
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name in ("cls_token", "pos_embed"):
        return rng.normal(0.0, 0.5, size=shape)
    # scale-preserving random projections: a seeded backbone acts as a
    # random feature extractor, so per-layer attenuation must stay ~1
    return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)


class FrozenBackbone:
    """Shared, never-trained transformer weights.

    Every parameter tensor is created with requires_grad=False, so the
    autodiff graph treats them as constants and optimizer steps cannot
    touch them.
    """

    def __init__(self, config: ViTConfig, arrays: dict):
        self.config = config
        self._names = []
        self.params = {}
        for name, shape in _param_specs(config):
            if name not in arrays:
                raise ModelConfigError(f"missing backbone parameter {name}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ModelConfigError(
                    f"backbone parameter {name} has shape {arr.shape}, expected {shape}"
                )
            self.params[name] = ad.Tensor(arr)
            self._names.append(name)
        extra = set(arrays) - set(self._names)
        if extra:
            raise ModelConfigError(f"unknown backbone parameters: {sorted(extra)}")

    @classmethod
    def from_seed(cls, config: ViTConfig, seed) -> "FrozenBackbone":
        rng = np.random.default_rng(seed)
        arrays = {name: _init_param(name, shape, rng) for name, shape in _param_specs(config)}
        return cls(config, arrays)

    def param_items(self):
        return [(n, self.params[n]) for n in self._names]

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]


class PromptSet:
    """Per-layer key/value prefixes, split into b- and t-prompt groups.

    Layers 0..split_layer-1 hold b-prompts (general visual features,
    slow learning rate); the rest hold t-prompts (task adaptation,
    faster rate). Prompts are the only per-client model state besides
    the evidence head and never leave the client under map-sharing
    strategies.
    """

    def __init__(self, config: ViTConfig, seed):
        rng = np.random.default_rng(seed)
        self.config = config
        self.pairs = []
        for _ in range(config.num_layers):
            pk = ad.Tensor(
                rng.uniform(-0.03, 0.03, size=(config.prompt_len, config.embed_dim)),
                requires_grad=True,
            )
            pv = ad.Tensor(
                rng.uniform(-0.03, 0.03, size=(config.prompt_len, config.embed_dim)),
                requires_grad=True,
            )
            self.pairs.append((pk, pv))

    def b_parameters(self):
        l = self.config.split_layer
        return [t for pair in self.pairs[:l] for t in pair]

    def t_parameters(self):
        l = self.config.split_layer
        return [t for pair in self.pairs[l:] for t in pair]

    def parameters(self):
        return [t for pair in self.pairs for t in pair]


class EvidenceHead:
    """Linear class-token readout with ReLU, so evidence is >= 0.

    The bias starts positive: class-token features of a frozen backbone
    vary little across samples, and a unit whose pre-activation starts
    negative everywhere would never receive gradient through the ReLU.
    """

    def __init__(self, config: ViTConfig, seed):
        rng = np.random.default_rng(seed)
        self.weight = ad.Tensor(
            rng.normal(0.0, 0.02, size=(config.embed_dim, config.num_classes)),
            requires_grad=True,
        )
        self.bias = ad.Tensor(np.full(config.num_classes, 0.5), requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, features: ad.Tensor) -> ad.Tensor:
        return ad.relu(ad.linear(features, self.weight, self.bias))


def trainable_params(prompts: PromptSet, head: EvidenceHead):
    """(b_group, t_group): disjoint groups covering all trainable state.

    The head trains alongside the t-prompts at the faster rate.
    """
    return prompts.b_parameters(), prompts.t_parameters() + head.parameters()


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Flat images [B, S*S*C] -> patch rows [B, N, patch_dim].

    Pixel layout is row-major (row, column, channel).
    """
    b = images.shape[0]
    s, p, c, g = cfg.image_size, cfg.patch_size, cfg.channels, cfg.grid_size
    x = images.reshape(b, s, s, c)
    x = x.reshape(b, g, p, g, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, p * p * c))


def embed_tokens(images, backbone: FrozenBackbone) -> np.ndarray:
    """Patch-embed + class token + positional embeddings, as plain numpy.

    The backbone is frozen, so this prefix of the forward pass is a
    constant per sample; callers that sweep the same samples every
    epoch can compute it once and pass it to ``forward`` as ``tokens``.
    """
    cfg = backbone.config
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != cfg.pixels:
        raise ModelConfigError(
            f"images must have {cfg.pixels} values per sample, got shape {arr.shape}"
        )
    tok = patchify(arr, cfg) @ backbone["patch_embed.weight"].data
    tok += backbone["patch_embed.bias"].data
    cls = np.broadcast_to(
        backbone["cls_token"].data[None, :, :], (arr.shape[0], 1, cfg.embed_dim)
    )
    return np.concatenate([cls, tok], axis=1) + backbone["pos_embed"].data


def forward_features(images, backbone: FrozenBackbone, prompts: PromptSet,
                     tokens: np.ndarray | None = None):
    """Run the prompted transformer up to the class-token features.

    images: numpy [pixels] or [B, pixels], values are treated as
    constants (no gradient flows into inputs). Returns (features,
    attentions): features [B, D] (or [D] for a single image) and one
    attention tensor per layer shaped [B, heads, T, T+L_p], rows
    summing to 1. Query length stays T at every layer; prompts extend
    keys and values only.

    tokens: optional precomputed ``embed_tokens`` output for these
    images; skips the constant embedding work.
    """
    cfg = backbone.config
    single = False
    if tokens is None:
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != cfg.pixels:
            raise ModelConfigError(
                f"images must have {cfg.pixels} values per sample, got shape {arr.shape}"
            )
        tokens = embed_tokens(arr, backbone)
    if len(prompts.pairs) != cfg.num_layers:
        raise ModelConfigError("prompt set does not match backbone depth")
    b = tokens.shape[0]
    nh, dh, t, lp = cfg.num_heads, cfg.head_dim, cfg.num_tokens, cfg.prompt_len
    scale = 1.0 / math.sqrt(dh)

    x = ad.Tensor(tokens)

    def split_heads(z):
        z = ad.reshape(z, (b, t, nh, dh))
        return ad.transpose(z, (0, 2, 1, 3))

    attentions = []
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        h = ad.layernorm(x, backbone[p + "ln1.gamma"], backbone[p + "ln1.beta"])
        q = split_heads(ad.linear(h, backbone[p + "attn.wq"], backbone[p + "attn.bq"]))
        k = split_heads(ad.linear(h, backbone[p + "attn.wk"], backbone[p + "attn.bk"]))
        v = split_heads(ad.linear(h, backbone[p + "attn.wv"], backbone[p + "attn.bv"]))
        if lp > 0:
            pk, pv = prompts.pairs[i]
            pk = ad.broadcast_to(
                ad.reshape(ad.transpose(ad.reshape(pk, (lp, nh, dh)), (1, 0, 2)), (1, nh, lp, dh)),
                (b, nh, lp, dh),
            )
            pv = ad.broadcast_to(
                ad.reshape(ad.transpose(ad.reshape(pv, (lp, nh, dh)), (1, 0, 2)), (1, nh, lp, dh)),
                (b, nh, lp, dh),
            )
            k = ad.concat([pk, k], axis=2)
            v = ad.concat([pv, v], axis=2)
        attn = ad.attention_probs(q, k, scale)
        attentions.append(attn)
        out = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        out = ad.reshape(out, (b, t, cfg.embed_dim))
        x = ad.add(x, ad.linear(out, backbone[p + "attn.wo"], backbone[p + "attn.bo"]))
        h2 = ad.layernorm(x, backbone[p + "ln2.gamma"], backbone[p + "ln2.beta"])
        m = ad.gelu(ad.linear(h2, backbone[p + "mlp.w1"], backbone[p + "mlp.b1"]))
        x = ad.add(x, ad.linear(m, backbone[p + "mlp.w2"], backbone[p + "mlp.b2"]))

    x = ad.layernorm(x, backbone["final_ln.gamma"], backbone["final_ln.beta"])
    features = x[:, 0, :]
    if single:
        features = ad.reshape(features, (features.shape[-1],))
        attentions = [ad.reshape(a, a.shape[1:]) for a in attentions]
    return features, attentions


def forward(images, backbone: FrozenBackbone, prompts: PromptSet, head: EvidenceHead,
            tokens: np.ndarray | None = None):
    """Prompted transformer through the evidence head.

    Returns (evidence, attentions) with evidence [B, K] (or [K] for a
    single image); see forward_features for the attention layout.
    """
    features, attentions = forward_features(images, backbone, prompts, tokens=tokens)
    return head(features), attentions


def class_token_features(images, backbone: FrozenBackbone, prompts: PromptSet):
    """Final-layer class-token embeddings [B, D] (prototype payloads)."""
    features, _ = forward_features(images, backbone, prompts)
    return features


def rollout_matrix(attentions, prompt_len: int) -> ad.Tensor:
    """Layer-fused token-to-token influence R = A_H^ ... A_1^.

    Each layer's attention is head-averaged, stripped of its leading
    prompt_len key columns, row-renormalized, mixed half-and-half with
    the identity (residual path), and renormalized again before the
    running product.
    """
    if not attentions:
        raise ModelConfigError("attention list is empty")
    result = None
    for a in attentions:
        m = ad.mean(a, axis=-3)
        if prompt_len > 0:
            m = m[..., prompt_len:]
        if m.shape[-1] != m.shape[-2]:
            raise ModelConfigError(
                f"attention with {m.shape[-1]} key columns after dropping "
                f"{prompt_len} prompts is not square over {m.shape[-2]} tokens"
            )
        t = m.shape[-1]
        m = ad.div(m, ad.sum_(m, axis=-1, keepdims=True))
        m = ad.add(ad.mul(m, 0.5), ad.Tensor(0.5 * np.eye(t)))
        m = ad.div(m, ad.sum_(m, axis=-1, keepdims=True))
        result = m if result is None else ad.matmul(m, result)
    return result


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Row-interpolation matrix U [dst, src]; U @ v resamples v.

    Sample positions align pixel centers, edges clamped; src == dst
    yields the identity.
    """
    u = np.zeros((dst, src))
    for i in range(dst):
        pos = (i + 0.5) * src / dst - 0.5
        p0 = math.floor(pos)
        w = pos - p0
        lo = min(max(p0, 0), src - 1)
        hi = min(max(p0 + 1, 0), src - 1)
        u[i, lo] += 1.0 - w
        u[i, hi] += w
    return u


def attention_rollout(attentions, config: ViTConfig) -> ad.Tensor:
    """Rollout maps [.., image_size, image_size], max-normalized to 1.

    Takes the class-token row of the rollout matrix over patch tokens,
    reshapes it to the patch grid, upsamples bilinearly to pixel
    resolution (a pair of constant-matrix products, so gradients pass
    through), and divides by the map maximum. A tiny floor on the
    divisor keeps the degenerate all-zero row (identity attentions)
    finite instead of dividing by zero.
    """
    r = rollout_matrix(attentions, config.prompt_len)
    if r.shape[-1] != config.num_tokens:
        raise ModelConfigError(
            f"rollout is over {r.shape[-1]} tokens, config expects {config.num_tokens}"
        )
    g = config.grid_size
    row = r[..., 0, 1:]
    grid = ad.reshape(row, row.shape[:-1] + (g, g))
    u = ad.Tensor(bilinear_matrix(g, config.image_size))
    up = ad.matmul(ad.matmul(u, grid), ad.Tensor(bilinear_matrix(g, config.image_size).T))
    peak = ad.max_(up, axis=(-2, -1), keepdims=True)
    return ad.div(up, ad.maximum_scalar(peak, 1e-30))


def save_backbone(backbone: FrozenBackbone, path) -> None:
    """Text header of `name dims...` lines, blank line, then the raw
    little-endian float64 stream in header order."""
    with open(path, "wb") as fh:
        for name, tensor in backbone.param_items():
            dims = " ".join(str(d) for d in tensor.shape)
            fh.write(f"{name} {dims}\n".encode("ascii"))
        fh.write(b"\n")
        for _, tensor in backbone.param_items():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_backbone(path, config: ViTConfig) -> FrozenBackbone:
    with open(path, "rb") as fh:
        entries = []
        while True:
            line = fh.readline()
            if not line:
                raise ModelConfigError(f"{path}: truncated header (no blank line)")
            line = line.decode("ascii").strip()
            if not line:
                break
            parts = line.split()
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            entries.append((name, dims))
        arrays = {}
        for name, dims in entries:
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ModelConfigError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    expected = _param_specs(config)
    if [(n, s) for n, s in entries] != [(n, s) for n, s in expected]:
        raise ModelConfigError(
            f"{path}: parameter list does not match the configured architecture"
        )
    return FrozenBackbone(config, arrays)
