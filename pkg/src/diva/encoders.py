"""Toy dual encoders: a text transformer (frozen after pretraining) and a
vision patch transformer, plus LoRA adaptation, layer-wise learning-rate
decay, and AdamW.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import OpError, Parameter, Tensor


class InputError(ValueError):
    """Bad runtime input (out-of-vocabulary token, wrong image size, ...)."""


class ConfigError(ValueError):
    """Invalid static configuration."""


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    max_seq_len: int = 32
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")


@dataclass
class VisionEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) clipped to two standard deviations."""
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Model:
    """Flat named-parameter container; subclasses register via _param()."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def _param(self, name, data, trainable=True):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, trainable=trainable)
        self._params[name] = p
        return p

    def parameters(self):
        return list(self._params.values())

    def named_parameters(self):
        return dict(self._params)

    def trainable_parameters(self):
        return [p for p in self._params.values() if p.trainable]

    def n_parameters(self):
        return sum(p.data.size for p in self._params.values())

    def n_trainable_parameters(self):
        return sum(p.data.size for p in self._params.values() if p.trainable)

    def freeze(self):
        for p in self._params.values():
            p.freeze()

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_arrays(self, arrays):
        unknown = set(arrays) - set(self._params)
        missing = set(self._params) - set(arrays)
        if unknown or missing:
            raise ConfigError(
                f"state mismatch: unknown={sorted(unknown)}, missing={sorted(missing)}"
            )
        for name, arr in arrays.items():
            self._params[name].tensor.set_values(arr)


def _linear(x, w, b):
    """y = x @ w.T + b for w of shape (d_out, d_in)."""
    y = ad.matmul(x, ad.transpose(w, (1, 0)))
    return ad.add(y, b)


class LoRAAdapter:
    """Low-rank additive reparameterization W + (alpha/r) * B @ A.

    B starts at zero, so attaching an adapter is an exact identity until
    the first optimizer step.
    """

    def __init__(self, target, d_out, d_in, rank, alpha, rng):
        self.target = target
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.A = Parameter(f"{target}.lora_A", rng.normal(0.0, 0.02, size=(rank, d_in)))
        self.B = Parameter(f"{target}.lora_B", np.zeros((d_out, rank)))

    def effective_weight(self, w_tensor):
        delta = ad.scale(ad.matmul(self.B.tensor, self.A.tensor), self.alpha / self.rank)
        return ad.add(w_tensor, delta)


class _TransformerStack:
    """Shared pre-LN transformer block machinery for both encoders."""

    def _build_blocks(self, prefix, h, n_layers, rng):
        for i in range(n_layers):
            p = f"{prefix}layers.{i}"
            self._param(f"{p}.ln1.gain", np.ones(h))
            self._param(f"{p}.ln1.bias", np.zeros(h))
            for w in ("wq", "wk", "wv", "wo"):
                self._param(f"{p}.attn.{w}", trunc_normal(rng, (h, h)))
                self._param(f"{p}.attn.{w}_b", np.zeros(h))
            self._param(f"{p}.ln2.gain", np.ones(h))
            self._param(f"{p}.ln2.bias", np.zeros(h))
            self._param(f"{p}.mlp.w1", trunc_normal(rng, (4 * h, h)))
            self._param(f"{p}.mlp.w1_b", np.zeros(4 * h))
            self._param(f"{p}.mlp.w2", trunc_normal(rng, (h, 4 * h)))
            self._param(f"{p}.mlp.w2_b", np.zeros(h))
        self._param(f"{prefix}final_ln.gain", np.ones(h))
        self._param(f"{prefix}final_ln.bias", np.zeros(h))

    def _attn_weight(self, name):
        adapter = getattr(self, "lora", {}).get(name)
        w = self._params[name].tensor
        if adapter is not None:
            return adapter.effective_weight(w)
        return w

    def _run_blocks(self, x, prefix, h, n_layers, n_heads):
        B, T = x.data.shape[0], x.data.shape[1]
        dh = h // n_heads
        P = self._params
        for i in range(n_layers):
            p = f"{prefix}layers.{i}"
            xn = ad.layernorm(x, P[f"{p}.ln1.gain"].tensor, P[f"{p}.ln1.bias"].tensor)
            q = _linear(xn, self._attn_weight(f"{p}.attn.wq"), P[f"{p}.attn.wq_b"].tensor)
            k = _linear(xn, self._attn_weight(f"{p}.attn.wk"), P[f"{p}.attn.wk_b"].tensor)
            v = _linear(xn, self._attn_weight(f"{p}.attn.wv"), P[f"{p}.attn.wv_b"].tensor)
            q = ad.transpose(ad.reshape(q, (B, T, n_heads, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (B, T, n_heads, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (B, T, n_heads, dh)), (0, 2, 1, 3))
            att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = ad.softmax_rows(att)
            ctx = ad.matmul(att, v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, h))
            ctx = _linear(ctx, P[f"{p}.attn.wo"].tensor, P[f"{p}.attn.wo_b"].tensor)
            x = ad.add(x, ctx)
            xn = ad.layernorm(x, P[f"{p}.ln2.gain"].tensor, P[f"{p}.ln2.bias"].tensor)
            hdn = ad.relu(_linear(xn, P[f"{p}.mlp.w1"].tensor, P[f"{p}.mlp.w1_b"].tensor))
            x = ad.add(x, _linear(hdn, P[f"{p}.mlp.w2"].tensor, P[f"{p}.mlp.w2_b"].tensor))
        x = ad.layernorm(
            x, P[f"{prefix}final_ln.gain"].tensor, P[f"{prefix}final_ln.bias"].tensor
        )
        return x


class TextEncoder(Model, _TransformerStack):
    """Transformer over token ids; the final [CLS] (position 0) embedding,
    L2-normalized, is the text representation."""

    def __init__(self, config: TextEncoderConfig, rng):
        super().__init__()
        self.config = config
        h = config.embed_dim
        self.lora = {}
        self._param("tok_embed", trunc_normal(rng, (config.vocab_size, h)))
        self._param("pos_embed", trunc_normal(rng, (config.max_seq_len, h)))
        self._build_blocks("", h, config.n_layers, rng)

    def embed(self, tokens):
        """Token + positional embeddings for an int array of shape (B, T)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.config.max_seq_len:
            raise InputError(
                f"sequence length {tokens.shape[1]} exceeds max {self.config.max_seq_len}"
            )
        bad = tokens[(tokens < 0) | (tokens >= self.config.vocab_size)]
        if bad.size:
            raise InputError(f"token id {int(bad.reshape(-1)[0])} out of vocabulary")
        x = ad.embedding(self._params["tok_embed"].tensor, tokens)
        pos = ad.slice_(self._params["pos_embed"].tensor, (slice(0, tokens.shape[1]),))
        return ad.add(x, pos)

    def forward_embedded(self, x):
        """Run the transformer over already-embedded input (B, T, h) and
        return the normalized [CLS] vectors (B, h)."""
        cfg = self.config
        x = self._run_blocks(x, "", cfg.embed_dim, cfg.n_layers, cfg.n_heads)
        cls = ad.slice_(x, (slice(None), 0))
        return ad.l2_normalize_rows(cls)

    def encode(self, tokens):
        return self.forward_embedded(self.embed(tokens))


class VisionEncoder(Model, _TransformerStack):
    """Patch transformer over square grayscale images; returns the
    normalized [CLS] embedding."""

    def __init__(self, config: VisionEncoderConfig, rng):
        super().__init__()
        self.config = config
        h = config.embed_dim
        self.lora = {}
        self._param("patch_proj", trunc_normal(rng, (h, config.patch_dim)))
        self._param("patch_proj_b", np.zeros(h))
        self._param("cls_token", trunc_normal(rng, (1, h)))
        self._param("pos_embed", trunc_normal(rng, (config.n_patches + 1, h)))
        self._build_blocks("", h, config.n_layers, rng)

    def attach_lora(self, rank=4, alpha=4.0, rng=None):
        """Attach adapters to every attention query/value projection and
        freeze the base weights; output is unchanged until training starts."""
        if self.lora:
            raise ConfigError("LoRA already attached")
        rng = rng if rng is not None else np.random.default_rng(0)
        h = self.config.embed_dim
        adapters = []
        for i in range(self.config.n_layers):
            for w in ("wq", "wv"):
                name = f"layers.{i}.attn.{w}"
                a = LoRAAdapter(name, h, h, rank, alpha, rng)
                self.lora[name] = a
                adapters.append(a)
        self.freeze()
        for a in adapters:
            self._params[a.A.name] = a.A
            self._params[a.B.name] = a.B
        return adapters

    def patchify(self, images):
        """(B, S, S) pixel array -> (B, n_patches, patch_dim), row-major
        patch order. Pure numpy; pixels are inputs, not parameters."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        S, P = self.config.image_size, self.config.patch_size
        if images.shape[1:] != (S, S):
            raise InputError(f"expected {S}x{S} images, got {images.shape[1:]}")
        g = S // P
        x = images.reshape(images.shape[0], g, P, g, P)
        x = x.transpose(0, 1, 3, 2, 4).reshape(images.shape[0], g * g, P * P)
        return x

    def encode(self, images):
        cfg = self.config
        h = cfg.embed_dim
        patches = self.patchify(images)
        B = patches.shape[0]
        x = _linear(Tensor(patches), self._params["patch_proj"].tensor,
                    self._params["patch_proj_b"].tensor)
        ones = Tensor(np.ones((B, 1)))
        cls = ad.reshape(ad.matmul(ones, self._params["cls_token"].tensor), (B, 1, h))
        x = ad.concat([cls, x], axis=1)
        x = ad.add(x, self._params["pos_embed"].tensor)
        x = self._run_blocks(x, "", h, cfg.n_layers, cfg.n_heads)
        out = ad.slice_(x, (slice(None), 0))
        return ad.l2_normalize_rows(out)

    def layer_group(self, name):
        """Depth group of a parameter for layer-wise LR decay: 0 for the
        embedding stage, 1..L for blocks, L+1 for the final norm."""
        if name.startswith("layers."):
            return int(name.split(".")[1]) + 1
        if name.startswith("final_ln"):
            return self.config.n_layers + 1
        return 0

    @property
    def n_layer_groups(self):
        return self.config.n_layers + 2


def layerwise_lr(layer_index, n_layers, base_lr, beta):
    """Per-depth learning rate base_lr * beta^(n_layers - 1 - layer_index);
    the topmost layer keeps base_lr."""
    if beta <= 0:
        raise ConfigError("layer-wise decay factor must be positive")
    if not 0 <= layer_index < n_layers:
        raise ConfigError(f"layer_index {layer_index} outside [0, {n_layers})")
    return base_lr * beta ** (n_layers - 1 - layer_index)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    `lr_scale` optionally maps a parameter name to a multiplier on the base
    learning rate (used for layer-wise decay). Gradients of all tracked
    parameters are zeroed after each step.
    """

    def __init__(self, params, base_lr=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, lr_scale=None):
        self.params = list(params)
        self.base_lr = float(base_lr)
        self.betas = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_scale = dict(lr_scale) if lr_scale else {}
        self.state = OptimizerState()

    def step(self):
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        for p in self.params:
            if not p.trainable:
                p.tensor.zero_grad()
                continue
            g = p.tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise ad.NumericDomainError(f"non-finite gradient for parameter {p.name!r}")
            lr = self.base_lr * self.lr_scale.get(p.name, 1.0)
            # state keyed by identity: distinct models may reuse a name
            m = self.state.m.get(id(p))
            v = self.state.v.get(id(p))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state.m[id(p)] = m
            self.state.v[id(p)] = v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            new = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
            p.tensor.set_values(new)
            p.tensor.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.tensor.zero_grad()
