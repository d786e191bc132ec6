"""Desk-scale comparison methods: linear probing, a residual feature
adapter, and learned-context prompting with and without per-image
conditioning. All consume the same training budget as the main method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoders import AdamW, ConfigError, Model, trunc_normal
from .prompts import CLS_ID, build_prompt
from .prototypes import LinearClassifier

BASELINE_KINDS = ("linear_probe", "clip_adapter", "coop", "cocoop")


@dataclass
class TrainBudget:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 5e-4
    seed: int = 0


@dataclass
class BaselineConfig:
    kind: str = "linear_probe"
    adapter_bottleneck: int = 16
    adapter_blend: float = 0.2
    context_length: int = 4
    meta_compression: int = 16
    tau: float = 0.07

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if not 0.0 <= self.adapter_blend <= 1.0:
            raise ConfigError("adapter blend ratio must be in [0, 1]")


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _onehot(labels, k):
    return np.eye(k)[np.asarray(labels, dtype=np.int64)]


def _fit_with_selection(params, batch_loss, n, budget, stream, val_fn=None):
    """Shared AdamW loop. With val_fn, keeps the parameter state of the
    best validation score (ties -> earliest epoch) and restores it."""
    rng = np.random.default_rng([budget.seed, stream])
    opt = AdamW(params, base_lr=budget.lr)
    best_score, best_state = -np.inf, None
    for _ in range(budget.epochs):
        for idx in _batches(n, budget.batch_size, rng):
            loss = batch_loss(idx)
            ad.backward(loss)
            opt.step()
        if val_fn is not None:
            score = val_fn()
            if score > best_score:
                best_score = score
                best_state = [p.data.copy() for p in params]
    if best_state is not None:
        for p, arr in zip(params, best_state):
            p.tensor.set_values(arr)


class LinearProbe:
    """K-way affine+softmax head on frozen image features."""

    def __init__(self, embed_dim, n_classes):
        self.head = LinearClassifier(embed_dim, n_classes)

    def fit(self, features, labels, budget: TrainBudget, val_fn=None):
        y = _onehot(labels, self.head.n_classes)

        def batch_loss(idx):
            logits = self.head.logits(Tensor(features[idx]))
            return ad.mean(ad.cross_entropy_rows(logits, Tensor(y[idx])))

        _fit_with_selection(self.head.parameters(), batch_loss,
                            features.shape[0], budget, 41, val_fn)
        return self

    def predict_proba(self, features):
        return self.head.classify(Tensor(features)).data


class ClipAdapter:
    """Residual bottleneck adapter on frozen features; classification by
    similarity to fixed class-prompt embeddings."""

    def __init__(self, embed_dim, prompt_features, config: BaselineConfig, rng):
        self.config = config
        self.prompt_features = np.asarray(prompt_features, dtype=np.float64)
        b = config.adapter_bottleneck
        self.net = Model()
        self.net._param("w1", trunc_normal(rng, (b, embed_dim)))
        self.net._param("b1", np.zeros(b))
        # zero second layer: the adapted feature starts at (1-blend) * f_v
        self.net._param("w2", np.zeros((embed_dim, b)))
        self.net._param("b2", np.zeros(embed_dim))

    def adapt(self, f_v):
        P = self.net.named_parameters()
        hmid = ad.relu(ad.add(ad.matmul(f_v, ad.transpose(P["w1"].tensor, (1, 0))),
                              P["b1"].tensor))
        a = ad.add(ad.matmul(hmid, ad.transpose(P["w2"].tensor, (1, 0))), P["b2"].tensor)
        blend = self.config.adapter_blend
        return ad.add(ad.scale(a, blend), ad.scale(f_v, 1.0 - blend))

    def logits(self, f_v):
        adapted = ad.l2_normalize_rows(self.adapt(f_v))
        return ad.scale(ad.matmul(adapted, Tensor(self.prompt_features.T)),
                        1.0 / self.config.tau)

    def fit(self, features, labels, budget: TrainBudget, val_fn=None):
        y = _onehot(labels, self.prompt_features.shape[0])

        def batch_loss(idx):
            return ad.mean(ad.cross_entropy_rows(self.logits(Tensor(features[idx])),
                                                 Tensor(y[idx])))

        _fit_with_selection(self.net.parameters(), batch_loss,
                            features.shape[0], budget, 43, val_fn)
        return self

    def predict_proba(self, features):
        logits = self.logits(Tensor(features)).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class ContextPrompter:
    """Learned context tokens shared across classes (optionally conditioned
    per image by a bottleneck meta-net), classifying by prompt similarity.
    The text encoder stays frozen; only contexts (and the meta-net) train."""

    def __init__(self, text_encoder, vocab, descriptors, config: BaselineConfig,
                 rng, conditioned=False, use_class_token=True,
                 init_context=None, class_specific=False):
        self.text_encoder = text_encoder
        self.vocab = vocab
        self.descriptors = list(descriptors)
        self.config = config
        self.conditioned = conditioned
        self.use_class_token = use_class_token
        self.class_specific = class_specific
        h = text_encoder.config.embed_dim
        C = len(self.descriptors)
        if init_context is not None:
            ctx0 = np.asarray(init_context, dtype=np.float64)
            m = ctx0.shape[-2]
        else:
            m = config.context_length
            shape = (C, m, h) if class_specific else (m, h)
            ctx0 = trunc_normal(rng, shape)
        self.context = Parameter("context", ctx0)
        self.m = m
        self.meta = None
        if conditioned:
            b = max(1, h // config.meta_compression)
            self.meta = Model()
            self.meta._param("w1", trunc_normal(rng, (b, h)))
            self.meta._param("b1", np.zeros(b))
            self.meta._param("w2", np.zeros((h, b)))  # zero-init: starts as coop
            self.meta._param("b2", np.zeros(h))
        self.class_token_ids = [
            self.vocab.tokenize(d.name) for d in self.descriptors
        ]
        for ids in self.class_token_ids:
            if len(ids) != 1:
                raise ConfigError("context prompting expects single-token class names")

    def parameters(self):
        out = [self.context]
        if self.meta is not None:
            out += self.meta.parameters()
        return out

    def _meta_shift(self, f_v):
        P = self.meta.named_parameters()
        hmid = ad.relu(ad.add(ad.matmul(f_v, ad.transpose(P["w1"].tensor, (1, 0))),
                              P["b1"].tensor))
        return ad.add(ad.matmul(hmid, ad.transpose(P["w2"].tensor, (1, 0))),
                      P["b2"].tensor)

    def class_prompt_features(self, f_v=None):
        """Encode every class prompt; with conditioning, one set of C
        prompts per image in f_v, returning (n, C, h), else (C, h)."""
        te = self.text_encoder
        h = te.config.embed_dim
        tok_tab = te._params["tok_embed"].tensor
        pos = te._params["pos_embed"].tensor
        seq_len = 1 + self.m + (1 if self.use_class_token else 0)
        shift = None
        if self.conditioned:
            if f_v is None:
                raise ConfigError("conditioned prompting needs image features")
            shift = self._meta_shift(f_v)
        rows = []
        for ci in range(len(self.descriptors)):
            cls_emb = ad.embedding(tok_tab, np.array([[CLS_ID]]))
            if self.class_specific:
                ctx = ad.reshape(ad.slice_(self.context.tensor, (ci,)), (1, self.m, h))
            else:
                ctx = ad.reshape(self.context.tensor, (1, self.m, h))
            parts = [cls_emb, ctx]
            if self.use_class_token:
                parts.append(ad.embedding(tok_tab, np.array([self.class_token_ids[ci]])))
            seq = ad.concat(parts, axis=1)
            seq = ad.add(seq, ad.slice_(pos, (slice(0, seq_len),)))
            if shift is not None:
                n = shift.data.shape[0]
                mask = np.ones((1, seq_len, 1))
                mask[0, 0, 0] = 0.0
                if self.use_class_token:
                    mask[0, -1, 0] = 0.0
                tiled = ad.add(seq, ad.mul(ad.reshape(shift, (n, 1, h)), Tensor(mask)))
                rows.append(te.forward_embedded(tiled))
            else:
                rows.append(te.forward_embedded(seq))
        if shift is not None:
            stacked = ad.concat([ad.reshape(r, (r.data.shape[0], 1, h)) for r in rows],
                                axis=1)
            return stacked
        return ad.concat(rows, axis=0)

    def logits(self, f_v):
        if self.conditioned:
            prompts = self.class_prompt_features(f_v)  # (n, C, h)
            n, C, h = prompts.data.shape
            fe = ad.reshape(f_v, (n, 1, h))
            sims = ad.sum_(ad.mul(prompts, fe), axis=2)
            return ad.scale(sims, 1.0 / self.config.tau)
        prompts = self.class_prompt_features()  # (C, h)
        return ad.scale(ad.matmul(f_v, ad.transpose(prompts, (1, 0))),
                        1.0 / self.config.tau)

    def fit(self, features, labels, budget: TrainBudget, val_fn=None):
        y = _onehot(labels, len(self.descriptors))

        def batch_loss(idx):
            return ad.mean(ad.cross_entropy_rows(self.logits(Tensor(features[idx])),
                                                 Tensor(y[idx])))

        _fit_with_selection(self.parameters(), batch_loss,
                            features.shape[0], budget, 47, val_fn)
        return self

    def predict_proba(self, features):
        logits = self.logits(Tensor(features)).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @classmethod
    def from_handcrafted_prompts(cls, text_encoder, vocab, descriptors, config, rng):
        """Class-specific contexts initialized to each class's hand-crafted
        attribute-word embeddings (no class token), so the initial logits
        equal the zero-shot logits exactly."""
        seqs = [build_prompt(vocab, d)[1:] for d in descriptors]
        if len({len(s) for s in seqs}) != 1:
            raise ConfigError("hand-crafted prompt init needs equal-length prompts")
        init = np.stack([text_encoder._params["tok_embed"].data[s] for s in seqs])
        return cls(text_encoder, vocab, descriptors, config, rng,
                   conditioned=False, use_class_token=False,
                   init_context=init, class_specific=True)
