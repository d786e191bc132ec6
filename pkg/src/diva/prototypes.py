"""Prototype learning: trainable per-category vectors anchored to their
text-prompt embeddings, plus the three training objectives and the linear
classifier used at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from . import counters
from .encoders import ConfigError, InputError, Model, trunc_normal


@dataclass
class LossWeights:
    tau1: float = 0.07
    tau2: float = 0.07
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ConfigError("temperatures must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_ita: float
    l_prot: float
    l_reg_ce: float
    l_total: float


class PrototypeSet:
    """C trainable prototype vectors with a prototype -> class-label map.

    Prototypes start exactly at the text-only prompt embeddings; those
    snapshots stay frozen as anchors for the regularizer.
    """

    def __init__(self, init_vectors, class_map, n_classes):
        init = np.asarray(init_vectors, dtype=np.float64)
        self.class_map = np.asarray(class_map, dtype=np.int64)
        self.n_classes = int(n_classes)
        if init.ndim != 2 or init.shape[0] != self.class_map.shape[0]:
            raise ConfigError("prototype init and class_map sizes disagree")
        if self.n_classes > init.shape[0]:
            raise ConfigError(
                f"class count {self.n_classes} exceeds prototype count {init.shape[0]}"
            )
        if set(self.class_map.tolist()) != set(range(self.n_classes)):
            raise ConfigError("class_map must be surjective onto [0, K)")
        self.m = Parameter("prototypes", init.copy())
        self.anchors = init.copy()
        self.anchors.setflags(write=False)

    @property
    def count(self):
        return self.m.data.shape[0]

    def anchor_drift(self):
        """Mean Euclidean distance of each prototype from its anchor."""
        return float(np.linalg.norm(self.m.data - self.anchors, axis=1).mean())


class LinearClassifier(Model):
    """Single affine map + softmax over K classes."""

    def __init__(self, embed_dim, n_classes, rng=None):
        super().__init__()
        self.n_classes = int(n_classes)
        if rng is None:
            w = np.zeros((n_classes, embed_dim))
        else:
            w = trunc_normal(rng, (n_classes, embed_dim))
        self._param("w", w)
        self._param("b", np.zeros(n_classes))

    def logits(self, f_v):
        return ad.add(ad.matmul(f_v, ad.transpose(self._params["w"].tensor, (1, 0))),
                      self._params["b"].tensor)

    def classify(self, f_v):
        return ad.softmax_rows(self.logits(f_v))


def loss_ita(f_v, f_ts, tau1):
    """Symmetric InfoNCE over the n×n similarity matrix with matched pairs
    on the diagonal; rows of both inputs must be unit-norm."""
    counters.bump("alignment_loss")
    n = f_v.data.shape[0]
    if n == 0:
        raise InputError("alignment loss on an empty batch")
    sim = ad.scale(ad.matmul(f_v, ad.transpose(f_ts, (1, 0))), 1.0 / tau1)
    eye = Tensor(np.eye(n))
    a = ad.mean(ad.cross_entropy_rows(sim, eye))
    b = ad.mean(ad.cross_entropy_rows(ad.transpose(sim, (1, 0)), eye))
    return ad.scale(ad.add(a, b), 0.5)


def loss_prot(f_v, f_ts, prototype_ids, prototypes, tau2, lambda1,
              sign_mode="corrected"):
    """Prototype attraction + separation.

    Attraction (per prototype present in the batch): mean of
    exp(cos(f, m_k)/tau2) over both feature routes, weighted 1/(2|S_k|).
    Separation: lambda1 * sum over ordered pairs k != j of
    exp(cos(m_k, m_j)/tau2) over the full prototype set.

    sign_mode "corrected" attracts samples to their prototype and repels
    prototypes from each other; "as_printed" flips both signs for audit.
    """
    counters.bump("prototype_loss")
    if sign_mode not in ("corrected", "as_printed"):
        raise ConfigError(f"unknown sign_mode {sign_mode!r}")
    ids = np.asarray(prototype_ids, dtype=np.int64)
    n = ids.shape[0]
    if n == 0:
        raise InputError("prototype loss on an empty batch")
    C = prototypes.count
    if ids.min() < 0 or ids.max() >= C:
        raise InputError("prototype id out of range")

    mn = ad.l2_normalize_rows(prototypes.m.tensor)
    fvn = ad.l2_normalize_rows(f_v)
    ftsn = ad.l2_normalize_rows(f_ts)
    cos_v = ad.matmul(fvn, ad.transpose(mn, (1, 0)))
    cos_t = ad.matmul(ftsn, ad.transpose(mn, (1, 0)))

    weights = np.zeros((n, C))
    for k in np.unique(ids):
        members = ids == k
        weights[members, k] = 1.0 / (2.0 * members.sum())
    both = ad.add(ad.exp(ad.scale(cos_v, 1.0 / tau2)),
                  ad.exp(ad.scale(cos_t, 1.0 / tau2)))
    attraction = ad.sum_(ad.mul(both, Tensor(weights)))

    cos_mm = ad.matmul(mn, ad.transpose(mn, (1, 0)))
    off_diag = Tensor(1.0 - np.eye(C))
    separation = ad.sum_(ad.mul(ad.exp(ad.scale(cos_mm, 1.0 / tau2)), off_diag))

    loss = ad.add(ad.scale(attraction, -1.0), ad.scale(separation, lambda1))
    if sign_mode == "as_printed":
        loss = ad.scale(loss, -1.0)
    return loss


def loss_reg_ce(p, y_onehot, prototypes, lambda2):
    """Cross entropy on predicted probabilities plus the mean prototype
    distance to the frozen anchors, weighted lambda2."""
    n = p.data.shape[0]
    if n == 0:
        raise InputError("cross-entropy loss on an empty batch")
    y = y_onehot if isinstance(y_onehot, Tensor) else Tensor(np.asarray(y_onehot, float))
    ce = ad.scale(ad.sum_(ad.mul(ad.log_floor(p, 1e-12), y)), -1.0 / n)
    drift = ad.l2_norm_rows(ad.sub(prototypes.m.tensor, Tensor(prototypes.anchors)))
    reg = ad.scale(ad.sum_(drift), lambda2 / prototypes.count)
    return ad.add(ce, reg)


def total_loss(f_v, f_ts, probs, y_onehot, prototype_ids, prototypes, weights,
               enable_ita=True, enable_prot=True, enable_reg=True,
               sign_mode="corrected"):
    """Sum of the three objectives; disabled terms contribute exactly 0.

    Returns (scalar tensor for backward, LossBreakdown of float values).
    """
    zero = Tensor(np.zeros(()))
    ita = loss_ita(f_v, f_ts, weights.tau1) if enable_ita else zero
    prot = (loss_prot(f_v, f_ts, prototype_ids, prototypes, weights.tau2,
                      weights.lambda1, sign_mode=sign_mode)
            if enable_prot else zero)
    lam2 = weights.lambda2 if enable_reg else 0.0
    reg = loss_reg_ce(probs, y_onehot, prototypes, lam2)
    total = ad.add(ad.add(ita, prot), reg)
    breakdown = LossBreakdown(float(ita.data), float(prot.data),
                              float(reg.data), float(total.data))
    return total, breakdown
