"""Attribute-structured contextual prompting.

Class prompts are built from texture/location/shape descriptor words over a
closed vocabulary, and can be augmented per image by adding a projected
image feature to every non-[CLS] token embedding before the (frozen) text
encoder runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ConfigError, InputError, Model, TextEncoder, trunc_normal
from . import counters

CLS_TOKEN = "[CLS]"
CLS_ID = 0


@dataclass
class DiseaseDescriptor:
    class_id: int
    texture_desc: str
    location_desc: str
    shape_desc: str
    name: str = ""

    def __post_init__(self):
        if not (self.texture_desc and self.location_desc and self.shape_desc):
            raise ConfigError(f"descriptor for class {self.class_id} has empty fields")
        if not self.name:
            self.name = f"class{self.class_id}"


class AttributeVocabulary:
    """Closed word list with a word -> token-id map; id 0 is [CLS]."""

    def __init__(self, textures, locations, shapes, class_names=()):
        self.textures = list(textures)
        self.locations = list(locations)
        self.shapes = list(shapes)
        self.class_names = list(class_names)
        groups = [self._words(self.textures), self._words(self.locations),
                  self._words(self.shapes)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = groups[i] & groups[j]
                if overlap:
                    raise ConfigError(f"attribute word groups overlap: {sorted(overlap)}")
        self.word_to_id = {CLS_TOKEN: CLS_ID}
        for phrase in self.textures + self.locations + self.shapes + self.class_names:
            for w in phrase.split():
                if w not in self.word_to_id:
                    self.word_to_id[w] = len(self.word_to_id)

    @staticmethod
    def _words(phrases):
        out = set()
        for p in phrases:
            out.update(p.split())
        return out

    def __len__(self):
        return len(self.word_to_id)

    def tokenize(self, phrase):
        ids = []
        for w in phrase.split():
            if w not in self.word_to_id:
                raise InputError(f"word {w!r} is not in the vocabulary")
            ids.append(self.word_to_id[w])
        return ids


def build_prompt(vocab, descriptor, with_attributes=True):
    """Token sequence [CLS] texture ++ location ++ shape (attribute order is
    significant). With attributes disabled: [CLS] class-name only."""
    if not with_attributes:
        return np.array([CLS_ID] + vocab.tokenize(descriptor.name), dtype=np.int64)
    ids = [CLS_ID]
    ids += vocab.tokenize(descriptor.texture_desc)
    ids += vocab.tokenize(descriptor.location_desc)
    ids += vocab.tokenize(descriptor.shape_desc)
    return np.array(ids, dtype=np.int64)


def parse_descriptor_file(text):
    """Parse `class_id|texture|location|shape` lines; `#` starts a comment."""
    out = []
    seen = set()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 4:
            raise InputError(f"descriptor line {ln}: expected 4 '|'-separated fields")
        cid = int(parts[0])
        if cid in seen:
            raise InputError(f"descriptor line {ln}: duplicate class id {cid}")
        seen.add(cid)
        out.append(DiseaseDescriptor(cid, parts[1], parts[2], parts[3]))
    return out


def format_descriptor_file(descriptors):
    lines = ["# class_id|texture|location|shape"]
    for d in descriptors:
        lines.append(f"{d.class_id}|{d.texture_desc}|{d.location_desc}|{d.shape_desc}")
    return "\n".join(lines) + "\n"


class ContextProjector(Model):
    """Two affine maps with a ReLU between, bottlenecked at floor(h/16);
    maps an image feature to a token-embedding-sized context vector."""

    def __init__(self, embed_dim, rng, compression=16):
        super().__init__()
        self.embed_dim = int(embed_dim)
        self.bottleneck = self.embed_dim // compression
        if self.bottleneck < 1:
            raise ConfigError(
                f"embed_dim {embed_dim} too small for compression factor {compression}"
            )
        self._param("w1", trunc_normal(rng, (self.bottleneck, self.embed_dim)))
        self._param("b1", np.zeros(self.bottleneck))
        self._param("w2", trunc_normal(rng, (self.embed_dim, self.bottleneck)))
        self._param("b2", np.zeros(self.embed_dim))

    def project(self, f_v):
        """f_v (n, h) -> context vectors (n, h)."""
        if f_v.data.shape[-1] != self.embed_dim:
            raise ConfigError(
                f"projector expects dim {self.embed_dim}, got {f_v.data.shape[-1]}"
            )
        counters.bump("context_project")
        hmid = ad.relu(ad.add(ad.matmul(f_v, ad.transpose(self._params["w1"].tensor, (1, 0))),
                              self._params["b1"].tensor))
        return ad.add(ad.matmul(hmid, ad.transpose(self._params["w2"].tensor, (1, 0))),
                      self._params["b2"].tensor)


def inject_context(token_embeddings, f_s):
    """Add f_s (n, h) to every token embedding except position 0 ([CLS])."""
    n, T, h = token_embeddings.data.shape
    if f_s.data.shape != (n, h):
        raise ConfigError(f"context shape {f_s.data.shape} != ({n}, {h})")
    mask = np.ones((1, T, 1))
    mask[0, 0, 0] = 0.0
    shift = ad.mul(ad.reshape(f_s, (n, 1, h)), Tensor(mask))
    return ad.add(token_embeddings, shift)


@dataclass
class PromptBundle:
    """Encoded prompts for one batch: text-only vectors per class plus
    optional per-image context-augmented vectors."""

    class_ids: list
    token_seqs: dict
    f_t: Tensor              # (C, h), row order matches class_ids
    f_ts: Tensor | None = None   # (n, h), batch order
    f_ts_class_ids: np.ndarray | None = None

    def f_t_row(self, class_id):
        return self.class_ids.index(class_id)


def encode_text_prompts(text_encoder: TextEncoder, vocab, descriptors,
                        with_attributes=True):
    """Encode each class prompt; returns (PromptBundle with f_t only)."""
    if not descriptors:
        raise ConfigError("no descriptors given")
    rows = []
    seqs = {}
    for d in descriptors:
        tokens = build_prompt(vocab, d, with_attributes=with_attributes)
        seqs[d.class_id] = tokens
        rows.append(text_encoder.encode(tokens[None, :]))
    f_t = ad.concat(rows, axis=0)
    return PromptBundle([d.class_id for d in descriptors], seqs, f_t)


def encode_prompts(text_encoder, vocab, descriptors, f_v=None, class_ids=None,
                   projector=None, with_attributes=True, use_context=True):
    """Full prompt pipeline.

    Always produces the C text-only vectors f_t. When image features f_v
    (n, h) and their per-image class ids are given, additionally produces
    n context-augmented vectors f_ts, each from a full text-encoder pass
    over the image's own class prompt with the projected context added.
    Gradients flow through f_v and the projector; the text encoder's own
    parameters stay frozen (they accumulate no gradient).
    """
    counters.bump("prompt_encode")
    bundle = encode_text_prompts(text_encoder, vocab, descriptors,
                                 with_attributes=with_attributes)
    if f_v is None:
        return bundle
    if class_ids is None or projector is None:
        raise ConfigError("context encoding needs class_ids and a projector")
    class_ids = np.asarray(class_ids, dtype=np.int64)
    n = f_v.data.shape[0]
    if class_ids.shape != (n,):
        raise ConfigError(f"class_ids shape {class_ids.shape} != ({n},)")

    if use_context:
        f_s = projector.project(f_v)
    else:
        f_s = ad.scale(projector.project(f_v), 0.0)

    # group images by class so each group shares one token sequence
    pieces = []
    order = []
    for cid in bundle.class_ids:
        idx = np.nonzero(class_ids == cid)[0]
        if idx.size == 0:
            continue
        tokens = bundle.token_seqs[cid]
        emb = text_encoder.embed(np.tile(tokens, (idx.size, 1)))
        f_s_group = ad.slice_(f_s, (idx,))
        aug = inject_context(emb, f_s_group)
        pieces.append(text_encoder.forward_embedded(aug))
        order.extend(idx.tolist())
    if len(order) != n:
        missing = sorted(set(class_ids.tolist()) - set(bundle.class_ids))
        raise ConfigError(f"batch contains unknown class ids {missing}")
    inv = np.argsort(np.array(order))
    stacked = ad.concat(pieces, axis=0)
    bundle.f_ts = ad.slice_(stacked, (inv,))
    bundle.f_ts_class_ids = class_ids
    return bundle
