"""Procedural attribute-grounded benchmark.

Images are 32x32 grayscale renders of (texture, shape, location) triples;
the same triples drive the descriptor words, so prompts describe the true
generative factors. Rendering is keyed by a counter-based RNG on
(seed, class_id, sample_index) and is therefore order- and
thread-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (
    AdamW,
    ConfigError,
    InputError,
    TextEncoder,
    TextEncoderConfig,
    VisionEncoder,
    VisionEncoderConfig,
)
from .prompts import AttributeVocabulary, DiseaseDescriptor, build_prompt
from .prototypes import loss_ita

IMAGE_SIZE = 32

TEXTURES = ("solid", "striped", "checker", "dotted", "speckle")
SHAPES = ("disk", "square", "triangle", "ring")
LOCATIONS = ("center", "upper left", "upper right", "lower left", "lower right")

_LOCATION_CENTERS = {
    "center": (16, 16),
    "upper left": (9, 9),
    "upper right": (9, 23),
    "lower left": (23, 9),
    "lower right": (23, 23),
}

_FG_HI = 0.85
_FG_LO = 0.30
_RADIUS = 6


@dataclass(frozen=True)
class SyntheticClassSpec:
    class_id: int
    texture: str
    shape: str
    location: str
    noise_std: float = 0.05
    name: str = ""

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.location not in _LOCATION_CENTERS:
            raise ConfigError(f"unknown location {self.location!r}")

    def descriptor(self):
        return DiseaseDescriptor(self.class_id, self.texture, self.location,
                                 self.shape, name=self.name or f"class{self.class_id}")


def _shape_mask(shape, cy, cx):
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dy, dx = yy - cy, xx - cx
    r = _RADIUS
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r - 1) & (np.abs(dx) <= r - 1)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r - 3) * (r - 3))
    raise ConfigError(f"unknown shape {shape!r}")


def _texture_fill(texture, rng):
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if texture == "solid":
        return np.full((IMAGE_SIZE, IMAGE_SIZE), _FG_HI)
    if texture == "striped":
        return np.where(yy % 4 < 2, _FG_HI, _FG_LO)
    if texture == "checker":
        return np.where((yy // 2 + xx // 2) % 2 == 0, _FG_HI, _FG_LO)
    if texture == "dotted":
        # regular grid: every other pixel in both axes, 25% bright
        return np.where((yy % 2 == 0) & (xx % 2 == 0), _FG_HI, _FG_LO)
    if texture == "speckle":
        # random 25% bright pixels: first-order statistics match "dotted"
        bright = rng.random((IMAGE_SIZE, IMAGE_SIZE)) < 0.25
        return np.where(bright, _FG_HI, _FG_LO)
    raise ConfigError(f"unknown texture {texture!r}")


def render_image(spec, sample_index, seed):
    """Render one sample of a class; bit-deterministic in its arguments."""
    rng = np.random.Generator(
        np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF,
                              (spec.class_id << 32) | (sample_index & 0xFFFFFFFF)])
    )
    cy0, cx0 = _LOCATION_CENTERS[spec.location]
    cy = cy0 + int(rng.integers(-1, 2))
    cx = cx0 + int(rng.integers(-1, 2))
    mask = _shape_mask(spec.shape, cy, cx)
    fill = _texture_fill(spec.texture, rng)
    img = np.where(mask, fill, 0.0)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def render_batch(spec, indices, seed):
    return np.stack([render_image(spec, int(i), seed) for i in indices])


def quadrant_means(images):
    """Mean pixel per image quadrant, shape (n, 4): UL, UR, LL, LR."""
    images = np.asarray(images)
    half = IMAGE_SIZE // 2
    return np.stack([
        images[:, :half, :half].mean(axis=(1, 2)),
        images[:, :half, half:].mean(axis=(1, 2)),
        images[:, half:, :half].mean(axis=(1, 2)),
        images[:, half:, half:].mean(axis=(1, 2)),
    ], axis=1)


def stump_location(images):
    """Fixed decision rule over quadrant means: near-uniform -> center,
    otherwise the dominant quadrant's corner."""
    q = quadrant_means(images)
    corner = np.array(["upper left", "upper right", "lower left", "lower right"])
    pred = corner[q.argmax(axis=1)]
    # a centered shape lights up every quadrant; a cornered one only its own
    pred[q.min(axis=1) > 0.3 * q.max(axis=1)] = "center"
    return pred


# ---------------------------------------------------------------------------
# scenario assembly
# ---------------------------------------------------------------------------


def default_pretrain_specs(noise_std=0.05):
    triples = [
        ("solid", "disk", "center"),
        ("striped", "square", "upper left"),
        ("checker", "triangle", "upper right"),
        ("dotted", "ring", "lower left"),
        ("striped", "disk", "lower right"),
        ("checker", "square", "center"),
    ]
    return [SyntheticClassSpec(i, t, s, l, noise_std, name=f"class{i}")
            for i, (t, s, l) in enumerate(triples)]


def default_adaptation_specs(noise_std=0.05):
    """Four fine-grained groups for a binary task: two target (speckle)
    variants vs two benign (dotted) variants with matched shape/location,
    so texture regularity is the only reliable signal."""
    triples = [
        ("speckle", "disk", "center", "target0"),
        ("speckle", "square", "upper left", "target1"),
        ("dotted", "disk", "center", "benign0"),
        ("dotted", "square", "upper left", "benign1"),
    ]
    return [SyntheticClassSpec(100 + i, t, s, l, noise_std, name=n)
            for i, (t, s, l, n) in enumerate(triples)]


def default_task_descriptors():
    """Task-level (K=2) descriptors used for zero-shot and baselines."""
    return [
        DiseaseDescriptor(0, "dotted", "center", "disk", name="benign"),
        DiseaseDescriptor(1, "speckle", "center", "disk", name="target"),
    ]


def build_vocabulary():
    return AttributeVocabulary(
        TEXTURES, LOCATIONS, SHAPES,
        class_names=[f"class{i}" for i in range(8)]
        + ["target0", "target1", "benign0", "benign1", "target", "benign"],
    )


@dataclass
class ScenarioConfig:
    kind: str = "new"                  # "new" or "underrepresented"
    pretrain_pairs_per_class: int = 500
    adapt_samples_per_group: int = 300
    underrepresented_pairs: int = 15   # target pairs mixed into pretraining
    noise_std: float = 0.05
    data_seed: int = 1234              # fixes renders and the 7:1:2 split
    few_shot_fraction: float = 0.05

    def __post_init__(self):
        if self.kind not in ("new", "underrepresented"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if not 0 < self.few_shot_fraction <= 1:
            raise ConfigError("few_shot_fraction must be in (0, 1]")


@dataclass
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray          # task label in [0, K)
    prototype_ids: np.ndarray   # fine-grained group index in [0, C)

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.images[idx], self.labels[idx], self.prototype_ids[idx])


@dataclass
class DatasetSplit:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet


@dataclass
class Scenario:
    config: ScenarioConfig
    vocab: AttributeVocabulary
    pretrain_specs: list
    pretrain_images: np.ndarray
    pretrain_class_ids: np.ndarray        # index into pretrain_specs (+ extras)
    adapt_specs: list                     # one per prototype group
    prototype_class_map: np.ndarray       # group index -> task label
    task_descriptors: list                # K task-level descriptors
    split: DatasetSplit

    @property
    def n_classes(self):
        return len(self.task_descriptors)

    @property
    def adapt_descriptors(self):
        return [s.descriptor() for s in self.adapt_specs]

    @property
    def pretrain_descriptors(self):
        return [s.descriptor() for s in self.pretrain_specs]


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Build the pretraining corpus and the 7:1:2 adaptation split."""
    vocab = build_vocabulary()
    pre_specs = default_pretrain_specs(config.noise_std)
    adapt_specs = default_adaptation_specs(config.noise_std)
    target_groups = [i for i, s in enumerate(adapt_specs) if s.texture == "speckle"]
    class_map = np.array([1 if i in target_groups else 0 for i in range(len(adapt_specs))])

    images = []
    cids = []
    for ci, spec in enumerate(pre_specs):
        images.append(render_batch(spec, range(config.pretrain_pairs_per_class),
                                   config.data_seed))
        cids.extend([ci] * config.pretrain_pairs_per_class)
    corpus_specs = list(pre_specs)
    if config.kind == "underrepresented":
        total = len(pre_specs) * config.pretrain_pairs_per_class
        if config.underrepresented_pairs / (total + config.underrepresented_pairs) > 0.005:
            raise ConfigError("underrepresented share exceeds 0.5%")
        for gi in target_groups:
            spec = adapt_specs[gi]
            n = config.underrepresented_pairs // len(target_groups)
            images.append(render_batch(spec, range(10_000, 10_000 + n), config.data_seed))
            corpus_specs.append(spec)
            cids.extend([len(corpus_specs) - 1] * n)
    pretrain_images = np.concatenate(images, axis=0)
    pretrain_class_ids = np.array(cids, dtype=np.int64)

    # adaptation split: per fine group, a seeded permutation into 7:1:2
    rng = np.random.default_rng(config.data_seed)
    parts = {"train": [], "val": [], "test": []}
    n = config.adapt_samples_per_group
    n_train, n_val = round(0.7 * n), round(0.1 * n)
    for gi, spec in enumerate(adapt_specs):
        imgs = render_batch(spec, range(n), config.data_seed)
        perm = rng.permutation(n)
        chunks = {
            "train": perm[:n_train],
            "val": perm[n_train:n_train + n_val],
            "test": perm[n_train + n_val:],
        }
        for split_name, idx in chunks.items():
            parts[split_name].append(
                LabeledSet(imgs[idx],
                           np.full(idx.size, class_map[gi], dtype=np.int64),
                           np.full(idx.size, gi, dtype=np.int64))
            )

    def _merge(sets):
        return LabeledSet(
            np.concatenate([s.images for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.prototype_ids for s in sets]),
        )

    split = DatasetSplit(_merge(parts["train"]), _merge(parts["val"]),
                         _merge(parts["test"]))
    return Scenario(config, vocab, corpus_specs, pretrain_images,
                    pretrain_class_ids, adapt_specs, class_map,
                    default_task_descriptors(), split)


def subsample_few_shot(train: LabeledSet, fraction, seed):
    """Stratified (by fine group) seeded subsample of round(fraction * n)
    items, at least one per group."""
    n_total = len(train)
    want = int(round(fraction * n_total))
    groups = np.unique(train.prototype_ids)
    if want < groups.size:
        raise ConfigError(
            f"fraction {fraction} yields {want} samples for {groups.size} groups; "
            f"minimum fraction is {groups.size / n_total:.4f}"
        )
    rng = np.random.default_rng([seed, 917])
    # largest-remainder allocation proportional to group sizes
    sizes = np.array([(train.prototype_ids == g).sum() for g in groups])
    exact = want * sizes / sizes.sum()
    alloc = np.maximum(1, np.floor(exact).astype(int))
    while alloc.sum() < want:
        alloc[np.argmax(exact - alloc)] += 1
    while alloc.sum() > want:
        over = np.where(alloc > 1)[0]
        alloc[over[np.argmin((exact - alloc)[over])]] -= 1
    chosen = []
    for g, k in zip(groups, alloc):
        idx = np.nonzero(train.prototype_ids == g)[0]
        chosen.append(rng.choice(idx, size=k, replace=False))
    chosen = np.sort(np.concatenate(chosen))
    return train.take(chosen)


# ---------------------------------------------------------------------------
# CLIP-style pretraining
# ---------------------------------------------------------------------------


def build_encoders(vocab, seed, embed_dim=64, n_layers=2, n_heads=4):
    rng = np.random.default_rng([seed, 11])
    text = TextEncoder(TextEncoderConfig(vocab_size=len(vocab), embed_dim=embed_dim,
                                         n_layers=n_layers, n_heads=n_heads), rng)
    vision = VisionEncoder(VisionEncoderConfig(embed_dim=embed_dim, n_layers=n_layers,
                                               n_heads=n_heads), rng)
    return text, vision


def pretrain_clip(scenario, text_enc, vision_enc, epochs=20, batch_size=64,
                  lr=1e-3, tau=0.07, seed=0):
    """Symmetric contrastive pretraining on (image, caption) pairs where the
    caption is the class's attribute prompt. Both encoders train; freeze the
    text encoder afterwards for adaptation. Returns the per-epoch loss curve.
    """
    vocab = scenario.vocab
    descs = {i: s.descriptor() for i, s in enumerate(scenario.pretrain_specs)}
    prompts = {i: build_prompt(vocab, d) for i, d in descs.items()}
    images = scenario.pretrain_images
    cids = scenario.pretrain_class_ids
    n = images.shape[0]
    opt = AdamW(text_enc.parameters() + vision_enc.parameters(), base_lr=lr)
    rng = np.random.default_rng([seed, 23])
    curve = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if idx.size < 2:
                continue
            f_v = vision_enc.encode(images[idx])
            # one text forward per class present, gathered per sample
            present = np.unique(cids[idx])
            rows = [text_enc.encode(prompts[int(c)][None, :]) for c in present]
            cls_rows = ad.concat(rows, axis=0)
            pos = {int(c): j for j, c in enumerate(present)}
            gather = np.array([pos[int(c)] for c in cids[idx]])
            f_t = ad.slice_(cls_rows, (gather,))
            loss = loss_ita(f_v, f_t, tau)
            if not np.isfinite(loss.data):
                raise ad.NumericDomainError(
                    f"pretraining diverged at epoch {epoch}; last finite epoch "
                    f"{epoch - 1 if curve else 'none'}"
                )
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        curve.append(float(np.mean(losses)))
    text_enc.freeze()
    return curve


def zero_shot_scores(text_enc, vision_enc, vocab, descriptors, images, tau=0.07,
                     batch_size=256):
    """Softmax over cosine similarity to each class prompt; no training."""
    rows = [text_enc.encode(build_prompt(vocab, d)[None, :]).data for d in descriptors]
    f_t = np.concatenate(rows, axis=0)
    out = []
    for start in range(0, images.shape[0], batch_size):
        f_v = vision_enc.encode(images[start:start + batch_size]).data
        logits = (f_v @ f_t.T) / tau
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out, axis=0)
