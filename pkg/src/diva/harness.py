"""Experiment orchestration: pretraining artifacts, the adaptation loop
with best-validation-epoch selection, baselines under the same budget,
data-efficiency sweeps, ablations, and embedding export."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad, counters
from .baselines import (
    BaselineConfig,
    ClipAdapter,
    ContextPrompter,
    LinearProbe,
    TrainBudget,
)
from .bench import (
    Scenario,
    build_encoders,
    pretrain_clip,
    subsample_few_shot,
    zero_shot_scores,
)
from .checkpoint import config_fingerprint, load_checkpoint, save_checkpoint
from .config import ABLATION_VARIANTS, ExperimentConfig
from .encoders import AdamW, ConfigError, layerwise_lr
from .metrics import MetricSet, compute_metrics, pca_2d
from .prompts import ContextProjector, encode_prompts, encode_text_prompts
from .prototypes import LinearClassifier, PrototypeSet, total_loss

MAIN_METHOD = "dicop_dpl"

_INFERENCE_FORBIDDEN = ("prompt_encode", "context_project", "prototype_loss",
                        "alignment_loss")


class MissingPretrainError(FileNotFoundError):
    pass


def evaluate(vision_enc, classifier, images, labels, batch_size=256):
    """Test-time evaluation through the vision encoder and classifier only;
    asserts that no prompt/prototype code path runs."""
    before = counters.snapshot()
    scores = []
    for start in range(0, images.shape[0], batch_size):
        f_v = vision_enc.encode(images[start:start + batch_size])
        scores.append(classifier.classify(f_v).data)
    after = counters.snapshot()
    for key in _INFERENCE_FORBIDDEN:
        if after.get(key, 0) != before.get(key, 0):
            raise AssertionError(f"inference exercised forbidden path {key!r}")
    scores = np.concatenate(scores, axis=0)
    return compute_metrics(scores, labels, n_classes=classifier.n_classes), scores


@dataclass
class VariantFlags:
    enable_ita: bool = True
    enable_prot: bool = True
    enable_reg: bool = True
    use_context: bool = True
    with_attributes: bool = True


def variant_flags(variant):
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return {
        "full": VariantFlags(),
        "wo_ita": VariantFlags(enable_ita=False),
        "wo_prot": VariantFlags(enable_prot=False),
        "plain_ce": VariantFlags(enable_reg=False),
        "no_projector": VariantFlags(use_context=False),
        "no_attributes": VariantFlags(with_attributes=False),
    }[variant]


@dataclass
class SeedResult:
    method: str
    variant: str
    fraction: float
    seed: int
    metrics: MetricSet
    scores: np.ndarray
    best_epoch: int = -1
    loss_curve: list = field(default_factory=list)
    drift_curve: list = field(default_factory=list)
    wall_time: float = 0.0
    model_arrays: dict | None = None


# ---------------------------------------------------------------------------
# pretraining artifact
# ---------------------------------------------------------------------------


@dataclass
class PretrainArtifact:
    text_arrays: dict
    vision_arrays: dict
    loss_curve: list


def run_pretraining(cfg: ExperimentConfig, scenario: Scenario) -> PretrainArtifact:
    text_enc, vision_enc = _fresh_encoders(cfg, scenario, cfg.run.pretrain_seed)
    curve = pretrain_clip(scenario, text_enc, vision_enc,
                          epochs=cfg.run.pretrain_epochs,
                          batch_size=cfg.run.pretrain_batch_size,
                          lr=cfg.run.pretrain_lr, tau=cfg.train.tau1,
                          seed=cfg.run.pretrain_seed)
    return PretrainArtifact(text_enc.state_arrays(), vision_enc.state_arrays(), curve)


def _fresh_encoders(cfg, scenario, seed):
    return build_encoders(scenario.vocab, seed, embed_dim=cfg.model.embed_dim,
                          n_layers=cfg.model.n_layers, n_heads=cfg.model.n_heads)


def save_pretrain(path, artifact: PretrainArtifact, cfg: ExperimentConfig):
    arrays = {f"text.{k}": v for k, v in artifact.text_arrays.items()}
    arrays.update({f"vision.{k}": v for k, v in artifact.vision_arrays.items()})
    arrays["pretrain.loss_curve"] = np.asarray(artifact.loss_curve)
    save_checkpoint(path, arrays, config_fingerprint(cfg.fingerprint_text()))


def load_pretrain(path, cfg: ExperimentConfig) -> PretrainArtifact:
    try:
        arrays, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise MissingPretrainError(
            f"no pretraining checkpoint at {path}; run the `pretrain` command first"
        ) from None
    text = {k[5:]: v for k, v in arrays.items() if k.startswith("text.")}
    vision = {k[7:]: v for k, v in arrays.items() if k.startswith("vision.")}
    curve = arrays.get("pretrain.loss_curve", np.array([])).tolist()
    return PretrainArtifact(text, vision, curve)


def restore_encoders(cfg, scenario, artifact, freeze_text=True):
    text_enc, vision_enc = _fresh_encoders(cfg, scenario, 0)
    text_enc.load_state_arrays(artifact.text_arrays)
    vision_enc.load_state_arrays(artifact.vision_arrays)
    if freeze_text:
        text_enc.freeze()
    return text_enc, vision_enc


# ---------------------------------------------------------------------------
# the main adaptation method
# ---------------------------------------------------------------------------


@dataclass
class AdaptedModel:
    text_enc: object
    vision_enc: object
    projector: ContextProjector
    classifier: LinearClassifier
    prototypes: PrototypeSet
    flags: VariantFlags

    def trainables(self):
        return (self.vision_enc.trainable_parameters()
                + self.projector.trainable_parameters()
                + self.classifier.trainable_parameters()
                + [self.prototypes.m])

    def state_arrays(self):
        out = {f"vision.{k}": v for k, v in self.vision_enc.state_arrays().items()}
        out.update({f"text.{k}": v for k, v in self.text_enc.state_arrays().items()})
        out.update({f"projector.{k}": v for k, v in self.projector.state_arrays().items()})
        out.update({f"classifier.{k}": v for k, v in self.classifier.state_arrays().items()})
        out["prototypes.m"] = self.prototypes.m.data.copy()
        out["prototypes.anchors"] = np.asarray(self.prototypes.anchors).copy()
        return out


def build_adapted_model(cfg: ExperimentConfig, scenario: Scenario,
                        artifact: PretrainArtifact, seed, variant="full"):
    flags = variant_flags(variant)
    text_enc, vision_enc = restore_encoders(cfg, scenario, artifact)
    h = cfg.model.embed_dim
    if cfg.model.finetune == "lora":
        vision_enc.attach_lora(cfg.model.lora_rank, cfg.model.lora_alpha,
                               rng=np.random.default_rng([seed, 7]))
    projector = ContextProjector(h, np.random.default_rng([seed, 13]))
    anchors = encode_text_prompts(text_enc, scenario.vocab,
                                  scenario.adapt_descriptors,
                                  with_attributes=flags.with_attributes)
    prototypes = PrototypeSet(anchors.f_t.data, scenario.prototype_class_map,
                              scenario.n_classes)
    classifier = LinearClassifier(h, scenario.n_classes)
    return AdaptedModel(text_enc, vision_enc, projector, classifier,
                        prototypes, flags)


def _lr_scales(cfg, vision_enc):
    if cfg.model.finetune != "layer_decay":
        return {}
    n = vision_enc.n_layer_groups
    beta = cfg.model.layer_decay_beta
    return {
        p.name: layerwise_lr(vision_enc.layer_group(p.name), n, 1.0, beta)
        for p in vision_enc.parameters()
    }


def train_adapted(model: AdaptedModel, train_set, cfg: ExperimentConfig,
                  scenario: Scenario, seed, val_set=None):
    """Adaptation loop; returns (loss_curve, drift_curve, best_epoch)."""
    weights = cfg.train.weights()
    opt = AdamW(model.trainables(), base_lr=cfg.train.lr,
                weight_decay=cfg.train.weight_decay,
                lr_scale=_lr_scales(cfg, model.vision_enc))
    rng = np.random.default_rng([seed, 101])
    descs = scenario.adapt_descriptors
    proto_to_desc = np.array([d.class_id for d in descs])
    y = np.eye(scenario.n_classes)[train_set.labels]
    n = len(train_set)
    loss_curve, drift_curve = [], []
    best = (-np.inf, None, -1)
    for epoch in range(cfg.train.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.train.batch_size):
            idx = perm[start:start + cfg.train.batch_size]
            f_v = model.vision_enc.encode(train_set.images[idx])
            bundle = encode_prompts(
                model.text_enc, scenario.vocab, descs,
                f_v=f_v, class_ids=proto_to_desc[train_set.prototype_ids[idx]],
                projector=model.projector,
                with_attributes=model.flags.with_attributes,
                use_context=model.flags.use_context,
            )
            probs = model.classifier.classify(f_v)
            loss, breakdown = total_loss(
                f_v, bundle.f_ts, probs, y[idx], train_set.prototype_ids[idx],
                model.prototypes, weights,
                enable_ita=model.flags.enable_ita,
                enable_prot=model.flags.enable_prot,
                enable_reg=model.flags.enable_reg,
                sign_mode=cfg.train.sign_mode,
            )
            ad.backward(loss)
            opt.step()
            epoch_losses.append(breakdown)
        loss_curve.append(epoch_losses[-1])
        drift_curve.append(model.prototypes.anchor_drift())
        if val_set is not None:
            m, _ = evaluate(model.vision_enc, model.classifier,
                            val_set.images, val_set.labels)
            if m.weighted_f1 > best[0]:
                snap = [p.data.copy() for p in model.trainables()]
                best = (m.weighted_f1, snap, epoch)
    if best[1] is not None:
        for p, arr in zip(model.trainables(), best[1]):
            p.tensor.set_values(arr)
    return loss_curve, drift_curve, best[2]


# ---------------------------------------------------------------------------
# per-seed dispatch (main method and baselines)
# ---------------------------------------------------------------------------


def _frozen_features(cfg, scenario, artifact):
    """Image features of all splits under the frozen pretrained encoder,
    shared by every baseline run."""
    _, vision_enc = restore_encoders(cfg, scenario, artifact)
    out = {}
    for name in ("train", "val", "test"):
        part = getattr(scenario.split, name)
        feats = []
        for start in range(0, len(part), 256):
            feats.append(vision_enc.encode(part.images[start:start + 256]).data)
        out[name] = np.concatenate(feats, axis=0)
    return out


def _task_prompt_features(cfg, scenario, artifact):
    text_enc, _ = restore_encoders(cfg, scenario, artifact)
    bundle = encode_text_prompts(text_enc, scenario.vocab, scenario.task_descriptors)
    return bundle.f_t.data, text_enc


def run_single(cfg: ExperimentConfig, scenario: Scenario,
               artifact: PretrainArtifact, method, seed, fraction,
               variant="full", features=None) -> SeedResult:
    """One (method, seed, fraction) adaptation run on the shared split."""
    t0 = time.perf_counter()
    train = subsample_few_shot(scenario.split.train, fraction, seed)
    val, test = scenario.split.val, scenario.split.test
    budget = TrainBudget(cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, seed)

    if method == MAIN_METHOD:
        model = build_adapted_model(cfg, scenario, artifact, seed, variant)
        loss_curve, drift_curve, best_epoch = train_adapted(
            model, train, cfg, scenario, seed, val_set=val)
        metrics, scores = evaluate(model.vision_enc, model.classifier,
                                   test.images, test.labels)
        return SeedResult(method, variant, fraction, seed, metrics, scores,
                          best_epoch, loss_curve, drift_curve,
                          time.perf_counter() - t0, model.state_arrays())

    if variant != "full":
        raise ConfigError("ablation variants apply to the main method only")
    feats = features if features is not None else _frozen_features(cfg, scenario, artifact)
    train_idx_feats = feats["train"]
    # recover the subsample's feature rows by index within the full train set
    sub_idx = _subsample_indices(scenario.split.train, train)
    f_train = train_idx_feats[sub_idx]

    K = scenario.n_classes
    h = cfg.model.embed_dim

    def val_fn_for(predict):
        def val_fn():
            return compute_metrics(predict(feats["val"]), val.labels, K).weighted_f1
        return val_fn

    if method == "linear_probe":
        probe = LinearProbe(h, K)
        probe.fit(f_train, train.labels, budget, val_fn=val_fn_for(probe.predict_proba))
        scores = probe.predict_proba(feats["test"])
    elif method == "clip_adapter":
        prompt_feats, _ = _task_prompt_features(cfg, scenario, artifact)
        adapter = ClipAdapter(h, prompt_feats, BaselineConfig(kind="clip_adapter"),
                              np.random.default_rng([seed, 53]))
        adapter.fit(f_train, train.labels, budget,
                    val_fn=val_fn_for(adapter.predict_proba))
        scores = adapter.predict_proba(feats["test"])
    elif method in ("coop", "cocoop"):
        _, text_enc = _task_prompt_features(cfg, scenario, artifact)
        prompter = ContextPrompter(text_enc, scenario.vocab,
                                   scenario.task_descriptors,
                                   BaselineConfig(kind=method),
                                   np.random.default_rng([seed, 59]),
                                   conditioned=(method == "cocoop"))
        prompter.fit(f_train, train.labels, budget,
                     val_fn=val_fn_for(prompter.predict_proba))
        scores = prompter.predict_proba(feats["test"])
    else:
        raise ConfigError(f"unknown method {method!r}")
    metrics = compute_metrics(scores, test.labels, K)
    return SeedResult(method, variant, fraction, seed, metrics, scores,
                      wall_time=time.perf_counter() - t0)


def _subsample_indices(full_train, subset):
    """Indices of subset rows within the full train set (order-preserving).

    subsample_few_shot returns sorted original indices, so matching on
    (prototype_id, image hash) is unnecessary; recompute the same index set.
    """
    # identical computation path as subsample_few_shot: match images by id
    key = {arr.tobytes(): i for i, arr in enumerate(full_train.images)}
    return np.array([key[arr.tobytes()] for arr in subset.images], dtype=np.int64)


def run_adaptation(cfg: ExperimentConfig, scenario, artifact,
                   methods=None, fraction=None, variant="full"):
    """All (method, seed) runs at one data fraction."""
    methods = list(methods or cfg.run.methods)
    fraction = cfg.run.data_fraction if fraction is None else fraction
    features = _frozen_features(cfg, scenario, artifact)
    results = []
    for method in methods:
        for seed in cfg.run.seeds:
            results.append(run_single(cfg, scenario, artifact, method, seed,
                                      fraction, variant, features=features))
    return results


def sweep_data_fraction(cfg: ExperimentConfig, scenario, artifact,
                        fractions=None, methods=(MAIN_METHOD, "linear_probe")):
    fractions = list(fractions or cfg.run.sweep_fractions)
    if fractions != sorted(fractions):
        raise ConfigError("sweep fractions must be sorted ascending")
    features = _frozen_features(cfg, scenario, artifact)
    results = []
    for fraction in fractions:
        for method in methods:
            for seed in cfg.run.seeds:
                results.append(run_single(cfg, scenario, artifact, method, seed,
                                          fraction, features=features))
    return results


def run_ablation(cfg: ExperimentConfig, scenario, artifact):
    """Full model plus the five leave-one-out variants, same seeds."""
    results = []
    for variant in ABLATION_VARIANTS:
        for seed in cfg.run.seeds:
            results.append(run_single(cfg, scenario, artifact, MAIN_METHOD,
                                      seed, cfg.run.data_fraction, variant))
    return results


def zero_shot_task_metrics(cfg, scenario, artifact):
    """Zero-shot test metrics using the task class prompts (no training)."""
    text_enc, vision_enc = restore_encoders(cfg, scenario, artifact)
    scores = zero_shot_scores(text_enc, vision_enc, scenario.vocab,
                              scenario.task_descriptors,
                              scenario.split.test.images, tau=cfg.train.tau1)
    return compute_metrics(scores, scenario.split.test.labels, scenario.n_classes)


def rebuild_vision_classifier(cfg, scenario, model_arrays):
    """Vision encoder + classifier from a saved adapted-model checkpoint."""
    vision = {k[7:]: v for k, v in model_arrays.items() if k.startswith("vision.")}
    _, vision_enc = _fresh_encoders(cfg, scenario, 0)
    if any(k.endswith("lora_A") for k in vision):
        vision_enc.attach_lora(cfg.model.lora_rank, cfg.model.lora_alpha)
    vision_enc.load_state_arrays(vision)
    clf = LinearClassifier(cfg.model.embed_dim, scenario.n_classes)
    clf.load_state_arrays({"w": model_arrays["classifier.w"],
                           "b": model_arrays["classifier.b"]})
    return vision_enc, clf


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------


def export_embeddings(cfg, scenario, model_arrays):
    """Rows for every test image, every text-only class prompt, and every
    prototype, with a 2-component PCA projection appended.

    Returns (header, rows) where each row is a list of formatted fields.
    """
    text = {k[5:]: v for k, v in model_arrays.items() if k.startswith("text.")}
    vision = {k[7:]: v for k, v in model_arrays.items() if k.startswith("vision.")}
    text_enc, vision_enc = _fresh_encoders(cfg, scenario, 0)
    if any(k.endswith("lora_A") for k in vision):
        vision_enc.attach_lora(cfg.model.lora_rank, cfg.model.lora_alpha)
    text_enc.load_state_arrays(text)
    vision_enc.load_state_arrays(vision)
    test = scenario.split.test
    f_v = []
    for start in range(0, len(test), 256):
        f_v.append(vision_enc.encode(test.images[start:start + 256]).data)
    f_v = np.concatenate(f_v, axis=0)
    bundle = encode_text_prompts(text_enc, scenario.vocab, scenario.adapt_descriptors)
    f_t = bundle.f_t.data
    m = model_arrays["prototypes.m"]

    points = np.concatenate([f_v, f_t, m], axis=0)
    _, proj = pca_2d(points)
    h = points.shape[1]
    header = ["id", "kind", "class_id", "prototype_id"] + \
        [f"e{i}" for i in range(h)] + ["p0", "p1"]
    rows = []
    proto_to_desc = [d.class_id for d in scenario.adapt_descriptors]
    r = 0
    for i in range(f_v.shape[0]):
        rows.append([str(r), "image", str(int(test.labels[i])),
                     str(int(test.prototype_ids[i]))]
                    + [f"{v:.8f}" for v in points[r]] + [f"{v:.8f}" for v in proj[r]])
        r += 1
    for k in range(f_t.shape[0]):
        rows.append([str(r), "text_prompt",
                     str(int(scenario.prototype_class_map[k])), str(k)]
                    + [f"{v:.8f}" for v in points[r]] + [f"{v:.8f}" for v in proj[r]])
        r += 1
    for k in range(m.shape[0]):
        rows.append([str(r), "prototype",
                     str(int(scenario.prototype_class_map[k])), str(k)]
                    + [f"{v:.8f}" for v in points[r]] + [f"{v:.8f}" for v in proj[r]])
        r += 1
    return header, rows
