"""Comparison methods: behavioral contracts and gradient checks."""

import numpy as np
import pytest

import diva.autodiff as ad
from diva.autodiff import Tensor
from diva.baselines import (
    BaselineConfig,
    ClipAdapter,
    ContextPrompter,
    LinearProbe,
    TrainBudget,
)
from diva.encoders import ConfigError, TextEncoder, TextEncoderConfig
from diva.prompts import AttributeVocabulary, DiseaseDescriptor, build_prompt


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def separable_data(n=40, h=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    centers = np.stack([np.eye(h)[0], np.eye(h)[1]])
    feats = unit_rows(centers[labels] + 0.05 * rng.normal(size=(n, h)))
    return feats, labels


def make_text_setup(seed=0):
    vocab = AttributeVocabulary(["solid", "dotted"], ["center"], ["disk", "ring"],
                                class_names=["benign", "target"])
    enc = TextEncoder(TextEncoderConfig(vocab_size=len(vocab), embed_dim=32,
                                        n_layers=1, n_heads=2),
                      np.random.default_rng(seed))
    enc.freeze()
    descs = [DiseaseDescriptor(0, "solid", "center", "disk", name="benign"),
             DiseaseDescriptor(1, "dotted", "center", "ring", name="target")]
    return vocab, enc, descs


BUDGET = TrainBudget(epochs=30, batch_size=16, lr=0.01, seed=0)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def test_probe_solves_separable_problem():
    feats, labels = separable_data()
    probe = LinearProbe(8, 2).fit(feats, labels, BUDGET)
    assert (probe.predict_proba(feats).argmax(axis=1) == labels).all()


def test_probe_zero_init_uniform():
    probe = LinearProbe(8, 2)
    p = probe.predict_proba(np.random.default_rng(1).normal(size=(5, 8)))
    assert np.allclose(p, 0.5)


def test_probe_leaves_features_untouched():
    feats, labels = separable_data()
    before = feats.tobytes()
    LinearProbe(8, 2).fit(feats, labels, BUDGET)
    assert feats.tobytes() == before


def test_probe_deterministic():
    feats, labels = separable_data()
    a = LinearProbe(8, 2).fit(feats, labels, BUDGET).head._params["w"].data
    b = LinearProbe(8, 2).fit(feats, labels, BUDGET).head._params["w"].data
    assert a.tobytes() == b.tobytes()


def test_probe_val_selection_restores_best_epoch():
    feats, labels = separable_data()
    probe = LinearProbe(8, 2)
    scores = iter([0.9] + [0.1] * 29)  # epoch 0 is "best"
    snapshots = []

    def val_fn():
        snapshots.append(probe.head._params["w"].data.copy())
        return next(scores)

    probe.fit(feats, labels, BUDGET, val_fn=val_fn)
    assert np.array_equal(probe.head._params["w"].data, snapshots[0])


# ---------------------------------------------------------------------------
# residual feature adapter
# ---------------------------------------------------------------------------


def test_adapter_identity_blend_at_init():
    rng = np.random.default_rng(2)
    prompts = unit_rows(rng.normal(size=(2, 8)))
    adapter = ClipAdapter(8, prompts, BaselineConfig(kind="clip_adapter"),
                          np.random.default_rng(3))
    f = Tensor(unit_rows(rng.normal(size=(4, 8))))
    # zero-initialized second layer: adapted = (1-blend) * f exactly
    out = adapter.adapt(f).data
    assert np.allclose(out, 0.8 * f.data, atol=1e-12)


def test_adapter_initial_logits_match_zero_shot():
    rng = np.random.default_rng(4)
    prompts = unit_rows(rng.normal(size=(2, 8)))
    adapter = ClipAdapter(8, prompts, BaselineConfig(kind="clip_adapter"),
                          np.random.default_rng(5))
    f = unit_rows(rng.normal(size=(3, 8)))
    logits = adapter.logits(Tensor(f)).data
    # scaling f does not change its direction: cos to prompts is unchanged
    assert np.allclose(logits, (f @ prompts.T) / 0.07, atol=1e-10)


def test_adapter_blend_validation():
    with pytest.raises(ConfigError):
        BaselineConfig(kind="clip_adapter", adapter_blend=1.5)


def test_adapter_learns_separable_task():
    feats, labels = separable_data(seed=6)
    prompts = unit_rows(np.random.default_rng(7).normal(size=(2, 8)))
    adapter = ClipAdapter(8, prompts, BaselineConfig(kind="clip_adapter"),
                          np.random.default_rng(8))
    adapter.fit(feats, labels, TrainBudget(epochs=60, batch_size=16, lr=0.02))
    acc = (adapter.predict_proba(feats).argmax(axis=1) == labels).mean()
    assert acc >= 0.9


def test_adapter_gradient_check():
    rng = np.random.default_rng(9)
    prompts = unit_rows(rng.normal(size=(2, 6)))
    adapter = ClipAdapter(6, prompts, BaselineConfig(kind="clip_adapter"), rng)
    feats = unit_rows(rng.normal(size=(3, 6)))
    y = Tensor(np.eye(2)[[0, 1, 0]])
    p = adapter.net._params["w1"]

    def f(t):
        p.tensor = t
        return ad.mean(ad.cross_entropy_rows(adapter.logits(Tensor(feats)), y))

    report = ad.grad_check(f, Tensor(p.data.copy()), step=1e-4)
    assert report.passes(1e-3), report.max_rel_err


# ---------------------------------------------------------------------------
# context prompting
# ---------------------------------------------------------------------------


def test_prompter_handcrafted_init_equals_zero_shot():
    vocab, enc, descs = make_text_setup()
    prompter = ContextPrompter.from_handcrafted_prompts(
        enc, vocab, descs, BaselineConfig(kind="coop"), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    f = unit_rows(rng.normal(size=(4, 32)))
    logits = prompter.logits(Tensor(f)).data
    f_t = np.concatenate([enc.encode(build_prompt(vocab, d)[None, :]).data
                          for d in descs])
    assert np.allclose(logits, (f @ f_t.T) / 0.07, atol=1e-10)


def test_prompter_trains_only_context_not_encoder():
    vocab, enc, descs = make_text_setup()
    prompter = ContextPrompter(enc, vocab, descs, BaselineConfig(kind="coop"),
                               np.random.default_rng(2))
    state_before = {k: v.copy() for k, v in enc.state_arrays().items()}
    feats, labels = separable_data(h=32, seed=3)
    prompter.fit(feats, labels, TrainBudget(epochs=5, batch_size=16, lr=0.01))
    for k, v in enc.state_arrays().items():
        assert v.tobytes() == state_before[k].tobytes()


def test_prompter_meta_net_bottleneck_width():
    vocab, enc, descs = make_text_setup()
    prompter = ContextPrompter(enc, vocab, descs, BaselineConfig(kind="cocoop"),
                               np.random.default_rng(4), conditioned=True)
    assert prompter.meta._params["w1"].data.shape == (2, 32)  # floor(32/16)


def test_conditioned_prompter_with_zero_meta_matches_unconditioned():
    vocab, enc, descs = make_text_setup()
    rng_ctx = np.random.default_rng(5)
    shared = ContextPrompter(enc, vocab, descs, BaselineConfig(kind="coop"),
                             np.random.default_rng(5))
    cond = ContextPrompter(enc, vocab, descs, BaselineConfig(kind="cocoop"),
                           np.random.default_rng(5), conditioned=True)
    f = unit_rows(np.random.default_rng(6).normal(size=(3, 32)))
    a = shared.logits(Tensor(f)).data
    b = cond.logits(Tensor(f)).data  # meta second layer is zero-initialized
    assert np.allclose(a, b, atol=1e-10)


def test_conditioned_prompter_output_depends_on_image():
    vocab, enc, descs = make_text_setup()
    cond = ContextPrompter(enc, vocab, descs, BaselineConfig(kind="cocoop"),
                           np.random.default_rng(7), conditioned=True)
    cond.meta._params["w2"].tensor.set_values(
        np.random.default_rng(8).normal(0.0, 0.1, size=(32, 2)))
    f = unit_rows(np.random.default_rng(9).normal(size=(2, 32)))
    prompts = cond.class_prompt_features(Tensor(f))
    assert prompts.data.shape == (2, 2, 32)
    assert not np.allclose(prompts.data[0], prompts.data[1])


def test_prompter_gradient_reaches_context():
    vocab, enc, descs = make_text_setup()
    prompter = ContextPrompter(enc, vocab, descs, BaselineConfig(kind="coop"),
                               np.random.default_rng(10))
    f = unit_rows(np.random.default_rng(11).normal(size=(2, 32)))
    y = Tensor(np.eye(2))
    loss = ad.mean(ad.cross_entropy_rows(prompter.logits(Tensor(f)), y))
    ad.backward(loss)
    assert prompter.context.tensor.grad is not None
    assert np.abs(prompter.context.tensor.grad).max() > 0


def test_prompter_context_gradient_check():
    vocab, enc, descs = make_text_setup()
    prompter = ContextPrompter(enc, vocab, descs,
                               BaselineConfig(kind="coop", context_length=2),
                               np.random.default_rng(12))
    f = unit_rows(np.random.default_rng(13).normal(size=(2, 32)))
    y = Tensor(np.eye(2))

    def g(t):
        prompter.context.tensor = t
        return ad.mean(ad.cross_entropy_rows(prompter.logits(Tensor(f)), y))

    report = ad.grad_check(g, Tensor(prompter.context.data.copy()), step=1e-4)
    assert report.passes(1e-3), report.max_rel_err


def test_unknown_baseline_kind_rejected():
    with pytest.raises(ConfigError):
        BaselineConfig(kind="prompt_soup")


def test_budget_parity_epoch_count():
    """All baselines train for exactly the budgeted number of epochs."""
    feats, labels = separable_data()
    calls = []
    probe = LinearProbe(8, 2)
    probe.fit(feats, labels, TrainBudget(epochs=7, batch_size=16, lr=0.01),
              val_fn=lambda: calls.append(1) or 0.0)
    assert len(calls) == 7
