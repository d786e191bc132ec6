"""Config parsing, checkpoint format, orchestration contracts, and
end-to-end determinism at miniature scale."""

import os

import numpy as np
import pytest

from diva import counters, harness
from diva.bench import ScenarioConfig, generate_scenario
from diva.checkpoint import (
    CheckpointError,
    config_fingerprint,
    load_checkpoint,
    save_checkpoint,
)
from diva.config import (
    ExperimentConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    default_config_text,
    parse_config,
)
from diva.encoders import ConfigError


def tiny_config(**train_kw):
    train = dict(epochs=2, lr=0.002)
    train.update(train_kw)
    return ExperimentConfig(
        scenario=ScenarioConfig(pretrain_pairs_per_class=12,
                                adapt_samples_per_group=40),
        model=ModelConfig(),
        train=TrainConfig(**train),
        run=RunConfig(seeds=(0,), data_fraction=0.2, pretrain_epochs=1),
    )


@pytest.fixture(scope="module")
def tiny_world():
    cfg = tiny_config()
    scenario = generate_scenario(cfg.scenario)
    artifact = harness.run_pretraining(cfg, scenario)
    return cfg, scenario, artifact


# ---------------------------------------------------------------------------
# config file format
# ---------------------------------------------------------------------------


def test_default_config_parses():
    cfg = parse_config(default_config_text())
    assert cfg.run.data_fraction == 0.05
    assert len(cfg.run.seeds) == 10


def test_config_comments_and_whitespace():
    cfg = parse_config("[train]\n epochs = 3  # trailing comment\n\n[run]\n")
    assert cfg.train.epochs == 3


def test_config_unknown_section_and_key_errors():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="outside any"):
        parse_config("epochs = 3\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("[train]\nepochs\n")


def test_config_list_values():
    cfg = parse_config("[run]\nmethods = dicop_dpl, linear_probe\nseeds = 3,4\n"
                       "sweep_fractions = 0.1, 0.2\n")
    assert cfg.run.methods == ("dicop_dpl", "linear_probe")
    assert cfg.run.seeds == (3, 4)
    assert cfg.run.sweep_fractions == (0.1, 0.2)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        parse_config("[run]\nmethods = dicop_dpl, mystery_method\n")
    with pytest.raises(ConfigError):
        parse_config("[model]\nfinetune = full\n")


def test_fingerprint_changes_with_config():
    a = ExperimentConfig().fingerprint_text()
    b = tiny_config().fingerprint_text()
    assert a != b
    assert config_fingerprint(a).tobytes() != config_fingerprint(b).tobytes()


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_and_byte_identity(tmp_path):
    arrays = {"b": np.arange(6, dtype=np.float64).reshape(2, 3),
              "a": np.array([1.5])}
    p1, p2 = tmp_path / "x.ckpt", tmp_path / "y.ckpt"
    save_checkpoint(p1, arrays, config_fingerprint("cfg"))
    loaded, fp = load_checkpoint(p1)
    assert set(loaded) == {"a", "b"}
    assert np.array_equal(loaded["b"], arrays["b"])
    assert fp is not None
    save_checkpoint(p2, loaded, fp)
    assert p1.read_bytes() == p2.read_bytes()  # save/load/save is stable


def test_checkpoint_magic_and_version():
    import io, struct
    from diva.checkpoint import MAGIC, VERSION
    assert MAGIC == b"DIVA"
    assert VERSION == 1


def test_checkpoint_truncation_error(tmp_path):
    p = tmp_path / "t.ckpt"
    save_checkpoint(p, {"w": np.ones((3, 3))})
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "b.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_name_validation_lists_expected(tmp_path):
    p = tmp_path / "n.ckpt"
    save_checkpoint(p, {"w": np.ones(2)})
    with pytest.raises(CheckpointError, match="expected names"):
        load_checkpoint(p, expected_names={"w", "bias"})


# ---------------------------------------------------------------------------
# orchestration contracts
# ---------------------------------------------------------------------------


def test_missing_pretrain_names_command(tmp_path):
    with pytest.raises(harness.MissingPretrainError, match="pretrain"):
        harness.load_pretrain(tmp_path / "absent.ckpt", tiny_config())


def test_pretrain_roundtrip(tiny_world, tmp_path):
    cfg, scenario, artifact = tiny_world
    path = tmp_path / "pre.ckpt"
    harness.save_pretrain(path, artifact, cfg)
    back = harness.load_pretrain(path, cfg)
    for k, v in artifact.vision_arrays.items():
        assert np.allclose(back.vision_arrays[k], v, atol=1e-6)  # f32 storage


def test_run_single_deterministic(tiny_world):
    cfg, scenario, artifact = tiny_world
    a = harness.run_single(cfg, scenario, artifact, "dicop_dpl", 0, 0.2)
    b = harness.run_single(cfg, scenario, artifact, "dicop_dpl", 0, 0.2)
    assert a.scores.tobytes() == b.scores.tobytes()
    assert a.metrics.weighted_f1 == b.metrics.weighted_f1


def test_epochs_zero_is_noop(tiny_world):
    cfg, scenario, artifact = tiny_world
    cfg0 = tiny_config(epochs=0)
    r = harness.run_single(cfg0, scenario, artifact, "dicop_dpl", 0, 0.2)
    # zero-initialized classifier: uniform probabilities on every test row
    assert np.allclose(r.scores, 0.5)


def test_text_encoder_and_anchors_frozen_through_adaptation(tiny_world):
    cfg, scenario, artifact = tiny_world
    model = harness.build_adapted_model(cfg, scenario, artifact, seed=0)
    text_before = {k: v.copy() for k, v in model.text_enc.state_arrays().items()}
    anchors_before = np.asarray(model.prototypes.anchors).copy()
    train = scenario.split.train.take(np.arange(16))
    harness.train_adapted(model, train, cfg, scenario, seed=0,
                          val_set=scenario.split.val)
    for k, v in model.text_enc.state_arrays().items():
        assert v.tobytes() == text_before[k].tobytes()  # bit-unchanged
    assert model.prototypes.anchors.tobytes() == anchors_before.tobytes()
    # prototypes themselves did move
    assert not np.array_equal(model.prototypes.m.data, anchors_before)


def test_inference_purity_counters(tiny_world):
    cfg, scenario, artifact = tiny_world
    model = harness.build_adapted_model(cfg, scenario, artifact, seed=0)
    before = counters.snapshot()
    harness.evaluate(model.vision_enc, model.classifier,
                     scenario.split.test.images, scenario.split.test.labels)
    after = counters.snapshot()
    for key in ("prompt_encode", "context_project", "alignment_loss",
                "prototype_loss"):
        assert after.get(key, 0) == before.get(key, 0)


def test_lora_trainable_fraction_small(tiny_world):
    cfg, scenario, artifact = tiny_world
    model = harness.build_adapted_model(cfg, scenario, artifact, seed=0)
    enc = model.vision_enc
    assert enc.n_trainable_parameters() / enc.n_parameters() < 0.10


def test_ablation_variant_flags():
    assert not harness.variant_flags("wo_ita").enable_ita
    assert not harness.variant_flags("no_projector").use_context
    assert not harness.variant_flags("no_attributes").with_attributes
    with pytest.raises(ConfigError):
        harness.variant_flags("wo_everything")


def test_ablation_only_for_main_method(tiny_world):
    cfg, scenario, artifact = tiny_world
    with pytest.raises(ConfigError):
        harness.run_single(cfg, scenario, artifact, "linear_probe", 0, 0.2,
                           variant="wo_ita")


def test_layer_decay_mode_runs(tiny_world):
    cfg, scenario, artifact = tiny_world
    cfg_ld = tiny_config()
    cfg_ld.model = ModelConfig(finetune="layer_decay")
    r = harness.run_single(cfg_ld, scenario, artifact, "dicop_dpl", 0, 0.2)
    assert 0.0 <= r.metrics.weighted_f1 <= 1.0


def test_export_embeddings_layout(tiny_world):
    cfg, scenario, artifact = tiny_world
    r = harness.run_single(cfg, scenario, artifact, "dicop_dpl", 0, 0.2)
    header, rows = harness.export_embeddings(cfg, scenario, r.model_arrays)
    h = cfg.model.embed_dim
    assert header[:4] == ["id", "kind", "class_id", "prototype_id"]
    assert header[4] == "e0" and header[4 + h - 1] == f"e{h - 1}"
    assert header[-2:] == ["p0", "p1"]
    n_test = len(scenario.split.test)
    assert len(rows) == n_test + 4 + 4  # images + text prompts + prototypes
    kinds = [r[1] for r in rows]
    assert kinds.count("image") == n_test
    assert kinds.count("text_prompt") == 4 and kinds.count("prototype") == 4
    assert [r[0] for r in rows] == [str(i) for i in range(len(rows))]


def test_zero_shot_task_metrics_range(tiny_world):
    cfg, scenario, artifact = tiny_world
    m = harness.zero_shot_task_metrics(cfg, scenario, artifact)
    assert 0.0 <= m.weighted_f1 <= 1.0
