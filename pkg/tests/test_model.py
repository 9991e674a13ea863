"""Tests for model configuration, layer planning and detector assembly."""

import numpy as np
import pytest

from src.model import VARIANTS
from src.model import build
from src.model import count_parameters
from src.model import plan
from src.model import variant_config
from src.model_config import DEFAULT_ANCHORS
from src.model_config import ConfigError
from src.model_config import ModelConfig
from src.model_config import load_model_config
from src.model_config import parse_model_config
from src.tensor import ShapeError
from src.tensor import Tensor


def _images(rng, config, batch=1):
    size = config.input_size
    return Tensor(rng.uniform(0.0, 1.0, size=(batch, 3, size, size)).astype(np.float32))


def test_forward_shapes_at_desk_scale_with_one_class(rng):
    config = ModelConfig(num_classes=1, width_per_stage=(8, 8, 16, 16, 32), mhsa_heads=2).validate()
    model = build(config)

    outputs = model(_images(rng, config))

    assert config.grid_sizes() == (40, 20, 10, 5)
    assert [o.shape for o in outputs] == [(1, 18, 40, 40), (1, 18, 20, 20), (1, 18, 10, 10), (1, 18, 5, 5)]


def test_three_head_variant_drops_the_stride_four_level(rng, small_config):
    config = variant_config("baseline", small_config)

    outputs = build(config)(_images(rng, config, batch=2))

    assert config.strides == (8, 16, 32)
    assert config.anchors == DEFAULT_ANCHORS[1:]
    assert [o.shape[2:] for o in outputs] == [(8, 8), (4, 4), (2, 2)]
    assert all(o.shape[:2] == (2, 24) for o in outputs)


def test_zero_head_weights_give_outputs_equal_to_the_bias(rng, small_model):
    for head in small_model.heads:
        head.weight.data[:] = 0.0

    outputs = small_model.eval()(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))

    assert all(np.all(o.data == 0.0) for o in outputs)


def test_inference_forward_is_deterministic(rng, small_model):
    small_model.eval()
    images = _images(rng, small_model.config)

    first = small_model(images)
    second = small_model(images)

    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.data, b.data)


def test_same_seed_builds_identical_weights(small_config):
    a, b = build(small_config, seed=5).state_dict(), build(small_config, seed=5).state_dict()

    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)


def test_fsa_changes_outputs_but_not_shapes(rng, small_config):
    images = _images(rng, small_config)
    with_fsa = build(small_config, seed=1).eval()(images)
    without_fsa = build(small_config.with_overrides(use_fsa=False), seed=1).eval()(images)

    assert [o.shape for o in with_fsa] == [o.shape for o in without_fsa]
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(with_fsa, without_fsa))


def test_forward_rejects_wrong_input_size(small_model):
    with pytest.raises(ShapeError):
        small_model(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


def test_forward_records_section_timings(rng, small_model):
    timings: dict[str, float] = {}

    small_model(_images(rng, small_model.config), timings=timings)

    assert set(timings) == {"backbone", "neck", "fsa", "heads"}
    assert all(seconds >= 0.0 for seconds in timings.values())


def test_fresh_attention_maps_are_one_half_at_every_site(rng, small_model):
    maps = small_model.attention_maps(_images(rng, small_model.config))

    assert list(maps) == ["p2", "p3", "p4", "p5"]
    assert maps["p2"].shape == (1, 8, 16, 16)
    assert all(np.all(a.data == 0.5) for a in maps.values())
    tiny_head = build(variant_config("tiny-head", small_model.config))
    assert tiny_head.attention_maps(_images(rng, small_model.config)) == {}


def test_plan_lists_layers_in_build_order(small_config):
    names = [layer.name for layer in plan(small_config)]

    backbone = ["stem", "down1", "stage1", "down2", "stage2", "down3", "stage3", "down4", "stage4", "sppf"]
    assert names[:10] == backbone
    assert names[-8:] == ["fsa_p2", "fsa_p3", "fsa_p4", "fsa_p5", "head_p2", "head_p3", "head_p4", "head_p5"]
    kinds = {layer.name: layer.kind for layer in plan(small_config)}
    assert kinds["stage4"] == "csp-mhsa"
    assert kinds["stage3"] == "csp"


@pytest.mark.parametrize(
    "config",
    [
        ModelConfig(input_size=64, width_per_stage=(8, 8, 16, 16, 32), mhsa_heads=2),
        ModelConfig(input_size=64, depth_per_stage=(0, 1, 2, 1), use_fsa=False, use_mhsa=False),
        variant_config(
            "baseline", ModelConfig(input_size=64, width_per_stage=(8, 16, 16, 32, 32), mhsa_heads=2)
        ),
    ],
)
def test_parameter_count_formula_matches_enumeration(config):
    assert count_parameters(config) == build(config).num_parameters()


def test_doubling_widths_increases_parameter_count():
    base = ModelConfig()
    doubled = base.with_overrides(width_per_stage=tuple(2 * w for w in base.width_per_stage))

    assert count_parameters(doubled) > count_parameters(base)


@pytest.mark.parametrize(
    "changes,field",
    [
        ({"input_size": 100}, "input_size"),
        ({"num_classes": 0}, "num_classes"),
        ({"width_per_stage": (8, 8, 16, 16)}, "width_per_stage"),
        ({"depth_per_stage": (1, 1, -1, 1)}, "depth_per_stage"),
        ({"strides": (4, 8, 16)}, "strides"),
        ({"anchors": DEFAULT_ANCHORS[:3]}, "anchors"),
        ({"anchors": (((4.0, 5.0), (6.0, 7.0)),) + DEFAULT_ANCHORS[1:]}, "anchors"),
        ({"anchors": (((4.0, 0.0), (6.0, 7.0), (9.0, 9.0)),) + DEFAULT_ANCHORS[1:]}, "anchors"),
        ({"fsa_r": 3}, "fsa_r"),
        ({"fsa_k": 6}, "fsa_k"),
        ({"mhsa_heads": 3}, "mhsa_heads"),
    ],
)
def test_validate_names_the_offending_field(changes, field):
    with pytest.raises(ConfigError) as excinfo:
        ModelConfig().with_overrides(**changes)

    assert excinfo.value.field == field
    assert str(excinfo.value).startswith(f"{field}: ")


def test_fsa_ratio_is_ignored_when_fsa_is_off():
    assert ModelConfig(use_fsa=False, fsa_r=3).validate().fsa_r == 3


def test_config_text_parses_back_to_the_same_config():
    config = ModelConfig(input_size=96, num_classes=1, depth_per_stage=(1, 2, 1, 0), use_mhsa=False)

    assert parse_model_config(config.to_text()) == config


def test_parse_config_applies_overrides_on_defaults_and_skips_comments():
    text = """
    # narrow model for quick runs
    input_size = 64
    width_per_stage = 8, 8, 16, 16, 32   # stem first
    use_fsa = off
    mhsa_heads = 2
    """

    config = parse_model_config(text)

    assert config.input_size == 64
    assert config.width_per_stage == (8, 8, 16, 16, 32)
    assert config.use_fsa is False
    assert config.anchors == DEFAULT_ANCHORS


@pytest.mark.parametrize(
    "text,field",
    [
        ("input_sise = 64\n", "input_sise"),
        ("input_size 64\n", "syntax"),
        ("use_fsa = maybe\n", "use_fsa"),
        ("num_classes = 1, 2\n", "num_classes"),
        ("strides = 8, sixteen, 32\n", "strides"),
        ("anchors = 1, 2, 3, 4\n", "anchors"),
    ],
)
def test_parse_config_rejects_malformed_lines(text, field):
    with pytest.raises(ConfigError) as excinfo:
        parse_model_config(text, source="model.cfg")

    assert excinfo.value.field == field


def test_load_model_config_reports_the_file_and_line(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text("input_size = 64\nbogus = 1\n")

    with pytest.raises(ConfigError, match="model.cfg:2"):
        load_model_config(path)


def test_config_hash_tracks_every_field():
    base = ModelConfig()

    assert base.config_hash() == ModelConfig().config_hash()
    assert base.config_hash() != base.with_overrides(fsa_k=5).config_hash()
    assert base.config_hash() != base.with_overrides(use_mhsa=False).config_hash()


def test_variants_add_one_component_per_row():
    configs = {name: variant_config(name) for name in VARIANTS}

    assert list(configs) == ["baseline", "tiny-head", "tiny-head+mhsa", "fsa-yolo"]
    assert configs["fsa-yolo"] == ModelConfig()
    assert not configs["tiny-head+mhsa"].use_fsa and configs["tiny-head+mhsa"].use_mhsa
    assert configs["tiny-head"].strides == (4, 8, 16, 32) and not configs["tiny-head"].use_mhsa
    assert count_parameters(configs["baseline"]) < count_parameters(configs["tiny-head"])
    assert count_parameters(configs["tiny-head+mhsa"]) < count_parameters(configs["fsa-yolo"])

    with pytest.raises(ConfigError):
        variant_config("fsa-yolo-xl")
