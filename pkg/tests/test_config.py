import pytest
import yaml

from segtrans.config import ConfigError, OUT_ENV, load_config, parse_attack, parse_config
from segtrans.core import FixedSquare, RandomRatio

BASE = {
    "experiment_id": "t",
    "dataset": {"kind": "shapes", "count": 4},
    "surrogate": {"variant": "A"},
    "targets": [{"variant": "B"}],
}


def write(tmp_path, data, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def test_fraction_values_and_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {**BASE, "attack": {"epsilon": "16/255", "step_size": "1/255"}}))
    assert cfg.attack.config.epsilon == pytest.approx(16 / 255)
    assert cfg.attack.config.step_size == pytest.approx(1 / 255)
    assert cfg.attack.config.iterations == 10
    assert cfg.seeds == (0,)
    assert cfg.output_dir == tmp_path / "runs" / "t"


def test_region_modes():
    assert parse_attack({"square_side": 8}).config.region_mode == FixedSquare(8)
    spec = parse_attack({"region_mode": "random_ratio", "alpha_min": 0.2, "alpha_max": 0.4})
    assert spec.config.region_mode == RandomRatio(0.2, 0.4)
    with pytest.raises(ConfigError):
        parse_attack({"region_mode": "circles"})


@pytest.mark.parametrize("attack", [
    {"name": "fgsm"},
    {"epsilon": "eight"},
    {"iterations": 2.5},
    {"update_mode": "batched"},
    {"bogus": 1},
    {"epsilon": 0},
])
def test_invalid_attack_sections(attack):
    with pytest.raises(ConfigError):
        parse_config({**BASE, "attack": attack})


@pytest.mark.parametrize("patch", [
    {"sweep": {"param": "learning_rate", "values": [1]}},
    {"sweep": {"param": "epsilon", "values": []}},
    {"defense": {"kind": "jpeg", "values": [1]}},
    {"defense": {"kind": "corrupt", "values": [7]}},
    {"defense": {"kind": "prune", "values": [0.95]}},
    {"targets": []},
    {"surrogate": {"name": "x"}},
    {"seeds": "zero"},
    {"workers": 0},
])
def test_invalid_sections(patch):
    with pytest.raises(ConfigError):
        parse_config({**BASE, **patch})


def test_missing_section_names_field(tmp_path):
    data = dict(BASE)
    del data["surrogate"]
    with pytest.raises(ConfigError, match="surrogate"):
        load_config(write(tmp_path, data))


def test_unreadable_or_invalid_yaml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: [unclosed")
    with pytest.raises(ConfigError, match="bad.yaml"):
        load_config(bad)


def test_output_precedence(tmp_path, monkeypatch):
    path = write(tmp_path, {**BASE, "output_dir": "from_file"})
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert load_config(path).output_dir == tmp_path / "from_file"
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "from_env"))
    assert load_config(path).output_dir == tmp_path / "from_env"
    assert load_config(path, out=tmp_path / "from_arg").output_dir == tmp_path / "from_arg"


def test_seed_and_worker_overrides(tmp_path):
    cfg = load_config(write(tmp_path, {**BASE, "seeds": [5]}), seeds=[1, 2], workers=3)
    assert cfg.seeds == (1, 2) and cfg.workers == 3


def test_sweep_and_defense_values():
    cfg = parse_config({**BASE, "sweep": {"param": "epsilon", "values": ["2/255", 0.5]},
                        "defense": {"kind": "corrupt", "values": [0, 3]}})
    assert cfg.sweep.values == (pytest.approx(2 / 255), 0.5)
    assert cfg.defense.values == (0, 3) and cfg.defense.knob == "corruption_level"


def test_with_param_updates_one_field():
    spec = parse_attack({"name": "mifgsm"})
    assert spec.with_param("epsilon", 0.1).config.epsilon == 0.1
    assert spec.with_param("decay", 0.5).decay == 0.5
    assert spec.with_param("square_side", 4).config.region_mode == FixedSquare(4)
    assert spec.with_param("alpha_max", 0.5).config.region_mode == RandomRatio(0.1, 0.5)
    assert spec.with_param("remap_count", 3.0).config.remap_count == 3


def test_echo_keeps_raw_and_effective_values():
    cfg = parse_config({**BASE, "attack": {"epsilon": "8/255"}})
    echo = cfg.echo()
    assert echo["dataset"] == BASE["dataset"]
    assert echo["attack"]["epsilon"] == pytest.approx(8 / 255)
