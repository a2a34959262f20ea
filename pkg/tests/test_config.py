import pytest

from mtdaflow.config import (
    ConfigError,
    RunConfig,
    build_run_config,
    deep_merge,
    dump_run_config,
    expand_dotted,
    load_run_config,
    parse_override,
    validate,
)


def test_defaults_are_valid():
    cfg = build_run_config()
    assert cfg.hp.K == 1500
    assert cfg.hp.K_star == 3
    assert cfg.hp.tau == 0.7
    assert cfg.hp.iters_per_pass == 500
    assert cfg.data.synthetic.shifts == [0.1, 0.3, 0.6]


def test_expand_dotted_nests_and_merges():
    nested = expand_dotted({"hp.K": 10, "hp.tau": 0.5, "data": {"synthetic.n_c": 5}})
    assert nested == {"hp": {"K": 10, "tau": 0.5}, "data": {"synthetic": {"n_c": 5}}}


def test_deep_merge_overwrites_lists_and_recurses_dicts():
    base = {"a": {"b": 1, "c": [1, 2]}, "d": 1}
    merged = deep_merge(base, {"a": {"c": [3]}, "d": 2})
    assert merged == {"a": {"b": 1, "c": [3]}, "d": 2}
    assert base["a"]["c"] == [1, 2]


def test_k_not_divisible_by_k_star_names_key():
    with pytest.raises(ConfigError) as exc:
        build_run_config({"hp": {"K": 1000, "K_star": 3}})
    assert exc.value.key == "hp.K"
    assert "K not divisible by K*" in str(exc.value)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_tau_outside_open_interval(tau):
    with pytest.raises(ConfigError) as exc:
        build_run_config({"hp": {"tau": tau}})
    assert exc.value.key == "hp.tau"


@pytest.mark.parametrize("key", ["B_s", "B_t"])
def test_batch_sizes_must_be_positive(key):
    with pytest.raises(ConfigError) as exc:
        build_run_config({"hp": {key: 0}})
    assert exc.value.key == f"hp.{key}"


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError) as exc:
        build_run_config({"hp": {"lambda_adv": -1.0}})
    assert exc.value.key == "hp.lambda_adv"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as exc:
        build_run_config({"hp": {"KK": 3}})
    assert exc.value.key == "hp.KK"


def test_data_needs_a_source():
    with pytest.raises(ConfigError) as exc:
        build_run_config({"data": {"synthetic": None}})
    assert exc.value.key == "data"


def test_shift_string_is_split_and_arity_checked():
    cfg = build_run_config(parse_override("data.synthetic.shifts=0.1,0.3,0.6"))
    assert cfg.data.synthetic.shifts == [0.1, 0.3, 0.6]
    with pytest.raises(ConfigError) as exc:
        build_run_config(parse_override("data.synthetic.shifts=0.1,0.3"))
    assert exc.value.key == "data.synthetic.shifts"


def test_directory_disables_synthetic():
    cfg = build_run_config({"data": {"directory": "some/dir"}})
    assert cfg.data.synthetic is None


def test_parse_override_requires_equals():
    with pytest.raises(ConfigError):
        parse_override("hp.K")
    assert parse_override("hp.K=30") == {"hp": {"K": 30}}


def test_file_then_flags_precedence(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("hp.K: 30\nhp.K_star: 3\nhp.tau: 0.8\n", encoding="utf-8")
    cfg = load_run_config(str(path), [parse_override("hp.tau=0.9")])
    assert cfg.hp.K == 30
    assert cfg.hp.tau == 0.9


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_run_config(str(tmp_path / "nope.yaml"))
    assert exc.value.key == "config"


def test_dump_round_trip(tmp_path):
    cfg = build_run_config({"hp": {"K": 12, "K_star": 4}})
    path = tmp_path / "config.yaml"
    dump_run_config(cfg, str(path))
    again = load_run_config(str(path))
    assert again.to_dict() == cfg.to_dict()


def test_only_cpu_device():
    cfg = RunConfig(device="cuda")
    with pytest.raises(ConfigError) as exc:
        validate(cfg)
    assert exc.value.key == "device"
