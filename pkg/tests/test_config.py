import json

import pytest

from fsvad.config import (
    DEFAULTS,
    ConfigError,
    apply_overrides,
    load_config,
    save_config,
    stage_seed,
    variant_name,
)
from fsvad.pipeline import adapt_config, episode_config, head_config, mcpm_config


def test_protocol_constants():
    cfg = load_config()
    ep = cfg["episodes"]
    assert (ep["n_way"], ep["k_shots"], ep["q_queries"], ep["n_episodes"]) == (2, 5, 15, 200)
    m = cfg["mcpm"]
    assert (m["clip_len"], m["stride"], m["min_len"], m["max_len"]) == (8, 4, 20, 124)
    assert cfg["pretrain"]["clip_len"] == cfg["dam"]["triplet"]["clip_len"] == cfg["head"]["clip_len"] == 8


def test_typed_configs_echo_defaults():
    cfg = load_config()
    mc = mcpm_config(cfg)
    assert (mc.clip_len, mc.stride, mc.min_len, mc.max_len) == (8, 4, 20, 124)
    ec = episode_config(cfg, "all")
    assert (ec.n_way, ec.k_shots, ec.q_queries, ec.n_episodes) == (2, 5, 15, 200)
    assert episode_config(cfg, "all", k_shots=20).k_shots == 20
    assert adapt_config(cfg).triplet.crop_scale == (0.7, 1.0)
    assert head_config(cfg).kind == "cosine"


def test_overrides_parse_json_values():
    cfg = load_config(None, ["episodes.k_shots=10", "ablation.use_dam=false", "output_dir=/tmp/x",
                             "episodes.type_filters=[\"jitter\"]", "dam.lr=1e-3"])
    assert cfg["episodes"]["k_shots"] == 10
    assert cfg["ablation"]["use_dam"] is False
    assert cfg["output_dir"] == "/tmp/x"
    assert cfg["episodes"]["type_filters"] == ["jitter"]
    assert cfg["dam"]["lr"] == 1e-3
    # defaults are never mutated
    assert DEFAULTS["episodes"]["k_shots"] == 5


@pytest.mark.parametrize("override", ["episodes.nope=1", "nosection.key=1", "episodes.k_shots", "episodes=3",
                                      "ablation.use_dam=1", "dtype=float16", "episodes.n_way=3",
                                      "episodes.type_filters=[]", "seed=1.5"])
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_file_merge_and_unknown_keys(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"seed": 3, "mcpm": {"k": 5}}))
    cfg = load_config(good, ["seed=4"])
    assert cfg["seed"] == 4 and cfg["mcpm"]["k"] == 5 and cfg["mcpm"]["stride"] == 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mcpm": {"kk": 5}}))
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_save_round_trip(tmp_path):
    cfg = load_config(None, ["seed=9"])
    save_config(cfg, tmp_path / "a" / "cfg.json")
    assert load_config(tmp_path / "a" / "cfg.json") == cfg


def test_variant_names():
    names = {variant_name({"use_pretrain": p, "use_dam": d, "use_mcpm": m})
             for p in (True, False) for d in (True, False) for m in (True, False)}
    assert len(names) == 8
    assert variant_name(DEFAULTS["ablation"]) == "pretrain+dam+mcpm"
    assert variant_name({"use_pretrain": False, "use_dam": False, "use_mcpm": False}) == "scratch"


def test_stage_seeds_are_distinct_and_stable():
    stages = ["encoder_init", "pretrain", "source_head", "dam", "episodes"]
    seeds = [stage_seed(0, s) for s in stages]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [stage_seed(0, s) for s in stages]
    assert stage_seed(1, "dam") != stage_seed(0, "dam")


def test_apply_overrides_does_not_mutate():
    base = load_config()
    apply_overrides(base, ["seed=5"])
    assert base["seed"] == 0
