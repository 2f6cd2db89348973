import json
from pathlib import Path

import pytest

from safenav.cli import main
from safenav.config import ConfigError, ScenarioConfig

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def write_cfg(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def small_indoor(tmp_path, **extra):
    data = {"name": "mini", "policy": {"kind": "noisy_goal_seeker"},
            "agent": {"max_steps": 120}, "filter": {"enabled": True, "sigma": 0.25},
            "episodes": 3, "seeds": [4], "output": str(tmp_path / "out")}
    data.update(extra)
    return write_cfg(tmp_path, data)


def test_simulate_writes_outputs(tmp_path, capsys):
    cfg = small_indoor(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--jobs", "1"]) == 0
    out = tmp_path / "out"
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["metrics"]) == {"mini_filtered"}
    assert len(list((out / "trajectories").glob("*.csv"))) == 3
    assert "mini_filtered" in capsys.readouterr().out


def test_simulate_episodes_seed_and_filter_override(tmp_path):
    cfg = small_indoor(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--episodes", "2", "--seed", "9", "--filter", "off",
                 "--out", str(tmp_path / "b"), "--jobs", "1"]) == 0
    m = json.loads((tmp_path / "b" / "metrics.json").read_text())["metrics"]
    assert list(m) == ["mini_unfiltered"]
    assert m["mini_unfiltered"]["episodes"] == 2 and m["mini_unfiltered"]["seeds"] == [9]
    assert m["mini_unfiltered"]["min_h"] is None


def test_simulate_is_byte_deterministic(tmp_path):
    cfg = small_indoor(tmp_path)
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / d), "--jobs", "2"]) == 0
    for f in ("metrics.json", "metrics.txt", "episodes.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_weights_exit_2_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "policy.json"
    cfg = small_indoor(tmp_path, policy={"weights": str(missing)})
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.json")]) == 2
    assert main(["simulate", "--config", str(write_cfg(tmp_path, {"episodes": 0}))]) == 2
    assert main(["simulate", "--config", str(write_cfg(tmp_path, {"bogus": 1}))]) == 2
    assert main(["simulate", "--config", str(write_cfg(tmp_path, {"agent": {"model": "boat"}}))]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["simulate", "--config", str(tmp_path / "broken.json")]) == 2


def test_usage_error_exit_2():
    assert main(["simulate"]) == 2
    assert main(["fly"]) == 2


def test_dump_effective_config_round_trip(tmp_path):
    cfg = small_indoor(tmp_path)
    dumped = tmp_path / "effective.json"
    assert main(["simulate", "--config", str(cfg), "--episodes", "1", "--dump-effective-config", str(dumped),
                 "--jobs", "1"]) == 0
    again = tmp_path / "again.json"
    assert main(["simulate", "--config", str(dumped), "--dump-effective-config", str(again), "--jobs", "1"]) == 0
    assert ScenarioConfig.load(dumped) == ScenarioConfig.load(again)
    assert dumped.read_bytes() == again.read_bytes()


def test_config_rejects_unknown_nested_key(tmp_path):
    with pytest.raises(ConfigError, match="agent"):
        ScenarioConfig({"agent": {"wheels": 3}}, tmp_path)


def test_evaluate_single_config_gives_both_variants(tmp_path):
    cfg = small_indoor(tmp_path)
    assert main(["evaluate", "--config", str(cfg), "--episodes", "2", "--out", str(tmp_path / "ev"),
                 "--jobs", "1"]) == 0
    table = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert set(table) == {"mini_unfiltered", "mini_filtered"}
    assert table["mini_filtered"]["collision_mean"] == 0.0


def test_enumerate_demo_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert main(["enumerate", "--config", str(SCENARIOS / "demo_enumeration.cfg"),
                     "--out", str(tmp_path / d)]) == 0
    a, b = tmp_path / "a" / "enumeration", tmp_path / "b" / "enumeration"
    names = sorted(p.name for p in a.iterdir())
    assert {"region_000.json", "summary.json", "safe_set.json", "density.txt"} <= set(names)
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    assert json.loads((a / "summary.json").read_text())["incomplete"] is False


def test_enumerate_trivially_safe_net(tmp_path):
    net = {"input_dim": 2, "ranges": None,
           "layers": [{"rows": 2, "cols": 2, "weights": [0, 0, 0, 0], "bias": [0.0, -1.0], "activation": "linear"}]}
    prop = {"box": {"lo": [0, 0], "hi": [1, 1]}, "halfplanes": [{"c": [0, -1], "b": 0}]}
    (tmp_path / "net.json").write_text(json.dumps(net))
    (tmp_path / "prop.json").write_text(json.dumps(prop))
    cfg = write_cfg(tmp_path, {"enumeration": {"network": "net.json", "properties": ["prop.json"]},
                               "output": "o"})
    assert main(["enumerate", "--config", str(cfg)]) == 0
    res = json.loads((tmp_path / "o" / "enumeration" / "region_000.json").read_text())
    assert [l["verdict"] for l in res["leaves"]] == ["safe"]


def test_enumerate_incomplete_flag_exit_0(tmp_path, capsys):
    data = json.loads((SCENARIOS / "demo_enumeration.cfg").read_text())
    data["enumeration"]["network"] = str(SCENARIOS / data["enumeration"]["network"])
    data["enumeration"]["properties"] = [str(SCENARIOS / p) for p in data["enumeration"]["properties"]]
    data["enumeration"]["config"]["max_leaves"] = 20
    data["output"] = str(tmp_path / "o")
    assert main(["enumerate", "--config", str(write_cfg(tmp_path, data))]) == 0
    assert json.loads((tmp_path / "o" / "enumeration" / "summary.json").read_text())["incomplete"] is True
    assert "incomplete=true" in capsys.readouterr().out


def test_enumerate_from_harvested_logs(tmp_path):
    from safenav.policy import random_network, save_network
    import numpy as np

    save_network(random_network([20, 8, 2], np.random.default_rng(0), ranges=[[0, 0.5], [-1.5, 1.5]]),
                 tmp_path / "net.json")
    cfg = small_indoor(tmp_path, agent={"max_steps": 400}, filter={"enabled": False}, episodes=6)
    assert main(["simulate", "--config", str(cfg), "--jobs", "1"]) == 0
    eps = json.loads((tmp_path / "out" / "episodes.json").read_text())
    n_coll = sum(e["outcome"] == "Collision" for e in eps)
    assert n_coll > 0
    logs = sorted(str(p) for p in (tmp_path / "out" / "trajectories").glob("*.csv"))
    ecfg = write_cfg(tmp_path, {
        "enumeration": {"network": "net.json", "harvest": {"trajectories": logs, "epsilon": 0.01},
                        "config": {"min_width": 0.25, "mc_samples": 50}},
        "output": "enum"}, "enum.json")
    assert main(["enumerate", "--config", str(ecfg)]) == 0
    out = tmp_path / "enum" / "enumeration"
    assert len(list(out.glob("region_*.json"))) == n_coll
    assert len(list(out.glob("property_*.json"))) == n_coll
    assert (out / "safe_set.json").exists()


def test_enumerate_needs_properties(tmp_path):
    cfg = write_cfg(tmp_path, {"enumeration": {"network": str(SCENARIOS / "networks" / "demo2d.json")}})
    assert main(["enumerate", "--config", str(cfg)]) == 2


def test_track_and_plot(tmp_path):
    data = json.loads((SCENARIOS / "tracking.cfg").read_text())
    data["tracking"]["duration"] = 4.0
    data["tracking"]["schedule"] = [[0.0, 0.8, 0.0], [2.0, 1.2, 0.3]]
    data["output"] = str(tmp_path / "tr")
    assert main(["track", "--config", str(write_cfg(tmp_path, data))]) == 0
    csv_path = tmp_path / "tr" / "tracking.csv"
    assert json.loads((tmp_path / "tr" / "tracking_summary.json").read_text())["monotone"] is True
    assert main(["plot", str(csv_path), "--kind", "tracking", "--out", str(tmp_path / "p.dat")]) == 0
    lines = (tmp_path / "p.dat").read_text().splitlines()
    assert lines[0] == "# t v_ref v1 w_ref w3" and len(lines) == 81


def test_plot_kinds_on_simulation_log(tmp_path):
    cfg = small_indoor(tmp_path, episodes=1)
    assert main(["simulate", "--config", str(cfg), "--jobs", "1"]) == 0
    csv_path = next((tmp_path / "out" / "trajectories").glob("*.csv"))
    for kind in ("trajectory", "h_profile", "tracking"):
        assert main(["plot", str(csv_path), "--kind", kind]) == 0
    prof = csv_path.with_suffix(".h_profile.dat").read_text().splitlines()
    assert prof[0] == "# t h d_safe"
    assert min(float(l.split()[1]) for l in prof[1:]) >= -1e-3


def test_plot_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    assert main(["plot", str(tmp_path / "empty.csv"), "--kind", "tracking"]) == 2
    (tmp_path / "junk.csv").write_text("a,b\n1,2\n")
    assert main(["plot", str(tmp_path / "junk.csv"), "--kind", "h_profile"]) == 2
    (tmp_path / "bad.csv").write_text("t,h,d_safe\n0,abc,1\n")
    assert main(["plot", str(tmp_path / "bad.csv"), "--kind", "h_profile"]) == 2
    assert main(["plot", str(tmp_path / "missing.csv"), "--kind", "trajectory"]) == 2


def test_log_level_from_environment(tmp_path, monkeypatch):
    import logging

    monkeypatch.setenv("SAFE_NAV_LOG", "debug")
    root = logging.getLogger()
    old = root.level, list(root.handlers)
    root.handlers.clear()
    try:
        main(["plot", str(tmp_path / "missing.csv"), "--kind", "trajectory"])
        assert root.level == logging.DEBUG
    finally:
        root.handlers[:] = old[1]
        root.setLevel(old[0])
