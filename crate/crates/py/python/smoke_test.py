"""Smoke test for the ffr_sim extension module."""

import json

import ffr_sim


def toy_config():
    cfg = json.loads(ffr_sim.ScenarioConfig.m5bat().to_json())
    cfg["fleet"] = cfg["fleet"][:3]
    cfg["market"]["c_bid"] = 0.8 * sum(e["nominal_power_kw"] for e in cfg["fleet"])
    cfg["lookup"] = {"step_size": 0.05, "reference_soc": 0.5}
    return ffr_sim.ScenarioConfig.from_json(json.dumps(cfg))


def test_config_round_trip():
    cfg = ffr_sim.ScenarioConfig.m5bat()
    assert len(cfg.module_ids) == 10
    again = ffr_sim.ScenarioConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()


def test_module_losses():
    spec = toy_config().modules()[0]
    assert spec.conduction_loss(100.0) == spec.conduction_loss(-100.0) > 0.0
    sw = spec.switching_loss(100.0)
    parts = sw["p_vi"] + sw["p_dt"] + sw["p_rr"] + sw["p_coss"] + sw["p_g"]
    assert abs(sw["total"] - parts) <= 1e-9 * sw["total"]
    pb = spec.power_balance(50.0, 0.5, discharge=True)
    assert pb["p_mod"] < pb["p_bat"]


def test_lookup_and_simulation():
    cfg = toy_config()
    lookup = ffr_sim.LookupTable.build(cfg)
    assert len(lookup) == 41
    assert lookup.count(0.0) == 0
    signal = ffr_sim.synth_regd(4, 30)
    assert len(signal) == 30 and all(-1.0 <= r <= 1.0 for r in signal)

    sim = ffr_sim.Simulator(cfg, "performance_aware", lookup)
    rec = sim.step(signal[0])
    assert abs(sum(m["p_mod"] for m in rec["modules"]) - rec["p_mbss_kw"]) <= 1e-9
    sim.run(signal[1:])
    assert sim.steps == 30
    perf = sim.report()
    base = ffr_sim.simulate(cfg, "maxpower", signal)
    assert base["solver_calls"] == 0
    assert perf["totals"]["energy_loss_kwh"] < base["totals"]["energy_loss_kwh"]


def test_aging_cost():
    # one full cycle costs E * price / N
    cost = ffr_sim.accumulated_aging_cost([0.0, 1.0, 0.0], 100.0, 2000.0, 300.0)
    assert abs(cost - 100.0 * 300.0 / 2000.0) < 1e-9


def test_errors():
    try:
        ffr_sim.Simulator(toy_config(), "nonsense")
    except ValueError as e:
        assert "unknown method" in str(e)
    else:
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name} ok")
