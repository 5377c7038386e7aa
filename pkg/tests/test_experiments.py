import math
import os

import pytest

from cardsim import analytics, cli, experiments as ex
from cardsim.distributions import Exponential

CURVES_HEADER = ("policy,n,dist,rho,mean_T,ci_half,se,normalized_mean_T,normalized_ci,lower_bound,K_card,"
                 "trials,arrivals,reason")
TAILS_HEADER = "policy,n,dist,rho,t,ccdf"
VALIDATE_HEADER = "check,policy,dist,rho,measured,target,se,passed"
BOUNDS_HEADER = ("dist,n,rho,K_CARD,K_LWL,K_SITA_E,K_SITA_O,mg1_mean_work,lower_bound,sita_e_exact,"
                 "card_upper_explicit")

SMALL = """
n = 2
rho = [0.5, 0.8]
trials = 2
arrivals = 1000
seed = 4

[distribution]
kind = "weibull-mean-cv"
mean = 1.0
cv = 10.0

[[policies]]
policy = "card-flexible"

[[policies]]
policy = "lwl"

[[policies]]
policy = "sita-e"

[outputs]
curves_csv = "curves.csv"
tails_csv = "tails.csv"
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return str(path)


def read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def test_csv_schema(small_cfg, tmp_path):
    cfg = ex.load_config(small_cfg, out_dir=str(tmp_path / "out"))
    ex.run_sweep(cfg)
    curves = read(cfg.path("curves.csv")).splitlines()
    tails = read(cfg.path("tails.csv")).splitlines()
    assert curves[0] == CURVES_HEADER
    assert tails[0] == TAILS_HEADER
    assert len(curves) == 1 + 2 * 3
    assert len(tails) == 1 + 2 * 3 * ex.TAIL_GRID_POINTS
    assert ",".join(ex.TAIL_COLUMNS) == TAILS_HEADER
    assert ",".join(ex.VALIDATE_COLUMNS) == VALIDATE_HEADER
    assert ",".join(analytics.BOUNDS_COLUMNS) == BOUNDS_HEADER


def test_sweep_is_byte_identical(small_cfg, tmp_path):
    a = ex.load_config(small_cfg, out_dir=str(tmp_path / "a"))
    b = ex.load_config(small_cfg, out_dir=str(tmp_path / "b"), threads=3)
    ex.run_sweep(a)
    ex.run_sweep(b)
    for name in ("curves.csv", "tails.csv"):
        assert read(a.path(name)) == read(b.path(name))


def test_float_formatting():
    assert ex.format_value(1 / 3) == "0.333333333"
    assert ex.format_value(math.nan) == ""
    assert ex.format_value(True) == "true"
    assert ex.format_value(7) == "7"


def test_normalize_off_leaves_columns_empty(small_cfg, tmp_path):
    cfg = ex.load_config(small_cfg, out_dir=str(tmp_path), normalize=False)
    out = ex.run_sweep(cfg, tails=False)
    lines = read(cfg.path("curves.csv")).splitlines()[1:]
    cols = CURVES_HEADER.split(",")
    k, j = cols.index("normalized_mean_T"), cols.index("normalized_ci")
    assert all(line.split(",")[k] == "" and line.split(",")[j] == "" for line in lines)
    assert all(math.isfinite(r["mean_T"]) for r in out.curves)


def test_curve_rows_respect_lower_bound(small_cfg, tmp_path):
    # the row-level check needs enough trials for a sensible t quantile
    cfg = ex.load_config(small_cfg, out_dir=str(tmp_path), trials=10, arrivals=5000)
    out = ex.run_sweep(cfg, tails=False, write=False)
    for r in out.curves:
        assert r["mean_T"] - r["ci_half"] >= r["lower_bound"] - 3 * r["se"]
        assert r["normalized_mean_T"] == pytest.approx(
            r["mean_T"] / analytics.mg1_mean_work(r["rho"], ex.model_from_spec({"kind": "weibull-mean-cv",
                                                                                    "cv": 10.0})))


def test_lwl_sweep_matches_erlang_c():
    cfg = ex.config_from_dict(dict(n=2, rho=[0.5, 0.8], trials=4, arrivals=200_000, seed=2,
                                   distribution={"kind": "exponential", "rate": 1.0},
                                   policies=[{"policy": "lwl"}]))
    out = ex.run_sweep(cfg, write=False)
    for r in out.curves:
        exact = analytics.erlang_c_mean_response(2, r["rho"]) / analytics.mg1_mean_work(r["rho"], Exponential(1.0))
        assert r["normalized_mean_T"] == pytest.approx(exact, rel=0.05)


def test_missing_keys_are_named():
    base = dict(n=2, rho=[0.5], policies=[{"policy": "lwl"}], distribution={"kind": "exponential"})
    for key in ("distribution", "rho", "policies", "n"):
        raw = {k: v for k, v in base.items() if k != key}
        with pytest.raises(ex.ConfigError, match=key):
            ex.config_from_dict(raw)
    with pytest.raises(ex.ConfigError, match="unknown policy"):
        ex.config_from_dict({**base, "policies": [{"policy": "jsq"}]})
    with pytest.raises(ex.ConfigError):
        ex.config_from_dict({**base, "rho": [1.0]})


def test_bounds_table_two_distributions():
    cfg = ex.config_from_dict(dict(n=2, rho=[0.9], policies=[{"policy": "lwl"}],
                                   distributions=[{"kind": "exponential", "rate": 1.0},
                                                  {"kind": "weibull-mean-cv", "cv": 10.0}]))
    rows = ex.emit_bounds_table(cfg)
    assert [r["dist"] for r in rows] == ["exp1", "cv10"]
    assert rows[0]["K_LWL"] == 1.0
    assert rows[0]["lower_bound"] == pytest.approx(4.765, abs=1e-3)


def test_infeasible_recipe_reported_with_reason(tmp_path):
    cfg = ex.config_from_dict(dict(
        n=2, rho=[0.5, 0.9], trials=2, arrivals=2000, seed=1, distribution={"kind": "exponential"},
        policies=[{"policy": "card-rigid", "params": {"recipe": "thm2", "alpha": 0.1, "beta": 0.2, "delta": 0.05}},
                  {"policy": "lwl"}]), out_dir=str(tmp_path))
    out = ex.run_sweep(cfg, tails=False, write=False)
    bad = [r for r in out.curves if r["policy"] == "card-rigid" and r["rho"] == 0.5][0]
    assert "infeasible" in bad["reason"] and math.isnan(bad["mean_T"])
    good = [r for r in out.curves if r["policy"] == "card-rigid" and r["rho"] == 0.9][0]
    assert good["reason"] == "" and math.isfinite(good["mean_T"])


def test_resolve_policy_recipes():
    model = Exponential(1.0)
    r = ex.resolve_policy({"policy": "card-rigid", "params": {"recipe": "thm2", "alpha": 0.125, "beta": 0.05,
                                                              "delta": 0.05}}, 2, 0.9, model)
    assert r.config.c == pytest.approx(analytics.card_threshold_c(2, r.config.m_plus, 0.05, 0.05))
    assert r.meta == {"alpha": 0.125, "beta": 0.05, "delta": 0.05}
    r = ex.resolve_policy({"policy": "card-flexible"}, 2, 0.98, model)
    assert r.config.flexible and r.meta["gamma"] == 0.3
    r = ex.resolve_policy({"policy": "card-rigid", "params": {"m_minus": 1, "m_plus": 2, "c": 3}}, 2, 0.9, model)
    assert (r.config.m_minus, r.config.m_plus, r.config.c) == (1.0, 2.0, 3.0)
    r = ex.resolve_policy({"policy": "dice", "params": {"tau": [4.0]}}, 2, 0.9, model)
    assert r.config.tau == (4.0,)
    r = ex.resolve_policy({"policy": "card-multiband"}, 10, 0.98, model)
    assert r.config.thresholds[0] == pytest.approx(r.config.cutoffs[0] / math.sqrt(0.02))
    r = ex.resolve_policy({"policy": "card-flexible"}, 10, 0.98, model)
    assert r.config.short_selection == "least-work"
    with pytest.raises(ex.ConfigError):
        ex.resolve_policy({"policy": "card-rigid", "params": {"recipe": "magic"}}, 2, 0.9, model)


def test_class_thresholds_shared_with_benchmarks(small_cfg, tmp_path):
    cfg = ex.load_config(small_cfg, out_dir=str(tmp_path))
    for _, _, _, cells in ex.iter_cells(cfg):
        card = [c for c in cells if c.policy == "card-flexible"][0]
        lwl = [c for c in cells if c.policy == "lwl"][0]
        assert lwl.trials[0].class_counts == card.trials[0].class_counts


def test_tails_start_at_one_and_decrease(small_cfg, tmp_path):
    out = ex.run_sweep(ex.load_config(small_cfg, out_dir=str(tmp_path)), write=False)
    rows = [r for r in out.tails if r["policy"] == "lwl" and r["rho"] == 0.8]
    assert rows[0]["t"] == 0.0 and rows[0]["ccdf"] == 1.0
    vals = [r["ccdf"] for r in rows]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    ref = [r for r in out.tails if r["policy"] == "card-flexible" and r["rho"] == 0.8]
    assert ref[-1]["ccdf"] == pytest.approx(0.01, abs=0.002)


def test_tails_need_reference(tmp_path):
    cfg = ex.config_from_dict(dict(n=2, rho=[0.5], trials=2, arrivals=500, distribution={"kind": "exponential"},
                                   policies=[{"policy": "lwl"}]), out_dir=str(tmp_path))
    with pytest.raises(ex.ConfigError, match="reference"):
        ex.run_sweep(cfg, tails=True, write=False)


def test_validate_rows(tmp_path):
    cfg = ex.config_from_dict(dict(
        n=2, rho=[0.8], trials=3, arrivals=100_000, seed=5, distribution={"kind": "exponential"},
        policies=[{"policy": "card-rigid", "params": {"recipe": "thm2", "alpha": 0.125, "beta": 0.05, "delta": 0.05}},
                  {"policy": "lwl"}]), out_dir=str(tmp_path))
    rows = ex.run_validate(cfg)
    checks = {(r["check"], r["policy"]) for r in rows}
    for name in ("lower-bound", "work-decomposition", "work-conservation", "pasta"):
        assert (name, "lwl") in checks and (name, "card-rigid") in checks
    for name in ("short-idle", "below-period", "above-period"):
        assert (name, "card-rigid") in checks and (name, "lwl") not in checks
    assert read(cfg.path("validate.csv")).splitlines()[0] == VALIDATE_HEADER


def test_cli_bounds_and_sweep(small_cfg, tmp_path, capsys):
    out_dir = str(tmp_path / "cli")
    assert cli.main(["bounds", small_cfg, "--format", "csv", "--output", str(tmp_path / "b.csv")]) == 0
    assert read(tmp_path / "b.csv").splitlines()[0] == BOUNDS_HEADER
    assert cli.main(["bounds", small_cfg]) == 0
    assert "K_CARD" in capsys.readouterr().out
    assert cli.main(["sweep", small_cfg, "--out-dir", out_dir, "--trials", "2", "--arrivals", "800", "--plots"]) == 0
    assert os.path.exists(os.path.join(out_dir, "curves.csv"))
    assert os.path.getsize(os.path.join(out_dir, "curves.png")) > 0
    assert os.path.getsize(os.path.join(out_dir, "tails.png")) > 0
    assert cli.main(["tails", small_cfg, "--out-dir", str(tmp_path / "t"), "--arrivals", "800"]) == 0
    assert os.path.exists(tmp_path / "t" / "tails.csv")
    assert cli.main(["run", small_cfg, "--arrivals", "800", "--seed", "3"]) == 0
    assert "card-flexible" in capsys.readouterr().out


def test_cli_validate_exit_status(tmp_path):
    path = tmp_path / "v.toml"
    path.write_text('n = 2\nrho = [0.8]\ntrials = 10\narrivals = 20000\n[distribution]\nkind = "exponential"\n'
                    '[[policies]]\npolicy = "lwl"\n')
    assert cli.main(["validate", str(path), "--out-dir", str(tmp_path)]) == 0


def test_cli_config_error(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('n = 2\nrho = [0.5]\n[[policies]]\npolicy = "lwl"\n')
    assert cli.main(["sweep", str(path)]) == 2
    assert "distribution" in capsys.readouterr().err


def test_shipped_configs_parse():
    root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
    names = sorted(f for f in os.listdir(root) if f.endswith(".toml"))
    assert names
    for name in names:
        cfg = ex.load_config(os.path.join(root, name))
        for dspec in cfg.distributions:
            model = ex.model_from_spec(dspec)
            for rho in cfg.rho:
                ex._resolve_all(cfg, model, rho)
