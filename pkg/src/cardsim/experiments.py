"""Experiment configs, load sweeps, tail curves, validation checks and CSV output.

A config is a TOML file::

    n = 2
    rho = [0.5, 0.8, 0.9]
    trials = 10
    arrivals = 1_000_000
    seed = 1

    [distribution]
    kind = "weibull-mean-cv"
    cv = 10

    [[policies]]
    policy = "lwl"

    [[policies]]
    policy = "card-flexible"
    params = { recipe = "practical", gamma = 0.6 }

    [outputs]
    curves_csv = "curves.csv"

See the README for every key.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import analytics
from .distributions import JobSizeModel, dist_tag, model_from_spec, solve_size_threshold
from .policies import (CardConfig, LWLConfig, PolicyConfigError, RandomConfig, RoundRobinConfig,
                       SitaConfig, DiceConfig, card_params_from_alpha_beta, card_threshold_c,
                       dice_thresholds, multiband_config, practical_gamma, sita_equal_load)
from .simulator import SimConfig, TrialResult, confidence_interval, run_trial

log = logging.getLogger(__name__)

POLICY_NAMES = ("card-rigid", "card-flexible", "card-multiband", "lwl", "sita-e", "dice",
                "random", "round-robin")

CURVE_COLUMNS = ("policy", "n", "dist", "rho", "mean_T", "ci_half", "se", "normalized_mean_T",
                 "normalized_ci", "lower_bound", "K_card", "trials", "arrivals", "reason")
TAIL_COLUMNS = ("policy", "n", "dist", "rho", "t", "ccdf")
VALIDATE_COLUMNS = ("check", "policy", "dist", "rho", "measured", "target", "se", "passed")
TAIL_GRID_POINTS = 200


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    n: int
    distributions: list
    policies: list
    rho: list
    trials: int = 10
    arrivals: int = 1_000_000
    seed: int = 1
    warmup_fraction: float = 0.1
    normalize: bool = True
    threads: int = 1
    out_dir: str = "."
    curves_csv: Optional[str] = "curves.csv"
    tails_csv: Optional[str] = None
    validate_report: Optional[str] = "validate.csv"
    tails_reference: str = "card-flexible"
    figures: bool = False

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ConfigError(f"n must be an integer >= 2, got {self.n}")
        if not self.distributions:
            raise ConfigError("config is missing the 'distribution' key")
        if not self.policies:
            raise ConfigError("config is missing the 'policies' key")
        if not self.rho:
            raise ConfigError("config is missing the 'rho' key")
        if any(not 0 < r < 1 for r in self.rho):
            raise ConfigError("every load in 'rho' must lie strictly inside (0, 1)")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.arrivals < 1:
            raise ConfigError("arrivals must be >= 1")
        for p in self.policies:
            if p.get("policy") not in POLICY_NAMES:
                raise ConfigError(f"unknown policy {p.get('policy')!r}; expected one of {POLICY_NAMES}")

    def path(self, name: Optional[str]) -> Optional[str]:
        if not name:
            return None
        return name if os.path.isabs(name) else os.path.join(self.out_dir, name)


def config_from_dict(raw: Mapping[str, Any], **overrides) -> ExperimentConfig:
    raw = dict(raw)
    if "distributions" in raw:
        dists = list(raw["distributions"])
    elif "distribution" in raw:
        dists = [raw["distribution"]]
    else:
        raise ConfigError("config is missing the 'distribution' key")
    for key in ("n", "rho", "policies"):
        if key not in raw:
            raise ConfigError(f"config is missing the {key!r} key")
    outputs = dict(raw.get("outputs", {}))
    kwargs = dict(
        n=int(raw["n"]),
        distributions=dists,
        policies=[dict(p) for p in raw["policies"]],
        rho=[float(r) for r in (raw["rho"] if isinstance(raw["rho"], list) else [raw["rho"]])],
        trials=int(raw.get("trials", 10)),
        arrivals=int(raw.get("arrivals", 1_000_000)),
        seed=int(raw.get("seed", 1)),
        warmup_fraction=float(raw.get("warmup_fraction", 0.1)),
        normalize=bool(raw.get("normalize", True)),
        threads=int(raw.get("threads", 1)),
        out_dir=str(raw.get("out_dir", ".")),
    )
    for key in ("curves_csv", "tails_csv", "validate_report", "tails_reference", "figures"):
        if key in outputs:
            kwargs[key] = outputs[key]
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**kwargs)


def load_config(path: str, **overrides) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return config_from_dict(raw, **overrides)


# --------------------------------------------------------------------------
# policy recipes
# --------------------------------------------------------------------------

@dataclass
class ResolvedPolicy:
    label: str
    config: Any
    meta: dict = field(default_factory=dict)
    class_thresholds: Optional[tuple] = None


def _practical_card(n, rho, model, params, flexible):
    alpha_p = float(params.get("alpha_prime", 0.15))
    beta_p = float(params.get("beta_prime", 0.15))
    gamma = params.get("gamma")
    gamma = practical_gamma(model.cv) if gamma is None else float(gamma)
    eps = 1.0 - rho
    if not (0 < alpha_p < 0.5 and 0 < beta_p < 0.5):
        raise PolicyConfigError("alpha' and beta' must lie in (0, 1/2)")
    # n = 2 gives 1/2 - alpha' and 1/2 + beta'
    f_minus = (1.0 - 1.0 / n) * (1.0 - 2.0 * alpha_p)
    f_plus = 1.0 - (1.0 / n) * (1.0 - 2.0 * beta_p)
    c = gamma / math.sqrt(eps) * math.log(1.0 / eps)
    selection = params.get("short_selection", "least-work" if flexible and n > 2 else "uniform-random")
    cfg = CardConfig(n=n, m_minus=solve_size_threshold(model, f_minus),
                     m_plus=solve_size_threshold(model, f_plus), c=c, flexible=flexible,
                     short_selection=selection, check_thresholds=False)
    return cfg, {"alpha_prime": alpha_p, "beta_prime": beta_p, "gamma": gamma}


def resolve_policy(spec: Mapping[str, Any], n: int, rho: float, model: JobSizeModel) -> ResolvedPolicy:
    """Turn a config policy table into a concrete policy at load ``rho``."""
    name = spec["policy"]
    params = dict(spec.get("params", {}))
    label = spec.get("label", name)
    eps = 1.0 - rho
    lam = rho / model.mean
    meta: dict = {}

    if name in ("card-rigid", "card-flexible"):
        flexible = name == "card-flexible"
        recipe = params.get("recipe", "explicit" if "m_plus" in params else "practical")
        selection = params.get("short_selection", "uniform-random")
        if recipe == "explicit":
            cfg = CardConfig(n=n, m_minus=float(params["m_minus"]), m_plus=float(params["m_plus"]),
                             c=float(params["c"]), flexible=flexible, short_selection=selection,
                             check_thresholds=bool(params.get("check_thresholds", True)))
        elif recipe == "thm2":
            alpha, beta, delta = (float(params[k]) for k in ("alpha", "beta", "delta"))
            m_minus, m_plus = card_params_from_alpha_beta(n, lam, model, alpha, beta)
            c = card_threshold_c(n, m_plus, beta, delta)
            cfg = CardConfig(n=n, m_minus=m_minus, m_plus=m_plus, c=c, flexible=flexible,
                             short_selection=selection)
            meta = {"alpha": alpha, "beta": beta, "delta": delta}
        elif recipe == "heavy-traffic":
            r = analytics.heavy_traffic_recipe(eps, n, model)
            cfg = CardConfig(n=n, m_minus=r.m_minus, m_plus=r.m_plus, c=r.c, flexible=flexible,
                             short_selection=selection)
            meta = {"alpha": r.alpha, "beta": r.beta, "delta": r.delta}
        elif recipe == "practical":
            cfg, meta = _practical_card(n, rho, model, params, flexible)
        else:
            raise ConfigError(f"unknown CARD recipe {recipe!r}")
        return ResolvedPolicy(label, cfg, meta, (cfg.m_minus, cfg.m_plus))

    if name == "card-multiband":
        recipe = params.get("recipe", "multiband-sqrt-eps")
        if recipe != "multiband-sqrt-eps":
            raise ConfigError(f"unknown multi-band recipe {recipe!r}")
        return ResolvedPolicy(label, multiband_config(n, eps, model, bool(params.get("flexible", True))))

    if name == "dice":
        if "tau" in params:
            return ResolvedPolicy(label, DiceConfig(n=n, tau=tuple(params["tau"])))
        recipe = params.get("recipe", "dice-footnote")
        if recipe != "dice-footnote":
            raise ConfigError(f"unknown Dice recipe {recipe!r}")
        eta = params.get("eta")
        return ResolvedPolicy(label, dice_thresholds(n, eps, model, eta=None if eta is None else float(eta)))

    if name == "sita-e":
        if "cutoffs" in params:
            return ResolvedPolicy(label, SitaConfig(n=n, cutoffs=tuple(params["cutoffs"])))
        return ResolvedPolicy(label, sita_equal_load(n, model))
    if name == "lwl":
        return ResolvedPolicy(label, LWLConfig(n))
    if name == "random":
        return ResolvedPolicy(label, RandomConfig(n))
    if name == "round-robin":
        return ResolvedPolicy(label, RoundRobinConfig(n))
    raise ConfigError(f"unknown policy {name!r}")


# --------------------------------------------------------------------------
# running cells
# --------------------------------------------------------------------------

def run_trials(cfg: ExperimentConfig, policy: ResolvedPolicy, model: JobSizeModel, rho: float,
               collect_tails: bool = False) -> list[TrialResult]:
    """Run ``cfg.trials`` independent trials; results come back in trial order."""
    lam = rho / model.mean
    sims = [SimConfig(n=cfg.n, lam=lam, model=model, policy=policy.config, num_arrivals=cfg.arrivals,
                      warmup_fraction=cfg.warmup_fraction, seed=cfg.seed, trial=k,
                      collect_tails=collect_tails, class_thresholds=policy.class_thresholds)
            for k in range(cfg.trials)]
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(run_trial, sims))
    return [run_trial(s) for s in sims]


@dataclass
class Cell:
    """All trials of one (distribution, load, policy) combination."""

    dist: str
    rho: float
    policy: str
    trials: list = field(default_factory=list)
    resolved: Optional[ResolvedPolicy] = None
    reason: str = ""


def _resolve_all(cfg, model, rho):
    resolved, failures = [], {}
    for spec in cfg.policies:
        label = spec.get("label", spec["policy"])
        try:
            resolved.append(resolve_policy(spec, cfg.n, rho, model))
        except (PolicyConfigError, ValueError) as exc:
            failures[label] = str(exc)
            resolved.append(None)
    card = next((r for r in resolved if r is not None and r.class_thresholds is not None), None)
    for r in resolved:
        if r is not None and r.class_thresholds is None and card is not None:
            r.class_thresholds = card.class_thresholds
    return resolved, failures


def iter_cells(cfg: ExperimentConfig, collect_tails: bool = False, reference: Optional[str] = None):
    """Yield ``(dist_spec, model, rho, [Cell, ...])`` in config order.

    When ``reference`` names a policy it is simulated first within each load.
    """
    for dspec in cfg.distributions:
        model = model_from_spec(dspec)
        tag = dist_tag(dspec, model)
        for rho in cfg.rho:
            resolved, failures = _resolve_all(cfg, model, rho)
            labels = [spec.get("label", spec["policy"]) for spec in cfg.policies]
            cells = [Cell(tag, rho, lab, resolved=r, reason=failures.get(lab, ""))
                     for lab, r in zip(labels, resolved)]
            order = sorted(range(len(cells)), key=lambda i: cells[i].policy != reference)
            for i in order:
                cell = cells[i]
                if cell.resolved is None:
                    log.warning("skipping %s at rho=%g: %s", cell.policy, rho, cell.reason)
                    continue
                log.info("simulating %s, %s, rho=%g", cell.policy, tag, rho)
                cell.trials = run_trials(cfg, cell.resolved, model, rho, collect_tails)
            yield dspec, model, rho, cells


def estimate(values: Sequence[float]):
    """Mean with 95% CI half-width and standard error; CI is NaN for a single trial."""
    vals = np.asarray(values, dtype=float)
    if vals.size >= 2:
        e = confidence_interval(vals)
        return e.mean, e.ci_half, e.se
    return float(vals.mean()), math.nan, math.nan


def curve_row(cfg: ExperimentConfig, model: JobSizeModel, rho: float, cell: Cell) -> dict:
    lam = rho / model.mean
    row = dict.fromkeys(CURVE_COLUMNS, math.nan)
    row.update(policy=cell.policy, n=cfg.n, dist=cell.dist, rho=rho, trials=cfg.trials,
               arrivals=cfg.arrivals, reason=cell.reason)
    row["lower_bound"] = analytics.lower_bound_mean_response(cfg.n, lam, model)
    row["K_card"] = analytics.k_card(cfg.n, model)
    if not cell.trials:
        return row
    mean, half, se = estimate([t.mean_T for t in cell.trials])
    row.update(mean_T=mean, ci_half=half, se=se)
    if cfg.normalize:
        w = analytics.mg1_mean_work(lam, model)
        row.update(normalized_mean_T=mean / w, normalized_ci=half / w)
    return row


def tail_rows(cfg: ExperimentConfig, rho: float, cells: Sequence[Cell], reference: str) -> list:
    ref = next((c for c in cells if c.policy == reference and c.trials), None)
    if ref is None:
        raise ConfigError(f"tails need the reference policy {reference!r} in the config")
    pooled = np.concatenate([t.response_times for t in ref.trials])
    t_max = float(np.quantile(pooled, 0.99))
    del pooled
    grid = np.linspace(0.0, t_max, TAIL_GRID_POINTS)
    rows = []
    for cell in cells:
        if not cell.trials:
            continue
        # every trial contributes the same number of jobs, so the mean of
        # per-trial tails equals the pooled empirical tail
        ccdf = np.mean([t.ccdf(grid) for t in cell.trials], axis=0)
        rows.extend({"policy": cell.policy, "n": cfg.n, "dist": cell.dist, "rho": rho,
                     "t": float(t), "ccdf": float(p)} for t, p in zip(grid, ccdf))
    return rows


@dataclass
class SweepOutput:
    curves: list
    tails: list
    cells: list


def run_sweep(cfg: ExperimentConfig, tails: Optional[bool] = None, write: bool = True) -> SweepOutput:
    """Simulate every (distribution, load, policy) cell and write the CSV outputs."""
    want_tails = bool(cfg.tails_csv) if tails is None else tails
    reference = cfg.tails_reference if want_tails else None
    curves, tail_out, all_cells = [], [], []
    for _, model, rho, cells in iter_cells(cfg, collect_tails=want_tails, reference=reference):
        curves.extend(curve_row(cfg, model, rho, c) for c in cells)
        if want_tails:
            tail_out.extend(tail_rows(cfg, rho, cells, cfg.tails_reference))
            for c in cells:
                for t in c.trials:
                    t.response_times = None
        all_cells.extend(cells)
    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        if cfg.curves_csv:
            write_csv(cfg.path(cfg.curves_csv), CURVE_COLUMNS, curves)
        if want_tails:
            write_csv(cfg.path(cfg.tails_csv or "tails.csv"), TAIL_COLUMNS, tail_out)
        if cfg.figures:
            from . import plotting
            if cfg.curves_csv:
                plotting.plot_curves(curves, _figure_path(cfg.path(cfg.curves_csv)),
                                     normalized=cfg.normalize)
            if want_tails:
                plotting.plot_tails(tail_out, _figure_path(cfg.path(cfg.tails_csv or "tails.csv")))
    return SweepOutput(curves, tail_out, all_cells)


def _figure_path(csv_path):
    return os.path.splitext(csv_path)[0] + ".png"


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

def _check(rows, name, cell, rho, measured, target, se, passed):
    rows.append({"check": name, "policy": cell.policy, "dist": cell.dist, "rho": rho,
                 "measured": measured, "target": target, "se": se, "passed": bool(passed)})


def validate_cells(cfg: ExperimentConfig, model: JobSizeModel, rho: float, cells: Iterable[Cell]) -> list:
    """Structural checks on simulated cells: lower bound, work decomposition, idleness, cycles."""
    lam = rho / model.mean
    eps = 1.0 - rho
    lb = analytics.lower_bound_mean_response(cfg.n, lam, model)
    w_mg1 = analytics.mg1_mean_work(lam, model)
    rows: list = []
    for cell in cells:
        tr = cell.trials
        if not tr:
            continue
        mean_t, _, se_t = estimate([t.mean_T for t in tr])
        se_t = 0.0 if math.isnan(se_t) else se_t
        _check(rows, "lower-bound", cell, rho, mean_t + 3 * se_t, lb, se_t, mean_t + 3 * se_t >= lb)

        w_all = np.mean([t.time_avg_work_total for t in tr])
        iw = np.mean([t.idle_work_cross_term for t in tr])
        resid = abs(w_all - w_mg1 - iw / eps) / w_all
        _check(rows, "work-decomposition", cell, rho, resid, 0.05, math.nan, resid <= 0.05)

        cons = max(abs(t.injected_work - t.completed_work - t.final_work) / t.injected_work for t in tr)
        _check(rows, "work-conservation", cell, rho, cons, 1e-6, math.nan, cons <= 1e-6)

        diff = np.array([t.arrival_avg_work_total - t.time_avg_work_total for t in tr])
        d_mean, _, d_se = estimate(diff)
        if not math.isnan(d_se):
            _check(rows, "pasta", cell, rho, d_mean, 0.0, d_se, abs(d_mean) <= 3 * d_se)

        meta = cell.resolved.meta if cell.resolved else {}
        cfg_p = cell.resolved.config if cell.resolved else None
        if isinstance(cfg_p, CardConfig) and not cfg_p.flexible and {"alpha", "beta", "delta"} <= set(meta):
            idle, _, se_i = estimate([t.cycle_stats.short_idle_fraction for t in tr])
            se_i = 0.0 if math.isnan(se_i) else se_i
            _check(rows, "short-idle", cell, rho, idle, meta["delta"], se_i, idle <= meta["delta"] + 3 * se_i)
            b_vals = [t.cycle_stats.mean_B for t in tr if t.cycle_stats.count_B]
            a_vals = [t.cycle_stats.mean_A for t in tr if t.cycle_stats.count_A]
            for check, vals, bound in (("below-period", b_vals, cfg_p.m_plus / meta["beta"]),
                                       ("above-period", a_vals, cfg_p.m_plus / meta["alpha"])):
                if not vals:
                    _check(rows, check, cell, rho, math.nan, bound, math.nan, False)
                    continue
                m, _, se = estimate(vals)
                se = 0.0 if math.isnan(se) else se
                _check(rows, check, cell, rho, m, bound, se, m <= bound + 3 * se)
    return rows


def run_validate(cfg: ExperimentConfig, write: bool = True) -> list:
    rows = []
    for _, model, rho, cells in iter_cells(cfg):
        rows.extend(validate_cells(cfg, model, rho, cells))
    if write and cfg.validate_report:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_csv(cfg.path(cfg.validate_report), VALIDATE_COLUMNS, rows)
    return rows


# --------------------------------------------------------------------------
# bounds
# --------------------------------------------------------------------------

def emit_bounds_table(cfg: ExperimentConfig) -> list:
    """One row of analytic constants per (distribution, load), in config order."""
    rows = []
    for dspec in cfg.distributions:
        model = model_from_spec(dspec)
        tag = dist_tag(dspec, model)
        for rho in cfg.rho:
            rows.append(analytics.bounds_row(cfg.n, rho / model.mean, model, tag))
    return rows


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else f"{float(v):.9g}"
    return str(v)


def rows_to_csv(columns: Sequence[str], rows: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(columns, rows))


def rows_to_text(columns: Sequence[str], rows: Sequence[Mapping]) -> str:
    table = [list(columns)] + [[format_value(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(columns))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in table) + "\n"
