import math

import numpy as np
import pytest
from scipy import integrate, stats

from cardsim import analytics, policies as p, simulator as sim
from cardsim.distributions import Exponential, Uniform, weibull_from_mean_cv


def brute_idle_work(w, dt):
    n = len(w)

    def f(t):
        ws = [max(x - t / n, 0.0) for x in w]
        return sum(x == 0.0 for x in ws) / n * sum(ws)

    breaks = sorted({n * x for x in w if 0 < n * x < dt})
    val, _ = integrate.quad(f, 0, dt, points=breaks or None, limit=200, epsabs=1e-12, epsrel=1e-12)
    return val


def reference_trial(cfg):
    """Slow pure-Python run of the same arrival and size streams."""
    n, N = cfg.n, cfg.num_arrivals
    warm = int(math.floor(cfg.warmup_fraction * N))
    r_inter, r_size, r_pol = sim.trial_streams(cfg.seed, cfg.trial)
    inter = r_inter.standard_exponential(N) / cfg.lam
    sizes = cfg.model.sample(r_size, N)
    upol = r_pol.random(N)
    kind, params = cfg.policy.lower()
    c = sim._cycle_threshold(cfg.policy)
    w = np.zeros(n)
    clock = start = 0.0
    area = np.zeros(n)
    idle = np.zeros(n)
    iw = 0.0
    resp = []
    above, last, b_periods, a_periods = False, None, [], []
    order = np.empty(n, dtype=np.int64)
    state = np.zeros(1, dtype=np.int64)
    for i in range(N):
        dt = inter[i]
        observe = i > warm
        if above and n * (w[0] - c) <= dt:
            tb = clock + n * (w[0] - c)
            if observe:
                if last is not None:
                    a_periods.append(tb - last)
                last = tb
            above = False
        # piecewise-linear segments between emptying times
        cuts = sorted({0.0, dt, *[n * x for x in w if 0 < n * x < dt]})
        for a, b in zip(cuts, cuts[1:]):
            empty = n * w <= a
            wa = np.where(empty, 0.0, w - a / n)
            wb = np.where(empty, 0.0, np.maximum(w - b / n, 0.0))
            seg = (wa + wb) / 2 * (b - a)
            if observe:
                area += seg
                idle += empty * (b - a)
                iw += np.mean(empty) * seg.sum()
        w = np.maximum(w - dt / n, 0.0)
        clock += dt
        if i == warm:
            start = clock
        s = sizes[i]
        j = p.dispatch_core(kind, params, s, w, upol[i], state, order)
        if i >= warm:
            resp.append(n * (w[j] + s))
        w[j] += s
        if not above and w[0] > c:
            if i >= warm:
                if last is not None:
                    b_periods.append(clock - last)
                last = clock
            above = True
    T = clock - start
    return dict(mean_T=np.mean(resp), work=area / T, idle=idle / T, iw=iw / T,
                mean_B=np.mean(b_periods) if b_periods else math.nan,
                mean_A=np.mean(a_periods) if a_periods else math.nan,
                count_B=len(b_periods), count_A=len(a_periods), final=w.sum())


def test_advance_work_examples():
    w, idle, area = sim.advance_work([1.0, 0.5], 0.4, n=2)
    assert w == pytest.approx([0.8, 0.3])
    assert list(idle) == [0.0, 0.0]
    w, idle, area = sim.advance_work([0.5, 3.0], 2.0)
    assert w[0] == 0.0 and idle[0] == pytest.approx(1.0) and area[0] == pytest.approx(0.25)
    w, idle, area = sim.advance_work([0.7, 1.3], 0.0)
    assert list(w) == [0.7, 1.3] and not idle.any() and not area.any()
    with pytest.raises(ValueError):
        sim.advance_work([1.0], -1.0)


@pytest.mark.parametrize("w,dt", [
    ([0.5, 3.0], 2.0), ([0.0, 0.0], 1.0), ([0.1, 0.2, 0.3], 1.5), ([1.0, 0.0, 4.0, 0.25], 5.0), ([2.0, 2.0], 0.5),
])
def test_idle_work_integral_matches_quadrature(w, dt):
    assert sim.idle_work_integral(w, dt) == pytest.approx(brute_idle_work(w, dt), abs=1e-10)


def card_cfg(n=2, N=4000, **kw):
    policy = kw.pop("policy", p.CardConfig(n, 0.5, 1.5, 2.0))
    return sim.SimConfig(n=n, lam=kw.pop("lam", 0.85), model=kw.pop("model", Exponential(1.0)), policy=policy,
                         num_arrivals=N, seed=kw.pop("seed", 3), trial=kw.pop("trial", 0), **kw)


@pytest.mark.parametrize("policy", [
    p.CardConfig(2, 0.5, 1.5, 2.0),
    p.CardConfig(3, 0.5, 1.5, 2.0, flexible=True, short_selection="least-work"),
    p.LWLConfig(2),
    p.MultiBandConfig(3, (0.3, 1.0, 2.5), (1.0, 3.0)),
    p.DiceConfig(2, (3.0,)),
])
def test_kernel_matches_reference(policy):
    cfg = card_cfg(n=policy.n, policy=policy, N=3000, collect_tails=False)
    ref = reference_trial(cfg)
    got = sim.run_trial(cfg)
    assert got.mean_T == pytest.approx(ref["mean_T"], rel=1e-9)
    assert got.time_avg_work_per_server == pytest.approx(ref["work"], rel=1e-9)
    assert got.idle_fraction_per_server == pytest.approx(ref["idle"], rel=1e-9, abs=1e-12)
    assert got.idle_work_cross_term == pytest.approx(ref["iw"], rel=1e-9, abs=1e-12)
    assert got.final_work == pytest.approx(ref["final"], rel=1e-9)
    if not math.isnan(ref["mean_B"]):
        assert got.cycle_stats.count_B == ref["count_B"] > 5
        assert got.cycle_stats.count_A == ref["count_A"]
        assert got.cycle_stats.mean_B == pytest.approx(ref["mean_B"], rel=1e-9)
        assert got.cycle_stats.mean_A == pytest.approx(ref["mean_A"], rel=1e-9)


def test_chunk_boundaries_do_not_matter(monkeypatch):
    cfg = card_cfg(N=5000)
    whole = sim.run_trial(cfg)
    monkeypatch.setattr(sim, "CHUNK", 777)
    pieces = sim.run_trial(cfg)
    assert pieces.mean_T == whole.mean_T
    assert pieces.idle_work_cross_term == whole.idle_work_cross_term
    assert np.array_equal(pieces.response_times, whole.response_times)


def test_determinism():
    a, b = sim.run_trial(card_cfg()), sim.run_trial(card_cfg())
    assert a.mean_T == b.mean_T
    assert np.array_equal(a.response_times, b.response_times)
    assert a.cycle_stats == b.cycle_stats
    assert sim.run_trial(card_cfg(trial=1)).mean_T != a.mean_T


def test_single_job_in_empty_system():
    # vanishing load: every job finds an empty system
    for policy in (p.LWLConfig(3), p.RoundRobinConfig(3), p.CardConfig(3, 0.5, 1.5, 2.0)):
        cfg = sim.SimConfig(n=3, lam=1e-9, model=Uniform(0.5, 1.5), policy=policy, num_arrivals=200, seed=1)
        r = sim.run_trial(cfg)
        _, r_size, _ = sim.trial_streams(1, 0)
        sizes = Uniform(0.5, 1.5).sample(r_size, 200)[20:]
        assert r.mean_T == pytest.approx(3 * sizes.mean(), rel=1e-12)


def test_work_conservation():
    r = sim.run_trial(card_cfg(N=200_000, model=weibull_from_mean_cv(1.0, 10.0), lam=0.9))
    assert abs(r.injected_work - r.completed_work - r.final_work) / r.injected_work <= 1e-6


def test_response_times_and_quantiles_sane():
    r = sim.run_trial(card_cfg(N=20_000))
    assert r.response_times.min() > 0
    qs = [r.tail[q] for q in sim.TAIL_QUANTILES]
    assert qs == sorted(qs)
    assert 0 <= r.idle_fraction_per_server.min() and r.idle_fraction_per_server.max() <= 1


def test_class_means_and_counts():
    r = sim.run_trial(card_cfg(N=20_000))
    assert sum(r.class_counts.values()) == r.job_count
    pooled = sum(r.mean_T_by_class[k] * r.class_counts[k] for k in r.class_counts) / r.job_count
    assert pooled == pytest.approx(r.mean_T, rel=1e-12)
    r = sim.run_trial(card_cfg(N=1000, policy=p.LWLConfig(2)))
    assert r.mean_T_by_class == {}


def test_histogram_fallback(monkeypatch):
    cfg = card_cfg(N=50_000)
    exact = sim.run_trial(cfg)
    monkeypatch.setattr(sim, "EXACT_TAIL_LIMIT", 10)
    binned = sim.run_trial(cfg)
    assert binned.response_times is None
    upper, counts = binned.histogram
    assert counts.sum() == exact.job_count
    # bins are 0.4% wide in log space
    for q in sim.TAIL_QUANTILES:
        assert binned.tail[q] == pytest.approx(exact.tail[q], rel=0.01)
    for t in (1.0, 5.0, 20.0):
        assert binned.ccdf(t) == pytest.approx(exact.ccdf(t), abs=0.01)


def test_ccdf_exact():
    r = sim.run_trial(card_cfg(N=2000))
    t = np.median(r.response_times)
    assert r.ccdf(t) == pytest.approx(np.mean(r.response_times > t))
    assert r.ccdf(0.0) == 1.0


def test_unstable_load_rejected():
    with pytest.raises(ValueError):
        card_cfg(lam=1.2)
    card_cfg(lam=1.2, allow_unstable=True)


def test_lwl_matches_erlang_c():
    cfg = sim.SimConfig(n=2, lam=0.8, model=Exponential(1.0), policy=p.LWLConfig(2), num_arrivals=1_000_000, seed=1,
                        collect_tails=False)
    exact = analytics.erlang_c_mean_response(2, 0.8)
    assert sim.run_trial(cfg).mean_T == pytest.approx(exact, rel=0.02)


def test_sita_e_matches_exact_and_balances_load():
    model = Exponential(1.0)
    cfg = sim.SimConfig(n=2, lam=0.8, model=model, policy=p.sita_equal_load(2, model), num_arrivals=1_000_000,
                        seed=1, collect_tails=False)
    r = sim.run_trial(cfg)
    assert r.mean_T == pytest.approx(analytics.sita_e_mean_response(0.8, model), rel=0.02)
    busy = 1 - r.idle_fraction_per_server
    assert abs(busy[0] - busy[1]) < 0.01


def test_pasta_and_decomposition():
    r = sim.run_trial(card_cfg(N=400_000, lam=0.8, policy=p.LWLConfig(2)))
    assert r.arrival_avg_work_total == pytest.approx(r.time_avg_work_total, rel=0.05)
    eps = 0.2
    resid = r.time_avg_work_total - analytics.mg1_mean_work(0.8, Exponential(1.0)) - r.idle_work_cross_term / eps
    assert abs(resid) <= 0.05 * r.time_avg_work_total


def test_confidence_interval_examples():
    e = sim.confidence_interval([1.0, 3.0])
    assert e.mean == 2.0
    assert e.se == pytest.approx(1.0)
    assert e.ci_half == pytest.approx(12.706, abs=5e-4)
    assert sim.confidence_interval([4.0, 4.0, 4.0]).ci_half == 0.0
    with pytest.raises(ValueError):
        sim.confidence_interval([1.0])


def test_confidence_interval_coverage():
    rng = np.random.default_rng(2024)
    hits = 0
    for _ in range(1000):
        e = sim.confidence_interval(rng.standard_normal(40))
        hits += abs(e.mean) <= e.ci_half
    # binomial(1000, 0.95) stays within 4 sd of 950
    assert abs(hits - 950) <= 4 * math.sqrt(1000 * 0.95 * 0.05)


def test_aggregate():
    trials = [sim.run_trial(card_cfg(N=5000, trial=k)) for k in range(4)]
    summary = sim.aggregate(trials)
    vals = [t.mean_T for t in trials]
    assert summary["mean_T"].mean == pytest.approx(np.mean(vals))
    tcrit = stats.t.ppf(0.975, 3)
    assert summary["mean_T"].ci_half == pytest.approx(tcrit * np.std(vals, ddof=1) / 2)
    with pytest.raises(ValueError):
        sim.aggregate(trials[:1])


def test_trial_streams_are_independent_of_policy():
    a = sim.trial_streams(9, 2)
    b = sim.trial_streams(9, 2)
    assert all(np.array_equal(x.random(5), y.random(5)) for x, y in zip(a, b))
    c = sim.trial_streams(9, 3)
    assert not np.array_equal(sim.trial_streams(9, 2)[0].random(5), c[0].random(5))
