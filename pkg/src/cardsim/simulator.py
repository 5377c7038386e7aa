"""Single-trial simulation of n parallel FCFS queues fed by one dispatcher.

The state is the work vector; between Poisson arrivals every server drains
at rate 1/n, so the process is simulated exactly, arrival by arrival.
Time integrals (work, idleness, idle-fraction x total work) are computed in
closed form over each inter-arrival interval.

Random numbers come from three independent substreams per trial (interarrival
times, job sizes, policy coin flips), so two policies run with the same seed
and trial index see the same arrival/size sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import stats

from .distributions import JobSizeModel
from .policies import (CARD_FLEXIBLE, CARD_RIGID, MULTIBAND_FLEXIBLE, MULTIBAND_RIGID,
                       PolicyConfig, dispatch_core)

CHUNK = 1 << 20
EXACT_TAIL_LIMIT = 10_000_000
HIST_BINS = 10_000
HIST_LO, HIST_HI = 1e-6, 1e12
TAIL_QUANTILES = (0.5, 0.9, 0.95, 0.99, 0.999)

# scalar accumulator slots
A_CLOCK = 0
A_OBS_START = 1
A_SUM_T = 2
A_IW_INT = 3
A_INJECTED = 4
A_COMPLETED = 5
A_ARR_WALL = 6
A_ARR_WALL_SQ = 7
A_CYC_STATE = 8      # 0 below, 1 above
A_CYC_LAST = 9       # time of last boundary (NaN before the first observed one)
A_SUM_B = 10
A_SUM_A = 11
A_SUM_B_SQ = 12
A_SUM_A_SQ = 13
A_CLASS_SUM = 14     # 14, 15, 16: small/medium/large response-time sums
N_ACC = 17

# integer counter slots
C_JOBS = 0
C_B = 1
C_A = 2
C_CLASS = 3          # 3, 4, 5
C_TAIL = 6
N_CNT = 7


class SimulationError(RuntimeError):
    pass


@njit(cache=True, nogil=True)
def advance_work_kernel(w, dt, idle, work_int):
    """Drain every server for ``dt`` time units, adding idle time and work area."""
    n = w.shape[0]
    for i in range(n):
        wi = w[i]
        empty_at = n * wi
        if empty_at >= dt:
            work_int[i] += wi * dt - dt * dt / (2.0 * n)
            w[i] = max(wi - dt / n, 0.0)
        else:
            work_int[i] += n * wi * wi / 2.0
            idle[i] += dt - empty_at
            w[i] = 0.0


@njit(cache=True, nogil=True)
def _area_until(w, t, n):
    # sum over servers of the integral of W_i on [0, t]
    total = 0.0
    for i in range(n):
        e = n * w[i]
        if t <= e:
            total += w[i] * t - t * t / (2.0 * n)
        else:
            total += n * w[i] * w[i] / 2.0
    return total


@njit(cache=True, nogil=True)
def _idle_work_integral(w, dt, n):
    """Exact integral of I(t) * W_all(t) over [0, dt] with I the idle fraction.

    I W_all = (1/n) sum_j 1(W_j = 0) W_all, and server j is idle from its
    emptying time e_j onwards, so each j contributes the W_all area on
    [min(e_j, dt), dt].
    """
    full = -1.0
    total = 0.0
    for j in range(n):
        e = n * w[j]
        if e < dt:
            if full < 0.0:
                full = _area_until(w, dt, n)
            total += full - _area_until(w, e, n)
    return total / n


@njit(cache=True, nogil=True)
def _run_chunk(inter, sizes, upol, first, warm, kind, params, w, pstate, order,
               acc, cnt, idle, work_int, cyc_c, m_minus, m_plus, tail_buf, hist, hist_lo, hist_dlog):
    n = w.shape[0]
    track_cycles = not math.isnan(cyc_c)
    track_classes = not math.isnan(m_minus)
    for k in range(inter.shape[0]):
        i = first + k
        dt = inter[k]
        t0 = acc[A_CLOCK]
        observe = i > warm

        # cycle boundary: short server decays through c between arrivals
        if track_cycles and acc[A_CYC_STATE] == 1.0:
            excess = w[0] - cyc_c
            if n * excess <= dt:
                tb = t0 + n * excess
                if i > warm and not math.isnan(acc[A_CYC_LAST]):
                    d = tb - acc[A_CYC_LAST]
                    acc[A_SUM_A] += d
                    acc[A_SUM_A_SQ] += d * d
                    cnt[C_A] += 1
                if i > warm:
                    acc[A_CYC_LAST] = tb
                acc[A_CYC_STATE] = 0.0

        before = 0.0
        for j in range(n):
            before += w[j]
        if observe:
            acc[A_IW_INT] += _idle_work_integral(w, dt, n)
            advance_work_kernel(w, dt, idle, work_int)
        else:
            for j in range(n):
                w[j] = max(w[j] - dt / n, 0.0)
        after = 0.0
        for j in range(n):
            after += w[j]
        acc[A_COMPLETED] += before - after
        t = t0 + dt
        acc[A_CLOCK] = t
        if i == warm:
            acc[A_OBS_START] = t

        s = sizes[k]
        j = dispatch_core(kind, params, s, w, upol[k], pstate, order)
        if j < 0 or j >= n:
            return 1, i
        resp = n * (w[j] + s)
        if i >= warm:
            acc[A_ARR_WALL] += after
            acc[A_ARR_WALL_SQ] += after * after
            acc[A_SUM_T] += resp
            cnt[C_JOBS] += 1
            if track_classes:
                cls = 0 if s < m_minus else (1 if s < m_plus else 2)
                acc[A_CLASS_SUM + cls] += resp
                cnt[C_CLASS + cls] += 1
            if tail_buf.shape[0] > 0:
                tail_buf[cnt[C_TAIL]] = resp
                cnt[C_TAIL] += 1
            elif hist.shape[0] > 0:
                b = int((math.log(resp) - hist_lo) / hist_dlog) + 1 if resp > 0 else 0
                if b < 0:
                    b = 0
                if b >= hist.shape[0]:
                    b = hist.shape[0] - 1
                hist[b] += 1
        w[j] += s
        acc[A_INJECTED] += s
        if not math.isfinite(w[j]):
            return 2, i

        if track_cycles and acc[A_CYC_STATE] == 0.0 and w[0] > cyc_c:
            if i >= warm and not math.isnan(acc[A_CYC_LAST]):
                d = t - acc[A_CYC_LAST]
                acc[A_SUM_B] += d
                acc[A_SUM_B_SQ] += d * d
                cnt[C_B] += 1
            if i >= warm:
                acc[A_CYC_LAST] = t
            acc[A_CYC_STATE] = 1.0
    return 0, -1


def advance_work(w, dt: float, n: Optional[int] = None):
    """Drain a work vector for ``dt`` time units.

    Returns ``(new_work, idle_time_per_server, work_integral_per_server)``.
    """
    w = np.array(w, dtype=np.float64)
    if n is not None and n != w.shape[0]:
        raise ValueError("n does not match the work vector")
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    idle = np.zeros_like(w)
    area = np.zeros_like(w)
    advance_work_kernel(w, float(dt), idle, area)
    return w, idle, area


def idle_work_integral(w, dt: float) -> float:
    """Integral of (idle fraction) x (total work) while ``w`` drains for ``dt``."""
    w = np.asarray(w, dtype=np.float64)
    return float(_idle_work_integral(w, float(dt), w.shape[0]))


def _cycle_threshold(policy: PolicyConfig) -> float:
    kind, params = policy.lower()
    if kind in (CARD_RIGID, CARD_FLEXIBLE):
        return float(params[2])
    if kind in (MULTIBAND_RIGID, MULTIBAND_FLEXIBLE):
        return float(params[policy.n])
    return math.nan


def trial_streams(seed: int, trial: int = 0):
    """Independent generators for interarrivals, sizes and policy draws of one trial."""
    root = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=(int(trial),))
    return [np.random.Generator(np.random.PCG64(s)) for s in root.spawn(3)]


@dataclass(frozen=True)
class SimConfig:
    n: int
    lam: float
    model: JobSizeModel
    policy: PolicyConfig
    num_arrivals: int
    warmup_fraction: float = 0.1
    seed: int = 0
    trial: int = 0
    collect_tails: bool = True
    collect_cycles: bool = True
    class_thresholds: Optional[tuple] = None
    allow_unstable: bool = False

    def __post_init__(self):
        if self.policy.n != self.n:
            raise ValueError(f"policy is for n={self.policy.n}, config has n={self.n}")
        if not self.lam > 0:
            raise ValueError("arrival rate must be positive")
        if self.num_arrivals < 1:
            raise ValueError("need at least one arrival")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if not self.allow_unstable and self.lam * self.model.mean >= 1:
            raise ValueError(f"load {self.lam * self.model.mean:.6g} >= 1; set allow_unstable for transient runs")

    @property
    def rho(self):
        return self.lam * self.model.mean

    def resolved_class_thresholds(self):
        if self.class_thresholds is not None:
            return tuple(float(x) for x in self.class_thresholds)
        kind, params = self.policy.lower()
        if kind in (CARD_RIGID, CARD_FLEXIBLE):
            return float(params[0]), float(params[1])
        return None


@dataclass
class CycleStats:
    mean_B: float = math.nan
    mean_A: float = math.nan
    count_B: int = 0
    count_A: int = 0
    se_B: float = math.nan
    se_A: float = math.nan
    short_idle_fraction: float = math.nan


@dataclass
class TrialResult:
    mean_T: float
    job_count: int
    observed_time: float
    time_avg_work_total: float
    time_avg_work_per_server: np.ndarray
    idle_fraction_per_server: np.ndarray
    idle_work_cross_term: float
    arrival_avg_work_total: float
    mean_T_by_class: dict = field(default_factory=dict)
    class_counts: dict = field(default_factory=dict)
    cycle_stats: CycleStats = field(default_factory=CycleStats)
    tail: dict = field(default_factory=dict)
    response_times: Optional[np.ndarray] = None
    histogram: Optional[tuple] = None
    injected_work: float = 0.0
    completed_work: float = 0.0
    final_work: float = 0.0

    def ccdf(self, t):
        """Empirical P{T > t} at the points ``t``."""
        t = np.asarray(t, dtype=float)
        if self.response_times is not None:
            rt = self.response_times
            return 1.0 - np.searchsorted(rt, t, side="right") / rt.size
        if self.histogram is not None:
            upper, counts = self.histogram
            cum = np.cumsum(counts) / counts.sum()
            x = np.concatenate([[0.0], upper[:-1]])
            y = np.concatenate([[0.0], cum[:-1]])
            return 1.0 - np.interp(t, x, y)
        raise ValueError("trial was run without tail collection")

    def metric(self, name):
        if name in ("mean_B", "mean_A", "short_idle_fraction"):
            return getattr(self.cycle_stats, name)
        if name.startswith("mean_T_"):
            return self.mean_T_by_class.get(name[len("mean_T_"):], math.nan)
        return getattr(self, name)


def _hist_quantiles(upper, counts, qs):
    # upper edge of the first bin whose cumulative share reaches q
    cum = np.cumsum(counts) / counts.sum()
    return {q: float(upper[min(np.searchsorted(cum, q), len(upper) - 1)]) for q in qs}


def run_trial(cfg: SimConfig) -> TrialResult:
    """Simulate one trial; the result is a deterministic function of ``cfg``."""
    n, N = cfg.n, int(cfg.num_arrivals)
    warm = int(math.floor(cfg.warmup_fraction * N))
    if warm >= N:
        warm = N - 1
    kind, params = cfg.policy.lower()
    params = np.ascontiguousarray(params, dtype=np.float64)
    r_inter, r_size, r_pol = trial_streams(cfg.seed, cfg.trial)

    w = np.zeros(n)
    pstate = np.zeros(1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    acc = np.zeros(N_ACC)
    acc[A_CYC_LAST] = math.nan
    cnt = np.zeros(N_CNT, dtype=np.int64)
    idle = np.zeros(n)
    work_int = np.zeros(n)
    cyc_c = _cycle_threshold(cfg.policy) if cfg.collect_cycles else math.nan
    classes = cfg.resolved_class_thresholds()
    m_minus, m_plus = classes if classes is not None else (math.nan, math.nan)

    observed = N - warm
    if cfg.collect_tails and observed <= EXACT_TAIL_LIMIT:
        tail_buf, hist = np.empty(observed), np.zeros(0, dtype=np.int64)
    elif cfg.collect_tails:
        tail_buf, hist = np.zeros(0), np.zeros(HIST_BINS + 2, dtype=np.int64)
    else:
        tail_buf, hist = np.zeros(0), np.zeros(0, dtype=np.int64)
    hist_lo = math.log(HIST_LO)
    hist_dlog = (math.log(HIST_HI) - hist_lo) / HIST_BINS

    for first in range(0, N, CHUNK):
        m = min(CHUNK, N - first)
        inter = r_inter.standard_exponential(m) / cfg.lam
        sizes = cfg.model.sample(r_size, m)
        upol = r_pol.random(m)
        status, where = _run_chunk(inter, np.ascontiguousarray(sizes, dtype=np.float64), upol, first, warm,
                                   kind, params, w, pstate, order, acc, cnt, idle, work_int,
                                   cyc_c, m_minus, m_plus, tail_buf, hist, hist_lo, hist_dlog)
        if status == 1:
            raise SimulationError(f"policy {cfg.policy.name} returned an invalid server at arrival {where}")
        if status == 2:
            raise SimulationError(
                f"work became non-finite at arrival {where} (rho={cfg.rho:.4g}, policy={cfg.policy.name})")

    T_obs = acc[A_CLOCK] - acc[A_OBS_START]
    jobs = int(cnt[C_JOBS])
    per_server = work_int / T_obs if T_obs > 0 else np.full(n, math.nan)
    idle_frac = idle / T_obs if T_obs > 0 else np.full(n, math.nan)

    by_class, class_counts = {}, {}
    if classes is not None:
        for k, label in enumerate(("small", "medium", "large")):
            c = int(cnt[C_CLASS + k])
            class_counts[label] = c
            by_class[label] = acc[A_CLASS_SUM + k] / c if c else math.nan

    cyc = CycleStats()
    if not math.isnan(cyc_c):
        nb, na = int(cnt[C_B]), int(cnt[C_A])
        cyc.count_B, cyc.count_A = nb, na
        if nb:
            cyc.mean_B = acc[A_SUM_B] / nb
            if nb > 1:
                var = max(acc[A_SUM_B_SQ] / nb - cyc.mean_B ** 2, 0.0) * nb / (nb - 1)
                cyc.se_B = math.sqrt(var / nb)
        if na:
            cyc.mean_A = acc[A_SUM_A] / na
            if na > 1:
                var = max(acc[A_SUM_A_SQ] / na - cyc.mean_A ** 2, 0.0) * na / (na - 1)
                cyc.se_A = math.sqrt(var / na)
        cyc.short_idle_fraction = float(idle_frac[0])

    response_times = histogram = None
    tail = {}
    if cfg.collect_tails and tail_buf.size:
        response_times = np.sort(tail_buf[:cnt[C_TAIL]])
        tail = {q: float(np.quantile(response_times, q)) for q in TAIL_QUANTILES}
    elif cfg.collect_tails and hist.size:
        # bin 0 holds T < HIST_LO, the last bin T >= HIST_HI
        upper = np.concatenate([np.exp(hist_lo + hist_dlog * np.arange(HIST_BINS + 1)), [np.inf]])
        histogram = (upper, hist.copy())
        tail = _hist_quantiles(upper, hist, TAIL_QUANTILES)

    return TrialResult(
        mean_T=acc[A_SUM_T] / jobs if jobs else math.nan,
        job_count=jobs,
        observed_time=T_obs,
        time_avg_work_total=float(per_server.sum()),
        time_avg_work_per_server=per_server,
        idle_fraction_per_server=idle_frac,
        idle_work_cross_term=acc[A_IW_INT] / T_obs if T_obs > 0 else math.nan,
        arrival_avg_work_total=acc[A_ARR_WALL] / jobs if jobs else math.nan,
        mean_T_by_class=by_class,
        class_counts=class_counts,
        cycle_stats=cyc,
        tail=tail,
        response_times=response_times,
        histogram=histogram,
        injected_work=acc[A_INJECTED],
        completed_work=acc[A_COMPLETED],
        final_work=float(w.sum()),
    )


# --------------------------------------------------------------------------
# aggregation over trials
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    mean: float
    ci_half: float
    se: float
    count: int


def confidence_interval(values: Sequence[float], confidence: float = 0.95) -> Estimate:
    """Student-t confidence interval on the mean of independent trial values."""
    x = np.asarray(values, dtype=float)
    x = x[~np.isnan(x)]
    if x.size < 2:
        raise ValueError("a confidence interval needs at least two trials")
    se = float(x.std(ddof=1) / math.sqrt(x.size))
    tcrit = float(stats.t.ppf(0.5 + confidence / 2.0, df=x.size - 1))
    return Estimate(mean=float(x.mean()), ci_half=tcrit * se, se=se, count=int(x.size))


SUMMARY_METRICS = (
    "mean_T", "time_avg_work_total", "idle_work_cross_term", "arrival_avg_work_total",
    "short_idle_fraction", "mean_B", "mean_A", "mean_T_small", "mean_T_medium", "mean_T_large",
)


def aggregate(trials: Sequence[TrialResult], confidence: float = 0.95) -> dict:
    """Per-metric mean and CI half-width over trials (metrics that are all-NaN are dropped)."""
    if len(trials) < 2:
        raise ValueError("aggregate needs at least two trials to form a confidence interval")
    out = {}
    for name in SUMMARY_METRICS:
        vals = np.array([t.metric(name) for t in trials], dtype=float)
        if np.isnan(vals).all():
            continue
        if np.count_nonzero(~np.isnan(vals)) < 2:
            continue
        out[name] = confidence_interval(vals, confidence)
    return out
