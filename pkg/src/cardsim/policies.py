"""Dispatching policies and their parameter recipes.

Each policy is an immutable config object.  Dispatch decisions are made by a
single numba-compiled function, :func:`dispatch_core`, which the simulator
kernel calls directly; :func:`dispatch` is the Python-facing wrapper around
it.  Every config therefore lowers to ``(kind, params)``: an integer code
and a flat float64 parameter vector.

Conventions shared by every policy:

* servers are indexed ``0..n-1``; ties in argmin/sorting go to the lowest
  physical index;
* size classes are half-open, ``[m_minus, m_plus)`` is medium;
* a work test ``W <= c`` passes on equality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from .distributions import JobSizeModel, require_continuous, solve_size_threshold

LWL = 0
RANDOM = 1
ROUND_ROBIN = 2
SITA = 3
CARD_RIGID = 4
CARD_FLEXIBLE = 5
MULTIBAND_RIGID = 6
MULTIBAND_FLEXIBLE = 7
DICE = 8

SHORT_RANDOM = 0.0
SHORT_LEAST_WORK = 1.0

DICE_ETA = {1.0: 1.8, 10.0: 5.2, 100.0: 20.0}
PRACTICAL_GAMMA = {1.0: 0.3, 10.0: 0.6, 100.0: 2.5}


class PolicyConfigError(ValueError):
    """Parameters that violate a policy's constraints."""


# --------------------------------------------------------------------------
# compiled decision core
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _sort_by_work(w, order):
    """Stable insertion sort of server indices by work (ascending)."""
    n = w.shape[0]
    for i in range(n):
        order[i] = i
    for i in range(1, n):
        j = i
        cur = order[i]
        while j > 0 and w[order[j - 1]] > w[cur]:
            order[j] = order[j - 1]
            j -= 1
        order[j] = cur


@njit(cache=True, nogil=True)
def _argmin(w, lo, hi):
    best = lo
    for i in range(lo + 1, hi):
        if w[i] < w[best]:
            best = i
    return best


@njit(cache=True, nogil=True)
def _card_pick(params, s, w, u, order, n):
    # order[0..n-2] are the short servers in ascending work, order[n-1] is long
    m_minus = params[0]
    m_plus = params[1]
    c = params[2]
    least_work = params[3] == SHORT_LEAST_WORK
    if s >= m_plus:
        return order[n - 1]
    if least_work:
        short = order[0]
        for k in range(1, n - 1):
            if w[order[k]] < w[short]:
                short = order[k]
    else:
        k = int(u * (n - 1))
        if k > n - 2:
            k = n - 2
        short = order[k]
    if s < m_minus:
        return short
    if w[short] <= c:
        return short
    return order[n - 1]


@njit(cache=True, nogil=True)
def dispatch_core(kind, params, s, w, u, state, order):
    """Return the server index for a job of size ``s``.

    ``u`` is one uniform draw in [0, 1) used by randomised policies,
    ``state`` holds the round-robin cursor and ``order`` is an int64
    scratch buffer of length n.  ``w`` is never modified.
    """
    n = w.shape[0]
    if kind == LWL:
        return _argmin(w, 0, n)
    if kind == RANDOM:
        k = int(u * n)
        return k if k < n else n - 1
    if kind == ROUND_ROBIN:
        k = state[0]
        state[0] = (k + 1) % n
        return k
    if kind == SITA:
        for i in range(n - 1):
            if s < params[i]:
                return i
        return n - 1
    if kind == CARD_RIGID:
        for i in range(n):
            order[i] = i
        return _card_pick(params, s, w, u, order, n)
    if kind == CARD_FLEXIBLE:
        _sort_by_work(w, order)
        return _card_pick(params, s, w, u, order, n)
    if kind == MULTIBAND_RIGID or kind == MULTIBAND_FLEXIBLE:
        if kind == MULTIBAND_FLEXIBLE:
            _sort_by_work(w, order)
        else:
            for i in range(n):
                order[i] = i
        # params: cutoffs m[0..n-1] then thresholds c[0..n-2]
        if s < params[0]:
            return order[0]
        if s >= params[n - 1]:
            return order[n - 1]
        for i in range(n - 1):
            if s < params[i + 1]:
                if w[order[i]] <= params[n + i]:
                    return order[i]
                return order[i + 1]
        return order[n - 1]
    if kind == DICE:
        _sort_by_work(w, order)
        for i in range(n - 1):
            if params[i] - w[order[i]] > s:
                return order[i]
        return order[n - 1]
    return -1


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------

def _check_n(n):
    if int(n) != n or n < 2:
        raise PolicyConfigError(f"need an integer n >= 2, got {n}")


@dataclass
class PolicyState:
    """Per-trial mutable policy state (only round-robin uses it)."""

    cursor: int = 0


@dataclass(frozen=True)
class LWLConfig:
    n: int
    name = "lwl"

    def __post_init__(self):
        _check_n(self.n)

    def lower(self):
        return LWL, np.zeros(1)


@dataclass(frozen=True)
class RandomConfig:
    n: int
    name = "random"

    def __post_init__(self):
        _check_n(self.n)

    def lower(self):
        return RANDOM, np.zeros(1)


@dataclass(frozen=True)
class RoundRobinConfig:
    n: int
    name = "round-robin"

    def __post_init__(self):
        _check_n(self.n)

    def lower(self):
        return ROUND_ROBIN, np.zeros(1)


@dataclass(frozen=True)
class SitaConfig:
    """Size bands ``[cutoffs[i-1], cutoffs[i])`` map to server ``i``."""

    n: int
    cutoffs: tuple
    name = "sita"

    def __post_init__(self):
        _check_n(self.n)
        object.__setattr__(self, "cutoffs", tuple(float(x) for x in self.cutoffs))
        if len(self.cutoffs) != self.n - 1:
            raise PolicyConfigError("SITA needs n-1 cutoffs")
        if any(x < 0 for x in self.cutoffs) or any(b <= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise PolicyConfigError("SITA cutoffs must be nonnegative and strictly increasing")

    def lower(self):
        return SITA, np.array(self.cutoffs, dtype=np.float64)


@dataclass(frozen=True)
class CardConfig:
    """CARD with size cutoffs ``m_minus <= m_plus`` and work threshold ``c``.

    Servers ``0..n-2`` are short and ``n-1`` is long.  With ``flexible`` the
    roles are reassigned at every arrival: the ``n-1`` least-loaded servers
    act as short servers.  ``check_thresholds=False`` lifts the
    ``m_plus <= c`` requirement, which practical parameter choices break.
    """

    n: int
    m_minus: float
    m_plus: float
    c: float
    flexible: bool = False
    short_selection: str = "uniform-random"
    check_thresholds: bool = True

    def __post_init__(self):
        _check_n(self.n)
        if self.short_selection not in ("uniform-random", "least-work"):
            raise PolicyConfigError(f"unknown short_selection {self.short_selection!r}")
        if not (0 <= self.m_minus <= self.m_plus):
            raise PolicyConfigError(f"need 0 <= m_minus <= m_plus, got {self.m_minus}, {self.m_plus}")
        if self.c < 0 or math.isnan(self.c):
            raise PolicyConfigError(f"work threshold c must be nonnegative, got {self.c}")
        if self.check_thresholds and self.m_plus > self.c:
            raise PolicyConfigError(
                f"m_plus={self.m_plus:.6g} exceeds c={self.c:.6g}; pass check_thresholds=False to allow it")

    @property
    def name(self):
        return "card-flexible" if self.flexible else "card-rigid"

    def lower(self):
        sel = SHORT_LEAST_WORK if self.short_selection == "least-work" else SHORT_RANDOM
        kind = CARD_FLEXIBLE if self.flexible else CARD_RIGID
        return kind, np.array([self.m_minus, self.m_plus, self.c, sel], dtype=np.float64)


@dataclass(frozen=True)
class MultiBandConfig:
    n: int
    cutoffs: tuple
    thresholds: tuple
    flexible: bool = True

    def __post_init__(self):
        _check_n(self.n)
        object.__setattr__(self, "cutoffs", tuple(float(x) for x in self.cutoffs))
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        if len(self.cutoffs) != self.n or len(self.thresholds) != self.n - 1:
            raise PolicyConfigError("multi-band CARD needs n cutoffs and n-1 thresholds")
        if self.cutoffs[0] < 0 or any(b <= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise PolicyConfigError("multi-band cutoffs must be nonnegative and strictly increasing")
        if any(not c > 0 for c in self.thresholds):
            raise PolicyConfigError("multi-band thresholds must be positive")

    @property
    def name(self):
        return "card-multiband" if self.flexible else "card-multiband-rigid"

    def lower(self):
        kind = MULTIBAND_FLEXIBLE if self.flexible else MULTIBAND_RIGID
        return kind, np.array(self.cutoffs + self.thresholds, dtype=np.float64)


@dataclass(frozen=True)
class DiceConfig:
    """Dice with thresholds ``tau`` on the sorted work vector."""

    n: int
    tau: tuple
    name = "dice"

    def __post_init__(self):
        _check_n(self.n)
        object.__setattr__(self, "tau", tuple(float(x) for x in self.tau))
        if len(self.tau) != self.n - 1:
            raise PolicyConfigError("Dice needs n-1 thresholds")
        if any(not t > 0 for t in self.tau):
            raise PolicyConfigError("Dice thresholds must be positive")
        if any(b < a for a, b in zip(self.tau, self.tau[1:])):
            raise PolicyConfigError("Dice thresholds must be nondecreasing")

    def lower(self):
        return DICE, np.array(self.tau, dtype=np.float64)


PolicyConfig = Union[LWLConfig, RandomConfig, RoundRobinConfig, SitaConfig,
                     CardConfig, MultiBandConfig, DiceConfig]


def dispatch(policy: PolicyConfig, state: PolicyState, s: float, w,
             rng: Optional[np.random.Generator] = None) -> int:
    """Choose a server for a job of size ``s`` given work vector ``w``.

    Only randomised policies consume a draw from ``rng``.
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != (policy.n,):
        raise ValueError(f"work vector has shape {w.shape}, policy expects n={policy.n}")
    if np.any(w < 0):
        raise ValueError("work must be nonnegative")
    kind, params = policy.lower()
    needs_draw = kind == RANDOM or (kind in (CARD_RIGID, CARD_FLEXIBLE) and params[3] == SHORT_RANDOM)
    u = 0.0
    if needs_draw:
        if rng is None:
            raise ValueError(f"{policy.name} needs a random generator")
        u = float(rng.random())
    cursor = np.array([state.cursor], dtype=np.int64)
    order = np.empty(policy.n, dtype=np.int64)
    idx = int(dispatch_core(kind, params, float(s), w, u, cursor, order))
    state.cursor = int(cursor[0])
    return idx


def size_class(s: float, m_minus: float, m_plus: float) -> str:
    if s < m_minus:
        return "small"
    if s < m_plus:
        return "medium"
    return "large"


# --------------------------------------------------------------------------
# parameter recipes
# --------------------------------------------------------------------------

def card_params_from_alpha_beta(n: int, lam: float, model: JobSizeModel,
                                alpha: float, beta: float) -> tuple[float, float]:
    """Size cutoffs ``(m_minus, m_plus)`` realising short-server drifts ``-alpha`` / ``+beta``."""
    _check_n(n)
    rho = lam * model.mean
    if not 0 < rho < 1:
        raise PolicyConfigError(f"load must lie in (0, 1), got {rho}")
    if not (0 < alpha <= 1.0 / n):
        raise PolicyConfigError(f"alpha must lie in (0, 1/n], got {alpha}")
    if not beta > 0:
        raise PolicyConfigError(f"beta must be positive, got {beta}")
    rho_small = (n - 1) * (1.0 / n - alpha)
    rho_small_medium = (n - 1) * (1.0 / n + beta)
    f_minus, f_plus = rho_small / rho, rho_small_medium / rho
    if not (0 <= f_minus <= f_plus < 1):
        raise PolicyConfigError(
            f"load fractions {f_minus:.6g}, {f_plus:.6g} are infeasible at rho={rho:.6g}")
    return solve_size_threshold(model, f_minus), solve_size_threshold(model, f_plus)


def card_threshold_c(n: int, m_plus: float, beta: float, delta: float) -> float:
    """Work threshold that keeps each short server idle at most a ``delta`` fraction of time."""
    if not (beta > 0 and delta > 0):
        raise PolicyConfigError("beta and delta must be positive")
    ratio = (n + 1) / (n * beta * delta)
    if ratio <= 1:
        raise PolicyConfigError(f"log argument (n+1)/(n beta delta) = {ratio:.6g} must exceed 1")
    return n * (n - 1) * m_plus / beta * math.log(ratio)


def card_params_practical(rho: float, model: JobSizeModel, alpha_prime: float = 0.15,
                          beta_prime: float = 0.15, gamma: float = 0.6,
                          epsilon: Optional[float] = None, flexible: bool = True) -> CardConfig:
    """Two-server CARD with load-fraction parameters and ``c = gamma log(1/eps) / sqrt(eps)``."""
    if epsilon is None:
        epsilon = 1.0 - rho
    if not 0 < epsilon < 1:
        raise PolicyConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not (0 < alpha_prime < 0.5 and 0 < beta_prime < 0.5):
        raise PolicyConfigError("alpha' and beta' must lie in (0, 1/2)")
    m_minus = solve_size_threshold(model, 0.5 - alpha_prime)
    m_plus = solve_size_threshold(model, 0.5 + beta_prime)
    c = gamma / math.sqrt(epsilon) * math.log(1.0 / epsilon)
    if not c > 0:
        raise PolicyConfigError(f"degenerate work threshold c={c}")
    return CardConfig(n=2, m_minus=m_minus, m_plus=m_plus, c=c, flexible=flexible,
                      check_thresholds=False)


def multiband_fractions(n: int) -> list[float]:
    return [1.0 / (2 * n) + (i - 1) / n for i in range(1, n + 1)]


def multiband_config(n: int, epsilon: float, model: JobSizeModel, flexible: bool = True) -> MultiBandConfig:
    """Multi-band CARD: n+1 size bands, outer ones carrying 1/(2n) of the load, ``c_i = m_i/sqrt(eps)``."""
    _check_n(n)
    require_continuous(model)
    if not 0 < epsilon < 1:
        raise PolicyConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    cutoffs = [solve_size_threshold(model, f) for f in multiband_fractions(n)]
    thresholds = [m / math.sqrt(epsilon) for m in cutoffs[:-1]]
    return MultiBandConfig(n=n, cutoffs=tuple(cutoffs), thresholds=tuple(thresholds), flexible=flexible)


def _cv_key(cv):
    for key in DICE_ETA:
        if abs(cv - key) <= 1e-6 * key:
            return key
    return None


def dice_thresholds(n: int, epsilon: float, model: JobSizeModel, eta: Optional[float] = None,
                    cv: Optional[float] = None) -> DiceConfig:
    """Load-dependent Dice thresholds.

    Two servers: ``eta * eps^(-1/3)`` with ``eta`` keyed by cv (1.8, 5.2, 20 for
    cv 1, 10, 100) unless given.  More servers: ``2 m_i eps^(-1/3)`` with the
    multi-band cutoffs ``m_i``.
    """
    _check_n(n)
    if not 0 < epsilon <= 1:
        raise PolicyConfigError(f"epsilon must lie in (0, 1], got {epsilon}")
    scale = epsilon ** (-1.0 / 3.0)
    if n == 2:
        if eta is None:
            key = _cv_key(model.cv if cv is None else cv)
            if key is None:
                raise PolicyConfigError("no default Dice eta for this cv; pass eta explicitly")
            eta = DICE_ETA[key]
        return DiceConfig(n=2, tau=(eta * scale,))
    require_continuous(model)
    cutoffs = [solve_size_threshold(model, f) for f in multiband_fractions(n)]
    return DiceConfig(n=n, tau=tuple(2.0 * m * scale for m in cutoffs[:-1]))


def sita_equal_load(n: int, model: JobSizeModel) -> SitaConfig:
    """SITA cutoffs that give every server a 1/n share of the load."""
    _check_n(n)
    require_continuous(model)
    return SitaConfig(n=n, cutoffs=tuple(solve_size_threshold(model, i / n) for i in range(1, n)))


def practical_gamma(cv: float) -> float:
    key = _cv_key(cv)
    if key is None:
        raise PolicyConfigError("no default gamma for this cv; pass gamma explicitly")
    return PRACTICAL_GAMMA[key]
