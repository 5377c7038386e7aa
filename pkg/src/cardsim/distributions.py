"""Job-size distributions.

Every model exposes closed-form moments, truncated moments
``E[S^k 1(S < m)]`` and an inverse transform, which is all the policy
parameter recipes and the simulator need.  Models are immutable and can be
shared between threads; randomness always comes from an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy import optimize, special


class ContinuityError(ValueError):
    """Raised when an operation needs an atomless size distribution."""


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 50) -> float:
    """Integrate ``f`` on ``[a, b]`` by adaptive Simpson's rule to absolute ``tol``."""

    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2.0, depth - 1))

    if b <= a:
        return 0.0
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


class JobSizeModel:
    """Base class for size distributions.

    Subclasses provide ``pdf``, ``cdf``, ``inverse_transform`` and exact
    ``moment``; they should override ``truncated_moment`` with a closed form
    when one exists.  The base implementation integrates the density.
    """

    continuous = True

    def pdf(self, x: float) -> float:
        raise NotImplementedError

    def cdf(self, x: float) -> float:
        raise NotImplementedError

    def sf(self, x: float) -> float:
        return 1.0 - self.cdf(x)

    def inverse_transform(self, u):
        """Map uniforms ``u`` in (0, 1] to sizes."""
        raise NotImplementedError

    def moment(self, k: int) -> float:
        raise NotImplementedError

    @property
    def mean(self) -> float:
        return self.moment(1)

    @property
    def cv(self) -> float:
        m1 = self.moment(1)
        return math.sqrt(self.moment(2) - m1 * m1) / m1

    def _support_upper(self) -> float:
        return math.inf

    def truncated_moment(self, k: int, m: float) -> float:
        """``E[S^k 1(S < m)]`` by adaptive quadrature of the density."""
        _check_k(k)
        if m <= 0:
            return 0.0
        if math.isinf(m):
            return self.moment(k)
        hi = min(m, self._support_upper())
        return adaptive_simpson(lambda t: t ** k * self.pdf(t), 0.0, hi, tol=1e-10)

    def truncated_first_moment(self, m: float) -> float:
        return self.truncated_moment(1, m)

    def truncated_second_moment(self, m: float) -> float:
        return self.truncated_moment(2, m)

    def sample(self, rng: np.random.Generator, size=None):
        # 1 - U lies in (0, 1], which keeps -log finite
        u = 1.0 - rng.random(size)
        return self.inverse_transform(u)

    @property
    def tag(self) -> str:
        return type(self).__name__.lower()


def _check_k(k: int) -> None:
    if k not in (1, 2):
        raise ValueError(f"only moments k=1 and k=2 are supported, got k={k}")


@dataclass(frozen=True)
class Exponential(JobSizeModel):
    rate: float = 1.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")

    def pdf(self, x):
        return self.rate * math.exp(-self.rate * x) if x >= 0 else 0.0

    def cdf(self, x):
        return -math.expm1(-self.rate * x) if x > 0 else 0.0

    def sf(self, x):
        return math.exp(-self.rate * x) if x > 0 else 1.0

    def inverse_transform(self, u):
        return -np.log(u) / self.rate

    def moment(self, k):
        _check_k(k)
        return math.factorial(k) / self.rate ** k

    def truncated_moment(self, k, m):
        _check_k(k)
        if m <= 0:
            return 0.0
        if math.isinf(m):
            return self.moment(k)
        r = self.rate
        tail = math.exp(-r * m)
        if k == 1:
            return 1.0 / r - tail * (m + 1.0 / r)
        return 2.0 / r ** 2 - tail * (m * m + 2.0 * m / r + 2.0 / r ** 2)

    @property
    def tag(self):
        return f"exp{self.rate:g}"


@dataclass(frozen=True)
class Weibull(JobSizeModel):
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("Weibull shape and scale must be positive")

    def pdf(self, x):
        if x <= 0:
            return 0.0
        z = x / self.scale
        return self.shape / self.scale * z ** (self.shape - 1) * math.exp(-z ** self.shape)

    def cdf(self, x):
        return -math.expm1(-(x / self.scale) ** self.shape) if x > 0 else 0.0

    def sf(self, x):
        return math.exp(-(x / self.scale) ** self.shape) if x > 0 else 1.0

    def inverse_transform(self, u):
        return self.scale * (-np.log(u)) ** (1.0 / self.shape)

    def moment(self, k):
        _check_k(k)
        return self.scale ** k * math.gamma(1.0 + k / self.shape)

    def truncated_moment(self, k, m):
        # lower incomplete gamma: E[S^k 1(S<m)] = scale^k Γ(1+k/shape) P(1+k/shape, (m/scale)^shape)
        _check_k(k)
        if m <= 0:
            return 0.0
        if math.isinf(m):
            return self.moment(k)
        a = 1.0 + k / self.shape
        return self.moment(k) * float(special.gammainc(a, (m / self.scale) ** self.shape))

    @property
    def tag(self):
        return f"weibull-cv{self.cv:.4g}"


@dataclass(frozen=True)
class Uniform(JobSizeModel):
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not (0 <= self.lo < self.hi):
            raise ValueError("Uniform requires 0 <= lo < hi")

    def pdf(self, x):
        return 1.0 / (self.hi - self.lo) if self.lo <= x < self.hi else 0.0

    def cdf(self, x):
        return min(max((x - self.lo) / (self.hi - self.lo), 0.0), 1.0)

    def inverse_transform(self, u):
        return self.lo + (1.0 - u) * (self.hi - self.lo)

    def moment(self, k):
        _check_k(k)
        return (self.hi ** (k + 1) - self.lo ** (k + 1)) / ((k + 1) * (self.hi - self.lo))

    def truncated_moment(self, k, m):
        _check_k(k)
        top = min(m, self.hi)
        if top <= self.lo:
            return 0.0
        return (top ** (k + 1) - self.lo ** (k + 1)) / ((k + 1) * (self.hi - self.lo))

    def _support_upper(self):
        return self.hi

    @property
    def tag(self):
        return f"uniform{self.lo:g}-{self.hi:g}"


@dataclass(frozen=True)
class Deterministic(JobSizeModel):
    """Point mass.  Testing only: threshold solving rejects it."""

    value: float = 1.0
    continuous = False

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("value must be positive")

    def pdf(self, x):
        raise ContinuityError("Deterministic has no density")

    def cdf(self, x):
        return 1.0 if x >= self.value else 0.0

    def inverse_transform(self, u):
        return np.full_like(np.asarray(u, dtype=float), self.value) if np.ndim(u) else self.value

    def moment(self, k):
        _check_k(k)
        return self.value ** k

    def truncated_moment(self, k, m):
        _check_k(k)
        return self.value ** k if self.value < m else 0.0

    @property
    def tag(self):
        return f"det{self.value:g}"


def sample(model: JobSizeModel, rng: np.random.Generator, size=None):
    return model.sample(rng, size)


def moment(model: JobSizeModel, k: int) -> float:
    return model.moment(k)


def truncated_first_moment(model: JobSizeModel, m: float) -> float:
    return model.truncated_moment(1, m)


def truncated_second_moment(model: JobSizeModel, m: float) -> float:
    return model.truncated_moment(2, m)


def require_continuous(model: JobSizeModel) -> None:
    if not model.continuous:
        raise ContinuityError(f"{type(model).__name__} has atoms; a continuous size distribution is required")


def solve_size_threshold(model: JobSizeModel, f: float, rtol: float = 1e-12) -> float:
    """Return ``m`` with ``E[S 1(S < m)] = f E[S]``.

    ``f = 1`` returns ``inf`` (every job lies below the threshold).
    """
    require_continuous(model)
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"load fraction must lie in [0, 1], got {f}")
    if f == 0.0:
        return 0.0
    if f == 1.0:
        return math.inf
    mean = model.moment(1)

    def g(m):
        return model.truncated_moment(1, m) / mean - f

    hi = max(mean, 1e-300)
    while g(hi) < 0:
        hi *= 2.0
        if not math.isfinite(hi):
            raise ValueError(f"could not bracket size threshold for f={f}")
    lo = 0.0
    # xtol=0 makes the rtol criterion |hi - lo| <= rtol*|m| the only stopping rule
    return optimize.bisect(g, lo, hi, xtol=1e-300, rtol=max(rtol, 4 * np.finfo(float).eps), maxiter=2000)


WEIBULL_SHAPE_BRACKET = (0.05, 50.0)


def weibull_from_mean_cv(mean: float, cv: float) -> Weibull:
    """Weibull with the given mean and coefficient of variation."""
    if not (mean > 0 and cv > 0):
        raise ValueError("mean and cv must be positive")
    target = math.log1p(cv * cv)

    def g(k):
        return special.gammaln(1.0 + 2.0 / k) - 2.0 * special.gammaln(1.0 + 1.0 / k) - target

    lo, hi = WEIBULL_SHAPE_BRACKET
    if g(lo) * g(hi) > 0:
        raise ValueError(f"cv={cv} is outside the supported Weibull shape bracket {WEIBULL_SHAPE_BRACKET}")
    shape = optimize.bisect(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    scale = mean / math.gamma(1.0 + 1.0 / shape)
    return Weibull(shape=shape, scale=scale)


def model_from_spec(spec: Mapping[str, Any]) -> JobSizeModel:
    """Build a model from a config table such as ``{kind = "weibull-mean-cv", mean = 1, cv = 10}``."""
    if "kind" not in spec:
        raise KeyError("distribution spec is missing the 'kind' key")
    kind = spec["kind"]
    try:
        if kind == "exponential":
            if "mean" in spec:
                return Exponential(rate=1.0 / float(spec["mean"]))
            return Exponential(rate=float(spec.get("rate", 1.0)))
        if kind == "weibull-mean-cv":
            return weibull_from_mean_cv(float(spec.get("mean", 1.0)), float(spec["cv"]))
        if kind == "weibull":
            return Weibull(shape=float(spec["shape"]), scale=float(spec.get("scale", 1.0)))
        if kind == "uniform":
            return Uniform(lo=float(spec.get("lo", 0.0)), hi=float(spec["hi"]))
        if kind == "deterministic":
            return Deterministic(value=float(spec["value"]))
    except KeyError as exc:
        raise KeyError(f"distribution spec of kind {kind!r} is missing key {exc.args[0]!r}") from None
    raise ValueError(f"unknown distribution kind {kind!r}")


def dist_tag(spec: Mapping[str, Any], model: JobSizeModel) -> str:
    """Short label used in CSV rows, e.g. ``cv10`` for a mean-1 Weibull with cv 10."""
    if spec.get("tag"):
        return str(spec["tag"])
    if spec.get("kind") == "weibull-mean-cv":
        return f"cv{float(spec['cv']):g}"
    return model.tag
