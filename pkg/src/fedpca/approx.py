"""Chebyshev approximation of sign, square root, and inverse square root.

Polynomials are fitted on caller-chosen intervals and evaluated on
ciphertexts with a baby-step/giant-step split that consumes exactly
ceil(log2(d)) + 1 levels (interval remap included) for non-power-of-two
degrees.  Out-of-interval inputs give unspecified numeric results rather
than errors; the protocol layer is responsible for choosing intervals.

Interval book-keeping: each nonlinearity invocation in the protocol is a
deterministic *site*.  A preview run on cleartext data records every site's
input; the resulting SpecBook maps sites to tight per-site intervals, or
marks a site *degenerate* when its input is negligible relative to its
phase, in which case both the encrypted path and the cleartext mirror apply
the same public skip rule instead of evaluating a polynomial.  The book is a
public protocol parameter, so data-independent control flow is preserved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as _cheb

from .cipher import Ciphertext, TraceEngine

FUNCTIONS = ("sign", "sqrt", "inv_sqrt")

#: a site input below this fraction of its phase's running maximum is treated
#: as structurally zero (reflection skipped / sign convention fixed)
DEGENERACY_REL = 1e-9


def _check_interval(fn: str, lo: float, hi: float) -> None:
    if not lo < hi:
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    if fn == "sqrt" and lo < 0:
        raise ValueError("sqrt interval requires lo >= 0")
    if fn == "inv_sqrt" and lo <= 0:
        raise ValueError("inv_sqrt interval requires lo > 0")


@dataclass(frozen=True)
class ApproxSpec:
    """One approximated function on one interval.

    For ``sign`` the interval is the signed input range; evaluation composes
    x * inv_sqrt(x^2) with the inner fit taken on the squared domain above a
    zero-exclusion band (fraction of the max magnitude).
    """

    fn: str
    interval: tuple[float, float]
    degree: int = 31
    zero_band: float = 0.1

    def __post_init__(self) -> None:
        if self.fn not in FUNCTIONS:
            raise ValueError(f"unknown function {self.fn!r}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        _check_interval(self.fn, *self.interval)


# ---------------------------------------------------------------------------
# fitting and cleartext evaluation
# ---------------------------------------------------------------------------

def chebyshev_fit(f, interval: tuple[float, float], degree: int) -> np.ndarray:
    """Chebyshev-node interpolant of ``f`` on ``interval`` (degree+1 coeffs)."""
    lo, hi = interval
    if not lo < hi:
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    return _cheb.chebinterpolate(lambda u: f(u * half + mid), degree)


def cheb_eval_clear(coeffs: np.ndarray, interval: tuple[float, float], x):
    """Clenshaw evaluation of a fitted polynomial on cleartext inputs."""
    lo, hi = interval
    u = (2.0 * np.asarray(x, dtype=np.float64) - (hi + lo)) / (hi - lo)
    return _cheb.chebval(u, coeffs)


def bsgs_depth(degree: int) -> int:
    """Levels consumed by ``eval_poly_bsgs`` (remap included)."""
    return int(math.ceil(math.log2(degree))) + 1 if degree > 1 else 2


def bsgs_mult_bound(degree: int) -> float:
    """Asserted ceiling on cipher-cipher multiplications per evaluation."""
    return 2.0 * math.sqrt(2.0 * degree) + 0.5 * math.log2(degree) + 4.0


def eval_poly_bsgs(eng: TraceEngine, ct: Ciphertext, coeffs: np.ndarray,
                   interval: tuple[float, float]) -> Ciphertext:
    """Evaluate a Chebyshev-basis polynomial on every slot of ``ct``.

    The interval is affinely remapped to [-1, 1]; the polynomial is split
    recursively against the Chebyshev power ladder T_2, T_4, ... so degree d
    costs about sqrt(2d) + log2(d) cipher multiplications and exactly
    ceil(log2 d) + 1 levels for non-power-of-two d (pin degrees of the form
    2^k - 1 to stay on that bound).
    """
    lo, hi = interval
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = len(coeffs) - 1
    t = eng.params.slot_count
    alpha = 2.0 / (hi - lo)
    beta = -(hi + lo) / (hi - lo)
    u = eng.maintain(eng.mul_plain(ct, np.full(t, alpha)))
    u = eng.add_plain(u, np.full(t, beta))
    if n == 0:
        zero = eng.maintain(eng.mul_plain(u, np.zeros(t)))
        return eng.add_plain(zero, np.full(t, coeffs[0]))

    # Chebyshev power ladder: T_2, T_4, ..., largest power of two <= n
    powers: dict[int, Ciphertext] = {1: u}
    p = 2
    while p <= n:
        half = powers[p // 2]
        sq = eng.maintain(eng.mul_cipher(half, half))
        powers[p] = eng.add_plain(eng.add(sq, sq), np.full(t, -1.0))
        p *= 2

    def eval_rec(cs: np.ndarray) -> Ciphertext:
        deg = len(cs) - 1
        if deg <= 1:
            base = eng.maintain(eng.mul_plain(u, np.full(t, cs[1] if deg else 0.0)))
            return eng.add_plain(base, np.full(t, cs[0]))
        g = 1 << (deg.bit_length() - 1)
        a = np.zeros(deg - g + 1)
        a[0] = cs[g]
        a[1:] = 2.0 * cs[g + 1:]
        b = np.zeros(g)
        b[: g] = cs[:g]
        for j in range(1, deg - g + 1):
            b[g - j] -= cs[g + j]
        if len(a) == 1:
            hi_part = eng.mul_plain(powers[g], np.full(t, a[0]))
        else:
            hi_part = eng.mul_cipher(eval_rec(a), powers[g])
        return eng.maintain(eng.add(hi_part, eval_rec(b)))

    return eval_rec(coeffs)


# ---------------------------------------------------------------------------
# bound function wrappers
# ---------------------------------------------------------------------------

def sqrt(eng: TraceEngine, ct: Ciphertext, spec: ApproxSpec) -> Ciphertext:
    if spec.fn != "sqrt":
        raise ValueError("spec is not a sqrt spec")
    coeffs = chebyshev_fit(np.sqrt, spec.interval, spec.degree)
    return eval_poly_bsgs(eng, ct, coeffs, spec.interval)


def inv_sqrt(eng: TraceEngine, ct: Ciphertext, spec: ApproxSpec) -> Ciphertext:
    if spec.fn != "inv_sqrt":
        raise ValueError("spec is not an inv_sqrt spec")
    coeffs = chebyshev_fit(lambda x: 1.0 / np.sqrt(x), spec.interval, spec.degree)
    return eval_poly_bsgs(eng, ct, coeffs, spec.interval)


def sign(eng: TraceEngine, ct: Ciphertext, spec: ApproxSpec) -> Ciphertext:
    """sign(x) as x * inv_sqrt(x^2) with the inner fit on the squared band."""
    if spec.fn != "sign":
        raise ValueError("spec is not a sign spec")
    m = max(abs(spec.interval[0]), abs(spec.interval[1]))
    inner = ((spec.zero_band * m) ** 2, m * m)
    coeffs = chebyshev_fit(lambda x: 1.0 / np.sqrt(x), inner, spec.degree)
    sq = eng.maintain(eng.mul_cipher(ct, ct))
    isq = eval_poly_bsgs(eng, sq, coeffs, inner)
    return eng.maintain(eng.mul_cipher(ct, isq))


# ---------------------------------------------------------------------------
# sites, recording, and the spec book
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteSpec:
    """Resolved behaviour of one nonlinearity invocation."""

    fn: str
    interval: tuple[float, float] | None  # None when skipped
    degree: int = 31

    @property
    def skip(self) -> bool:
        return self.interval is None


class SiteCursor:
    """Deterministic site naming shared by the encrypted path, the cleartext
    mirror, and the preview: '<phase>:<fn>:<k>' in call order."""

    def __init__(self) -> None:
        self._counts: dict[tuple[str, str], int] = {}

    def take(self, phase: str, fn: str) -> str:
        key = (phase, fn)
        k = self._counts.get(key, 0)
        self._counts[key] = k + 1
        return f"{phase}:{fn}:{k}"


class RangeRecorder:
    """Collects per-site nonlinearity inputs during a cleartext preview.

    Degeneracy is decided online (input negligible against the running
    maximum of its phase/function family) so the preview follows exactly the
    control flow the resulting book will prescribe.
    """

    def __init__(self, degeneracy_rel: float = DEGENERACY_REL) -> None:
        self.records: dict[str, tuple[str, float, bool]] = {}
        self._running_max: dict[tuple[str, str], float] = {}
        self.degeneracy_rel = degeneracy_rel

    def observe(self, site: str, phase: str, fn: str, value: float) -> bool:
        """Record a site input; returns True when the site is degenerate."""
        key = (phase, fn)
        peak = max(self._running_max.get(key, 0.0), value)
        self._running_max[key] = peak
        degenerate = value == 0.0 or value < self.degeneracy_rel * peak
        self.records[site] = (fn, value, degenerate)
        return degenerate


class SpecBook:
    """Site -> SiteSpec resolution with group and default fallbacks."""

    def __init__(self, sites: dict[str, SiteSpec] | None = None,
                 groups: dict[tuple[str, str], SiteSpec] | None = None,
                 defaults: dict[str, SiteSpec] | None = None,
                 degree: int = 31) -> None:
        self.sites = dict(sites or {})
        self.groups = dict(groups or {})
        self.defaults = dict(defaults or {})
        self.degree = degree

    @staticmethod
    def group_key(phase: str) -> str:
        """Group phases into the four default interval groups."""
        if phase.startswith("power"):
            return "power.first" if phase.endswith(".first") else "power.rest"
        return "eigen" if phase.startswith("eigen") else "recon"

    def resolve(self, site: str, phase: str, fn: str) -> SiteSpec:
        if site in self.sites:
            return self.sites[site]
        g = (self.group_key(phase), fn)
        if g in self.groups:
            return self.groups[g]
        if fn in self.defaults:
            return self.defaults[fn]
        raise KeyError(f"no interval configured for site {site}")

    @classmethod
    def from_records(cls, records: dict[str, tuple[str, float, bool]],
                     margin: float = 2.0, degree: int = 31) -> "SpecBook":
        """Per-site tight intervals from a preview run."""
        sites = {}
        for site, (fn, value, degenerate) in records.items():
            if degenerate:
                sites[site] = SiteSpec(fn, None, degree)
            else:
                sites[site] = SiteSpec(fn, (value / margin, value * margin), degree)
        return cls(sites=sites, degree=degree)

    @classmethod
    def from_records_grouped(cls, records: dict[str, tuple[str, float, bool]],
                             margin: float = 2.0, degree: int = 31) -> "SpecBook":
        """Four-group intervals pooling the healthy sites of each phase."""
        spans: dict[tuple[str, str], list[float]] = {}
        for site, (fn, value, degenerate) in records.items():
            phase = site.rsplit(":", 2)[0]
            if not degenerate:
                spans.setdefault((cls.group_key(phase), fn), []).append(value)
        groups = {}
        for key, vals in spans.items():
            groups[key] = SiteSpec(key[1], (min(vals) / margin, max(vals) * margin), degree)
        sites = {site: SiteSpec(fn, None, degree)
                 for site, (fn, value, degenerate) in records.items() if degenerate}
        return cls(sites=sites, groups=groups, degree=degree)
