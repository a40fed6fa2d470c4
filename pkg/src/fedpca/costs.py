"""Closed-form cost model: per-unit communication lines, per-step protocol
communication, and an analytic wall-time estimator.

Interactive linear-algebra units (Householder reflector, transposed QR,
eigendecomposition) are charged their amortized refresh traffic: the unit's
multiplicative depth divided by the level budget, in ciphertext equivalents,
scaled by the packed width.  The executed engine charges exactly these
closed forms at unit entry, so step-level ledgers can be compared against
this module's predictions without slack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .encmat import cost_of, select_best
from .fedsim import NetworkModel, RuntimeProfile


def blocks(n: int, t: int) -> int:
    return max(1, -(-n // t))


def nonlinearity_depth(degree: int) -> int:
    """Levels per approximated nonlinearity, remap included."""
    return int(math.ceil(1.0 + math.log2(degree)))


def nonlinearity_mults(degree: int) -> float:
    """Nominal cipher-mult count of one degree-d evaluation."""
    return 2.0 * math.sqrt(2.0 * degree) + 0.5 * math.log2(degree)


def hh_depth(degree: int) -> int:
    """Multiplicative depth of one reflector computation."""
    return 5 + 3 * nonlinearity_depth(degree)


def hh_comm(h: int, degree: int, t: int, level_budget: int) -> float:
    """Amortized refresh traffic (ciphertexts/party) of one reflector."""
    return hh_depth(degree) / level_budget * blocks(h, t)


def hh_mults(degree: int) -> float:
    return 3.0 * nonlinearity_mults(degree) + 6.0


def hh_rots(h: int) -> float:
    return 2.0 * math.log2(max(2, h))


def qr_comm(delta: int, h: int, degree: int, t: int, level_budget: int) -> float:
    """Traffic of one transposed-QR factorization."""
    return delta * hh_comm(h, degree, t, level_budget) \
        + 4.0 * delta * delta / level_budget * blocks(h, t)


def dqr_extra_comm(delta: int, h: int, t: int) -> float:
    """Additional traffic of the federated variant: three aggregated
    vectors per reflector step."""
    return 3.0 * delta * blocks(h, t)


def qr_mults(delta: int, degree: int) -> float:
    return 2.0 * delta * delta + delta * hh_mults(degree)


def qr_rots(delta: int, h: int) -> float:
    return delta * delta * (1.0 + math.log2(max(2, h))) + delta * hh_rots(h)


def eigen_comm(eta: int, w: int, degree: int, t: int, level_budget: int) -> float:
    """Traffic of the eigendecomposition unit."""
    return (eta - 1) * (hh_comm(eta, degree, t, level_budget)
                        + w * qr_comm(eta, eta, degree, t, level_budget)) \
        + (eta - 1) * (4.0 + 3.0 * w) / level_budget * blocks(eta, t)


def eigen_mults(eta: int, w: int, degree: int) -> float:
    m5 = 5.0 * eta
    return eta * (1.0 + hh_mults(degree) + w * qr_mults(eta, degree)) \
        + eta * (1.0 + w * m5)


def eigen_rots(eta: int, w: int, degree: int) -> float:
    m5 = 3.0 * eta + 5.0 * math.ceil(math.sqrt(eta))
    return eta * (hh_rots(eta) + w * qr_rots(eta, eta)) + eta * (1.0 + w * m5)


# ---------------------------------------------------------------------------
# per-step protocol communication (ciphertexts per party)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolDims:
    s: int
    n_max: int
    m: int
    rho: int
    psi: int
    p: int
    w: int
    degree: int = 31
    t: int = 2 ** 13
    level_budget: int = 7


def step_comm(dims: ProtocolDims) -> dict[str, float]:
    """Per-party communication of each protocol step, in ciphertexts."""
    d = dims
    qr_m = qr_comm(d.rho, d.m, d.degree, d.t, d.level_budget)
    return {
        "step1_setup": math.log2(d.t) + 2.5,
        "step2_mean": blocks(d.m, d.t),
        "step3_projection": d.rho * blocks(d.m, d.t),
        "step4_power": d.p * (d.rho * blocks(d.m, d.t) + qr_m),
        "step5_reduction": d.rho * blocks(d.rho, d.t),
        "step6_eigen": eigen_comm(d.rho, d.w, d.degree, d.t, d.level_budget),
        "step7_reconstruction": d.psi * blocks(d.m, d.t)
        + qr_comm(d.psi, d.m, d.degree, d.t, d.level_budget),
        "step8_projection": 0.0,
    }


# ---------------------------------------------------------------------------
# analytic wall-time estimator (no execution required)
# ---------------------------------------------------------------------------

def _weighted(method: str, a: int, b: int, c: int, profile: RuntimeProfile,
              t: int, enc: bool, width_blocks: int = 1) -> float:
    est = cost_of(method, a, b, c, profile, t, rhs_encrypted=enc)
    return est.weighted * width_blocks


def strategy_cost_per_iteration(m: int, n_max: int, rho: int,
                                profile: RuntimeProfile, t: int) -> tuple[float, float]:
    """(precomp, seq) weighted per-iteration product costs including the
    lazy mean-centering adders (3b mults + b rots for the precomputed
    covariance path; two duplicated-vector products for the sequential
    path)."""
    best_pre = select_best(rho, m, m, ("enc_rows", "enc_diag"), profile, t)
    pre = _weighted(best_pre, rho, m, m, profile, t, enc=True)
    pre += 3 * m * profile.mult_pc + m * profile.rotate
    b1 = select_best(rho, m, n_max, ("plain",), profile, t)
    b2 = select_best(rho, n_max, m, ("plain",), profile, t)
    seq = _weighted(b1, rho, m, n_max, profile, t, enc=False)
    seq += _weighted(b2, rho, n_max, m, profile, t, enc=False)
    seq += cost_of("m4", rho, m, m, profile, t).weighted
    seq += cost_of("m4", rho, n_max, n_max, profile, t).weighted
    return pre, seq


def select_strategy(m: int, n_max: int, rho: int, profile: RuntimeProfile,
                    t: int = 2 ** 13) -> str:
    pre, seq = strategy_cost_per_iteration(m, n_max, rho, profile, t)
    return "precomp" if pre <= seq else "seq"


def choose_qr(n_max: int, m: int, xi: float) -> str:
    """Federated QR pays off only when per-party columns are far fewer than
    features, by a network-dependent margin."""
    if min(n_max, m) < 1:
        raise ValueError("dimensions must be positive")
    return "dqr" if xi * math.log2(max(2, n_max)) < math.log2(max(2, m)) else "qr"


def estimate_wall_seconds(dims: ProtocolDims, profile: RuntimeProfile,
                          network: NetworkModel, strategy: str | None = None) -> float:
    """Analytic end-to-end estimate: slowest party's compute plus network
    time for every ciphertext that crosses a barrier.

    Row-wide operation counts scale with ceil(m/t); communication follows
    ``step_comm``.  Intended for scaling studies at shapes too large to
    execute.
    """
    d = dims
    wb = blocks(d.m, d.t)
    if strategy is None:
        strategy = select_strategy(d.m, d.n_max, d.rho, profile, d.t)
    pre, seq = strategy_cost_per_iteration(d.m, d.n_max, d.rho, profile, d.t)
    product = pre if strategy == "precomp" else seq

    qr_sec = (qr_mults(d.rho, d.degree) * profile.mult_cc
              + qr_rots(d.rho, d.m) * profile.rotate) * wb
    qr_psi_sec = (qr_mults(d.psi, d.degree) * profile.mult_cc
                  + qr_rots(d.psi, d.m) * profile.rotate) * wb
    eig_sec = eigen_mults(d.rho, d.w, d.degree) * profile.mult_cc \
        + eigen_rots(d.rho, d.w, d.degree) * profile.rotate

    step4 = d.p * (product + qr_sec)
    if strategy == "precomp":
        step5 = _weighted(select_best(d.rho, d.m, d.m, ("enc_rows", "enc_diag"), profile, d.t),
                          d.rho, d.m, d.m, profile, d.t, enc=True) \
            + _weighted("m1", d.rho, d.m, d.rho, profile, d.t, enc=True)
        step7 = _weighted("m2", d.psi, d.rho, d.m, profile, d.t, enc=True) + qr_psi_sec \
            + product * (d.psi / d.rho)
    else:
        step5 = _weighted(select_best(d.rho, d.m, d.n_max, ("plain",), profile, d.t),
                          d.rho, d.m, d.n_max, profile, d.t, enc=False) \
            + _weighted("m1", d.rho, d.n_max, d.rho, profile, d.t, enc=True)
        step7 = _weighted("m2", d.psi, d.rho, d.n_max, profile, d.t, enc=True) \
            + _weighted(select_best(d.psi, d.n_max, d.m, ("plain",), profile, d.t),
                        d.psi, d.n_max, d.m, profile, d.t, enc=False) + qr_psi_sec
    step8 = _weighted(select_best(d.psi, d.m, d.n_max, ("plain",), profile, d.t),
                      d.psi, d.m, d.n_max, profile, d.t, enc=False)
    compute = step4 + step5 + eig_sec + step7 + step8

    comm = step_comm(dims)
    total_cts = sum(comm.values())
    per_ct = network.latency_s + network.ciphertext_bytes * 8.0 / network.bandwidth_bps
    network_sec = per_ct * total_cts * network.hops(d.s)
    return compute + network_sec
