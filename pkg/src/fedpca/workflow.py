"""The eight-step federated randomized-PCA protocol.

Each party keeps its samples in cleartext and contributes encrypted
aggregates; everything that follows an aggregation is executed redundantly
by every party on the broadcast ciphertexts.  Mean centering is lazy: local
matrices stay raw and products are corrected with the encrypted global mean
afterward.  The power stage runs either against per-party encrypted
covariance blocks (precompute-and-reuse) or against the raw cleartext
factors on the fly (sequential), whichever the cost model prefers for the
shape at hand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import costs
from .approx import SiteCursor, SpecBook
from .cipher import Ciphertext, CryptoParams, pow2_ceil
from .collective import aggregate_broadcast, dkeygen, dkeyswitch
from .encmat import (EncMatrix, equalize_levels, m3_rows_from_gram, mul_m1,
                     mul_m3, mul_m4, select_best, mul_m2)
from .enclinalg import EigResult, dqr_t, eigen, qr_t
from .fedsim import Federation, NetworkModel, RuntimeProfile
from .oracle import RecordingPolicy, count_sketch, rpca_cleartext

select_strategy = costs.select_strategy
choose_qr = costs.choose_qr


@dataclass(frozen=True)
class PcaParams:
    """Public protocol parameters agreed in the setup step."""

    num_pcs: int = 4
    oversampling: int = 4
    power_iterations: int = 10
    eigen_iterations: int = 5
    network_factor: float = 2.0
    strategy: str = "auto"            # auto | precomp | seq
    qr_variant: str = "auto"          # auto | qr | dqr
    sketch_seed: int = 0
    degree: int = 31
    interval_margin: float = 2.0
    interval_source: str = "pooled"   # pooled | upsample_local | manual
    interval_grouping: str = "per_site"  # per_site | grouped
    approx_specs: SpecBook | None = None
    tridiagonalize: bool = False
    keyswitch_outputs: bool = False

    def __post_init__(self) -> None:
        if self.num_pcs < 1 or self.oversampling < 0:
            raise ValueError("need at least one component")
        if self.power_iterations < 0 or self.eigen_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.strategy not in ("auto", "precomp", "seq"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.qr_variant not in ("auto", "qr", "dqr"):
            raise ValueError(f"unknown qr variant {self.qr_variant!r}")

    @property
    def rho(self) -> int:
        return self.num_pcs + self.oversampling


@dataclass
class DatasetShard:
    """One party's horizontal slice; ``row_ids`` are the rows' indices in the
    joint matrix so any partition of the same data sees one sketch."""

    party: int
    data: np.ndarray
    row_ids: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        if self.data.shape[0] != self.row_ids.shape[0]:
            raise ValueError("row_ids must match the local sample count")


def make_shards(blocks: list[np.ndarray]) -> list[DatasetShard]:
    """Shards from consecutive row blocks."""
    shards = []
    start = 0
    for i, b in enumerate(blocks):
        b = np.asarray(b, dtype=np.float64)
        shards.append(DatasetShard(i, b, np.arange(start, start + b.shape[0])))
        start += b.shape[0]
    return shards


def upsample_rows(X: np.ndarray, n_total: int) -> np.ndarray:
    """Deterministic row repetition to the joint sample count."""
    idx = np.arange(n_total) % X.shape[0]
    return X[idx]


@dataclass
class WorkflowState:
    sketch: np.ndarray | None = None
    mean: EncMatrix | None = None
    basis: EncMatrix | None = None            # rho x m
    cov_rows: list[np.ndarray | None] | None = None   # per-party m3 operand
    seq_cache: list[EncMatrix] | None = None  # per-party centered rho x n_i
    reduced: EncMatrix | None = None          # rho x rho
    eig: EigResult | None = None
    pcs: EncMatrix | None = None              # psi x m
    projections: list[EncMatrix] | None = None


@dataclass
class PcaOutput:
    pcs: EncMatrix
    projections: list[EncMatrix]
    state: WorkflowState
    fed: Federation
    resolved: dict
    wall_seconds: float
    book: SpecBook | None = None

    def reveal_pcs(self) -> np.ndarray:
        return self.pcs.reveal()

    def reveal_projection(self, party: int) -> np.ndarray:
        return self.projections[party].reveal().T  # stored transposed

    def decrypt_pcs(self) -> np.ndarray:
        rows = [dkeyswitch(self.fed, self.pcs.data[i][0], None)[: self.pcs.cols]
                for i in range(self.pcs.rows)]
        return np.vstack(rows)


# ---------------------------------------------------------------------------
# step implementations
# ---------------------------------------------------------------------------

def resolve_intervals(shards: list[DatasetShard], params: PcaParams,
                      qr_variant: str) -> SpecBook:
    """Preview the pipeline on cleartext data and fix the interval book.

    ``pooled`` previews the joint matrix (how the test harness agrees on
    parameters); ``upsample_local`` mirrors a single party extrapolating its
    local view, which is what a deployment without a data pool would do.
    """
    n = sum(s.data.shape[0] for s in shards)
    if params.interval_source == "upsample_local":
        preview = upsample_rows(shards[0].data, n)
    else:
        order = np.argsort(np.concatenate([s.row_ids for s in shards]))
        preview = np.concatenate([s.data for s in shards], axis=0)[order]
    policy = RecordingPolicy()
    rpca_cleartext(
        preview, num_pcs=params.num_pcs, oversampling=params.oversampling,
        power_iterations=params.power_iterations,
        eigen_iterations=params.eigen_iterations,
        sketch_seed=params.sketch_seed, policy=policy, qr_variant=qr_variant,
        tridiagonalize=params.tridiagonalize)
    return policy.book(margin=params.interval_margin, degree=params.degree,
                       grouped=params.interval_grouping == "grouped")


def _aggregate_matrices(fed: Federation, mats: list[EncMatrix]) -> EncMatrix:
    data = aggregate_broadcast(fed, [m.data for m in mats])
    return EncMatrix(fed.engine, mats[0].rows, mats[0].cols, data)


def _scaled_mean_row(fed: Federation, o: EncMatrix, scale: float) -> Ciphertext:
    eng = fed.engine
    t = fed.params.slot_count
    row = fed.ensure_levels(o.row(0), 1)
    return eng.maintain(eng.mul_plain(row, np.full(t, scale)))


def _mean_correction(fed: Federation, M: EncMatrix, o_row: Ciphertext,
                     o_scaled: Ciphertext) -> EncMatrix:
    """rows of n * (M[i,:] . o) * o, the lazy-centering adder for a product
    against the raw covariance."""
    eng = fed.engine
    width = M.cols
    spread = mul_m4(M, o_row, case=2)
    rows = []
    for i in range(spread.rows):
        r = fed.ensure_levels(spread.row(i), 1)
        rows.append(eng.maintain(eng.mul_cipher(r, fed.ensure_levels(o_scaled, 1))))
    return equalize_levels(EncMatrix.from_rows(eng, rows, width))


def mul_small_left(fed: Federation, V: EncMatrix, N: EncMatrix) -> EncMatrix:
    """R = V x N for a tiny encrypted left factor: every element of V is
    spread against the matching encrypted row of N."""
    eng = fed.engine
    a, b = V.rows, V.cols
    if N.rows != b:
        raise ValueError("inner dimensions disagree")
    width = pow2_ceil(min(N.cols, fed.params.slot_count))
    rows = []
    for i in range(a):
        acc = None
        vrow = fed.ensure_levels(V.row(i), 2)
        for k in range(b):
            elem = eng.mask_slot(vrow, k)
            spread = eng.dup(fed.ensure_levels(elem, 1), width)
            term = eng.mul_cipher(spread, fed.ensure_levels(N.row(k), 1))
            acc = term if acc is None else eng.add(acc, term)
        rows.append(eng.maintain(acc))
    return equalize_levels(EncMatrix.from_rows(eng, rows, N.cols))


def _product_with_cov(fed: Federation, P: EncMatrix, shards, state: WorkflowState,
                      strategy: str, o_row, o_scaled, n_total: int,
                      method_log: dict, cache_key: str | None = None) -> EncMatrix:
    """One mean-centered product P x Cov under the selected strategy."""
    eng = fed.engine
    m = P.cols
    if strategy == "precomp":
        parts = []
        for shard in shards:
            with fed.local(shard.party):
                Pp = _ensure_rows(fed, P, 3)
                parts.append(mul_m3(Pp, enc_rows=state.cov_rows[shard.party],
                                    out_cols=m))
        raw = _aggregate_matrices(fed, parts)
        corr = _mean_correction(fed, P, o_row, o_scaled)
        return raw.sub(corr)
    # sequential: through the cleartext factors, centering both stages
    parts = []
    cache = []
    for shard in shards:
        ni = shard.data.shape[0]
        with fed.local(shard.party):
            Pp = _ensure_rows(fed, P, 3)
            meth1 = select_best(P.rows, m, ni, ("plain",), fed.profile,
                                fed.params.slot_count)
            method_log.setdefault("seq_stage1", meth1)
            Y = _run_method(fed, meth1, Pp, shard.data.T)
            corr1 = mul_m4(Pp, o_row, case=2)
            corr1 = _truncate_cols(fed, corr1, ni)
            Yc = Y.sub(corr1)
            meth2 = select_best(P.rows, ni, m, ("plain",), fed.profile,
                                fed.params.slot_count)
            method_log.setdefault("seq_stage2", meth2)
            Yc2 = _ensure_rows(fed, Yc, 3)
            W = _run_method(fed, meth2, Yc2, shard.data)
            corr2 = _case1_correction(fed, Yc2, o_row, m)
            parts.append(W.sub(corr2))
            cache.append(Yc)
    if cache_key == "seq":
        state.seq_cache = cache
    return _aggregate_matrices(fed, parts)


def _run_method(fed: Federation, method: str, M: EncMatrix, N: np.ndarray) -> EncMatrix:
    if method == "m1":
        return mul_m1(M, N)
    if method == "m2":
        return mul_m2(M, N)
    return mul_m3(M, N)


def _truncate_cols(fed: Federation, M: EncMatrix, cols: int) -> EncMatrix:
    """Reinterpret rows on a narrower payload, masking slots beyond it."""
    eng = fed.engine
    rows = []
    for i in range(M.rows):
        rows.append(eng.mask_range(fed.ensure_levels(M.row(i), 1), 0, cols))
    return equalize_levels(EncMatrix.from_rows(eng, rows, cols))


def _case1_correction(fed: Federation, Y: EncMatrix, o_row: Ciphertext,
                      m: int) -> EncMatrix:
    """rows of (sum of Y[i,:]) * o  (duplicated-row product, case 1)."""
    eng = fed.engine
    width = pow2_ceil(min(m, fed.params.slot_count))
    rows = []
    for i in range(Y.rows):
        summed = eng.rotate_sum(fed.ensure_levels(Y.row(i), 2),
                                pow2_ceil(Y.cols))
        head = eng.mask_slot(summed, 0)
        spread = eng.dup(fed.ensure_levels(head, 1), width)
        rows.append(eng.maintain(eng.mul_cipher(spread,
                                                fed.ensure_levels(o_row, 1))))
    return equalize_levels(EncMatrix.from_rows(eng, rows, m))


def _ensure_rows(fed: Federation, M: EncMatrix, need: int) -> EncMatrix:
    rows = [fed.ensure_levels(fed.engine.maintain(M.data[i][0]), need)
            for i in range(M.rows)]
    return equalize_levels(EncMatrix.from_rows(fed.engine, rows, M.cols))


# ---------------------------------------------------------------------------
# the protocol
# ---------------------------------------------------------------------------

def run(shards: list[DatasetShard], params: PcaParams,
        crypto: CryptoParams | None = None, network: NetworkModel | None = None,
        profile: RuntimeProfile | None = None, noise_seed: int = 0) -> PcaOutput:
    """Execute the full protocol and return encrypted outputs plus ledgers."""
    crypto = crypto if crypto is not None else CryptoParams()
    n_parties = len(shards)
    fed = Federation(n_parties, params=crypto, network=network, profile=profile,
                     noise_seed=noise_seed)
    eng = fed.engine
    t = crypto.slot_count
    m = shards[0].data.shape[1]
    n_total = sum(s.data.shape[0] for s in shards)
    n_max = max(s.data.shape[0] for s in shards)
    rho, psi = params.rho, params.num_pcs
    if rho > min(n_total, m):
        raise ValueError("component count exceeds data dimensions")
    if m > t:
        raise ValueError("feature count exceeds the ciphertext capacity")
    state = WorkflowState()
    cursor = SiteCursor()
    method_log: dict = {}

    strategy = params.strategy
    if strategy == "auto":
        strategy = select_strategy(m, n_max, rho, fed.profile, t)
    qr_variant = params.qr_variant
    if qr_variant == "auto":
        qr_variant = choose_qr(n_max, m, params.network_factor) \
            if strategy == "seq" else "qr"
    if qr_variant == "dqr" and strategy != "seq":
        qr_variant = "qr"

    with fed.step("step1_setup"):
        dkeygen(fed)
        state.sketch = count_sketch(rho, n_total, params.sketch_seed)
        if params.approx_specs is not None:
            book = params.approx_specs
        else:
            book = resolve_intervals(shards, params, qr_variant)

    with fed.step("step2_mean"):
        contributions = []
        for shard in shards:
            with fed.local(shard.party):
                colsum = shard.data.sum(axis=0) / n_total
                contributions.append(EncMatrix.from_plain(eng, colsum[None, :]))
        state.mean = _aggregate_matrices(fed, contributions)
    o_row = state.mean.row(0)
    o_scaled = _scaled_mean_row(fed, state.mean, float(n_total))

    with fed.step("step3_projection"):
        contributions = []
        for shard in shards:
            with fed.local(shard.party):
                local = state.sketch[:, shard.row_ids] @ shard.data
                contributions.append(EncMatrix.from_plain(eng, local))
        state.basis = _aggregate_matrices(fed, contributions)

    if strategy == "precomp":
        state.cov_rows = [None] * n_parties
        for shard in shards:
            with fed.local(shard.party):
                rows = m3_rows_from_gram(shard.data, t)
                state.cov_rows[shard.party] = [eng.encrypt(r) for r in rows]

    with fed.step("step4_power"):
        P = state.basis
        for it in range(params.power_iterations):
            phase = "power.first" if it == 0 else "power.rest"
            if qr_variant == "dqr":
                P = _power_iteration_dqr(fed, P, shards, o_row, book, cursor,
                                         phase, method_log)
            else:
                prod = _product_with_cov(fed, P, shards, state, strategy,
                                         o_row, o_scaled, n_total, method_log)
                qres = qr_t(fed, prod, book, cursor, phase)
                P = qres.q
        state.basis = P

    with fed.step("step5_reduction"):
        if strategy == "precomp":
            parts = []
            for shard in shards:
                with fed.local(shard.party):
                    Pp = _ensure_rows(fed, P, 3)
                    Vi = mul_m3(Pp, enc_rows=state.cov_rows[shard.party],
                                out_cols=m)
                    parts.append(mul_m1(_ensure_rows(fed, Vi, 3), Pp))
            z_raw = _aggregate_matrices(fed, parts)
            state.reduced = _reduced_correction(fed, z_raw, P, o_row, n_total)
        else:
            parts = []
            cache = []
            for shard in shards:
                ni = shard.data.shape[0]
                with fed.local(shard.party):
                    Pp = _ensure_rows(fed, P, 3)
                    meth = select_best(rho, m, ni, ("plain",), fed.profile, t)
                    Y = _run_method(fed, meth, Pp, shard.data.T)
                    corr1 = _truncate_cols(fed, mul_m4(Pp, o_row, case=2), ni)
                    Yc = Y.sub(corr1)
                    cache.append(Yc)
                    parts.append(mul_m1(_ensure_rows(fed, Yc, 3), Yc))
            state.seq_cache = cache
            state.reduced = _aggregate_matrices(fed, parts)

    with fed.step("step6_eigen"):
        state.eig = eigen(fed, state.reduced, params.eigen_iterations, book,
                          cursor, tridiagonalize=params.tridiagonalize)

    with fed.step("step7_reconstruction"):
        top_rows = [state.eig.q.row(i) for i in range(psi)]
        V_top = equalize_levels(EncMatrix.from_rows(eng, top_rows, rho))
        if strategy == "precomp" or qr_variant == "dqr":
            B = mul_small_left(fed, V_top, P)
            prod = _product_with_cov(fed, B, shards, state, strategy,
                                     o_row, o_scaled, n_total, method_log)
        else:
            parts = []
            for shard, Yc in zip(shards, state.seq_cache):
                ni = shard.data.shape[0]
                with fed.local(shard.party):
                    X1 = mul_small_left(fed, V_top, Yc)
                    meth = select_best(psi, ni, m, ("plain",), fed.profile, t)
                    X2 = _run_method(fed, meth, _ensure_rows(fed, X1, 3),
                                     shard.data)
                    corr = _case1_correction(fed, _ensure_rows(fed, X1, 3),
                                             o_row, m)
                    parts.append(X2.sub(corr))
            prod = _aggregate_matrices(fed, parts)
        qres = qr_t(fed, prod, book, cursor, "recon")
        state.pcs = qres.q

    with fed.step("step8_projection"):
        projections = []
        for shard in shards:
            ni = shard.data.shape[0]
            with fed.local(shard.party):
                Wp = _ensure_rows(fed, state.pcs, 3)
                meth = select_best(psi, m, ni, ("plain",), fed.profile, t)
                method_log.setdefault("step8", meth)
                At = _run_method(fed, meth, Wp, shard.data.T)
                corr = _truncate_cols(fed, mul_m4(Wp, o_row, case=2), ni)
                proj = At.sub(corr).maintain()
                if params.keyswitch_outputs:
                    rows = [dkeyswitch(fed, proj.data[r][0], shard.party)
                            for r in range(proj.rows)]
                    proj = EncMatrix.from_rows(eng, rows, proj.cols)
                projections.append(proj)
        state.projections = projections

    wall = fed.estimated_wall_seconds()
    resolved = {
        "strategy": strategy,
        "qr_variant": qr_variant,
        "methods": method_log,
        "interval_source": params.interval_source
        if params.approx_specs is None else "manual",
        "interval_grouping": params.interval_grouping,
        "sites": len(book.sites),
        "skipped_sites": sum(1 for s in book.sites.values() if s.skip),
        "degree": book.degree,
    }
    return PcaOutput(pcs=state.pcs, projections=projections, state=state,
                     fed=fed, resolved=resolved, wall_seconds=wall, book=book)


def _reduced_correction(fed: Federation, z_raw: EncMatrix, P: EncMatrix,
                        o_row: Ciphertext, n_total: int) -> EncMatrix:
    """Z -= n (P o^T)(P o^T)^T via the packed per-row inner products."""
    eng = fed.engine
    rho = P.rows
    dots = []
    for j in range(rho):
        r = fed.ensure_levels(P.row(j), 3)
        dots.append(eng.dot(r, fed.ensure_levels(o_row, 3),
                            width=pow2_ceil(P.cols)))
    packed = dots[0]
    for j in range(1, rho):
        packed = eng.add(packed, eng.rotate(dots[j], -j))
    packed = fed.ensure_levels(eng.maintain(packed), 2)
    rows = []
    for j in range(rho):
        scal = eng.mask_slot(packed, j, float(n_total))
        spread = eng.dup(fed.ensure_levels(scal, 1), pow2_ceil(rho))
        rows.append(eng.maintain(eng.mul_cipher(spread, packed)))
    corr = equalize_levels(EncMatrix.from_rows(eng, rows, rho))
    return z_raw.sub(corr)


def _power_iteration_dqr(fed: Federation, P: EncMatrix, shards, o_row,
                         book, cursor, phase, method_log) -> EncMatrix:
    """Sequential power step orthogonalizing the sample-side intermediate
    with the federated factorization."""
    eng = fed.engine
    m = P.cols
    t = fed.params.slot_count
    y_shards = []
    for shard in shards:
        ni = shard.data.shape[0]
        with fed.local(shard.party):
            Pp = _ensure_rows(fed, P, 3)
            meth = select_best(P.rows, m, ni, ("plain",), fed.profile, t)
            method_log.setdefault("seq_stage1", meth)
            Y = _run_method(fed, meth, Pp, shard.data.T)
            corr1 = _truncate_cols(fed, mul_m4(Pp, o_row, case=2), ni)
            y_shards.append(Y.sub(corr1).maintain())
    dq = dqr_t(fed, y_shards, book, cursor, phase)
    parts = []
    for shard, qsh in zip(shards, dq.q_shards):
        ni = shard.data.shape[0]
        with fed.local(shard.party):
            meth = select_best(P.rows, ni, m, ("plain",), fed.profile, t)
            method_log.setdefault("seq_stage2", meth)
            Qp = _ensure_rows(fed, qsh, 3)
            Wl = _run_method(fed, meth, Qp, shard.data)
            corr2 = _case1_correction(fed, Qp, o_row, m)
            parts.append(Wl.sub(corr2))
    return _aggregate_matrices(fed, parts)
