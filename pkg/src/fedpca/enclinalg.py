"""Encrypted Householder reflectors, transposed QR factorization (single and
federated), and eigendecomposition by shifted QR iterations.

Conventions:

* QR is applied to the rows: V = R x Q with R lower-triangular and Q
  row-orthonormal.  The minor recursion cycles each row left by one slot per
  elimination step, parking the dropped leading slots at the row tail; the
  de-rotation of the pivot row then reassembles a full lower-triangular row
  of R in one rotation.
* Reflector nonlinearities are resolved through a SpecBook: healthy sites
  evaluate tight per-site Chebyshev fits; sites whose preview input is
  negligible for their phase follow a public skip rule (zero reflector, or
  a fixed positive sign when only the pivot entry vanishes).  The cleartext
  mirror applies the same rules, which keeps both paths on one trajectory.
* Interactive refresh traffic of each unit is charged by its closed-form
  amortized cost (see ``costs``); refreshes inside a unit restore levels
  without re-charging traffic.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import costs
from .approx import SiteCursor, SiteSpec, SpecBook, chebyshev_fit, eval_poly_bsgs, bsgs_depth
from .cipher import CapacityError, Ciphertext, pow2_ceil
from .collective import aggregate_broadcast
from .encmat import EncMatrix, equalize_levels, mul_m5
from .fedsim import Federation

choose_qr = costs.choose_qr


@dataclass
class QrResult:
    q: EncMatrix  # row-orthonormal, delta x h
    r: EncMatrix  # lower-triangular, delta x delta


@dataclass
class DqrResult:
    q_shards: list[EncMatrix]  # per-party column blocks of Q
    r: EncMatrix

    def reveal_q(self) -> np.ndarray:
        return np.hstack([sh.reveal() for sh in self.q_shards])


@dataclass
class EigResult:
    q: EncMatrix     # rows are eigenvectors
    l: Ciphertext    # eigenvalues packed in the first eta slots


# ---------------------------------------------------------------------------
# nonlinearity sites
# ---------------------------------------------------------------------------

def _take_specs(book: SpecBook, cursor: SiteCursor, phase: str):
    out = []
    for fn in ("sqrt", "sign", "inv_sqrt"):
        site = cursor.take(phase, fn)
        out.append(book.resolve(site, phase, fn))
    return out


def _eval_fn(fed: Federation, ct: Ciphertext, spec: SiteSpec, f) -> Ciphertext:
    """Refresh as needed and evaluate a fitted polynomial on a slot-0 value."""
    coeffs = chebyshev_fit(f, spec.interval, spec.degree)
    ct = fed.ensure_levels(fed.engine.maintain(ct), bsgs_depth(spec.degree))
    return eval_poly_bsgs(fed.engine, ct, coeffs, spec.interval)


def _mask0(fed: Federation, ct: Ciphertext, value: float = 1.0) -> Ciphertext:
    ct = fed.ensure_levels(fed.engine.maintain(ct), 1)
    return fed.engine.mask_slot(ct, 0, value)


# ---------------------------------------------------------------------------
# Householder reflector
# ---------------------------------------------------------------------------

def householder(fed: Federation, v: Ciphertext, h: int, book: SpecBook,
                cursor: SiteCursor, phase: str = "power.first") -> Ciphertext:
    """Reflector v' with H = I - 2 v'v'^T sending v to (+-|v|, 0, ..., 0).

    ``v`` carries the h-entry payload in its leading slots (zeros elsewhere).
    The pivot sign is taken from v[0]/sqrt(v[0]^2) for cancellation-free
    updates; the norm and the final normalization are polynomial
    evaluations.  Degenerate sites follow the book's public skip rule.
    """
    with fed.comm_unit(costs.hh_comm(h, book.degree, fed.params.slot_count,
                                     fed.params.level_budget), "hh"):
        return _householder_inner(fed, [v], [h], book, cursor, phase)[0]


def _householder_inner(fed: Federation, pieces: list[Ciphertext], widths: list[int],
                       book: SpecBook, cursor: SiteCursor, phase: str,
                       sharded: bool = False) -> list[Ciphertext]:
    """Shared reflector body; ``pieces`` are per-party column blocks when
    ``sharded`` (aggregating the partial norms and inner products), else one
    ciphertext."""
    eng = fed.engine

    def party_scope(idx: int):
        return fed.local(idx) if sharded else contextlib.nullcontext()

    sp_sqrt, sp_sign, sp_inv = _take_specs(book, cursor, phase)
    if sp_sqrt.skip or sp_inv.skip:
        # structurally zero vector: the reflection is the identity
        zeros = np.zeros(fed.params.slot_count)
        out = []
        for idx, p in enumerate(pieces):
            with party_scope(idx):
                out.append(eng.maintain(eng.mul_plain(fed.ensure_levels(p, 1), zeros)))
        return out

    partials = []
    squares = []
    for idx, (p, w) in enumerate(zip(pieces, widths)):
        with party_scope(idx):
            p = fed.ensure_levels(p, 3)
            sq = eng.maintain(eng.mul_cipher(p, p))
            summed = eng.rotate_sum(sq, pow2_ceil(w))
            partials.append(_mask0(fed, summed))
            squares.append(sq)
    n2 = aggregate_broadcast(fed, partials) if sharded else partials[0]

    nrm0 = _mask0(fed, _eval_fn(fed, n2, sp_sqrt, np.sqrt))

    if sp_sign.skip:
        delta = nrm0  # pivot entry negligible: fix the positive sign publicly
    else:
        x = _mask0(fed, fed.ensure_levels(pieces[0], 2))
        x2 = eng.maintain(eng.mul_cipher(x, x))
        isq0 = _mask0(fed, _eval_fn(fed, x2, sp_sign, lambda z: 1.0 / np.sqrt(z)))
        sgn = eng.maintain(eng.mul_cipher(fed.ensure_levels(x, 1),
                                          fed.ensure_levels(isq0, 1)))
        delta = eng.maintain(eng.mul_cipher(fed.ensure_levels(sgn, 1),
                                            fed.ensure_levels(nrm0, 1)))

    u0 = eng.add(fed.ensure_levels(pieces[0], 2), delta)
    u0 = fed.ensure_levels(u0, 2)
    u_pieces = [u0] + [p for p in pieces[1:]]
    u2 = eng.maintain(eng.mul_cipher(u0, u0))
    u0sq = _mask0(fed, u2)
    v0sq = _mask0(fed, squares[0])
    k = eng.add(u0sq, eng.sub(n2, v0sq))

    kp0 = _mask0(fed, _eval_fn(fed, k, sp_inv, lambda z: 1.0 / np.sqrt(z)))
    kp0 = fed.ensure_levels(kp0, 1)
    out = []
    for idx, (u, w) in enumerate(zip(u_pieces, widths)):
        with party_scope(idx):
            spread = eng.dup(kp0, pow2_ceil(w))
            out.append(eng.maintain(eng.mul_cipher(fed.ensure_levels(u, 1), spread)))
    return out


# ---------------------------------------------------------------------------
# transposed QR factorization
# ---------------------------------------------------------------------------

def _reflect_rows(fed: Federation, rows: list[Ciphertext], refl: Ciphertext,
                  width: int, dots: list[Ciphertext]) -> list[Ciphertext]:
    """rows[j] -= 2 (rows[j] . refl) refl, given the per-row dot values."""
    eng = fed.engine
    out = []
    for row, d in zip(rows, dots):
        scal2 = _mask0(fed, d, 2.0)
        spread = eng.dup(fed.ensure_levels(scal2, 1), pow2_ceil(width))
        prod = eng.maintain(eng.mul_cipher(fed.ensure_levels(refl, 1), spread))
        out.append(eng.sub(row, prod))
    return out


def _row_dots(fed: Federation, rows: list[Ciphertext], refl: Ciphertext,
              width: int) -> list[Ciphertext]:
    eng = fed.engine
    out = []
    for row in rows:
        row = fed.ensure_levels(row, 3)
        out.append(eng.dot(row, fed.ensure_levels(refl, 3), width=pow2_ceil(width)))
    return out


def _refresh_full(fed: Federation, ct: Ciphertext) -> Ciphertext:
    """Leave a unit with a full level budget (refresh only when needed)."""
    ct = fed.engine.maintain(ct)
    return fed.refresh(ct) if ct.level < fed.params.level_budget else ct


def qr_t(fed: Federation, V: EncMatrix, book: SpecBook, cursor: SiteCursor,
         phase: str = "power.first") -> QrResult:
    """Factor V (delta x h, delta <= h) into lower-triangular R and
    row-orthonormal Q with R x Q = V."""
    delta, h = V.rows, V.cols
    if delta > h:
        raise CapacityError("transposed QR needs at least as many columns as rows")
    if V.block_count != 1:
        raise CapacityError("qr_t requires single-block rows")
    eng = fed.engine
    t = fed.params.slot_count
    comm = costs.qr_comm(delta, h, book.degree, t, fed.params.level_budget)
    with fed.comm_unit(comm, "qr"):
        work = [V.data[j][0] for j in range(delta)]
        refls: list[Ciphertext] = []
        r_rows: list[Ciphertext] = []
        for i in range(delta):
            hl = h - i
            pivot = eng.mask_range(fed.ensure_levels(work[0], 1), 0, hl)
            refl = _householder_inner(fed, [pivot], [hl], book, cursor, phase)[0]
            refls.append(refl)
            dots = _row_dots(fed, work, refl, hl)
            work = _reflect_rows(fed, work, refl, hl, dots)
            r = eng.rotate(fed.ensure_levels(work[0], 1), -i)
            r_rows.append(eng.mask_range(r, 0, delta))
            work = [eng.rotate(work[j + 1], 1) for j in range(len(work) - 1)]
        q_rows = []
        eye = np.eye(delta)
        for j in range(delta):
            row = np.zeros(h)
            row[:delta] = eye[j]
            q_rows.append(eng.encrypt(row))
        for i in reversed(range(delta)):
            hi = eng.rotate(refls[i], -i)
            dots = _row_dots(fed, q_rows, hi, h)
            q_rows = _reflect_rows(fed, q_rows, hi, h, dots)
        q_rows = [_refresh_full(fed, ct) for ct in q_rows]
        r_rows = [_refresh_full(fed, ct) for ct in r_rows]
    return QrResult(q=equalize_levels(EncMatrix.from_rows(eng, q_rows, h)),
                    r=equalize_levels(EncMatrix.from_rows(eng, r_rows, delta)))


def dqr_t(fed: Federation, shards: list[EncMatrix], book: SpecBook,
          cursor: SiteCursor, phase: str = "power.first") -> DqrResult:
    """Federated transposed QR over a column-sharded matrix.

    Party i holds delta x n_i columns; reflector norms and the two
    matrix-vector products are aggregated, everything else stays local.
    Mathematically identical to ``qr_t`` on the column concatenation.  The
    minor recursion drops leading columns, which all live in the first
    shard, so only that shard cycles its rows (delta <= n_0 required).
    """
    if len(shards) != fed.n_parties:
        raise CapacityError("one shard per party required")
    delta = shards[0].rows
    widths = [sh.cols for sh in shards]
    if any(sh.rows != delta for sh in shards):
        raise CapacityError("shards disagree on the row count")
    if delta > widths[0]:
        raise CapacityError("first shard must hold at least delta columns")
    eng = fed.engine
    t = fed.params.slot_count
    h = sum(widths)
    comm = costs.qr_comm(delta, h, book.degree, t, fed.params.level_budget) \
        + costs.dqr_extra_comm(delta, h, t)
    with fed.comm_unit(comm, "dqr"):
        work = [[sh.data[j][0] for j in range(delta)] for sh in shards]
        refls: list[list[Ciphertext]] = []
        r_rows: list[Ciphertext] = []
        for i in range(delta):
            active = [widths[0] - i] + widths[1:]
            pieces = []
            for pi, rows in enumerate(work):
                with fed.local(pi):
                    pieces.append(eng.mask_range(fed.ensure_levels(rows[0], 1),
                                                 0, active[pi]))
            refl = _householder_inner(fed, pieces, active, book, cursor, phase,
                                      sharded=True)
            refls.append(refl)
            nrows = len(work[0])
            dot_parts = []
            for pi, rows in enumerate(work):
                with fed.local(pi):
                    dot_parts.append(_row_dots(fed, rows, refl[pi], active[pi]))
            packed = []
            for pi in range(fed.n_parties):
                with fed.local(pi):
                    acc = dot_parts[pi][0]
                    for j in range(1, nrows):
                        acc = eng.add(acc, eng.rotate(dot_parts[pi][j], -j))
                    packed.append(acc)
            dots_global = aggregate_broadcast(fed, packed)
            dots = [eng.mask_slot(dots_global, j) for j in range(nrows)]
            for pi in range(fed.n_parties):
                with fed.local(pi):
                    work[pi] = _reflect_rows(fed, work[pi], refl[pi], active[pi], dots)
            r = eng.rotate(work[0][0], -i)
            r_rows.append(eng.mask_range(r, 0, delta))
            work[0] = [eng.rotate(work[0][j + 1], 1) for j in range(nrows - 1)]
            for pi in range(1, fed.n_parties):
                work[pi] = work[pi][1:]
        q_work: list[list[Ciphertext]] = []
        eye = np.eye(delta)
        for pi, w in enumerate(widths):
            rows = []
            for j in range(delta):
                row = np.zeros(min(w, t))
                if pi == 0:
                    row[:delta] = eye[j]
                rows.append(eng.encrypt(row))
            q_work.append(rows)
        for i in reversed(range(delta)):
            hpieces = [eng.rotate(refls[i][0], -i)] + refls[i][1:]
            dot_parts = []
            for pi in range(fed.n_parties):
                with fed.local(pi):
                    dot_parts.append(_row_dots(fed, q_work[pi], hpieces[pi], widths[pi]))
            packed = []
            for pi in range(fed.n_parties):
                with fed.local(pi):
                    acc = dot_parts[pi][0]
                    for j in range(1, delta):
                        acc = eng.add(acc, eng.rotate(dot_parts[pi][j], -j))
                    packed.append(acc)
            dots_global = aggregate_broadcast(fed, packed)
            dots = [eng.mask_slot(dots_global, j) for j in range(delta)]
            for pi in range(fed.n_parties):
                with fed.local(pi):
                    q_work[pi] = _reflect_rows(fed, q_work[pi], hpieces[pi],
                                               widths[pi], dots)
        q_shards = []
        for pi in range(fed.n_parties):
            rows = [eng.maintain(ct) for ct in q_work[pi]]
            q_shards.append(equalize_levels(EncMatrix.from_rows(eng, rows, widths[pi])))
        r_rows = [eng.maintain(ct) for ct in r_rows]
    return DqrResult(q_shards=q_shards,
                     r=equalize_levels(EncMatrix.from_rows(eng, r_rows, delta)))


# ---------------------------------------------------------------------------
# eigendecomposition
# ---------------------------------------------------------------------------

def _identity_rows(eng, eta: int) -> list[Ciphertext]:
    eye = np.eye(eta)
    return [eng.encrypt(eye[r]) for r in range(eta)]


def _embed_reflector(fed: Federation, refl: Ciphertext, offset: int,
                     eta: int) -> EncMatrix:
    """P = I with I - 2 v v^T on the trailing block starting at ``offset``."""
    eng = fed.engine
    pos = eng.rotate(refl, -offset)
    rows = []
    eye = np.eye(eta)
    for r in range(eta):
        if r < offset:
            rows.append(eng.encrypt(eye[r]))
            continue
        scal2 = eng.mask_slot(fed.ensure_levels(pos, 2), r, 2.0)
        spread = eng.dup(fed.ensure_levels(scal2, 1), pow2_ceil(eta))
        prod = eng.maintain(eng.mul_cipher(fed.ensure_levels(pos, 1), spread))
        rows.append(eng.add_plain(eng.neg(prod), eye[r]))
    return equalize_levels(EncMatrix.from_rows(eng, rows, eta))


def _ensure_matrix(fed: Federation, M: EncMatrix, need: int) -> EncMatrix:
    rows = [fed.ensure_levels(fed.engine.maintain(M.data[r][0]), need)
            for r in range(M.rows)]
    return equalize_levels(EncMatrix.from_rows(fed.engine, rows, M.cols))


def eigen(fed: Federation, Z: EncMatrix, w: int, book: SpecBook,
          cursor: SiteCursor, tridiagonalize: bool = False) -> EigResult:
    """Eigen-decompose a symmetric encrypted matrix by deflated, shifted QR
    iterations; rows of Q are eigenvectors, ``l`` packs the eigenvalues.

    The shift subtracted before each factorization is the trailing diagonal
    entry of the active block, applied across the active diagonal (the only
    reading that preserves the spectrum).  Extraction order tracks the
    corner eigenvalue, so inputs whose diagonal is already close to sorted
    (the reduced matrices this protocol produces) come out descending.
    ``tridiagonalize`` enables the reflector pre-pass; it is off by default
    because conjugating by reflectors of near-noise tail vectors reshuffles
    an almost-sorted diagonal and destroys the extraction order (values
    still converge).  Small products run through the single-ciphertext
    method; conversions cost one multiplication and one rotation per row.
    """
    eta = Z.rows
    if eta < 2 or Z.rows != Z.cols:
        raise CapacityError("eigen expects a square matrix with eta >= 2")
    eng = fed.engine
    t = fed.params.slot_count
    comm = costs.eigen_comm(eta, w, book.degree, t, fed.params.level_budget)
    with fed.comm_unit(comm, "eigen"):
        T = Z.copy()
        Q = equalize_levels(EncMatrix.from_rows(eng, _identity_rows(eng, eta), eta))
        if tridiagonalize:
            for i in range(eta - 2):
                tail = eng.rotate(fed.ensure_levels(T.row(i), 1), i + 1)
                tail = eng.mask_range(tail, 0, eta - i - 1)
                refl = _householder_inner(fed, [tail], [eta - i - 1], book, cursor,
                                          "eigen")[0]
                P = _embed_reflector(fed, refl, i + 1, eta)
                P = _ensure_matrix(fed, P, 4)
                T = mul_m5(P, _ensure_matrix(fed, T, 4))
                T = mul_m5(_ensure_matrix(fed, T, 4), P)
                Q = mul_m5(P, _ensure_matrix(fed, Q, 4))
        l_parts: list[Ciphertext] = []
        for a in range(eta, 1, -1):
            for _ in range(w):
                T = _ensure_matrix(fed, T, 3)
                sig = eng.mask_slot(T.row(a - 1), a - 1)
                act_rows = []
                for r in range(a):
                    row = eng.mask_range(T.row(r), 0, a)
                    act_rows.append(eng.sub(row, eng.rotate(sig, -r)))
                act = equalize_levels(EncMatrix.from_rows(eng, act_rows, a))
                qres = qr_t(fed, act, book, cursor, "eigen")
                tr = mul_m5(_ensure_matrix(fed, qres.q, 4),
                            _ensure_matrix(fed, qres.r, 4))
                new_rows = []
                for r in range(eta):
                    if r < a:
                        new_rows.append(eng.add(tr.row(r), eng.rotate(sig, -r)))
                    else:
                        new_rows.append(T.row(r))
                T = equalize_levels(EncMatrix.from_rows(eng, new_rows, eta))
                emb_rows = [qres.q.row(r) for r in range(a)] + \
                    _identity_rows(eng, eta)[a:]
                emb = equalize_levels(EncMatrix.from_rows(eng, emb_rows, eta))
                Q = mul_m5(_ensure_matrix(fed, emb, 4), _ensure_matrix(fed, Q, 4))
            T = _ensure_matrix(fed, T, 1)
            l_parts.append(eng.mask_slot(T.row(a - 1), a - 1))
        l_parts.append(eng.mask_slot(_ensure_matrix(fed, T, 1).row(0), 0))
        acc = l_parts[-1]  # eigenvalue of index 0
        for idx, part in enumerate(reversed(l_parts[:-1])):
            acc = eng.add(acc, eng.rotate(part, -(idx + 1)))
        l = eng.maintain(acc)
    return EigResult(q=Q, l=l)
