"""Row-wise encrypted matrices and the packed multiplication methods.

A matrix is encoded one row per ciphertext sequence: row i, block k holds
columns [k*t, (k+1)*t).  Five multiplication routines cover the shapes the
workflow needs:

  m1  dot-product method: one masked slot-sum per output element; the only
      route when both operands are encrypted and the right operand's columns
      are available as encrypted rows (e.g. multiplying by a transpose).
  m2  element-duplication method: broadcast each left element across a
      cleartext right row.
  m3  diagonal method with baby-step/giant-step rotations on the left rows;
      the right operand is pre-rotated (free for cleartext, precomputed from
      cleartext factors when encrypted).
  m4  duplicated-vector method for products against a matrix whose rows
      (case 1) or columns (case 2) all equal one encrypted vector.
  m5  single-ciphertext method for tiny square encrypted-encrypted products.

Cost model: ``cost_of`` evaluates the published per-method operation counts;
``executed_cost_m3`` gives the exact rotation schedule of this
implementation, which refines the published m3 line (the published count
idealizes arbitrary-shift rotations that a power-of-two key set cannot
realize at that exact count; multiplication counts match exactly).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cipher import CapacityError, Ciphertext, TraceEngine, popcount, pow2_ceil
from .fedsim import RuntimeProfile

PlainMatrix = np.ndarray  # row-major float64, shape (rows, cols)


def _as_plain(N) -> np.ndarray:
    arr = np.asarray(N, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix entries must be finite")
    return arr


class EncMatrix:
    """An a x b matrix stored as a rows of ceil(b/t) ciphertext blocks."""

    def __init__(self, eng: TraceEngine, rows: int, cols: int,
                 data: list[list[Ciphertext]]) -> None:
        self.eng = eng
        self.rows = rows
        self.cols = cols
        self.data = data

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_plain(cls, eng: TraceEngine, values) -> "EncMatrix":
        arr = _as_plain(values)
        t = eng.params.slot_count
        a, b = arr.shape
        data = []
        for i in range(a):
            row = [eng.encrypt(arr[i, k * t: (k + 1) * t]) for k in range(_blocks(b, t))]
            data.append(row)
        return cls(eng, a, b, data)

    @classmethod
    def from_rows(cls, eng: TraceEngine, cts: list[Ciphertext], cols: int) -> "EncMatrix":
        return cls(eng, len(cts), cols, [[ct] for ct in cts])

    @property
    def block_count(self) -> int:
        return _blocks(self.cols, self.eng.params.slot_count)

    def row(self, i: int) -> Ciphertext:
        if self.block_count != 1:
            raise CapacityError("row() is only defined for single-block rows")
        return self.data[i][0]

    def with_row(self, i: int, ct: Ciphertext) -> None:
        self.data[i] = [ct]

    def copy(self) -> "EncMatrix":
        return EncMatrix(self.eng, self.rows, self.cols, [list(r) for r in self.data])

    # -- elementwise ----------------------------------------------------------

    def add(self, other: "EncMatrix") -> "EncMatrix":
        self._check_shape(other)
        data = [[self.eng.add(x, y) for x, y in zip(r1, r2)]
                for r1, r2 in zip(self.data, other.data)]
        return EncMatrix(self.eng, self.rows, self.cols, data)

    def sub(self, other: "EncMatrix") -> "EncMatrix":
        self._check_shape(other)
        data = [[self.eng.add(x, self.eng.neg(y)) for x, y in zip(r1, r2)]
                for r1, r2 in zip(self.data, other.data)]
        return EncMatrix(self.eng, self.rows, self.cols, data)

    def maintain(self) -> "EncMatrix":
        data = [[self.eng.maintain(ct) for ct in row] for row in self.data]
        return EncMatrix(self.eng, self.rows, self.cols, data)

    def _check_shape(self, other: "EncMatrix") -> None:
        if (self.rows, self.cols) != (other.rows, other.cols):
            raise ValueError(f"shape mismatch {(self.rows, self.cols)} vs "
                             f"{(other.rows, other.cols)}")

    # -- debug ------------------------------------------------------------------

    def reveal(self) -> np.ndarray:
        """Test-only cleartext view."""
        t = self.eng.params.slot_count
        out = np.zeros((self.rows, self.cols))
        for i, row in enumerate(self.data):
            for k, ct in enumerate(row):
                lo = k * t
                hi = min(self.cols, lo + t)
                out[i, lo:hi] = self.eng.debug_decrypt(ct)[: hi - lo]
        return out

    def min_level(self) -> int:
        return min(ct.level for row in self.data for ct in row)


def _blocks(n: int, t: int) -> int:
    return max(1, -(-n // t))


def equalize_levels(M: EncMatrix) -> EncMatrix:
    """Free modulus drop aligning every block to the lowest level present."""
    lvl = M.min_level()
    data = [[Ciphertext(ct.slots, lvl, ct.pending_rescale, ct.pending_relin,
                        ct.key_owner, ct.provenance) for ct in row]
            for row in M.data]
    return EncMatrix(M.eng, M.rows, M.cols, data)


# ---------------------------------------------------------------------------
# m1: dot-product method
# ---------------------------------------------------------------------------

def mul_m1(M: EncMatrix, N) -> EncMatrix:
    """R = M x N via one masked slot-sum per output element.

    ``N`` is a cleartext (b x c) matrix, or an EncMatrix holding the columns
    of the right operand as its rows (c rows of length b), which is how a
    product against a transpose is formed without re-encoding.
    """
    eng = M.eng
    t = eng.params.slot_count
    a, b = M.rows, M.cols
    if isinstance(N, EncMatrix):
        if N.cols != b:
            raise ValueError("inner dimensions disagree")
        c = N.rows
        col_block = None
    else:
        N = _as_plain(N)
        if N.shape[0] != b:
            raise ValueError("inner dimensions disagree")
        c = N.shape[1]
        col_block = lambda j, k: N[k * t: (k + 1) * t, j]  # noqa: E731
    nblocks = _blocks(b, t)
    out_blocks = _blocks(c, t)
    rows_out: list[list[Ciphertext]] = []
    for i in range(a):
        acc: list[Ciphertext | None] = [None] * out_blocks
        for j in range(c):
            parts = []
            for k in range(nblocks):
                if isinstance(N, EncMatrix):
                    prod = eng.mul_cipher(M.data[i][k], N.data[j][k])
                else:
                    prod = eng.mul_plain(M.data[i][k], col_block(j, k))
                parts.append(eng.rotate_sum(prod, t))
            total = parts[0]
            for p in parts[1:]:
                total = eng.add(total, p)
            total = eng.maintain(total)
            mask = np.zeros(t)
            mask[j % t] = 1.0
            slot_val = eng.mul_plain(total, mask)  # every slot holds the sum
            blk = j // t
            acc[blk] = slot_val if acc[blk] is None else eng.add(acc[blk], slot_val)
        row = [eng.maintain(ct) if ct is not None else eng.encrypt([])
               for ct in acc]
        rows_out.append(row)
    return equalize_levels(EncMatrix(eng, a, c, rows_out))


# ---------------------------------------------------------------------------
# m2: element-duplication method
# ---------------------------------------------------------------------------

def mul_m2(M: EncMatrix, N) -> EncMatrix:
    """R = M x N by duplicating each element of M across a cleartext row."""
    eng = M.eng
    t = eng.params.slot_count
    N = _as_plain(N)
    a, b = M.rows, M.cols
    if N.shape[0] != b:
        raise ValueError("inner dimensions disagree")
    c = N.shape[1]
    if c > t:
        raise CapacityError("m2 requires the output row to fit one ciphertext")
    width = pow2_ceil(min(c, t))
    rows_out = []
    for i in range(a):
        acc: Ciphertext | None = None
        for j in range(b):
            elem = eng.mask_slot(M.data[i][j // t], j % t)  # extraction overhead
            spread = eng.dup(elem, width)
            term = eng.mul_plain(spread, N[j, :])
            acc = term if acc is None else eng.add(acc, term)
        rows_out.append([eng.maintain(acc)])
    return equalize_levels(EncMatrix(eng, a, c, rows_out))


# ---------------------------------------------------------------------------
# m3: diagonal (baby-step giant-step) method
# ---------------------------------------------------------------------------

def m3_baby_size(b: int) -> int:
    """Power-of-two baby-step count near sqrt(b)."""
    return 1 << ((int(math.ceil(math.log2(b))) + 1) // 2) if b > 1 else 1


def _m3_geometry(b: int, c: int, t: int) -> tuple[int, int, int]:
    """(baby size B, giant count G, replication doublings)."""
    B = m3_baby_size(b)
    G = -(-b // B)
    if b == t:
        return B, G, 0
    window = (G - 1) * B + (B - 1) + c
    k = 0
    length = b
    while length < window:
        length *= 2
        k += 1
    if length > t:
        raise CapacityError("m3 replication window exceeds ciphertext capacity")
    return B, G, k


def m3_plain_rows(N, t: int) -> np.ndarray:
    """Pre-rotated, giant-positioned cleartext rows for the diagonal method.

    Row d holds diag entries N[(d+col) mod b, col] placed at slot (d//B)*B+col.
    A cleartext pre-transform, so it is free; the same layout is what an
    encrypted right operand must be supplied in (see ``m3_rows_from_gram``).
    """
    N = _as_plain(N)
    b, c = N.shape
    B = m3_baby_size(b)
    cols = np.arange(c)
    rows = np.zeros((b, t))
    for d in range(b):
        base = np.zeros(t)
        base[:c] = N[(d + cols) % b, cols]
        rows[d] = np.roll(base, (d // B) * B)
    return rows


def m3_rows_from_gram(factor, t: int) -> np.ndarray:
    """Diagonal-method rows of factor^T @ factor, computed from the cleartext
    factor so the Gram matrix itself never needs re-encoding transforms."""
    A = _as_plain(factor)
    m = A.shape[1]
    B = m3_baby_size(m)
    rows = np.zeros((m, t))
    for d in range(m):
        diag = np.sum(np.roll(A, -d, axis=1) * A, axis=0)  # Gram[(d+c) mod m, c]
        base = np.zeros(t)
        base[:m] = diag
        rows[d] = np.roll(base, (d // B) * B)
    return rows


def mul_m3(M: EncMatrix, N=None, *, positioned_rows=None, enc_rows: list[Ciphertext] | None = None,
           out_cols: int | None = None) -> EncMatrix:
    """R = M x N with baby-step/giant-step rotations on M's rows.

    Exactly one right-operand form must be given: a cleartext matrix ``N``,
    pre-positioned cleartext diagonal rows, or pre-positioned encrypted rows
    (with ``out_cols``).
    """
    eng = M.eng
    t = eng.params.slot_count
    a, b = M.rows, M.cols
    if M.block_count != 1:
        raise CapacityError("m3 requires single-block left rows")
    if N is not None:
        N = _as_plain(N)
        if N.shape[0] != b:
            raise ValueError("inner dimensions disagree")
        c = N.shape[1]
        positioned_rows = m3_plain_rows(N, t)
    elif positioned_rows is not None:
        if out_cols is None:
            raise ValueError("out_cols required with positioned rows")
        c = out_cols
    elif enc_rows is not None:
        if out_cols is None:
            raise ValueError("out_cols required with encrypted rows")
        if len(enc_rows) != b:
            raise ValueError("inner dimensions disagree")
        c = out_cols
    else:
        raise ValueError("no right operand given")
    if c > t:
        raise CapacityError("m3 requires the output row to fit one ciphertext")
    B, G, k_rep = _m3_geometry(b, c, t)
    rows_out = []
    for i in range(a):
        base = M.data[i][0]
        rep = base
        length = b
        for _ in range(k_rep):
            rep = eng.add(rep, eng.rotate(rep, -length))
            length *= 2
        babies = [rep]
        for _ in range(1, B):
            babies.append(eng.rotate(babies[-1], 1))
        partials: list[Ciphertext | None] = [None] * G
        for d in range(b):
            y, g = d % B, d // B
            if enc_rows is not None:
                term = eng.mul_cipher(babies[y], enc_rows[d])
            else:
                term = eng.mul_plain(babies[y], positioned_rows[d])
            partials[g] = term if partials[g] is None else eng.add(partials[g], term)
        acc = partials[G - 1]
        for g in range(G - 2, -1, -1):
            acc = eng.add(partials[g], eng.rotate(acc, B))
        rows_out.append([eng.maintain(acc)])
    return equalize_levels(EncMatrix(eng, a, c, rows_out))


def executed_cost_m3(a: int, b: int, c: int, t: int) -> tuple[int, int]:
    """(mults, rotations) this implementation executes for an m3 product."""
    B, G, k_rep = _m3_geometry(b, c, t)
    rots = a * (k_rep * popcount(b) + (B - 1) + (G - 1) * popcount(B))
    return a * b, rots


# ---------------------------------------------------------------------------
# m4: duplicated-vector method
# ---------------------------------------------------------------------------

def mul_m4(M: EncMatrix, mu: Ciphertext, case: int) -> EncMatrix:
    """R = M x Gamma for Gamma of duplicated rows (case 1: Gamma = 1 mu^T) or
    duplicated columns (case 2: Gamma = mu 1^T); Gamma is never materialized.

    Case 1: R[i,:] = (sum of row i)  * mu      (row-sum spread, then one mult)
    Case 2: R[i,:] = (row i dot mu) * ones     (one mult, then spread)
    """
    eng = M.eng
    t = eng.params.slot_count
    a, b = M.rows, M.cols
    if M.block_count != 1:
        raise CapacityError("m4 requires single-block rows")
    if case not in (1, 2):
        raise ValueError("case must be 1 or 2")
    width = pow2_ceil(min(b, t))
    rows_out = []
    for i in range(a):
        if case == 1:
            summed = eng.rotate_sum(M.data[i][0], width)
            head = eng.mask_slot(summed, 0)          # extraction overhead
            spread = eng.dup(head, width)
            out = eng.mul_cipher(spread, mu)
            out = eng.maintain(out)
        else:
            prod = eng.maintain(eng.mul_cipher(M.data[i][0], mu))
            summed = eng.rotate_sum(prod, width)
            head = eng.mask_slot(summed, 0)          # extraction overhead
            out = eng.dup(head, width)
            if width > b:
                out = eng.mask_range(out, 0, b)      # clear duplicated tail
        rows_out.append([out])
    return equalize_levels(EncMatrix(eng, a, b, rows_out))


# ---------------------------------------------------------------------------
# m5: single-ciphertext square product
# ---------------------------------------------------------------------------

def _m5_sigma(eng: TraceEngine, flat: Ciphertext, s: int) -> Ciphertext:
    """sigma(A)[i,j] = A[i, (i+j) mod s] on the flat row-major encoding."""
    t = eng.params.slot_count
    acc = None
    for i in range(s):
        rowpos = np.arange(i * s, (i + 1) * s)
        j = rowpos - i * s
        nowrap = j < s - i
        m1 = np.zeros(t)
        m1[rowpos[nowrap]] = 1.0
        term = eng.mul_plain(eng.rotate(flat, i) if i else flat, m1)
        acc = term if acc is None else eng.add(acc, term)
        if i:
            m2 = np.zeros(t)
            m2[rowpos[~nowrap]] = 1.0
            term = eng.mul_plain(eng.rotate(flat, i - s), m2)
            acc = eng.add(acc, term)
    return eng.maintain(acc)


def _m5_tau(eng: TraceEngine, flat: Ciphertext, s: int) -> Ciphertext:
    """tau(B)[i,j] = B[(i+j) mod s, j] on the flat encoding."""
    t = eng.params.slot_count
    acc = None
    for j in range(s):
        colpos = np.arange(s) * s + j
        i = np.arange(s)
        nowrap = i < s - j
        m1 = np.zeros(t)
        m1[colpos[nowrap]] = 1.0
        term = eng.mul_plain(eng.rotate(flat, j * s) if j else flat, m1)
        acc = term if acc is None else eng.add(acc, term)
        if j:
            m2 = np.zeros(t)
            m2[colpos[~nowrap]] = 1.0
            term = eng.mul_plain(eng.rotate(flat, (j - s) * s), m2)
            acc = eng.add(acc, term)
    return eng.maintain(acc)


def _m5_colshift(eng: TraceEngine, x: Ciphertext, s: int) -> Ciphertext:
    """One cyclic column shift within each row of the flat encoding."""
    t = eng.params.slot_count
    keep = np.zeros(t)
    wrap = np.zeros(t)
    for i in range(s):
        keep[i * s: i * s + s - 1] = 1.0
        wrap[i * s + s - 1] = 1.0
    a = eng.mul_plain(eng.rotate(x, 1), keep)
    b = eng.mul_plain(eng.rotate(x, 1 - s), wrap)
    return eng.maintain(eng.add(a, b))


def _mask_main(eng: TraceEngine, ct: Ciphertext, start: int, stop: int) -> Ciphertext:
    mask = np.zeros(eng.params.slot_count)
    mask[start:stop] = 1.0
    return eng.maintain(eng.mul_plain(ct, mask))


def pack_square(M: EncMatrix) -> Ciphertext:
    """Row-encoded s x s matrix -> flat single ciphertext (row-major).
    One multiplication and one rotation per row."""
    eng = M.eng
    s = M.rows
    acc = None
    for i in range(s):
        row = _mask_main(eng, M.data[i][0], 0, s)
        row = eng.rotate(row, -i * s) if i else row
        acc = row if acc is None else eng.add(acc, row)
    return acc


def unpack_square(eng: TraceEngine, flat: Ciphertext, s: int) -> EncMatrix:
    """Flat single ciphertext -> row-encoded s x s matrix.
    One multiplication and one rotation per row."""
    rows = []
    for i in range(s):
        row = _mask_main(eng, flat, i * s, (i + 1) * s)
        rows.append(eng.rotate(row, i * s) if i else row)
    return equalize_levels(EncMatrix.from_rows(eng, rows, s))


def mul_m5(M: EncMatrix, N: EncMatrix) -> EncMatrix:
    """Encrypted s x s times encrypted s x s via the single-ciphertext
    diagonal technique, including the row-encoding conversions."""
    eng = M.eng
    s = M.rows
    if not (M.rows == M.cols == N.rows == N.cols):
        raise ValueError("m5 needs square operands of one size")
    if s * s > eng.params.slot_count:
        raise CapacityError("matrix does not fit a single ciphertext")
    a_flat = pack_square(M)
    b_flat = pack_square(N)
    sig = _m5_sigma(eng, a_flat, s)
    tau = _m5_tau(eng, b_flat, s)
    # replicate tau payload so vertical shifts are single rotations
    if 2 * s * s <= eng.params.slot_count:
        tau_rep = eng.add(tau, eng.rotate(tau, -s * s))
    elif s * s == eng.params.slot_count:
        tau_rep = tau  # rotations are already matrix-cyclic
    else:
        raise CapacityError("m5 vertical shifts need room for a payload replica")
    acc = eng.mul_cipher(sig, tau)
    cur = sig
    for k in range(1, s):
        cur = _m5_colshift(eng, cur, s)
        shifted_tau = eng.rotate(tau_rep, k * s)
        acc = eng.add(acc, eng.mul_cipher(cur, shifted_tau))
    prod = eng.maintain(acc)
    return unpack_square(eng, prod, s)


# ---------------------------------------------------------------------------
# cost model and selector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    mults_cc: int
    mults_pc: int
    rots: int
    weighted: float

    @property
    def mults(self) -> int:
        return self.mults_cc + self.mults_pc


METHODS = ("m1", "m2", "m3", "m4", "m5")


def cost_of(method: str, a: int, b: int, c: int, profile: RuntimeProfile,
            t: int = 2 ** 13, rhs_encrypted: bool = False) -> CostEstimate:
    """Published operation counts for one method at the given dimensions."""
    if min(a, b, c) < 1:
        raise ValueError("dimensions must be positive")
    nb = -(-b // t)
    if method == "m1":
        prod = nb * a * c
        mask = a * c
        rots = a * c * nb * int(math.log2(t))
        cc, pc = (prod, mask) if rhs_encrypted else (0, prod + mask)
    elif method == "m2":
        prod = nb * a * b
        rots = a * b * math.ceil(math.log2(min(c, t))) if min(c, t) > 1 else 0
        cc, pc = (prod, 0) if rhs_encrypted else (0, prod)
    elif method == "m3":
        prod = nb * a * b
        rots = nb * (-(-c // b) + 2 * a * math.ceil(math.sqrt(b)))
        cc, pc = (prod, 0) if rhs_encrypted else (0, prod)
    elif method == "m4":
        cc, pc = nb * a, 0
        rots = nb * 2 * a * math.ceil(math.log2(min(b, t)))
    elif method == "m5":
        s = a
        cc, pc = 5 * s, 0
        rots = 3 * s + 5 * math.ceil(math.sqrt(s))
    else:
        raise ValueError(f"unknown method {method!r}")
    weighted = cc * profile.mult_cc + pc * profile.mult_pc + rots * profile.rotate
    return CostEstimate(cc, pc, rots, weighted)


#: which methods can run for a given right-operand representation
_APPLICABLE = {
    "plain": ("m1", "m2", "m3"),
    "enc_rows": ("m1",),
    "enc_diag": ("m3",),
}


def select_best(a: int, b: int, c: int, operand_kinds, profile: RuntimeProfile,
                t: int = 2 ** 13) -> str:
    """Lowest weighted-cost applicable method; ties break to the lowest
    method index."""
    if isinstance(operand_kinds, str):
        operand_kinds = (operand_kinds,)
    candidates: list[str] = []
    for kind in operand_kinds:
        if kind not in _APPLICABLE:
            raise ValueError(f"unknown operand kind {kind!r}")
        candidates.extend(_APPLICABLE[kind])
    candidates = sorted(set(candidates))
    if not candidates:
        raise ValueError("no applicable method")
    enc = not (len(operand_kinds) == 1 and operand_kinds[0] == "plain")
    best = min(candidates,
               key=lambda mth: (cost_of(mth, a, b, c, profile, t, rhs_encrypted=enc).weighted,
                                mth))
    return best
