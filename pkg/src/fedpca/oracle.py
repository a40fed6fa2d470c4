"""Cleartext ground truth.

``rpca_cleartext`` is the exact mirror of the federated pipeline: identical
sketch, iteration structure, reflector recursion, shifts, and deflation, but
with exact scalar nonlinearities.  It consumes the same nonlinearity-site
sequence as the encrypted path, either recording site inputs (building the
interval book) or following an existing book's public skip rules, so the two
paths stay on one trajectory down to floating-point noise.

Independent references that do not share the pipeline's structure:
``eig_bruteforce`` (cyclic Jacobi sweeps) and plain SVD via numpy, plus the
meta-analysis baseline that merges per-party truncated SVDs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approx import RangeRecorder, SiteCursor, SpecBook


def count_sketch(rho: int, n: int, seed: int) -> np.ndarray:
    """rho x n sketch: each column has one +-1 entry at a random row."""
    rng = np.random.default_rng(seed)
    S = np.zeros((rho, n))
    rows = rng.integers(0, rho, n)
    signs = rng.choice(np.array([-1.0, 1.0]), n)
    S[rows, np.arange(n)] = signs
    return S


# ---------------------------------------------------------------------------
# nonlinearity policies
# ---------------------------------------------------------------------------

class RecordingPolicy:
    """Exact evaluation while recording per-site inputs; degeneracy decided
    online by the same rule the resulting book will encode."""

    def __init__(self, recorder: RangeRecorder | None = None) -> None:
        self.recorder = recorder if recorder is not None else RangeRecorder()
        self.cursor = SiteCursor()

    def decide(self, phase: str, fn: str, value: float) -> bool:
        site = self.cursor.take(phase, fn)
        return self.recorder.observe(site, phase, fn, value)

    def book(self, margin: float = 2.0, degree: int = 31,
             grouped: bool = False) -> SpecBook:
        if grouped:
            return SpecBook.from_records_grouped(self.recorder.records, margin, degree)
        return SpecBook.from_records(self.recorder.records, margin, degree)


class BookPolicy:
    """Exact evaluation following an existing book's public skip classes."""

    def __init__(self, book: SpecBook) -> None:
        self.book = book
        self.cursor = SiteCursor()

    def decide(self, phase: str, fn: str, value: float) -> bool:
        site = self.cursor.take(phase, fn)
        return self.book.resolve(site, phase, fn).skip


# ---------------------------------------------------------------------------
# mirrored reflector / QR / eigen
# ---------------------------------------------------------------------------

def householder_clear(v: np.ndarray, policy, phase: str) -> np.ndarray:
    """Mirror of the encrypted reflector, exact nonlinearities."""
    n2 = float(v @ v)
    if policy.decide(phase, "sqrt", n2):
        policy.decide(phase, "sign", 0.0)
        policy.decide(phase, "inv_sqrt", 0.0)
        return np.zeros_like(v)
    nrm = float(np.sqrt(n2))
    v0 = float(v[0])
    if policy.decide(phase, "sign", v0 * v0):
        delta = nrm
    else:
        delta = (v0 / np.sqrt(v0 * v0)) * nrm
    u = v.copy()
    u[0] = v0 + delta
    k = u[0] ** 2 + (n2 - v0 * v0)
    if policy.decide(phase, "inv_sqrt", float(k)):
        return np.zeros_like(v)
    return u / np.sqrt(k)


def qr_t_clear(V: np.ndarray, policy, phase: str) -> tuple[np.ndarray, np.ndarray]:
    """Mirror of the transposed QR: V = R x Q, R lower-triangular."""
    V = np.asarray(V, dtype=np.float64)
    d, h = V.shape
    work = V.copy()
    refls = np.zeros((d, h))
    R = np.zeros((d, d))
    for i in range(d):
        hl = h - i
        piv = work[0].copy()
        piv[hl:] = 0.0
        refl = np.zeros(h)
        refl[:hl] = householder_clear(piv[:hl], policy, phase)
        refls[i] = refl
        dots = work @ refl
        work = work - 2.0 * np.outer(dots, refl)
        R[i, :] = np.roll(work[0], i)[:d]
        work = np.array([np.roll(work[j + 1], -1) for j in range(d - i - 1)]
                        + [np.zeros(h)] * (i + 1))
    Q = np.hstack([np.eye(d), np.zeros((d, h - d))])
    for i in reversed(range(d)):
        hi = np.roll(refls[i], i)
        Q = Q - 2.0 * np.outer(Q @ hi, hi)
    return R, Q


def eigen_clear(Z: np.ndarray, w: int, policy, tridiagonalize: bool = False
                ) -> tuple[np.ndarray, np.ndarray]:
    """Mirror of the encrypted eigendecomposition (phase 'eigen')."""
    Z = np.asarray(Z, dtype=np.float64)
    eta = Z.shape[0]
    T = Z.copy()
    Q = np.eye(eta)
    if tridiagonalize:
        for i in range(eta - 2):
            v = householder_clear(T[i, i + 1:].copy(), policy, "eigen")
            P = np.eye(eta)
            P[i + 1:, i + 1:] -= 2.0 * np.outer(v, v)
            T = P @ T @ P
            Q = P @ Q
    l = np.zeros(eta)
    for a in range(eta, 1, -1):
        for _ in range(w):
            sigma = T[a - 1, a - 1]
            act = T[:a, :a] - sigma * np.eye(a)
            Rq, Qq = qr_t_clear(act, policy, "eigen")
            T[:a, :a] = Qq @ Rq + sigma * np.eye(a)
            emb = np.eye(eta)
            emb[:a, :a] = Qq
            Q = emb @ Q
        l[a - 1] = T[a - 1, a - 1]
    l[0] = T[0, 0]
    return l, Q


# ---------------------------------------------------------------------------
# full mirrored workflow
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    pcs: np.ndarray            # psi x m
    projections: np.ndarray    # n x psi
    sketch: np.ndarray
    mean: np.ndarray
    basis: np.ndarray          # rho x m subspace after power iterations
    reduced: np.ndarray        # rho x rho
    eigenvalues: np.ndarray
    policy: object = field(repr=False, default=None)


def rpca_cleartext(A: np.ndarray, *, num_pcs: int, oversampling: int,
                   power_iterations: int, eigen_iterations: int,
                   sketch_seed: int = 0, policy=None, qr_variant: str = "qr",
                   tridiagonalize: bool = False) -> OracleResult:
    """Randomized PCA, mirroring the federated pipeline step for step."""
    A = np.asarray(A, dtype=np.float64)
    n, m = A.shape
    rho = num_pcs + oversampling
    if rho > min(n, m):
        raise ValueError("component count exceeds data dimensions")
    if policy is None:
        policy = RecordingPolicy()
    sketch = count_sketch(rho, n, sketch_seed)
    o = A.mean(axis=0)
    P = sketch @ A
    cov = A.T @ A

    def centered_product(X: np.ndarray) -> np.ndarray:
        return X @ cov - n * np.outer(X @ o, o)

    for it in range(power_iterations):
        phase = "power.first" if it == 0 else "power.rest"
        if qr_variant == "dqr":
            Y = P @ A.T - np.outer(P @ o, np.ones(n))
            _, Qy = qr_t_clear(Y, policy, phase)
            P = Qy @ A - np.outer(Qy @ np.ones(n), o)
        else:
            _, P = qr_t_clear(centered_product(P), policy, phase)
    Z = centered_product(P) @ P.T
    l, V = eigen_clear(Z, eigen_iterations, policy, tridiagonalize)
    B = V[:num_pcs] @ P
    _, W = qr_t_clear(centered_product(B), policy, "recon")
    proj = (A - o) @ W.T
    return OracleResult(pcs=W, projections=proj, sketch=sketch, mean=o,
                        basis=P, reduced=Z, eigenvalues=l, policy=policy)


# ---------------------------------------------------------------------------
# independent references
# ---------------------------------------------------------------------------

def eig_bruteforce(Z: np.ndarray, sweeps: int = 30, tol: float = 1e-14
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns eigenvalues (descending) and eigenvectors as rows.
    """
    A = np.asarray(Z, dtype=np.float64).copy()
    n = A.shape[0]
    if n > 64:
        raise ValueError("brute-force solver is intended for small matrices")
    V = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off < tol * max(1.0, np.abs(np.diag(A)).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = 0.5 * np.arctan2(2.0 * A[p, q], A[q, q] - A[p, p])
                c, s = np.cos(theta), np.sin(theta)
                J = np.eye(n)
                J[p, p] = c
                J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    vals = np.diag(A).copy()
    order = np.argsort(vals)[::-1]
    return vals[order], V[:, order].T


def meta_analysis(shards: list[np.ndarray], num_pcs: int,
                  local_rank: int | None = None) -> np.ndarray:
    """Merge per-party truncated SVDs by a second truncated SVD.

    Each party decomposes its locally centered block; singular-value-scaled
    right vectors are stacked and reduced again.  Approximate by nature and
    sensitive to distribution differences between parties.
    """
    if local_rank is None:
        local_rank = min(2 * num_pcs, min(min(s.shape) for s in shards))
    stacked = []
    for X in shards:
        Xc = X - X.mean(axis=0)
        k = min(local_rank, min(Xc.shape))
        _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
        stacked.append(sv[:k, None] * vt[:k])
    merged = np.vstack(stacked)
    _, _, vt = np.linalg.svd(merged, full_matrices=False)
    return vt[:num_pcs]


# ---------------------------------------------------------------------------
# comparison metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    mse: float
    pearson_r2: float
    per_pc_r2: tuple[float, ...]
    principal_angles: tuple[float, ...]


def compare(W_a: np.ndarray, W_b: np.ndarray) -> Metrics:
    """Align rows of W_b to W_a (greedy by |correlation|, sign-normalized),
    then report MSE, per-PC and aggregate squared Pearson correlation, and
    principal angles between the row spaces."""
    A = np.asarray(W_a, dtype=np.float64)
    B = np.asarray(W_b, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    k = A.shape[0]
    remaining = list(range(k))
    aligned = np.zeros_like(B)
    per_r2 = []
    for i in range(k):
        cors = []
        for j in remaining:
            denom = np.linalg.norm(A[i]) * np.linalg.norm(B[j])
            cors.append((A[i] @ B[j]) / denom if denom > 0 else 0.0)
        pick = int(np.argmax([abs(c) for c in cors]))
        j = remaining.pop(pick)
        c = cors[pick]
        aligned[i] = B[j] * (1.0 if c >= 0 else -1.0)
        per_r2.append(float(c * c))
    mse = float(np.mean((A - aligned) ** 2))
    qa, _ = np.linalg.qr(A.T)
    qb, _ = np.linalg.qr(B.T)
    sv = np.clip(np.linalg.svd(qa.T @ qb, compute_uv=False), -1.0, 1.0)
    angles = tuple(float(x) for x in np.arccos(sv))
    return Metrics(mse=mse, pearson_r2=float(np.mean(per_r2)),
                   per_pc_r2=tuple(per_r2), principal_angles=angles)
