"""Transparent tracing ciphertext backend.

Ciphertexts hold cleartext slot values (float64) but every operation enforces
the cost semantics of a levelled, packed homomorphic scheme: SIMD slot
arithmetic, multiplicative level budget, deferred rescale/relinearize
maintenance, and power-of-two rotation decomposition.  Every operation is
recorded in one or more cost ledgers so protocol-level accounting can be
checked against closed-form cost models.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np


class CipherError(Exception):
    """Base error for backend misuse."""


class CapacityError(CipherError):
    """Payload does not fit in the available slots."""


class LevelExhaustedError(CipherError):
    """An operation would drive the level budget below zero."""


class ProtocolOrderError(CipherError):
    """Operation invoked in an order the scheme does not permit."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def pow2_ceil(n: int) -> int:
    """Smallest power of two >= n (n >= 1)."""
    return 1 << (max(1, n) - 1).bit_length()


def popcount(n: int) -> int:
    return bin(abs(n)).count("1")


@dataclass(frozen=True)
class CryptoParams:
    """Public scheme parameters of the simulated cryptosystem.

    ring_degree      polynomial ring dimension (power of two)
    level_budget     multiplicative levels available between refreshes
    scale_bits       informational plaintext-scale exponent tag
    noise_std        additive perturbation applied at maintenance points to
                     emulate approximate arithmetic (0.0 = exact)
    ciphertext_bytes serialized ciphertext size used for traffic accounting
    """

    ring_degree: int = 2 ** 14
    level_budget: int = 7
    scale_bits: int = 40
    noise_std: float = 0.0
    ciphertext_bytes: float = 2.5e6

    def __post_init__(self) -> None:
        if not _is_pow2(self.ring_degree):
            raise ValueError(f"ring_degree must be a power of two, got {self.ring_degree}")
        if self.level_budget < 1:
            raise ValueError("level_budget must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2


_COUNTERS = (
    "mults_cc",
    "mults_pc",
    "rotations",
    "rescales",
    "relinearizations",
    "bootstraps",
    "ciphertexts_sent",
    "ciphertexts_received",
    "bytes_sent",
    "extraction_mults_pc",
    "extraction_rotations",
    "debug_reads",
)


@dataclass
class CostLedger:
    """Monotone per-party operation counters.

    ``extraction_*`` fields hold slot-extraction overhead (masking an element
    into slot 0 before a duplication) that the matrix-method cost lines treat
    as free pre-processing; they are tracked separately so method-level
    deltas can be compared against those cost lines exactly.
    ``ciphertexts_sent`` may be fractional: interactive sub-protocols are
    charged by their amortized per-invocation traffic.
    """

    mults_cc: int = 0
    mults_pc: int = 0
    rotations: int = 0
    rescales: int = 0
    relinearizations: int = 0
    bootstraps: int = 0
    ciphertexts_sent: float = 0.0
    ciphertexts_received: float = 0.0
    bytes_sent: float = 0.0
    extraction_mults_pc: int = 0
    extraction_rotations: int = 0
    debug_reads: int = 0
    estimated_seconds: float = 0.0

    def send(self, ciphertexts: float, bytes_per_ciphertext: float) -> None:
        self.ciphertexts_sent += ciphertexts
        self.bytes_sent += ciphertexts * bytes_per_ciphertext

    def receive(self, ciphertexts: float) -> None:
        self.ciphertexts_received += ciphertexts

    def snapshot(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def delta(self, before: dict) -> dict:
        return {k: getattr(self, k) - v for k, v in before.items()}

    def merge(self, other: "CostLedger") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    @property
    def mults(self) -> int:
        return self.mults_cc + self.mults_pc

    def as_dict(self) -> dict:
        return self.snapshot()


@dataclass(frozen=True)
class Ciphertext:
    """Immutable packed ciphertext: slot payload plus maintenance state.

    ``key_owner`` is None for the collective key; an integer marks a
    ciphertext re-encrypted to a single party.  ``provenance`` is an opaque
    tag for ledger attribution and bootstrap-placement assertions.
    """

    slots: np.ndarray
    level: int
    pending_rescale: bool = False
    pending_relin: bool = False
    key_owner: int | None = None
    provenance: str = ""

    def __post_init__(self) -> None:
        if self.level < 0:
            raise LevelExhaustedError("ciphertext level below zero")

    @property
    def pending(self) -> bool:
        return self.pending_rescale or self.pending_relin


class TraceEngine:
    """Executes slot operations while charging all attached ledgers.

    One engine is shared by every simulated party; the federation swaps the
    set of charged ledgers depending on whether an operation is executed by
    a single party (local phase) or redundantly by everyone (on broadcast
    data, the usual mode after an aggregation).
    """

    def __init__(
        self,
        params: CryptoParams,
        ledger: CostLedger | None = None,
        noise_seed: int = 0,
        allow_debug: bool = True,
    ) -> None:
        self.params = params
        self._ledgers: list[CostLedger] = [ledger if ledger is not None else CostLedger()]
        self._rng = np.random.default_rng(noise_seed)
        self.allow_debug = allow_debug
        self._extraction_depth = 0

    # -- ledger plumbing ----------------------------------------------------

    @property
    def ledger(self) -> CostLedger:
        return self._ledgers[0]

    @property
    def ledgers(self) -> list[CostLedger]:
        return list(self._ledgers)

    def set_ledgers(self, ledgers: Sequence[CostLedger]) -> None:
        """Replace the default charge set (used by the federation runtime)."""
        if not ledgers:
            raise ValueError("at least one ledger required")
        self._ledgers = list(ledgers)

    @contextlib.contextmanager
    def charge_to(self, ledgers: Sequence[CostLedger]):
        """Temporarily redirect all cost charges to ``ledgers``."""
        if not ledgers:
            raise ValueError("at least one ledger required")
        prev = self._ledgers
        self._ledgers = list(ledgers)
        try:
            yield
        finally:
            self._ledgers = prev

    @contextlib.contextmanager
    def extraction_overhead(self):
        """Charge mults/rotations inside this scope to the extraction fields."""
        self._extraction_depth += 1
        try:
            yield
        finally:
            self._extraction_depth -= 1

    def _count(self, name: str, amount: int = 1) -> None:
        if self._extraction_depth and name in ("mults_pc", "rotations"):
            name = "extraction_mults_pc" if name == "mults_pc" else "extraction_rotations"
        for led in self._ledgers:
            setattr(led, name, getattr(led, name) + amount)

    # -- helpers --------------------------------------------------------------

    def _pad(self, values: Sequence[float] | np.ndarray) -> np.ndarray:
        t = self.params.slot_count
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size > t:
            raise CapacityError(f"payload of {arr.size} exceeds {t} slots")
        out = np.zeros(t, dtype=np.float64)
        out[: arr.size] = arr
        return out

    def _noise(self, slots: np.ndarray) -> np.ndarray:
        if self.params.noise_std == 0.0:
            return slots
        return slots + self._rng.normal(0.0, self.params.noise_std, slots.shape)

    # -- core operations ------------------------------------------------------

    def encrypt(self, plain: Sequence[float] | np.ndarray, provenance: str = "") -> Ciphertext:
        slots = self._pad(plain)
        return Ciphertext(slots, self.params.level_budget, provenance=provenance)

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        level = min(a.level, b.level)
        if a.level != b.level:
            # modulus drop to align operands; recorded as an implicit rescale
            self._count("rescales")
        return Ciphertext(
            a.slots + b.slots,
            level,
            a.pending_rescale or b.pending_rescale,
            a.pending_relin or b.pending_relin,
            a.key_owner,
            a.provenance,
        )

    def add_plain(self, a: Ciphertext, p: Sequence[float] | np.ndarray) -> Ciphertext:
        return Ciphertext(
            a.slots + self._pad(p), a.level, a.pending_rescale, a.pending_relin,
            a.key_owner, a.provenance,
        )

    def neg(self, a: Ciphertext) -> Ciphertext:
        return Ciphertext(-a.slots, a.level, a.pending_rescale, a.pending_relin,
                          a.key_owner, a.provenance)

    def sub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.add(a, self.neg(b))

    def mul_plain(self, a: Ciphertext, p: Sequence[float] | np.ndarray) -> Ciphertext:
        if a.pending:
            raise ProtocolOrderError("multiplying an unmaintained ciphertext")
        self._count("mults_pc")
        return Ciphertext(a.slots * self._pad(p), a.level, True, a.pending_relin,
                          a.key_owner, a.provenance)

    def mul_cipher(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        if a.pending or b.pending:
            raise ProtocolOrderError("multiplying an unmaintained ciphertext")
        level = min(a.level, b.level)
        if a.level != b.level:
            self._count("rescales")
        self._count("mults_cc")
        return Ciphertext(a.slots * b.slots, level, True, True, a.key_owner, a.provenance)

    def maintain(self, a: Ciphertext) -> Ciphertext:
        """Apply the deferred rescale/relinearization of a product.

        One maintenance clears the flags of an arbitrarily large aggregated
        sum of products, so deferring it across an aggregation costs a single
        rescale instead of one per multiplication.
        """
        if not a.pending:
            return a
        level = a.level
        if a.pending_rescale:
            if level == 0:
                raise LevelExhaustedError("rescale at level 0; a bootstrap is missing")
            level -= 1
            self._count("rescales")
        if a.pending_relin:
            self._count("relinearizations")
        return Ciphertext(self._noise(a.slots), level, False, False, a.key_owner, a.provenance)

    def mul_plain_maintained(self, a: Ciphertext, p) -> Ciphertext:
        return self.maintain(self.mul_plain(a, p))

    def mul_cipher_maintained(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.maintain(self.mul_cipher(a, b))

    def rotate(self, a: Ciphertext, y: int) -> Ciphertext:
        """Cyclic left rotation by ``y`` (right for negative ``y``).

        An arbitrary shift is executed by composing power-of-two shifts, so
        the ledger charge is the popcount of ``|y|``.
        """
        t = self.params.slot_count
        if abs(y) >= t:
            raise CapacityError(f"rotation {y} out of range for {t} slots")
        if y == 0:
            return a
        self._count("rotations", popcount(y))
        return Ciphertext(np.roll(a.slots, -y), a.level, a.pending_rescale,
                          a.pending_relin, a.key_owner, a.provenance)

    def rotate_sum(self, a: Ciphertext, width: int) -> Ciphertext:
        """Rotate-and-add ladder: after log2(width) steps, slot 0 holds the sum
        of the first ``width`` slots (width a power of two).  When ``width``
        equals the slot count, every slot holds the total."""
        if not _is_pow2(width):
            raise ValueError("ladder width must be a power of two")
        acc = a
        shift = 1
        while shift < width:
            acc = self.add(acc, self.rotate(acc, shift))
            shift *= 2
        return acc

    def dot(self, a: Ciphertext, b: "Ciphertext | Sequence[float] | np.ndarray",
            width: int | None = None, mask_value: float = 1.0) -> Ciphertext:
        """Slot-summed product: slot 0 holds sum_i a[i]*b[i], other slots zero.

        One product multiplication, a log2(width) rotate-and-add ladder, one
        masking multiplication.  ``width`` defaults to the full slot count.
        """
        t = self.params.slot_count
        width = t if width is None else width
        prod = self.mul_cipher(a, b) if isinstance(b, Ciphertext) else self.mul_plain(a, b)
        prod = self.maintain(prod)
        summed = self.rotate_sum(prod, width)
        mask = np.zeros(t)
        mask[0] = mask_value
        return self.maintain(self.mul_plain(summed, mask))

    def dup(self, a: Ciphertext, y: int) -> Ciphertext:
        """Replicate slot 0 into the first ``y`` slots with ceil(log2 y)
        rotate-and-add steps.  Slots beyond ``y`` up to the next power of two
        also receive the value; callers mask when trailing zeros matter.
        Requires slots other than 0 to be zero."""
        t = self.params.slot_count
        if not 1 <= y <= t:
            raise CapacityError(f"dup width {y} out of range")
        acc = a
        filled = 1
        while filled < y:
            acc = self.add(acc, self.rotate(acc, -filled))
            filled *= 2
        return acc

    def mask_slot(self, a: Ciphertext, idx: int, value: float = 1.0,
                  move_to_front: bool = True) -> Ciphertext:
        """Extract slot ``idx`` as a slot-0 one-hot (times ``value``).

        Extraction overhead: one plaintext mask plus the alignment rotation.
        """
        t = self.params.slot_count
        mask = np.zeros(t)
        mask[idx] = value
        with self.extraction_overhead():
            out = self.maintain(self.mul_plain(a, mask))
            if idx and move_to_front:
                out = self.rotate(out, idx)
        return out

    def mask_range(self, a: Ciphertext, start: int, stop: int, value: float = 1.0) -> Ciphertext:
        t = self.params.slot_count
        mask = np.zeros(t)
        mask[start:stop] = value
        with self.extraction_overhead():
            return self.maintain(self.mul_plain(a, mask))

    def debug_decrypt(self, a: Ciphertext, n: int | None = None) -> np.ndarray:
        """Test-only shadow readout; counted so protocol paths can be audited."""
        if not self.allow_debug:
            raise ProtocolOrderError("debug decryption disabled on this engine")
        self._count("debug_reads")
        slots = a.slots.copy()
        return slots if n is None else slots[:n]
