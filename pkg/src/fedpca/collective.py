"""Simulated interactive protocols over the collective key.

Key generation, ciphertext refresh, key switching / decryption, and the
aggregate-and-broadcast primitive.  Numeric effects are computed in place on
the slot payloads; the point of these routines is faithful communication
accounting and rendezvous semantics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cipher import Ciphertext, ProtocolOrderError
from .fedsim import BarrierEvent, Federation


@dataclass(frozen=True)
class CollectiveKeys:
    """Public material produced by collective key generation."""

    rotation_key_count: int
    relin_key_present: bool
    setup_comm_ciphertexts: float


def dkeygen(fed: Federation) -> CollectiveKeys:
    """Generate the collective public key and evaluation keys.

    Evaluation keys cover the two rotation directions for every power-of-two
    shift plus one relinearization key; per-party setup traffic is
    log2(t) + 2.5 ciphertext equivalents.
    """
    if fed.n_parties < 2:
        raise ValueError("key generation needs at least 2 parties")
    t = fed.params.slot_count
    log_t = int(math.log2(t))
    comm = log_t + 2.5
    for led in fed.ledgers:
        led.send(comm, fed.params.ciphertext_bytes)
        led.receive(comm)
    fed.barriers.append(BarrierEvent("keygen", comm, fed.n_parties))
    keys = CollectiveKeys(2 * log_t, True, comm)
    fed.keys = keys
    return keys


def dbootstrap(fed: Federation, ct: Ciphertext) -> Ciphertext:
    """Collectively refresh a ciphertext to the full level budget.

    Every party transmits and receives one ciphertext equivalent.  Refreshing
    a ciphertext that still has multiplication capacity is allowed.
    """
    return fed.refresh(ct)


def dkeyswitch(fed: Federation, ct: Ciphertext, target: int | None):
    """Re-encrypt ``ct`` to ``target``'s key; ``target=None`` decrypts.

    Each party contributes one ciphertext share and receives the switched
    result.  Decryption adds a fresh-noise re-randomization event before the
    plaintext is released (recorded, numerically inert at noise_std=0).
    """
    if ct.pending:
        raise ProtocolOrderError("key switch requires maintained input")
    fed.charge_comm_all(1.0, "keyswitch")
    if target is None:
        slots = fed.engine._noise(ct.slots.copy())
        return slots
    if not 0 <= target < fed.n_parties:
        raise ValueError(f"unknown party {target}")
    return Ciphertext(ct.slots, ct.level, key_owner=target, provenance=ct.provenance)


def read_local(fed: Federation, ct: Ciphertext, party: int) -> np.ndarray:
    """Local readout of a party-keyed ciphertext; denied for other parties."""
    if ct.key_owner is None:
        raise ProtocolOrderError("ciphertext is under the collective key")
    if ct.key_owner != party:
        raise ProtocolOrderError(f"party {party} cannot read a ciphertext keyed to {ct.key_owner}")
    return ct.slots.copy()


def aggregate_broadcast(fed: Federation, contributions):
    """Sum one contribution per party and hand the result to every party.

    Contributions are ciphertexts or (nested) lists of ciphertexts of
    identical shape.  Pending maintenance flags survive aggregation, so a
    deferred rescale can run once on the sum.  Reduction is in party order,
    which makes results identical under any party permutation of the same
    values.  Each party sends its payload and receives the result.
    """
    if len(contributions) != fed.n_parties:
        raise ProtocolOrderError(
            f"expected {fed.n_parties} contributions, got {len(contributions)}")

    def shape_of(x):
        if isinstance(x, Ciphertext):
            return "ct"
        return [shape_of(e) for e in x]

    first = shape_of(contributions[0])
    for c in contributions[1:]:
        if shape_of(c) != first:
            raise ProtocolOrderError("aggregation shape mismatch across parties")

    def count(x) -> int:
        return 1 if isinstance(x, Ciphertext) else sum(count(e) for e in x)

    def add(a, b):
        if isinstance(a, Ciphertext):
            return fed.engine.add(a, b)
        return [add(x, y) for x, y in zip(a, b)]

    payload = count(contributions[0])
    with fed.everyone():
        acc = contributions[0]
        for c in contributions[1:]:
            acc = add(acc, c)
    fed.charge_comm_all(float(payload), "aggregate")
    return acc
