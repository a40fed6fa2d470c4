"""Deterministic multi-party runtime.

Parties share one tracing engine; the federation controls which ledgers an
operation charges (one party for local phases, everyone for the redundant
computation each party performs on broadcast data).  Interactive operations
are rendezvous barriers: ledgers advance together and the simulated clock
accumulates network time per hop.  No real transport is involved, so runs
are reproducible regardless of host parallelism.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .cipher import Ciphertext, CostLedger, CryptoParams, ProtocolOrderError, TraceEngine


@dataclass(frozen=True)
class PartyId:
    index: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("party index must be non-negative")


@dataclass(frozen=True)
class NetworkModel:
    """Single-link network parameters used for the simulated clock."""

    latency_s: float = 0.020
    bandwidth_bps: float = 1e9
    ciphertext_bytes: float = 2.5e6
    topology: str = "ring"  # "ring" (s-1 hops) or "star" (2 hops via hub)

    def __post_init__(self) -> None:
        if min(self.latency_s, self.bandwidth_bps, self.ciphertext_bytes) <= 0:
            raise ValueError("network parameters must be positive")

    def hops(self, s: int) -> int:
        return (s - 1) if self.topology == "ring" else 2

    def barrier_seconds(self, payload_ciphertexts: float, s: int) -> float:
        transfer = payload_ciphertexts * self.ciphertext_bytes * 8.0 / self.bandwidth_bps
        return (self.latency_s + transfer) * self.hops(s)


@dataclass(frozen=True)
class RuntimeProfile:
    """Measured per-operation seconds used to convert ledgers to wall time."""

    add: float = 7e-4
    mult_pc: float = 0.013
    mult_cc: float = 0.083
    rotate: float = 0.08
    dot: float = 0.73
    dbootstrap: float = 0.49
    send: float = 0.026

    def __post_init__(self) -> None:
        if not self.mult_pc < self.mult_cc:
            raise ValueError("plaintext-ciphertext mult must be cheaper than cipher-cipher")

    def ledger_seconds(self, led: CostLedger) -> float:
        """Local compute time for one party's executed operations."""
        return (
            led.mults_cc * self.mult_cc
            + (led.mults_pc + led.extraction_mults_pc) * self.mult_pc
            + (led.rotations + led.extraction_rotations) * self.rotate
            + led.bootstraps * self.dbootstrap
        )


@dataclass
class BarrierEvent:
    kind: str
    payload_ciphertexts: float
    parties: int


class Federation:
    """A set of simulated data providers with per-party cost ledgers."""

    def __init__(
        self,
        n_parties: int,
        params: CryptoParams | None = None,
        network: NetworkModel | None = None,
        profile: RuntimeProfile | None = None,
        noise_seed: int = 0,
    ) -> None:
        if n_parties < 2:
            raise ValueError("a federation needs at least 2 parties")
        self.params = params if params is not None else CryptoParams()
        self.network = network if network is not None else NetworkModel(
            ciphertext_bytes=self.params.ciphertext_bytes)
        self.profile = profile if profile is not None else RuntimeProfile()
        self.parties = [PartyId(i) for i in range(n_parties)]
        self.ledgers = [CostLedger() for _ in range(n_parties)]
        self.engine = TraceEngine(self.params, self.ledgers[0], noise_seed=noise_seed)
        # computation on broadcast data is executed by every party
        self.engine.set_ledgers(self.ledgers)
        self.barriers: list[BarrierEvent] = []
        self.step_deltas: dict[str, list[dict]] = {}
        self._unit_depth = 0
        self.keys = None  # set by collective.dkeygen

    @property
    def n_parties(self) -> int:
        return len(self.parties)

    # -- charge scopes --------------------------------------------------------

    @contextlib.contextmanager
    def local(self, party: int):
        """Charge operations in this scope to one party only."""
        with self.engine.charge_to([self.ledgers[party]]):
            yield

    @contextlib.contextmanager
    def everyone(self):
        """Charge operations to every party (redundant computation on
        broadcast data)."""
        with self.engine.charge_to(self.ledgers):
            yield

    @contextlib.contextmanager
    def step(self, name: str):
        """Record per-party ledger deltas for a named protocol step."""
        before = [led.snapshot() for led in self.ledgers]
        yield
        self.step_deltas[name] = [led.delta(b) for led, b in zip(self.ledgers, before)]

    # -- interactive primitives ------------------------------------------------

    def charge_comm_all(self, ciphertexts: float, kind: str = "unit") -> None:
        """Charge every party's traffic counters and log the barrier."""
        for led in self.ledgers:
            led.send(ciphertexts, self.params.ciphertext_bytes)
            led.receive(ciphertexts)
        self.barriers.append(BarrierEvent(kind, ciphertexts, self.n_parties))

    @contextlib.contextmanager
    def comm_unit(self, amortized_ciphertexts: float, kind: str):
        """Scope for an interactive sub-protocol whose traffic is charged by
        its closed-form amortized cost.  Refreshes inside the scope restore
        levels and count as bootstraps but do not charge traffic again; when
        units nest, only the outermost one charges."""
        if self._unit_depth == 0:
            self.charge_comm_all(amortized_ciphertexts, kind)
        self._unit_depth += 1
        try:
            yield
        finally:
            self._unit_depth -= 1

    @property
    def in_comm_unit(self) -> bool:
        return self._unit_depth > 0

    def refresh(self, ct: Ciphertext) -> Ciphertext:
        """Collective refresh restoring the full level budget.

        Payload traffic is charged per invocation at top level and is covered
        by the enclosing unit's amortized charge otherwise.
        """
        if ct.pending:
            raise ProtocolOrderError("refresh requires maintained input")
        for led in self.ledgers:
            led.bootstraps += 1
        if self._unit_depth == 0:
            self.charge_comm_all(1.0, "bootstrap")
        slots = self.engine._noise(ct.slots)
        return Ciphertext(slots, self.params.level_budget, key_owner=ct.key_owner,
                          provenance=ct.provenance)

    def ensure_levels(self, ct: Ciphertext, needed: int) -> Ciphertext:
        """Refresh when the remaining budget cannot cover ``needed`` levels.
        Level values are data-independent, so placements are deterministic."""
        if needed > self.params.level_budget:
            raise ProtocolOrderError(
                f"stage depth {needed} exceeds level budget {self.params.level_budget}")
        if ct.level < needed:
            return self.refresh(ct)
        return ct

    # -- wall-clock estimation ---------------------------------------------------

    def network_seconds(self) -> float:
        return sum(self.network.barrier_seconds(b.payload_ciphertexts, b.parties)
                   for b in self.barriers)

    def compute_seconds(self) -> list[float]:
        return [self.profile.ledger_seconds(led) for led in self.ledgers]

    def estimated_wall_seconds(self) -> float:
        """Slowest party's local compute plus all barrier time."""
        per_party = self.compute_seconds()
        for led, secs in zip(self.ledgers, per_party):
            led.estimated_seconds = secs
        return max(per_party) + self.network_seconds()


def simulate(n_parties: int, program, **federation_kwargs):
    """Run ``program(fed)`` under a fresh federation.

    Returns (result, per-party ledgers, estimated wall seconds).
    """
    fed = Federation(n_parties, **federation_kwargs)
    result = program(fed)
    wall = fed.estimated_wall_seconds()
    return result, fed.ledgers, wall
