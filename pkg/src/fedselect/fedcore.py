"""Federated values with placements and the communication primitives.

A :class:`FederatedValue` is either one server value or an ordered
per-client collection.  The primitives here move values between the two
placements; none of them hands an individual client payload to the server
except through an aggregate.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .exceptions import EmptyCohort, KeyOutOfRange, PlacementError, ShapeMismatch
from .selection.plans import SelectPlan, count_scalars


class Placement(enum.Enum):
    SERVER = "server"
    CLIENTS = "clients"


@dataclass(frozen=True)
class FederatedValue:
    """A value annotated with where it lives.

    For ``Placement.CLIENTS`` the payload is a tuple with one entry per
    cohort member, aligned with ``cohort``.
    """

    placement: Placement
    payload: Any
    cohort: tuple = ()

    def __post_init__(self):
        if self.placement is Placement.CLIENTS:
            object.__setattr__(self, "payload", tuple(self.payload))
            object.__setattr__(self, "cohort", tuple(int(c) for c in self.cohort))
            if len(self.payload) != len(self.cohort):
                raise ShapeMismatch(
                    f"{len(self.payload)} client payloads for a cohort of {len(self.cohort)}"
                )
            if len(set(self.cohort)) != len(self.cohort):
                raise ValueError("client ids must be unique within a cohort")

    @property
    def is_server(self) -> bool:
        return self.placement is Placement.SERVER

    def __len__(self):
        return len(self.payload) if self.placement is Placement.CLIENTS else 1

    def __getitem__(self, i):
        if self.placement is not Placement.CLIENTS:
            raise PlacementError("server-placed values are not indexable by client")
        return self.payload[i]

    def items(self):
        """``(client_id, payload)`` pairs in cohort order."""
        if self.placement is not Placement.CLIENTS:
            raise PlacementError("server-placed values have no client items")
        return zip(self.cohort, self.payload)

    def for_client(self, client_id: int):
        return self.payload[self.cohort.index(int(client_id))]


def server(value) -> FederatedValue:
    return FederatedValue(Placement.SERVER, value)


def clients(values: Sequence, cohort: Sequence[int] | None = None) -> FederatedValue:
    values = list(values)
    if cohort is None:
        cohort = range(len(values))
    return FederatedValue(Placement.CLIENTS, values, tuple(cohort))


@dataclass
class CommLedger:
    """Running scalar counts for one round of communication."""

    scalars_down: dict = field(default_factory=dict)
    scalars_up: dict = field(default_factory=dict)
    psi_evals: int = 0

    def down(self, client: int, n: int) -> None:
        self.scalars_down[client] = self.scalars_down.get(client, 0) + int(n)

    def up(self, client: int, n: int) -> None:
        self.scalars_up[client] = self.scalars_up.get(client, 0) + int(n)

    @property
    def total_down(self) -> int:
        return sum(self.scalars_down.values())

    @property
    def total_up(self) -> int:
        return sum(self.scalars_up.values())


def _require(value: FederatedValue, placement: Placement, what: str) -> None:
    if not isinstance(value, FederatedValue) or value.placement is not placement:
        raise PlacementError(f"{what} must be {placement.value}-placed")


def broadcast(x: FederatedValue, cohort: Sequence[int], ledger: CommLedger | None = None) -> FederatedValue:
    """Give every cohort member its own copy of the server value ``x``."""
    _require(x, Placement.SERVER, "broadcast input")
    cohort = list(cohort)
    if not cohort:
        raise EmptyCohort("cannot broadcast to an empty cohort")
    if ledger is not None:
        size = count_scalars(x.payload)
        for c in cohort:
            ledger.down(c, size)
    return clients([copy.deepcopy(x.payload) for _ in cohort], cohort)


def _ordered(values: FederatedValue):
    return sorted(zip(values.cohort, range(len(values.cohort))))


def aggregate_mean(values: FederatedValue, weights: Sequence[float] | None = None) -> FederatedValue:
    """Elementwise mean of client vectors, summed in ascending client id.

    ``weights`` (aligned with the cohort) switches to a weighted mean, e.g.
    by example count.
    """
    _require(values, Placement.CLIENTS, "aggregate input")
    if len(values.payload) == 0:
        raise EmptyCohort("cannot aggregate over an empty cohort")
    arrays = [np.asarray(v, dtype=np.float64) for v in values.payload]
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise ShapeMismatch(f"client payload shapes differ: {shape} vs {a.shape}")
    total = np.zeros(shape)
    if weights is None:
        for _, i in _ordered(values):
            total += arrays[i]
        return server(total / len(arrays))
    weights = np.asarray(weights, dtype=np.float64)
    for _, i in _ordered(values):
        total += weights[i] * arrays[i]
    return server(total / weights.sum())


def fed_select(x: FederatedValue, keys: FederatedValue, plan: SelectPlan) -> FederatedValue:
    """Send client ``n`` the slices ``[psi(x, z_n1), ..., psi(x, z_nm)]`` in key order."""
    _require(x, Placement.SERVER, "fed_select model")
    _require(keys, Placement.CLIENTS, "fed_select keys")
    out = []
    for client, seq in keys.items():
        for pos, k in enumerate(seq):
            try:
                plan.check_key(k)
            except KeyOutOfRange as err:
                raise KeyOutOfRange(k, plan.K, client=client, position=pos) from err
        out.append([plan.psi(x.payload, k) for k in seq])
    return clients(out, keys.cohort)


def aggregate_mean_deselect(
    updates: FederatedValue,
    keys: FederatedValue,
    plan: SelectPlan,
    normalize: str = "cohort",
    weights: Sequence[float] | None = None,
) -> FederatedValue:
    """Mean over clients of ``phi(u_n, z_n)`` placed at the server.

    ``normalize="cohort"`` divides by the cohort size N.  ``"key_count"``
    divides each coordinate by how many selections covered it instead
    (zero where nothing was selected).
    """
    _require(updates, Placement.CLIENTS, "deselect updates")
    _require(keys, Placement.CLIENTS, "deselect keys")
    if len(updates.payload) == 0:
        raise EmptyCohort("cannot aggregate over an empty cohort")
    if updates.cohort != keys.cohort:
        raise ShapeMismatch("updates and keys are placed on different cohorts")
    for (client, u), seq in zip(updates.items(), keys.payload):
        if len(u) != len(seq):
            raise ShapeMismatch(f"client {client}: {len(u)} slice updates for {len(seq)} keys")
    total = np.zeros(plan.layout.size)
    counts = np.zeros(plan.layout.size) if normalize == "key_count" else None
    for _, i in _ordered(updates):
        dense = plan.phi(updates.payload[i], keys.payload[i])
        if weights is not None:
            dense = weights[i] * dense
        total += dense
        if counts is not None:
            for k in keys.payload[i]:
                np.add.at(counts, plan.coords(k), 1.0)
    if normalize == "cohort":
        denom = len(updates.payload) if weights is None else float(np.sum(weights))
        return server(total / denom)
    if normalize == "key_count":
        out = np.zeros_like(total)
        np.divide(total, counts, out=out, where=counts > 0)
        return server(out)
    raise ValueError(f"unknown normalization {normalize!r}")

