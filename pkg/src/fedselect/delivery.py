"""Slice delivery strategies with exact cost accounting.

``broadcast_compute``
    The full model is broadcast and each client slices it locally.  Keys
    never leave the device.
``on_demand``
    Clients upload keys and the server slices on request, optionally
    caching each slice for the rest of the round.
``pregenerated``
    The server slices every key up front and clients fetch from the
    resulting store (a CDN stand-in).

Every mode delivers the same slice values; only the counters differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .exceptions import KeyOutOfRange, PlacementError
from .fedcore import FederatedValue, Placement, clients
from .selection.plans import SelectPlan

MODES = ("broadcast_compute", "on_demand", "pregenerated")
CACHES = ("none", "per_round")


@dataclass(frozen=True)
class DeliveryMode:
    kind: str = "on_demand"
    cache: str = "none"

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown delivery mode {self.kind!r}; expected one of {MODES}")
        if self.cache not in CACHES:
            raise ValueError(f"unknown cache scope {self.cache!r}; expected one of {CACHES}")

    @property
    def keys_visible_to_server(self) -> bool:
        return self.kind != "broadcast_compute"


@dataclass
class DeliveryStats:
    psi_evals: int = 0
    client_psi_evals: int = 0
    scalars_down: dict = field(default_factory=dict)
    wasted_slices: int = 0
    cache_hits: int = 0
    model_size: int = 0
    client_params: dict = field(default_factory=dict)
    keys_visible_to_server: bool = True

    @property
    def total_down(self) -> int:
        return sum(self.scalars_down.values())

    @property
    def max_client_params(self) -> int:
        return max(self.client_params.values(), default=0)


def deliver(
    mode: DeliveryMode,
    x: FederatedValue,
    keys: FederatedValue,
    plan: SelectPlan,
    broadcast_size: int = 0,
):
    """Deliver ``[psi(x, k) for k in z_n]`` to each client under ``mode``.

    ``broadcast_size`` is the scalar count of broadcast-only blocks that
    travel with the slices; it is charged once per client in select modes
    and is already part of the full model in ``broadcast_compute``.
    Returns ``(clients-placed slice lists, DeliveryStats)``.
    """
    if not isinstance(x, FederatedValue) or x.placement is not Placement.SERVER:
        raise PlacementError("delivery needs a server-placed model")
    if not isinstance(keys, FederatedValue) or keys.placement is not Placement.CLIENTS:
        raise PlacementError("delivery needs clients-placed keys")
    model = x.payload
    for client, seq in keys.items():
        for pos, k in enumerate(seq):
            try:
                plan.check_key(k)
            except KeyOutOfRange:
                raise KeyOutOfRange(k, plan.K, client=client, position=pos) from None

    stats = DeliveryStats(model_size=model.size, keys_visible_to_server=mode.keys_visible_to_server)
    out = []
    if mode.kind == "broadcast_compute":
        for client, seq in keys.items():
            stats.scalars_down[client] = model.size
            stats.client_psi_evals += len(seq)
            out.append([plan.psi(model, k) for k in seq])
    elif mode.kind == "on_demand":
        cache = {}
        for client, seq in keys.items():
            slices = []
            for k in seq:
                k = int(k)
                if mode.cache == "per_round" and k in cache:
                    stats.cache_hits += 1
                    slices.append(cache[k])
                    continue
                value = plan.psi(model, k)
                stats.psi_evals += 1
                if mode.cache == "per_round":
                    cache[k] = value
                slices.append(value)
            out.append(slices)
    else:
        store = {k: plan.psi(model, k) for k in range(plan.K)}
        stats.psi_evals = plan.K
        requested = {int(k) for seq in keys.payload for k in seq}
        stats.wasted_slices = plan.K - len(requested)
        for _, seq in keys.items():
            out.append([store[int(k)] for k in seq])

    for client, seq in keys.items():
        held = sum(plan.slice_size(k) for k in seq) + broadcast_size
        stats.client_params[client] = held
        if mode.kind != "broadcast_compute":
            stats.scalars_down[client] = held
    return clients(out, keys.cohort), stats


@dataclass
class AccountTotals:
    rounds: int = 0
    psi_evals: int = 0
    client_psi_evals: int = 0
    scalars_down: int = 0
    scalars_up: int = 0
    wasted_slices: int = 0
    cache_hits: int = 0
    max_client_params: int = 0
    model_size: int = 0

    @property
    def rel_client_model_size(self) -> float:
        if self.model_size == 0:
            return 0.0
        return self.max_client_params / self.model_size


def account_summary(stats: Sequence) -> AccountTotals:
    """Sum per-round counters (``DeliveryStats`` or ``RoundStats``)."""
    totals = AccountTotals()
    for st in stats:
        totals.rounds += 1
        totals.psi_evals += st.psi_evals
        totals.client_psi_evals += getattr(st, "client_psi_evals", 0)
        down = st.total_down if hasattr(st, "total_down") else st.scalars_down_total
        totals.scalars_down += down
        totals.scalars_up += getattr(st, "scalars_up_total", 0)
        totals.wasted_slices += st.wasted_slices
        totals.cache_hits += getattr(st, "cache_hits", 0)
        totals.max_client_params = max(totals.max_client_params, st.max_client_params)
        totals.model_size = max(totals.model_size, st.model_size)
    return totals
