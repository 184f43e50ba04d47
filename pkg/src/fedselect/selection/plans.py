"""Select plans: a keyspace plus a select function and its deselect inverse.

Every concrete plan describes each slice by a nested structure of flat
coordinate arrays (``parts``).  Selecting gathers those coordinates from the
server vector; deselecting scatter-adds an update back onto the same
coordinates.  Composite plans (fused, merged, flattened) only rearrange the
part structures of the plans they wrap.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..exceptions import BlockCollision, KeyOutOfRange, KeyspaceOverflow, ShapeMismatch
from .params import BlockedParams, Layout

KEY_MAX = int(np.iinfo(np.int64).max)


def tree_map(fn, tree):
    if isinstance(tree, tuple):
        return tuple(tree_map(fn, t) for t in tree)
    if isinstance(tree, list):
        return [tree_map(fn, t) for t in tree]
    return fn(tree)


def tree_leaves(tree) -> list:
    if isinstance(tree, (tuple, list)):
        out = []
        for t in tree:
            out.extend(tree_leaves(t))
        return out
    return [tree]


def flatten_slice(value) -> np.ndarray:
    """Concatenate every leaf of a (nested) slice into one float vector."""
    leaves = tree_leaves(value)
    if not leaves:
        return np.zeros(0)
    return np.concatenate([np.ravel(np.asarray(leaf, dtype=np.float64)) for leaf in leaves])


def _match(update, parts, out: list, k) -> None:
    if isinstance(parts, (tuple, list)):
        if not isinstance(update, (tuple, list)) or len(update) != len(parts):
            raise ShapeMismatch(f"slice update for key {k} does not match the slice structure")
        for u, p in zip(update, parts):
            _match(u, p, out, k)
        return
    arr = np.asarray(update, dtype=np.float64)
    if arr.shape != np.shape(parts):
        raise ShapeMismatch(
            f"slice update for key {k} has shape {arr.shape}, expected {np.shape(parts)}"
        )
    out.append(arr.ravel())


def count_scalars(value) -> int:
    if isinstance(value, BlockedParams):
        return value.size
    if isinstance(value, dict):
        return sum(count_scalars(v) for v in value.values())
    return sum(int(np.size(leaf)) for leaf in tree_leaves(value))


class SelectPlan:
    """Base class for plans over a :class:`Layout`.

    Subclasses set ``K``, ``layout`` and ``blocks`` and implement
    :meth:`parts`.
    """

    K: int
    layout: Layout
    blocks: tuple = ()
    kind = "abstract"

    def check_key(self, k) -> int:
        if isinstance(k, (bool, np.bool_)) or not isinstance(k, (int, np.integer)):
            raise KeyOutOfRange(k, self.K)
        if not 0 <= k < self.K:
            raise KeyOutOfRange(k, self.K)
        return int(k)

    def parts(self, k: int):
        """Nested structure of coordinate arrays describing slice ``k``."""
        raise NotImplementedError

    def psi(self, x: BlockedParams, k):
        k = self.check_key(k)
        if x.layout != self.layout:
            raise ShapeMismatch("model layout does not match the plan layout")
        flat = x.flat
        return tree_map(lambda idx: flat[idx], self.parts(k))

    def coords(self, k) -> np.ndarray:
        """Flat coordinates of slice ``k``, in :func:`flatten_slice` order."""
        k = self.check_key(k)
        leaves = tree_leaves(self.parts(k))
        if not leaves:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.ravel(idx) for idx in leaves])

    def slice_size(self, k) -> int:
        return int(sum(np.size(idx) for idx in tree_leaves(self.parts(self.check_key(k)))))

    def slice_shape(self, k):
        return tree_map(np.shape, self.parts(self.check_key(k)))

    def _check_update(self, update, k) -> np.ndarray:
        """Flatten ``update`` after checking it against the structure of slice ``k``."""
        leaves = []
        _match(update, self.parts(k), leaves, k)
        return np.concatenate(leaves) if leaves else np.zeros(0)

    def phi(self, updates: Sequence, keys: Sequence[int]) -> np.ndarray:
        """Scatter-add slice updates onto a zero vector in R^s."""
        if len(updates) != len(keys):
            raise ShapeMismatch(f"{len(updates)} slice updates for {len(keys)} keys")
        out = np.zeros(self.layout.size)
        for update, k in zip(updates, keys):
            k = self.check_key(k)
            np.add.at(out, self.coords(k), self._check_update(update, k))
        return out

    def touched(self, keys: Iterable[int]) -> np.ndarray:
        """Boolean mask of the coordinates covered by ``keys``."""
        mask = np.zeros(self.layout.size, dtype=bool)
        for k in keys:
            mask[self.coords(k)] = True
        return mask


class RowSelect(SelectPlan):
    """``psi(x, k)`` is row ``k`` of one block (rows along axis 0)."""

    kind = "row"

    def __init__(self, layout: Layout, block: str):
        self.layout = layout
        self.block = block
        self.blocks = (block,)
        self._index = layout.index(block)
        self.K = int(self._index.shape[0])

    @property
    def axes(self) -> dict:
        return {self.block: 0}

    def parts(self, k):
        return self._index[k]

    def __repr__(self):
        return f"RowSelect({self.block!r}, K={self.K})"


class NeuronSelect(SelectPlan):
    """``psi(x, j)`` is hidden unit ``j``'s fan-in column, bias, and fan-out row."""

    kind = "neuron"

    def __init__(self, layout: Layout, w_in: str, b_in: str, w_out: str):
        self.layout = layout
        self.blocks = (w_in, b_in, w_out)
        self._w_in = layout.index(w_in)
        self._b_in = layout.index(b_in)
        self._w_out = layout.index(w_out)
        hidden = self._b_in.shape[0]
        if self._w_in.shape[1] != hidden or self._w_out.shape[0] != hidden:
            raise ShapeMismatch(
                f"inconsistent hidden sizes: {self._w_in.shape}, {self._b_in.shape}, {self._w_out.shape}"
            )
        self.K = int(hidden)

    @property
    def axes(self) -> dict:
        w_in, b_in, w_out = self.blocks
        return {w_in: 1, b_in: 0, w_out: 0}

    def parts(self, j):
        return (self._w_in[:, j], self._b_in[j], self._w_out[j])

    def __repr__(self):
        return f"NeuronSelect({self.blocks}, K={self.K})"


class BlockSelect(SelectPlan):
    """Conditional components ``a_0 .. a_{C-1}``; key ``i`` picks ``a_i``.

    The shared component is expected to be a broadcast block, delivered
    through :func:`fuse_broadcast_into_select`.
    """

    kind = "block"

    def __init__(self, layout: Layout, components: Sequence[str], shared: str | None = None):
        self.layout = layout
        self.components = tuple(components)
        self.shared = shared
        self.blocks = self.components
        self.K = len(self.components)
        for name in self.components:
            layout[name]

    def parts(self, i):
        return self.layout.index(self.components[i])

    def __repr__(self):
        return f"BlockSelect({self.components}, K={self.K})"


class WholeModelPlan(SelectPlan):
    """Every key selects the whole model; ``K=1`` gives the trivial plan.

    Deselection with a single key is the identity placement, so training
    through this plan reproduces plain broadcast-based training.
    """

    kind = "identity"

    def __init__(self, layout: Layout, K: int = 1):
        self.layout = layout
        self.blocks = layout.names
        self.K = int(K)

    @property
    def axes(self) -> dict:
        return {}

    def parts(self, k):
        return tuple(self.layout.index(name) for name in self.layout.names)

    def __repr__(self):
        return f"WholeModelPlan(K={self.K})"


class CallablePlan(SelectPlan):
    """Select through an arbitrary function ``fn(x, k)``.

    Such plans have no coordinate structure, so they support selection only.
    """

    kind = "callable"

    def __init__(self, K: int, fn: Callable):
        self.K = int(K)
        self.fn = fn
        self.layout = None

    def psi(self, x, k):
        return self.fn(x, self.check_key(k))

    def parts(self, k):
        raise TypeError("CallablePlan has no coordinate structure")

    def phi(self, updates, keys):
        raise TypeError("CallablePlan has no deselect function")


class FusedPlan(SelectPlan):
    """``psi'((x, y), k) = (psi(x, k), y)`` for broadcast blocks ``y``."""

    kind = "fused"

    def __init__(self, plan: SelectPlan, broadcast_blocks: Sequence[str]):
        self.inner = plan
        self.layout = plan.layout
        self.K = plan.K
        self.broadcast_blocks = tuple(broadcast_blocks)
        self.blocks = tuple(plan.blocks) + self.broadcast_blocks
        idx = tuple(self.layout.index(name) for name in self.broadcast_blocks)
        self._y = idx[0] if len(idx) == 1 else idx

    def parts(self, k):
        return (self.inner.parts(k), self._y)

    def phi(self, updates, keys):
        """Scatter-add the selected parts; write the broadcast part once.

        Each fused slice carries its own copy of the broadcast update; the
        copies are averaged, which is the verbatim value when they agree.
        """
        if len(updates) != len(keys):
            raise ShapeMismatch(f"{len(updates)} slice updates for {len(keys)} keys")
        out = np.zeros(self.layout.size)
        if not keys:
            return out
        y_coords = np.concatenate([np.ravel(i) for i in tree_leaves(self._y)])
        y_sum = np.zeros(y_coords.size)
        for update, k in zip(updates, keys):
            k = self.check_key(k)
            if not isinstance(update, tuple) or len(update) != 2:
                raise ShapeMismatch("fused slice update must be a (select, broadcast) pair")
            inner_update, y_update = update
            np.add.at(out, self.inner.coords(k), self.inner._check_update(inner_update, k))
            y_flat = flatten_slice(y_update)
            if y_flat.size != y_coords.size:
                raise ShapeMismatch("broadcast part of fused update has the wrong size")
            y_sum += y_flat
        out[y_coords] += y_sum / len(keys)
        return out

    def __repr__(self):
        return f"FusedPlan({self.inner!r} + {self.broadcast_blocks})"


class MergedPlan(SelectPlan):
    """Product keyspace ``K1*K2``; composite key ``k1*K2 + k2``."""

    kind = "merged"

    def __init__(self, first: SelectPlan, second: SelectPlan):
        self.first = first
        self.second = second
        self.layout = first.layout
        self.blocks = tuple(first.blocks) + tuple(second.blocks)
        self.K = first.K * second.K

    def encode(self, k1: int, k2: int) -> int:
        return self.first.check_key(k1) * self.second.K + self.second.check_key(k2)

    def decode(self, k: int) -> tuple:
        k = self.check_key(k)
        return divmod(k, self.second.K)

    def parts(self, k):
        k1, k2 = divmod(k, self.second.K)
        return (self.first.parts(k1), self.second.parts(k2))

    def __repr__(self):
        return f"MergedPlan({self.first!r} x {self.second!r})"


class FlattenedPlan(SelectPlan):
    """Single-key plan over ``K**m`` standing in for ``m`` keys of ``plan``.

    Key ``z = [z_1, .., z_m]`` encodes as ``sum(z_i * K**(m-i))``, so the last
    key is least significant.
    """

    kind = "flattened"

    def __init__(self, plan: SelectPlan, m: int):
        self.inner = plan
        self.m = int(m)
        self.layout = plan.layout
        self.blocks = plan.blocks
        self.K = plan.K ** self.m

    def encode(self, keys: Sequence[int]) -> int:
        if len(keys) != self.m:
            raise ShapeMismatch(f"expected {self.m} keys, got {len(keys)}")
        code = 0
        for z in keys:
            code = code * self.inner.K + self.inner.check_key(z)
        return code

    def decode(self, k: int) -> list:
        k = self.check_key(k)
        return self._decode(k)

    def _decode(self, k: int) -> list:
        digits = []
        for _ in range(self.m):
            k, z = divmod(k, self.inner.K)
            digits.append(z)
        return digits[::-1]

    def parts(self, k):
        return [self.inner.parts(z) for z in self._decode(k)]

    def __repr__(self):
        return f"FlattenedPlan({self.inner!r}, m={self.m})"


def fuse_broadcast_into_select(plan: SelectPlan, y_block) -> SelectPlan:
    """Fold a broadcast of ``y_block`` into every slice of ``plan``."""
    names = (y_block,) if isinstance(y_block, str) else tuple(y_block)
    if not names:
        return plan
    clash = set(names) & set(plan.blocks)
    if clash:
        raise BlockCollision(f"blocks {sorted(clash)} are already selected by the plan")
    if len(set(names)) != len(names):
        raise BlockCollision("duplicate broadcast block names")
    return FusedPlan(plan, names)


def merge_select_plans(p1: SelectPlan, p2: SelectPlan) -> MergedPlan:
    """Combine two selects over disjoint blocks into one over ``K1*K2`` keys."""
    clash = set(p1.blocks) & set(p2.blocks)
    if clash:
        raise BlockCollision(f"plans share blocks {sorted(clash)}")
    if p1.layout != p2.layout:
        raise ShapeMismatch("plans are defined over different layouts")
    if p1.K * p2.K - 1 > KEY_MAX:
        raise KeyspaceOverflow(f"keyspace {p1.K}*{p2.K} exceeds the int64 key range")
    return MergedPlan(p1, p2)


def flatten_multikey_plan(plan: SelectPlan, m: int) -> SelectPlan:
    """Replace ``m`` keys per client by one key over ``K**m`` (``m=1`` is a no-op)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if m == 1:
        return plan
    if plan.K ** m - 1 > KEY_MAX:
        raise KeyspaceOverflow(f"keyspace {plan.K}**{m} exceeds the int64 key range")
    return FlattenedPlan(plan, m)


def psi_slice(plan: SelectPlan, x: BlockedParams, k):
    return plan.psi(x, k)


def phi_scatter(plan: SelectPlan, slices: Sequence, keys: Sequence[int]) -> np.ndarray:
    return plan.phi(slices, keys)
