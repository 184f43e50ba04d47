"""Blocked parameter vectors: a flat float64 vector split into named blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..exceptions import BlockCollision, ShapeMismatch


@dataclass(frozen=True)
class BlockSpec:
    name: str
    shape: tuple
    offset: int
    broadcast: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class Layout:
    """Ordered block layout mapping block names onto ``[0, s)``.

    Blocks are packed back to back in declaration order, so the offset
    mapping is a bijection onto the flat coordinate range.
    """

    def __init__(self, blocks: Iterable[tuple]):
        specs = []
        offset = 0
        seen = set()
        for entry in blocks:
            name, raw = entry[0], entry[1]
            shape = (int(raw),) if np.isscalar(raw) else tuple(int(d) for d in raw)
            broadcast = bool(entry[2]) if len(entry) > 2 else False
            if name in seen:
                raise BlockCollision(f"duplicate block name {name!r}")
            seen.add(name)
            spec = BlockSpec(name, shape, offset, broadcast)
            specs.append(spec)
            offset += spec.size
        self.specs = tuple(specs)
        self.size = offset
        self._by_name = {spec.name: spec for spec in self.specs}
        self._index_cache = {}

    def __getitem__(self, name: str) -> BlockSpec:
        return self._by_name[name]

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self.specs)

    def __eq__(self, other):
        return isinstance(other, Layout) and self.specs == other.specs

    def __hash__(self):
        return hash(self.specs)

    def __repr__(self):
        inner = ", ".join(
            f"{s.name}{list(s.shape)}{'*' if s.broadcast else ''}" for s in self.specs
        )
        return f"Layout({inner}; s={self.size})"

    @property
    def names(self) -> tuple:
        return tuple(spec.name for spec in self.specs)

    @property
    def broadcast_names(self) -> tuple:
        return tuple(spec.name for spec in self.specs if spec.broadcast)

    def index(self, name: str) -> np.ndarray:
        """Flat coordinates of block ``name``, shaped like the block."""
        idx = self._index_cache.get(name)
        if idx is None:
            spec = self[name]
            idx = np.arange(spec.offset, spec.offset + spec.size, dtype=np.int64).reshape(spec.shape)
            idx.setflags(write=False)
            self._index_cache[name] = idx
        return idx


class BlockedParams:
    """A server model ``x`` in R^s partitioned into named blocks.

    Parameters
    ----------
    layout : Layout
        Block names, shapes and broadcast flags.
    flat : array-like, optional
        Flat storage of length ``layout.size``; zeros when omitted.
    """

    def __init__(self, layout: Layout, flat=None):
        self.layout = layout
        if flat is None:
            flat = np.zeros(layout.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (layout.size,):
            raise ShapeMismatch(f"flat vector has shape {flat.shape}, layout needs ({layout.size},)")
        self.flat = flat

    @classmethod
    def from_arrays(cls, blocks: Sequence[tuple]) -> "BlockedParams":
        """Build from ``(name, array[, broadcast])`` tuples."""
        arrays = [np.asarray(b[1], dtype=np.float64) for b in blocks]
        layout = Layout(
            (b[0], a.shape, b[2] if len(b) > 2 else False) for b, a in zip(blocks, arrays)
        )
        flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        return cls(layout, flat)

    @property
    def size(self) -> int:
        return self.layout.size

    def __getitem__(self, name: str) -> np.ndarray:
        spec = self.layout[name]
        return self.flat[spec.offset:spec.offset + spec.size].reshape(spec.shape)

    def as_dict(self) -> dict:
        return {name: self[name] for name in self.layout.names}

    def copy(self) -> "BlockedParams":
        return BlockedParams(self.layout, self.flat.copy())

    def with_flat(self, flat) -> "BlockedParams":
        return BlockedParams(self.layout, flat)

    def __eq__(self, other):
        return (
            isinstance(other, BlockedParams)
            and self.layout == other.layout
            and np.array_equal(self.flat, other.flat)
        )

    def __repr__(self):
        return f"BlockedParams({self.layout!r})"


def blocks_from_mapping(arrays: Mapping[str, np.ndarray], broadcast: Iterable[str] = ()) -> BlockedParams:
    broadcast = set(broadcast)
    return BlockedParams.from_arrays([(k, v, k in broadcast) for k, v in arrays.items()])
