"""Multi-indices for derivative orders and cumulants."""

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class MultiIndex:
    """A d-dimensional multi-index of non-negative integers."""

    entries: tuple

    def __init__(self, entries):
        if isinstance(entries, int):
            entries = (entries,)
        entries = tuple(int(e) for e in entries)
        if any(e < 0 for e in entries):
            raise ValueError("multi-index entries must be non-negative")
        if not entries:
            raise ValueError("multi-index must have at least one entry")
        object.__setattr__(self, "entries", entries)

    @property
    def dim(self):
        return len(self.entries)

    def order(self):
        return sum(self.entries)

    def factorial(self):
        out = 1
        for e in self.entries:
            out *= math.factorial(e)
        return out

    def __add__(self, other):
        other = as_multiindex(other, self.dim)
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return MultiIndex(tuple(a + b for a, b in zip(self.entries, other.entries)))

    def __iter__(self):
        return iter(self.entries)


def as_multiindex(nu, dim=1):
    """Coerce an int, sequence or MultiIndex into a MultiIndex."""
    if isinstance(nu, MultiIndex):
        return nu
    if isinstance(nu, int):
        if dim != 1:
            raise ValueError("bare integer order only valid in dimension 1")
        return MultiIndex((nu,))
    return MultiIndex(tuple(nu))


def scalar_order(nu):
    """Total order of a multi-index, accepting bare ints for d = 1."""
    if isinstance(nu, int):
        return nu
    return as_multiindex(nu).order()
