"""Unit references and ablation masks.

Layers and units are 1-based in everything user-facing ("L2-U17").  The flat
rendering numbers units of layer 1 as 1..H, layer 2 as H+1..2H, and so on.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator

_UNIT_RE = re.compile(r"^\s*L(\d+)-U(\d+)\s*$", re.IGNORECASE)


@dataclass(frozen=True, order=True)
class UnitRef:
    layer: int
    unit: int

    def __post_init__(self):
        if self.layer < 1 or self.unit < 1:
            raise ValueError(f"layer and unit are 1-based, got {self.layer}, {self.unit}")

    def __str__(self) -> str:
        return f"L{self.layer}-U{self.unit}"

    @classmethod
    def parse(cls, text: str) -> "UnitRef":
        m = _UNIT_RE.match(text)
        if m is None:
            raise ValueError(f"cannot parse unit reference {text!r}; expected e.g. 'L2-U17'")
        return cls(int(m.group(1)), int(m.group(2)))

    def flat(self, hidden_dim: int) -> int:
        return (self.layer - 1) * hidden_dim + self.unit

    @classmethod
    def from_flat(cls, index: int, hidden_dim: int) -> "UnitRef":
        if index < 1:
            raise ValueError("flat unit indices are 1-based")
        return cls((index - 1) // hidden_dim + 1, (index - 1) % hidden_dim + 1)

    def check(self, n_layers: int, hidden_dim: int) -> None:
        if self.layer > n_layers or self.unit > hidden_dim:
            raise IndexError(
                f"{self} outside model with {n_layers} layers of {hidden_dim} units")


def all_units(n_layers: int, hidden_dim: int, layers: Iterable[int] | None = None) -> list[UnitRef]:
    layers = range(1, n_layers + 1) if layers is None else layers
    return [UnitRef(layer, u) for layer in layers for u in range(1, hidden_dim + 1)]


class AblationMask:
    """Set of units whose hidden activation is clamped to zero."""

    def __init__(self, units: Iterable[UnitRef | str] = ()):
        self._units = frozenset(UnitRef.parse(u) if isinstance(u, str) else u for u in units)

    @classmethod
    def parse(cls, text: str | None) -> "AblationMask":
        if not text:
            return cls()
        return cls(part for part in text.split(",") if part.strip())

    def __iter__(self) -> Iterator[UnitRef]:
        return iter(sorted(self._units))

    def __len__(self) -> int:
        return len(self._units)

    def __contains__(self, unit: UnitRef) -> bool:
        return unit in self._units

    def __eq__(self, other) -> bool:
        return isinstance(other, AblationMask) and self._units == other._units

    def __hash__(self) -> int:
        return hash(self._units)

    def __repr__(self) -> str:
        return f"AblationMask({', '.join(str(u) for u in self)})"

    def __str__(self) -> str:
        return ",".join(str(u) for u in self)

    def layers(self) -> set[int]:
        return {u.layer for u in self._units}

    def keep_vector(self, layer: int, hidden_dim: int):
        """1.0 for kept units, 0.0 for ablated units of ``layer``."""
        import numpy as np

        keep = np.ones(hidden_dim)
        for u in self._units:
            if u.layer == layer:
                keep[u.unit - 1] = 0.0
        return keep

    def validate(self, n_layers: int, hidden_dim: int) -> None:
        for u in self._units:
            u.check(n_layers, hidden_dim)
