"""Feature-space data model: layouts, per-atom equivariant tensors, and
block masks.

A layout describes a direct sum of SO(3) irreps as a multiplicity per order
l. Flat vectors are ordered by ascending l, then channel k, then component
m in [-l, l], so every (k, l) block occupies a contiguous stride of 2l+1
entries and block masking never splits a multiplet.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import so3

__all__ = [
    "IrrepsLayout",
    "FeatureTensor",
    "LayerMask",
    "PruneMask",
    "apply_block_mask",
    "slice_layout",
    "gather_features",
    "embed_features",
    "rotate_features",
]


@dataclass(frozen=True)
class IrrepsLayout:
    """Multiplicities per order l, plus the derived flat index map."""

    mult: tuple[int, ...]

    def __post_init__(self):
        mult = tuple(int(m) for m in self.mult)
        if any(m < 0 for m in mult):
            raise ValueError("multiplicities must be non-negative")
        object.__setattr__(self, "mult", mult)

    @property
    def l_max(self) -> int:
        return len(self.mult) - 1

    @property
    def width(self) -> int:
        return sum(m * (2 * l + 1) for l, m in enumerate(self.mult))

    @property
    def n_blocks(self) -> int:
        return sum(self.mult)

    def order_offset(self, l: int) -> int:
        """Flat index where order l starts."""
        return sum(m * (2 * ll + 1) for ll, m in enumerate(self.mult[:l]))

    def block_slice(self, l: int, k: int) -> slice:
        """Flat slice of the (k, l) multiplet."""
        if not 0 <= l <= self.l_max or not 0 <= k < self.mult[l]:
            raise IndexError(f"no block (l={l}, k={k}) in {self}")
        start = self.order_offset(l) + k * (2 * l + 1)
        return slice(start, start + 2 * l + 1)

    def flat_index(self, k: int, l: int, m: int) -> int:
        if abs(m) > l:
            raise IndexError("|m| must not exceed l")
        return self.block_slice(l, k).start + m + l

    def blocks(self) -> Iterable[tuple[int, int]]:
        """All (l, k) pairs in flat order."""
        for l, m in enumerate(self.mult):
            for k in range(m):
                yield l, k

    def orders(self) -> list[int]:
        """Orders with at least one channel."""
        return [l for l, m in enumerate(self.mult) if m > 0]


@dataclass(frozen=True)
class FeatureTensor:
    """Per-atom equivariant features flattened with a layout index map."""

    layout: IrrepsLayout
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] != self.layout.width:
            raise ValueError(
                f"values must be (n_atoms, {self.layout.width}), got {values.shape}"
            )
        object.__setattr__(self, "values", values)

    @property
    def n_atoms(self) -> int:
        return self.values.shape[0]

    def block(self, l: int, k: int) -> np.ndarray:
        return self.values[:, self.layout.block_slice(l, k)]

    def order_view(self, l: int) -> np.ndarray:
        """(n_atoms, mult[l], 2l+1) view of one order."""
        off = self.layout.order_offset(l)
        m = self.layout.mult[l]
        return self.values[:, off : off + m * (2 * l + 1)].reshape(self.n_atoms, m, 2 * l + 1)


@dataclass(frozen=True)
class LayerMask:
    """One layer's keep/drop bit per (k, l) block."""

    layout: IrrepsLayout
    bits: tuple[np.ndarray, ...]  # per l: uint8 array of length mult[l]

    def __post_init__(self):
        if len(self.bits) != self.layout.l_max + 1:
            raise ValueError("mask must cover every order of the layout")
        frozen = []
        for l, b in enumerate(self.bits):
            b = np.asarray(b, dtype=np.uint8).copy()
            if b.shape != (self.layout.mult[l],):
                raise ValueError(f"mask at l={l} has shape {b.shape}")
            if not np.isin(b, (0, 1)).all():
                raise ValueError("mask bits must be 0 or 1")
            b.flags.writeable = False
            frozen.append(b)
        object.__setattr__(self, "bits", tuple(frozen))

    @staticmethod
    def all_ones(layout: IrrepsLayout) -> "LayerMask":
        return LayerMask(layout, tuple(np.ones(m, dtype=np.uint8) for m in layout.mult))

    @staticmethod
    def all_zeros(layout: IrrepsLayout) -> "LayerMask":
        return LayerMask(layout, tuple(np.zeros(m, dtype=np.uint8) for m in layout.mult))

    def keep(self, l: int, k: int) -> bool:
        return bool(self.bits[l][k])

    def kept_channels(self, l: int) -> list[int]:
        return [k for k in range(self.layout.mult[l]) if self.bits[l][k]]

    def kept_count(self, l: int) -> int:
        return int(self.bits[l].sum())

    def with_bit(self, l: int, k: int, value: int) -> "LayerMask":
        bits = [b.copy() for b in self.bits]
        bits[l][k] = value
        return LayerMask(self.layout, tuple(bits))

    def flat(self) -> np.ndarray:
        """Per-component multiplier of length layout.width."""
        out = np.zeros(self.layout.width)
        for l, k in self.layout.blocks():
            if self.bits[l][k]:
                out[self.layout.block_slice(l, k)] = 1.0
        return out


@dataclass(frozen=True)
class PruneMask:
    """Keep/drop decisions for every layer's feature tensor.

    Layer 0 is the embedding output; layers 1..T are the message-passing
    outputs.
    """

    layers: tuple[LayerMask, ...]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, t: int) -> LayerMask:
        return self.layers[t]

    @staticmethod
    def all_ones(layouts: Sequence[IrrepsLayout]) -> "PruneMask":
        return PruneMask(tuple(LayerMask.all_ones(lo) for lo in layouts))

    def to_text(self) -> str:
        lines = []
        for t, lm in enumerate(self.layers):
            for l, k in lm.layout.blocks():
                lines.append(f"{t} {l} {k} {int(lm.bits[l][k])}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str, layouts: Sequence[IrrepsLayout]) -> "PruneMask":
        bits = [[np.zeros(m, dtype=np.uint8) for m in lo.mult] for lo in layouts]
        seen = set()
        for ln, raw in enumerate(text.splitlines(), start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 4:
                raise ValueError(f"mask line {ln}: expected 'layer l k keep'")
            t, l, k, keep = (int(p) for p in parts)
            if not 0 <= t < len(layouts):
                raise ValueError(f"mask line {ln}: layer {t} out of range")
            if keep not in (0, 1):
                raise ValueError(f"mask line {ln}: keep must be 0 or 1")
            try:
                bits[t][l][k] = keep
            except IndexError as exc:
                raise ValueError(f"mask line {ln}: no block (l={l}, k={k})") from exc
            seen.add((t, l, k))
        for t, lo in enumerate(layouts):
            for l, k in lo.blocks():
                if (t, l, k) not in seen:
                    raise ValueError(f"mask file is missing block ({t}, {l}, {k})")
        return PruneMask(
            tuple(LayerMask(lo, tuple(b)) for lo, b in zip(layouts, bits))
        )


def apply_block_mask(h: FeatureTensor, mask: LayerMask) -> FeatureTensor:
    """Zero dropped (k, l) blocks; retained blocks pass through bit-identical."""
    if h.layout != mask.layout:
        raise ValueError("feature tensor and mask have different layouts")
    values = h.values.copy()
    for l, k in h.layout.blocks():
        if not mask.keep(l, k):
            values[:, h.layout.block_slice(l, k)] = 0.0
    return FeatureTensor(h.layout, values)


def slice_layout(
    layout: IrrepsLayout, mask: LayerMask
) -> tuple[IrrepsLayout, dict[int, dict[int, int]]]:
    """Compact a layout to its retained channels.

    Returns the new layout and, per order, an order-preserving map from the
    old channel index to the new one.
    """
    if layout != mask.layout:
        raise ValueError("mask does not match layout")
    new_mult = []
    index_map: dict[int, dict[int, int]] = {}
    for l in range(layout.l_max + 1):
        kept = mask.kept_channels(l)
        new_mult.append(len(kept))
        index_map[l] = {old: new for new, old in enumerate(kept)}
    return IrrepsLayout(tuple(new_mult)), index_map


def gather_features(h: FeatureTensor, index_map: dict[int, dict[int, int]]) -> FeatureTensor:
    """Compact a feature tensor onto the retained channels of an index map."""
    layout = h.layout
    new_mult = []
    for l in range(layout.l_max + 1):
        mapping = index_map.get(l, {})
        if any(not 0 <= old < layout.mult[l] for old in mapping):
            raise IndexError(f"index map at l={l} references a missing channel")
        new_mult.append(len(mapping))
    new_layout = IrrepsLayout(tuple(new_mult))
    out = np.empty((h.n_atoms, new_layout.width), dtype=h.values.dtype)
    for l in range(layout.l_max + 1):
        for old, new in index_map.get(l, {}).items():
            out[:, new_layout.block_slice(l, new)] = h.block(l, old)
    return FeatureTensor(new_layout, out)


def embed_features(
    h: FeatureTensor, index_map: dict[int, dict[int, int]], layout: IrrepsLayout
) -> FeatureTensor:
    """Scatter a compacted tensor back into a full layout, zero elsewhere.

    Inverse companion of gather_features: embed(gather(mask(h))) == mask(h).
    """
    out = np.zeros((h.n_atoms, layout.width), dtype=h.values.dtype)
    for l in range(h.layout.l_max + 1):
        for old, new in index_map.get(l, {}).items():
            out[:, layout.block_slice(l, old)] = h.block(l, new)
    return FeatureTensor(layout, out)


def rotate_features(h: FeatureTensor, g: so3.Rotation) -> FeatureTensor:
    """Apply the blockwise Wigner-D action of a rotation to every multiplet."""
    out = np.empty_like(h.values)
    for l in range(h.layout.l_max + 1):
        if h.layout.mult[l] == 0:
            continue
        d = so3.wigner_d(l, g).matrix
        off = h.layout.order_offset(l)
        width = h.layout.mult[l] * (2 * l + 1)
        view = h.values[:, off : off + width].reshape(h.n_atoms, h.layout.mult[l], 2 * l + 1)
        out[:, off : off + width] = np.einsum("mn,akn->akm", d, view).reshape(h.n_atoms, width)
    return FeatureTensor(h.layout, out)
