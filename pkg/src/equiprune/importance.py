"""Calibration-time importance scoring for (k, l) feature blocks.

The primary criterion is gradient x activation: per structure, the energy
gradient with respect to each feature block is contracted with the block's
activations over atoms and components, and the absolute value of that
contraction is averaged over the calibration set. Because the contraction
pairs a tensor with its dual, the score is invariant under rotations of
the input structures.

Three baselines ship alongside it: activation norm, weight magnitude, and
seeded random scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .irreps import IrrepsLayout
from .model import (
    AtomicSystem,
    ModelConfig,
    ModelParams,
    build_energy_graph,
    make_batch,
)

__all__ = [
    "ImportanceTable",
    "CalibrationSet",
    "score_gradient_activation",
    "score_activation",
    "score_magnitude",
    "score_random",
    "block_contractions",
]


@dataclass(frozen=True)
class ImportanceTable:
    """One non-negative score per (layer, l, k) block."""

    layouts: tuple[IrrepsLayout, ...]
    scores: tuple[tuple[np.ndarray, ...], ...]  # [t][l] -> (mult[l],)
    sample_count: int = 0

    def __post_init__(self):
        if len(self.scores) != len(self.layouts):
            raise ValueError("scores must cover every layer")
        frozen = []
        for layout, per_l in zip(self.layouts, self.scores):
            if len(per_l) != layout.l_max + 1:
                raise ValueError("scores must cover every order")
            row = []
            for l, arr in enumerate(per_l):
                arr = np.asarray(arr, dtype=np.float64).copy()
                if arr.shape != (layout.mult[l],):
                    raise ValueError(f"score row at l={l} has shape {arr.shape}")
                if (arr < 0).any():
                    raise ValueError("importance scores must be non-negative")
                arr.flags.writeable = False
                row.append(arr)
            frozen.append(tuple(row))
        object.__setattr__(self, "scores", tuple(frozen))

    def entry(self, t: int, l: int, k: int) -> float:
        return float(self.scores[t][l][k])

    @property
    def n_layers(self) -> int:
        return len(self.layouts)

    def to_text(self) -> str:
        lines = []
        for t, layout in enumerate(self.layouts):
            for l, k in layout.blocks():
                lines.append(f"{t} {l} {k} {float(self.scores[t][l][k])!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str, layouts) -> "ImportanceTable":
        layouts = tuple(layouts)
        rows = [[np.zeros(m) for m in lo.mult] for lo in layouts]
        seen = set()
        for ln, raw in enumerate(text.splitlines(), start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 4:
                raise ValueError(f"importance line {ln}: expected 'layer l k score'")
            t, l, k = int(parts[0]), int(parts[1]), int(parts[2])
            try:
                rows[t][l][k] = float(parts[3])
            except (IndexError, ValueError) as exc:
                raise ValueError(f"importance line {ln}: {exc}") from None
            seen.add((t, l, k))
        for t, lo in enumerate(layouts):
            for l, k in lo.blocks():
                if (t, l, k) not in seen:
                    raise ValueError(f"importance file is missing block ({t}, {l}, {k})")
        return ImportanceTable(layouts, tuple(tuple(r) for r in rows))


@dataclass(frozen=True)
class CalibrationSet:
    """Structures importance is accumulated over, with their provenance."""

    systems: tuple[AtomicSystem, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "systems", tuple(self.systems))
        if not self.systems:
            raise ValueError("calibration set must not be empty")

    def __len__(self) -> int:
        return len(self.systems)


def _empty_rows(config: ModelConfig) -> list[list[np.ndarray]]:
    return [[np.zeros(m) for m in lo.mult] for lo in config.layouts()]


def block_contractions(
    params: ModelParams, systems, batch_size: int = 32
) -> list[list[list[np.ndarray]]]:
    """Per-structure sum over atoms and components of (dE/dh) * h.

    Returns values[s][t][l] as a (mult[l],) array, before any absolute
    value. This is the quantity whose magnitude the primary criterion
    averages.
    """
    systems = list(systems)
    config = params.config
    out: list[list[list[np.ndarray]]] = []
    for start in range(0, len(systems), batch_size):
        chunk = systems[start : start + batch_size]
        batch = make_batch(config, chunk)
        tape = Tape(dtype=config.dtype)
        e_struct, _, _, features, _ = build_energy_graph(tape, params, batch)
        total = tape.reduce_sum(e_struct)
        feat_vars = [features[t][l] for t in range(config.n_layers + 1) for l in sorted(features[t])]
        grads = backward(total, feat_vars)
        per_struct = [
            [
                [np.zeros(m) for m in lo.mult]
                for lo in config.layouts()
            ]
            for _ in chunk
        ]
        gi = 0
        for t in range(config.n_layers + 1):
            for l in sorted(features[t]):
                h = features[t][l].value
                g = grads[gi].value
                gi += 1
                per_atom = (g * h).sum(axis=2)  # (n_atoms, mult)
                per_block = np.zeros((batch.n_structs, per_atom.shape[1]))
                np.add.at(per_block, batch.struct_id, per_atom)
                for s in range(batch.n_structs):
                    per_struct[s][t][l] = per_block[s]
        out.extend(per_struct)
    return out


def score_gradient_activation(
    params: ModelParams, calib: CalibrationSet, batch_size: int = 32
) -> ImportanceTable:
    """Primary criterion: mean over structures of |sum_{j,m} (dE/dh) h|."""
    config = params.config
    rows = _empty_rows(config)
    contractions = block_contractions(params, calib.systems, batch_size=batch_size)
    for per_struct in contractions:  # ascending structure order
        for t, per_l in enumerate(per_struct):
            for l, vals in enumerate(per_l):
                rows[t][l] = rows[t][l] + np.abs(vals)
    n = len(calib)
    rows = [[r / n for r in per_l] for per_l in rows]
    return ImportanceTable(
        tuple(config.layouts()), tuple(tuple(r) for r in rows), sample_count=n
    )


def score_activation(
    params: ModelParams, calib: CalibrationSet, batch_size: int = 32
) -> ImportanceTable:
    """Baseline: mean over structures of the per-atom block norms, summed
    over atoms."""
    from .model import forward_feature_tensors

    config = params.config
    rows = _empty_rows(config)
    for system in calib.systems:
        tensors = forward_feature_tensors(params, system)
        for t, ft in enumerate(tensors):
            for l in range(ft.layout.l_max + 1):
                if ft.layout.mult[l] == 0:
                    continue
                view = ft.order_view(l)  # (n_atoms, mult, 2l+1)
                norms = np.sqrt((view**2).sum(axis=2)).sum(axis=0)
                rows[t][l] = rows[t][l] + norms
    n = len(calib)
    rows = [[r / n for r in per_l] for per_l in rows]
    return ImportanceTable(
        tuple(config.layouts()), tuple(tuple(r) for r in rows), sample_count=n
    )


def magnitude_weight_names(
    config: ModelConfig, t: int, l: int, k: int, names: frozenset
) -> list[tuple[str, tuple]]:
    """Named tensor slices whose weights write into block (t, l, k).

    For layer 0 the embedding column feeds the block. For later layers the
    contributors are the block's equivariant-linear (or gate-projection)
    row, its species-residual rows, and the columns of every radial path
    head landing on order l whose channel index matches.
    """
    from .model import layer_paths

    items: list[tuple[str, tuple]] = []
    if t == 0:
        items.append(("embedding", (slice(None), k)))
        return items
    gate = config.gate_count(t)
    regular = config.layer_layout(t).mult[0] - gate
    if l == 0 and k >= regular:
        if f"layer{t}.gate" in names:
            items.append((f"layer{t}.gate", (k - regular, slice(None))))
    else:
        if f"layer{t}.linear.l{l}" in names:
            items.append((f"layer{t}.linear.l{l}", (k, slice(None))))
        if f"layer{t}.residual.l{l}" in names:
            items.append((f"layer{t}.residual.l{l}", (slice(None), k, slice(None))))
    in_layout = config.layer_layout(t - 1)
    for l1, l2, l3 in layer_paths(config, t):
        if l3 != l:
            continue
        if k < in_layout.mult[l2]:
            items.append((f"layer{t}.radial.head.{l1}-{l2}-{l3}", (slice(None), k)))
    return items


def score_magnitude(params: ModelParams) -> ImportanceTable:
    """Baseline: data-free L2 norm of all weights writing into each block."""
    config = params.config
    names = frozenset(params.tensors)
    rows = _empty_rows(config)
    for t, layout in enumerate(config.layouts()):
        for l, k in layout.blocks():
            total = 0.0
            for name, index in magnitude_weight_names(config, t, l, k, names):
                total += float((params[name][index] ** 2).sum())
            rows[t][l][k] = np.sqrt(total)
    return ImportanceTable(tuple(config.layouts()), tuple(tuple(r) for r in rows))


def score_random(layouts, seed: int) -> ImportanceTable:
    """Baseline: reproducible uniform scores in [0, 1)."""
    layouts = tuple(layouts)
    rng = np.random.default_rng(seed)
    rows = []
    for lo in layouts:
        rows.append(tuple(rng.random(m) for m in lo.mult))
    return ImportanceTable(layouts, tuple(rows))
