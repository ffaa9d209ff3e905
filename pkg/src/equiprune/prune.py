"""Target-driven mask generation and structural alignment.

Turning a large checkpoint into a smaller dense one has two halves: decide
which (k, l) blocks survive (rank by importance within each layer/order
group, honoring gate coupling in gated models), then physically slice every
weight tensor so the result is a compact model whose outputs match the
block-masked original exactly. ``verify_slice_exactness`` is the machine
check of that equivalence and runs as a mandatory pipeline stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .importance import ImportanceTable
from .irreps import IrrepsLayout, LayerMask, PruneMask, slice_layout
from .model import (
    AtomicSystem,
    ModelConfig,
    ModelParams,
    layer_paths,
    message_layout,
    param_shapes,
    predict,
)

__all__ = [
    "TargetSpec",
    "SlicePlan",
    "generate_mask",
    "enforce_gate_coupling",
    "make_slice_plan",
    "slice_weights",
    "reconfigure_tensor_product",
    "apply_embedding_policy",
    "apply_plan",
    "depth_prune",
    "remove_species",
    "verify_slice_exactness",
    "SliceReport",
]


class InfeasibleTarget(ValueError):
    """The requested compact architecture cannot be produced."""


@dataclass(frozen=True)
class TargetSpec:
    """Desired channel count per (layer, l), plus surgery policies."""

    counts: tuple[tuple[int, ...], ...]  # [t][l], t=0 is the embedding
    depth: int | None = None
    embedding_policy: str = "reinit"
    readout_substitute: bool = True

    def __post_init__(self):
        object.__setattr__(
            self, "counts", tuple(tuple(int(c) for c in row) for row in self.counts)
        )
        if self.embedding_policy not in ("inherit", "reinit"):
            raise InfeasibleTarget("embedding policy must be 'inherit' or 'reinit'")

    @staticmethod
    def keep_all(config: ModelConfig) -> "TargetSpec":
        return TargetSpec(
            counts=tuple(tuple(lo.mult) for lo in config.layouts()),
            embedding_policy="inherit",
            readout_substitute=False,
        )

    def validate(self, config: ModelConfig) -> None:
        layouts = config.layouts()
        if len(self.counts) != len(layouts):
            raise InfeasibleTarget(
                f"target covers {len(self.counts)} layers, model has {len(layouts)}"
            )
        for t, (row, layout) in enumerate(zip(self.counts, layouts)):
            if len(row) != layout.l_max + 1:
                raise InfeasibleTarget(f"layer {t}: target row must have l_max+1 entries")
            for l, c in enumerate(row):
                if not 0 <= c <= layout.mult[l]:
                    raise InfeasibleTarget(
                        f"layer {t}, l={l}: target {c} exceeds source {layout.mult[l]}"
                    )
        if self.counts[0][0] < 1:
            raise InfeasibleTarget("embedding must keep at least one channel")
        if self.counts[-1][0] < 1:
            raise InfeasibleTarget("final layer must keep l=0 channels for the readout")
        if self.depth is not None and not 1 <= self.depth <= config.n_layers:
            raise InfeasibleTarget(f"depth target {self.depth} out of range")
        # Every retained order needs a source: a coupling path from some
        # retained input order, or the same-order residual.
        for t in range(1, len(self.counts)):
            lmax = config.layer_l_max[t - 1]
            in_row = self.counts[t - 1]
            for l3, c in enumerate(self.counts[t]):
                if c == 0:
                    continue
                via_path = any(
                    in_row[l2] > 0 and abs(l1 - l2) <= l3 <= l1 + l2
                    for l1 in range(lmax + 1)
                    for l2 in range(min(len(in_row) - 1, lmax) + 1)
                )
                via_residual = l3 < len(in_row) and in_row[l3] > 0
                if not (via_path or via_residual):
                    raise InfeasibleTarget(
                        f"layer {t}, l={l3}: retained blocks are unreachable from the input"
                    )

    def to_text(self) -> str:
        lines = []
        for t, row in enumerate(self.counts):
            for l, c in enumerate(row):
                lines.append(f"layer {t} {l} {c}")
        if self.depth is not None:
            lines.append(f"depth {self.depth}")
        lines.append(f"embedding {self.embedding_policy}")
        lines.append(f"readout-substitute {'on' if self.readout_substitute else 'off'}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str, config: ModelConfig) -> "TargetSpec":
        counts = [[m for m in lo.mult] for lo in config.layouts()]
        depth = None
        embedding = "reinit"
        substitute = True
        for ln, raw in enumerate(text.splitlines(), start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split()
            try:
                if parts[0] == "layer":
                    t, l, c = int(parts[1]), int(parts[2]), int(parts[3])
                    counts[t][l] = c
                elif parts[0] == "depth":
                    depth = int(parts[1])
                elif parts[0] == "embedding":
                    embedding = parts[1]
                elif parts[0] == "readout-substitute":
                    substitute = parts[1] == "on"
                else:
                    raise ValueError(f"unknown directive {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise InfeasibleTarget(f"target line {ln}: {exc}") from None
        spec = TargetSpec(
            counts=tuple(tuple(r) for r in counts),
            depth=depth,
            embedding_policy=embedding,
            readout_substitute=substitute,
        )
        spec.validate(config)
        return spec


def generate_mask(table: ImportanceTable, target: TargetSpec, config: ModelConfig) -> PruneMask:
    """Keep the target-many highest-scoring channels per (layer, l) group.

    Ties break toward the lower channel index.
    """
    layouts = config.layouts()
    if tuple(table.layouts) != tuple(layouts):
        raise InfeasibleTarget("importance table does not match the model's layouts")
    target.validate(config)
    layer_masks = []
    for t, layout in enumerate(layouts):
        bits = []
        for l in range(layout.l_max + 1):
            scores = table.scores[t][l]
            want = target.counts[t][l]
            order = np.argsort(-scores, kind="stable")  # stable sort = index tie-break
            keep = np.zeros(layout.mult[l], dtype=np.uint8)
            keep[np.sort(order[:want])] = 1
            bits.append(keep)
        layer_masks.append(LayerMask(layout, tuple(bits)))
    return PruneMask(tuple(layer_masks))


def enforce_gate_coupling(mask: PruneMask, config: ModelConfig) -> PruneMask:
    """Force the gate scalar of every retained l>0 block back on.

    Gate bits of dropped blocks are left exactly as ranked; no other bits
    change. Idempotent.
    """
    if not config.gated:
        raise ValueError("model has no gate association table")
    layer_masks = list(mask.layers)
    for t in range(1, config.n_layers + 1):
        lm = layer_masks[t]
        for l in range(1, lm.layout.l_max + 1):
            for k in range(lm.layout.mult[l]):
                if lm.keep(l, k):
                    gate_k = config.gate_index(t, l, k)
                    if not lm.keep(0, gate_k):
                        lm = lm.with_bit(0, gate_k, 1)
        layer_masks[t] = lm
    return PruneMask(tuple(layer_masks))


def _canonicalize_gates(mask: PruneMask, config: ModelConfig) -> PruneMask:
    """Surgery-time rule: a gate bit equals its block's bit.

    Keeps the positional gate association of the compact architecture
    valid; orphaned gates (kept gate, dropped block) cannot be expressed
    there and are dropped.
    """
    if not config.gated:
        return mask
    layer_masks = list(mask.layers)
    for t in range(1, config.n_layers + 1):
        lm = layer_masks[t]
        for l in range(1, lm.layout.l_max + 1):
            for k in range(lm.layout.mult[l]):
                gate_k = config.gate_index(t, l, k)
                if lm.keep(0, gate_k) != lm.keep(l, k):
                    lm = lm.with_bit(0, gate_k, 1 if lm.keep(l, k) else 0)
        layer_masks[t] = lm
    return PruneMask(tuple(layer_masks))


@dataclass(frozen=True)
class SlicePlan:
    """Everything alignment needs: masks, index maps, surviving paths."""

    source_config: ModelConfig
    target_config: ModelConfig
    mask: PruneMask  # gate-canonicalized
    index_maps: tuple[dict, ...]  # per layer: {l: {old_channel: new_channel}}
    paths: tuple[tuple[tuple[int, int, int], ...], ...]  # per layer t-1
    embedding_policy: str
    embedding_seed: int
    notes: tuple[str, ...] = ()


def make_slice_plan(
    config: ModelConfig,
    mask: PruneMask,
    embedding_policy: str = "inherit",
    embedding_seed: int = 0,
) -> SlicePlan:
    """Derive the compact architecture and index maps from a block mask."""
    if len(mask) != config.n_layers + 1:
        raise InfeasibleTarget("mask must cover the embedding plus every layer")
    notes = []
    canonical = _canonicalize_gates(mask, config)
    if config.gated and any(
        not np.array_equal(a.bits[0], b.bits[0])
        for a, b in zip(mask.layers, canonical.layers)
    ):
        notes.append("orphaned gate scalars were dropped to keep the gate association valid")
    index_maps = []
    new_rows = []
    for t, lm in enumerate(canonical.layers):
        _, imap = slice_layout(lm.layout, lm)
        index_maps.append(imap)
        if t == 0:
            continue
        gate = config.gate_count(t)
        regular = lm.layout.mult[0] - gate
        row = [sum(1 for k in lm.kept_channels(0) if k < regular)]
        for l in range(1, lm.layout.l_max + 1):
            row.append(lm.kept_count(l))
        new_rows.append(tuple(row))
    target_config = replace(
        config,
        layer_channels=tuple(new_rows),
        embedding_channels=canonical[0].kept_count(0),
    )
    paths = tuple(tuple(layer_paths(target_config, t)) for t in range(1, config.n_layers + 1))
    if embedding_policy == "reinit":
        notes.append("embedding re-initialized at the target width; exactness does not apply to it")
    return SlicePlan(
        source_config=config,
        target_config=target_config,
        mask=canonical,
        index_maps=tuple(index_maps),
        paths=paths,
        embedding_policy=embedding_policy,
        embedding_seed=embedding_seed,
        notes=tuple(notes),
    )


def _message_column_map(config: ModelConfig, plan: SlicePlan, t: int) -> dict[int, list[int]]:
    """Per output order: source message columns that survive, in target order."""
    in_mask = plan.mask[t - 1]
    in_layout = config.layer_layout(t - 1)
    offsets: dict[int, int] = {}
    kept: dict[int, list[int]] = {}
    for path in layer_paths(config, t):
        l1, l2, l3 = path
        base = offsets.get(l3, 0)
        if path in plan.paths[t - 1]:
            kept.setdefault(l3, []).extend(base + k for k in in_mask.kept_channels(l2))
        offsets[l3] = base + in_layout.mult[l2]
    return kept


def _kept_rows(config: ModelConfig, plan: SlicePlan, t: int, l: int) -> tuple[list[int], list[int]]:
    """(regular rows, gate rows) kept at (t, l); gate rows only for l=0."""
    lm = plan.mask[t]
    gate = config.gate_count(t)
    regular = lm.layout.mult[0] - gate if l == 0 else lm.layout.mult[l]
    kept = lm.kept_channels(l)
    if l != 0:
        return kept, []
    return [k for k in kept if k < regular], [k - regular for k in kept if k >= regular]


def reconfigure_tensor_product(params: ModelParams, plan: SlicePlan) -> dict[str, np.ndarray]:
    """Slice radial path heads to surviving paths and retained channels.

    Heads of paths whose input order lost all channels, or whose output
    order was dropped entirely, disappear; hidden radial layers are kept
    as-is.
    """
    config = params.config
    out: dict[str, np.ndarray] = {}
    for t in range(1, config.n_layers + 1):
        for i in range(len(config.radial_hidden)):
            name = f"layer{t}.radial.hidden{i}"
            out[name] = params[name]
        in_mask = plan.mask[t - 1]
        for path in plan.paths[t - 1]:
            l1, l2, l3 = path
            name = f"layer{t}.radial.head.{l1}-{l2}-{l3}"
            cols = in_mask.kept_channels(l2)
            out[name] = params[name][:, cols]
    return out


def slice_weights(params: ModelParams, plan: SlicePlan) -> dict[str, np.ndarray]:
    """Slice linear, gate, residual, and readout tensors to the plan.

    Rows follow the retained output channels, columns the retained input
    (or message) channels; surviving entries are bit-identical.
    """
    config = params.config
    out: dict[str, np.ndarray] = {}
    out["self_energy"] = params["self_energy"]
    target_shapes = param_shapes(plan.target_config)
    for t in range(1, config.n_layers + 1):
        msg_cols = _message_column_map(config, plan, t)
        in_mask = plan.mask[t - 1]
        for l in range(config.layer_layout(t).l_max + 1):
            reg_rows, gate_rows = _kept_rows(config, plan, t, l)
            lin_name = f"layer{t}.linear.l{l}"
            if lin_name in target_shapes:
                out[lin_name] = params[lin_name][np.ix_(reg_rows, msg_cols[l])]
            if l == 0:
                gate_name = f"layer{t}.gate"
                if gate_name in target_shapes:
                    out[gate_name] = params[gate_name][np.ix_(gate_rows, msg_cols[0])]
            res_name = f"layer{t}.residual.l{l}"
            if res_name in target_shapes:
                in_cols = in_mask.kept_channels(l)
                out[res_name] = params[res_name][np.ix_(
                    range(len(config.species)), reg_rows, in_cols
                )]
        kept0 = plan.mask[t].kept_channels(0)
        if f"layer{t}.readout.w" in target_shapes:
            out[f"layer{t}.readout.w"] = params[f"layer{t}.readout.w"][kept0]
        if f"layer{t}.readout.w1" in target_shapes:
            out[f"layer{t}.readout.w1"] = params[f"layer{t}.readout.w1"][kept0, :]
            out[f"layer{t}.readout.b1"] = params[f"layer{t}.readout.b1"]
            out[f"layer{t}.readout.w2"] = params[f"layer{t}.readout.w2"]
            out[f"layer{t}.readout.b2"] = params[f"layer{t}.readout.b2"]
    return out


def apply_embedding_policy(params: ModelParams, plan: SlicePlan) -> dict[str, np.ndarray]:
    """Inherit retained embedding columns, or redraw at the target width."""
    if plan.embedding_policy == "inherit":
        cols = plan.mask[0].kept_channels(0)
        return {"embedding": params["embedding"][:, cols]}
    rng = np.random.default_rng(plan.embedding_seed)
    width = plan.target_config.embedding_channels
    return {"embedding": rng.uniform(-1.0, 1.0, size=(len(params.config.species), width))}


def apply_plan(params: ModelParams, plan: SlicePlan) -> ModelParams:
    """Full structural alignment: a dense compact model with target shapes."""
    if plan.source_config != params.config:
        raise InfeasibleTarget("plan was built for a different architecture")
    tensors: dict[str, np.ndarray] = {}
    tensors.update(reconfigure_tensor_product(params, plan))
    tensors.update(slice_weights(params, plan))
    tensors.update(apply_embedding_policy(params, plan))
    return ModelParams(plan.target_config, tensors)


def depth_prune(
    params: ModelParams, new_depth: int, substitute_readout: bool = True, seed: int = 0
) -> ModelParams:
    """Drop layers beyond new_depth; optionally give the new last layer a
    freshly initialized MLP readout in place of its linear one."""
    config = params.config
    if not 1 <= new_depth < config.n_layers:
        raise InfeasibleTarget(
            f"depth target must be in [1, {config.n_layers - 1}], got {new_depth}"
        )
    new_config = replace(
        config,
        layer_l_max=config.layer_l_max[:new_depth],
        layer_channels=config.layer_channels[:new_depth],
        final_readout="mlp" if substitute_readout else "linear",
    )
    tensors: dict[str, np.ndarray] = {}
    for name, arr in params.tensors.items():
        if name.startswith("layer"):
            t = int(name.split(".")[0][len("layer") :])
            if t > new_depth:
                continue
            if t == new_depth and ".readout." in name:
                continue
        tensors[name] = arr
    if substitute_readout:
        rng = np.random.default_rng(seed)
        shapes = param_shapes(new_config)
        for suffix in ("w1", "b1", "w2", "b2"):
            name = f"layer{new_depth}.readout.{suffix}"
            shape = shapes[name]
            fan = shape[0] if suffix in ("w1", "w2") and shape else 1
            bound = 1.0 / math.sqrt(fan)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    else:
        tensors[f"layer{new_depth}.readout.w"] = params[f"layer{new_depth}.readout.w"]
    return ModelParams(new_config, tensors)


def remove_species(params: ModelParams, kept_species) -> ModelParams:
    """Delete embedding rows and residual slices of unused elements.

    Predictions for systems containing only kept species are bit-identical
    before and after.
    """
    kept = [int(z) for z in kept_species]
    config = params.config
    missing = [z for z in kept if z not in config.species]
    if missing:
        raise ValueError(f"species {missing} are not in the model")
    if not kept:
        raise ValueError("at least one species must be kept")
    idx = [i for i, z in enumerate(config.species) if z in set(kept)]
    new_config = replace(config, species=tuple(config.species[i] for i in idx))
    tensors = {}
    for name, arr in params.tensors.items():
        if name in ("embedding", "self_energy") or ".residual." in name:
            tensors[name] = arr[idx]
        else:
            tensors[name] = arr
    return ModelParams(new_config, tensors)


@dataclass(frozen=True)
class SliceReport:
    """Outcome of the exactness verification stage."""

    applicable: bool
    passed: bool
    max_energy_dev: float
    max_force_dev: float
    per_system: tuple[tuple[float, float], ...]
    notes: tuple[str, ...] = ()
    tolerance: float = 1e-12

    def summary(self) -> str:
        if not self.applicable:
            return "exactness verification not applicable: " + "; ".join(self.notes)
        status = "PASS" if self.passed else "FAIL"
        return (
            f"exactness verification {status}: max relative deviation "
            f"energy {self.max_energy_dev:.3e}, force {self.max_force_dev:.3e} "
            f"over {len(self.per_system)} systems (tolerance {self.tolerance:.0e})"
        )


def verify_slice_exactness(
    big: ModelParams,
    mask: PruneMask,
    small: ModelParams,
    systems,
    tolerance: float = 1e-12,
    notes: tuple[str, ...] = (),
) -> SliceReport:
    """Compare the sliced model against the block-masked big model.

    For every test system the energies and forces must agree to within the
    relative tolerance; the masked big model is the independent reference
    defining what structural alignment must preserve.
    """
    per_system = []
    worst_e = 0.0
    worst_f = 0.0
    for system in systems:
        ref = predict(big, system, mask=mask)
        got = predict(small, system)
        e_dev = abs(ref.energy - got.energy) / max(abs(ref.energy), 1e-30)
        f_scale = max(np.abs(ref.forces).max(), 1e-30)
        f_dev = float(np.abs(ref.forces - got.forces).max() / f_scale)
        per_system.append((e_dev, f_dev))
        worst_e = max(worst_e, e_dev)
        worst_f = max(worst_f, f_dev)
    passed = worst_e <= tolerance and worst_f <= tolerance
    return SliceReport(
        applicable=True,
        passed=passed,
        max_energy_dev=worst_e,
        max_force_dev=worst_f,
        per_system=tuple(per_system),
        notes=tuple(notes),
        tolerance=tolerance,
    )
