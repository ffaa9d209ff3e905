"""SO(3)-equivariant interatomic potential.

Per message-passing layer: channel-wise tensor-product messages over
neighbor features and edge harmonics, an order-preserving linear mix of
the per-path message channels, a species-dependent residual projection of
the previous features, an optional gated nonlinearity, and a scalar
readout (linear for intermediate layers, a small MLP for the last).
Energies sum per-atom contributions from every layer plus a per-species
self-energy; forces are the exact reverse-mode gradient of the energy
with respect to positions.

The message at order l3 concatenates one channel block per admissible
coupling path (l1, l2, l3); the per-path blocks are what pruning slices
or deletes. Open boundary conditions only; neighbor lists are brute-force
cutoff pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import so3
from .autodiff import ArrayOps, Tape, Var, backward, silu
from .irreps import FeatureTensor, IrrepsLayout, LayerMask, PruneMask

__all__ = [
    "ModelConfig",
    "ModelParams",
    "AtomicSystem",
    "Prediction",
    "uniform_config",
    "build_model",
    "param_shapes",
    "radial_basis",
    "neighbor_pairs",
    "predict",
    "predict_batch",
    "receptive_field",
    "tensor_product_message",
    "equivariant_linear",
    "species_residual",
    "gated_nonlinearity",
    "readout",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; every parameter shape derives from it."""

    species: tuple[int, ...]
    r_cut: float
    layer_l_max: tuple[int, ...]
    layer_channels: tuple[tuple[int, ...], ...]  # per layer, per l, gate channels excluded
    embedding_channels: int
    n_radial_basis: int = 8
    radial_hidden: tuple[int, ...] = (16,)
    avg_num_neighbors: float = 6.0
    gated: bool = False
    readout_hidden: int = 16
    final_readout: str = "mlp"  # depth pruning without substitution leaves "linear"
    precision: str = "fp64"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(int(z) for z in self.species))
        object.__setattr__(self, "layer_l_max", tuple(int(l) for l in self.layer_l_max))
        object.__setattr__(
            self,
            "layer_channels",
            tuple(tuple(int(c) for c in row) for row in self.layer_channels),
        )
        object.__setattr__(self, "radial_hidden", tuple(int(w) for w in self.radial_hidden))
        if len(self.species) == 0:
            raise ValueError("at least one species is required")
        if len(set(self.species)) != len(self.species):
            raise ValueError("species list contains duplicates")
        if self.r_cut <= 0:
            raise ValueError("r_cut must be positive")
        if self.n_layers < 1:
            raise ValueError("need at least one message-passing layer")
        if len(self.layer_channels) != self.n_layers:
            raise ValueError("layer_channels must match layer_l_max in length")
        for t, (lmax, row) in enumerate(zip(self.layer_l_max, self.layer_channels)):
            if lmax < 0 or len(row) != lmax + 1:
                raise ValueError(f"layer {t + 1}: channel row must have l_max+1 entries")
        if self.embedding_channels < 1:
            raise ValueError("embedding needs at least one channel")
        if self.layer_channels[-1][0] < 1:
            raise ValueError("final layer must keep l=0 channels for the readout")
        if self.precision not in ("fp64", "fp32"):
            raise ValueError("precision must be 'fp64' or 'fp32'")
        if self.final_readout not in ("mlp", "linear"):
            raise ValueError("final_readout must be 'mlp' or 'linear'")
        if not self.radial_hidden:
            raise ValueError("radial MLP needs at least one hidden layer")

    @property
    def n_layers(self) -> int:
        return len(self.layer_l_max)

    @property
    def dtype(self):
        return np.float64 if self.precision == "fp64" else np.float32

    def gate_count(self, t: int) -> int:
        """Number of gate scalars appended to layer t's l=0 channels."""
        if not self.gated or t == 0:
            return 0
        return sum(self.layer_channels[t - 1][1:])

    def layer_layout(self, t: int) -> IrrepsLayout:
        """Feature layout of h^(t); t=0 is the embedding output."""
        if t == 0:
            return IrrepsLayout((self.embedding_channels,))
        mult = list(self.layer_channels[t - 1])
        mult[0] += self.gate_count(t)
        return IrrepsLayout(tuple(mult))

    def layouts(self) -> list[IrrepsLayout]:
        return [self.layer_layout(t) for t in range(self.n_layers + 1)]

    def gate_index(self, t: int, l: int, k: int) -> int:
        """l=0 channel index of the gate for block (l, k) of layer t."""
        if not self.gated or l == 0:
            raise ValueError("gates exist only for l>0 blocks of gated models")
        row = self.layer_channels[t - 1]
        if not 1 <= l <= self.layer_l_max[t - 1] or not 0 <= k < row[l]:
            raise IndexError(f"no block (l={l}, k={k}) at layer {t}")
        return row[0] + sum(row[1:l]) + k

    def describe(self) -> str:
        used_l = 0
        for row in self.layer_channels:
            for l, c in enumerate(row):
                if c > 0:
                    used_l = max(used_l, l)
        return f"Layer{self.n_layers} L{used_l} C{self.layer_channels[0][0]}"

    def to_dict(self) -> dict:
        return {
            "species": list(self.species),
            "r_cut": self.r_cut,
            "layer_l_max": list(self.layer_l_max),
            "layer_channels": [list(r) for r in self.layer_channels],
            "embedding_channels": self.embedding_channels,
            "n_radial_basis": self.n_radial_basis,
            "radial_hidden": list(self.radial_hidden),
            "avg_num_neighbors": self.avg_num_neighbors,
            "gated": self.gated,
            "readout_hidden": self.readout_hidden,
            "final_readout": self.final_readout,
            "precision": self.precision,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            species=tuple(d["species"]),
            r_cut=float(d["r_cut"]),
            layer_l_max=tuple(d["layer_l_max"]),
            layer_channels=tuple(tuple(r) for r in d["layer_channels"]),
            embedding_channels=int(d["embedding_channels"]),
            n_radial_basis=int(d["n_radial_basis"]),
            radial_hidden=tuple(d["radial_hidden"]),
            avg_num_neighbors=float(d["avg_num_neighbors"]),
            gated=bool(d["gated"]),
            readout_hidden=int(d["readout_hidden"]),
            final_readout=str(d.get("final_readout", "mlp")),
            precision=str(d["precision"]),
            seed=int(d["seed"]),
        )


def uniform_config(
    species=(1, 2),
    r_cut: float = 1.5,
    n_layers: int = 2,
    l_max: int = 1,
    channels: int = 8,
    **kwargs,
) -> ModelConfig:
    """The LayerX-LY-CZ family: same l_max and channel count at every slot."""
    return ModelConfig(
        species=tuple(species),
        r_cut=r_cut,
        layer_l_max=(l_max,) * n_layers,
        layer_channels=((channels,) * (l_max + 1),) * n_layers,
        embedding_channels=channels,
        **kwargs,
    )


def layer_paths(config: ModelConfig, t: int) -> list[tuple[int, int, int]]:
    """Admissible coupling paths (l1, l2, l3) of layer t, in fixed order.

    l1 indexes the edge harmonics, l2 the input feature order, l3 the
    output order; all are capped by the layer's l_max and the selection
    rule, and l2 must have input channels.
    """
    lmax = config.layer_l_max[t - 1]
    in_layout = config.layer_layout(t - 1)
    out_layout = config.layer_layout(t)
    paths = []
    for l1 in range(lmax + 1):
        for l2 in in_layout.orders():
            if l2 > lmax:
                continue
            for l3 in out_layout.orders():
                if l3 > lmax:
                    continue
                if abs(l1 - l2) <= l3 <= l1 + l2:
                    paths.append((l1, l2, l3))
    return paths


def message_layout(config: ModelConfig, t: int) -> IrrepsLayout:
    """Layout of the concatenated per-path message channels at layer t."""
    in_layout = config.layer_layout(t - 1)
    mult = [0] * (config.layer_l_max[t - 1] + 1)
    for _, l2, l3 in layer_paths(config, t):
        mult[l3] += in_layout.mult[l2]
    return IrrepsLayout(tuple(mult))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named tensor's shape, in canonical order.

    This is the single source of truth used by initialization, surgery,
    and the checkpoint container.
    """
    n_species = len(config.species)
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["embedding"] = (n_species, config.embedding_channels)
    shapes["self_energy"] = (n_species,)
    for t in range(1, config.n_layers + 1):
        in_layout = config.layer_layout(t - 1)
        out_layout = config.layer_layout(t)
        msg = message_layout(config, t)
        widths = (config.n_radial_basis,) + config.radial_hidden
        for i in range(len(config.radial_hidden)):
            shapes[f"layer{t}.radial.hidden{i}"] = (widths[i], widths[i + 1])
        h_last = config.radial_hidden[-1]
        for l1, l2, l3 in layer_paths(config, t):
            shapes[f"layer{t}.radial.head.{l1}-{l2}-{l3}"] = (h_last, in_layout.mult[l2])
        gate = config.gate_count(t)
        for l in out_layout.orders():
            rows = out_layout.mult[l] - (gate if l == 0 else 0)
            if rows > 0 and msg.mult[l] > 0:
                shapes[f"layer{t}.linear.l{l}"] = (rows, msg.mult[l])
        if gate > 0 and msg.mult[0] > 0:
            shapes[f"layer{t}.gate"] = (gate, msg.mult[0])
        for l in out_layout.orders():
            rows = out_layout.mult[l] - (gate if l == 0 else 0)
            if rows > 0 and l <= in_layout.l_max and in_layout.mult[l] > 0:
                shapes[f"layer{t}.residual.l{l}"] = (n_species, rows, in_layout.mult[l])
        scalars = out_layout.mult[0]
        if t < config.n_layers or config.final_readout == "linear":
            shapes[f"layer{t}.readout.w"] = (scalars,)
        else:
            shapes[f"layer{t}.readout.w1"] = (scalars, config.readout_hidden)
            shapes[f"layer{t}.readout.b1"] = (config.readout_hidden,)
            shapes[f"layer{t}.readout.w2"] = (config.readout_hidden,)
            shapes[f"layer{t}.readout.b2"] = ()
    return shapes


_FAN_IN_LAST = {"embedding", "self_energy"}


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if not shape or name in _FAN_IN_LAST:
        return 1
    if name.endswith(".readout.b1") or name.endswith(".readout.b2"):
        return 1
    if ".residual." in name:
        return shape[-1]
    if ".linear." in name or name.endswith(".gate"):
        return shape[-1]
    if ".radial." in name:
        return shape[0]
    if name.endswith(".readout.w") or name.endswith(".readout.w1"):
        return shape[0]
    if name.endswith(".readout.w2"):
        return shape[0]
    return shape[-1]


@dataclass(frozen=True)
class ModelParams:
    """Named weight tensors (float64 masters) plus their architecture."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"tensor names mismatch: missing {missing}, extra {extra}")
        frozen = {}
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr = arr.copy()
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def n_parameters(self) -> int:
        return sum(int(np.prod(a.shape)) for a in self.tensors.values())

    def with_tensors(self, **updates: np.ndarray) -> "ModelParams":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ModelParams(self.config, tensors)


def build_model(config: ModelConfig) -> ModelParams:
    """Deterministically initialize all weights from the config seed.

    Uniform(-a, a) with a = 1/sqrt(fan_in), drawn in canonical tensor
    order.
    """
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        bound = 1.0 / math.sqrt(_fan_in(name, shape))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# Systems and geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtomicSystem:
    """A finite cluster: positions, species, optional reference labels."""

    positions: np.ndarray
    species: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        species = np.asarray(self.species, dtype=np.int64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError("positions must be (n_atoms, 3)")
        if species.shape != (positions.shape[0],):
            raise ValueError("species must be (n_atoms,)")
        if positions.shape[0] < 1:
            raise ValueError("a system needs at least one atom")
        forces = self.forces
        if forces is not None:
            forces = np.asarray(forces, dtype=np.float64)
            if forces.shape != positions.shape:
                raise ValueError("forces must match positions in shape")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "forces", forces)

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class Prediction:
    energy: float
    per_atom: np.ndarray
    forces: np.ndarray


def species_index(config: ModelConfig, species: np.ndarray) -> np.ndarray:
    table = {z: i for i, z in enumerate(config.species)}
    try:
        return np.array([table[int(z)] for z in species], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"species {exc.args[0]} is not in the model's species list") from None


def neighbor_pairs(positions: np.ndarray, r_cut: float) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges (sender j, receiver i) with 0 < |r_i - r_j| < r_cut.

    Edges come out sorted by receiver then sender, which fixes the
    reduction order everywhere downstream.
    """
    n = positions.shape[0]
    if n == 1:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty
    diff = positions[:, None, :] - positions[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    mask = (dist2 < r_cut * r_cut) & ~np.eye(n, dtype=bool)
    recv, send = np.nonzero(mask)
    return send.astype(np.intp), recv.astype(np.intp)


def receptive_field(config: ModelConfig) -> float:
    """Maximum distance over which any atom can influence another's energy."""
    return config.n_layers * config.r_cut


def radial_basis(config: ModelConfig, r: float) -> np.ndarray:
    """Gaussian radial features under a C^2 cutoff envelope.

    Centers sit at k*r_cut/n for k=1..n with width sigma = r_cut/n; the
    envelope is the quintic 1 - 10u^3 + 15u^4 - 6u^5 in u = r/r_cut,
    identically zero (with zero first and second derivative) at and
    beyond the cutoff.
    """
    if r <= 0:
        raise ValueError("interatomic distance must be positive")
    n = config.n_radial_basis
    centers = np.linspace(config.r_cut / n, config.r_cut, n)
    sigma = config.r_cut / n
    u = r / config.r_cut
    if u >= 1.0:
        return np.zeros(n)
    env = 1.0 + u**3 * (-10.0 + u * (15.0 - 6.0 * u))
    return np.exp(-(((r - centers) / sigma) ** 2)) * env


# ---------------------------------------------------------------------------
# Backend-generic forward
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _cg_f64(l1: int, l2: int, l3: int) -> np.ndarray:
    return so3.clebsch_gordan(l1, l2, l3)


def _raw(x):
    return x.value if isinstance(x, Var) else x


def _edge_scalars(ops, config: ModelConfig, positions, send, recv):
    """Edge vectors -> (unit components, radial basis)."""
    pos_s = ops.gather(positions, send)
    pos_r = ops.gather(positions, recv)
    vec = ops.add(pos_r, ops.scale(pos_s, -1.0))
    r2 = ops.reduce_sum(ops.mul(vec, vec), axis=1)
    r = ops.pow_const(r2, 0.5)
    inv_r = ops.reshape(ops.pow_const(r, -1.0), (-1, 1))
    unit = ops.mul(vec, inv_r)
    x = ops.reshape(ops.narrow(unit, 1, 0, 1), (-1,))
    y = ops.reshape(ops.narrow(unit, 1, 1, 1), (-1,))
    z = ops.reshape(ops.narrow(unit, 1, 2, 1), (-1,))

    n = config.n_radial_basis
    centers = np.linspace(config.r_cut / n, config.r_cut, n)
    sigma = config.r_cut / n
    u = ops.scale(r, 1.0 / config.r_cut)
    poly = ops.shift(ops.mul(u, ops.shift(ops.scale(u, -6.0), 15.0)), -10.0)
    u3 = ops.mul(u, ops.mul(u, u))
    env = ops.shift(ops.mul(u3, poly), 1.0)
    inside = ops.constant((np.asarray(_raw(r)) < config.r_cut).astype(np.float64))
    env = ops.mul(env, inside)
    dr = ops.add(ops.reshape(r, (-1, 1)), ops.constant(-centers))
    g = ops.exp(ops.scale(ops.mul(dr, dr), -1.0 / sigma**2))
    basis = ops.mul(g, ops.reshape(env, (-1, 1)))
    return (x, y, z), basis


def _sh_edge(ops, l_max: int, xyz) -> list:
    """Stacked (n_edges, 2l+1) harmonics per order."""
    x, y, z = xyz
    comps = so3.sh_components(l_max, x, y, z)
    out = []
    for block in comps:
        cols = [ops.reshape(c, (-1, 1)) for c in block]
        out.append(ops.concat(cols, 1))
    return out


def _radial_path_weights(ops, config: ModelConfig, pt, t: int, basis):
    """Per-path, per-channel radial weights R(r); bias-free so every
    weight vanishes smoothly at the cutoff."""
    h = basis
    for i in range(len(config.radial_hidden)):
        h = silu(ops, ops.einsum("io,ei->eo", pt[f"layer{t}.radial.hidden{i}"], h))
    weights = {}
    for path in layer_paths(config, t):
        name = f"layer{t}.radial.head.{path[0]}-{path[1]}-{path[2]}"
        if name in pt:
            weights[path] = ops.einsum("ik,ei->ek", pt[name], h)
    return weights


def _tp_message(ops, config: ModelConfig, t: int, feats, sh, path_w, send, recv, n_atoms):
    """Channel-wise tensor-product aggregation into per-path blocks."""
    contribs: dict[int, list] = {}
    for path in layer_paths(config, t):
        l1, l2, l3 = path
        if l2 not in feats or path not in path_w:
            continue
        h_j = ops.gather(feats[l2], send)
        kernel = ops.einsum("pqr,ep->eqr", ops.constant(_cg_f64(l1, l2, l3)), sh[l1])
        mixed = ops.einsum("ekq,eqr->ekr", h_j, kernel)
        w = ops.reshape(path_w[path], (-1, feats[l2].shape[1], 1))
        contribs.setdefault(l3, []).append(ops.mul(mixed, w))
    message = {}
    for l3, parts in sorted(contribs.items()):
        stacked = ops.concat(parts, 1)
        pooled = ops.scatter_add(stacked, recv, n_atoms)
        message[l3] = ops.scale(pooled, 1.0 / config.avg_num_neighbors)
    return message


def _layer_update(ops, config: ModelConfig, pt, t: int, feats, message, species_idx):
    """Linear mix + species residual + optional gated nonlinearity."""
    out_layout = config.layer_layout(t)
    in_layout = config.layer_layout(t - 1)
    gate = config.gate_count(t)
    n_atoms = feats[next(iter(feats))].shape[0]
    pre = {}
    for l in out_layout.orders():
        rows = out_layout.mult[l] - (gate if l == 0 else 0)
        if rows == 0:
            continue
        acc = None
        lin_name = f"layer{t}.linear.l{l}"
        if lin_name in pt and l in message:
            acc = ops.einsum("km,amr->akr", pt[lin_name], message[l])
        res_name = f"layer{t}.residual.l{l}"
        if res_name in pt and l in feats:
            w_z = ops.gather(pt[res_name], species_idx)
            res = ops.einsum("aok,akr->aor", w_z, feats[l])
            acc = res if acc is None else ops.add(acc, res)
        if acc is None:
            acc = ops.constant(np.zeros((n_atoms, rows, 2 * l + 1)))
        pre[l] = acc
    gate_pre = None
    if gate > 0 and f"layer{t}.gate" in pt and 0 in message:
        gate_pre = ops.einsum("gm,amr->agr", pt[f"layer{t}.gate"], message[0])
    elif gate > 0:
        gate_pre = ops.constant(np.zeros((n_atoms, gate, 1)))

    out = {}
    if config.gated:
        scalars = pre.get(0)
        full0 = ops.concat([p for p in (scalars, gate_pre) if p is not None], 1)
        out[0] = silu(ops, full0)
        row = config.layer_channels[t - 1]
        for l in out_layout.orders():
            if l == 0:
                continue
            start = sum(row[1:l])
            g_l = ops.tanh(ops.narrow(gate_pre, 1, start, row[l]))
            out[l] = ops.mul(pre[l], g_l)
    else:
        out = dict(pre)
    return out


def _mask_feats(ops, layout: IrrepsLayout, feats, layer_mask: LayerMask):
    masked = {}
    for l, h in feats.items():
        bits = layer_mask.bits[l].astype(np.float64).reshape(1, -1, 1)
        masked[l] = ops.mul(h, ops.constant(bits))
    return masked


def _readout(ops, config: ModelConfig, pt, t: int, feats):
    """Per-atom scalar energy from the l=0 channels only."""
    h0 = feats[0]
    scalars = ops.reshape(h0, (-1, h0.shape[1]))
    if t < config.n_layers or config.final_readout == "linear":
        return ops.einsum("k,ak->a", pt[f"layer{t}.readout.w"], scalars)
    hidden = ops.add(
        ops.einsum("kh,ak->ah", pt[f"layer{t}.readout.w1"], scalars),
        pt[f"layer{t}.readout.b1"],
    )
    hidden = silu(ops, hidden)
    return ops.add(
        ops.einsum("h,ah->a", pt[f"layer{t}.readout.w2"], hidden),
        pt[f"layer{t}.readout.b2"],
    )


def forward_energy(
    ops,
    config: ModelConfig,
    pt,
    positions,
    species_idx: np.ndarray,
    send: np.ndarray,
    recv: np.ndarray,
    mask: PruneMask | None = None,
):
    """Per-atom energies plus the per-layer feature tensors.

    ``pt`` maps tensor names to backend values; ``positions`` is a backend
    (n_atoms, 3) value. Returns (e_atoms, features) where features[t] is
    the dict {l: (n_atoms, mult, 2l+1)} of h^(t) exactly as it enters the
    next layer (post nonlinearity, post mask).
    """
    n_atoms = len(species_idx)
    if mask is not None and len(mask) != config.n_layers + 1:
        raise ValueError("mask must cover the embedding plus every layer")
    xyz, basis = _edge_scalars(ops, config, positions, send, recv)
    sh = _sh_edge(ops, max(config.layer_l_max), xyz)

    h0 = ops.gather(pt["embedding"], species_idx)
    feats = {0: ops.reshape(h0, (n_atoms, config.embedding_channels, 1))}
    if mask is not None:
        feats = _mask_feats(ops, config.layer_layout(0), feats, mask[0])
    features = [feats]

    e_atoms = ops.gather(pt["self_energy"], species_idx)
    for t in range(1, config.n_layers + 1):
        path_w = _radial_path_weights(ops, config, pt, t, basis)
        message = _tp_message(ops, config, t, feats, sh, path_w, send, recv, n_atoms)
        feats = _layer_update(ops, config, pt, t, feats, message, species_idx)
        if mask is not None:
            feats = _mask_feats(ops, config.layer_layout(t), feats, mask[t])
        features.append(feats)
        e_atoms = ops.add(e_atoms, _readout(ops, config, pt, t, feats))
    return e_atoms, features


# ---------------------------------------------------------------------------
# Batched graph construction and prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """A disjoint union of systems flattened into one atom list."""

    positions: np.ndarray
    species_idx: np.ndarray
    send: np.ndarray
    recv: np.ndarray
    struct_id: np.ndarray
    n_structs: int
    sizes: tuple[int, ...]


def make_batch(config: ModelConfig, systems) -> Batch:
    systems = list(systems)
    positions = np.concatenate([s.positions for s in systems], axis=0)
    species_idx = np.concatenate([species_index(config, s.species) for s in systems])
    sends, recvs, struct = [], [], []
    offset = 0
    for i, s in enumerate(systems):
        sd, rv = neighbor_pairs(s.positions, config.r_cut)
        sends.append(sd + offset)
        recvs.append(rv + offset)
        struct.append(np.full(s.n_atoms, i, dtype=np.intp))
        offset += s.n_atoms
    return Batch(
        positions=positions,
        species_idx=species_idx,
        send=np.concatenate(sends) if sends else np.zeros(0, dtype=np.intp),
        recv=np.concatenate(recvs) if recvs else np.zeros(0, dtype=np.intp),
        struct_id=np.concatenate(struct),
        n_structs=len(systems),
        sizes=tuple(s.n_atoms for s in systems),
    )


def build_energy_graph(
    tape: Tape,
    params: ModelParams,
    batch: Batch,
    mask: PruneMask | None = None,
    trainable: bool = False,
):
    """Tape the batched energy.

    Returns (e_struct, e_atoms, positions, features, pvars); pvars holds
    the parameter leaves (trainable or constant).
    """
    pvars = {
        name: tape.leaf(arr, requires_grad=trainable) for name, arr in params.tensors.items()
    }
    pos = tape.leaf(batch.positions, requires_grad=True)
    e_atoms, features = forward_energy(
        tape, params.config, pvars, pos, batch.species_idx, batch.send, batch.recv, mask
    )
    e_struct = tape.scatter_add(
        tape.reshape(e_atoms, (-1, 1)), batch.struct_id, batch.n_structs
    )
    e_struct = tape.reshape(e_struct, (-1,))
    return e_struct, e_atoms, pos, features, pvars


def predict(params: ModelParams, system: AtomicSystem, mask: PruneMask | None = None) -> Prediction:
    """Energy, per-atom energies, and exact-gradient forces for one system."""
    return predict_batch(params, [system], mask)[0]


def predict_batch(
    params: ModelParams, systems, mask: PruneMask | None = None
) -> list[Prediction]:
    systems = list(systems)
    config = params.config
    batch = make_batch(config, systems)
    tape = Tape(dtype=config.dtype)
    e_struct, e_atoms, pos, _, _ = build_energy_graph(tape, params, batch, mask)
    total = tape.reduce_sum(e_struct)
    (g_pos,) = backward(total, [pos])
    forces = -g_pos.value
    out = []
    offset = 0
    for i, s in enumerate(systems):
        n = s.n_atoms
        out.append(
            Prediction(
                energy=float(e_struct.value[i]),
                per_atom=e_atoms.value[offset : offset + n].copy(),
                forces=forces[offset : offset + n].copy(),
            )
        )
        offset += n
    return out


def untaped_energy(
    params: ModelParams, system: AtomicSystem, mask: PruneMask | None = None
) -> float:
    """Plain-numpy energy evaluation (no tape), bitwise equal to predict."""
    config = params.config
    ops = ArrayOps(dtype=config.dtype)
    send, recv = neighbor_pairs(system.positions, config.r_cut)
    pt = {k: ops.constant(v) for k, v in params.tensors.items()}
    pos = ops.constant(system.positions)
    e_atoms, _ = forward_energy(
        ops, config, pt, pos, species_index(config, system.species), send, recv, mask
    )
    # Same sequential reduction as the taped per-structure scatter.
    total = ops.scatter_add(
        ops.reshape(e_atoms, (-1, 1)), np.zeros(system.n_atoms, dtype=np.intp), 1
    )
    return float(total[0, 0])


def forward_feature_tensors(
    params: ModelParams, system: AtomicSystem, mask: PruneMask | None = None
) -> list[FeatureTensor]:
    """Per-layer features h^(t) as flat FeatureTensors (numpy path)."""
    config = params.config
    ops = ArrayOps(dtype=config.dtype)
    send, recv = neighbor_pairs(system.positions, config.r_cut)
    pt = {k: ops.constant(v) for k, v in params.tensors.items()}
    _, features = forward_energy(
        ops, config, pt, ops.constant(system.positions),
        species_index(config, system.species), send, recv, mask,
    )
    return [
        feats_to_tensor(config.layer_layout(t), features[t], system.n_atoms)
        for t in range(config.n_layers + 1)
    ]


def feats_to_tensor(layout: IrrepsLayout, feats: dict, n_atoms: int) -> FeatureTensor:
    values = np.zeros((n_atoms, layout.width))
    for l in layout.orders():
        if l in feats:
            off = layout.order_offset(l)
            width = layout.mult[l] * (2 * l + 1)
            values[:, off : off + width] = _raw(feats[l]).reshape(n_atoms, width)
    return FeatureTensor(layout, values)


def tensor_to_feats(ft: FeatureTensor) -> dict[int, np.ndarray]:
    return {l: ft.order_view(l).copy() for l in ft.layout.orders()}


# ---------------------------------------------------------------------------
# Public single-operation views (numpy path)
# ---------------------------------------------------------------------------


def tensor_product_message(
    params: ModelParams, t: int, h: FeatureTensor, system: AtomicSystem
) -> FeatureTensor:
    """Layer t's neighbor aggregation, as a flat tensor in the message layout."""
    config = params.config
    if h.layout != config.layer_layout(t - 1):
        raise ValueError("feature layout does not match the layer's input layout")
    ops = ArrayOps(dtype=config.dtype)
    send, recv = neighbor_pairs(system.positions, config.r_cut)
    pt = {k: ops.constant(v) for k, v in params.tensors.items()}
    xyz, basis = _edge_scalars(ops, config, ops.constant(system.positions), send, recv)
    sh = _sh_edge(ops, config.layer_l_max[t - 1], xyz)
    path_w = _radial_path_weights(ops, config, pt, t, basis)
    feats = tensor_to_feats(h)
    message = _tp_message(ops, config, t, feats, sh, path_w, send, recv, system.n_atoms)
    return feats_to_tensor(message_layout(config, t), message, system.n_atoms)


def equivariant_linear(params: ModelParams, t: int, message: FeatureTensor) -> FeatureTensor:
    """Per-order channel mixing of the message blocks (gate rows included)."""
    config = params.config
    if message.layout != message_layout(config, t):
        raise ValueError("input does not match the layer's message layout")
    ops = ArrayOps(dtype=config.dtype)
    out_layout = config.layer_layout(t)
    gate = config.gate_count(t)
    feats = tensor_to_feats(message)
    out = {}
    for l in out_layout.orders():
        rows = out_layout.mult[l] - (gate if l == 0 else 0)
        name = f"layer{t}.linear.l{l}"
        parts = []
        if rows > 0 and name in params.tensors and l in feats:
            parts.append(np.einsum("km,amr->akr", params[name], feats[l]))
        elif rows > 0:
            parts.append(np.zeros((message.n_atoms, rows, 2 * l + 1)))
        if l == 0 and gate > 0:
            if f"layer{t}.gate" in params.tensors and 0 in feats:
                parts.append(np.einsum("gm,amr->agr", params[f"layer{t}.gate"], feats[0]))
            else:
                parts.append(np.zeros((message.n_atoms, gate, 1)))
        out[l] = np.concatenate(parts, axis=1)
    return feats_to_tensor(out_layout, out, message.n_atoms)


def species_residual(
    params: ModelParams, t: int, h: FeatureTensor, species: np.ndarray
) -> FeatureTensor:
    """Per-atom, per-species channel mixing of the previous features.

    Output is in the layer's feature layout; gate channels (which have no
    residual path) are zero.
    """
    config = params.config
    if h.layout != config.layer_layout(t - 1):
        raise ValueError("feature layout does not match the layer's input layout")
    idx = species_index(config, species)
    out_layout = config.layer_layout(t)
    gate = config.gate_count(t)
    feats = tensor_to_feats(h)
    out = {}
    for l in out_layout.orders():
        rows = out_layout.mult[l] - (gate if l == 0 else 0)
        name = f"layer{t}.residual.l{l}"
        block = np.zeros((h.n_atoms, rows, 2 * l + 1))
        if name in params.tensors and l in feats:
            block = np.einsum("aok,akr->aor", params[name][idx], feats[l])
        if l == 0 and gate > 0:
            block = np.concatenate([block, np.zeros((h.n_atoms, gate, 1))], axis=1)
        out[l] = block
    return feats_to_tensor(out_layout, out, h.n_atoms)


def gated_nonlinearity(config: ModelConfig, t: int, pre: FeatureTensor) -> FeatureTensor:
    """Scalars through silu; each l>0 block times tanh of its gate scalar."""
    if not config.gated:
        raise ValueError("model has no gated nonlinearity")
    layout = config.layer_layout(t)
    if pre.layout != layout:
        raise ValueError("pre-activation layout mismatch")
    row = config.layer_channels[t - 1]
    values = pre.values.copy()
    h0 = pre.order_view(0)
    gates = h0[:, row[0] :, 0]
    off0 = layout.order_offset(0)
    values[:, off0 : off0 + layout.mult[0]] = _silu_np(h0[:, :, 0])
    for l in layout.orders():
        if l == 0:
            continue
        start = sum(row[1:l])
        mult = np.tanh(gates[:, start : start + row[l]])[:, :, None]
        off = layout.order_offset(l)
        width = layout.mult[l] * (2 * l + 1)
        block = pre.values[:, off : off + width].reshape(pre.n_atoms, layout.mult[l], 2 * l + 1)
        values[:, off : off + width] = (block * mult).reshape(pre.n_atoms, width)
    return FeatureTensor(layout, values)


def _silu_np(x: np.ndarray) -> np.ndarray:
    return x * ArrayOps.sigmoid(x)


def readout(params: ModelParams, t: int, h: FeatureTensor) -> np.ndarray:
    """Per-atom scalar energies from layer t's l=0 channels."""
    config = params.config
    if h.layout != config.layer_layout(t):
        raise ValueError("feature layout does not match layer output layout")
    ops = ArrayOps(dtype=config.dtype)
    pt = {k: ops.constant(v) for k, v in params.tensors.items()}
    return _readout(ops, config, pt, t, {0: h.order_view(0)})
