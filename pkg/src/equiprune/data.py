"""Synthetic labeled corpora and calibration-set sampling.

Structures are random finite clusters (uniform in a box with a minimum
separation, grouped into conformation families around a base geometry).
Labels come either from a frozen randomly initialized teacher model, whose
energies and exact-gradient forces give higher-order features real signal,
or from a smooth truncated Lennard-Jones pair potential with analytic
forces.

Corpus files are JSON lines: a metadata header record followed by one
record per structure with keys positions, species, energy, forces, group.
Floats serialize via repr, so round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .importance import CalibrationSet
from .model import AtomicSystem, ModelConfig, ModelParams, build_model, predict_batch

__all__ = [
    "Corpus",
    "CorpusRecord",
    "generate_corpus",
    "calibration_sample",
    "read_corpus",
    "write_corpus",
    "pair_potential",
    "default_teacher_config",
    "random_cluster",
]

LJ_EPSILON = 0.25
LJ_SIGMA = 0.8
LJ_CUTOFF = 2.0


@dataclass(frozen=True)
class CorpusRecord:
    system: AtomicSystem
    group: int

    def __post_init__(self):
        if self.system.energy is None or self.system.forces is None:
            raise ValueError("corpus records must carry energy and force labels")
        if not np.isfinite(self.system.energy) or not np.isfinite(self.system.forces).all():
            raise ValueError("corpus labels must be finite")


@dataclass(frozen=True)
class Corpus:
    records: tuple[CorpusRecord, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def systems(self) -> list[AtomicSystem]:
        return [r.system for r in self.records]

    def groups(self) -> list[int]:
        return [r.group for r in self.records]


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def default_teacher_config(species=(1, 2), seed: int = 12345) -> ModelConfig:
    """The frozen labeling model: one size up from the toy students."""
    from .model import uniform_config

    return uniform_config(
        species=tuple(species), r_cut=1.5, n_layers=2, l_max=2, channels=16, seed=seed
    )


def random_cluster(
    rng: np.random.Generator,
    n_atoms: int,
    species: tuple[int, ...],
    min_separation: float = 0.7,
    density: float = 0.8,
    max_tries: int = 2000,
) -> AtomicSystem:
    """Uniform-in-a-box cluster with rejection on the minimum separation."""
    side = max((n_atoms / density) ** (1.0 / 3.0), min_separation * 1.5)
    positions = np.zeros((n_atoms, 3))
    placed = 0
    tries = 0
    while placed < n_atoms:
        candidate = rng.uniform(0.0, side, size=3)
        if placed == 0 or (
            np.linalg.norm(positions[:placed] - candidate, axis=1).min() >= min_separation
        ):
            positions[placed] = candidate
            placed += 1
        tries += 1
        if tries > max_tries * n_atoms:
            raise ValueError(
                f"could not place {n_atoms} atoms at separation {min_separation}"
            )
    z = rng.choice(np.asarray(species, dtype=np.int64), size=n_atoms)
    return AtomicSystem(positions, z)


def pair_potential(positions: np.ndarray) -> tuple[float, np.ndarray]:
    """Smoothly truncated Lennard-Jones energy and analytic forces.

    phi(r) = 4 eps ((sigma/r)^12 - (sigma/r)^6) * env(r / r_cut) with the
    same quintic envelope the model's radial basis uses, so the potential
    and its first two derivatives vanish at the cutoff.
    """
    n = positions.shape[0]
    energy = 0.0
    forces = np.zeros_like(positions)
    for i in range(n):
        for j in range(i + 1, n):
            d = positions[i] - positions[j]
            r = float(np.linalg.norm(d))
            if r >= LJ_CUTOFF:
                continue
            u = r / LJ_CUTOFF
            env = 1.0 + u**3 * (-10.0 + u * (15.0 - 6.0 * u))
            denv = (u**2 * (-30.0 + u * (60.0 - 30.0 * u))) / LJ_CUTOFF
            sr6 = (LJ_SIGMA / r) ** 6
            lj = 4.0 * LJ_EPSILON * (sr6 * sr6 - sr6)
            dlj = 4.0 * LJ_EPSILON * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r
            energy += lj * env
            dphi = dlj * env + lj * denv
            f = -dphi * d / r
            forces[i] += f
            forces[j] -= f
    return energy, forces


def generate_corpus(
    generator: str = "teacher",
    n_structures: int = 200,
    conformations_per_structure: int = 5,
    species=(1, 2),
    atoms_min: int = 6,
    atoms_max: int = 14,
    seed: int = 0,
    teacher_config: ModelConfig | None = None,
    jitter: float = 0.03,
) -> Corpus:
    """Labeled conformation families; deterministic given the seed."""
    if generator not in ("teacher", "pair"):
        raise ValueError("generator must be 'teacher' or 'pair'")
    if n_structures < 1 or conformations_per_structure < 1:
        raise ValueError("corpus sizes must be at least 1")
    species = tuple(int(z) for z in species)

    teacher: ModelParams | None = None
    metadata: dict = {
        "generator": generator,
        "seed": seed,
        "n_structures": n_structures,
        "conformations_per_structure": conformations_per_structure,
        "species": list(species),
    }
    if generator == "teacher":
        if teacher_config is None:
            teacher_config = default_teacher_config(species)
        teacher = build_model(teacher_config)
        metadata["teacher_config"] = teacher_config.to_dict()
        metadata["teacher_hash"] = config_hash(teacher_config)

    unlabeled: list[AtomicSystem] = []
    groups: list[int] = []
    for g in range(n_structures):
        rng = np.random.default_rng([seed, g])
        n_atoms = int(rng.integers(atoms_min, atoms_max + 1))
        base = random_cluster(rng, n_atoms, species)
        for _ in range(conformations_per_structure):
            wiggle = rng.normal(0.0, jitter, size=base.positions.shape)
            unlabeled.append(AtomicSystem(base.positions + wiggle, base.species))
            groups.append(g)

    records = []
    if generator == "teacher":
        for start in range(0, len(unlabeled), 64):
            chunk = unlabeled[start : start + 64]
            preds = predict_batch(teacher, chunk)
            for sys_u, pred, grp in zip(chunk, preds, groups[start : start + 64]):
                labeled = AtomicSystem(
                    sys_u.positions, sys_u.species, energy=pred.energy, forces=pred.forces
                )
                records.append(CorpusRecord(labeled, grp))
    else:
        for sys_u, grp in zip(unlabeled, groups):
            energy, forces = pair_potential(sys_u.positions)
            labeled = AtomicSystem(sys_u.positions, sys_u.species, energy=energy, forces=forces)
            records.append(CorpusRecord(labeled, grp))
    return Corpus(tuple(records), metadata)


def calibration_sample(corpus: Corpus, n_per_structure: int, seed: int) -> CalibrationSet:
    """Up to n records per structure group, without replacement.

    The per-group cap keeps families with many conformations from
    dominating the calibration set.
    """
    if n_per_structure < 1:
        raise ValueError("n_per_structure must be at least 1")
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    by_group: dict[int, list[int]] = {}
    for i, rec in enumerate(corpus.records):
        by_group.setdefault(rec.group, []).append(i)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for g in sorted(by_group):
        members = by_group[g]
        take = min(n_per_structure, len(members))
        picks = rng.choice(len(members), size=take, replace=False)
        chosen.extend(members[p] for p in sorted(picks))
    systems = [corpus.records[i].system for i in chosen]
    return CalibrationSet(
        tuple(systems),
        provenance={"sampling": "per-structure", "n_per_structure": n_per_structure, "seed": seed},
    )


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": corpus.metadata}, sort_keys=True) + "\n")
        for rec in corpus.records:
            s = rec.system
            fh.write(
                json.dumps(
                    {
                        "positions": s.positions.tolist(),
                        "species": s.species.tolist(),
                        "energy": s.energy,
                        "forces": s.forces.tolist(),
                        "group": rec.group,
                    }
                )
                + "\n"
            )


def read_corpus(path) -> Corpus:
    records = []
    metadata: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not any(line.strip() for line in lines):
        raise ValueError(f"{path}: empty corpus file")
    for ln, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed record at line {ln}: {exc.msg}") from None
        if "meta" in obj:
            metadata = obj["meta"]
            continue
        try:
            system = AtomicSystem(
                np.array(obj["positions"], dtype=np.float64),
                np.array(obj["species"], dtype=np.int64),
                energy=float(obj["energy"]),
                forces=np.array(obj["forces"], dtype=np.float64),
            )
            records.append(CorpusRecord(system, int(obj["group"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed record at line {ln}: {exc}") from None
    if not records:
        raise ValueError(f"{path}: corpus has no records")
    return Corpus(tuple(records), metadata)
