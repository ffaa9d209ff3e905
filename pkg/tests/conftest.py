"""Shared fixtures: toy models, random clusters, and a small labeled corpus."""

import numpy as np
import pytest

from equiprune import model
from equiprune.data import generate_corpus


def random_system(n_atoms: int, seed: int, species=(1, 2), spread: float = 2.2) -> model.AtomicSystem:
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, spread, size=(n_atoms, 3))
    z = rng.choice(np.asarray(species, dtype=np.int64), size=n_atoms)
    return model.AtomicSystem(positions, z)


@pytest.fixture(scope="session")
def toy_config():
    return model.uniform_config(species=(1, 2), r_cut=1.5, n_layers=2, l_max=1, channels=8, seed=3)


@pytest.fixture(scope="session")
def toy_params(toy_config):
    return model.build_model(toy_config)


@pytest.fixture(scope="session")
def gated_config():
    return model.uniform_config(
        species=(1, 2), r_cut=1.5, n_layers=2, l_max=1, channels=4, gated=True, seed=9
    )


@pytest.fixture(scope="session")
def gated_params(gated_config):
    return model.build_model(gated_config)


@pytest.fixture(scope="session")
def small_corpus():
    """Teacher-labeled corpus small enough for unit tests."""
    return generate_corpus(
        generator="teacher",
        n_structures=10,
        conformations_per_structure=3,
        species=(1, 2),
        atoms_min=5,
        atoms_max=9,
        seed=11,
    )
