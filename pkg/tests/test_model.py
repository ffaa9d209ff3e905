"""Model contracts: construction, geometry kernels, layer operations,
prediction invariants, and locality."""

import math

import numpy as np
import pytest

from equiprune import model, so3
from equiprune.autodiff import ArrayOps
from equiprune.irreps import FeatureTensor, rotate_features

from conftest import random_system


class TestBuild:
    def test_deterministic(self, toy_config):
        a = model.build_model(toy_config)
        b = model.build_model(toy_config)
        for name in a.tensors:
            assert np.array_equal(a[name], b[name])

    def test_parameter_count_matches_hand_enumeration(self, toy_params):
        # Layer2 L1 C8, two species, 8 radial basis, one hidden width 16.
        embedding = 2 * 8
        self_energy = 2
        layer1 = (
            8 * 16  # radial hidden
            + 2 * (16 * 8)  # heads for paths (0,0,0) and (1,0,1)
            + 8 * 8  # linear l0 over an 8-wide message
            + 8 * 8  # linear l1
            + 2 * 8 * 8  # species residual at l0
            + 8  # linear readout
        )
        layer2 = (
            8 * 16
            + 5 * (16 * 8)  # five admissible paths
            + 8 * 16  # linear l0: message concatenates two path blocks
            + 8 * 24  # linear l1: three path blocks
            + 2 * 8 * 8  # residual l0
            + 2 * 8 * 8  # residual l1
            + (8 * 16 + 16 + 16 + 1)  # readout MLP
        )
        assert toy_params.n_parameters() == embedding + self_energy + layer1 + layer2

    def test_single_species_embedding_row(self):
        config = model.uniform_config(species=(6,), channels=4)
        params = model.build_model(config)
        assert params["embedding"].shape == (1, 4)

    def test_final_layer_without_scalars_rejected(self):
        with pytest.raises(ValueError):
            model.ModelConfig(
                species=(1,),
                r_cut=1.0,
                layer_l_max=(1,),
                layer_channels=((0, 4),),
                embedding_channels=4,
            )

    def test_shape_closure(self, toy_config, toy_params):
        # Every tensor's shape is a pure function of the config.
        shapes = model.param_shapes(toy_config)
        rebuilt = model.param_shapes(model.ModelConfig.from_dict(toy_config.to_dict()))
        assert shapes == rebuilt
        for name, arr in toy_params.tensors.items():
            assert arr.shape == shapes[name]


class TestRadialBasis:
    def test_zero_at_cutoff(self, toy_config):
        assert not model.radial_basis(toy_config, toy_config.r_cut).any()

    def test_zero_beyond_cutoff(self, toy_config):
        assert not model.radial_basis(toy_config, 1.2 * toy_config.r_cut).any()

    def test_matches_documented_closed_form(self, toy_config):
        # Independent evaluation of the Gaussian x quintic-envelope formula.
        r = 0.5 * toy_config.r_cut
        n = toy_config.n_radial_basis
        sigma = toy_config.r_cut / n
        centers = np.array([(k + 1) * toy_config.r_cut / n for k in range(n)])
        u = r / toy_config.r_cut
        envelope = 1 - 10 * u**3 + 15 * u**4 - 6 * u**5
        expected = np.exp(-(((r - centers) / sigma) ** 2)) * envelope
        got = model.radial_basis(toy_config, r)
        assert (got > 0).all()
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_non_positive_distance_rejected(self, toy_config):
        with pytest.raises(ValueError):
            model.radial_basis(toy_config, 0.0)


def zero_features(layout, n_atoms):
    return FeatureTensor(layout, np.zeros((n_atoms, layout.width)))


class TestTensorProductMessage:
    def test_isolated_atom_zero_message(self, toy_params):
        system = model.AtomicSystem(np.zeros((1, 3)), np.array([1]))
        layout = toy_params.config.layer_layout(0)
        h = FeatureTensor(layout, np.random.default_rng(0).normal(size=(1, layout.width)))
        msg = model.tensor_product_message(toy_params, 1, h, system)
        assert not msg.values.any()

    def test_rotation_equivariance(self, toy_params):
        rng = np.random.default_rng(0)
        system = random_system(7, 5)
        layout = toy_params.config.layer_layout(1)
        h = FeatureTensor(layout, rng.normal(size=(7, layout.width)))
        msg = model.tensor_product_message(toy_params, 2, h, system)
        for seed in range(20):
            g = so3.random_rotation(900 + seed)
            rotated_system = model.AtomicSystem(system.positions @ g.matrix.T, system.species)
            msg_rot = model.tensor_product_message(
                toy_params, 2, rotate_features(h, g), rotated_system
            )
            dev = np.abs(msg_rot.values - rotate_features(msg, g).values).max()
            assert dev <= 1e-10

    def test_single_edge_scalar_model_is_product_of_scalars(self):
        # With l_max=0 the contraction collapses to R(r) * Y00 * h_j / n_avg.
        config = model.uniform_config(species=(1,), l_max=0, channels=3, r_cut=1.5)
        params = model.build_model(config)
        positions = np.array([[0.0, 0.0, 0.0], [0.9, 0.0, 0.0]])
        system = model.AtomicSystem(positions, np.array([1, 1]))
        rng = np.random.default_rng(3)
        h = FeatureTensor(config.layer_layout(0), rng.normal(size=(2, 3)))

        # Independent radial evaluation: basis -> silu hidden -> head.
        r = 0.9
        basis = model.radial_basis(config, r)
        hidden = basis @ params["layer1.radial.hidden0"]
        hidden = hidden * ArrayOps.sigmoid(hidden)
        weights = hidden @ params["layer1.radial.head.0-0-0"]  # per channel
        y00 = 0.5 / math.sqrt(math.pi)
        expected_row0 = weights * y00 * h.values[1] / config.avg_num_neighbors
        expected_row1 = weights * y00 * h.values[0] / config.avg_num_neighbors

        msg = model.tensor_product_message(params, 1, h, system)
        np.testing.assert_allclose(msg.values[0], expected_row0, rtol=1e-12)
        np.testing.assert_allclose(msg.values[1], expected_row1, rtol=1e-12)

    def test_layout_mismatch_rejected(self, toy_params):
        system = random_system(4, 0)
        bad = zero_features(toy_params.config.layer_layout(1), 4)
        with pytest.raises(ValueError):
            model.tensor_product_message(toy_params, 1, bad, system)


class TestEquivariantLinear:
    def test_identity_weights(self, toy_params):
        params = toy_params.with_tensors(**{
            "layer1.linear.l0": np.eye(8),
            "layer1.linear.l1": np.eye(8),
        })
        layout = model.message_layout(params.config, 1)
        h = FeatureTensor(layout, np.random.default_rng(1).normal(size=(3, layout.width)))
        out = model.equivariant_linear(params, 1, h)
        assert np.array_equal(out.values, h.values)

    def test_zero_weights(self, toy_params):
        params = toy_params.with_tensors(**{
            "layer1.linear.l0": np.zeros((8, 8)),
            "layer1.linear.l1": np.zeros((8, 8)),
        })
        layout = model.message_layout(params.config, 1)
        h = FeatureTensor(layout, np.random.default_rng(2).normal(size=(3, layout.width)))
        assert not model.equivariant_linear(params, 1, h).values.any()

    def test_commutes_with_rotation(self, toy_params):
        layout = model.message_layout(toy_params.config, 2)
        h = FeatureTensor(layout, np.random.default_rng(3).normal(size=(4, layout.width)))
        for seed in range(10):
            g = so3.random_rotation(seed)
            a = model.equivariant_linear(toy_params, 2, rotate_features(h, g))
            b = rotate_features(model.equivariant_linear(toy_params, 2, h), g)
            assert np.abs(a.values - b.values).max() <= 1e-12


class TestSpeciesResidual:
    def test_single_species_identity_passthrough(self):
        config = model.uniform_config(species=(1,), l_max=1, channels=2)
        params = model.build_model(config)
        params = params.with_tensors(**{
            "layer2.residual.l0": np.eye(2)[None],
            "layer2.residual.l1": np.eye(2)[None],
        })
        layout = config.layer_layout(1)
        h = FeatureTensor(layout, np.random.default_rng(0).normal(size=(3, layout.width)))
        out = model.species_residual(params, 2, h, np.array([1, 1, 1]))
        assert np.array_equal(out.values, h.values)

    def test_two_species_hand_contraction(self):
        config = model.uniform_config(species=(1, 2), l_max=0, channels=2)
        params = model.build_model(config)
        w = np.stack([np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[-1.0, 0.5], [0.0, 2.0]])])
        params = params.with_tensors(**{"layer2.residual.l0": w})
        h = FeatureTensor(config.layer_layout(1), np.array([[1.0, 2.0], [3.0, -1.0]]))
        out = model.species_residual(params, 2, h, np.array([1, 2]))
        np.testing.assert_allclose(out.values[0], w[0] @ h.values[0])
        np.testing.assert_allclose(out.values[1], w[1] @ h.values[1])

    def test_zero_weights_zero_contribution(self, toy_params):
        params = toy_params.with_tensors(**{
            "layer2.residual.l0": np.zeros((2, 8, 8)),
            "layer2.residual.l1": np.zeros((2, 8, 8)),
        })
        layout = toy_params.config.layer_layout(1)
        h = FeatureTensor(layout, np.random.default_rng(1).normal(size=(2, layout.width)))
        assert not model.species_residual(params, 2, h, np.array([1, 2])).values.any()

    def test_unknown_species_rejected(self, toy_params):
        layout = toy_params.config.layer_layout(1)
        h = zero_features(layout, 1)
        with pytest.raises(ValueError):
            model.species_residual(toy_params, 2, h, np.array([99]))


class TestGatedNonlinearity:
    def test_zero_gate_zeroes_block(self, gated_config):
        layout = gated_config.layer_layout(1)
        rng = np.random.default_rng(0)
        values = rng.normal(size=(2, layout.width))
        row = gated_config.layer_channels[0]
        # zero the pre-squash gate of block (l=1, k=2): squash(0) = 0
        gate_col = layout.block_slice(0, gated_config.gate_index(1, 1, 2)).start
        values[:, gate_col] = 0.0
        out = model.gated_nonlinearity(gated_config, 1, FeatureTensor(layout, values))
        assert not out.block(1, 2).any()
        assert out.block(1, 1).any()

    def test_rotation_commutation(self, gated_config):
        layout = gated_config.layer_layout(2)
        h = FeatureTensor(layout, np.random.default_rng(1).normal(size=(3, layout.width)))
        for seed in range(10):
            g = so3.random_rotation(40 + seed)
            a = model.gated_nonlinearity(gated_config, 2, rotate_features(h, g))
            b = rotate_features(model.gated_nonlinearity(gated_config, 2, h), g)
            assert np.abs(a.values - b.values).max() <= 1e-10

    def test_scalar_only_layout_reduces_to_plain_nonlinearity(self):
        config = model.uniform_config(species=(1,), l_max=0, channels=3, gated=True)
        layout = config.layer_layout(1)
        h = FeatureTensor(layout, np.random.default_rng(2).normal(size=(2, 3)))
        out = model.gated_nonlinearity(config, 1, h)
        expected = h.values * ArrayOps.sigmoid(h.values)
        np.testing.assert_allclose(out.values, expected, atol=1e-15)

    def test_ungated_model_rejected(self, toy_config):
        layout = toy_config.layer_layout(1)
        with pytest.raises(ValueError):
            model.gated_nonlinearity(toy_config, 1, zero_features(layout, 1))


class TestReadout:
    def test_zero_scalars_zero_bias_mlp(self, toy_params):
        params = toy_params.with_tensors(**{
            "layer2.readout.b1": np.zeros(16),
            "layer2.readout.b2": np.zeros(()),
        })
        layout = params.config.layer_layout(2)
        h = zero_features(layout, 3)
        assert not model.readout(params, 2, h).any()

    def test_one_hot_linear_readout_selects_channel(self, toy_params):
        w = np.zeros(8)
        w[3] = 1.0
        params = toy_params.with_tensors(**{"layer1.readout.w": w})
        layout = params.config.layer_layout(1)
        h = FeatureTensor(layout, np.random.default_rng(0).normal(size=(4, layout.width)))
        np.testing.assert_allclose(model.readout(params, 1, h), h.values[:, 3])

    def test_rotation_leaves_per_layer_energies_unchanged(self, toy_params):
        layout = toy_params.config.layer_layout(2)
        h = FeatureTensor(layout, np.random.default_rng(1).normal(size=(3, layout.width)))
        base = model.readout(toy_params, 2, h)
        for seed in range(10):
            g = so3.random_rotation(seed)
            rotated = model.readout(toy_params, 2, rotate_features(h, g))
            assert np.abs(rotated - base).max() <= 1e-10

    def test_only_scalars_enter_readout(self, toy_params):
        # Zeroing every l>0 component leaves all per-layer energies alone.
        layout = toy_params.config.layer_layout(2)
        h = FeatureTensor(layout, np.random.default_rng(2).normal(size=(3, layout.width)))
        wiped = h.values.copy()
        off = layout.order_offset(1)
        wiped[:, off:] = 0.0
        for t in (1, 2):
            lt = toy_params.config.layer_layout(t)
            ht = FeatureTensor(lt, h.values[:, : lt.width])
            wt = FeatureTensor(lt, wiped[:, : lt.width])
            assert np.array_equal(model.readout(toy_params, t, ht), model.readout(toy_params, t, wt))


class TestPredict:
    def test_energy_is_sum_of_per_atom(self, toy_params):
        for seed in range(5):
            p = model.predict(toy_params, random_system(8, seed))
            assert abs(p.energy - p.per_atom.sum()) <= 1e-12 * max(1.0, abs(p.energy))

    def test_isolated_atom(self, toy_params):
        # No interactions: zero forces, species-constant energy. With the
        # species residual zeroed the energy is exactly the self-energy
        # bias (the residual otherwise carries the embedding into the
        # readouts even without neighbors).
        system = model.AtomicSystem(np.array([[1.0, 2.0, 3.0]]), np.array([1]))
        p = model.predict(toy_params, system)
        assert np.array_equal(p.forces, np.zeros((1, 3)))
        elsewhere = model.predict(
            toy_params, model.AtomicSystem(np.array([[-4.0, 0.0, 9.0]]), np.array([1]))
        )
        assert p.energy == elsewhere.energy

        bare = toy_params.with_tensors(**{
            "layer1.residual.l0": np.zeros((2, 8, 8)),
            "layer2.residual.l0": np.zeros((2, 8, 8)),
            "layer2.residual.l1": np.zeros((2, 8, 8)),
            "layer2.readout.b1": np.zeros(16),
            "layer2.readout.b2": np.zeros(()),
        })
        p_bare = model.predict(bare, system)
        assert p_bare.energy == pytest.approx(bare["self_energy"][0], abs=1e-15)

    def test_translation_invariance(self, toy_params):
        system = random_system(9, 3)
        shifted = model.AtomicSystem(system.positions + np.array([11.0, -3.0, 0.5]), system.species)
        e0 = model.predict(toy_params, system).energy
        e1 = model.predict(toy_params, shifted).energy
        assert abs(e1 - e0) <= 1e-10 * max(1.0, abs(e0))

    def test_rotation_invariance_and_force_equivariance(self, toy_params):
        for seed in range(10):
            system = random_system(8, 40 + seed)
            g = so3.random_rotation(seed)
            base = model.predict(toy_params, system)
            rotated = model.predict(
                toy_params, model.AtomicSystem(system.positions @ g.matrix.T, system.species)
            )
            assert abs(rotated.energy - base.energy) <= 1e-9 * max(1.0, abs(base.energy))
            assert np.abs(rotated.forces - base.forces @ g.matrix.T).max() <= 1e-8

    def test_forces_sum_to_zero(self, toy_params):
        for seed in range(5):
            p = model.predict(toy_params, random_system(10, 90 + seed))
            assert np.abs(p.forces.sum(axis=0)).max() <= 1e-8

    def test_unknown_species_rejected(self, toy_params):
        with pytest.raises(ValueError):
            model.predict(toy_params, model.AtomicSystem(np.zeros((1, 3)), np.array([42])))

    def test_fp32_precision_toggle(self, toy_config):
        from dataclasses import replace

        params32 = model.ModelParams(
            replace(toy_config, precision="fp32"), dict(model.build_model(toy_config).tensors)
        )
        p = model.predict(params32, random_system(6, 0))
        assert np.isfinite(p.energy)


class TestReceptiveField:
    def test_values(self):
        assert model.receptive_field(model.uniform_config(n_layers=2, r_cut=1.0)) == 2.0
        assert model.receptive_field(model.uniform_config(n_layers=1, r_cut=1.5)) == 1.5
        assert model.receptive_field(model.uniform_config(n_layers=5, r_cut=0.5)) == 2.5


class TestLocality:
    def test_far_atom_changes_nothing_exactly(self):
        config = model.uniform_config(species=(1,), n_layers=2, l_max=1, channels=4, r_cut=1.0)
        params = model.build_model(config)
        near = np.array([[0.0, 0.0, 0.0], [0.7, 0.0, 0.0]])
        for far_x in (2.5, 2.7, 3.0):
            positions = np.vstack([near, [[far_x, 0.0, 0.0]]])
            p = model.predict(params, model.AtomicSystem(positions, np.array([1, 1, 1])))
            if far_x == 2.5:
                base = p.per_atom[:2].copy()
            else:
                assert np.array_equal(p.per_atom[:2], base)

    def test_bridged_atom_inside_receptive_field_matters(self):
        config = model.uniform_config(species=(1,), n_layers=2, l_max=1, channels=4, r_cut=1.0)
        params = model.build_model(config)
        positions = np.array([[0.0, 0.0, 0.0], [0.8, 0.0, 0.0], [1.5, 0.0, 0.0]])
        base = model.predict(params, model.AtomicSystem(positions, np.array([1, 1, 1])))
        moved = positions.copy()
        moved[2, 0] = 1.4
        p = model.predict(params, model.AtomicSystem(moved, np.array([1, 1, 1])))
        assert abs(p.per_atom[0] - base.per_atom[0]) > 0.0

    def test_force_continuity_across_cutoff(self, toy_config):
        # The envelope's C^2 zero makes forces continuous as an edge
        # crosses the cutoff.
        params = model.build_model(toy_config)
        h = 1e-4
        rc = toy_config.r_cut

        def force_at(r):
            system = model.AtomicSystem(
                np.array([[0.0, 0.0, 0.0], [r, 0.0, 0.0]]), np.array([1, 2])
            )
            return model.predict(params, system).forces[1, 0]

        assert force_at(rc + h) == 0.0
        assert abs(force_at(rc - h) - force_at(rc + h)) <= 1e-6
