"""Tape engine checks: forward transparency, per-primitive gradchecks,
linearity, determinism, and gradients of gradients."""

import numpy as np
import pytest

from equiprune import model
from equiprune.autodiff import ArrayOps, Tape, Var, backward, silu

from conftest import random_system


def fd_gradcheck(build, shapes, seed, eps=1e-6, tol=1e-7):
    """Central-difference check of backward() for a scalar-valued builder."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    tape = Tape()
    leaves = [tape.leaf(x) for x in xs]
    grads = backward(build(tape, *leaves), leaves)
    worst = 0.0
    for i, x in enumerate(xs):
        for idx in np.ndindex(*x.shape) if x.shape else [()]:
            plus = [a.copy() for a in xs]
            minus = [a.copy() for a in xs]
            plus[i][idx] += eps
            minus[i][idx] -= eps

            def evaluate(arrays):
                t = Tape()
                return float(build(t, *[t.leaf(a) for a in arrays]).value)

            fd = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            worst = max(worst, abs(fd - grads[i].value[idx]) / max(1.0, abs(fd)))
    assert worst <= tol, worst


GATHER_IDX = np.array([0, 2, 1, 2, 0])
SCATTER_IDX = np.array([1, 0, 1, 1, 0])
CONST_23 = np.random.default_rng(5).normal(size=(2, 3))
CONST_27 = np.random.default_rng(6).normal(size=(2, 7))


class TestPrimitiveGradients:
    def test_mul_sum(self):
        fd_gradcheck(lambda t, a, b: t.reduce_sum(t.mul(a, b)), [(3, 4), (3, 4)], 0)

    def test_broadcast_mul(self):
        fd_gradcheck(lambda t, a, b: t.reduce_sum(t.mul(a, b)), [(3, 1), (3, 4)], 1)

    def test_pow_sqrt_chain(self):
        fd_gradcheck(
            lambda t, a: t.reduce_sum(t.pow_const(t.shift(t.mul(a, a), 1.0), 0.5)), [(5,)], 2
        )

    def test_smooth_unaries(self):
        fd_gradcheck(
            lambda t, a: t.reduce_sum(
                t.mul(t.exp(t.scale(a, 0.3)), t.mul(t.tanh(a), t.sigmoid(a)))
            ),
            [(4,)],
            3,
        )

    def test_silu(self):
        fd_gradcheck(lambda t, a: t.reduce_sum(silu(t, a)), [(6,)], 4)

    def test_einsum_two_operands(self):
        fd_gradcheck(lambda t, a, b: t.reduce_sum(t.einsum("ik,kj->ij", a, b)), [(3, 4), (4, 2)], 5)

    def test_einsum_three_operands(self):
        fd_gradcheck(
            lambda t, a, b, c: t.reduce_sum(t.einsum("ek,ekq,eqr->ekr", a, b, c)),
            [(5, 3), (5, 3, 2), (5, 2, 4)],
            6,
        )

    def test_gather_scatter(self):
        fd_gradcheck(
            lambda t, a: t.reduce_sum(
                t.mul(t.scatter_add(t.gather(a, GATHER_IDX), SCATTER_IDX, 2), t.constant(CONST_23))
            ),
            [(3, 3)],
            7,
        )

    def test_concat_narrow(self):
        fd_gradcheck(
            lambda t, a, b: t.reduce_sum(t.mul(t.concat([a, b], 1), t.constant(CONST_27))),
            [(2, 3), (2, 4)],
            8,
        )

    def test_narrow_pad(self):
        fd_gradcheck(
            lambda t, a: t.reduce_sum(t.pow_const(t.narrow(a, 1, 1, 2), 2.0)), [(3, 4)], 9
        )

    def test_reshape_axis_sum(self):
        fd_gradcheck(
            lambda t, a: t.reduce_sum(
                t.pow_const(t.reduce_sum(t.reshape(a, (6, 2)), axis=1), 2.0)
            ),
            [(3, 4)],
            10,
        )

    def test_broadcast_to(self):
        c = np.random.default_rng(9).normal(size=(4, 3))
        fd_gradcheck(
            lambda t, a: t.reduce_sum(t.mul(t.broadcast_to(a, (4, 3)), t.constant(c))), [(3,)], 11
        )


class TestRecordSemantics:
    def test_square_forward(self):
        tape = Tape()
        x = tape.leaf(np.array(3.0))
        y = tape.mul(x, x)
        assert float(y.value) == 9.0

    def test_sum_of_zeros(self):
        tape = Tape()
        assert float(tape.reduce_sum(tape.leaf(np.zeros(7))).value) == 0.0

    def test_shape_mismatch_rejected(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 3)))
        b = tape.leaf(np.ones((4, 5)))
        with pytest.raises(ValueError):
            tape.add(a, b)

    def test_bad_einsum_specs_rejected(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ValueError):
            tape.einsum("aa->a", a)  # repeated index in one operand
        with pytest.raises(ValueError):
            tape.einsum("ab", a)  # implicit output
        with pytest.raises(ValueError):
            tape.einsum("ab->a", a)  # lone summed index: adjoint inexpressible

    def test_taped_model_energy_bitwise_equals_untaped(self, toy_params):
        # Same kernels in the same order on both paths: zero ulp apart.
        for seed in range(5):
            system = random_system(8, seed)
            taped = model.predict(toy_params, system).energy
            untaped = model.untaped_energy(toy_params, system)
            assert taped == untaped


class TestBackward:
    def test_dx_squared(self):
        tape = Tape()
        x = tape.leaf(np.array(3.0))
        (g,) = backward(tape.mul(x, x), [x])
        assert float(g.value) == 6.0

    def test_constant_has_zero_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array(3.0))
        c = tape.constant(np.array(5.0))
        (g,) = backward(tape.mul(c, c), [x])
        assert float(g.value) == 0.0

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ValueError):
            backward(x, [x])

    def test_linearity(self):
        # backward of a*E1 + b*E2 equals the weighted gradient sum.
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(4,))
        a, b = 0.7, -1.3

        def grads(weight_pair):
            tape = Tape()
            x = tape.leaf(x0)
            e1 = tape.reduce_sum(tape.mul(x, tape.mul(x, x)))
            e2 = tape.reduce_sum(tape.exp(tape.scale(x, 0.5)))
            root = tape.add(tape.scale(e1, weight_pair[0]), tape.scale(e2, weight_pair[1]))
            return backward(root, [x])[0].value

        combined = grads((a, b))
        separate = a * grads((1.0, 0.0)) + b * grads((0.0, 1.0))
        assert np.abs(combined - separate).max() <= 1e-12

    def test_bit_identical_gradients_across_runs(self, toy_params):
        system = random_system(9, 77)

        def force_once():
            return model.predict(toy_params, system).forces

        assert np.array_equal(force_once(), force_once())

    def test_model_forces_match_finite_differences(self, toy_params):
        # 10 random systems, central differences with step 1e-5.
        for seed in range(10):
            system = random_system(7, 300 + seed)
            forces = model.predict(toy_params, system).forces
            rng = np.random.default_rng(seed)
            i = int(rng.integers(system.n_atoms))
            c = int(rng.integers(3))
            eps = 1e-5
            plus = system.positions.copy()
            minus = system.positions.copy()
            plus[i, c] += eps
            minus[i, c] -= eps
            e_plus = model.untaped_energy(toy_params, model.AtomicSystem(plus, system.species))
            e_minus = model.untaped_energy(toy_params, model.AtomicSystem(minus, system.species))
            fd = -(e_plus - e_minus) / (2 * eps)
            assert abs(fd - forces[i, c]) / max(abs(fd), 1e-10) <= 1e-6

    def test_tagged_linear_readout_returns_exact_weights(self):
        # A scalar root linear in a tagged node has that node's gradient
        # equal to the coefficients, by construction.
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4,))
        tape = Tape()
        x = tape.leaf(rng.normal(size=(4,)))
        tagged = tape.mul(x, x)
        root = tape.reduce_sum(tape.mul(tagged, tape.constant(w)))
        (g,) = backward(root, [tagged])
        assert np.array_equal(g.value, w)

    def test_gradient_of_gradient(self):
        # d/dx of (d sum(x^3)/dx summed) = 6x.
        tape = Tape()
        x = tape.leaf(np.array([1.0, -2.0, 0.5]))
        y = tape.reduce_sum(tape.mul(x, tape.mul(x, x)))
        (g1,) = backward(y, [x])
        (g2,) = backward(tape.reduce_sum(g1), [x])
        assert np.allclose(g2.value, 6 * x.value, atol=1e-12)

    def test_force_loss_parameter_gradient(self):
        # E = (w/2) sum x^2 gives F = -w x; d(sum F^2)/dw = 2w sum x^2.
        tape = Tape()
        w = tape.leaf(np.array(2.0))
        x = tape.leaf(np.array([1.5, -0.7]))
        e = tape.reduce_sum(
            tape.mul(tape.scale(tape.mul(x, x), 0.5), tape.broadcast_to(tape.reshape(w, (1,)), (2,)))
        )
        (gx,) = backward(e, [x])
        loss = tape.reduce_sum(tape.mul(gx, gx))
        (gw,) = backward(loss, [w])
        expected = 2 * 2.0 * float((x.value**2).sum())
        assert abs(float(gw.value) - expected) <= 1e-12


class TestArrayOpsParity:
    def test_same_kernels(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 3))
        idx = np.array([0, 1, 1, 4, 2])
        tape = Tape()
        va = tape.leaf(a)
        taped = tape.scatter_add(tape.gather(va, idx), idx, 5).value
        plain = ArrayOps.scatter_add(ArrayOps.gather(a, idx), idx, 5)
        assert np.array_equal(taped, plain)
