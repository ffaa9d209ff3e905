"""SO(3) kernel checks against independent oracles.

Oracles: hardcoded Cartesian polynomial forms of the real harmonics,
sympy's exact Clebsch-Gordan coefficients pushed through a locally defined
complex-to-real change of basis, and the permuted 3x3 rotation matrix for
the l=1 Wigner block.
"""

import math

import numpy as np
import pytest

from equiprune import so3


def haar_directions(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Cartesian polynomial oracle for the real harmonics, l <= 3
# ---------------------------------------------------------------------------


def cartesian_sh_oracle(l, d):
    x, y, z = d
    pi = math.pi
    if l == 0:
        return np.array([0.5 / math.sqrt(pi)])
    if l == 1:
        c = math.sqrt(3.0 / (4 * pi))
        return c * np.array([y, z, x])
    if l == 2:
        return np.array(
            [
                0.5 * math.sqrt(15 / pi) * x * y,
                0.5 * math.sqrt(15 / pi) * y * z,
                0.25 * math.sqrt(5 / pi) * (3 * z * z - 1),
                0.5 * math.sqrt(15 / pi) * z * x,
                0.25 * math.sqrt(15 / pi) * (x * x - y * y),
            ]
        )
    if l == 3:
        return np.array(
            [
                0.25 * math.sqrt(35 / (2 * pi)) * y * (3 * x * x - y * y),
                0.5 * math.sqrt(105 / pi) * x * y * z,
                0.25 * math.sqrt(21 / (2 * pi)) * y * (5 * z * z - 1),
                0.25 * math.sqrt(7 / pi) * z * (5 * z * z - 3),
                0.25 * math.sqrt(21 / (2 * pi)) * x * (5 * z * z - 1),
                0.25 * math.sqrt(105 / pi) * z * (x * x - y * y),
                0.25 * math.sqrt(35 / (2 * pi)) * x * (x * x - 3 * y * y),
            ]
        )
    raise ValueError(l)


class TestSphericalHarmonics:
    def test_l0_constant(self):
        for d in haar_directions(5, 0):
            block = so3.real_spherical_harmonics(0, d)[0]
            assert block.shape == (1,)
            assert block[0] == pytest.approx(0.2820948, abs=1e-7)

    def test_l1_along_z_two_forced_zeros(self):
        block = so3.real_spherical_harmonics(1, np.array([0.0, 0.0, 1.0]))[1]
        assert block[0] == 0.0 and block[2] == 0.0
        assert block[1] > 0.0

    def test_l2_diagonal_direction_matches_cartesian_oracle(self):
        d = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
        got = so3.real_spherical_harmonics(2, d)[2]
        np.testing.assert_allclose(got, cartesian_sh_oracle(2, d), atol=1e-14)

    @pytest.mark.parametrize("l", [0, 1, 2, 3])
    def test_matches_cartesian_oracle_everywhere(self, l):
        for i, d in enumerate(haar_directions(25, 100 + l)):
            got = so3.real_spherical_harmonics(3, d)[l]
            np.testing.assert_allclose(got, cartesian_sh_oracle(l, d), atol=1e-13)

    def test_block_sizes(self):
        blocks = so3.real_spherical_harmonics(4, np.array([0.0, 0.0, 1.0]))
        assert [len(b) for b in blocks] == [1, 3, 5, 7, 9]

    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError):
            so3.real_spherical_harmonics(1, np.array([0.0, 0.0, 1.1]))

    def test_rotation_law(self):
        # For all l <= 4 over 50 random (g, direction) pairs.
        rng = np.random.default_rng(42)
        for trial in range(50):
            g = so3.random_rotation(10_000 + trial)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            y = so3.real_spherical_harmonics(4, d)
            y_rot = so3.real_spherical_harmonics(4, g.apply(d))
            for l in range(5):
                dmat = so3.wigner_d(l, g).matrix
                assert np.abs(y_rot[l] - dmat @ y[l]).max() <= 1e-10

    def test_orthonormality_monte_carlo(self):
        # Unit-sphere quadrature of Y_lm Y_l'm' in 10^6 samples.
        rng = np.random.default_rng(7)
        n_total = 1_000_000
        gram = np.zeros((16, 16))
        for _ in range(10):
            v = rng.normal(size=(n_total // 10, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            blocks = so3.sh_components(3, v[:, 0], v[:, 1], v[:, 2])
            feats = np.stack([c for block in blocks for c in block], axis=1)
            gram += feats.T @ feats
        gram *= 4.0 * math.pi / n_total
        assert np.abs(gram - np.eye(16)).max() <= 5e-3


class TestRotation:
    def test_invariants(self):
        for seed in range(20):
            g = so3.random_rotation(seed)
            assert np.abs(g.matrix.T @ g.matrix - np.eye(3)).max() <= 1e-12
            assert abs(np.linalg.det(g.matrix) - 1.0) <= 1e-12

    def test_determinism(self):
        a = so3.random_rotation(7)
        b = so3.random_rotation(7)
        assert np.array_equal(a.matrix, b.matrix)

    def test_haar_mean(self):
        # Entrywise mean over 10,000 samples approaches zero.
        total = np.zeros((3, 3))
        for g in so3.random_rotations(10_000, 3):
            total += g.matrix
        assert np.abs(total / 10_000).max() <= 0.05

    def test_euler_round_trip(self):
        for seed in range(25):
            g = so3.random_rotation(seed)
            a, b, c = g.to_euler_zyz()
            assert 0.0 <= b <= math.pi
            g2 = so3.Rotation.from_euler_zyz(a, b, c)
            assert np.abs(g.matrix - g2.matrix).max() <= 1e-12

    def test_improper_matrix_rejected(self):
        with pytest.raises(ValueError):
            so3.Rotation(np.diag([1.0, 1.0, -1.0]))


class TestWignerD:
    def test_identity_rotation_is_exact_identity(self):
        block = so3.wigner_d(2, so3.Rotation.identity())
        assert np.array_equal(block.matrix, np.eye(5))

    def test_l0_is_scalar_one(self):
        for seed in range(5):
            block = so3.wigner_d(0, so3.random_rotation(seed))
            assert np.array_equal(block.matrix, np.array([[1.0]]))

    def test_l1_matches_permuted_rotation_matrix(self):
        # The l=1 real basis orders components as (y, z, x).
        perm = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
        for seed in range(10):
            g = so3.random_rotation(seed)
            d1 = so3.wigner_d(1, g).matrix
            assert np.abs(d1 - perm @ g.matrix @ perm.T).max() <= 1e-13

    def test_orthogonality(self):
        for seed in range(5):
            g = so3.random_rotation(50 + seed)
            for l in range(5):
                d = so3.wigner_d(l, g).matrix
                assert np.abs(d @ d.T - np.eye(2 * l + 1)).max() <= 1e-10

    def test_representation_property(self):
        for seed in range(10):
            g1 = so3.random_rotation(2 * seed)
            g2 = so3.random_rotation(2 * seed + 1)
            for l in range(5):
                lhs = so3.wigner_d(l, g1.compose(g2)).matrix
                rhs = so3.wigner_d(l, g1).matrix @ so3.wigner_d(l, g2).matrix
                assert np.abs(lhs - rhs).max() <= 1e-10


# ---------------------------------------------------------------------------
# Clebsch-Gordan
# ---------------------------------------------------------------------------


def sympy_real_cg_oracle(l1, l2, l3):
    """Independent construction: exact complex coefficients from sympy,
    conjugated by a locally defined complex->real unitary."""
    from sympy.physics.quantum.cg import CG
    from sympy import Rational

    def u_matrix(l):
        u = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
        u[l, l] = 1.0
        rt = 1.0 / math.sqrt(2.0)
        for m in range(1, l + 1):
            s = (-1.0) ** m
            u[l + m, l + m] = s * rt
            u[l + m, l - m] = rt
            u[l - m, l + m] = -1j * s * rt
            u[l - m, l - m] = 1j * rt
        return u

    cc = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1), dtype=complex)
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                val = CG(Rational(l1), Rational(m1), Rational(l2), Rational(m2), Rational(l3), Rational(m3)).doit()
                cc[l1 + m1, l2 + m2, l3 + m3] = float(val.evalf(30))
    u1, u2, u3 = u_matrix(l1), u_matrix(l2), u_matrix(l3)
    out = np.einsum("cr,ap,bq,pqr->abc", u3, u1.conj(), u2.conj(), cc)
    out = out * (-1j) ** (l1 + l2 + l3)
    assert np.abs(out.imag).max() < 1e-12
    return out.real


class TestClebschGordan:
    def test_scalar_coupling_identity(self):
        assert so3.clebsch_gordan(0, 0, 0).ravel().tolist() == [1.0]

    def test_selection_rule_zero(self):
        assert not so3.clebsch_gordan(1, 1, 3).any()

    def test_110_proportional_to_identity(self):
        arr = so3.clebsch_gordan(1, 1, 0)[:, :, 0]
        oracle = sympy_real_cg_oracle(1, 1, 0)[:, :, 0]
        np.testing.assert_allclose(arr, oracle, atol=1e-13)
        off = arr - np.diag(np.diag(arr))
        assert np.abs(off).max() <= 1e-14
        assert np.allclose(np.diag(arr), arr[0, 0])

    @pytest.mark.parametrize(
        "triple", [(1, 1, 1), (1, 1, 2), (2, 1, 1), (2, 2, 2), (2, 1, 3), (3, 2, 1)]
    )
    def test_matches_sympy_oracle(self, triple):
        got = so3.clebsch_gordan(*triple)
        oracle = sympy_real_cg_oracle(*triple)
        np.testing.assert_allclose(got, oracle, atol=1e-12)

    def test_intertwining_identity(self):
        # D3 . C == C contracted with D1 (x) D2, all triples l <= 3,
        # 20 random rotations.
        for seed in range(20):
            g = so3.random_rotation(700 + seed)
            for l1 in range(4):
                for l2 in range(4):
                    for l3 in range(4):
                        c = so3.clebsch_gordan(l1, l2, l3)
                        lhs = np.einsum("abc,dc->abd", c, so3.wigner_d(l3, g).matrix)
                        rhs = np.einsum(
                            "pa,qb,pqc->abc",
                            so3.wigner_d(l1, g).matrix,
                            so3.wigner_d(l2, g).matrix,
                            c,
                        )
                        assert np.abs(lhs - rhs).max() <= 1e-10

    def test_negative_order_rejected(self):
        with pytest.raises(ValueError):
            so3.clebsch_gordan(-1, 0, 1)

    def test_cache_contents(self):
        cache = so3.CGCache(2)
        assert cache[(1, 1, 0)] is so3.clebsch_gordan(1, 1, 0)
        for (l1, l2, l3, m1, m2, m3), value in cache.coefficients.items():
            assert abs(l1 - l2) <= l3 <= l1 + l2
            assert value != 0.0
            assert cache[(l1, l2, l3)][l1 + m1, l2 + m2, l3 + m3] == value

    def test_cache_immutable(self):
        cache = so3.CGCache(1)
        with pytest.raises(ValueError):
            cache[(1, 1, 1)][0, 0, 0] = 5.0


class TestSpectral:
    def test_spherical_laplacian_eigenvalues(self):
        # Central finite differences of the angular Laplacian reproduce
        # -l(l+1) Y_lm away from the poles.
        h = 1e-3
        thetas = np.linspace(0.5, math.pi - 0.5, 9)
        phis = np.linspace(0.0, 2 * math.pi, 11, endpoint=False)

        def sh_grid(l, m, th, ph):
            x = np.sin(th) * np.cos(ph)
            y = np.sin(th) * np.sin(ph)
            z = np.cos(th) * np.ones_like(x)
            return so3.sh_components(l, x, y, z)[l][m + l]

        for l in range(1, 4):
            for m in range(-l, l + 1):
                th, ph = np.meshgrid(thetas, phis, indexing="ij")
                y0 = sh_grid(l, m, th, ph)
                d2_th = (sh_grid(l, m, th + h, ph) - 2 * y0 + sh_grid(l, m, th - h, ph)) / h**2
                d1_th = (sh_grid(l, m, th + h, ph) - sh_grid(l, m, th - h, ph)) / (2 * h)
                d2_ph = (sh_grid(l, m, th, ph + h) - 2 * y0 + sh_grid(l, m, th, ph - h)) / h**2
                lap = d2_th + d1_th * np.cos(th) / np.sin(th) + d2_ph / np.sin(th) ** 2
                target = -l * (l + 1) * y0
                rel = np.abs(lap - target).max() / np.abs(target).max()
                assert rel <= 1e-3, (l, m, rel)
