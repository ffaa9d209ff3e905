"""Exact SO(3) kernels: rotations, real spherical harmonics, Clebsch-Gordan
coefficients, and Wigner-D matrices.

Everything here works in the real irreps basis. Components of an order-l
block are indexed m = -l..l (array index m + l). The convention is fixed
once and for all:

* Real harmonics follow the usual cosine/sine convention, so the l=1 block
  is proportional to (y, z, x) and l=2 matches the standard Cartesian forms
  (xy, yz, 3z^2-r^2, zx, x^2-y^2).
* Complex intermediates (Wigner little-d, complex Clebsch-Gordan) carry the
  Condon-Shortley phase; the complex->real change of basis cancels it, so
  public results are phase-convention independent up to the per-l sign
  fixed by the harmonics above.
* Rotation law: ``Y_l(g @ r) = wigner_d(l, g).matrix @ Y_l(r)``.

All kernels are computed in float64 and cached immutably; they are safe to
share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

__all__ = [
    "Rotation",
    "WignerBlock",
    "CGCache",
    "real_spherical_harmonics",
    "sh_components",
    "clebsch_gordan",
    "wigner_d",
    "random_rotation",
]

_ORTHO_TOL = 1e-12


def _check_rotation_matrix(matrix: np.ndarray) -> None:
    if matrix.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got {matrix.shape}")
    defect = np.abs(matrix.T @ matrix - np.eye(3)).max()
    if defect > _ORTHO_TOL:
        raise ValueError(f"matrix is not orthogonal (defect {defect:.3e})")
    det = np.linalg.det(matrix)
    if abs(det - 1.0) > _ORTHO_TOL:
        raise ValueError(f"matrix is not proper (det {det!r})")


@dataclass(frozen=True)
class Rotation:
    """A proper rotation of 3-space, stored as an orthogonal matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        _check_rotation_matrix(matrix)
        matrix = matrix.copy()
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def from_euler_zyz(alpha: float, beta: float, gamma: float) -> "Rotation":
        """Build Rz(alpha) @ Ry(beta) @ Rz(gamma)."""
        return Rotation(_rot_z(alpha) @ _rot_y(beta) @ _rot_z(gamma))

    def to_euler_zyz(self) -> tuple[float, float, float]:
        """Extract ZYZ Euler angles with beta in [0, pi].

        At the gimbal locks (beta = 0 or pi) gamma is fixed to 0.
        """
        r = self.matrix
        beta = math.acos(min(1.0, max(-1.0, r[2, 2])))
        if math.sin(beta) > 1e-12:
            alpha = math.atan2(r[1, 2], r[0, 2])
            gamma = math.atan2(r[2, 1], -r[2, 0])
        elif r[2, 2] > 0.0:  # beta ~ 0: pure z rotation by alpha + gamma
            alpha = math.atan2(r[1, 0], r[0, 0])
            gamma = 0.0
        else:  # beta ~ pi
            alpha = math.atan2(-r[0, 1], -r[0, 0])
            gamma = 0.0
        return alpha, beta, gamma

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate one vector or an (..., 3) stack of vectors."""
        return np.asarray(vectors) @ self.matrix.T

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)))


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def random_rotation(seed: int) -> Rotation:
    """Deterministic Haar-uniform rotation from a seed.

    Draws a uniform unit quaternion (normalized 4-vector of normals) and
    converts it to a matrix.
    """
    rng = np.random.default_rng(seed)
    return _rotation_from_rng(rng)


def _rotation_from_rng(rng: np.random.Generator) -> Rotation:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    matrix = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(matrix)


def random_rotations(n: int, seed: int) -> list[Rotation]:
    """n independent Haar rotations from one seed stream."""
    rng = np.random.default_rng(seed)
    return [_rotation_from_rng(rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# Real spherical harmonics
# ---------------------------------------------------------------------------
#
# The evaluation is a pure polynomial recurrence in the Cartesian components
# of the unit direction, organized so it never divides by sin(theta):
#
#   A_m + i B_m = (x + i y)^m
#   Q_l^m       = P_l^m(z) / sin(theta)^m      (a polynomial in z)
#
# so that Y_{l,+m} ~ Q_l^m A_m and Y_{l,-m} ~ Q_l^m B_m are pole-safe. Only
# +, -, * and scalar multiplication are used, which lets the same code run
# on plain arrays and on autodiff variables.


@lru_cache(maxsize=None)
def _sh_norm(l: int, m: int) -> float:
    n = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
    return n if m == 0 else n * math.sqrt(2.0)


def sh_components(l_max: int, x, y, z) -> list[list]:
    """Real spherical harmonics of a unit direction, per order.

    Returns ``blocks[l][m + l]`` for l in [0, l_max]. The inputs may be
    scalars, same-shape arrays, or any objects supporting +, - and *.
    """
    if l_max < 0:
        raise ValueError("l_max must be >= 0")
    one = x * 0.0 + 1.0
    # q[m] holds Q_l^m for the two most recent l as the recurrence advances.
    q_prev: list = []  # order l-2
    q_curr: list = [one]  # order l-1, starting at l=0
    a, b = one, x * 0.0  # A_0, B_0
    cos_sin = [(a, b)]
    blocks: list[list] = [[one * _sh_norm(0, 0)]]
    for l in range(1, l_max + 1):
        a, b = x * cos_sin[-1][0] - y * cos_sin[-1][1], x * cos_sin[-1][1] + y * cos_sin[-1][0]
        cos_sin.append((a, b))
        q_next = []
        for m in range(l + 1):
            if m == l:
                qv = q_curr[l - 1] * float(1 - 2 * l)
            elif m == l - 1:
                qv = z * float(2 * l - 1) * q_curr[m]
            else:
                qv = (z * float(2 * l - 1)) * q_curr[m] - q_prev[m] * float(l - 1 + m)
                qv = qv * (1.0 / (l - m))
            q_next.append(qv)
        q_prev, q_curr = q_curr, q_next
        block = [None] * (2 * l + 1)
        block[l] = q_curr[0] * _sh_norm(l, 0)
        for m in range(1, l + 1):
            scale = _sh_norm(l, m) * (-1.0) ** m
            am, bm = cos_sin[m]
            block[l + m] = q_curr[m] * am * scale
            block[l - m] = q_curr[m] * bm * scale
        blocks.append(block)
    return blocks


def real_spherical_harmonics(l_max: int, direction: np.ndarray) -> list[np.ndarray]:
    """Evaluate Y_l for l in [0, l_max] at one unit direction.

    Returns one (2l+1,) array per order. The direction must be normalized
    to within 1e-9.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (3,):
        raise ValueError("direction must be a 3-vector")
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be a unit vector (norm {norm!r})")
    blocks = sh_components(l_max, direction[0], direction[1], direction[2])
    return [np.array(block) for block in blocks]


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------


def _delta_sq(a: int, b: int, c: int) -> Fraction:
    return Fraction(
        math.factorial(a + b - c) * math.factorial(a - b + c) * math.factorial(-a + b + c),
        math.factorial(a + b + c + 1),
    )


def _cg_complex(l1: int, m1: int, l2: int, m2: int, l3: int, m3: int) -> float:
    """Condon-Shortley Clebsch-Gordan coefficient <l1 m1 l2 m2 | l3 m3>.

    Racah's closed form, evaluated with exact integer arithmetic up to the
    final square root.
    """
    if m1 + m2 != m3:
        return 0.0
    if not abs(l1 - l2) <= l3 <= l1 + l2:
        return 0.0
    if abs(m1) > l1 or abs(m2) > l2 or abs(m3) > l3:
        return 0.0
    rad = (
        Fraction(2 * l3 + 1)
        * _delta_sq(l1, l2, l3)
        * math.factorial(l3 + m3)
        * math.factorial(l3 - m3)
        * math.factorial(l1 - m1)
        * math.factorial(l1 + m1)
        * math.factorial(l2 - m2)
        * math.factorial(l2 + m2)
    )
    k_min = max(0, l2 - l3 - m1, l1 - l3 + m2)
    k_max = min(l1 + l2 - l3, l1 - m1, l2 + m2)
    total = Fraction(0)
    for k in range(k_min, k_max + 1):
        den = (
            math.factorial(k)
            * math.factorial(l1 + l2 - l3 - k)
            * math.factorial(l1 - m1 - k)
            * math.factorial(l2 + m2 - k)
            * math.factorial(l3 - l2 + m1 + k)
            * math.factorial(l3 - l1 - m2 + k)
        )
        total += Fraction(-1 if k % 2 else 1, den)
    return float(total) * math.sqrt(float(rad))


@lru_cache(maxsize=None)
def _real_basis_change(l: int) -> np.ndarray:
    """Unitary U with (real components) = U @ (complex components)."""
    u = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    u[l, l] = 1.0
    rt = 1.0 / math.sqrt(2.0)
    for m in range(1, l + 1):
        sign = -1.0 if m % 2 else 1.0
        u[l + m, l + m] = sign * rt
        u[l + m, l - m] = rt
        u[l - m, l + m] = -1j * sign * rt
        u[l - m, l - m] = 1j * rt
    u.flags.writeable = False
    return u


@lru_cache(maxsize=None)
def _cg_real_dense(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis coupling tensor, shape (2l1+1, 2l2+1, 2l3+1)."""
    shape = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1)
    if not abs(l1 - l2) <= l3 <= l1 + l2:
        out = np.zeros(shape)
        out.flags.writeable = False
        return out
    cc = np.zeros(shape, dtype=np.complex128)
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                cc[l1 + m1, l2 + m2, l3 + m3] = _cg_complex(l1, m1, l2, m2, l3, m3)
    u1 = _real_basis_change(l1)
    u2 = _real_basis_change(l2)
    u3 = _real_basis_change(l3)
    out = np.einsum("cr,ap,bq,pqr->abc", u3, u1.conj(), u2.conj(), cc)
    # The transformed tensor is purely real for even l1+l2+l3 and purely
    # imaginary otherwise; this global phase keeps every triple real.
    out = out * (-1j) ** (l1 + l2 + l3)
    imag = np.abs(out.imag).max()
    if imag > 1e-12:
        raise AssertionError(f"real CG tensor has imaginary residue {imag:.3e}")
    out = np.ascontiguousarray(out.real)
    out[np.abs(out) < 1e-14] = 0.0
    out.flags.writeable = False
    return out


def clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """Dense real-basis coupling array for the (l1, l2) -> l3 product.

    All-zero when the selection rule |l1-l2| <= l3 <= l1+l2 fails. The
    returned array is a shared immutable cache entry.
    """
    if min(l1, l2, l3) < 0:
        raise ValueError("orders must be non-negative")
    return _cg_real_dense(l1, l2, l3)


@dataclass(frozen=True)
class CGCache:
    """All real coupling tensors with l1, l2, l3 <= l_max, built eagerly.

    ``coefficients`` maps (l1, l2, l3, m1, m2, m3) -> value for the nonzero
    entries only; ``dense`` gives the full per-triple arrays.
    """

    l_max: int
    dense: dict = field(init=False, repr=False)
    coefficients: dict = field(init=False, repr=False)

    def __post_init__(self):
        dense = {}
        sparse = {}
        for l1 in range(self.l_max + 1):
            for l2 in range(self.l_max + 1):
                for l3 in range(self.l_max + 1):
                    arr = clebsch_gordan(l1, l2, l3)
                    dense[(l1, l2, l3)] = arr
                    for (i, j, k) in zip(*np.nonzero(arr)):
                        sparse[(l1, l2, l3, i - l1, j - l2, k - l3)] = float(arr[i, j, k])
        object.__setattr__(self, "dense", dense)
        object.__setattr__(self, "coefficients", sparse)

    def __getitem__(self, triple: tuple[int, int, int]) -> np.ndarray:
        return self.dense[triple]


# ---------------------------------------------------------------------------
# Wigner-D matrices
# ---------------------------------------------------------------------------


def _wigner_small_d(l: int, beta: float) -> np.ndarray:
    """Complex-basis little-d matrix d^l_{m'm}(beta) via the factorial sum.

    Stable for the orders used here (l <= 8); no recursion.
    """
    c = math.cos(beta / 2.0)
    s = math.sin(beta / 2.0)
    d = np.zeros((2 * l + 1, 2 * l + 1))
    for mp in range(-l, l + 1):
        for m in range(-l, l + 1):
            pref = math.sqrt(
                math.factorial(l + mp)
                * math.factorial(l - mp)
                * math.factorial(l + m)
                * math.factorial(l - m)
            )
            k_min = max(0, m - mp)
            k_max = min(l + m, l - mp)
            total = 0.0
            for k in range(k_min, k_max + 1):
                den = (
                    math.factorial(l + m - k)
                    * math.factorial(k)
                    * math.factorial(mp - m + k)
                    * math.factorial(l - mp - k)
                )
                sign = -1.0 if (mp - m + k) % 2 else 1.0
                total += sign * c ** (2 * l + m - mp - 2 * k) * s ** (mp - m + 2 * k) / den
            d[l + mp, l + m] = pref * total
    return d


def wigner_d(l: int, rotation: Rotation) -> "WignerBlock":
    """Real Wigner-D block satisfying Y_l(g @ r) = D @ Y_l(r)."""
    if l < 0:
        raise ValueError("order must be non-negative")
    if rotation.is_identity():
        return WignerBlock(l, np.eye(2 * l + 1))
    alpha, beta, gamma = rotation.to_euler_zyz()
    d_small = _wigner_small_d(l, beta)
    m = np.arange(-l, l + 1)
    phase_l = np.exp(-1j * m * alpha)
    phase_r = np.exp(-1j * m * gamma)
    d_complex = phase_l[:, None] * d_small * phase_r[None, :]
    u = _real_basis_change(l)
    d_real = u @ d_complex.conj() @ u.conj().T
    imag = np.abs(d_real.imag).max()
    if imag > 1e-10:
        raise AssertionError(f"real Wigner-D has imaginary residue {imag:.3e}")
    return WignerBlock(l, d_real.real)


@dataclass(frozen=True)
class WignerBlock:
    """Orthogonal action of one rotation on an order-l multiplet."""

    l: int
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.shape != (2 * self.l + 1, 2 * self.l + 1):
            raise ValueError("Wigner block has the wrong shape")
        matrix = matrix.copy()
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
