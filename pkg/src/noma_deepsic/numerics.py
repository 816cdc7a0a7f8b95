"""Complex linear algebra, seeded random streams and scalar special functions.

Vectors and matrices are plain complex ``numpy`` arrays throughout the
package; this module only adds the few routines the rest of the code
needs on top of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular


class DimensionMismatch(ValueError):
    pass


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class NoConvergence(RuntimeError):
    pass


# Cholesky pivots (squared diagonal of L) at or below this are rejected.
PIVOT_FLOOR = 1e-12


@dataclass
class SeededRng:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Draws come from a Philox generator keyed by a ``SeedSequence`` whose
    spawn key is the stream id, so streams with different ids are
    independent and any stream can be rebuilt from its two integers.
    """

    seed: int
    stream_id: int = 0
    gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, stream_id: int) -> "SeededRng":
        """A fresh stream with the same seed and another id."""
        return SeededRng(self.seed, stream_id)

    def child(self, *path: int) -> "SeededRng":
        # nested streams for (trial, user, ...) style fan-out
        sid = self.stream_id
        for p in path:
            sid = (sid * 1_000_003 + p + 1) % (1 << 63)
        return SeededRng(self.seed, sid)


def as_vector(b) -> np.ndarray:
    return np.asarray(b, dtype=complex).reshape(-1)


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {a.shape}")
    return a


def hermitian_solve(A, b) -> np.ndarray:
    """Solve ``A x = b`` for Hermitian positive definite ``A`` via Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    A = as_matrix(A)
    b = np.asarray(b, dtype=complex)
    n = A.shape[0]
    if A.shape[1] != n:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    if b.shape[0] != n:
        raise DimensionMismatch(f"A is {A.shape} but b has leading dim {b.shape[0]}")
    A = 0.5 * (A + A.conj().T)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.real(np.diag(L)) ** 2
    if np.any(pivots <= PIVOT_FLOOR):
        raise NotPositiveDefinite(f"Cholesky pivot {pivots.min():.3e} <= {PIVOT_FLOOR}")
    z = solve_triangular(L, b, lower=True)
    return solve_triangular(L.conj().T, z, lower=False)


def hermitian_inverse(A) -> np.ndarray:
    A = as_matrix(A)
    X = hermitian_solve(A, np.eye(A.shape[0], dtype=complex))
    return 0.5 * (X + X.conj().T)


def power_iteration_lambda_max(A, tol: float = 1e-8, max_iters: int = 10_000) -> float:
    """Dominant eigenvalue of a Hermitian PSD matrix.

    Starts from the normalised all-ones vector. Stops when the eigen-residual
    ``||A v - lam v||`` drops below ``tol * lam``; for Hermitian matrices that
    places ``lam`` within ``tol`` (relative) of an eigenvalue. If the start
    vector lies in the null space a fixed perturbed start is tried once.
    """
    A = as_matrix(A)
    n = A.shape[0]
    if A.shape[1] != n:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if scale == 0.0:
        return 0.0

    starts = [np.ones(n, dtype=complex)]
    # deterministic retry: a fixed, non-symmetric perturbation of the all-ones start
    starts.append(np.ones(n, dtype=complex) + 0.5 * np.exp(1j * np.arange(1, n + 1)) * np.arange(1, n + 1) / n)

    for v in starts:
        v = v / np.linalg.norm(v)
        w = A @ v
        if np.linalg.norm(w) <= 1e-14 * scale:
            continue
        for _ in range(max_iters):
            lam = float(np.real(np.vdot(v, w)))
            resid = np.linalg.norm(w - lam * v)
            if resid <= tol * abs(lam):
                return lam
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            v = w / nw
            w = A @ v
        else:
            raise NoConvergence(f"power iteration did not converge in {max_iters} iterations")
    return 0.0


def power_iteration_lambda_min(A, lam_max: float | None = None, tol: float = 1e-8, max_iters: int = 10_000) -> float:
    """Smallest eigenvalue of a Hermitian PSD matrix by a shifted power iteration."""
    A = as_matrix(A)
    if lam_max is None:
        lam_max = power_iteration_lambda_max(A, tol, max_iters)
    if lam_max == 0.0:
        return 0.0
    shifted = lam_max * np.eye(A.shape[0]) - A
    top = power_iteration_lambda_max(shifted, tol, max_iters)
    return max(lam_max - top, 0.0)


def _j0_series(x: float) -> float:
    # sum_m (-1)^m (x/2)^(2m) / (m!)^2, accurate while the largest term stays small
    q = -(x * x) / 4.0
    term = 1.0
    terms = [1.0]
    m = 0
    while True:
        m += 1
        term *= q / (m * m)
        terms.append(term)
        if abs(term) < 1e-18 and m > 2:
            break
    return math.fsum(terms)


def _j0_miller(x: float) -> float:
    # backward recurrence J_{n-1} = (2n/x) J_n - J_{n+1}, normalised by
    # 1 = J_0 + 2 (J_2 + J_4 + ...)
    start = 2 * (int(x) + 30)
    j_next, j_cur = 0.0, 1e-300
    norm = 0.0
    j0 = 0.0
    for n in range(start, 0, -1):
        j_prev = (2.0 * n / x) * j_cur - j_next
        j_next, j_cur = j_cur, j_prev
        if abs(j_cur) > 1e200:
            j_cur *= 1e-200
            j_next *= 1e-200
            norm *= 1e-200
        if (n - 1) % 2 == 0 and n - 1 > 0:
            norm += 2.0 * j_cur
        if n - 1 == 0:
            j0 = j_cur
    norm += j0
    return j0 / norm


def bessel_j0(x: float) -> float:
    """Bessel function of the first kind, order zero, for ``|x| < 50``."""
    x = abs(float(x))
    if x >= 50.0:
        raise ValueError("bessel_j0 is only defined here for |x| < 50")
    if x < 8.0:
        return _j0_series(x)
    return _j0_miller(x)


def draw_complex_gaussian(rng: SeededRng, dim, variance: float = 1.0) -> np.ndarray:
    """I.i.d. circularly-symmetric complex Gaussian entries with the given variance.

    ``dim`` may be an int or a shape tuple.
    """
    if not variance > 0:
        raise ValueError(f"variance must be > 0, got {variance}")
    shape = (dim,) if np.isscalar(dim) else tuple(dim)
    s = math.sqrt(variance / 2.0)
    re = rng.gen.standard_normal(shape)
    im = rng.gen.standard_normal(shape)
    return s * (re + 1j * im)
