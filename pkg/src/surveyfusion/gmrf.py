"""Gaussian Markov random fields: SPDE Matern, AR1 and their Kronecker product."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.linalg import splu, spsolve_triangular
from scipy.special import gamma, kv

from .errors import DefinitenessError, ValidationError
from .mesh import FemMatrices

# Dense LAPACK Cholesky is faster than SuperLU below this dimension.
DENSE_LIMIT = 3000
MAX_DIMENSION = 5_000_000
NU = 1.0


class CholeskyFactor:
    """Cholesky-type factorization of a symmetric positive-definite matrix.

    Small systems use a dense LAPACK factor. Larger ones use SuperLU in
    symmetric mode with pivoting disabled, which yields ``P Q P' = L D L'``;
    a non-positive pivot means the matrix is not positive definite. No
    jitter is ever added.
    """

    def __init__(self, matrix, dense: np.ndarray | None = None):
        n = matrix.shape[0]
        self.n = n
        if n <= DENSE_LIMIT:
            owned = dense is not None or sp.issparse(matrix)
            if dense is None:
                dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
            if not np.all(np.isfinite(dense)):
                raise DefinitenessError("matrix has non-finite entries")
            L, info = lapack.dpotrf(dense, lower=1, clean=1, overwrite_a=int(owned))
            if info != 0:
                raise DefinitenessError(f"Cholesky factorization failed (LAPACK info {info})")
            self._L = L
            self._lu = None
            self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._L))))
        else:
            lu = splu(
                sp.csc_matrix(matrix),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
            d = lu.U.diagonal()
            if np.any(d <= 0) or not np.array_equal(lu.perm_r, lu.perm_c):
                raise DefinitenessError("matrix is not positive definite")
            self._lu = lu
            self._L = None
            self._d = d
            self._logdet = float(np.sum(np.log(d)))

    @property
    def is_dense(self) -> bool:
        return self._lu is None

    def logdet(self) -> float:
        return self._logdet

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self._lu is None:
            return sla.cho_solve((self._L, True), b, check_finite=False)
        return self._lu.solve(b)

    def solve_lt(self, z):
        """Return x with L' x = z, so that x ~ N(0, Q^-1) when z ~ N(0, I)."""
        z = np.asarray(z, dtype=float)
        if self._lu is None:
            return sla.solve_triangular(self._L, z, lower=True, trans="T", check_finite=False)
        # P Q P' = L D L' with unit-diagonal L
        w = z / np.sqrt(self._d).reshape((-1,) + (1,) * (z.ndim - 1))
        u = spsolve_triangular(self._lu.L.T.tocsr(), w, lower=False, unit_diagonal=True)
        return u[self._lu.perm_c]

    def inverse_diagonal(self, block: int = 256) -> np.ndarray:
        if self._lu is None:
            Linv, info = lapack.dtrtri(self._L, lower=1)
            if info != 0:
                raise DefinitenessError(f"triangular inversion failed (LAPACK info {info})")
            return np.einsum("ij,ij->j", Linv, Linv)
        out = np.empty(self.n)
        for start in range(0, self.n, block):
            stop = min(self.n, start + block)
            rhs = np.zeros((self.n, stop - start))
            rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
            sol = self._lu.solve(rhs)
            out[start:stop] = sol[np.arange(start, stop), np.arange(stop - start)]
        return out


class SparsePrecision:
    """Symmetric positive-definite sparse precision with a lazily cached factor.

    ``logdet`` may be supplied when it is known in closed form (for example
    from a Kronecker structure) so that it is not recomputed by factorization.
    """

    def __init__(self, matrix, logdet: float | None = None, symmetrize: bool = True, dense=None):
        Q = sp.csc_matrix(matrix, dtype=float)
        if Q.shape[0] != Q.shape[1]:
            raise ValidationError(f"precision must be square, got {Q.shape}")
        if symmetrize:
            Q = ((Q + Q.T) * 0.5).tocsc()
        Q.sort_indices()
        self.matrix = Q
        self._logdet = logdet
        self._factor: CholeskyFactor | None = None
        # optional dense copy, consumed by the first factorization
        self._dense = dense

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def factor(self) -> CholeskyFactor:
        if self._factor is None:
            self._factor = CholeskyFactor(self.matrix, self._dense)
            self._dense = None
        return self._factor

    def logdet(self) -> float:
        if self._logdet is None:
            self._logdet = self.factor.logdet()
        return self._logdet

    def solve(self, b):
        return self.factor.solve(b)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def asymmetry(self) -> float:
        diff = self.matrix - self.matrix.T
        return float(abs(diff).max()) if diff.nnz else 0.0

    def scaled(self, c: float) -> "SparsePrecision":
        logdet = None if self._logdet is None else self._logdet + self.n * math.log(c)
        return SparsePrecision(self.matrix * c, logdet=logdet, symmetrize=False)

    def __repr__(self):
        return f"SparsePrecision(n={self.n}, nnz={self.matrix.nnz})"


@dataclass(frozen=True)
class MaternParams:
    """Matern field with smoothness 1 in two dimensions.

    ``kappa`` in 1/km, ``tau`` the SPDE scale. Build from the practical range
    and marginal sd with :meth:`from_range`.
    """

    kappa: float
    tau: float
    nu: float = NU

    def __post_init__(self):
        if self.kappa <= 0 or self.tau <= 0:
            raise ValidationError("kappa and tau must be positive")
        if self.nu != NU:
            raise ValidationError("only smoothness nu = 1 is supported")

    @classmethod
    def from_range(cls, range_km: float, sigma: float) -> "MaternParams":
        kappa = math.sqrt(8 * NU) / range_km
        return cls.from_kappa_sigma(kappa, sigma)

    @classmethod
    def from_kappa_sigma(cls, kappa: float, sigma: float) -> "MaternParams":
        return cls(kappa, 1.0 / (math.sqrt(4 * math.pi) * kappa * sigma))

    @property
    def range(self) -> float:
        return math.sqrt(8 * self.nu) / self.kappa

    @property
    def sigma(self) -> float:
        return 1.0 / (math.sqrt(4 * math.pi) * self.kappa * self.tau)


@dataclass(frozen=True)
class Ar1Params:
    rho: float
    T: int

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValidationError(f"AR1 coefficient must satisfy |rho| < 1, got {self.rho}")
        if self.T < 1:
            raise ValidationError("AR1 needs at least one time point")


def matern_correlation(delta, params: MaternParams):
    """Matern correlation at distance ``delta`` (km); equals 1 at zero distance."""
    d = np.asarray(delta, dtype=float)
    if np.any(d < 0):
        raise ValidationError("distance must be nonnegative")
    nu = params.nu
    u = params.kappa * d
    with np.errstate(invalid="ignore"):
        out = (2 ** (1 - nu) / gamma(nu)) * u ** nu * kv(nu, u)
    out = np.where(u == 0, 1.0, out)
    return out if out.ndim else float(out)


class SpdeOperator:
    """Cached FEM pieces for repeated evaluation of the SPDE precision.

    The unit-variance precision is ``(k^4 C + 2 k^2 G + G C^-1 G) / (4 pi k^2)``.
    """

    def __init__(self, fem: FemMatrices):
        self.fem = fem
        self.C = fem.C
        self.G = fem.G
        self.GCG = fem.g_cinv_g()
        self.M = fem.C.shape[0]

    def precision(self, params: MaternParams) -> SparsePrecision:
        k2 = params.kappa ** 2
        Q = params.tau ** 2 * (k2 * k2 * self.C + 2 * k2 * self.G + self.GCG)
        return SparsePrecision(Q)

    def unit_precision(self, kappa: float) -> SparsePrecision:
        return self.precision(MaternParams.from_kappa_sigma(kappa, 1.0))


def spde_precision(fem: FemMatrices, params: MaternParams) -> SparsePrecision:
    if params.nu != NU:
        raise ValidationError("only nu = 1 (operator order 2) is supported")
    return SpdeOperator(fem).precision(params)


def ar1_precision(params: Ar1Params) -> SparsePrecision:
    """Tridiagonal precision of a stationary AR1 with unit marginal variance."""
    rho, T = params.rho, params.T
    s = 1.0 - rho * rho
    main = np.full(T, (1.0 + rho * rho) / s)
    main[0] = main[-1] = 1.0 / s
    if T == 1:
        main[:] = 1.0
    off = np.full(T - 1, -rho / s)
    Q = sp.diags([off, main, off], [-1, 0, 1], shape=(T, T))
    # |Sigma| = (1 - rho^2)^(T - 1)
    return SparsePrecision(Q, logdet=-(T - 1) * math.log(s))


def kronecker_precision(qt: SparsePrecision, qs: SparsePrecision) -> SparsePrecision:
    """``Q_t (x) Q_s``, ordered year-major (all mesh nodes of year 1 first)."""
    T, M = qt.n, qs.n
    if T * M > MAX_DIMENSION:
        raise ValidationError(f"Kronecker dimension {T * M} exceeds {MAX_DIMENSION}")
    logdet = None
    if qt._logdet is not None and qs._logdet is not None:
        logdet = M * qt._logdet + T * qs._logdet
    return SparsePrecision(sp.kron(qt.matrix, qs.matrix, format="csc"), logdet=logdet, symmetrize=False)


def sample_gmrf(q: SparsePrecision, seed=None, size: int | None = None) -> np.ndarray:
    """Draw from N(0, q^-1); ``size`` draws are returned as rows."""
    rng = np.random.default_rng(seed)
    if size is None:
        return q.factor.solve_lt(rng.standard_normal(q.n))
    z = rng.standard_normal((q.n, size))
    return q.factor.solve_lt(z).T


def marginal_variances(q: SparsePrecision) -> np.ndarray:
    return q.factor.inverse_diagonal()
