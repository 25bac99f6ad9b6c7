"""Hurdle observation model, additive predictors, and priors.

The detection part is Bernoulli with a logit link; the abundance part puts a
Normal on log(value) for positive records. Both share the same additive
structure: species intercepts, i.i.d. gear effects, and a latent field whose
form depends on the model variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, gammaln

from .data_io import DesignIndex
from .errors import ValidationError
from .gmrf import SparsePrecision, SpdeOperator
from .mesh import Mesh, fem_matrices

VARIANTS = ("none", "spatial", "temporal", "spatiotemporal")
SUBMODELS = ("detection", "abundance")
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class PriorSettings:
    """Hyperprior settings; defaults follow the published model."""

    loggamma_shape: float = 1.0
    loggamma_rate: float = 5e-5
    log_kappa_mean: float = 0.0
    log_kappa_sd: float = 1.0
    # variance of log((1 + rho) / (1 - rho))
    rho_transform_var: float = 0.45
    beta_variance: float = 1000.0


@dataclass(frozen=True)
class HurdleModelSpec:
    species: tuple[str, ...]
    gears: tuple[str, ...]
    years: tuple[int, ...]
    variant: str = "spatiotemporal"
    mesh: Mesh | None = None
    include_gear_effect: bool | None = None
    reference_lat: float = 0.0
    priors: PriorSettings = field(default_factory=PriorSettings)

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "gears", tuple(self.gears))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.species or not self.gears or not self.years:
            raise ValidationError("species, gear and year catalogs must be nonempty")
        if self.include_gear_effect is None:
            object.__setattr__(self, "include_gear_effect", len(self.gears) > 1)
        elif self.include_gear_effect and len(self.gears) == 1:
            raise ValidationError("gear effects need more than one gear")
        if self.variant in ("spatial", "spatiotemporal") and self.mesh is None:
            raise ValidationError(f"variant {self.variant!r} requires a mesh")

    @property
    def L(self) -> int:
        return len(self.species)

    @property
    def K(self) -> int:
        return len(self.gears)

    @property
    def T(self) -> int:
        return len(self.years)

    @property
    def M(self) -> int:
        return 0 if self.mesh is None else self.mesh.n_vertices

    @property
    def spatial(self) -> bool:
        return self.variant in ("spatial", "spatiotemporal")

    @property
    def temporal(self) -> bool:
        return self.variant in ("temporal", "spatiotemporal")

    def with_variant(self, variant: str) -> "HurdleModelSpec":
        return replace(self, variant=variant)

    def layout(self) -> "LatentLayout":
        field_size = {"none": 0, "spatial": self.M, "temporal": self.T, "spatiotemporal": self.T * self.M}
        return LatentLayout(self.L, self.K if self.include_gear_effect else 0, field_size[self.variant])

    def latent_labels(self) -> list[str]:
        labels = [f"beta[{s}]" for s in self.species]
        if self.include_gear_effect:
            labels += [f"gear[{g}]" for g in self.gears]
        if self.variant == "spatial":
            labels += [f"field[m={m}]" for m in range(self.M)]
        elif self.variant == "temporal":
            labels += [f"field[t={t}]" for t in self.years]
        elif self.variant == "spatiotemporal":
            labels += [f"field[t={t},m={m}]" for t in self.years for m in range(self.M)]
        return labels


@dataclass(frozen=True)
class LatentLayout:
    n_beta: int
    n_gear: int
    n_field: int

    @property
    def size(self) -> int:
        return self.n_beta + self.n_gear + self.n_field

    @property
    def beta(self) -> slice:
        return slice(0, self.n_beta)

    @property
    def gear(self) -> slice:
        return slice(self.n_beta, self.n_beta + self.n_gear)

    @property
    def field(self) -> slice:
        return slice(self.n_beta + self.n_gear, self.size)


@dataclass
class LatentState:
    beta: np.ndarray
    gear_effects: np.ndarray | None
    field_weights: np.ndarray

    @classmethod
    def zeros(cls, spec: HurdleModelSpec) -> "LatentState":
        lay = spec.layout()
        return cls.from_vector(spec, np.zeros(lay.size))

    @classmethod
    def from_vector(cls, spec: HurdleModelSpec, x) -> "LatentState":
        lay = spec.layout()
        x = np.asarray(x, dtype=float)
        if x.shape != (lay.size,):
            raise ValidationError(f"latent vector has shape {x.shape}, expected ({lay.size},)")
        fw = x[lay.field]
        if spec.variant == "spatiotemporal":
            fw = fw.reshape(spec.T, spec.M)
        return cls(x[lay.beta].copy(), x[lay.gear].copy() if lay.n_gear else None, fw.copy())

    def to_vector(self) -> np.ndarray:
        parts = [self.beta]
        if self.gear_effects is not None:
            parts.append(self.gear_effects)
        parts.append(np.ravel(self.field_weights))
        return np.concatenate(parts)


@dataclass(frozen=True)
class HyperParams:
    sigma_e: float | None = None
    sigma_f: float | None = None
    sigma_omega: float | None = None
    rho: float | None = None
    kappa: float | None = None

    def __post_init__(self):
        for name in ("sigma_e", "sigma_f", "sigma_omega", "kappa"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValidationError(f"{name} must be positive, got {v}")
        if self.rho is not None and not abs(self.rho) < 1:
            raise ValidationError(f"rho must satisfy |rho| < 1, got {self.rho}")

    @property
    def range(self) -> float | None:
        return None if self.kappa is None else math.sqrt(8.0) / self.kappa


HYPER_ORDER = ("sigma_e", "sigma_f", "sigma_omega", "kappa", "rho")


def hyper_names(spec: HurdleModelSpec, submodel: str) -> tuple[str, ...]:
    if submodel not in SUBMODELS:
        raise ValidationError(f"unknown submodel {submodel!r}")
    names = []
    if submodel == "abundance":
        names.append("sigma_e")
    if spec.include_gear_effect:
        names.append("sigma_f")
    if spec.variant != "none":
        names.append("sigma_omega")
    if spec.spatial:
        names.append("kappa")
    if spec.temporal:
        names.append("rho")
    return tuple(names)


def to_internal(hyper: HyperParams, names: Sequence[str]) -> np.ndarray:
    """Log scale for sds and kappa, Fisher z (atanh) for rho."""
    out = []
    for n in names:
        v = getattr(hyper, n)
        if v is None:
            raise ValidationError(f"hyperparameter {n} is required")
        out.append(math.atanh(v) if n == "rho" else math.log(v))
    return np.array(out)


def from_internal(theta, names: Sequence[str]) -> HyperParams:
    vals = {}
    for n, t in zip(names, np.asarray(theta, dtype=float)):
        vals[n] = math.tanh(t) if n == "rho" else math.exp(t)
    return HyperParams(**vals)


def loggamma_logpdf(theta: float, shape: float, rate: float) -> float:
    """Density of theta = log(tau) when tau ~ Gamma(shape, rate)."""
    return shape * math.log(rate) - gammaln(shape) + shape * theta - rate * math.exp(theta)


def normal_logpdf(x, mean=0.0, sd=1.0):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * LOG_2PI - math.log(sd) - 0.5 * z * z


def log_prior_hyper(hyper: HyperParams, priors: PriorSettings | None = None, names=None) -> float:
    """Log hyperprior density on the internal scale, Jacobians included.

    Every sd gets logGamma on its log-precision (log tau = -2 log sigma,
    Jacobian 2); log kappa is Normal; log((1 + rho)/(1 - rho)) = 2 atanh(rho)
    is Normal with variance ``rho_transform_var`` (Jacobian 2).
    """
    p = priors or PriorSettings()
    if names is None:
        names = [n for n in HYPER_ORDER if getattr(hyper, n) is not None]
    total = 0.0
    for n in names:
        v = getattr(hyper, n)
        if v is None:
            raise ValidationError(f"hyperparameter {n} is required")
        if n in ("sigma_e", "sigma_f", "sigma_omega"):
            log_tau = -2.0 * math.log(v)
            total += loggamma_logpdf(log_tau, p.loggamma_shape, p.loggamma_rate) + math.log(2.0)
        elif n == "kappa":
            total += float(normal_logpdf(math.log(v), p.log_kappa_mean, p.log_kappa_sd))
        elif n == "rho":
            w = 2.0 * math.atanh(v)
            total += float(normal_logpdf(w, 0.0, math.sqrt(p.rho_transform_var))) + math.log(2.0)
    return total


# --- observation model -------------------------------------------------------


def detection_loglik(z, eta1) -> float:
    z = np.asarray(z, dtype=float)
    eta1 = np.asarray(eta1, dtype=float)
    if z.shape != eta1.shape:
        raise ValidationError("z and eta lengths differ")
    return float(np.sum(z * eta1 - np.logaddexp(0.0, eta1)))


def abundance_loglik(log_y, eta2, sigma_e: float) -> float:
    if not sigma_e > 0:
        raise ValidationError("sigma_e must be positive")
    log_y = np.asarray(log_y, dtype=float)
    eta2 = np.asarray(eta2, dtype=float)
    if log_y.shape != eta2.shape:
        raise ValidationError("log_y and eta lengths differ")
    r = (log_y - eta2) / sigma_e
    return float(np.sum(-0.5 * LOG_2PI - math.log(sigma_e) - 0.5 * r * r))


def hurdle_loglik(values, eta1, eta2, sigma_e: float) -> float:
    """Full hurdle log-likelihood as detection plus abundance terms.

    ``values`` are raw nonnegative responses; ``eta2`` is used only where
    the value is positive.
    """
    values = np.asarray(values, dtype=float)
    eta2 = np.asarray(eta2, dtype=float)
    pos = values > 0
    out = detection_loglik(pos.astype(float), eta1)
    if pos.any():
        out += abundance_loglik(np.log(values[pos]), eta2[pos], sigma_e)
    return out


class BernoulliLikelihood:
    constant_curvature = False

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def __len__(self):
        return len(self.z)

    def pointwise(self, eta):
        return self.z * eta - np.logaddexp(0.0, eta)

    def loglik(self, eta) -> float:
        return float(np.sum(self.pointwise(eta)))

    def gradient(self, eta):
        return self.z - expit(eta)

    def curvature(self, eta):
        p = expit(eta)
        return p * (1.0 - p)


class GaussianLikelihood:
    constant_curvature = True

    def __init__(self, y, sigma: float):
        if not sigma > 0:
            raise ValidationError("sigma must be positive")
        self.y = np.asarray(y, dtype=float)
        self.sigma = float(sigma)

    def __len__(self):
        return len(self.y)

    def pointwise(self, eta):
        r = (self.y - eta) / self.sigma
        return -0.5 * LOG_2PI - math.log(self.sigma) - 0.5 * r * r

    def loglik(self, eta) -> float:
        return float(np.sum(self.pointwise(eta)))

    def gradient(self, eta):
        return (self.y - eta) / self.sigma ** 2

    def curvature(self, eta):
        return np.full(len(self.y), 1.0 / self.sigma ** 2)


# --- predictors --------------------------------------------------------------


def design_matrix(spec: HurdleModelSpec, index: DesignIndex, projection=None) -> sp.csr_matrix:
    """Sparse map from the latent vector to one linear predictor per record."""
    lay = spec.layout()
    n = len(index)
    rows = [np.arange(n)]
    cols = [index.species.astype(np.int64)]
    vals = [np.ones(n)]
    if lay.n_gear:
        rows.append(np.arange(n))
        cols.append(lay.gear.start + index.gear)
        vals.append(np.ones(n))
    off = lay.field.start
    if spec.variant == "temporal":
        rows.append(np.arange(n))
        cols.append(off + index.year)
        vals.append(np.ones(n))
    elif spec.spatial:
        if projection is None:
            raise ValidationError("spatial variants need a projection matrix")
        A = sp.coo_matrix(projection)
        if A.shape != (n, spec.M):
            raise ValidationError(f"projection has shape {A.shape}, expected {(n, spec.M)}")
        shift = index.year[A.row] * spec.M if spec.variant == "spatiotemporal" else 0
        rows.append(A.row)
        cols.append(off + shift + A.col)
        vals.append(A.data)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, lay.size)
    )


def linear_predictor(
    state: LatentState,
    species: int,
    gear: int,
    year: int,
    projection_row=None,
    spec: HurdleModelSpec | None = None,
) -> float:
    """Predictor for one record from its catalog indices and projection row."""
    if not 0 <= species < len(state.beta):
        raise ValidationError(f"species index {species} out of range")
    eta = float(state.beta[species])
    if state.gear_effects is not None:
        if not 0 <= gear < len(state.gear_effects):
            raise ValidationError(f"gear index {gear} out of range")
        eta += float(state.gear_effects[gear])
    fw = np.asarray(state.field_weights)
    if fw.size == 0:
        return eta
    variant = spec.variant if spec is not None else ("spatiotemporal" if fw.ndim == 2 else None)
    if variant == "temporal" or (variant is None and projection_row is None):
        return eta + float(fw[year])
    row = sp.csr_matrix(projection_row) if projection_row is not None else None
    if row is None:
        raise ValidationError("a projection row is needed for spatial fields")
    block = fw[year] if fw.ndim == 2 else fw
    return eta + float((row @ block)[0])


@dataclass(frozen=True)
class PredictionCell:
    """Predictors at one location and year.

    ``mu`` is the expected abundance on the response scale, exp(eta2), and
    ``theta`` is mu * p.
    """

    x: float
    y: float
    year: int
    eta1: float
    eta2: float

    @property
    def p(self) -> float:
        return float(expit(self.eta1))

    @property
    def mu(self) -> float:
        return math.exp(self.eta2)

    @property
    def theta(self) -> float:
        return self.mu * self.p


# --- latent prior ------------------------------------------------------------


class FieldStructure:
    """Per-mesh cache of the SPDE operator."""

    def __init__(self, mesh: Mesh | None):
        self.mesh = mesh
        self.spde = SpdeOperator(fem_matrices(mesh)) if mesh is not None else None


def _embed(mat, offset: int, size: int) -> sp.csr_matrix:
    m = sp.coo_matrix(mat)
    return sp.csr_matrix((m.data, (m.row + offset, m.col + offset)), shape=(size, size))


def _ar1_parts(T: int):
    """I, interior-diagonal and off-diagonal pieces of the AR1 precision."""
    eye = sp.identity(T, format="csr")
    interior = np.zeros(T)
    interior[1:-1] = 1.0
    off = sp.diags([np.ones(T - 1), np.ones(T - 1)], [-1, 1], shape=(T, T)) if T > 1 else sp.csr_matrix((1, 1))
    return [eye, sp.diags(interior), off]


def _ar1_coefs(rho: float, T: int):
    if T == 1:
        return np.array([1.0, 0.0, 0.0])
    s = 1.0 - rho * rho
    return np.array([1.0 / s, rho * rho / s, -rho / s])


def _spde_coefs(kappa: float):
    k2 = kappa * kappa
    return np.array([k2, 2.0, 1.0 / k2]) / (4.0 * math.pi)


class PriorTerms:
    """The latent prior precision as a weighted sum of fixed sparse matrices.

    ``Q(psi) = sum_k c_k(psi) * M_k``, which lets repeated evaluations reuse
    one sparsity pattern. The log-determinant is assembled per block.
    """

    def __init__(self, spec: HurdleModelSpec, structure: FieldStructure | None = None):
        self.spec = spec
        lay = spec.layout()
        p = lay.size
        if spec.spatial:
            if structure is None or structure.mesh is not spec.mesh:
                structure = FieldStructure(spec.mesh)
            self.spde = structure.spde
        else:
            self.spde = None
        mats = [_embed(sp.identity(lay.n_beta), 0, p)]
        kinds = [("beta",)]
        if lay.n_gear:
            mats.append(_embed(sp.identity(lay.n_gear), lay.gear.start, p))
            kinds.append(("gear",))
        off = lay.field.start
        spatial_parts = [self.spde.C, self.spde.G, self.spde.GCG] if self.spde is not None else []
        if spec.variant == "spatial":
            for j, m in enumerate(spatial_parts):
                mats.append(_embed(m, off, p))
                kinds.append(("s", j))
        elif spec.variant == "temporal":
            for i, m in enumerate(_ar1_parts(spec.T)):
                mats.append(_embed(m, off, p))
                kinds.append(("t", i))
        elif spec.variant == "spatiotemporal":
            for i, mt in enumerate(_ar1_parts(spec.T)):
                for j, ms in enumerate(spatial_parts):
                    mats.append(_embed(sp.kron(mt, ms), off, p))
                    kinds.append(("st", i, j))
        self.matrices = mats
        self.kinds = kinds
        self.size = p

    def coefficients(self, hyper: HyperParams) -> np.ndarray:
        spec = self.spec
        out = np.empty(len(self.kinds))
        prec = None
        if spec.variant != "none":
            if hyper.sigma_omega is None:
                raise ValidationError("sigma_omega is required for a latent field")
            prec = 1.0 / hyper.sigma_omega ** 2
            if spec.temporal and hyper.rho is None:
                raise ValidationError("rho is required for temporal fields")
            if spec.spatial and hyper.kappa is None:
                raise ValidationError("kappa is required for spatial fields")
        for k, kind in enumerate(self.kinds):
            if kind[0] == "beta":
                out[k] = 1.0 / spec.priors.beta_variance
            elif kind[0] == "gear":
                if hyper.sigma_f is None:
                    raise ValidationError("sigma_f is required when gear effects are included")
                out[k] = 1.0 / hyper.sigma_f ** 2
            elif kind[0] == "s":
                out[k] = prec * _spde_coefs(hyper.kappa)[kind[1]]
            elif kind[0] == "t":
                out[k] = prec * _ar1_coefs(hyper.rho, spec.T)[kind[1]]
            else:
                out[k] = prec * _ar1_coefs(hyper.rho, spec.T)[kind[1]] * _spde_coefs(hyper.kappa)[kind[2]]
        return out

    def spatial_logdet(self, kappa: float) -> float:
        c = _spde_coefs(kappa)
        q = c[0] * self.spde.C + c[1] * self.spde.G + c[2] * self.spde.GCG
        return SparsePrecision(q, symmetrize=False).logdet()

    def logdet(self, hyper: HyperParams) -> float:
        spec = self.spec
        lay = spec.layout()
        out = -lay.n_beta * math.log(spec.priors.beta_variance)
        if lay.n_gear:
            out -= 2 * lay.n_gear * math.log(hyper.sigma_f)
        if spec.variant == "none":
            return out
        log_prec = -2.0 * math.log(hyper.sigma_omega)
        ld_t = -(spec.T - 1) * math.log(1.0 - hyper.rho ** 2) if spec.temporal else 0.0
        ld_s = self.spatial_logdet(hyper.kappa) if spec.spatial else 0.0
        if spec.variant == "spatial":
            return out + ld_s + spec.M * log_prec
        if spec.variant == "temporal":
            return out + ld_t + spec.T * log_prec
        return out + spec.M * ld_t + spec.T * ld_s + spec.T * spec.M * log_prec

    def precision(self, hyper: HyperParams) -> SparsePrecision:
        c = self.coefficients(hyper)
        Q = sum(ck * m for ck, m in zip(c, self.matrices))
        return SparsePrecision(Q, logdet=self.logdet(hyper), symmetrize=False)


def latent_prior_precision(
    spec: HurdleModelSpec, hyper: HyperParams, structure: FieldStructure | None = None
) -> SparsePrecision:
    """Block-diagonal prior precision over (beta, gear effects, field).

    Vague Gaussian on beta, i.i.d. gear effects with sd sigma_f, and the
    field block scaled to marginal sd sigma_omega. The log-determinant uses
    the Kronecker identity for the spatio-temporal field, so the full
    matrix is never factorized here.
    """
    return PriorTerms(spec, structure).precision(hyper)
