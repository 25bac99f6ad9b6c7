"""Nested Laplace-style inference for each hurdle submodel.

At fixed hyperparameters the latent vector gets a Gaussian approximation
found by Newton iterations. The hyperparameter posterior is then mapped
around its mode on a grid in standardized coordinates. Latent marginals are
Gaussian mixtures over that grid, and WAIC uses draws from the mixture.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.special import logsumexp, ndtr

from .data_io import HaulRecord, build_design_index, split_hurdle
from .errors import ConvergenceError, NumericalError, ValidationError
from . import gmrf
from .gmrf import SparsePrecision
from .mesh import projection_matrix
from .model import (
    BernoulliLikelihood,
    FieldStructure,
    GaussianLikelihood,
    HurdleModelSpec,
    HyperParams,
    PriorTerms,
    design_matrix,
    from_internal,
    hyper_names,
    log_prior_hyper,
)

log = logging.getLogger(__name__)

W_FLOOR = 1e-10
Z95 = 1.959963984540054
# extra log-units allowed by the additive pre-screen of box points
PRESCREEN_SLACK = 0.5


@dataclass(frozen=True)
class InferenceSettings:
    grid_step: float = 1.0
    grid_cutoff: float = 5.0
    n_samples: int = 200
    seed: int = 0
    newton_tol: float = 1e-6
    newton_max_iter: int = 50
    opt_step_tol: float = 1e-4
    opt_max_evals: int = 200
    opt_max_step: float = 1.5
    fd_step: float = 1e-3
    hessian_rel_step: float = 1e-3
    max_grid_points: int = 20000
    threads: int = 1


# --- Gaussian approximation ------------------------------------------------------------


@dataclass
class GaussianApprox:
    mode: np.ndarray
    precision: SparsePrecision
    log_marginal: float
    loglik: float
    iterations: int
    grad_trace: list = field(default_factory=list)
    _variances: np.ndarray | None = None

    def marginal_variances(self) -> np.ndarray:
        if self._variances is None:
            self._variances = self.precision.factor.inverse_diagonal()
        return self._variances


def _hessian(prior: SparsePrecision, design, design_t, w):
    if design.shape[0] == 0:
        return prior.matrix
    return (prior.matrix + design_t @ sp.diags(w) @ design).tocsc()


def gaussian_approx(
    loglik,
    prior: SparsePrecision,
    design,
    init=None,
    tol: float = 1e-6,
    max_iter: int = 50,
    design_t=None,
    assemble: Callable | None = None,
) -> GaussianApprox:
    """Newton-Raphson mode of log p(y | x) - x'Qx / 2 and its curvature.

    ``loglik`` provides ``loglik(eta)``, ``gradient(eta)`` and
    ``curvature(eta)`` (the negative second derivative). Each step solves
    ``(Q + A'WA) delta = grad`` with step halving if the objective drops.
    The returned ``log_marginal`` is the Laplace approximation of
    log p(y | hyperparameters). ``assemble(w)``, if given, must return
    ``Q + A'diag(w)A`` as a :class:`SparsePrecision`.
    """
    design = sp.csr_matrix(design)
    if design_t is None:
        design_t = design.T.tocsr()
    Q = prior.matrix
    n = prior.n
    if assemble is None:
        assemble = lambda w: SparsePrecision(_hessian(prior, design, design_t, w), symmetrize=False)  # noqa: E731
    x = np.zeros(n) if init is None else np.array(init, dtype=float)
    if x.shape != (n,):
        raise ValidationError(f"initial latent vector has shape {x.shape}, expected ({n},)")

    def objective(x):
        return loglik.loglik(design @ x) - 0.5 * x @ (Q @ x)

    trace = []
    H = None
    f = objective(x)
    it = 0
    while True:
        eta = design @ x
        grad = design_t @ loglik.gradient(eta) - Q @ x
        gnorm = float(np.max(np.abs(grad))) if n else 0.0
        trace.append(gnorm)
        if not math.isfinite(gnorm):
            raise ConvergenceError("non-finite gradient in the inner optimization", trace)
        if gnorm < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"inner Newton did not converge in {max_iter} iterations (gradient max-norm {gnorm:.3g})", trace
            )
        w = np.maximum(loglik.curvature(eta), W_FLOOR)
        H = assemble(w)
        delta = H.solve(grad)
        step = 1.0
        while True:
            x_new = x + step * delta
            f_new = objective(x_new)
            if f_new >= f - 1e-12 * abs(f) or step < 1e-10:
                break
            step *= 0.5
        x, f = x_new, f_new
        it += 1

    if H is not None and loglik.constant_curvature:
        post = H
    else:
        post = assemble(np.maximum(loglik.curvature(design @ x), W_FLOOR))
    ll = loglik.loglik(design @ x)
    logml = ll - 0.5 * x @ (Q @ x) + 0.5 * prior.logdet() - 0.5 * post.logdet()
    return GaussianApprox(x, post, float(logml), float(ll), it, trace)


class PrecisionAssembler:
    """Builds ``Q(psi) + A'diag(w)A`` on a fixed sparsity pattern.

    The pattern is the union of the prior terms and of A'A. Prior entries
    are a fixed linear map of the term coefficients and likelihood entries
    a fixed linear map of ``w``, so each assembly is two small products and
    a scatter into a dense buffer (small systems) or a CSC array.
    """

    def __init__(self, terms: PriorTerms, design):
        p = terms.size
        A = sp.csr_matrix(design)
        A.sum_duplicates()
        term_keys = []
        for m in terms.matrices:
            c = sp.coo_matrix(m)
            term_keys.append((c.row.astype(np.int64) * p + c.col, c.data))
        counts = np.diff(A.indptr)
        rec, k1, k2, vals = [], [], [], []
        for k in np.unique(counts[counts > 0]):
            rows = np.flatnonzero(counts == k)
            idx = A.indptr[rows][:, None] + np.arange(k)[None, :]
            cols = A.indices[idx]
            v = A.data[idx]
            rec.append(np.repeat(rows, k * k))
            k1.append(np.repeat(cols, k, axis=1).ravel())
            k2.append(np.tile(cols, (1, k)).ravel())
            vals.append((v[:, :, None] * v[:, None, :]).ravel())
        if rec:
            rec, k1, k2, vals = (np.concatenate(a) for a in (rec, k1, k2, vals))
        else:
            rec = k1 = k2 = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        pair_keys = k1.astype(np.int64) * p + k2
        diag_keys = np.arange(p, dtype=np.int64) * (p + 1)
        keys = np.unique(np.concatenate([pair_keys, diag_keys] + [k for k, _ in term_keys]))
        nk = len(keys)
        self.terms = terms
        self.n = p
        self.keys = keys
        self.indices = (keys % p).astype(np.int32)
        self.indptr = np.searchsorted(keys // p, np.arange(p + 1)).astype(np.int32)
        self.term_matrix = np.zeros((nk, len(term_keys)))
        for j, (k, d) in enumerate(term_keys):
            np.add.at(self.term_matrix[:, j], np.searchsorted(keys, k), d)
        self.P = sp.csr_matrix((vals, (np.searchsorted(keys, pair_keys), rec)), shape=(nk, A.shape[0]))

    def prior_data(self, hyper: HyperParams) -> np.ndarray:
        return self.term_matrix @ self.terms.coefficients(hyper)

    def build(self, data, logdet: float | None = None, dense: bool = True) -> SparsePrecision:
        p = self.n
        mat = sp.csc_matrix((data, self.indices, self.indptr), shape=(p, p))
        buf = None
        if dense and p <= gmrf.DENSE_LIMIT:
            buf = np.zeros((p, p))
            buf.flat[self.keys] = data
        return SparsePrecision(mat, logdet=logdet, symmetrize=False, dense=buf)

    def hessian(self, prior_data, w) -> SparsePrecision:
        return self.build(prior_data + self.P @ w)


# --- one submodel --------------------------------------------------------------------


class SubmodelProblem:
    """Data, design and prior structure for one of the two hurdle parts."""

    def __init__(
        self,
        spec: HurdleModelSpec,
        kind: str,
        design,
        response,
        structure: FieldStructure | None = None,
        settings: InferenceSettings | None = None,
        labels: Sequence[str] | None = None,
    ):
        self.spec = spec
        self.kind = kind
        self.names = hyper_names(spec, kind)
        self.design = sp.csr_matrix(design)
        self.design_t = self.design.T.tocsr()
        self.response = np.asarray(response, dtype=float)
        if self.design.shape[0] != len(self.response):
            raise ValidationError("design rows and responses differ in length")
        if structure is None and spec.spatial:
            structure = FieldStructure(spec.mesh)
        self.structure = structure
        self.terms = PriorTerms(spec, structure)
        self.assembler = PrecisionAssembler(self.terms, self.design)
        self.settings = settings or InferenceSettings()
        self.labels = list(labels) if labels is not None else spec.latent_labels()
        self.n_evals = 0

    @property
    def dim(self) -> int:
        return len(self.names)

    def data_key(self) -> str:
        h = hashlib.sha1()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.response).tobytes())
        return h.hexdigest()[:16]

    def hyper(self, theta) -> HyperParams:
        return from_internal(theta, self.names)

    def likelihood(self, hyper: HyperParams):
        if self.kind == "detection":
            return BernoulliLikelihood(self.response)
        return GaussianLikelihood(self.response, hyper.sigma_e)

    def prior(self, hyper: HyperParams) -> SparsePrecision:
        return self.assembler.build(self.assembler.prior_data(hyper), self.terms.logdet(hyper), dense=False)

    def approx(self, theta, init=None) -> GaussianApprox:
        hyper = self.hyper(theta)
        self.n_evals += 1
        pdata = self.assembler.prior_data(hyper)
        prior = self.assembler.build(pdata, self.terms.logdet(hyper), dense=False)
        return gaussian_approx(
            self.likelihood(hyper), prior, self.design, init,
            self.settings.newton_tol, self.settings.newton_max_iter, self.design_t,
            assemble=lambda w: self.assembler.hessian(pdata, w),
        )

    def log_prior(self, theta) -> float:
        return log_prior_hyper(self.hyper(theta), self.spec.priors, self.names)

    def evaluate(self, theta, init=None) -> tuple[float, GaussianApprox | None]:
        """Log posterior of the internal hyperparameters (up to a constant)."""
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)) or np.any(np.abs(theta) > 30):
            return -math.inf, None
        try:
            hyper = self.hyper(theta)
            ap = self.approx(theta, init)
        except (NumericalError, ValidationError) as exc:
            log.debug("evaluation failed at %s: %s", theta, exc)
            return -math.inf, None
        value = ap.log_marginal + log_prior_hyper(hyper, self.spec.priors, self.names)
        return (value if math.isfinite(value) else -math.inf), ap

    def posterior_precision(self, theta, mode) -> SparsePrecision:
        hyper = self.hyper(theta)
        lik = self.likelihood(hyper)
        w = np.maximum(lik.curvature(self.design @ mode), W_FLOOR)
        return self.assembler.hessian(self.assembler.prior_data(hyper), w)

    def pointwise_loglik(self, theta, eta) -> np.ndarray:
        return self.likelihood(self.hyper(theta)).pointwise(eta)

    def initial_theta(self) -> np.ndarray:
        y = self.response
        sd = float(np.std(y)) if self.kind == "abundance" and len(y) > 1 else 1.0
        vals = {
            "sigma_e": max(0.5 * sd, 0.05),
            "sigma_f": 0.5,
            "sigma_omega": max(0.5 * sd, 0.1) if self.kind == "abundance" else 1.0,
            "rho": 0.3,
        }
        if self.spec.mesh is not None:
            v = self.spec.mesh.vertices
            extent = float(np.max(v.max(axis=0) - v.min(axis=0)))
            vals["kappa"] = math.sqrt(8.0) / (0.2 * extent)
        return np.array([math.atanh(vals[n]) if n == "rho" else math.log(vals[n]) for n in self.names])


def log_posterior_hyper(problem: SubmodelProblem, hyper: HyperParams, init=None) -> float:
    from .model import to_internal

    value, _ = problem.evaluate(to_internal(hyper, problem.names), init)
    return value


# --- hyperparameter mode, curvature, grid -----------------------------------------------


@dataclass
class OptimizeResult:
    theta: np.ndarray
    value: float
    converged: bool
    n_evals: int
    n_steps: int
    message: str = ""


def fd_gradient(f: Callable, theta, h: float = 1e-3) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        fp, fm = f(theta + e), f(theta - e)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            return np.full_like(theta, np.nan)
        g[k] = (fp - fm) / (2 * h)
    return g


def optimize_hyper(
    f: Callable,
    start,
    step_tol: float = 1e-4,
    max_evals: int = 200,
    fd_step: float = 1e-3,
    max_step: float = 1.5,
) -> OptimizeResult:
    """BFGS ascent of ``f`` with central-difference gradients.

    Converges when the proposed step has max-norm below ``step_tol``.
    ``n_evals`` counts objective points visited by the iteration (gradient
    probes are not counted); exceeding ``max_evals`` returns a
    non-converged result.
    """
    theta = np.array(start, dtype=float)
    d = len(theta)
    fx = f(theta)
    n_evals = 1
    if not math.isfinite(fx):
        raise ConvergenceError(f"objective is not finite at the starting point {theta}", [])
    if d == 0:
        return OptimizeResult(theta, fx, True, n_evals, 0)
    g = fd_gradient(f, theta, fd_step)
    Hinv = np.eye(d)
    scaled = False
    n_steps = 0
    while True:
        if not np.all(np.isfinite(g)):
            return OptimizeResult(theta, fx, False, n_evals, n_steps, "non-finite gradient")
        p = Hinv @ g
        big = float(np.max(np.abs(p)))
        if big > max_step:
            p *= max_step / big
            big = max_step
        if big < step_tol:
            return OptimizeResult(theta, fx, True, n_evals, n_steps)
        slope = float(g @ p)
        alpha = 1.0
        while True:
            if n_evals >= max_evals:
                return OptimizeResult(theta, fx, False, n_evals, n_steps, f"exceeded {max_evals} evaluations")
            trial = theta + alpha * p
            ft = f(trial)
            n_evals += 1
            if math.isfinite(ft) and ft >= fx + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
            if alpha * big < step_tol:
                # no further ascent is resolvable at this scale
                return OptimizeResult(theta, fx, True, n_evals, n_steps, "line search reached step tolerance")
        gt = fd_gradient(f, trial, fd_step)
        s = trial - theta
        y = g - gt
        sy = float(s @ y)
        if sy > 1e-12 and np.all(np.isfinite(gt)):
            if not scaled:
                Hinv = np.eye(d) * sy / float(y @ y)
                scaled = True
            rho = 1.0 / sy
            V = np.eye(d) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        theta, fx, g = trial, ft, gt
        n_steps += 1


def hessian_fd(f: Callable, theta, f0: float | None = None, rel_step: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian with steps ``rel_step * max(1, |theta_k|)``."""
    theta = np.asarray(theta, dtype=float)
    d = len(theta)
    if f0 is None:
        f0 = f(theta)
    h = rel_step * np.maximum(1.0, np.abs(theta))
    H = np.zeros((d, d))

    def at(*moves):
        t = theta.copy()
        for k, s in moves:
            t[k] += s * h[k]
        return f(t)

    for i in range(d):
        H[i, i] = (at((i, 1)) - 2 * f0 + at((i, -1))) / h[i] ** 2
        for j in range(i):
            v = at((i, 1), (j, 1)) - at((i, 1), (j, -1)) - at((i, -1), (j, 1)) + at((i, -1), (j, -1))
            H[i, j] = H[j, i] = v / (4 * h[i] * h[j])
    return H


@dataclass
class HyperGridPoint:
    theta: np.ndarray
    z: tuple
    log_post: float
    weight: float
    hyper: HyperParams | None = None
    payload: object = None


@dataclass
class GridResult:
    points: list
    basis: np.ndarray | None
    fallback: bool
    n_evaluated: int
    step: float = 1.0


def _parent(z: tuple) -> tuple:
    k = int(np.argmax(np.abs(z)))
    z = list(z)
    z[k] -= int(np.sign(z[k]))
    return tuple(z)


def explore_hyper(
    evaluate: Callable,
    mode,
    hessian,
    f_mode: float | None = None,
    state_mode=None,
    step: float = 1.0,
    cutoff: float = 5.0,
    max_points: int = 20000,
    threads: int = 1,
    keep: Callable | None = None,
    seed: Callable | None = None,
) -> GridResult:
    """Grid over the hyperparameter posterior in standardized coordinates.

    ``hessian`` is the Hessian of the log posterior at ``mode``. With
    ``-hessian = V diag(lam) V'`` a grid point ``z`` maps to
    ``mode + V diag(lam^-1/2) step z``. Each axis is walked until the log
    posterior falls more than ``cutoff`` below the mode; the box spanned by
    the axes is screened with the sum of the axis drops, and every point
    within ``cutoff`` of the mode is kept.

    ``evaluate(theta, hint)`` returns ``(log_post, state)``, where ``hint``
    is ``seed(state)`` of the nearest evaluated point towards the mode
    (a warm start). ``keep(state)`` becomes the payload of kept points.
    Points are evaluated in shells of increasing L1 norm, so results do
    not depend on ``threads``.
    """
    keep = keep or (lambda st: st)
    seed = seed or (lambda st: None)
    mode = np.asarray(mode, dtype=float)
    d = len(mode)
    if f_mode is None:
        f_mode, state_mode = evaluate(mode, None)
    payload_mode = keep(state_mode) if state_mode is not None else None
    H = -0.5 * (np.asarray(hessian, dtype=float) + np.asarray(hessian, dtype=float).T)
    origin = (0,) * d
    single = HyperGridPoint(mode, origin, f_mode, 1.0, payload=payload_mode)
    if d == 0:
        return GridResult([single], None, False, 1, step)
    ok = np.all(np.isfinite(H))
    lam, V = np.linalg.eigh(H) if ok else (np.array([-1.0]), None)
    if lam.min() <= 0:
        warnings.warn(
            "hyperparameter curvature is not positive definite; using the mode only (empirical Bayes)",
            RuntimeWarning,
            stacklevel=2,
        )
        return GridResult([single], None, True, 1, step)
    B = V / np.sqrt(lam)

    values = {origin: (f_mode, payload_mode)}
    hints = {origin: seed(state_mode) if state_mode is not None else None}

    def hint_for(z):
        a = _parent(z)
        while a not in hints:
            a = _parent(a)
        h = hints[a]
        if a != origin and isinstance(h, np.ndarray):
            g = _parent(a)
            # linear extrapolation when z, a, g are collinear and equally spaced
            if g in hints and isinstance(hints[g], np.ndarray) and all(
                zi - ai == ai - gi for zi, ai, gi in zip(z, a, g)
            ):
                h = 2.0 * h - hints[g]
        return h

    def run(z):
        v, st = evaluate(mode + B @ (step * np.asarray(z, dtype=float)), hint_for(z))
        inside = f_mode - v <= cutoff
        if st is None:
            return z, v, None, None
        return z, v, seed(st), (keep(st) if inside else None)

    def record(result):
        z, v, h, pl = result
        values[z] = (v, pl)
        hints[z] = h
        return f_mode - v

    axis_drop = [{0: 0.0} for _ in range(d)]
    jmax = int(math.ceil(3 * math.sqrt(2 * cutoff) / step)) + 2
    for k in range(d):
        for sign in (1, -1):
            for j in range(1, jmax + 1):
                z = [0] * d
                z[k] = sign * j
                drop = record(run(tuple(z)))
                axis_drop[k][sign * j] = drop
                if not drop <= cutoff:
                    break
    ranges = []
    for k in range(d):
        inside = [j for j, dr in axis_drop[k].items() if dr <= cutoff]
        ranges.append(range(min(inside), max(inside) + 1))

    todo = []
    for z in itertools.product(*ranges):
        if z in values:
            continue
        if sum(axis_drop[k][z[k]] for k in range(d)) <= cutoff + PRESCREEN_SLACK:
            todo.append(z)
    if len(todo) + len(values) > max_points:
        raise NumericalError(f"hyperparameter grid would need {len(todo) + len(values)} points (limit {max_points})")
    todo.sort(key=lambda z: (sum(abs(c) for c in z), z))
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for _, shell in itertools.groupby(todo, key=lambda z: sum(abs(c) for c in z)):
            shell = list(shell)
            results = list(pool.map(run, shell)) if pool else [run(z) for z in shell]
            for r in results:
                record(r)
    finally:
        if pool:
            pool.shutdown()

    kept = sorted(z for z, (v, _) in values.items() if f_mode - v <= cutoff)
    lp = np.array([values[z][0] for z in kept])
    w = np.exp(lp - lp.max())
    w /= w.sum()
    points = [
        HyperGridPoint(mode + B @ (step * np.asarray(z, dtype=float)), z, float(l), float(wi), payload=values[z][1])
        for z, l, wi in zip(kept, lp, w)
    ]
    return GridResult(points, B, False, len(values), step)


# --- mixtures and WAIC ---------------------------------------------------------------------


def latent_marginals(weights, means, variances) -> tuple[np.ndarray, np.ndarray]:
    """Moments of a Gaussian mixture, per coordinate.

    ``means`` and ``variances`` are (components, latent) arrays.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    var = np.atleast_2d(np.asarray(variances, dtype=float))
    mean = w @ mu
    second = w @ (var + mu * mu)
    return mean, np.sqrt(np.maximum(second - mean * mean, 0.0))


def mixture_quantile(q: float, weights, means, sds) -> float:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu = np.asarray(means, dtype=float)
    s = np.asarray(sds, dtype=float)
    if np.all(s == 0):
        order = np.argsort(mu)
        c = np.cumsum(w[order])
        return float(mu[order][np.searchsorted(c, q - 1e-12)])
    s = np.maximum(s, 1e-300)
    cdf = lambda x: float(w @ ndtr((x - mu) / s)) - q  # noqa: E731
    lo = float(np.min(mu - 10 * s))
    hi = float(np.max(mu + 10 * s))
    return brentq(cdf, lo, hi, xtol=1e-12 * max(1.0, abs(hi)))


def compute_waic(lpd) -> tuple[float, float]:
    """WAIC from a (samples, records) matrix of pointwise log densities.

    Returns (waic, p_eff) with lppd = sum_i log mean_s exp(lpd) and
    p_eff = sum_i var_s(lpd) (population variance).
    """
    lpd = np.atleast_2d(np.asarray(lpd, dtype=float))
    if lpd.size == 0:
        raise ValidationError("need at least one sample and one record")
    if not np.all(np.isfinite(lpd)):
        raise ValidationError("pointwise log densities must be finite")
    S = lpd.shape[0]
    lppd = float(np.sum(logsumexp(lpd, axis=0) - math.log(S)))
    p_eff = float(np.sum(np.var(lpd, axis=0)))
    return -2.0 * (lppd - p_eff), p_eff


# --- results -------------------------------------------------------------------------------


@dataclass
class HyperSummary:
    name: str
    mean: float
    lo: float
    hi: float
    internal_mean: float
    internal_sd: float


def _transform(name: str):
    if name == "rho":
        return np.tanh
    if name == "range":
        return lambda t: math.sqrt(8.0) * np.exp(-np.asarray(t))
    if name == "variance":
        return lambda t: np.exp(2 * np.asarray(t))
    return np.exp


def summarize_hyper(names, grid: GridResult) -> dict[str, HyperSummary]:
    """Posterior mean and 95% interval per hyperparameter.

    The interval is Gaussian on the internal scale. It uses the grid mean and
    the grid variance, corrected for truncation by the ratio that the same
    point set gives for an exact Gaussian, and is then mapped back.
    """
    thetas = np.array([p.theta for p in grid.points])
    w = np.array([p.weight for p in grid.points])
    m = w @ thetas
    var = w @ (thetas - m) ** 2
    if grid.basis is not None and len(grid.points) > 1:
        u = grid.step * np.array([p.z for p in grid.points], dtype=float)
        phi = np.exp(-0.5 * np.sum(u * u, axis=1))
        phi /= phi.sum()
        off = u @ grid.basis.T
        ref = phi @ (off - phi @ off) ** 2
        true = np.sum(grid.basis ** 2, axis=1)
        var = var * np.where(ref > 0, true / np.where(ref > 0, ref, 1.0), 1.0)
    out = {}
    for k, name in enumerate(names):
        sd = math.sqrt(max(var[k], 0.0))
        out[name] = _summary(name, name, thetas[:, k], w, m[k], sd)
        if name == "kappa":
            out["range"] = _summary("range", "range", thetas[:, k], w, m[k], sd)
        if name == "sigma_omega":
            out["variance"] = _summary("variance", "variance", thetas[:, k], w, m[k], sd)
    return out


def _summary(label, kind, values, w, m, sd) -> HyperSummary:
    g = _transform(kind)
    ends = sorted([float(g(m - Z95 * sd)), float(g(m + Z95 * sd))])
    return HyperSummary(label, float(w @ g(values)), ends[0], ends[1], float(m), sd)


@dataclass
class SubmodelFit:
    kind: str
    names: tuple
    labels: list
    optimizer: OptimizeResult
    hessian: np.ndarray
    grid: GridResult
    hyper: dict
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    component_means: np.ndarray
    component_sds: np.ndarray
    samples: np.ndarray
    sample_theta: np.ndarray
    waic: float
    p_eff: float
    n_records: int
    data_key: str

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.grid.points])

    def index_of(self, label: str) -> int:
        return self.labels.index(label)

    def latent_interval(self, i: int, level: float = 0.95) -> tuple[float, float]:
        """Equal-tailed interval of the mixture marginal of latent ``i``."""
        if isinstance(i, str):
            i = self.index_of(i)
        a = 0.5 * (1 - level)
        w = self.weights
        mu = self.component_means[:, i]
        sd = self.component_sds[:, i]
        return mixture_quantile(a, w, mu, sd), mixture_quantile(1 - a, w, mu, sd)


def sample_mixture(problem: SubmodelProblem, grid: GridResult, n: int, seed=None):
    """Draws from the mixture of Gaussian approximations over the grid.

    Component counts are multinomial; each used component's posterior
    precision is rebuilt at its stored mode. Returns (samples, thetas).
    """
    rng = np.random.default_rng(seed)
    w = np.array([p.weight for p in grid.points])
    counts = rng.multinomial(n, w / w.sum())
    draws, thetas = [], []
    for p, c in zip(grid.points, counts):
        if c == 0:
            continue
        mode = p.payload[0]
        Q = problem.posterior_precision(p.theta, mode)
        z = rng.standard_normal((Q.n, c))
        draws.append(mode + Q.factor.solve_lt(z).T)
        thetas.append(np.repeat(p.theta[None, :], c, axis=0))
    return np.vstack(draws), np.vstack(thetas)


def waic_from_samples(problem: SubmodelProblem, samples, thetas) -> tuple[float, float]:
    eta = samples @ problem.design_t  # (S, records)
    lpd = np.empty_like(eta)
    keys = [t.tobytes() for t in thetas]
    for key in dict.fromkeys(keys):
        rows = [i for i, k in enumerate(keys) if k == key]
        lpd[rows] = problem.pointwise_loglik(thetas[rows[0]], eta[rows])
    return compute_waic(lpd)


def fit_submodel(problem: SubmodelProblem, start=None) -> SubmodelFit:
    s = problem.settings
    t0 = time.perf_counter()
    theta0 = problem.initial_theta() if start is None else np.asarray(start, dtype=float)
    warm = {"x": None}

    def f_opt(theta):
        v, ap = problem.evaluate(theta, warm["x"])
        if ap is not None:
            warm["x"] = ap.mode
        return v

    opt = optimize_hyper(f_opt, theta0, s.opt_step_tol, s.opt_max_evals, s.fd_step, s.opt_max_step)
    if not opt.converged:
        warnings.warn(f"{problem.kind}: hyperparameter search did not converge ({opt.message})", RuntimeWarning)
    f_mode, ap_mode = problem.evaluate(opt.theta, warm["x"])
    if ap_mode is None:
        raise ConvergenceError(f"{problem.kind}: inner approximation failed at the hyperparameter mode", [])
    x_mode = ap_mode.mode
    log.info("[%s] mode %s after %d evaluations (%.1fs)", problem.kind, np.round(opt.theta, 4), opt.n_evals,
             time.perf_counter() - t0)

    def f_fixed(theta):
        return problem.evaluate(theta, x_mode)[0]

    hess = hessian_fd(f_fixed, opt.theta, f_mode, s.hessian_rel_step) if problem.dim else np.zeros((0, 0))

    def f_grid(theta, hint):
        return problem.evaluate(theta, x_mode if hint is None else hint)

    grid = explore_hyper(
        f_grid, opt.theta, hess, f_mode, ap_mode, s.grid_step, s.grid_cutoff, s.max_grid_points, s.threads,
        keep=lambda ap: (ap.mode, ap.marginal_variances()), seed=lambda ap: ap.mode,
    )
    for p in grid.points:
        p.hyper = problem.hyper(p.theta)
    log.info("[%s] grid kept %d of %d points (%.1fs)", problem.kind, len(grid.points), grid.n_evaluated,
             time.perf_counter() - t0)
    means = np.array([p.payload[0] for p in grid.points])
    sds = np.sqrt(np.array([p.payload[1] for p in grid.points]))
    w = np.array([p.weight for p in grid.points])
    mean, sd = latent_marginals(w, means, sds ** 2)
    hyper = summarize_hyper(problem.names, grid)
    samples, thetas = sample_mixture(problem, grid, s.n_samples, s.seed)
    waic, p_eff = waic_from_samples(problem, samples, thetas)
    # component modes are kept as means/sds; drop bulky payloads
    for p in grid.points:
        p.payload = None
    return SubmodelFit(
        problem.kind, problem.names, problem.labels, opt, hess, grid, hyper, mean, sd, means, sds,
        samples, thetas, waic, p_eff, len(problem.response), problem.data_key(),
    )


@dataclass
class FitResult:
    spec: HurdleModelSpec
    detection: SubmodelFit
    abundance: SubmodelFit | None
    waic: float
    metadata: dict

    def submodels(self):
        return [m for m in (self.detection, self.abundance) if m is not None]


def build_problems(spec: HurdleModelSpec, records: Sequence[HaulRecord], settings: InferenceSettings | None = None):
    """Hurdle split plus the two submodel problems sharing one field structure."""
    if not records:
        raise ValidationError("no records to fit")
    settings = settings or InferenceSettings()
    index = build_design_index(records, spec.species, spec.gears, spec.years, spec.reference_lat)
    for name, catalog, idx in (("species", spec.species, index.species), ("gear", spec.gears, index.gear)):
        counts = np.bincount(idx, minlength=len(catalog))
        for c, n in zip(catalog, counts):
            if n == 0:
                warnings.warn(f"{name} {c!r} has no records; its effect is prior-dominated", RuntimeWarning)
    A = projection_matrix(spec.mesh, index.xy) if spec.spatial else None
    structure = FieldStructure(spec.mesh) if spec.spatial else None
    X = design_matrix(spec, index, A)
    det, ab = split_hurdle(records)
    detection = SubmodelProblem(spec, "detection", X, det.z, structure, settings)
    abundance = None
    if len(ab):
        abundance = SubmodelProblem(spec, "abundance", X[ab.record_index], ab.log_value, structure, settings)
    else:
        warnings.warn("no positive records; abundance submodel skipped", RuntimeWarning)
    return index, detection, abundance


def fit(spec: HurdleModelSpec, records: Sequence[HaulRecord], settings: InferenceSettings | None = None) -> FitResult:
    """Fit detection and abundance submodels and assemble a :class:`FitResult`."""
    t0 = time.perf_counter()
    index, det_p, ab_p = build_problems(spec, records, settings)
    det = fit_submodel(det_p)
    ab = fit_submodel(ab_p) if ab_p is not None else None
    total = det.waic + (ab.waic if ab is not None else 0.0)
    meta = {
        "variant": spec.variant,
        "n_records": len(records),
        "n_positive": 0 if ab is None else ab.n_records,
        "n_latent": spec.layout().size,
        "mesh_nodes": spec.M,
        "runtime_s": time.perf_counter() - t0,
    }
    return FitResult(spec, det, ab, total, meta)


def compare_waic(fits: dict) -> list[tuple[str, float]]:
    """Rank fitted variants by total WAIC; all must share the same data."""
    keys = {name: tuple(m.data_key for m in f.submodels()) for name, f in fits.items()}
    if len(set(keys.values())) > 1:
        raise ValidationError("WAIC is only comparable between fits to the same responses")
    return sorted(((name, f.waic) for name, f in fits.items()), key=lambda t: t[1])
