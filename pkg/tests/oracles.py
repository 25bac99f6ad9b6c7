"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np
from scipy.special import log_expit

from surveyfusion.data_io import DesignIndex
from surveyfusion.inference import SubmodelProblem
from surveyfusion.model import HurdleModelSpec, HyperParams, design_matrix, log_prior_hyper


def bernoulli_toy():
    counts = np.array([60, 60, 60])
    hits = np.array([12, 33, 49])
    n = counts.sum()
    gear = np.repeat(np.arange(3), counts)
    z = np.concatenate([np.r_[np.ones(h), np.zeros(c - h)] for h, c in zip(hits, counts)])
    spec = HurdleModelSpec(("S0",), ("G0", "G1", "G2"), (2000,), "none")
    idx = DesignIndex(np.zeros(n, int), gear, np.zeros(n, int), np.zeros(n), np.zeros(n),
                      ("S0",), spec.gears, spec.years)
    return spec, counts, hits, SubmodelProblem(spec, "detection", design_matrix(spec, idx), z)


def quadrature_log_marginal(counts, hits, sigma, beta_var=1000.0):
    """log p(y | sigma) by nested trapezoid quadrature over beta and each gear effect.

    Small sigma integrates over the gear effect directly; large sigma over
    the predictor, where the likelihood is the narrow factor.
    """
    b = np.linspace(-1, 1, 801) * (6 + 10 * sigma)
    if sigma < 1:
        f = np.linspace(-10, 10, 801)[None, :] * sigma
        eta = b[:, None] + f
    else:
        eta = np.linspace(-12, 12, 1201)[None, :]
        f = eta - b[:, None]
    d = np.ptp(f[0]) / (f.shape[1] - 1)
    logf = -0.5 * (f / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi))
    inner = np.zeros(len(b))
    for c, h in zip(counts, hits):
        ll = h * log_expit(eta) + (c - h) * log_expit(-eta) + logf
        mx = ll.max(axis=1, keepdims=True)
        inner += mx[:, 0] + np.log(np.trapezoid(np.exp(ll - mx), dx=d, axis=1))
    inner += -0.5 * b ** 2 / beta_var - 0.5 * math.log(2 * math.pi * beta_var)
    mx = inner.max()
    return mx + math.log(np.trapezoid(np.exp(inner - mx), b))


def bernoulli_toy_truth(counts, hits):
    """Posterior mean of sigma_f by quadrature over log sigma_f."""
    grid = np.linspace(-6, 5, 111)
    lp = np.array([quadrature_log_marginal(counts, hits, math.exp(t))
                   + log_prior_hyper(HyperParams(sigma_f=math.exp(t)), names=("sigma_f",)) for t in grid])
    w = np.exp(lp - lp.max())
    return np.trapezoid(w * np.exp(grid), grid) / np.trapezoid(w, grid)


def literal_hurdle(values, eta1, eta2, sigma):
    # record-by-record log of p * density(log y) * I(y>0) + (1 - p) * I(y=0)
    total = 0.0
    for y, e1, e2 in zip(values, eta1, eta2):
        p = 1.0 / (1.0 + math.exp(-e1))
        if y > 0:
            dens = math.exp(-0.5 * ((math.log(y) - e2) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
            total += math.log(p * dens)
        else:
            total += math.log(1.0 - p)
    return total
