from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from popsize.model import MultiplierRecord, NsumRecord, ObservedDataset, ParameterState, PriorConfig


def random_instance(rng: np.random.Generator, I=None, J=None, T=None, with_nsum=True):
    """Small random dataset plus an arbitrary parameter state."""
    I = I or int(rng.integers(1, 4))
    J = J or int(rng.integers(1, 3))
    T = T if T is not None else int(rng.integers(1, 3))
    T1 = T + 1
    R = rng.uniform(1e3, 1e5, size=(I, T1))
    mult = []
    for i in range(I):
        for j in range(J):
            for t in range(T1):
                if rng.random() < 0.7 or (i == 0 and j == 0 and t == 0):
                    P = rng.uniform(0.05, 0.5)
                    Y = float(rng.uniform(10, 5000))
                    G = float(rng.integers(1, 40))
                    mult.append(MultiplierRecord(i=i, j=j, t=t, Y=Y, P=P, G=G))
    nsum = []
    if with_nsum:
        for i in range(I):
            for t in range(T1):
                if rng.random() < 0.5:
                    N = rng.uniform(100, 5000)
                    nsum.append(NsumRecord(i=i, t=t, N=N, S=N * rng.uniform(0.1, 0.6)))
    data = ObservedDataset(
        city_ids=tuple(f"c{i}" for i in range(I)),
        subgroup_ids=tuple(f"g{j}" for j in range(J)),
        year_min=2000,
        year_max=2000 + T,
        reference_population=R,
        multiplier_records=tuple(mult),
        nsum_records=tuple(nsum),
    )
    state = ParameterState(
        pi=rng.uniform(0.005, 0.3, size=(I, T1)),
        mu0=rng.normal(-2, 1),
        theta=rng.normal(0, 0.5),
        delta=rng.normal(0, 0.5, size=I),
        gamma=rng.normal(0, 0.5, size=J),
        phi=rng.normal(0, 0.3, size=T),
        sigma2_pi=rng.uniform(0.1, 1.5),
        sigma2_phi=rng.uniform(0.1, 1.5),
        sigma2_gamma=rng.uniform(0.1, 1.5),
        sigma2_delta=rng.uniform(0.1, 1.5),
        sigma2_eps=rng.uniform(0.5, 3.0),
        sigma2_0=rng.uniform(0.1, 1.5),
    )
    return data, state


def normal_moments_by_quadrature(logf, center, scale, n=401, width=12.0):
    """Mean and variance of the density proportional to exp(logf) on a uniform
    grid of +-width*scale around center (trapezoid rule)."""
    x = center + scale * np.linspace(-width, width, n)
    lp = np.array([logf(v) for v in x])
    w = np.exp(lp - lp.max())
    z = np.trapezoid(w, x)
    m = np.trapezoid(w * x, x) / z
    v = np.trapezoid(w * (x - m) ** 2, x) / z
    return m, v


def precision_moments_by_quadrature(logf, shape, scale, n=801):
    """E and Var of w = 1/s2 where s2 has density proportional to exp(logf(s2)).

    Integrates over u = log w; the grid spans the analytic gamma quantiles
    1e-13 .. 1 - 1e-13 only to place the nodes.
    """
    lo = stats.gamma.ppf(1e-13, shape, scale=1.0 / scale)
    hi = stats.gamma.isf(1e-13, shape, scale=1.0 / scale)
    u = np.linspace(math.log(lo), math.log(hi), n)
    w_ = np.exp(u)
    # density of s2 = 1/w expressed in u: p(s2) |ds2/du| = p(1/w) / w
    lp = np.array([logf(1.0 / w) for w in w_]) - u
    f = np.exp(lp - lp.max())
    z = np.trapezoid(f, u)
    e = np.trapezoid(f * w_, u) / z
    var = np.trapezoid(f * (w_ - e) ** 2, u) / z
    return e, var


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def priors():
    return PriorConfig()
