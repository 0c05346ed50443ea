"""Compiled inner loops of the Metropolis-within-Gibbs sampler.

State is packed as ``x`` (logit prevalences, I x (T+1)), ``delta`` (I),
``gamma`` (J), ``phi`` (T) and ``scal`` (8 scalars, see the index constants).
Priors are packed by :meth:`PriorConfig.as_array`. The conditional helpers
are shared with the per-update Python API in :mod:`popsize.sampler`.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

MU0, THETA, S2_PI, S2_PHI, S2_GAMMA, S2_DELTA, S2_EPS, S2_0 = range(8)
N_SCALARS = 8

# offsets into the packed prior array
P_THETA_VAR, P_MU0_VAR = 0, 1
P_PI, P_PHI, P_GAMMA, P_DELTA, P_EPS, P_0 = 2, 4, 6, 8, 10, 12


@njit(cache=True)
def log_inv_logit(x):
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True)
def log_sizes(x, log_R):
    I, T1 = x.shape
    out = np.empty((I, T1))
    for i in range(I):
        for t in range(T1):
            out[i, t] = log_inv_logit(x[i, t]) + log_R[i, t]
    return out


@njit(cache=True)
def cell_multiplier_stats(I, T1, mult_i, mult_j, mult_t, M, G, theta, delta, gamma):
    """Per-cell sum of G and of G * (M - theta - delta_i - gamma_j)."""
    sg = np.zeros((I, T1))
    sgc = np.zeros((I, T1))
    for k in range(M.shape[0]):
        i, t = mult_i[k], mult_t[k]
        sg[i, t] += G[k]
        sgc[i, t] += G[k] * (M[k] - theta - delta[i] - gamma[mult_j[k]])
    return sg, sgc


@njit(cache=True)
def cell_nsum_stats(I, T1, nsum_i, nsum_t, log_N, nsum_prec, theta):
    """Per-cell NSUM precision and the log-size it points at (log N + theta)."""
    prec = np.zeros((I, T1))
    target = np.zeros((I, T1))
    for k in range(log_N.shape[0]):
        prec[nsum_i[k], nsum_t[k]] = nsum_prec[k]
        target[nsum_i[k], nsum_t[k]] = log_N[k] + theta
    return prec, target


@njit(cache=True)
def pi_local_logtarget(xv, x, i, t, mu0, phi, s2_pi, s2_0, s2_eps, log_R_it, sg, sgc, ns_prec, ns_target):
    """Log of every factor containing logit(pi_it) = xv, up to a constant."""
    T = x.shape[1] - 1
    if t == 0:
        r = xv - mu0
        lp = -0.5 * r * r / s2_0
    else:
        r = xv - x[i, t - 1] - phi[t - 1]
        lp = -0.5 * r * r / s2_pi
    if t < T:
        r = x[i, t + 1] - xv - phi[t]
        lp -= 0.5 * r * r / s2_pi
    a = log_inv_logit(xv) + log_R_it
    lp -= (sg * a * a - 2.0 * a * sgc) / (2.0 * s2_eps)
    if ns_prec > 0.0:
        d = a - ns_target
        lp -= 0.5 * ns_prec * d * d
    return lp


@njit(cache=True)
def mh_step(x, i, t, mu0, phi, s2_pi, s2_0, s2_eps, log_R_it, sg, sgc, ns_prec, ns_target, sd, rng):
    """Random-walk update of log(pi_it); mutates ``x`` on acceptance.

    The target is the density of logit(pi_it); a symmetric step on log(pi)
    then carries the Hastings factor (1 - pi) / (1 - pi').
    """
    xv = x[i, t]
    u = log_inv_logit(xv)
    up = u + sd * rng.standard_normal()
    if up >= 0.0:
        return False
    xp = up - math.log(-math.expm1(up))
    log_alpha = (
        pi_local_logtarget(xp, x, i, t, mu0, phi, s2_pi, s2_0, s2_eps, log_R_it, sg, sgc, ns_prec, ns_target)
        - pi_local_logtarget(xv, x, i, t, mu0, phi, s2_pi, s2_0, s2_eps, log_R_it, sg, sgc, ns_prec, ns_target)
        + math.log(-math.expm1(u))
        - math.log(-math.expm1(up))
    )
    if math.log(rng.random()) < log_alpha:
        x[i, t] = xp
        return True
    return False


@njit(cache=True)
def mu0_conditional(x0, s2_0, mu0_var):
    prec = 1.0 / mu0_var + x0.shape[0] / s2_0
    return x0.sum() / s2_0 / prec, 1.0 / prec


@njit(cache=True)
def theta_conditional(log_n, mult_i, mult_j, mult_t, M, G, nsum_i, nsum_t, log_N, nsum_prec, delta, gamma, s2_eps, theta_var):
    prec = 1.0 / theta_var
    num = 0.0
    for k in range(log_N.shape[0]):
        # log N = log n - theta + e
        prec += nsum_prec[k]
        num -= nsum_prec[k] * (log_N[k] - log_n[nsum_i[k], nsum_t[k]])
    for k in range(M.shape[0]):
        i = mult_i[k]
        w = G[k] / s2_eps
        prec += w
        num += w * (M[k] - log_n[i, mult_t[k]] - delta[i] - gamma[mult_j[k]])
    return num / prec, 1.0 / prec


@njit(cache=True)
def delta_conditional(log_n, mult_i, mult_j, mult_t, M, G, theta, gamma, s2_eps, s2_delta, I):
    prec = np.full(I, 1.0 / s2_delta)
    num = np.zeros(I)
    for k in range(M.shape[0]):
        i = mult_i[k]
        w = G[k] / s2_eps
        prec[i] += w
        num[i] += w * (M[k] - log_n[i, mult_t[k]] - theta - gamma[mult_j[k]])
    return num / prec, 1.0 / prec


@njit(cache=True)
def gamma_conditional(log_n, mult_i, mult_j, mult_t, M, G, theta, delta, s2_eps, s2_gamma, J):
    prec = np.full(J, 1.0 / s2_gamma)
    num = np.zeros(J)
    for k in range(M.shape[0]):
        i, j = mult_i[k], mult_j[k]
        w = G[k] / s2_eps
        prec[j] += w
        num[j] += w * (M[k] - log_n[i, mult_t[k]] - theta - delta[i])
    return num / prec, 1.0 / prec


@njit(cache=True)
def phi_conditional(x, s2_pi, s2_phi):
    I, T1 = x.shape
    prec = 1.0 / s2_phi + I / s2_pi
    mean = np.zeros(T1 - 1)
    for t in range(1, T1):
        s = 0.0
        for i in range(I):
            s += x[i, t] - x[i, t - 1]
        mean[t - 1] = s / s2_pi / prec
    return mean, np.full(T1 - 1, 1.0 / prec)


@njit(cache=True)
def sigma2_pi_conditional(x, phi, shape0, scale0):
    I, T1 = x.shape
    ss = 0.0
    for i in range(I):
        for t in range(1, T1):
            r = x[i, t] - x[i, t - 1] - phi[t - 1]
            ss += r * r
    return shape0 + 0.5 * I * (T1 - 1), scale0 + 0.5 * ss


@njit(cache=True)
def zero_mean_sigma2_conditional(v, shape0, scale0):
    """Inverse-gamma update for the variance of zero-mean normal effects ``v``."""
    ss = 0.0
    for k in range(v.shape[0]):
        ss += v[k] * v[k]
    return shape0 + 0.5 * v.shape[0], scale0 + 0.5 * ss


@njit(cache=True)
def sigma2_eps_conditional(log_n, mult_i, mult_j, mult_t, M, G, theta, delta, gamma, shape0, scale0):
    ss = 0.0
    for k in range(M.shape[0]):
        i = mult_i[k]
        r = M[k] - log_n[i, mult_t[k]] - theta - delta[i] - gamma[mult_j[k]]
        ss += G[k] * r * r
    # one (sigma2_eps / G)^(-1/2) factor per record
    return shape0 + 0.5 * M.shape[0], scale0 + 0.5 * ss


@njit(cache=True)
def sigma2_0_conditional(x0, mu0, shape0, scale0):
    ss = 0.0
    for i in range(x0.shape[0]):
        r = x0[i] - mu0
        ss += r * r
    return shape0 + 0.5 * x0.shape[0], scale0 + 0.5 * ss


@njit(cache=True)
def draw_invgamma(shape, scale, rng):
    return scale / rng.gamma(shape, 1.0)


@njit(cache=True)
def sweep_kernel(
    log_R, mult_i, mult_j, mult_t, M, G, nsum_i, nsum_t, log_N, nsum_prec, J,
    x, delta, gamma, phi, scal, priors, sd, rng, accepts,
):
    """One full scan: pi block (t outer, i inner), mu0, theta, delta, gamma, phi,
    then the six variances. Mutates the state arrays in place."""
    I, T1 = x.shape
    theta = scal[THETA]
    sg, sgc = cell_multiplier_stats(I, T1, mult_i, mult_j, mult_t, M, G, theta, delta, gamma)
    ns_prec, ns_target = cell_nsum_stats(I, T1, nsum_i, nsum_t, log_N, nsum_prec, theta)
    for t in range(T1):
        for i in range(I):
            if mh_step(
                x, i, t, scal[MU0], phi, scal[S2_PI], scal[S2_0], scal[S2_EPS], log_R[i, t],
                sg[i, t], sgc[i, t], ns_prec[i, t], ns_target[i, t], sd, rng,
            ):
                accepts[i, t] += 1

    m, v = mu0_conditional(x[:, 0], scal[S2_0], priors[P_MU0_VAR])
    scal[MU0] = m + math.sqrt(v) * rng.standard_normal()

    log_n = log_sizes(x, log_R)
    m, v = theta_conditional(
        log_n, mult_i, mult_j, mult_t, M, G, nsum_i, nsum_t, log_N, nsum_prec, delta, gamma, scal[S2_EPS], priors[P_THETA_VAR]
    )
    scal[THETA] = m + math.sqrt(v) * rng.standard_normal()

    mv, vv = delta_conditional(log_n, mult_i, mult_j, mult_t, M, G, scal[THETA], gamma, scal[S2_EPS], scal[S2_DELTA], I)
    for i in range(I):
        delta[i] = mv[i] + math.sqrt(vv[i]) * rng.standard_normal()
    mv, vv = gamma_conditional(log_n, mult_i, mult_j, mult_t, M, G, scal[THETA], delta, scal[S2_EPS], scal[S2_GAMMA], J)
    for j in range(J):
        gamma[j] = mv[j] + math.sqrt(vv[j]) * rng.standard_normal()
    mv, vv = phi_conditional(x, scal[S2_PI], scal[S2_PHI])
    for t in range(T1 - 1):
        phi[t] = mv[t] + math.sqrt(vv[t]) * rng.standard_normal()

    a, b = sigma2_pi_conditional(x, phi, priors[P_PI], priors[P_PI + 1])
    scal[S2_PI] = draw_invgamma(a, b, rng)
    a, b = zero_mean_sigma2_conditional(phi, priors[P_PHI], priors[P_PHI + 1])
    scal[S2_PHI] = draw_invgamma(a, b, rng)
    a, b = zero_mean_sigma2_conditional(gamma, priors[P_GAMMA], priors[P_GAMMA + 1])
    scal[S2_GAMMA] = draw_invgamma(a, b, rng)
    a, b = zero_mean_sigma2_conditional(delta, priors[P_DELTA], priors[P_DELTA + 1])
    scal[S2_DELTA] = draw_invgamma(a, b, rng)
    a, b = sigma2_eps_conditional(
        log_n, mult_i, mult_j, mult_t, M, G, scal[THETA], delta, gamma, priors[P_EPS], priors[P_EPS + 1]
    )
    scal[S2_EPS] = draw_invgamma(a, b, rng)
    a, b = sigma2_0_conditional(x[:, 0], scal[MU0], priors[P_0], priors[P_0 + 1])
    scal[S2_0] = draw_invgamma(a, b, rng)


@njit(cache=True)
def chain_kernel(
    log_R, mult_i, mult_j, mult_t, M, G, nsum_i, nsum_t, log_N, nsum_prec, J,
    x, delta, gamma, phi, scal, priors, sd, n_iter, burn_in, thin, rng,
    out_x, out_delta, out_gamma, out_phi, out_scal, accepts,
):
    scratch = np.zeros(x.shape, dtype=np.int64)
    k = 0
    for it in range(n_iter):
        post = it >= burn_in
        sweep_kernel(
            log_R, mult_i, mult_j, mult_t, M, G, nsum_i, nsum_t, log_N, nsum_prec, J,
            x, delta, gamma, phi, scal, priors, sd, rng, accepts if post else scratch,
        )
        if post and (it - burn_in + 1) % thin == 0:
            out_x[k] = x
            out_delta[k] = delta
            out_gamma[k] = gamma
            out_phi[k] = phi
            out_scal[k] = scal
            k += 1
    return k


@njit(cache=True)
def mh_repeat_kernel(x, i, t, mu0, phi, s2_pi, s2_0, s2_eps, log_R_it, sg, sgc, ns_prec, ns_target, sd, n, rng):
    out = np.empty(n)
    acc = 0
    for k in range(n):
        if mh_step(x, i, t, mu0, phi, s2_pi, s2_0, s2_eps, log_R_it, sg, sgc, ns_prec, ns_target, sd, rng):
            acc += 1
        out[k] = x[i, t]
    return out, acc
