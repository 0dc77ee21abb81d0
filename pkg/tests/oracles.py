"""Independent reference computations used by the tests.

Everything here is written with plain loops, enumeration or generic
optimisers so that it shares no code path with the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def expit(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def all_paths(t: int) -> list[tuple[int, ...]]:
    return list(itertools.product((0, 1), repeat=t))


def lag_chain_probabilities(path, alpha: float, beta0: float, d0: int = 0) -> list[float]:
    """``P(D_t = 1 | D_t-1)`` along ``path`` for ``expit(alpha + beta0 * D_t-1)``."""
    out, prev = [], d0
    for d in path:
        out.append(expit(alpha + beta0 * prev))
        prev = d
    return out


def path_probability(path, alpha: float, beta0: float, d0: int = 0) -> float:
    prob = 1.0
    for d, p in zip(path, lag_chain_probabilities(path, alpha, beta0, d0)):
        prob *= p if d == 1 else 1.0 - p
    return prob


def loop_weight(pi_row, d_row, k: int, num_row=None) -> float:
    """Product of (stabilized) inverse probabilities over the last ``k + 1`` periods."""
    t = len(d_row)
    w = 1.0
    for s in range(t - k - 1, t):
        p = pi_row[s]
        num = 1.0 if num_row is None else num_row[s]
        if d_row[s] == 1:
            w *= num / p
        else:
            w *= (1.0 - num if num_row is not None else 1.0) / (1.0 - p)
    return w


def fe_loglik_loop(beta: float, alphas, x, d) -> float:
    """Logit log-likelihood with one slope and unit intercepts, summed by loops."""
    total = 0.0
    for i in range(len(alphas)):
        for t in range(len(d[i])):
            eta = alphas[i] + beta * x[i][t]
            total += d[i][t] * eta - math.log1p(math.exp(eta)) if eta < 30 else d[i][t] * eta - eta
    return total


def _lattice_loglik(betas, alphas, x_i, d_i) -> np.ndarray:
    """Unit log-likelihood on a ``len(betas) x len(alphas)`` lattice."""
    eta = alphas[None, :, None] + betas[:, None, None] * x_i[None, None, :]
    return (d_i * eta - np.logaddexp(0.0, eta)).sum(axis=2)


def grid_search_fe_mle(x, d, beta_window=(-4.0, 4.0), alpha_window=(-6.0, 6.0)):
    """Lattice search over ``(beta, alpha_1..alpha_N)`` for a one-covariate FE logit.

    Stage one uses spacing 1e-2 over the given windows; each later stage
    recentres on the incumbent and shrinks the spacing a hundredfold (1e-4,
    then 1e-6). Given ``beta`` the log-likelihood is a sum of per-unit terms,
    each depending on one ``alpha_i``, so maximising every unit's column of
    the lattice separately finds the maximum of the full 4-D lattice.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    n = d.shape[0]
    b_lo, b_hi = beta_window
    a_lo, a_hi = np.full(n, alpha_window[0]), np.full(n, alpha_window[1])
    step = 1e-2
    for _ in range(3):
        betas = np.arange(b_lo, b_hi + step / 2, step)
        total = np.zeros(betas.size)
        best_alpha = np.zeros((n, betas.size))
        for i in range(n):
            alphas = np.arange(a_lo[i], a_hi[i] + step / 2, step)
            ll = _lattice_loglik(betas, alphas, x[i], d[i])
            j = ll.argmax(axis=1)
            total += ll[np.arange(betas.size), j]
            best_alpha[i] = alphas[j]
        k = int(total.argmax())
        beta, alpha = float(betas[k]), best_alpha[:, k]
        b_lo, b_hi = beta - 2 * step, beta + 2 * step
        a_lo, a_hi = alpha - 5 * step, alpha + 5 * step
        step /= 100
    return beta, list(alpha)


def central_difference(f, x, h=1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def ols_normal_equations(h, y) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return np.linalg.solve(h.T @ h, h.T @ y)


def hc2_direct(h, y, w) -> tuple[np.ndarray, np.ndarray]:
    """WLS fit and HC2 covariance assembled unit by unit."""
    h = np.asarray(h, dtype=float)
    n, j = h.shape
    xtwx = np.zeros((j, j))
    xtwy = np.zeros(j)
    for i in range(n):
        xtwx += w[i] * np.outer(h[i], h[i])
        xtwy += w[i] * h[i] * y[i]
    inv = np.linalg.inv(xtwx)
    gamma = inv @ xtwy
    meat = np.zeros((j, j))
    for i in range(n):
        lev = w[i] * h[i] @ inv @ h[i]
        e = y[i] - h[i] @ gamma
        meat += w[i] ** 2 * e ** 2 / (1.0 - lev) * np.outer(h[i], h[i])
    return gamma, inv @ meat @ inv


def hc0_direct(h, y, w) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    n, j = h.shape
    xtwx = sum(w[i] * np.outer(h[i], h[i]) for i in range(n))
    inv = np.linalg.inv(xtwx)
    gamma = inv @ sum(w[i] * h[i] * y[i] for i in range(n))
    meat = sum(w[i] ** 2 * (y[i] - h[i] @ gamma) ** 2 * np.outer(h[i], h[i]) for i in range(n))
    return inv @ meat @ inv


def nearest_rank(values, q: float) -> float:
    v = sorted(values)
    rank = max(1, math.ceil(q * len(v)))
    return v[rank - 1]
