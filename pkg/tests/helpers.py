"""Shared builders for tests that need random small models."""

import numpy as np


def random_model(d, seed, dummy=None):
    """Smooth nonlinear function of ``d`` inputs with pairwise interactions.

    Column ``dummy`` (if given) is ignored by construction.
    """
    r = np.random.default_rng(seed)
    W = r.normal(size=(d, 6))
    b = r.normal(size=6)
    v = r.normal(size=6)
    A = np.triu(r.normal(size=(d, d)) * 0.5, 1)
    if dummy is not None:
        W[dummy] = 0
        A[dummy, :] = 0
        A[:, dummy] = 0

    def f(X):
        X = np.atleast_2d(X)
        return np.tanh(X @ W + b) @ v + np.einsum("ni,ij,nj->n", X, A, X)

    return f


def random_problem(seed, d_min=2, d_max=10, n_bg=20):
    r = np.random.default_rng([seed, 99])
    d = int(r.integers(d_min, d_max + 1))
    dummy = int(r.integers(d))
    return random_model(d, seed, dummy), r.normal(size=d), r.normal(size=(n_bg, d)), dummy


# criterion number -> PASS/FAIL line, printed in the terminal summary
ACCEPTANCE = {}
