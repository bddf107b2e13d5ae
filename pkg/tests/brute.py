"""Independent reference computations for the tabular oracle tests.

Nothing here imports the package's solver: transitions are rebuilt from the
model description and policies are evaluated by exact linear solves.
"""

import itertools

import numpy as np


def model(max_queue, beta, r0=0, r1=1, mu_r=0.0, mu_l=0.0):
    n = max_queue + 1
    P = np.zeros((2, n, n))
    R = np.zeros((2, n))
    for a, amount in enumerate((r0, r1)):
        for s in range(n):
            served = min(s, amount)
            R[a, s] = (1 + mu_r) * served - (mu_l if a == 0 else 0.0)
            P[a, s, min(s - served, max_queue)] += 1 - beta
            P[a, s, min(s - served + 1, max_queue)] += beta
    return P, R


def evaluate(P, R, gamma, lam, policies):
    """Exact values of a batch of deterministic policies, shape (k, n)."""
    policies = np.asarray(policies)
    k, n = policies.shape
    rows = np.arange(n)
    Ppi = P[policies, rows[None, :], :]  # (k, n, n)
    Rpi = R[policies, rows[None, :]] - lam * policies
    A = np.eye(n)[None] - gamma * Ppi
    return np.linalg.solve(A, Rpi[..., None])[..., 0]


def best_policy(P, R, gamma, lam, chunk=1 << 15, atol=1e-9):
    """Canonical optimal policy by exhaustive enumeration.

    Any optimal action per state can be combined into an optimal policy, so
    the canonical one takes the low action wherever some optimal policy does.
    """
    n = R.shape[1]
    best_v = None
    optimal = []
    total = 1 << n
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total))
        pols = ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(np.int64)
        v = evaluate(P, R, gamma, lam, pols)
        tot = v.sum(axis=1)
        i = int(np.argmax(tot))
        if best_v is None or tot[i] > best_v.sum() + atol:
            best_v = v[i].copy()
            optimal = []
        ok = np.all(v >= best_v[None, :] - atol, axis=1)
        optimal.extend(pols[ok])
    optimal = [p for p in optimal if np.all(evaluate(P, R, gamma, lam, [p])[0] >= best_v - atol)]
    return np.min(np.array(optimal), axis=0), best_v


def flip_scan(P, R, gamma, state, lams):
    """Smallest cost on a grid at which the low action becomes optimal."""
    n = R.shape[1]
    for lam in lams:
        # threshold policies suffice when the arm is indexable; enumerate all
        # of them instead of trusting value iteration
        pols = np.array([[1 if s >= k else 0 for s in range(n)] for k in range(n + 1)])
        v = evaluate(P, R, gamma, lam, pols).sum(axis=1)
        best = pols[int(np.argmax(v))]
        if best[state] == 0:
            return lam
    return None


def all_policies(n):
    return np.array(list(itertools.product((0, 1), repeat=n)))
