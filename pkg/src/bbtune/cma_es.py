"""Covariance Matrix Adaptation Evolution Strategy with an ask/tell interface.

Plain (mu/mu_w, lambda) CMA-ES with cumulative step-size adaptation,
rank-one and rank-mu covariance updates. No active update, no bound
handling, no restarts.
"""
from __future__ import annotations

import copy
import math

import numpy as np


def default_popsize(dim: int) -> int:
    """Population size 4 + 3 ln(d), floored."""
    return int(math.floor(4 + 3 * math.log(dim)))


class CmaState:
    """One CMA-ES optimizer instance.

    The state is mutated in place by :meth:`tell`; use :meth:`clone` to fork it.
    Candidates returned by :meth:`ask` are rows of a ``(popsize, dim)`` array.
    """

    def __init__(self, dim, sigma, popsize=None, seed=0, mean=None):
        if int(dim) != dim or dim < 1:
            raise ValueError(f"dim must be a positive integer, got {dim!r}")
        if not sigma > 0 or not math.isfinite(sigma):
            raise ValueError(f"sigma must be positive, got {sigma!r}")
        if popsize is None:
            popsize = default_popsize(dim)
        if popsize < 2:
            raise ValueError(f"popsize must be >= 2, got {popsize!r}")
        n = self.dim = int(dim)
        self.popsize = lam = int(popsize)
        self.sigma = float(sigma)
        self.mean = np.zeros(n) if mean is None else np.array(mean, dtype=float)
        if self.mean.shape != (n,):
            raise ValueError(f"mean must have shape ({n},), got {self.mean.shape}")

        self.mu = mu = lam // 2
        w = math.log(lam / 2 + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mueff = mueff = 1.0 / float(np.sum(self.weights**2))

        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.cs = (mueff + 2) / (n + mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff)
        self.cmu = min(1 - self.c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))

        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.generation = 0
        self.evaluations = 0
        self.best_x = self.mean.copy()
        self.best_loss = math.inf
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def clone(self) -> "CmaState":
        return copy.deepcopy(self)

    def ask(self) -> np.ndarray:
        """Draw ``popsize`` candidates from N(mean, sigma^2 C)."""
        z = self.rng.standard_normal((self.popsize, self.dim))
        y = (z * self.D) @ self.B.T
        return self.mean + self.sigma * y

    def tell(self, candidates, losses) -> "CmaState":
        """Update the search distribution from evaluated candidates.

        Only the ranking of ``losses`` is used. Ties keep candidate order.
        """
        x = np.asarray(candidates, dtype=float)
        f = np.asarray(losses, dtype=float)
        if x.shape != (self.popsize, self.dim):
            raise ValueError(
                f"expected candidates of shape {(self.popsize, self.dim)}, got {x.shape}"
            )
        if f.shape != (self.popsize,):
            raise ValueError(f"expected {self.popsize} losses, got shape {f.shape}")
        bad = np.flatnonzero(~np.isfinite(f))
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"non-finite loss {f[i]!r} for candidate {i}")

        n = self.dim
        order = np.argsort(f, kind="stable")
        self.evaluations += self.popsize
        if f[order[0]] < self.best_loss:
            self.best_loss = float(f[order[0]])
            self.best_x = x[order[0]].copy()

        old_mean = self.mean
        y = (x[order[: self.mu]] - old_mean) / self.sigma
        y_w = self.weights @ y
        self.mean = old_mean + self.sigma * y_w

        inv_sqrt_c_yw = self.B @ ((self.B.T @ y_w) / self.D)
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * inv_sqrt_c_yw
        ps_norm = float(np.linalg.norm(self.ps))
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * (self.generation + 1))) / self.chi_n < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y_w

        rank_one = np.outer(self.pc, self.pc)
        if not hsig:
            rank_one += self.cc * (2 - self.cc) * self.C
        rank_mu = (y.T * self.weights) @ y
        self.C = (1 - self.c1 - self.cmu) * self.C + self.c1 * rank_one + self.cmu * rank_mu

        self.sigma *= math.exp((self.cs / self.damps) * (ps_norm / self.chi_n - 1))
        self.generation += 1
        self._update_eigensystem()
        return self

    def _update_eigensystem(self) -> None:
        self.C = (self.C + self.C.T) / 2
        eigvals, self.B = np.linalg.eigh(self.C)
        # guard against round-off driving the smallest eigenvalue to <= 0
        floor = 1e-20 * max(float(eigvals[-1]), 1e-300)
        if eigvals[0] <= floor:
            eigvals = np.maximum(eigvals, floor)
            self.C = (self.B * eigvals) @ self.B.T
        self.D = np.sqrt(eigvals)

    def condition_number(self) -> float:
        return float((self.D.max() / self.D.min()) ** 2)


def cma_init(d, sigma_z, popsize=None, seed=0, mean=None) -> CmaState:
    return CmaState(d, sigma_z, popsize=popsize, seed=seed, mean=mean)


def cma_ask(state: CmaState) -> np.ndarray:
    return state.ask()


def cma_tell(state: CmaState, candidates, losses) -> CmaState:
    return state.tell(candidates, losses)


def fmin(func, dim, sigma, budget, popsize=None, seed=0, mean=None, ftarget=-math.inf):
    """Minimize ``func`` for at most ``budget`` evaluations; return the final state."""
    es = CmaState(dim, sigma, popsize=popsize, seed=seed, mean=mean)
    while es.evaluations + es.popsize <= budget and es.best_loss > ftarget:
        xs = es.ask()
        es.tell(xs, [func(x) for x in xs])
        if es.sigma * es.D.max() < 1e-30:
            break
    return es
