"""Probabilistic-repetition combinatorics and secret-key-rate assembly.

Z_n(p) is the expected number of time steps until 2^n independent
Bernoulli(p) processes have each succeeded at least once (the expected
maximum of 2^n geometric variables). The repeater rate divides out one
Z factor per probabilistic stage; the rate is per repeater clock cycle,
with no physical clock assigned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StageProbabilities:
    """Success probabilities of the repeater's probabilistic stages.

    ``p_ps`` is ordered first swapping round first: entry 0 is the base
    round with 2^(n-1) simultaneous swaps, the last entry is the final swap.
    """

    p_nla: float
    p_ps: tuple[float, ...]

    def __post_init__(self):
        probs = (self.p_nla, *self.p_ps)
        for p in probs:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"stage probabilities must be in (0, 1], got {p}")


def z_steps(n: int, p: float) -> float:
    """Expected steps for 2^n parallel trials of success probability p.

        Z_n(p) = sum_{j=1}^{2^n} C(2^n, j) (-1)^(j+1) / (1 - (1-p)^j)

    The alternating sum is evaluated with exact compensated summation
    (math.fsum) and 1 - (1-p)^j via expm1 to keep small-p terms accurate.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if p == 1.0:
        return 1.0
    m = 2 ** n
    log_q = math.log1p(-p)
    terms = []
    for j in range(1, m + 1):
        denom = -math.expm1(j * log_q)  # 1 - (1-p)^j, accurate for small p
        terms.append(math.comb(m, j) * (-1.0) ** (j + 1) / denom)
    return math.fsum(terms)


def z_steps_series(n: int, p: float, *, tail: float = 1e-12) -> float:
    """Equivalent expectation form sum_{t>=0} (1 - (1 - q^t)^(2^n)), q = 1-p.

    Serves as an independent reformulation of ``z_steps`` (cross-checked in
    tests); truncated once the summand drops below ``tail``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if p == 1.0:
        return 1.0
    m = 2 ** n
    q = 1.0 - p
    total = 1.0  # t = 0 term: the maximum is always >= 1
    t = 1
    block = 4096
    while True:
        ts = np.arange(t, t + block, dtype=float)
        qs = q ** ts
        summand = -np.expm1(m * np.log1p(-qs))
        total += float(np.sum(summand))
        if summand[-1] < tail:
            break
        t += block
        if t > 10 ** 9:
            raise RuntimeError("series did not converge")
    return total


def simulate_z_steps(n: int, p: float, trials: int, rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of Z_n(p): mean of the max of 2^n geometrics."""
    m = 2 ** n
    draws = rng.geometric(p, size=(trials, m))
    return float(draws.max(axis=1).mean())


def repeater_rate(sp: StageProbabilities, n: int) -> float:
    """Rate of successful operation of the whole repeater with 2^n links.

    One Z_n factor for the 2^n scissors, then one Z_i factor per swapping
    round: the first round (2^(n-1) swaps) contributes Z_{n-1}, the final
    single swap contributes Z_0.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if len(sp.p_ps) != n:
        raise ValueError(f"expected {n} post-selection probabilities, got {len(sp.p_ps)}")
    rate = 1.0 / z_steps(n, sp.p_nla)
    for k, p in enumerate(sp.p_ps):
        rate /= z_steps(n - 1 - k, p)
    return rate


def secret_key_rate(K: float, r_rep: float) -> float:
    """Secret key rate per channel use: raw key times repeater rate."""
    if K < 0:
        raise ValueError("raw key must be >= 0")
    if not 0.0 < r_rep <= 1.0:
        raise ValueError(f"repeater rate must be in (0, 1], got {r_rep}")
    return K * r_rep
