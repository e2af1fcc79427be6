"""Sliding-window replay buffer and pattern-frequency-based replay sampling."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .core import Pattern, SnapshotSequence

DEFAULT_LAMBDA = {
    Pattern.SRO: 2.0,
    Pattern.SO: 1.5,
    Pattern.SR: 1.3,
    Pattern.RO: 1.3,
    Pattern.S: 1.0,
    Pattern.O: 1.0,
    Pattern.R: 0.0,
}

STRATEGIES = ("uniform", "freq", "inv_freq")
INV_FREQ_EPS = 1e-9


class ReplayBuffer:
    """B^t: the union of D^i for i in [max(1, t - window), t - 1].

    Holds (s, r, o, t') quadruples of one split (train by default) keyed by
    their step, so advancing evicts and admits whole steps.
    """

    def __init__(self, seq: SnapshotSequence, window: int, split: str = "train"):
        if window < 1:
            raise ValueError("replay window must be >= 1")
        self.seq = seq
        self.window = window
        self.split = split
        self.t: int | None = None
        self._steps: dict[int, np.ndarray] = {}

    def span(self, t: int) -> range:
        return range(max(1, t - self.window), t)

    def advance(self, t: int) -> "ReplayBuffer":
        """Move the window so the buffer serves step t."""
        wanted = set(self.span(t))
        for old in [k for k in self._steps if k not in wanted]:
            del self._steps[old]
        for i in sorted(wanted - set(self._steps)):
            self._steps[i] = self.seq.quadruples(self.split, [i])
        self.t = t
        return self

    @classmethod
    def build(cls, seq: SnapshotSequence, t: int, window: int, split: str = "train") -> "ReplayBuffer":
        return cls(seq, window, split).advance(t)

    def quadruples(self) -> np.ndarray:
        parts = [self._steps[k] for k in sorted(self._steps)]
        if not parts:
            return np.zeros((0, 4), dtype=np.int64)
        return np.concatenate(parts)

    def triples(self) -> set[tuple[int, int, int]]:
        q = self.quadruples()
        return set(map(tuple, q[:, :3].tolist()))

    def steps(self) -> list[int]:
        return sorted(self._steps)

    def __len__(self) -> int:
        return sum(len(v) for v in self._steps.values())


@dataclass
class PatternFrequencyIndex:
    """Exact HPF (over the buffer) and CPF (over the current step) counters."""

    historical: dict[Pattern, Counter]
    current: dict[Pattern, Counter]
    weights: dict[Pattern, float] = field(default_factory=lambda: dict(DEFAULT_LAMBDA))
    sigma: float = 10.0
    gamma: float = 0.5

    @classmethod
    def build(
        cls,
        buffer_quads: np.ndarray,
        current_triples: Iterable,
        *,
        weights: Mapping[Pattern, float] | None = None,
        sigma: float = 10.0,
        gamma: float = 0.5,
    ) -> "PatternFrequencyIndex":
        buf = [tuple(q[:3]) for q in np.asarray(buffer_quads).reshape(-1, 4).tolist()]
        cur = [tuple(x[:3]) for x in current_triples]
        hist = {p: Counter(p.key(tr) for tr in buf) for p in Pattern}
        now = {p: Counter(p.key(tr) for tr in cur) for p in Pattern}
        w = dict(DEFAULT_LAMBDA)
        if weights:
            w.update(weights)
        return cls(hist, now, w, sigma, gamma)

    def pattern_counts(self, triple) -> dict[Pattern, tuple[int, int]]:
        return {p: (self.historical[p][p.key(triple)], self.current[p][p.key(triple)]) for p in Pattern}

    def frequency_score(self, triple, tau: int) -> float:
        return frequency_score(self.pattern_counts(triple), tau, self.weights, self.gamma)


def frequency_score(
    counts: Mapping[Pattern, tuple[int, int]],
    tau: int,
    weights: Mapping[Pattern, float] = DEFAULT_LAMBDA,
    gamma: float = 0.5,
) -> float:
    """fp = sum_p lambda_p [ln(h_p + 1) + gamma * tau * ln(c_p + 1)]."""
    return sum(weights[p] * (math.log(h + 1) + gamma * tau * math.log(c + 1)) for p, (h, c) in counts.items())


def time_decay(t_prime, t: int, sigma: float):
    """tp(t') = exp((t' - t) / sigma)."""
    return np.exp((np.asarray(t_prime, dtype=float) - t) / sigma)


def sampling_weights(
    quads: np.ndarray,
    index: PatternFrequencyIndex,
    t: int,
    tau: int,
    strategy: str,
) -> np.ndarray:
    """Unnormalized rates psi for each buffer quadruple."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown replay strategy {strategy!r}")
    quads = np.asarray(quads).reshape(-1, 4)
    if strategy == "uniform":
        return np.ones(len(quads))
    fp_cache: dict = {}
    fp = np.empty(len(quads))
    for i, (s, r, o, _) in enumerate(quads.tolist()):
        key = (s, r, o)
        if key not in fp_cache:
            fp_cache[key] = index.frequency_score(key, tau)
        fp[i] = fp_cache[key]
    tp = time_decay(quads[:, 3], t, index.sigma)
    if strategy == "freq":
        return tp * fp
    return tp / (fp + INV_FREQ_EPS)


def sampling_probabilities(quads, index, t, tau, strategy) -> np.ndarray:
    psi = sampling_weights(quads, index, t, tau, strategy)
    total = psi.sum()
    if len(psi) and total <= 0:
        # every fp is zero under the freq strategy; fall back to uniform
        return np.full(len(psi), 1.0 / len(psi))
    return psi / total


def sample_replay(
    buffer_quads: np.ndarray,
    index: PatternFrequencyIndex,
    t: int,
    tau: int,
    strategy: str,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """P^t: n draws without replacement from the normalized psi distribution
    (sequential weighted draws with renormalization). Returns buffer order of
    the chosen rows as an (m, 4) array, m = min(n, |B^t|)."""
    quads = np.asarray(buffer_quads, dtype=np.int64).reshape(-1, 4)
    if n <= 0 or len(quads) == 0:
        return np.zeros((0, 4), dtype=np.int64)
    p = sampling_probabilities(quads, index, t, tau, strategy)
    if n >= len(quads):
        return quads.copy()
    chosen = weighted_sample_without_replacement(p, n, rng)
    return quads[chosen]


def weighted_sample_without_replacement(p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of n sequential draws, each proportional to p among the items
    not drawn yet. Uses exponential-race keys (-ln U / p), which realize the
    same distribution in one pass."""
    p = np.asarray(p, dtype=float)
    u = rng.random(len(p))
    with np.errstate(divide="ignore", over="ignore"):
        keys = -np.log(u) / p
    keys[p <= 0] = np.inf
    return np.argsort(keys, kind="stable")[:n]
