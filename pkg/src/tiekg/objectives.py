"""Loss terms of the incremental objective and their gradients.

Every term returns ``(value, SparseGrad)``. Softmax terms put the positive
in the denominator alongside its sampled negatives, so each is a proper
log-probability and never negative.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import SnapshotSequence
from .model import OBJECT, SUBJECT, ParameterStore, SparseGrad, backward, forward

logger = logging.getLogger(__name__)

TERMS = ("ce", "del", "rce", "rkd", "tr")


@dataclass
class NegativeSampleSet:
    """Corruptions for a batch of facts. Row i of ``obj`` replaces the object
    of fact i, row i of ``subj`` its subject; masks flag real entries (rows
    with fewer valid candidates than the rate are padded)."""

    obj: np.ndarray
    obj_mask: np.ndarray
    subj: np.ndarray
    subj_mask: np.ndarray

    def __len__(self):
        return len(self.obj)

    def count(self) -> int:
        return int(self.obj_mask.sum() + self.subj_mask.sum())

    def take(self, idx) -> "NegativeSampleSet":
        return NegativeSampleSet(self.obj[idx], self.obj_mask[idx], self.subj[idx], self.subj_mask[idx])

    def same_as(self, other: "NegativeSampleSet") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in (
                (self.obj, other.obj),
                (self.obj_mask, other.obj_mask),
                (self.subj, other.subj),
                (self.subj_mask, other.subj_mask),
            )
        )

    @classmethod
    def empty(cls, m: int = 0) -> "NegativeSampleSet":
        z = np.zeros((m, 0), dtype=np.int64)
        return cls(z, z.astype(bool), z.copy(), z.astype(bool))


def _draw(pool: np.ndarray, excluded: set, rate: int, rng: np.random.Generator) -> np.ndarray:
    n = len(pool)
    n_valid = n - sum(1 for e in excluded if _in_sorted(pool, e))
    if n_valid <= rate:
        return np.array([e for e in pool.tolist() if e not in excluded], dtype=np.int64)
    # `rate + |excluded|` distinct draws leave at least `rate` valid ones
    idx = rng.choice(n, size=min(n, rate + len(excluded)), replace=False)
    cand = [e for e in pool[idx].tolist() if e not in excluded]
    return np.array(cand[:rate], dtype=np.int64)


def _in_sorted(pool: np.ndarray, e: int) -> bool:
    i = np.searchsorted(pool, e)
    return i < len(pool) and pool[i] == e


def sample_negatives(facts, rate: int, seq: SnapshotSequence, rng: np.random.Generator) -> NegativeSampleSet:
    """Time-dependent negatives: for a fact (s, r, o, t') draw up to `rate`
    objects o' in E^{t'}_known with (s, r, o') not in D^{t'}, and likewise
    `rate` subjects."""
    if rate < 1:
        raise ValueError("negative sampling rate must be >= 1")
    facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
    m = len(facts)
    obj = np.zeros((m, rate), dtype=np.int64)
    subj = np.zeros((m, rate), dtype=np.int64)
    om = np.zeros((m, rate), dtype=bool)
    sm = np.zeros((m, rate), dtype=bool)
    pools: dict[int, np.ndarray] = {}
    for i, (s, r, o, t) in enumerate(facts.tolist()):
        if t not in pools:
            pools[t] = seq.known_array(t)
        snap = seq[t]
        a = _draw(pools[t], snap.objects_of(s, r), rate, rng)
        b = _draw(pools[t], snap.subjects_of(r, o), rate, rng)
        obj[i, : len(a)] = a
        om[i, : len(a)] = True
        subj[i, : len(b)] = b
        sm[i, : len(b)] = True
        obj[i, len(a) :] = o
        subj[i, len(b) :] = s
    return NegativeSampleSet(obj, om, subj, sm)


# -- candidate logits -------------------------------------------------------------


def candidate_logits(store: ParameterStore, facts: np.ndarray, negs: NegativeSampleSet, direction: str):
    """Logits over [positive, negatives...] per fact for one direction.

    Returns (logits (m, 1+k) with -inf on padding, mask, context for
    :func:`candidate_backward`).
    """
    facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
    s, r, o, t = facts.T
    if direction == OBJECT:
        cands = np.column_stack([o, negs.obj])
        mask = np.column_stack([np.ones(len(facts), dtype=bool), negs.obj_mask])
    else:
        cands = np.column_stack([s, negs.subj])
        mask = np.column_stack([np.ones(len(facts), dtype=bool), negs.subj_mask])
    m, c = cands.shape
    rep = lambda a: np.repeat(a, c)  # noqa: E731
    if direction == OBJECT:
        phi, ctx = forward(store, rep(s), rep(r), cands.ravel(), rep(t))
    else:
        phi, ctx = forward(store, cands.ravel(), rep(r), rep(o), rep(t))
    logits = phi.reshape(m, c)
    logits = np.where(mask, logits, -np.inf)
    return logits, mask, ctx


def candidate_backward(store: ParameterStore, ctx, dlogits: np.ndarray, mask: np.ndarray) -> SparseGrad:
    return backward(store, ctx, np.where(mask, dlogits, 0.0).ravel())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    mx = logits.max(axis=1, keepdims=True)
    sh = logits - mx
    with np.errstate(invalid="ignore"):
        lse = np.log(np.exp(sh).sum(axis=1, keepdims=True))
    return sh - lse


def _warn_empty(negs: NegativeSampleSet, label: str):
    for name, mask in (("object", negs.obj_mask), ("subject", negs.subj_mask)):
        n = int((~mask.any(axis=1)).sum())
        if n:
            warnings.warn(f"{label}: {n} facts have no {name}-side negatives; their term is 0", RuntimeWarning)


def softmax_ce(store: ParameterStore, facts, negs: NegativeSampleSet) -> tuple[float, SparseGrad]:
    """-sum log q over both corruption directions, q the softmax probability
    of the positive among itself and its negatives."""
    facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
    if len(facts) == 0:
        return 0.0, SparseGrad()
    _warn_empty(negs, "softmax_ce")
    total = 0.0
    grad = SparseGrad()
    for direction in (OBJECT, SUBJECT):
        logits, mask, ctx = candidate_logits(store, facts, negs, direction)
        lp = log_softmax(logits)
        total += float(-lp[:, 0].sum())
        d = np.where(mask, np.exp(lp), 0.0)
        d[:, 0] -= 1.0
        grad += candidate_backward(store, ctx, d, mask)
    return total, grad


@dataclass
class DistillationCache:
    """Frozen log-probabilities of theta^{t-1} over each replay fact's fixed
    candidate set, both directions."""

    facts: np.ndarray
    negs: NegativeSampleSet
    logp_obj: np.ndarray
    logp_subj: np.ndarray

    @classmethod
    def build(cls, store_prev: ParameterStore, facts, negs: NegativeSampleSet) -> "DistillationCache":
        facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
        lo, _, _ = candidate_logits(store_prev, facts, negs, OBJECT)
        ls, _, _ = candidate_logits(store_prev, facts, negs, SUBJECT)
        return cls(facts.copy(), negs, log_softmax(lo), log_softmax(ls))

    def take(self, idx) -> "DistillationCache":
        return DistillationCache(self.facts[idx], self.negs.take(idx), self.logp_obj[idx], self.logp_subj[idx])

    def positive_probs(self) -> np.ndarray:
        return np.exp(np.column_stack([self.logp_obj[:, 0], self.logp_subj[:, 0]]))


def distill_kl(
    cache: DistillationCache, store: ParameterStore, facts, negs: NegativeSampleSet, form: str = "full"
) -> tuple[float, SparseGrad]:
    """Knowledge distillation from the cached theta^{t-1} distribution.

    ``form="full"``: KL(q_prev || q) over {positive} + negatives.
    ``form="scalar"``: q_prev(pos) * ln(q_prev(pos) / q(pos)) only.
    """
    facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
    if not (np.array_equal(facts, cache.facts) and negs.same_as(cache.negs)):
        raise ValueError("distillation cache was built for different facts or negatives")
    if len(facts) == 0:
        return 0.0, SparseGrad()
    return _distill_from_logits(cache, store, facts, negs, form)[:2]


def _distill_from_logits(cache, store, facts, negs, form, precomputed=None):
    total = 0.0
    grad = SparseGrad()
    for direction, lp_prev in ((OBJECT, cache.logp_obj), (SUBJECT, cache.logp_subj)):
        if precomputed is None:
            logits, mask, ctx = candidate_logits(store, facts, negs, direction)
            lp = log_softmax(logits)
        else:
            lp, mask, ctx = precomputed[direction]
        q = np.where(mask, np.exp(lp), 0.0)
        qp = np.where(mask, np.exp(lp_prev), 0.0)
        if form == "full":
            with np.errstate(invalid="ignore"):
                terms = np.where(mask & (qp > 0), qp * (lp_prev - lp), 0.0)
            total += float(terms.sum())
            d = q - qp
        elif form == "scalar":
            total += float((qp[:, 0] * (lp_prev[:, 0] - lp[:, 0])).sum())
            d = qp[:, :1] * q
            d[:, 0] -= qp[:, 0]
        else:
            raise ValueError(f"unknown distillation form {form!r}")
        grad += candidate_backward(store, ctx, d, mask)
    return total, grad


def replay_terms(
    store: ParameterStore, cache: DistillationCache | None, facts, negs: NegativeSampleSet, form: str = "full",
    need_ce: bool = True, need_kd: bool = True,
):
    """L_RCE and L_RKD on the same replay facts sharing one forward pass."""
    facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
    if len(facts) == 0:
        return (0.0, SparseGrad()), (0.0, SparseGrad())
    pre = {}
    ce_val, ce_grad = 0.0, SparseGrad()
    for direction in (OBJECT, SUBJECT):
        logits, mask, ctx = candidate_logits(store, facts, negs, direction)
        lp = log_softmax(logits)
        pre[direction] = (lp, mask, ctx)
        if need_ce:
            ce_val += float(-lp[:, 0].sum())
            d = np.where(mask, np.exp(lp), 0.0)
            d[:, 0] -= 1.0
            ce_grad += candidate_backward(store, ctx, d, mask)
    if need_kd:
        if cache is None:
            raise ValueError("distillation needs a cache")
        if not (np.array_equal(facts, cache.facts) and negs.same_as(cache.negs)):
            raise ValueError("distillation cache was built for different facts or negatives")
        kd = _distill_from_logits(cache, store, facts, negs, form, pre)
    else:
        kd = (0.0, SparseGrad())
    return (ce_val, ce_grad), kd


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def deleted_bce(store: ParameterStore, deleted, paired=None) -> tuple[float, SparseGrad]:
    """-sum ln(1 - sigmoid(phi)) = sum softplus(phi) over deleted quadruples.

    `paired` optionally holds (s, r, o, t') positives, one per deleted fact,
    contributing -ln sigmoid(phi) = softplus(-phi).
    """
    deleted = np.asarray(deleted, dtype=np.int64).reshape(-1, 4)
    total, grad = 0.0, SparseGrad()
    if len(deleted):
        phi, ctx = forward(store, *deleted.T)
        total += float(softplus(phi).sum())
        grad += backward(store, ctx, sigmoid(phi))
    if paired is not None:
        paired = np.asarray(paired, dtype=np.int64).reshape(-1, 4)
        if len(paired):
            phi, ctx = forward(store, *paired.T)
            total += float(softplus(-phi).sum())
            grad += backward(store, ctx, -sigmoid(-phi))
    return total, grad


def temporal_reg(store: ParameterStore, store_prev: ParameterStore) -> tuple[float, SparseGrad]:
    """Squared distance to theta^{t-1} over the rows theta^{t-1} knew."""
    total = 0.0
    grad = SparseGrad()
    for name, cur in store.params.items():
        prev = store_prev.params.get(name)
        if prev is None or prev.shape != cur.shape:
            raise ValueError(f"parameter {name} does not match the previous step")
        rows = store_prev.known_rows(name)
        if len(rows) == 0:
            continue
        diff = cur[rows] - prev[rows]
        total += float((diff * diff).sum())
        grad.add_rows(name, rows, 2.0 * diff)
    return total, grad


# -- bundle ---------------------------------------------------------------------


@dataclass
class LossWeights:
    ce: float = 1.0
    deleted: float = 1.0
    rce: float = 1.0
    rkd: float = 1.0
    tr: float = 1.0

    def of(self, term: str) -> float:
        return {"ce": self.ce, "del": self.deleted, "rce": self.rce, "rkd": self.rkd, "tr": self.tr}[term]


@dataclass
class LossBundle:
    values: dict[str, float] = field(default_factory=lambda: {k: 0.0 for k in TERMS})
    grads: dict[str, SparseGrad] = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)

    def total(self) -> float:
        return total_loss(self)

    def gradient(self, terms=TERMS) -> SparseGrad:
        g = SparseGrad()
        for k in terms:
            w = self.weights.of(k)
            if w != 0.0 and k in self.grads:
                g += self.grads[k].scaled(w)
        return g


def total_loss(bundle: LossBundle) -> float:
    return sum(bundle.weights.of(k) * bundle.values[k] for k in TERMS)


@dataclass
class Batch:
    """One mixed mini-batch: current facts with negatives, replay facts with
    their cached distribution, deleted facts (optionally paired positives)."""

    current: np.ndarray
    current_negs: NegativeSampleSet
    replay: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    replay_negs: NegativeSampleSet = field(default_factory=NegativeSampleSet.empty)
    cache: DistillationCache | None = None
    deleted: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    deleted_paired: np.ndarray | None = None

    def __len__(self):
        return len(self.current) + len(self.replay) + len(self.deleted)


def evaluate_batch(
    store: ParameterStore,
    batch: Batch,
    weights: LossWeights,
    store_prev: ParameterStore | None = None,
    rkd_form: str = "full",
) -> LossBundle:
    """Values and gradients of every term with nonzero weight; zero-weight
    terms are skipped and report 0."""
    b = LossBundle(weights=weights)
    if weights.ce != 0.0 and len(batch.current):
        b.values["ce"], b.grads["ce"] = softmax_ce(store, batch.current, batch.current_negs)
    if weights.deleted != 0.0 and len(batch.deleted):
        b.values["del"], b.grads["del"] = deleted_bce(store, batch.deleted, batch.deleted_paired)
    need_ce, need_kd = weights.rce != 0.0, weights.rkd != 0.0
    if (need_ce or need_kd) and len(batch.replay):
        (b.values["rce"], b.grads["rce"]), (b.values["rkd"], b.grads["rkd"]) = replay_terms(
            store, batch.cache, batch.replay, batch.replay_negs, rkd_form, need_ce, need_kd
        )
    if weights.tr != 0.0:
        if store_prev is None:
            raise ValueError("temporal regularization needs the previous parameters")
        b.values["tr"], b.grads["tr"] = temporal_reg(store, store_prev)
    for k, v in b.values.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"loss term {k} is not finite")
    return b
