"""Ranking and the evaluation measures: Hits@k, MRR, current/average Hits,
and the intransigence measures DF (deleted-facts Hits@k) and RRD
(reciprocal rank difference)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SnapshotSequence
from .model import OBJECT, SUBJECT, ParameterStore, score_matrix

DIRECTIONS = (OBJECT, SUBJECT)


def rank_of(scores: np.ndarray, candidates: np.ndarray, target: int, ignore: np.ndarray | None = None) -> int:
    """1 + candidates scoring strictly higher + equal-scoring candidates with a
    smaller id. `ignore` masks candidates removed by filtering."""
    pos = np.flatnonzero(candidates == target)
    if len(pos) == 0:
        raise ValueError(f"entity {target} is not among the candidates")
    v = scores[pos[0]]
    beat = (scores > v) | ((scores == v) & (candidates < target))
    if ignore is not None:
        beat &= ~ignore
    return int(beat.sum()) + 1


def rank(store: ParameterStore, query, candidates, direction: str = OBJECT) -> int:
    """Raw rank of the true entity of `query` (s, r, o, t) among candidates."""
    s, r, o, t = (int(x) for x in query)
    cands = np.asarray(candidates, dtype=np.int64)
    anchor, target = (s, o) if direction == OBJECT else (o, s)
    sc = score_matrix(store, [anchor], [r], t, cands, direction)[0]
    return rank_of(sc, cands, target)


def _ranks_from_matrix(sc: np.ndarray, cands: np.ndarray, targets: np.ndarray, ignore=None) -> np.ndarray:
    """Vectorized rank_of over rows: targets must be members of cands."""
    col = np.searchsorted(cands, targets)
    if (col >= len(cands)).any() or (cands[np.minimum(col, len(cands) - 1)] != targets).any():
        raise ValueError("target entity missing from candidates")
    v = sc[np.arange(len(targets)), col][:, None]
    beat = (sc > v) | ((sc == v) & (cands[None, :] < targets[:, None]))
    if ignore is not None:
        beat &= ~ignore
    return beat.sum(axis=1) + 1


def _filter_mask(seq: SnapshotSequence, facts: np.ndarray, cands: np.ndarray, direction: str, t: int, targets):
    snap = seq[t]
    pos = {int(c): j for j, c in enumerate(cands.tolist())}
    mask = np.zeros((len(facts), len(cands)), dtype=bool)
    for i, (s, r, o, _) in enumerate(facts.tolist()):
        true = snap.objects_of(s, r) if direction == OBJECT else snap.subjects_of(r, o)
        for e in true:
            if e != targets[i] and e in pos:
                mask[i, pos[e]] = True
    return mask


def rank_facts(
    store: ParameterStore,
    seq: SnapshotSequence,
    facts: np.ndarray,
    direction: str,
    *,
    filtered: bool = False,
    chunk: int = 512,
) -> np.ndarray:
    """Ranks of the true entity for each fact (s, r, o, t), candidates E^t_known."""
    facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
    out = np.zeros(len(facts), dtype=np.int64)
    for t in np.unique(facts[:, 3]).tolist():
        idx = np.flatnonzero(facts[:, 3] == t)
        cands = seq.known_array(t)
        for lo in range(0, len(idx), chunk):
            sel = idx[lo : lo + chunk]
            f = facts[sel]
            anchors, targets = (f[:, 0], f[:, 2]) if direction == OBJECT else (f[:, 2], f[:, 0])
            sc = score_matrix(store, anchors, f[:, 1], t, cands, direction)
            ign = _filter_mask(seq, f, cands, direction, t, targets) if filtered else None
            out[sel] = _ranks_from_matrix(sc, cands, targets, ign)
    return out


@dataclass
class RankReport:
    """Ranks per direction for a set of test queries."""

    ranks: dict[str, np.ndarray] = field(default_factory=dict)

    def pooled(self) -> np.ndarray:
        return np.concatenate([self.ranks[d] for d in DIRECTIONS if d in self.ranks])


def evaluate_ranks(store, seq, facts, *, filtered=False) -> RankReport:
    return RankReport({d: rank_facts(store, seq, facts, d, filtered=filtered) for d in DIRECTIONS})


def hits_at_k(ranks, k: int = 10) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("hits@k of an empty rank set")
    return float((ranks <= k).sum() / ranks.size)


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise ValueError("MRR of an empty rank set")
    return float((1.0 / ranks).mean())


def current_and_average(alpha) -> tuple[list[float], list[float]]:
    """C_t = alpha[t][t], A_t = mean_j alpha[t][j] for a lower-triangular
    list of rows; row t (0-based) must hold t+1 entries."""
    cs, avs = [], []
    for i, row in enumerate(alpha):
        row = list(row)
        if len(row) != i + 1:
            raise ValueError(f"row {i + 1} of the alpha matrix has {len(row)} entries, expected {i + 1}")
        cs.append(float(row[-1]))
        avs.append(float(sum(row) / len(row)))
    return cs, avs


class DeletedCandidateIndex:
    """O'_{s,r,t}: entities that completed (s, r, ?) somewhere in steps
    [t - tau_d, t - 1] but no longer do at t; symmetric for (?, r, o)."""

    def __init__(self, seq: SnapshotSequence, t: int, tau_d: int = 10):
        self.t = t
        self.tau_d = tau_d
        cur = seq[t]
        obj: dict = {}
        subj: dict = {}
        for tp in range(max(1, t - tau_d), t):
            for s, r, o in seq[tp].triples:
                if (s, r, o) in cur.triples:
                    continue
                obj.setdefault((s, r), set()).add(o)
                subj.setdefault((r, o), set()).add(s)
        self._obj = {k: np.array(sorted(v), dtype=np.int64) for k, v in obj.items()}
        self._subj = {k: np.array(sorted(v), dtype=np.int64) for k, v in subj.items()}

    def objects(self, s: int, r: int) -> np.ndarray:
        return self._obj.get((s, r), np.zeros(0, dtype=np.int64))

    def subjects(self, r: int, o: int) -> np.ndarray:
        return self._subj.get((r, o), np.zeros(0, dtype=np.int64))

    def candidates(self, fact, direction: str) -> np.ndarray:
        s, r, o = int(fact[0]), int(fact[1]), int(fact[2])
        return self.objects(s, r) if direction == OBJECT else self.subjects(r, o)


@dataclass
class IntransigenceResult:
    df: float | None
    rrd: float | None
    z: int
    hits: int = 0
    rr_sum: float = 0.0
    per_direction: dict = field(default_factory=dict)


def df_and_rrd(
    store: ParameterStore,
    seq: SnapshotSequence,
    test_facts: np.ndarray,
    index: DeletedCandidateIndex,
    k: int = 10,
    *,
    filtered: bool = False,
) -> IntransigenceResult:
    """Pooled (object + subject) DF_t and RRD_t. Both are None when Z_t = 0."""
    test_facts = np.asarray(test_facts, dtype=np.int64).reshape(-1, 4)
    t = index.t
    cands = seq.known_array(t)
    hits = 0
    rr = 0.0
    z = 0
    per_dir = {}
    for direction in DIRECTIONS:
        dh, drr, dz = 0, 0.0, 0
        todo = [(i, index.candidates(f, direction)) for i, f in enumerate(test_facts)]
        todo = [(i, oc) for i, oc in todo if len(oc)]
        if todo:
            sel = np.array([i for i, _ in todo])
            f = test_facts[sel]
            anchors, targets = (f[:, 0], f[:, 2]) if direction == OBJECT else (f[:, 2], f[:, 0])
            sc = score_matrix(store, anchors, f[:, 1], t, cands, direction)
            ign = _filter_mask(seq, f, cands, direction, t, targets) if filtered else None
            true_ranks = _ranks_from_matrix(sc, cands, targets, ign)
            for row, (_, deleted) in enumerate(todo):
                n = len(deleted)
                ign_del = None
                if ign is not None:
                    # every entity true at t is filtered when ranking a deleted one
                    ign_row = ign[row] | (cands == targets[row])
                    ign_del = np.broadcast_to(ign_row, (n, len(cands)))
                r_del = _ranks_from_matrix(np.broadcast_to(sc[row], (n, len(cands))), cands, deleted, ign_del)
                dh += int((r_del <= k).sum())
                drr += float((1.0 / true_ranks[row] - 1.0 / r_del).sum())
                dz += n
        per_dir[direction] = (dh / dz if dz else None, 100.0 * drr / dz if dz else None, dz)
        hits += dh
        rr += drr
        z += dz
    if z == 0:
        return IntransigenceResult(None, None, 0, per_direction=per_dir)
    return IntransigenceResult(hits / z, 100.0 * rr / z, z, hits, rr, per_dir)
