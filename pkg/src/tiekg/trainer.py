"""Pretraining, the per-step incremental procedure and its baselines.

Strategies are configurations of one step procedure:

=========  ====================================================
ft         cross entropy on added facts only
tr         ft + temporal regularization
tie        ft + deleted facts + replay (CE and distillation) + TR
fb         cross entropy on the replay window plus the current step
fb_future  one standard training pass over every step, evaluated per step
=========  ====================================================
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .agem import project_sparse
from .config import Config
from .core import SnapshotSequence, added_facts
from .model import (
    ParameterStore,
    create_store,
    init_step,
    make_optimizer,
    save_store,
)
from .objectives import (
    TERMS,
    Batch,
    DistillationCache,
    LossWeights,
    NegativeSampleSet,
    evaluate_batch,
    replay_terms,
    sample_negatives,
)
from .replay import PatternFrequencyIndex, ReplayBuffer, sample_replay

logger = logging.getLogger(__name__)

EMPTY4 = np.zeros((0, 4), dtype=np.int64)


def pretrain_steps(T: int, fraction: float = 0.7) -> int:
    """Number of leading steps used for pretraining, ceil(fraction * T)."""
    return min(T, max(1, math.ceil(fraction * T - 1e-9)))


def strategy_weights(cfg: Config, strategy: str) -> LossWeights:
    lc = cfg.loss
    if strategy == "ft" or strategy in ("fb", "fb_future"):
        return LossWeights(lc.alpha1, 0.0, 0.0, 0.0, 0.0)
    if strategy == "tr":
        return LossWeights(lc.alpha1, 0.0, 0.0, 0.0, lc.alpha5)
    if strategy == "tie":
        return LossWeights(lc.alpha1, lc.alpha2, lc.alpha3, lc.alpha4, lc.alpha5)
    raise ValueError(f"unknown strategy {strategy!r}")


def added_train_facts(seq: SnapshotSequence, t: int) -> np.ndarray:
    """D^t_add restricted to the training split, as an (n, 4) array."""
    add = {q.triple for q in added_facts(seq, t)}
    tr = seq[t].train
    keep = [i for i, trip in enumerate(map(tuple, tr.tolist())) if trip in add]
    return np.column_stack([tr[keep], np.full(len(keep), t, dtype=np.int64)]) if keep else EMPTY4.copy()


def deleted_quads(buffer: ReplayBuffer, seq: SnapshotSequence, t: int) -> tuple[np.ndarray, np.ndarray]:
    """N^t as a sorted (n, 4) array stamped with t, plus the most recent
    buffer occurrence (s, r, o, t') of each triple."""
    q = buffer.quadruples()
    cur = seq[t].triples
    last: dict = {}
    for s, r, o, tp in q.tolist():
        if (s, r, o) not in cur:
            last[(s, r, o)] = max(tp, last.get((s, r, o), 0))
    keys = sorted(last)
    if not keys:
        return EMPTY4.copy(), EMPTY4.copy()
    trip = np.array(keys, dtype=np.int64)
    now = np.column_stack([trip, np.full(len(keys), t, dtype=np.int64)])
    then = np.column_stack([trip, np.array([last[k] for k in keys], dtype=np.int64)])
    return now, then


@dataclass
class StepRecord:
    t: int
    rows: list = field(default_factory=list)  # (metric, direction, value)
    alpha: dict = field(default_factory=dict)  # j -> Hits@k on D^j_test
    losses: list = field(default_factory=list)  # per epoch {term: value}
    epochs: int = 0
    best_epoch: int = 0
    epoch_times: list = field(default_factory=list)
    data_size: int = 0
    counts: dict = field(default_factory=dict)

    def metric(self, name: str, direction: str = "both"):
        for m, d, v in self.rows:
            if m == name and d == direction:
                return v
        return None


@dataclass
class FitResult:
    store: ParameterStore
    losses: list
    epochs: int
    best_epoch: int
    best_val: float | None
    epoch_times: list
    val_history: list = field(default_factory=list)


class Trainer:
    def __init__(self, seq: SnapshotSequence, cfg: Config, seed: int | None = None):
        self.seq = seq
        self.cfg = cfg
        self.seed = cfg.run.seed if seed is None else seed
        self.T0 = pretrain_steps(seq.T, cfg.run.pretrain_fraction)
        self.k = cfg.eval.k
        self.pretrain_result: FitResult | None = None

    # -- helpers ----------------------------------------------------------------

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def new_store(self) -> ParameterStore:
        m = self.cfg.model
        return create_store(
            self.seq.n_entities,
            self.seq.n_relations,
            self.seq.T,
            dim=m.dim,
            encoder=m.encoder,
            decoder=m.decoder,
            gamma_de=m.gamma_de,
            rng=self.rng(0),
            seed=self.seed,
        )

    def validation_hits(self, store: ParameterStore, facts: np.ndarray) -> float | None:
        if len(facts) == 0:
            return None
        rep = M.evaluate_ranks(store, self.seq, facts, filtered=self.cfg.eval.filtered)
        return M.hits_at_k(rep.pooled(), self.k)

    def _mark_known(self, store: ParameterStore, t: int) -> None:
        store.known_entities = self.seq.known_mask(t).copy()
        store.known_relations = self.seq.known_relation_mask(t).copy()
        store.known_steps = t

    # -- the epoch engine ---------------------------------------------------------

    def fit(
        self,
        store: ParameterStore,
        make_batches,
        val_facts: np.ndarray,
        weights: LossWeights,
        *,
        store_prev: ParameterStore | None = None,
        agem_ref=None,
        max_epochs: int | None = None,
    ) -> FitResult:
        """Mini-batch training with early stopping on pooled validation Hits@k.

        `make_batches(epoch)` returns the epoch's list of :class:`Batch`.
        `agem_ref`, when given, is a callable store -> reference gradient and
        switches the update to the row-wise projected one.
        """
        oc = self.cfg.optim
        opt = make_optimizer(oc.optimizer, oc.lr)
        max_epochs = oc.max_epochs if max_epochs is None else max_epochs
        best_val, best_store, best_epoch, wait = None, None, 0, 0
        losses, times, vals = [], [], []
        batch_weights = weights
        if agem_ref is not None:
            batch_weights = LossWeights(weights.ce, weights.deleted, 0.0, 0.0, weights.tr)
        epoch = 0
        for epoch in range(1, max_epochs + 1):
            batches = make_batches(epoch)
            acc = {k: 0.0 for k in TERMS}
            elapsed = 0.0
            for batch in batches:
                t0 = time.perf_counter()
                bundle = evaluate_batch(store, batch, batch_weights, store_prev, self.cfg.loss.rkd_form)
                grad = bundle.gradient()
                if agem_ref is not None:
                    ref = agem_ref(store)
                    if ref is not None:
                        grad = project_sparse(grad, ref)
                opt.step(store, grad)
                elapsed += time.perf_counter() - t0
                for k in TERMS:
                    acc[k] += bundle.values[k]
            losses.append(acc)
            times.append(elapsed)
            val = self.validation_hits(store, val_facts)
            vals.append(val)
            if val is None:
                best_store, best_epoch = None, epoch
                continue
            if best_val is None or val > best_val:
                best_val, best_store, best_epoch, wait = val, store.copy(), epoch, 0
            else:
                wait += 1
                if wait >= oc.patience:
                    break
        final = best_store if best_store is not None else store
        return FitResult(final, losses, epoch, best_epoch, best_val, times, vals)

    def _current_batches(self, facts: np.ndarray, rate: int, rng: np.random.Generator):
        bs = self.cfg.batch.max_size

        def make(epoch):
            if len(facts) == 0:
                return []
            negs = sample_negatives(facts, rate, self.seq, rng)
            order = rng.permutation(len(facts))
            out = []
            for lo in range(0, len(order), bs):
                idx = np.sort(order[lo : lo + bs])
                out.append(Batch(facts[idx], negs.take(idx)))
            return out

        return make

    # -- pretraining ------------------------------------------------------------------

    def pretrain(self, store: ParameterStore | None = None) -> ParameterStore:
        """Standard training over the train facts of steps 1..T0, early
        stopped on pooled validation Hits@k of the same steps."""
        store = self.new_store() if store is None else store
        rng = self.rng(1)
        steps = range(1, self.T0 + 1)
        facts = self.seq.quadruples("train", steps)
        val = self.seq.quadruples("valid", steps)
        res = self.fit(
            store,
            self._current_batches(facts, self.cfg.neg.rate_current, rng),
            val,
            LossWeights(1.0, 0.0, 0.0, 0.0, 0.0),
            max_epochs=self.cfg.optim.pretrain_max_epochs or self.cfg.optim.max_epochs,
        )
        out = res.store
        self._mark_known(out, self.T0)
        logger.info("pretrained %d epochs (best %d, val hits %.4f)", res.epochs, res.best_epoch, res.best_val or 0.0)
        self.pretrain_result = res
        return out

    # -- incremental steps ------------------------------------------------------------

    def step(self, store_prev: ParameterStore, t: int, strategy: str, rng: np.random.Generator,
             buffer: ReplayBuffer) -> tuple[ParameterStore, StepRecord]:
        """One incremental step of the ft / tr / tie / fb family."""
        cfg = self.cfg
        weights = strategy_weights(cfg, strategy)
        prev = store_prev.copy().freeze()
        store = init_step(prev, prev.known_entities, rng, known_relations=prev.known_relations,
                          known_steps=prev.known_steps)
        buffer.advance(t)
        rec = StepRecord(t)

        if strategy == "fb":
            current = np.concatenate([buffer.quadruples(), self.seq.quadruples("train", [t])])
        else:
            current = added_train_facts(self.seq, t)

        replay, rnegs, cache = EMPTY4.copy(), NegativeSampleSet.empty(), None
        use_replay = strategy == "tie" and cfg.replay.samples_per_step > 0 and (
            weights.rce != 0.0 or weights.rkd != 0.0 or cfg.optim.agem
        )
        if use_replay and len(buffer):
            rc = cfg.replay
            index = PatternFrequencyIndex.build(
                buffer.quadruples(), self.seq[t].train.tolist(),
                weights=rc.lambda_table(), sigma=rc.sigma, gamma=rc.gamma,
            )
            replay = sample_replay(buffer.quadruples(), index, t, rc.window, rc.strategy, rc.samples_per_step, rng)
            rnegs = sample_negatives(replay, cfg.neg.rate_replay, self.seq, rng)
            cache = DistillationCache.build(prev, replay, rnegs)

        deleted, paired = EMPTY4.copy(), None
        if strategy == "tie" and weights.deleted != 0.0:
            deleted, then = deleted_quads(buffer, self.seq, t)
            cap = cfg.loss.deleted_cap
            if cap is not None and len(deleted) > cap:
                keep = np.sort(rng.choice(len(deleted), size=cap, replace=False))
                deleted, then = deleted[keep], then[keep]
            if cfg.loss.deleted_paired_positive:
                paired = then

        n_cur, n_rep, n_del = len(current), len(replay), len(deleted)
        rec.counts = {"current": n_cur, "replay": n_rep, "deleted": n_del}
        bs = cfg.batch.max_size
        first_negs = {}

        def make(epoch):
            negs = sample_negatives(current, cfg.neg.rate_current, self.seq, rng) if n_cur else NegativeSampleSet.empty()
            if epoch == 1:
                first_negs["n"] = negs.count() if n_cur else 0
            order = rng.permutation(n_cur + n_rep + n_del)
            out = []
            for lo in range(0, len(order), bs):
                sel = np.sort(order[lo : lo + bs])
                ic = sel[sel < n_cur]
                ir = sel[(sel >= n_cur) & (sel < n_cur + n_rep)] - n_cur
                idl = sel[sel >= n_cur + n_rep] - n_cur - n_rep
                out.append(
                    Batch(
                        current[ic],
                        negs.take(ic) if n_cur else NegativeSampleSet.empty(),
                        replay[ir],
                        rnegs.take(ir) if n_rep else NegativeSampleSet.empty(),
                        cache.take(ir) if cache is not None else None,
                        deleted[idl],
                        paired[idl] if paired is not None else None,
                    )
                )
            return out

        agem_ref = None
        if cfg.optim.agem and strategy == "tie" and n_rep:
            def agem_ref(s):
                (_, g), _ = replay_terms(s, None, replay, rnegs, need_ce=True, need_kd=False)
                return g

        val = self.seq.quadruples("valid", [t])
        if n_cur + n_rep + n_del:
            res = self.fit(store, make, val, weights, store_prev=prev, agem_ref=agem_ref)
            store = res.store
            rec.losses, rec.epochs, rec.best_epoch, rec.epoch_times = res.losses, res.epochs, res.best_epoch, res.epoch_times
        rec.data_size = (
            n_cur + first_negs.get("n", 0) + n_rep + (rnegs.count() if n_rep else 0) + n_del
            + (len(paired) if paired is not None else 0)
        )
        self._mark_known(store, t)
        self.evaluate_step(store, t, rec)
        return store, rec

    # -- evaluation --------------------------------------------------------------------

    def alpha_steps(self, t: int) -> list[int]:
        if self.cfg.eval.exact_A:
            return list(range(1, t + 1))
        stride = max(1, self.cfg.eval.A_stride)
        js = set(range(max(1, t - self.cfg.eval.tau_d), t + 1)) | set(range(1, t + 1, stride))
        return sorted(js)

    def evaluate_step(self, store: ParameterStore, t: int, rec: StepRecord) -> StepRecord:
        ec = self.cfg.eval
        k = self.k

        def alpha_of(j):
            f = self.seq.quadruples("test", [j])
            if len(f) == 0:
                return j, None
            return j, M.hits_at_k(M.evaluate_ranks(store, self.seq, f, filtered=ec.filtered).pooled(), k)

        js = self.alpha_steps(t)
        threads = self.cfg.run.threads
        if threads and threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                pairs = list(ex.map(alpha_of, js))
        else:
            pairs = [alpha_of(j) for j in js]
        rec.alpha = {j: a for j, a in pairs if a is not None}

        test = self.seq.quadruples("test", [t])
        if len(test):
            rep = M.evaluate_ranks(store, self.seq, test, filtered=ec.filtered)
            for d, ranks in list(rep.ranks.items()) + [("both", rep.pooled())]:
                for kk in (1, 3, k):
                    rec.rows.append((f"hits@{kk}", d, M.hits_at_k(ranks, kk)))
                rec.rows.append(("mrr", d, M.mrr(ranks)))
            rec.rows.append((f"C@{k}", "both", M.hits_at_k(rep.pooled(), k)))
        if rec.alpha:
            rec.rows.append((f"A@{k}", "both", float(np.mean(list(rec.alpha.values())))))
        idx = M.DeletedCandidateIndex(self.seq, t, ec.tau_d)
        res = M.df_and_rrd(store, self.seq, test, idx, k, filtered=ec.filtered)
        for d, (df, rrd, z) in res.per_direction.items():
            if z:
                rec.rows.append((f"DF@{k}", d, df))
                rec.rows.append(("RRD", d, rrd))
        if res.z:
            rec.rows.append((f"DF@{k}", "both", res.df))
            rec.rows.append(("RRD", "both", res.rrd))
        rec.rows.append(("Z", "both", float(res.z)))
        return rec

    # -- whole runs -----------------------------------------------------------------

    def run(self, strategy: str | None = None, pretrained: ParameterStore | None = None,
            out_dir: str | Path | None = None) -> "RunResult":
        strategy = strategy or self.cfg.run.strategy
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        records = []
        if strategy == "fb_future":
            records = self._run_fb_future(out)
        else:
            store = pretrained if pretrained is not None else self.pretrain()
            if store.known_steps != self.T0:
                raise ValueError(f"pretrained parameters cover {store.known_steps} steps, expected {self.T0}")
            rng = self.rng(2)
            buffer = ReplayBuffer(self.seq, self.cfg.replay.window)
            for t in range(self.T0 + 1, self.seq.T + 1):
                store, rec = self.step(store, t, strategy, rng, buffer)
                records.append(rec)
                logger.info("step %d: %s", t, {m: round(v, 4) for m, d, v in rec.rows if d == "both"})
                if out is not None:
                    write_step(out, rec, store if self.cfg.run.save_params else None)
        result = RunResult(strategy, self.seed, self.T0, records)
        if out is not None:
            write_json(out / "summary.json", result.summary())
        return result

    def _run_fb_future(self, out: Path | None) -> list:
        """Skyline: standard training on every step, then per-step evaluation."""
        store = self.new_store()
        rng = self.rng(3)
        steps = self.seq.steps()
        facts = self.seq.quadruples("train", steps)
        val = self.seq.quadruples("valid", steps)
        res = self.fit(store, self._current_batches(facts, self.cfg.neg.rate_current, rng), val,
                       LossWeights(1.0, 0.0, 0.0, 0.0, 0.0))
        store = res.store
        self._mark_known(store, self.seq.T)
        records = []
        for t in range(self.T0 + 1, self.seq.T + 1):
            rec = StepRecord(t, losses=res.losses if t == self.T0 + 1 else [], epochs=res.epochs,
                             best_epoch=res.best_epoch, epoch_times=res.epoch_times)
            rec.counts = {"current": len(facts)}
            self.evaluate_step(store, t, rec)
            records.append(rec)
            if out is not None:
                write_step(out, rec, store if self.cfg.run.save_params and t == self.T0 + 1 else None)
        return records


@dataclass
class RunResult:
    strategy: str
    seed: int
    T0: int
    records: list

    def metric_rows(self) -> list[tuple]:
        return [(r.t, m, d, v) for r in self.records for (m, d, v) in r.rows]

    def summary(self) -> dict:
        return report(self)


HEADLINE = ("C@10", "A@10", "DF@10", "RRD", "mrr", "hits@1", "hits@3", "hits@10")


def report(run: RunResult) -> dict:
    """Run-level averages over incremental steps (skipping undefined values),
    the loss history, wall-clock per epoch and the data-size counter."""
    means = {}
    names = sorted({m for r in run.records for (m, d, _) in r.rows if d == "both"} - {"Z"})
    for m in names:
        vals = [r.metric(m) for r in run.records]
        vals = [v for v in vals if v is not None]
        if vals:
            means[m] = float(np.mean(vals))
    times = [x for r in run.records for x in r.epoch_times]
    return {
        "strategy": run.strategy,
        "seed": run.seed,
        "pretrain_steps": run.T0,
        "incremental_steps": [r.t for r in run.records],
        "metrics": means,
        "loss_history": {
            term: [sum(ep[term] for ep in r.losses) for r in run.records] for term in TERMS
        },
        "epochs": [r.epochs for r in run.records],
        "data_size": {
            "per_step": [r.data_size for r in run.records],
            "total": int(sum(r.data_size for r in run.records)),
            "counting": "each fact and each sampled negative entity counts as one quadruple; "
            "current-fact negatives are counted for the first epoch of a step",
        },
        "counts": [r.counts for r in run.records],
        "wall_clock": {
            "train_seconds_per_epoch": float(np.mean(times)) if times else 0.0,
        },
    }


def aggregate(summaries: list[dict]) -> dict:
    """Mean and sample standard deviation of every run-level metric across seeds."""
    names = sorted({k for s in summaries for k in s["metrics"]})
    out = {}
    for m in names:
        vals = np.array([s["metrics"][m] for s in summaries if m in s["metrics"]], dtype=float)
        out[m] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            "n": int(len(vals)),
        }
    t = [s["wall_clock"]["train_seconds_per_epoch"] for s in summaries]
    d = [s["data_size"]["total"] for s in summaries]
    return {
        "metrics": out,
        "train_seconds_per_epoch": {"mean": float(np.mean(t)), "std": float(np.std(t, ddof=1)) if len(t) > 1 else 0.0},
        "data_size_total": {"mean": float(np.mean(d)), "std": float(np.std(d, ddof=1)) if len(d) > 1 else 0.0},
        "runs": [{"strategy": s["strategy"], "seed": s["seed"]} for s in summaries],
    }


# -- output files ------------------------------------------------------------------


def write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True))
    tmp.replace(path)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_metrics_csv(path: Path, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "metric", "direction", "value"])
        for t, m, d, v in rows:
            w.writerow([t, m, d, _fmt(v)])
    tmp.replace(path)


def write_step(out: Path, rec: StepRecord, store: ParameterStore | None) -> None:
    d = out / f"step_{rec.t}"
    d.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(d / "metrics.csv", [(rec.t, m, dd, v) for m, dd, v in rec.rows])
    tmp = d / "alpha.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "eval_step", "value"])
        for j, a in sorted(rec.alpha.items()):
            w.writerow([rec.t, j, _fmt(a)])
    tmp.replace(d / "alpha.csv")
    if store is not None:
        save_store(store, d / "params.bin")
