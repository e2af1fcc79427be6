"""Turn interval-annotated triple files (YAGO11k / Wikidata12k style) or a
synthetic generative process into a SnapshotSequence."""
from __future__ import annotations

import bisect
import logging
import re
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import SPLITS, Snapshot, SnapshotSequence

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_RATIOS = (0.86, 0.07, 0.07)

_DATE = re.compile(r"^(-?)(\d{1,4}|#{1,4})(?:-[\d#]{1,2}(?:-[\d#]{1,2})?)?$")


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class IntervalFact:
    s_name: str
    r_name: str
    o_name: str
    begin: int | None = None
    end: int | None = None


def parse_year(field: str) -> int | None:
    """Year of a `YYYY-MM-DD` style date; month/day are ignored, `####` is missing."""
    field = field.strip()
    if not field:
        return None
    m = _DATE.match(field)
    if not m:
        raise ValueError(f"unparseable date {field!r}")
    sign, year = m.group(1), m.group(2)
    if "#" in year:
        return None
    return -int(year) if sign else int(year)


def parse_interval_file(path: str | Path) -> list[IntervalFact]:
    facts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3 or len(parts) > 5:
                raise ParseError(path, lineno, f"expected 3-5 tab-separated fields, got {len(parts)}")
            s, r, o = (p.strip() for p in parts[:3])
            if not (s and r and o):
                raise ParseError(path, lineno, "empty subject, relation or object")
            try:
                begin = parse_year(parts[3]) if len(parts) > 3 else None
                end = parse_year(parts[4]) if len(parts) > 4 else None
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            facts.append(IntervalFact(s, r, o, begin, end))
    return facts


def year_range(facts: Iterable[IntervalFact]) -> tuple[int, int]:
    years = [y for f in facts for y in (f.begin, f.end) if y is not None]
    if not years:
        raise ValueError("no dated facts; cannot determine the dataset's year range")
    return min(years), max(years)


def resolve_interval(fact: IntervalFact, first: int, last: int) -> tuple[int, int]:
    """Substitute missing endpoints by the dataset's first/last year."""
    b = first if fact.begin is None else fact.begin
    e = last if fact.end is None else fact.end
    if b > e:
        logger.warning("interval [%s, %s] of %s reversed; swapping", b, e, fact)
        b, e = e, b
    return b, e


class TimeBinning:
    """Contiguous inclusive year bins; bin i (0-based) is time step i+1."""

    def __init__(self, bins: Sequence[tuple[int, int]]):
        bins = [(int(a), int(b)) for a, b in bins]
        if not bins:
            raise ValueError("binning needs at least one bin")
        for a, b in bins:
            if a > b:
                raise ValueError(f"bin ({a}, {b}) is empty")
        for (_, b0), (a1, _) in zip(bins, bins[1:]):
            if a1 != b0 + 1:
                raise ValueError(f"bins must be contiguous: {b0} then {a1}")
        self.bins = bins
        self._starts = [a for a, _ in bins]

    @property
    def T(self) -> int:
        return len(self.bins)

    @property
    def first_year(self) -> int:
        return self.bins[0][0]

    @property
    def last_year(self) -> int:
        return self.bins[-1][1]

    def step_of(self, year: int) -> int:
        if not self.first_year <= year <= self.last_year:
            raise ValueError(f"year {year} outside binning range {self.first_year}..{self.last_year}")
        return bisect.bisect_right(self._starts, year)

    @classmethod
    def from_file(cls, path: str | Path) -> "TimeBinning":
        bins = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError(path, lineno, "expected 'year_start year_end'")
                try:
                    bins.append((int(parts[0]), int(parts[1])))
                except ValueError:
                    raise ParseError(path, lineno, "non-integer year") from None
        return cls(bins)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.bins))

    @classmethod
    def auto(cls, facts: Sequence[IntervalFact], n_steps: int) -> "TimeBinning":
        """Merge adjacent years into `n_steps` bins holding roughly equal
        numbers of (fact, year) occurrences."""
        first, last = year_range(facts)
        counts = np.zeros(last - first + 2, dtype=np.int64)
        for f in facts:
            b, e = resolve_interval(f, first, last)
            counts[b - first] += 1
            counts[e - first + 1] -= 1
        per_year = np.cumsum(counts)[:-1]
        n_years = len(per_year)
        n_steps = min(n_steps, n_years)
        cum = np.cumsum(per_year)
        total = cum[-1]
        cuts = []
        for k in range(1, n_steps):
            target = total * k / n_steps
            idx = int(np.searchsorted(cum, target, side="left"))
            lo = (cuts[-1] + 1) if cuts else 0
            hi = n_years - (n_steps - k) - 1
            cuts.append(min(max(idx, lo), hi))
        bins, start = [], 0
        for c in cuts:
            bins.append((first + start, first + c))
            start = c + 1
        bins.append((first + start, last))
        return cls(bins)


def _intern(names: Iterable[str], table: dict[str, int]) -> None:
    for n in names:
        if n not in table:
            table[n] = len(table)


def discretize(
    facts: Sequence[IntervalFact] | dict[str, Sequence[IntervalFact]],
    binning: TimeBinning,
    *,
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
    seed: int = 0,
    drop_unbinnable: bool = False,
) -> SnapshotSequence:
    """Expand every interval into one quadruple per overlapped step.

    `facts` is either a flat list (splits are then drawn i.i.d. per quadruple
    with `ratios`) or a mapping split-name -> facts read from split files.
    A quadruple occurring in several split files is kept once, in the first
    of train/valid/test that holds it.

    A fact lying entirely outside the binning range raises ValueError unless
    `drop_unbinnable` is set; partial overlaps are clipped to the range.
    """
    if isinstance(facts, dict):
        unknown = set(facts) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split names {sorted(unknown)}")
        by_split = {n: list(facts.get(n, [])) for n in SPLITS}
        flat = [f for n in SPLITS for f in by_split[n]]
    else:
        by_split = None
        flat = list(facts)

    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    for f in flat:
        _intern((f.s_name, f.o_name), ents)
        _intern((f.r_name,), rels)

    if flat:
        first, last = year_range(flat)
    else:
        first, last = binning.first_year, binning.last_year

    def expand(fs):
        out = []
        dropped = 0
        for f in fs:
            b, e = resolve_interval(f, first, last)
            if e < binning.first_year or b > binning.last_year:
                if not drop_unbinnable:
                    raise ValueError(f"{f} spans [{b}, {e}], outside the bins {binning.first_year}..{binning.last_year}")
                dropped += 1
                continue
            lo = binning.step_of(max(b, binning.first_year))
            hi = binning.step_of(min(e, binning.last_year))
            s, r, o = ents[f.s_name], rels[f.r_name], ents[f.o_name]
            out.extend((s, r, o, t) for t in range(lo, hi + 1))
        if dropped:
            logger.warning("dropped %d facts outside the binning range", dropped)
        return out

    T = binning.T
    per_step = {t: {n: set() for n in SPLITS} for t in range(1, T + 1)}
    if by_split is not None:
        seen: set = set()
        for name in SPLITS:
            for q in expand(by_split[name]):
                if q in seen:
                    continue
                seen.add(q)
                per_step[q[3]][name].add(q[:3])
    else:
        quads = sorted(set(expand(flat)), key=lambda q: (q[3], q[0], q[1], q[2]))
        _assign_random_splits(quads, per_step, ratios, seed)

    snaps = [
        Snapshot(t, *(np.array(sorted(per_step[t][n]), dtype=np.int64).reshape(-1, 3) for n in SPLITS))
        for t in range(1, T + 1)
    ]
    meta = {"bins": binning.bins, "split_seed": seed if by_split is None else None, "ratios": list(ratios)}
    return SnapshotSequence(snaps, list(ents), list(rels), meta)


def _assign_random_splits(quads, per_step, ratios, seed):
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or (ratios < 0).any() or ratios.sum() <= 0:
        raise ValueError(f"bad split ratios {ratios}")
    edges = np.cumsum(ratios / ratios.sum())
    u = np.random.default_rng(seed).random(len(quads))
    which = np.searchsorted(edges, u, side="right").clip(max=2)
    for (s, r, o, t), k in zip(quads, which):
        per_step[t][SPLITS[k]].add((s, r, o))


def load_dataset_dir(path: str | Path) -> list[IntervalFact] | dict[str, list[IntervalFact]]:
    """Read `train.txt`/`valid.txt`/`test.txt` if present, else every `*.txt`
    file as one unsplit pool."""
    path = Path(path)
    if path.is_file():
        return parse_interval_file(path)
    split_files = {n: path / f"{n}.txt" for n in SPLITS}
    if split_files["train"].exists():
        return {n: parse_interval_file(p) for n, p in split_files.items() if p.exists()}
    files = sorted(path.glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no triple files under {path}")
    return [f for p in files for f in parse_interval_file(p)]


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_entities: int = 200
    n_relations: int = 6
    T: int = 20
    birth_rate: float = 0.08
    death_rate: float = 0.08
    seed: int = 0
    n_initial: int | None = None
    replace_prob: float = 0.5
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def initial_count(self) -> int:
        return self.n_initial if self.n_initial is not None else 4 * self.n_entities


def active_entities(cfg: SyntheticConfig, t: int) -> int:
    """Entity pool size at step t: half the vocabulary at t=1 growing linearly."""
    if cfg.T == 1:
        return cfg.n_entities
    half = max(2, cfg.n_entities // 2)
    return half + (cfg.n_entities - half) * (t - 1) // (cfg.T - 1)


def generate_synthetic(cfg: SyntheticConfig) -> SnapshotSequence:
    """Birth-death process over triples with geometric lifetimes.

    Every alive fact dies with probability `death_rate` per step. At each step
    t >= 2, Poisson(birth_rate * n_initial) facts are born; a Binomial
    `replace_prob` share of them replace the object of a fact that just died
    (the "changed affiliation" case), the rest are fresh random triples.
    """
    if cfg.T < 1 or cfg.n_entities < 2 or cfg.n_relations < 1:
        raise ValueError(f"degenerate synthetic config {cfg}")
    if not (0 <= cfg.death_rate <= 1 and cfg.birth_rate >= 0 and 0 <= cfg.replace_prob <= 1):
        raise ValueError(f"rates out of range in {cfg}")
    rng = np.random.default_rng(cfg.seed)

    def fresh(n_act, alive):
        for _ in range(100):
            s, o = rng.integers(n_act, size=2)
            r = rng.integers(cfg.n_relations)
            trip = (int(s), int(r), int(o))
            if s != o and trip not in alive:
                return trip
        return None

    alive: dict = {}
    n_act = active_entities(cfg, 1)
    while len(alive) < cfg.initial_count():
        trip = fresh(n_act, alive)
        if trip is None:
            break
        alive[trip] = True
    history = [list(alive)]
    for t in range(2, cfg.T + 1):
        n_act = active_entities(cfg, t)
        current = list(alive)
        died = [tr for tr, u in zip(current, rng.random(len(current))) if u < cfg.death_rate]
        for tr in died:
            del alive[tr]
        n_birth = int(rng.poisson(cfg.birth_rate * cfg.initial_count()))
        n_replace = int(rng.binomial(n_birth, cfg.replace_prob)) if n_birth else 0
        n_replace = min(n_replace, len(died))
        for k in range(n_birth):
            if k < n_replace:
                s, r, _ = died[k]
                o = int(rng.integers(n_act))
                trip = (s, r, o)
                if o == s or trip in alive:
                    continue
            else:
                trip = fresh(n_act, alive)
                if trip is None:
                    continue
            alive[trip] = True
        history.append(list(alive))

    quads = [(s, r, o, t) for t, facts in enumerate(history, start=1) for (s, r, o) in sorted(facts)]
    per_step = {t: {n: set() for n in SPLITS} for t in range(1, cfg.T + 1)}
    _assign_random_splits(quads, per_step, cfg.ratios, cfg.seed + 1)
    snaps = [
        Snapshot(t, *(np.array(sorted(per_step[t][n]), dtype=np.int64).reshape(-1, 3) for n in SPLITS))
        for t in range(1, cfg.T + 1)
    ]
    meta = {"synthetic": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}}
    return SnapshotSequence(
        snaps,
        [f"e{i}" for i in range(cfg.n_entities)],
        [f"r{i}" for i in range(cfg.n_relations)],
        meta,
    )
