"""Temporal KG domain types: quadruples, snapshots, wildcard patterns and
the set algebra used by the incremental protocol (added / deleted facts,
cumulative known entities).

Identity of a fact across time steps is the (s, r, o) triple; the time
attribute only says at which snapshot it was observed.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

SPLITS = ("train", "valid", "test")


class Quadruple(NamedTuple):
    s: int
    r: int
    o: int
    t: int

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.s, self.r, self.o)


class Pattern(enum.Enum):
    """The seven wildcard shapes over (s, r, o); True marks a concrete slot."""

    SRO = (True, True, True)
    SO = (True, False, True)
    SR = (True, True, False)
    RO = (False, True, True)
    S = (True, False, False)
    O = (False, False, True)
    R = (False, True, False)

    @property
    def label(self) -> str:
        return ",".join(c if keep else "*" for c, keep in zip("sro", self.value))

    @classmethod
    def from_label(cls, label: str) -> "Pattern":
        for p in cls:
            if p.label == label.replace(" ", ""):
                return p
        raise ValueError(f"unknown pattern {label!r}")

    def key(self, triple: Sequence[int]) -> tuple:
        return tuple(x if keep else None for x, keep in zip(triple, self.value))


def _as_triples(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.int64)
    if a.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected (n, 3) triple array, got shape {a.shape}")
    return a


def _sorted_unique(a: np.ndarray) -> np.ndarray:
    if len(a) == 0:
        return a
    return np.unique(a, axis=0)


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Facts observed at one time step, partitioned into train/valid/test."""

    t: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"time steps count from 1, got {self.t}")
        for name in SPLITS:
            object.__setattr__(self, name, _sorted_unique(_as_triples(getattr(self, name))))
            getattr(self, name).flags.writeable = False
        sizes = sum(len(getattr(self, n)) for n in SPLITS)
        if len(self.triples) != sizes:
            raise ValueError(f"splits of step {self.t} are not disjoint")

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @cached_property
    def facts(self) -> np.ndarray:
        """All of D^t as a sorted (n, 3) array."""
        return _sorted_unique(np.concatenate([self.train, self.valid, self.test]))

    @cached_property
    def triples(self) -> frozenset:
        return frozenset(map(tuple, np.concatenate([self.train, self.valid, self.test]).tolist()))

    @cached_property
    def entities(self) -> np.ndarray:
        f = self.facts
        return np.unique(np.concatenate([f[:, 0], f[:, 2]]))

    @cached_property
    def relations(self) -> np.ndarray:
        return np.unique(self.facts[:, 1])

    @cached_property
    def _objects(self) -> dict:
        out: dict = {}
        for s, r, o in self.triples:
            out.setdefault((s, r), set()).add(o)
        return out

    @cached_property
    def _subjects(self) -> dict:
        out: dict = {}
        for s, r, o in self.triples:
            out.setdefault((r, o), set()).add(s)
        return out

    def objects_of(self, s: int, r: int) -> set:
        return self._objects.get((s, r), set())

    def subjects_of(self, r: int, o: int) -> set:
        return self._subjects.get((r, o), set())

    def __len__(self) -> int:
        return len(self.triples)


@dataclass(eq=False)
class SnapshotSequence:
    """A temporal KG as snapshots D^1..D^T over a fixed global vocabulary."""

    snapshots: list[Snapshot]
    entity_names: list[str]
    relation_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, snap in enumerate(self.snapshots, start=1):
            if snap.t != i:
                raise ValueError(f"snapshot {i} carries t={snap.t}")
            f = snap.facts
            if len(f) and (f[:, [0, 2]].max() >= self.n_entities or f[:, 1].max() >= self.n_relations):
                raise ValueError(f"step {i} references ids outside the vocabulary")
            if len(f) and f.min() < 0:
                raise ValueError(f"negative id at step {i}")

    @property
    def T(self) -> int:
        return len(self.snapshots)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise IndexError(f"time step {t} outside 1..{self.T}")

    def __getitem__(self, t: int) -> Snapshot:
        self._check_t(t)
        return self.snapshots[t - 1]

    def steps(self) -> range:
        return range(1, self.T + 1)

    @cached_property
    def _known_masks(self) -> np.ndarray:
        masks = np.zeros((self.T + 1, self.n_entities), dtype=bool)
        for snap in self.snapshots:
            masks[snap.t] = masks[snap.t - 1]
            masks[snap.t, snap.entities] = True
        masks.flags.writeable = False
        return masks

    @cached_property
    def _known_rel_masks(self) -> np.ndarray:
        masks = np.zeros((self.T + 1, self.n_relations), dtype=bool)
        for snap in self.snapshots:
            masks[snap.t] = masks[snap.t - 1]
            masks[snap.t, snap.relations] = True
        masks.flags.writeable = False
        return masks

    def known_mask(self, t: int) -> np.ndarray:
        """Boolean mask over entity ids for E^t_known (t=0 gives all False)."""
        if t != 0:
            self._check_t(t)
        return self._known_masks[t]

    def known_relation_mask(self, t: int) -> np.ndarray:
        if t != 0:
            self._check_t(t)
        return self._known_rel_masks[t]

    def known_array(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.known_mask(t))

    def total_facts(self) -> int:
        return sum(len(s) for s in self.snapshots)

    def split_sizes(self) -> dict[str, int]:
        return {n: sum(len(s.split(n)) for s in self.snapshots) for n in SPLITS}

    def quadruples(self, split: str, steps: Iterable[int]) -> np.ndarray:
        """Stack the given split of several steps into an (n, 4) array."""
        parts = []
        for t in steps:
            a = self[t].split(split)
            parts.append(np.column_stack([a, np.full(len(a), t, dtype=np.int64)]))
        if not parts:
            return np.zeros((0, 4), dtype=np.int64)
        return np.concatenate(parts).astype(np.int64)


def added_facts(seq: SnapshotSequence, t: int) -> set[Quadruple]:
    """Facts of D^t whose triple is absent from D^{t-1}; all of D^1 at t=1."""
    cur = seq[t].triples
    prev = seq[t - 1].triples if t > 1 else frozenset()
    return {Quadruple(s, r, o, t) for (s, r, o) in cur - prev}


def deleted_facts(buffer_triples: Iterable[tuple], current: Snapshot, t: int) -> set[Quadruple]:
    """Buffer triples that are no longer observed at step t, stamped with t."""
    cur = current.triples
    return {Quadruple(s, r, o, t) for (s, r, o) in set(map(tuple, buffer_triples)) if (s, r, o) not in cur}


def known_entities(seq: SnapshotSequence, t: int) -> set[int]:
    seq._check_t(t)
    return set(seq.known_array(t).tolist())


# -- snapshot cache -----------------------------------------------------------

CACHE_MAGIC = b"TKGSNAP\x00"
CACHE_VERSION = 1


class CacheVersionError(ValueError):
    pass


def save_sequence(seq: SnapshotSequence, path: str | Path) -> None:
    """Write the portable snapshot cache (atomic replace)."""
    path = Path(path)
    header = json.dumps(
        {
            "T": seq.T,
            "entities": seq.entity_names,
            "relations": seq.relation_names,
            "meta": seq.meta,
        },
        sort_keys=True,
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", CACHE_VERSION, len(header)))
        fh.write(header)
        for snap in seq.snapshots:
            for name in SPLITS:
                a = np.ascontiguousarray(snap.split(name), dtype="<i8")
                fh.write(struct.pack("<Q", len(a)))
                fh.write(a.tobytes())
    tmp.replace(path)


def load_sequence(path: str | Path) -> SnapshotSequence:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a snapshot cache")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CACHE_VERSION:
        raise CacheVersionError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    off = 16
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    snaps = []
    for t in range(1, header["T"] + 1):
        parts = {}
        for name in SPLITS:
            (n,) = struct.unpack_from("<Q", data, off)
            off += 8
            parts[name] = np.frombuffer(data, dtype="<i8", count=3 * n, offset=off).reshape(n, 3).astype(np.int64)
            off += 24 * n
        snaps.append(Snapshot(t, **parts))
    return SnapshotSequence(snaps, header["entities"], header["relations"], header.get("meta", {}))
