from __future__ import annotations

import numpy as np

from tiekg.core import Snapshot, SnapshotSequence
from tiekg.model import create_store


def make_seq(steps, n_entities=None, n_relations=None):
    """Build a sequence from per-step facts. Each step is either a list of
    triples (all train) or a dict split -> list of triples."""
    snaps = []
    ents, rels = 0, 0
    for t, step in enumerate(steps, start=1):
        if not isinstance(step, dict):
            step = {"train": step}
        parts = {n: np.array(step.get(n, []), dtype=np.int64).reshape(-1, 3) for n in ("train", "valid", "test")}
        for a in parts.values():
            if len(a):
                ents = max(ents, int(a[:, [0, 2]].max()) + 1)
                rels = max(rels, int(a[:, 1].max()) + 1)
        snaps.append(Snapshot(t, parts["train"], parts["valid"], parts["test"]))
    n_entities = n_entities or ents
    n_relations = n_relations or rels
    return SnapshotSequence(snaps, [f"e{i}" for i in range(n_entities)], [f"r{i}" for i in range(n_relations)])


def random_store(encoder="de", decoder=None, dim=4, n_entities=5, n_relations=3, n_steps=4, seed=0, gamma_de=0.5):
    rng = np.random.default_rng(seed)
    st = create_store(n_entities, n_relations, n_steps, dim=dim, encoder=encoder, decoder=decoder,
                      gamma_de=gamma_de, rng=rng, seed=seed)
    st.known_entities[:] = True
    st.known_relations[:] = True
    st.known_steps = n_steps
    return st


def random_facts(rng, n, n_entities, n_relations, n_steps):
    s = rng.integers(n_entities, size=n)
    o = (s + 1 + rng.integers(n_entities - 1, size=n)) % n_entities
    return np.column_stack([s, rng.integers(n_relations, size=n), o, rng.integers(1, n_steps + 1, size=n)]).astype(np.int64)
