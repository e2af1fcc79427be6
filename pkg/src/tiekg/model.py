"""Shallow time-aware KG embedding models with hand-written gradients.

Encoders map (entity, t) to a time-dependent vector:

* ``de``   diachronic: the first ceil(gamma*d) lanes are E[i]*sin(W[i]*t + B[i])
* ``hyte`` projection onto the unit-normal hyperplane H[t-1] (entities and
  relations alike)
* ``static`` no time dependence

Decoders score (z_s, z_r, z_o): ``transe`` (-L1 distance), ``distmult`` and
``complex`` (first half real lanes, second half imaginary lanes).

Gradients are returned as :class:`SparseGrad`, keyed by parameter name and
holding only the rows a batch touched.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

ENCODERS = ("de", "hyte", "static")
DECODERS = ("transe", "distmult", "complex")
DEFAULT_DECODER = {"de": "complex", "hyte": "transe", "static": "distmult"}

OBJECT, SUBJECT = "object", "subject"


class SparseGrad:
    """Row-sparse gradient: name -> (sorted unique rows, row values)."""

    def __init__(self, parts: dict | None = None):
        self.parts: dict[str, tuple[np.ndarray, np.ndarray]] = dict(parts or {})

    @classmethod
    def from_rows(cls, name: str, rows: np.ndarray, vals: np.ndarray) -> "SparseGrad":
        g = cls()
        g.add_rows(name, rows, vals)
        return g

    def add_rows(self, name: str, rows: np.ndarray, vals: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).reshape(len(rows), -1)
        if name in self.parts:
            r0, v0 = self.parts[name]
            rows = np.concatenate([r0, rows])
            vals = np.concatenate([v0, vals])
        uniq, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq), vals.shape[1]))
        np.add.at(acc, inv.ravel(), vals)
        self.parts[name] = (uniq, acc)

    def __iadd__(self, other: "SparseGrad") -> "SparseGrad":
        for name, (rows, vals) in other.parts.items():
            self.add_rows(name, rows, vals)
        return self

    def __add__(self, other: "SparseGrad") -> "SparseGrad":
        out = self.copy()
        out += other
        return out

    def scaled(self, c: float) -> "SparseGrad":
        return SparseGrad({k: (r, v * c) for k, (r, v) in self.parts.items()})

    def copy(self) -> "SparseGrad":
        return SparseGrad({k: (r.copy(), v.copy()) for k, (r, v) in self.parts.items()})

    def dense(self, name: str, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape)
        if name in self.parts:
            rows, vals = self.parts[name]
            out[rows] = vals
        return out

    def items(self):
        return self.parts.items()

    def __contains__(self, name):
        return name in self.parts

    def __getitem__(self, name):
        return self.parts[name]

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for _, v in self.parts.values())

    def __repr__(self):
        return f"SparseGrad({ {k: len(r) for k, (r, _) in self.parts.items()} })"


@dataclass
class ParameterStore:
    """theta: flat embedding matrices plus the rows known as of the last step."""

    encoder: str
    decoder: str
    dim: int
    n_steps: int
    gamma_de: float
    params: dict[str, np.ndarray]
    known_entities: np.ndarray
    known_relations: np.ndarray
    known_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.dim <= 0:
            raise ValueError("embedding dimension must be positive")
        if self.decoder == "complex" and self.dim % 2:
            raise ValueError("complex decoder needs an even dimension")
        if not 0.0 <= self.gamma_de <= 1.0:
            raise ValueError("gamma_de must lie in [0, 1]")

    @property
    def n_entities(self) -> int:
        return self.params["E"].shape[0]

    @property
    def n_relations(self) -> int:
        return self.params["R"].shape[0]

    @property
    def n_temporal(self) -> int:
        return math.ceil(self.gamma_de * self.dim) if self.encoder == "de" else 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            self.encoder,
            self.decoder,
            self.dim,
            self.n_steps,
            self.gamma_de,
            {k: v.copy() for k, v in self.params.items()},
            self.known_entities.copy(),
            self.known_relations.copy(),
            self.known_steps,
            self.seed,
        )

    def freeze(self) -> "ParameterStore":
        """Mark every array read-only; later writes raise."""
        for v in self.params.values():
            v.flags.writeable = False
        self.known_entities.flags.writeable = False
        self.known_relations.flags.writeable = False
        return self

    def known_rows(self, name: str) -> np.ndarray:
        if name in ("E", "W", "B"):
            return np.flatnonzero(self.known_entities)
        if name == "R":
            return np.flatnonzero(self.known_relations)
        if name == "H":
            return np.arange(self.known_steps)
        raise KeyError(name)

    def equals(self, other: "ParameterStore") -> bool:
        return (
            self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
            and np.array_equal(self.known_entities, other.known_entities)
            and np.array_equal(self.known_relations, other.known_relations)
            and self.known_steps == other.known_steps
        )


def init_bound(dim: int) -> float:
    return math.sqrt(12.0 / dim)


def create_store(
    n_entities: int,
    n_relations: int,
    n_steps: int,
    *,
    dim: int = 128,
    encoder: str = "de",
    decoder: str | None = None,
    gamma_de: float = 0.5,
    rng: np.random.Generator,
    seed: int = 0,
) -> ParameterStore:
    decoder = decoder or DEFAULT_DECODER[encoder]
    bound = init_bound(dim)
    params = {
        "E": rng.uniform(-bound, bound, (n_entities, dim)),
        "R": rng.uniform(-bound, bound, (n_relations, dim)),
    }
    if encoder == "de":
        k = math.ceil(gamma_de * dim)
        params["W"] = rng.uniform(-bound, bound, (n_entities, k))
        params["B"] = rng.uniform(-bound, bound, (n_entities, k))
    elif encoder == "hyte":
        params["H"] = _unit_rows(rng.uniform(-bound, bound, (n_steps, dim)))
    return ParameterStore(
        encoder,
        decoder,
        dim,
        n_steps,
        gamma_de,
        params,
        np.zeros(n_entities, dtype=bool),
        np.zeros(n_relations, dtype=bool),
        0,
        seed,
    )


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return a / n


def init_step(
    store_prev: ParameterStore,
    known_prev: Iterable[int] | np.ndarray,
    rng: np.random.Generator,
    *,
    known_relations: Iterable[int] | np.ndarray | None = None,
    known_steps: int | None = None,
) -> ParameterStore:
    """theta^t from theta^{t-1}: known rows copied, every other row redrawn
    from uniform(+-sqrt(12/d)). Relation rows and hyperplanes default to the
    previous store's bookkeeping."""
    out = store_prev.copy()
    for v in out.params.values():
        v.flags.writeable = True
    ent_mask = _as_mask(known_prev, out.n_entities)
    rel_mask = out.known_relations.copy() if known_relations is None else _as_mask(known_relations, out.n_relations)
    n_steps_known = out.known_steps if known_steps is None else known_steps
    bound = init_bound(out.dim)
    for name, mask in (("E", ent_mask), ("W", ent_mask), ("B", ent_mask), ("R", rel_mask)):
        if name not in out.params:
            continue
        new = np.flatnonzero(~mask)
        if len(new):
            out.params[name][new] = rng.uniform(-bound, bound, (len(new), out.params[name].shape[1]))
    if "H" in out.params and n_steps_known < out.n_steps:
        h = out.params["H"]
        h[n_steps_known:] = _unit_rows(rng.uniform(-bound, bound, (out.n_steps - n_steps_known, out.dim)))
    out.known_entities = ent_mask.copy()
    out.known_relations = rel_mask.copy()
    out.known_steps = n_steps_known
    return out


def _as_mask(ids, n: int) -> np.ndarray:
    a = np.asarray(ids if not isinstance(ids, (set, frozenset)) else sorted(ids))
    if a.dtype == bool:
        if a.shape != (n,):
            raise ValueError("mask has the wrong length")
        return a.copy()
    mask = np.zeros(n, dtype=bool)
    mask[a.astype(np.int64)] = True
    return mask


# -- encoders -------------------------------------------------------------------


def _encode_entities(store: ParameterStore, ids: np.ndarray, t: np.ndarray):
    E = store.params["E"]
    x = E[ids]
    if store.encoder == "de":
        k = store.n_temporal
        if k == 0:
            return x, ("static", ids)
        arg = store.params["W"][ids] * t[:, None] + store.params["B"][ids]
        sn, cs = np.sin(arg), np.cos(arg)
        z = x.copy()
        z[:, :k] *= sn
        return z, ("de", ids, t, sn, cs, x[:, :k])
    if store.encoder == "hyte":
        h = store.params["H"][t - 1]
        hx = np.einsum("ij,ij->i", h, x)
        return x - hx[:, None] * h, ("hyte", ids, t, h, x, hx)
    return x, ("static", ids)


def _encode_relations(store: ParameterStore, ids: np.ndarray, t: np.ndarray):
    x = store.params["R"][ids]
    if store.encoder == "hyte":
        h = store.params["H"][t - 1]
        hx = np.einsum("ij,ij->i", h, x)
        return x - hx[:, None] * h, ("hyte", ids, t, h, x, hx)
    return x, ("static", ids)


def _encoder_backward(ctx, dz: np.ndarray, table: str, grad: SparseGrad) -> None:
    kind, ids = ctx[0], ctx[1]
    if kind == "static":
        grad.add_rows(table, ids, dz)
    elif kind == "de":
        _, ids, t, sn, cs, xk = ctx
        k = sn.shape[1]
        dx = dz.copy()
        dx[:, :k] *= sn
        grad.add_rows("E", ids, dx)
        dcore = dz[:, :k] * xk * cs
        grad.add_rows("W", ids, dcore * t[:, None])
        grad.add_rows("B", ids, dcore)
    else:
        _, ids, t, h, x, hx = ctx
        hdz = np.einsum("ij,ij->i", h, dz)
        grad.add_rows(table, ids, dz - hdz[:, None] * h)
        grad.add_rows("H", t - 1, -(hx[:, None] * dz + hdz[:, None] * x))


def encode_entity(store: ParameterStore, i: int, t: int) -> np.ndarray:
    z, _ = _encode_entities(store, np.array([i]), np.array([t]))
    return z[0]


def encode_relation(store: ParameterStore, r: int, t: int) -> np.ndarray:
    z, _ = _encode_relations(store, np.array([r]), np.array([t]))
    return z[0]


# -- decoders -------------------------------------------------------------------


def _decode(decoder: str, zs, zr, zo):
    if decoder == "transe":
        a = zs + zr - zo
        return -np.abs(a).sum(axis=-1), a
    if decoder == "distmult":
        return (zs * zr * zo).sum(axis=-1), None
    h = zs.shape[-1] // 2
    sre, sim = zs[..., :h], zs[..., h:]
    rre, rim = zr[..., :h], zr[..., h:]
    ore, oim = zo[..., :h], zo[..., h:]
    phi = (sre * rre * ore + sim * rre * oim + sre * rim * oim - sim * rim * ore).sum(axis=-1)
    return phi, None


def _decode_backward(decoder: str, zs, zr, zo, aux, dphi):
    d = dphi[:, None]
    if decoder == "transe":
        sg = np.sign(aux) * d
        return -sg, -sg, sg
    if decoder == "distmult":
        return zr * zo * d, zs * zo * d, zs * zr * d
    h = zs.shape[-1] // 2
    sre, sim = zs[:, :h], zs[:, h:]
    rre, rim = zr[:, :h], zr[:, h:]
    ore, oim = zo[:, :h], zo[:, h:]
    dzs = np.concatenate([rre * ore + rim * oim, rre * oim - rim * ore], axis=1) * d
    dzr = np.concatenate([sre * ore + sim * oim, sre * oim - sim * ore], axis=1) * d
    dzo = np.concatenate([sre * rre - sim * rim, sim * rre + sre * rim], axis=1) * d
    return dzs, dzr, dzo


# -- scoring ----------------------------------------------------------------------


@dataclass
class ScoreContext:
    zs: np.ndarray
    zr: np.ndarray
    zo: np.ndarray
    aux: np.ndarray | None
    cs: tuple
    cr: tuple
    co: tuple


def forward(store: ParameterStore, s, r, o, t) -> tuple[np.ndarray, ScoreContext]:
    """Scores phi(s, r, o, t) for aligned index arrays plus a backward context."""
    s, r, o, t = (np.asarray(a, dtype=np.int64).ravel() for a in (s, r, o, t))
    zs, cs = _encode_entities(store, s, t)
    zo, co = _encode_entities(store, o, t)
    zr, cr = _encode_relations(store, r, t)
    phi, aux = _decode(store.decoder, zs, zr, zo)
    return phi, ScoreContext(zs, zr, zo, aux, cs, cr, co)


def backward(store: ParameterStore, ctx: ScoreContext, dphi: np.ndarray) -> SparseGrad:
    """Chain dL/dphi through decoder and encoders into row gradients."""
    dphi = np.asarray(dphi, dtype=np.float64).ravel()
    dzs, dzr, dzo = _decode_backward(store.decoder, ctx.zs, ctx.zr, ctx.zo, ctx.aux, dphi)
    grad = SparseGrad()
    _encoder_backward(ctx.cs, dzs, "E", grad)
    _encoder_backward(ctx.co, dzo, "E", grad)
    _encoder_backward(ctx.cr, dzr, "R", grad)
    if not grad.is_finite():
        raise FloatingPointError("non-finite gradient")
    return grad


def score(store: ParameterStore, s: int, r: int, o: int, t: int) -> float:
    phi, _ = forward(store, [s], [r], [o], [t])
    return float(phi[0])


def score_matrix(store: ParameterStore, anchors, rels, t: int, candidates, direction: str = OBJECT) -> np.ndarray:
    """(n_queries, n_candidates) scores for queries sharing one time step.

    Object direction: anchors are subjects and candidates fill the object slot;
    subject direction: anchors are objects and candidates fill the subject slot.
    """
    anchors = np.asarray(anchors, dtype=np.int64).ravel()
    rels = np.asarray(rels, dtype=np.int64).ravel()
    candidates = np.asarray(candidates, dtype=np.int64).ravel()
    tq = np.full(len(anchors), t, dtype=np.int64)
    za, _ = _encode_entities(store, anchors, tq)
    zr, _ = _encode_relations(store, rels, tq)
    zc, _ = _encode_entities(store, candidates, np.full(len(candidates), t, dtype=np.int64))
    dec = store.decoder
    if dec == "transe":
        out = np.empty((len(anchors), len(candidates)))
        step = max(1, (1 << 22) // max(1, len(candidates) * store.dim))
        for i in range(0, len(anchors), step):
            if direction == OBJECT:
                q = (za[i : i + step] + zr[i : i + step])[:, None, :]
                out[i : i + step] = -np.abs(q - zc[None]).sum(-1)
            else:
                q = (zr[i : i + step] - za[i : i + step])[:, None, :]
                out[i : i + step] = -np.abs(zc[None] + q).sum(-1)
        return out
    if dec == "distmult":
        return (za * zr) @ zc.T
    h = store.dim // 2
    are, aim = za[:, :h], za[:, h:]
    rre, rim = zr[:, :h], zr[:, h:]
    if direction == OBJECT:
        q = np.concatenate([are * rre - aim * rim, aim * rre + are * rim], axis=1)
    else:
        q = np.concatenate([rre * are + rim * aim, rre * aim - rim * are], axis=1)
    return q @ zc.T


def score_batch(store: ParameterStore, s: int, r: int, t: int, candidates, direction: str = OBJECT) -> np.ndarray:
    """Scores of one query against candidates. For subject queries `s` holds
    the fixed object."""
    return score_matrix(store, [s], [r], t, candidates, direction)[0]


# -- optimizers -----------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParameterStore, grad: SparseGrad) -> None:
        for name, (rows, vals) in grad.items():
            store.params[name][rows] -= self.lr * vals
        _post_update(store, grad)

    def state_dict(self):
        return {}


class Adam:
    """Lazy Adam: moments and bias correction advance only on touched rows."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.n: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore, grad: SparseGrad) -> None:
        for name, (rows, vals) in grad.items():
            p = store.params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.n[name] = np.zeros(p.shape[0], dtype=np.int64)
            m, v, n = self.m[name], self.v[name], self.n[name]
            n[rows] += 1
            m[rows] = self.b1 * m[rows] + (1 - self.b1) * vals
            v[rows] = self.b2 * v[rows] + (1 - self.b2) * vals * vals
            c1 = (1 - self.b1 ** n[rows])[:, None]
            c2 = (1 - self.b2 ** n[rows])[:, None]
            p[rows] -= self.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)
        _post_update(store, grad)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def _post_update(store: ParameterStore, grad: SparseGrad) -> None:
    if "H" in grad:
        rows = grad["H"][0]
        store.params["H"][rows] = _unit_rows(store.params["H"][rows])
    for name, (rows, _) in grad.items():
        if not np.isfinite(store.params[name][rows]).all():
            raise FloatingPointError(f"non-finite values in {name} after update")


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"TIEPARAM"
CKPT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def save_store(store: ParameterStore, path: str | Path) -> None:
    """Versioned binary checkpoint: JSON header then little-endian float64
    matrices in row-major order, then the packed known-row bitmaps."""
    path = Path(path)
    names = sorted(store.params)
    header = json.dumps(
        {
            "encoder": store.encoder,
            "decoder": store.decoder,
            "dim": store.dim,
            "n_steps": store.n_steps,
            "gamma_de": store.gamma_de,
            "seed": store.seed,
            "known_steps": store.known_steps,
            "n_entities": store.n_entities,
            "n_relations": store.n_relations,
            "matrices": [[n, list(store.params[n].shape)] for n in names],
        },
        sort_keys=True,
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(store.params[n], dtype="<f8").tobytes())
        fh.write(np.packbits(store.known_entities.astype(np.uint8)).tobytes())
        fh.write(np.packbits(store.known_relations.astype(np.uint8)).tobytes())
    tmp.replace(path)


def load_store(path: str | Path) -> ParameterStore:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 16
    h = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for name, shape in h["matrices"]:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    ne, nr = h["n_entities"], h["n_relations"]
    ke = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=(ne + 7) // 8, offset=off))[:ne].astype(bool)
    off += (ne + 7) // 8
    kr = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=(nr + 7) // 8, offset=off))[:nr].astype(bool)
    return ParameterStore(
        h["encoder"], h["decoder"], h["dim"], h["n_steps"], h["gamma_de"], params, ke, kr, h["known_steps"], h["seed"]
    )
