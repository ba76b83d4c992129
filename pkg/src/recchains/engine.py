"""Recursive evidence-chain embedding generation.

A request for a non-prototype embedding is answered by averaging a generator
net over the requester's (embedding, rating) evidence, where each evidence
embedding is itself requested one level deeper.  Generation happens in two
phases:

* planning walks the recursion exactly as the depth-first procedure would
  (max depth, cycle blocking, caching, evidence limits, prototype
  prioritization) and records, per generated embedding, which evidence it
  aggregates;
* materialization evaluates the recorded nodes bottom-up on a tape, one
  batched net application per (height, side), so the result is differentiable
  with respect to the prototype tables and both nets.

Both phases share an :class:`EvidenceContext`, whose cache lives until the
context is dropped (one context per gradient update).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nets import HIDDEN_WIDTH, MLPParams, init_params, mlp_forward, mlp_leaves
from .store import PrototypeSet, RatingsStore

USER, ITEM = 0, 1

# "normalized": (r - train mean) / scale range; "raw": the rating itself
RATING_ENCODINGS = ("normalized", "raw")


@dataclass
class Controls:
    max_depth: int = 4
    evidence_limit: int | None = 80  # None: use every candidate
    cycle_blocking: bool = True
    caching: bool = True
    negative_caching: bool = True
    prototype_prioritization: bool = True
    telescoping: bool = True

    def budget(self, depth: int) -> int | None:
        if self.evidence_limit is None:
            return None
        if not self.telescoping:
            return self.evidence_limit
        # generation only happens at depth < max_depth, where a zero budget would cut recursion short
        return max(1, self.evidence_limit >> depth)


@dataclass
class GenCounters:
    embeddings_generated: int = 0
    cache_hits: int = 0
    failed_requests: int = 0
    requests: int = 0
    max_depth_seen: int = 0
    evidence_total: dict[int, int] = field(default_factory=dict)
    evidence_max: dict[int, int] = field(default_factory=dict)

    def record_evidence(self, depth: int, n: int) -> None:
        self.evidence_total[depth] = self.evidence_total.get(depth, 0) + n
        if n > self.evidence_max.get(depth, -1):
            self.evidence_max[depth] = n

    def merge(self, other: "GenCounters") -> None:
        self.embeddings_generated += other.embeddings_generated
        self.cache_hits += other.cache_hits
        self.failed_requests += other.failed_requests
        self.requests += other.requests
        self.max_depth_seen = max(self.max_depth_seen, other.max_depth_seen)
        for d, n in other.evidence_total.items():
            self.evidence_total[d] = self.evidence_total.get(d, 0) + n
        for d, n in other.evidence_max.items():
            self.evidence_max[d] = max(self.evidence_max.get(d, 0), n)


class GenNode:
    """A planned embedding generation: evidence refs are prototype rows (int)
    or other GenNodes of the opposite side."""

    __slots__ = ("side", "id", "depth", "children", "ratings", "height", "row")

    def __init__(self, side, id_, depth, children, ratings):
        self.side = side
        self.id = id_
        self.depth = depth
        self.children = children
        self.ratings = ratings
        self.height = 1 + max((c.height for c in children if type(c) is GenNode), default=0)
        self.row = -1


class ProtoRef:
    __slots__ = ("side", "row")
    height = 0

    def __init__(self, side, row):
        self.side = side
        self.row = row


class RecModel:
    """Trainable state: prototype tables, two generator nets, control flags.

    ``rating_mean`` (the fallback prediction and the centre of the rating
    encoding) and ``rating_range`` come from the training data the model was
    built for.
    """

    def __init__(
        self,
        protos: PrototypeSet,
        phi: MLPParams,
        psi: MLPParams,
        user_protos: np.ndarray,
        item_protos: np.ndarray,
        rating_mean: float,
        rating_scale: tuple[float, float],
        controls: Controls | None = None,
        rating_encoding: str = "raw",
    ):
        if rating_encoding not in RATING_ENCODINGS:
            raise ValueError(f"unknown rating encoding {rating_encoding!r}")
        if user_protos.shape[0] != len(protos.users) or item_protos.shape[0] != len(protos.items):
            raise ValueError("prototype tables do not match the prototype set")
        self.protos = protos
        self.phi = phi
        self.psi = psi
        self.user_protos = user_protos
        self.item_protos = item_protos
        self.rating_mean = float(rating_mean)
        self.rating_scale = (float(rating_scale[0]), float(rating_scale[1]))
        self.controls = controls or Controls()
        self.rating_encoding = rating_encoding

    @classmethod
    def initialize(
        cls,
        store: RatingsStore,
        protos: PrototypeSet,
        k: int = 100,
        seed: int = 0,
        controls: Controls | None = None,
        hidden: int = HIDDEN_WIDTH,
        rating_encoding: str = "raw",
    ) -> "RecModel":
        phi, psi, u, v = init_params(k, seed, len(protos.users), len(protos.items), hidden)
        return cls(protos, phi, psi, u, v, store.mean_rating, store.rating_scale, controls, rating_encoding)

    @property
    def k(self) -> int:
        return self.user_protos.shape[1]

    @property
    def rating_range(self) -> float:
        lo, hi = self.rating_scale
        return (hi - lo) or 1.0

    def named_params(self) -> dict[str, np.ndarray]:
        out = {"u": self.user_protos, "v": self.item_protos}
        out.update(self.phi.named("phi"))
        out.update(self.psi.named("psi"))
        return out

    def num_params(self) -> int:
        return int(sum(p.size for p in self.named_params().values()))

    def encode_rating(self, r):
        """The scalar appended to an evidence embedding before a net sees it."""
        r = np.asarray(r, dtype=np.float64)
        if self.rating_encoding == "raw":
            return r
        return (r - self.rating_mean) / self.rating_range


class _Adjacency:
    """Per-store arrays the planner needs, cached on the (model, store) pair."""

    def __init__(self, model: RecModel, store: RatingsStore):
        protos = model.protos
        if protos.num_users != store.num_users or protos.num_items != store.num_items:
            raise ValueError("prototype set and store disagree on dimensions")
        self.ids = (store.user_items, store.item_users)
        self.enc = (
            [model.encode_rating(r) for r in store.user_ratings],
            [model.encode_rating(r) for r in store.item_ratings],
        )
        # counterpart prototype row (or -1) for every neighbour entry
        self.proto_row = (
            [protos.item_row[c] for c in store.user_items],
            [protos.user_row[c] for c in store.item_users],
        )
        self.own_row = (protos.user_row, protos.item_row)


class EvidenceContext:
    """Recursion state for one gradient update (or one evaluation pass)."""

    def __init__(self, engine: "RecEngine", rng: np.random.Generator, requires_grad: bool = True, dtype=np.float64):
        self.engine = engine
        self.rng = rng
        self.depth = 0
        self.active = ({}, {})  # per side: id -> number of open generations
        self.cache: dict[tuple[int, int], GenNode | None] = {}
        self.counters = GenCounters()
        self.pending: list[GenNode] = []
        self.tape = ad.Tape(dtype=dtype)
        model = engine.model
        self.user_table = self.tape.leaf(model.user_protos, "u", requires_grad)
        self.item_table = self.tape.leaf(model.item_protos, "v", requires_grad)
        self.nets = (
            mlp_leaves_maybe(self.tape, model.phi, "phi", requires_grad),
            mlp_leaves_maybe(self.tape, model.psi, "psi", requires_grad),
        )
        self.blocks: tuple[list[ad.Tensor], list[ad.Tensor]] = ([self.user_table], [self.item_table])
        self.bank_rows = [len(model.protos.users), len(model.protos.items)]
        self._bank_cache: list[ad.Tensor | None] = [None, None]

    def clear_cache(self) -> None:
        """Forget generated embeddings; counters are kept."""
        self.cache.clear()

    @property
    def active_users(self):
        return set(self.active[USER])

    @property
    def active_items(self):
        return set(self.active[ITEM])

    def bank(self, side: int) -> ad.Tensor:
        if self._bank_cache[side] is None:
            blocks = self.blocks[side]
            self._bank_cache[side] = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
        return self._bank_cache[side]


def mlp_leaves_maybe(tape, params, prefix, requires_grad):
    if requires_grad:
        return mlp_leaves(tape, params, prefix)
    return [
        (tape.leaf(w, f"{prefix}.w{n}", False), tape.leaf(b, f"{prefix}.b{n}", False))
        for n, (w, b) in enumerate(zip(params.weights, params.biases))
    ]


class RecEngine:
    """Binds a :class:`RecModel` to the ratings it draws evidence from."""

    def __init__(self, model: RecModel, store: RatingsStore):
        self.model = model
        self.store = store
        self.adj = _Adjacency(model, store)

    def new_context(self, rng=0, requires_grad: bool = True, dtype=np.float64) -> EvidenceContext:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        return EvidenceContext(self, rng, requires_grad, dtype)

    # planning

    def select_evidence(self, side: int, node_id: int, ctx: EvidenceContext, depth: int) -> np.ndarray:
        """Positions into ``node_id``'s neighbour list chosen as evidence."""
        ctl = self.model.controls
        ids = self.adj.ids[side][node_id]
        n = len(ids)
        keep = None
        if ctl.cycle_blocking and ctx.active[1 - side]:
            # the opposite side's open generations are our ancestors on the stack
            blocked = np.fromiter(ctx.active[1 - side], dtype=np.int64)
            pos = np.searchsorted(ids, blocked)
            hit = pos < n
            pos = pos[hit][ids[pos[hit]] == blocked[hit]]
            if len(pos):
                keep = np.ones(n, dtype=bool)
                keep[pos] = False
        cand = np.arange(n) if keep is None else np.nonzero(keep)[0]
        b = ctl.budget(depth)
        rng = ctx.rng
        if ctl.prototype_prioritization:
            is_proto = self.adj.proto_row[side][node_id][cand] >= 0
            protos, others = cand[is_proto], cand[~is_proto]
            if b is None:
                return cand
            if len(protos) >= b:
                chosen = protos if len(protos) == b else rng.choice(protos, b, replace=False)
            else:
                rest = b - len(protos)
                fill = others if len(others) <= rest else rng.choice(others, rest, replace=False)
                chosen = np.concatenate([protos, fill])
            return np.sort(chosen)
        if b is None or len(cand) <= b:
            return cand
        return np.sort(rng.choice(cand, b, replace=False))

    def request(self, side: int, node_id: int, ctx: EvidenceContext, depth: int):
        """Plan the embedding of ``(side, node_id)`` at ``depth``.

        Returns a :class:`ProtoRef`, a :class:`GenNode`, or ``None``.
        """
        ctl = self.model.controls
        c = ctx.counters
        c.requests += 1
        if depth > c.max_depth_seen:
            c.max_depth_seen = depth
        assert depth <= ctl.max_depth, "recursion exceeded max depth"
        row = self.adj.own_row[side][node_id]
        if row >= 0:
            return ProtoRef(side, int(row))
        if depth >= ctl.max_depth:
            c.failed_requests += 1
            return None
        key = (side, node_id)
        if ctl.caching and key in ctx.cache:
            c.cache_hits += 1
            return ctx.cache[key]
        active = ctx.active[side]
        if ctl.cycle_blocking:
            assert active.get(node_id, 0) == 0, f"cycle blocking let {key} re-enter the stack"
        c.embeddings_generated += 1
        chosen = self.select_evidence(side, node_id, ctx, depth)
        c.record_evidence(depth, len(chosen))
        ids = self.adj.ids[side][node_id]
        enc = self.adj.enc[side][node_id]
        active[node_id] = active.get(node_id, 0) + 1
        saved_depth, ctx.depth = ctx.depth, depth
        children, ratings = [], []
        try:
            for p in chosen.tolist():
                ref = self.request(1 - side, int(ids[p]), ctx, depth + 1)
                if ref is None:
                    continue
                children.append(ref.row if type(ref) is ProtoRef else ref)
                ratings.append(enc[p])
        finally:
            active[node_id] -= 1
            if not active[node_id]:
                del active[node_id]
            ctx.depth = saved_depth
        if not children:
            c.failed_requests += 1
            if ctl.caching and ctl.negative_caching:
                ctx.cache[key] = None
            return None
        node = GenNode(side, node_id, depth, children, ratings)
        ctx.pending.append(node)
        if ctl.caching:
            ctx.cache[key] = node
        return node

    # materialization

    def materialize(self, ctx: EvidenceContext) -> None:
        """Evaluate every pending node, lowest height first."""
        if not ctx.pending:
            return
        by_level: dict[tuple[int, int], list[GenNode]] = {}
        for node in ctx.pending:
            by_level.setdefault((node.height, node.side), []).append(node)
        ctx.pending = []
        tape = ctx.tape
        for height in sorted({h for h, _ in by_level}):
            for side in (USER, ITEM):
                nodes = by_level.get((height, side))
                if not nodes:
                    continue
                idx, enc, seg = [], [], []
                for s, node in enumerate(nodes):
                    for ch in node.children:
                        idx.append(ch if type(ch) is int else ch.row)
                    enc.extend(node.ratings)
                    seg.extend([s] * len(node.children))
                evidence = ad.gather(ctx.bank(1 - side), idx)
                ratings = tape.constant(np.asarray(enc, dtype=tape.dtype)[:, None])
                x = ad.concat([evidence, ratings], axis=1)
                out = mlp_forward(ctx.nets[side], x)
                emb = ad.segment_mean(out, seg, len(nodes))
                offset = ctx.bank_rows[side]
                for s, node in enumerate(nodes):
                    node.row = offset + s
                ctx.blocks[side].append(emb)
                ctx.bank_rows[side] += len(nodes)
                ctx._bank_cache[side] = None

    def embedding(self, ref, ctx: EvidenceContext) -> ad.Tensor | None:
        if ref is None:
            return None
        self.materialize(ctx)
        return ad.reshape(ad.gather(ctx.bank(ref.side), [ref.row]), (self.model.k,))

    def user_vector(self, i: int, ctx: EvidenceContext) -> ad.Tensor | None:
        return self.embedding(self.request(USER, i, ctx, ctx.depth), ctx)

    def item_vector(self, j: int, ctx: EvidenceContext) -> ad.Tensor | None:
        return self.embedding(self.request(ITEM, j, ctx, ctx.depth), ctx)

    def plan(self, users, items, ctx: EvidenceContext) -> list:
        """Request both endpoints of every pair without evaluating any net."""
        refs = []
        for i, j in zip(np.asarray(users).tolist(), np.asarray(items).tolist()):
            ru = self.request(USER, i, ctx, 0)
            rv = self.request(ITEM, j, ctx, 0)
            refs.append((ru, rv))
        return refs

    def predict_batch(self, users, items, ctx: EvidenceContext):
        """Differentiable predictions for the pairs whose embeddings resolve.

        Returns ``(pred, ok)`` where ``ok`` masks the resolved pairs and
        ``pred`` (a tensor, or ``None`` if nothing resolved) holds their
        inner products in order.
        """
        refs = self.plan(users, items, ctx)
        self.materialize(ctx)
        ok = np.array([ru is not None and rv is not None for ru, rv in refs], dtype=bool)
        if not ok.any():
            return None, ok
        urows = [ru.row for (ru, rv), good in zip(refs, ok) if good]
        vrows = [rv.row for (ru, rv), good in zip(refs, ok) if good]
        u = ad.gather(ctx.bank(USER), urows)
        v = ad.gather(ctx.bank(ITEM), vrows)
        return ad.sum(ad.mul(u, v), axis=1), ok

    def predict_values(self, users, items, ctx: EvidenceContext) -> np.ndarray:
        """Plain predictions with the mean fallback filled in (unclamped)."""
        pred, ok = self.predict_batch(users, items, ctx)
        out = np.full(len(ok), self.model.rating_mean)
        if pred is not None:
            out[ok] = pred.value
        return out

    def predict_rating(self, i: int, j: int, ctx: EvidenceContext | None = None) -> float:
        ctx = ctx or self.new_context(0, requires_grad=False)
        u = self.user_vector(i, ctx)
        v = self.item_vector(j, ctx)
        if u is None or v is None:
            return self.model.rating_mean
        return float(u.value @ v.value)


def predict_rating(model: RecModel, store: RatingsStore, i: int, j: int, seed: int = 0) -> float:
    engine = RecEngine(model, store)
    return engine.predict_rating(i, j, engine.new_context(seed, requires_grad=False))


def clear_caches(ctx: EvidenceContext) -> None:
    ctx.clear_cache()
