"""Shared builders and independent reference implementations for the tests."""

import numpy as np

from recchains.data import Dataset
from recchains.engine import ITEM, USER, Controls, RecModel
from recchains.nets import init_params
from recchains.store import PrototypeSet, build_store


def dataset(users, items, ratings, m, n, scale=(1.0, 5.0)):
    return Dataset(
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(ratings, dtype=np.float64),
        m, n, scale,
    )


def model_for(store, proto_users, proto_items, controls=None, k=3, hidden=6, seed=0, encoding="normalized"):
    """A small model with explicitly chosen prototypes."""
    protos = PrototypeSet(np.asarray(proto_users, dtype=np.int64), np.asarray(proto_items, dtype=np.int64),
                          store.num_users, store.num_items)
    phi, psi, u, v = init_params(k, seed, len(protos.users), len(protos.items), hidden)
    return RecModel(protos, phi, psi, u, v, store.mean_rating, store.rating_scale, controls or Controls(), encoding)


def random_store(rng, m, n, density, scale=(1.0, 5.0)):
    mask = rng.random((m, n)) < density
    users, items = np.nonzero(mask)
    ratings = rng.integers(int(scale[0]), int(scale[1]) + 1, len(users)).astype(float)
    return build_store(dataset(users, items, ratings, m, n, scale))


def pathological_store(rng):
    kind = rng.integers(4)
    m, n = rng.integers(1, 16, size=2)
    if kind == 0:  # every row has exactly one rating
        users = np.arange(m)
        items = rng.integers(0, n, m)
    elif kind == 1:  # two disconnected blocks
        h, w = max(m // 2, 1), max(n // 2, 1)
        mask = np.zeros((m, n), dtype=bool)
        mask[:h, :w] = rng.random((h, w)) < 0.6
        mask[h:, w:] = rng.random((m - h, n - w)) < 0.6
        users, items = np.nonzero(mask)
    elif kind == 2:  # dense
        users, items = np.nonzero(np.ones((m, n), dtype=bool))
    else:  # sparse, possibly with empty rows and columns
        users, items = np.nonzero(rng.random((m, n)) < rng.uniform(0.0, 0.4))
    ratings = rng.integers(1, 6, len(users)).astype(float)
    return build_store(dataset(users, items, ratings, m, n))


def net_np(params, x):
    """Plain numpy forward pass of a generator net on one input vector."""
    h = np.asarray(x, dtype=np.float64)
    last = len(params.weights) - 1
    for n, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if n < last:
            h = np.maximum(h, 0.0)
    return h


def reference_embedding(model, store, side, node, depth=0, active=None):
    """Literal depth-first recursion: no cache, every candidate used as evidence."""
    ctl = model.controls
    assert ctl.evidence_limit is None and not ctl.caching
    active = active if active is not None else (set(), set())
    protos = model.protos
    row = (protos.user_row if side == USER else protos.item_row)[node]
    if row >= 0:
        return (model.user_protos if side == USER else model.item_protos)[row]
    if depth >= ctl.max_depth:
        return None
    neighbours = store.by_user(node) if side == USER else store.by_item(node)
    net = model.phi if side == USER else model.psi
    active[side].add(node)
    outs = []
    for other, r in neighbours:
        if ctl.cycle_blocking and other in active[1 - side]:
            continue
        e = reference_embedding(model, store, 1 - side, other, depth + 1, active)
        if e is None:
            continue
        outs.append(net_np(net, np.concatenate([e, [float(model.encode_rating(r))]])))
    active[side].discard(node)
    return np.mean(outs, axis=0) if outs else None


def reference_predict(model, store, i, j):
    u = reference_embedding(model, store, USER, i)
    v = reference_embedding(model, store, ITEM, j)
    if u is None or v is None:
        return model.rating_mean
    return float(u @ v)
