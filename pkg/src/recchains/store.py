"""Dual-indexed sparse ratings and prototype selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset


class RatingsStore:
    """Ratings indexed both by user (``Ω_i``) and by item (``Ω̄_j``).

    Each neighbour list is a pair of aligned arrays (counterpart ids, ratings)
    sorted by counterpart id, so iteration order never depends on file order.
    """

    def __init__(self, dataset: Dataset):
        self.num_users = dataset.num_users
        self.num_items = dataset.num_items
        self.rating_scale = dataset.rating_scale
        self.mean_rating = dataset.mean_rating
        self.num_ratings = len(dataset)
        self.user_items, self.user_ratings = _group(dataset.users, dataset.items, dataset.ratings, self.num_users)
        self.item_users, self.item_ratings = _group(dataset.items, dataset.users, dataset.ratings, self.num_items)

    def user_degree(self) -> np.ndarray:
        return np.array([len(x) for x in self.user_items], dtype=np.int64)

    def item_degree(self) -> np.ndarray:
        return np.array([len(x) for x in self.item_users], dtype=np.int64)

    def by_user(self, i: int) -> list[tuple[int, float]]:
        return list(zip(self.user_items[i].tolist(), self.user_ratings[i].tolist()))

    def by_item(self, j: int) -> list[tuple[int, float]]:
        return list(zip(self.item_users[j].tolist(), self.item_ratings[j].tolist()))


def _group(keys, others, ratings, n):
    order = np.lexsort((others, keys))
    keys, others, ratings = keys[order], others[order], ratings[order]
    bounds = np.searchsorted(keys, np.arange(n + 1))
    ids = [others[bounds[k]:bounds[k + 1]] for k in range(n)]
    vals = [ratings[bounds[k]:bounds[k + 1]] for k in range(n)]
    return ids, vals


def build_store(train: Dataset) -> RatingsStore:
    return RatingsStore(train)


@dataclass(frozen=True)
class PrototypeSet:
    """Prototype ids, each sorted ascending; row ``r`` of a prototype table
    belongs to ``users[r]`` (or ``items[r]``)."""

    users: np.ndarray
    items: np.ndarray
    num_users: int
    num_items: int

    def __post_init__(self):
        user_row = np.full(self.num_users, -1, dtype=np.int64)
        user_row[self.users] = np.arange(len(self.users))
        item_row = np.full(self.num_items, -1, dtype=np.int64)
        item_row[self.items] = np.arange(len(self.items))
        object.__setattr__(self, "user_row", user_row)
        object.__setattr__(self, "item_row", item_row)

    def is_user(self, i: int) -> bool:
        return self.user_row[i] >= 0

    def is_item(self, j: int) -> bool:
        return self.item_row[j] >= 0


def _top_k(degree: np.ndarray, k: int) -> np.ndarray:
    # sort by (-degree, id): ties go to the smaller id
    order = np.lexsort((np.arange(len(degree)), -degree))
    return np.sort(order[:k])


def select_prototypes(store: RatingsStore, num_users: int, num_items: int) -> PrototypeSet:
    """The ``num_users`` heaviest raters and ``num_items`` most-rated items."""
    if num_users > store.num_users or num_items > store.num_items:
        raise ValueError("more prototypes requested than users/items available")
    return prototypes_from_degrees(store.user_degree(), store.item_degree(), num_users, num_items)


def prototypes_from_degrees(user_degree, item_degree, num_users: int, num_items: int) -> PrototypeSet:
    return PrototypeSet(
        users=_top_k(np.asarray(user_degree), num_users),
        items=_top_k(np.asarray(item_degree), num_items),
        num_users=len(user_degree),
        num_items=len(item_degree),
    )


@dataclass(frozen=True)
class PrototypeBlock:
    data: Dataset
    user_map: np.ndarray
    item_map: np.ndarray


def prototype_block(store: RatingsStore, protos: PrototypeSet) -> PrototypeBlock:
    """Ratings whose user and item are both prototypes, in prototype-local ids.

    ``user_map[local] == global`` (likewise ``item_map``), which coincides with
    the row order of the prototype tables.
    """
    users, items, ratings = [], [], []
    for gi in protos.users:
        cols = store.user_items[gi]
        local = protos.item_row[cols]
        keep = local >= 0
        users.append(np.full(int(keep.sum()), protos.user_row[gi], dtype=np.int64))
        items.append(local[keep])
        ratings.append(store.user_ratings[gi][keep])
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)  # noqa: E731
    data = Dataset(
        users=cat(users, np.int64),
        items=cat(items, np.int64),
        ratings=cat(ratings, np.float64),
        num_users=len(protos.users),
        num_items=len(protos.items),
        rating_scale=store.rating_scale,
    )
    if len(data) == 0:
        warnings.warn("prototype block holds no ratings; pretraining is a no-op", RuntimeWarning, stacklevel=2)
    return PrototypeBlock(data, protos.users.copy(), protos.items.copy())
