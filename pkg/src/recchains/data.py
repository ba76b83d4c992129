"""Rating file parsing, synthetic low-rank data and train/validation splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RatingRecord:
    user_id: int
    item_id: int
    rating: float
    timestamp: int | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented collection of ratings with dense 0-based ids.

    ``user_ids`` / ``item_ids`` map dense index -> original id as it appeared in
    the source file (for synthetic data they are just ``arange``).
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    num_users: int
    num_items: int
    rating_scale: tuple[float, float]
    timestamps: np.ndarray | None = None
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None
    mean_rating: float = field(init=False)

    def __post_init__(self):
        n = len(self.ratings)
        if len(self.users) != n or len(self.items) != n:
            raise DataError("users, items and ratings must have equal length")
        object.__setattr__(self, "mean_rating", float(self.ratings.mean()) if n else float("nan"))

    def __len__(self) -> int:
        return len(self.ratings)

    def __iter__(self) -> Iterator[RatingRecord]:
        for k in range(len(self)):
            yield self.record(k)

    def record(self, k: int) -> RatingRecord:
        ts = None if self.timestamps is None else int(self.timestamps[k])
        return RatingRecord(int(self.users[k]), int(self.items[k]), float(self.ratings[k]), ts)

    def subset(self, index: np.ndarray) -> "Dataset":
        """Records at ``index``, keeping dims, scale and id maps of the parent."""
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            users=self.users[index],
            items=self.items[index],
            ratings=self.ratings[index],
            num_users=self.num_users,
            num_items=self.num_items,
            rating_scale=self.rating_scale,
            timestamps=None if self.timestamps is None else self.timestamps[index],
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and tuple(self.rating_scale) == tuple(other.rating_scale)
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ratings, other.ratings)
        )

    def validate(self) -> None:
        if len(self) == 0:
            return
        if self.users.min() < 0 or self.users.max() >= self.num_users:
            raise DataError("user id out of range")
        if self.items.min() < 0 or self.items.max() >= self.num_items:
            raise DataError("item id out of range")
        if not np.all(np.isfinite(self.ratings)):
            raise DataError("non-finite rating")
        lo, hi = self.rating_scale
        if self.ratings.min() < lo or self.ratings.max() > hi:
            raise DataError(f"rating outside declared scale {self.rating_scale}")
        keys = self.users.astype(np.int64) * self.num_items + self.items
        if len(np.unique(keys)) != len(keys):
            raise DataError("duplicate (user, item) pair")


def _parse_lines(path, sep: str, rating_scale) -> Dataset:
    path = Path(path)
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    users, items, ratings, stamps = [], [], [], []
    seen: set[tuple[int, int]] = set()
    with path.open("r", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields separated by {sep!r}, got {len(parts)}")
            u_raw, i_raw, r_raw, t_raw = parts
            try:
                rating = float(r_raw)
                stamp = int(float(t_raw))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(rating):
                raise DataError(f"{path}:{lineno}: non-finite rating")
            u = user_map.setdefault(u_raw, len(user_map))
            i = item_map.setdefault(i_raw, len(item_map))
            if (u, i) in seen:
                raise DataError(f"{path}:{lineno}: duplicate rating for user {u_raw} item {i_raw}")
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(rating)
            stamps.append(stamp)
    if not ratings:
        raise DataError(f"{path}: no ratings")
    ratings_arr = np.asarray(ratings, dtype=np.float64)
    user_ids, user_perm = _sorted_ids(user_map)
    item_ids, item_perm = _sorted_ids(item_map)
    if rating_scale is None:
        rating_scale = (float(ratings_arr.min()), float(ratings_arr.max()))
    ds = Dataset(
        users=user_perm[np.asarray(users, dtype=np.int64)],
        items=item_perm[np.asarray(items, dtype=np.int64)],
        ratings=ratings_arr,
        num_users=len(user_map),
        num_items=len(item_map),
        rating_scale=(float(rating_scale[0]), float(rating_scale[1])),
        timestamps=np.asarray(stamps, dtype=np.int64),
        user_ids=user_ids,
        item_ids=item_ids,
    )
    ds.validate()
    logger.info("parsed %s: %d ratings, %d users, %d items", path, len(ds), ds.num_users, ds.num_items)
    return ds


def _sorted_ids(mapping: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    """Original ids in ascending order and the first-seen -> sorted index map."""
    keys = list(mapping)
    try:
        parsed = [int(k) for k in keys]
    except ValueError:
        parsed = keys
    order = sorted(range(len(keys)), key=lambda n: parsed[n])
    perm = np.empty(len(keys), dtype=np.int64)
    perm[order] = np.arange(len(keys))
    return np.asarray([parsed[n] for n in order]), perm


def parse_tab_format(path, rating_scale=None) -> Dataset:
    """Read ``user<TAB>item<TAB>rating<TAB>timestamp`` lines (ML-100K ``u.data``).

    Ids are densified in ascending order of the original id. ``rating_scale`` defaults
    to the observed (min, max).
    """
    return _parse_lines(path, "\t", rating_scale)


def parse_double_colon_format(path, rating_scale=None) -> Dataset:
    """Read ``user::item::rating::timestamp`` lines (ML-1M / ML-10M)."""
    return _parse_lines(path, "::", rating_scale)


def _write(ds: Dataset, path, sep: str) -> None:
    uid = ds.user_ids if ds.user_ids is not None else np.arange(ds.num_users) + 1
    iid = ds.item_ids if ds.item_ids is not None else np.arange(ds.num_items) + 1
    stamps = ds.timestamps if ds.timestamps is not None else np.zeros(len(ds), dtype=np.int64)
    with Path(path).open("w", encoding="latin-1") as fh:
        for u, i, r, t in zip(ds.users, ds.items, ds.ratings, stamps):
            fh.write(f"{uid[u]}{sep}{iid[i]}{sep}{float(r)!r}{sep}{int(t)}\n")


def write_tab_format(ds: Dataset, path) -> None:
    _write(ds, path, "\t")


def write_double_colon_format(ds: Dataset, path) -> None:
    _write(ds, path, "::")


def generate_synthetic(
    m: int,
    n: int,
    true_rank: int,
    density: float,
    noise_sd: float,
    seed: int,
    rating_scale: tuple[float, float] = (-10.0, 10.0),
    max_retries: int = 100,
) -> Dataset:
    """Observe entries of a random rank-``true_rank`` matrix ``A @ B.T``.

    Each entry is kept independently with probability ``density``; the mask is
    redrawn until every row and column holds at least one rating.
    """
    if true_rank > min(m, n):
        raise ValueError("true_rank must not exceed min(m, n)")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, true_rank))
    b = rng.standard_normal((n, true_rank))
    full = a @ b.T
    if noise_sd > 0:
        full = full + noise_sd * rng.standard_normal((m, n))
    full = np.clip(full, *rating_scale)
    for _ in range(max_retries):
        mask = rng.random((m, n)) < density
        if mask.any(axis=1).all() and mask.any(axis=0).all():
            break
    else:
        raise DataError(f"could not draw a connected mask at density {density} after {max_retries} tries")
    users, items = np.nonzero(mask)
    return Dataset(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=full[users, items],
        num_users=m,
        num_items=n,
        rating_scale=(float(rating_scale[0]), float(rating_scale[1])),
        user_ids=np.arange(m),
        item_ids=np.arange(n),
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def split_indices(num_records: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(num_records)
    n_train = int(round(spec.train_fraction * num_records))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Uniform random partition by rating record."""
    train_idx, valid_idx = split_indices(len(dataset), spec)
    return dataset.subset(train_idx), dataset.subset(valid_idx)


def save_split(path, valid_idx: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(k)}\n" for k in valid_idx))


def load_split(path, dataset: Dataset) -> tuple[Dataset, Dataset]:
    """Rebuild a split from a sidecar of validation record indices."""
    valid_idx = np.array([int(x) for x in Path(path).read_text().split()], dtype=np.int64)
    mask = np.ones(len(dataset), dtype=bool)
    mask[valid_idx] = False
    return dataset.subset(np.nonzero(mask)[0]), dataset.subset(valid_idx)
