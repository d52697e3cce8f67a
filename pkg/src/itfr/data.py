"""Interaction data: loading, splitting, negative sampling and the toy economy.

All interaction sets are stored as ``(N, 2)`` int64 arrays of
``(user_index, item_index)`` rows, sorted lexicographically and free of
duplicates. External string ids are mapped to dense indices in order of first
appearance in the interaction file.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

_logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")
SIDECAR = "split.json"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    n_users: int
    n_items: int
    positives: np.ndarray
    user_group: np.ndarray
    item_group: np.ndarray
    user_group_labels: tuple = ()
    item_group_labels: tuple = ()
    user_ids: tuple = ()
    item_ids: tuple = ()

    def __post_init__(self):
        pos = np.asarray(self.positives, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "user_group", np.asarray(self.user_group, dtype=np.int64))
        object.__setattr__(self, "item_group", np.asarray(self.item_group, dtype=np.int64))
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(u) for u in range(self.n_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(self.n_items)))
        if not self.user_group_labels:
            n = int(self.user_group.max()) + 1 if self.user_group.size else 1
            object.__setattr__(self, "user_group_labels", tuple(str(p) for p in range(n)))
        if not self.item_group_labels:
            n = int(self.item_group.max()) + 1 if self.item_group.size else 1
            object.__setattr__(self, "item_group_labels", tuple(str(q) for q in range(n)))
        self._validate()

    def _validate(self):
        if self.n_users < 1 or self.n_items < 1:
            raise DataError("dataset needs at least one user and one item")
        if self.user_group.shape != (self.n_users,) or self.item_group.shape != (self.n_items,):
            raise DataError("every user and item needs exactly one group label")
        pos = self.positives
        if pos.size:
            if pos.min() < 0 or pos[:, 0].max() >= self.n_users or pos[:, 1].max() >= self.n_items:
                raise DataError("interaction references an unknown user or item")
            if len(np.unique(pos, axis=0)) != len(pos):
                raise DataError("duplicate interactions")
        if self.user_group.min() < 0 or self.user_group.max() >= self.n_user_groups:
            raise DataError("user group index out of range")
        if self.item_group.min() < 0 or self.item_group.max() >= self.n_item_groups:
            raise DataError("item group index out of range")

    @property
    def n_user_groups(self) -> int:
        return len(self.user_group_labels)

    @property
    def n_item_groups(self) -> int:
        return len(self.item_group_labels)

    @property
    def n_cells(self) -> int:
        return self.n_user_groups * self.n_item_groups

    def cell_of(self, users, items) -> np.ndarray:
        """Flat intersectional cell index ``p * Q + q`` for each (user, item)."""
        return self.user_group[users] * self.n_item_groups + self.item_group[items]

    def with_positives(self, positives) -> "InteractionDataset":
        return InteractionDataset(
            self.n_users, self.n_items, _canonical(positives), self.user_group,
            self.item_group, self.user_group_labels, self.item_group_labels,
            self.user_ids, self.item_ids,
        )


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple

    def parts(self):
        return dict(zip(SPLIT_NAMES, (self.train, self.validation, self.test)))


@dataclass(frozen=True, eq=False)
class IntersectionalIndex:
    """Training positives bucketed into the P x Q intersectional cells."""

    n_user_groups: int
    n_item_groups: int
    cells: list = field(default_factory=list)

    def cell(self, p: int, q: int) -> np.ndarray:
        return self.cells[p * self.n_item_groups + q]

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.cells]).reshape(self.n_user_groups, self.n_item_groups)


def _canonical(pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        return pairs
    return np.unique(pairs, axis=0)


def _read_tsv(path, n_fields=2):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != n_fields or not all(p.strip() for p in parts):
                raise DataError(f"{path}:{lineno}: malformed line {line!r}")
            rows.append(tuple(p.strip() for p in parts))
    return rows


def _read_groups(path, kind):
    group_of, labels = {}, {}
    for entity, label in _read_tsv(path):
        if entity in group_of and group_of[entity] != label:
            raise DataError(f"{kind} {entity} has two group labels: {group_of[entity]!r} and {label!r}")
        group_of[entity] = label
        labels.setdefault(label, len(labels))
    return group_of, labels


def load_dataset(interactions_path, user_groups_path, item_groups_path) -> InteractionDataset:
    pairs = _read_tsv(interactions_path)
    user_label, user_labels = _read_groups(user_groups_path, "user")
    item_label, item_labels = _read_groups(item_groups_path, "item")

    users, items = {}, {}
    for u, i in pairs:
        if u not in user_label:
            raise DataError(f"user {u} has no group label")
        if i not in item_label:
            raise DataError(f"item {i} has no group label")
        users.setdefault(u, len(users))
        items.setdefault(i, len(items))
    if not users:
        raise DataError(f"{interactions_path}: no interactions")

    positives = _canonical([(users[u], items[i]) for u, i in pairs])
    return InteractionDataset(
        n_users=len(users),
        n_items=len(items),
        positives=positives,
        user_group=np.array([user_labels[user_label[u]] for u in users]),
        item_group=np.array([item_labels[item_label[i]] for i in items]),
        user_group_labels=tuple(user_labels),
        item_group_labels=tuple(item_labels),
        user_ids=tuple(users),
        item_ids=tuple(items),
    )


def parse_ratios(ratios) -> tuple:
    if isinstance(ratios, str):
        ratios = ratios.split(",")
    fr = tuple(Fraction(str(r).strip()) for r in ratios)
    if len(fr) != 3 or any(r < 0 for r in fr) or sum(fr) != 1:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    return fr


def split_dataset(ds: InteractionDataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitDataset:
    """Seeded global random split, cut at floor(r1*N) and floor((r1+r2)*N)."""
    fr = parse_ratios(ratios)
    n = len(ds.positives)
    if n < 3 and all(r > 0 for r in fr):
        raise DataError("dataset too small to split")
    perm = np.random.default_rng(seed).permutation(n)
    a = math.floor(fr[0] * n)
    b = math.floor((fr[0] + fr[1]) * n)
    shuffled = ds.positives[perm]
    return SplitDataset(
        train=_canonical(shuffled[:a]),
        validation=_canonical(shuffled[a:b]),
        test=_canonical(shuffled[b:]),
        seed=seed,
        ratios=tuple(float(r) for r in fr),
    )


def build_index(ds: InteractionDataset, train: np.ndarray) -> IntersectionalIndex:
    cell = ds.cell_of(train[:, 0], train[:, 1])
    cells = [train[cell == c] for c in range(ds.n_cells)]
    return IntersectionalIndex(ds.n_user_groups, ds.n_item_groups, cells)


class NegativeSampler:
    """Uniform sampler over the items a user has not interacted with in training."""

    def __init__(self, train: np.ndarray, n_users: int, n_items: int):
        self.n_items = n_items
        self._keys = np.unique(train[:, 0] * n_items + train[:, 1])
        self._full = np.bincount(train[:, 0], minlength=n_users) >= n_items

    def is_positive(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if not len(self._keys):
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self._keys, keys), len(self._keys) - 1)
        return self._keys[pos] == keys

    def sample(self, users, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if self._full[users].any():
            bad = users[self._full[users]][0]
            raise DataError(f"no negative available for user {bad}")
        out = rng.integers(0, self.n_items, size=len(users))
        redo = np.flatnonzero(self.is_positive(users, out))
        # rejection keeps the draw uniform over each user's complement
        while redo.size:
            out[redo] = rng.integers(0, self.n_items, size=redo.size)
            redo = redo[self.is_positive(users[redo], out[redo])]
        return out


def sample_negative(user: int, sampler: NegativeSampler, rng: np.random.Generator) -> int:
    return int(sampler.sample([user], rng)[0])


def generate_toy(
    seed: int = 0,
    users_per_group: int = 100,
    minority_per_group: int = 10,
    items_per_group: int = 50,
    positives_per_user: int = 20,
    popularity_skew: float = 1.0,
) -> InteractionDataset:
    """Two genders x two genres with a diagonal majority preference.

    Users ``0..99`` are male, ``100..199`` female; items ``0..49`` horror,
    ``50..99`` romance. In each user group, ``minority_per_group`` randomly
    chosen users prefer the genre favoured by the other group. Within a genre,
    items are drawn without replacement from a Zipf-like popularity profile;
    minority-preference users follow the reversed profile, so their favourite
    items are the ones the majority rarely picks.
    """
    if positives_per_user > items_per_group:
        raise DataError("positives_per_user cannot exceed items_per_group")
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, items_per_group + 1, dtype=float)
    weights = ranks ** -popularity_skew
    weights /= weights.sum()
    reversed_weights = weights[::-1].copy()

    n_users = 2 * users_per_group
    user_group = np.repeat([0, 1], users_per_group)
    item_group = np.repeat([0, 1], items_per_group)
    pairs = []
    for p in (0, 1):
        members = np.arange(p * users_per_group, (p + 1) * users_per_group)
        minority = set(rng.choice(members, size=minority_per_group, replace=False).tolist())
        for u in members:
            is_minority = u in minority
            genre = 1 - p if is_minority else p
            profile = reversed_weights if is_minority else weights
            picks = rng.choice(items_per_group, size=positives_per_user, replace=False, p=profile)
            pairs.extend((u, genre * items_per_group + k) for k in picks)

    return InteractionDataset(
        n_users=n_users,
        n_items=2 * items_per_group,
        positives=_canonical(pairs),
        user_group=user_group,
        item_group=item_group,
        user_group_labels=("male", "female"),
        item_group_labels=("horror", "romance"),
        user_ids=tuple(f"u{u}" for u in range(n_users)),
        item_ids=tuple(f"i{i}" for i in range(2 * items_per_group)),
    )


def write_dataset(ds: InteractionDataset, out_dir) -> None:
    """Write ``interactions.tsv``, ``user_groups.tsv`` and ``item_groups.tsv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_pairs(out / "interactions.tsv", ds, ds.positives)
    with open(out / "user_groups.tsv", "w", encoding="utf-8") as fh:
        for uid, g in zip(ds.user_ids, ds.user_group):
            fh.write(f"{uid}\t{ds.user_group_labels[g]}\n")
    with open(out / "item_groups.tsv", "w", encoding="utf-8") as fh:
        for iid, g in zip(ds.item_ids, ds.item_group):
            fh.write(f"{iid}\t{ds.item_group_labels[g]}\n")


def _write_pairs(path, ds, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in pairs:
            fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\n")


def write_split(ds: InteractionDataset, split: SplitDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, pairs in split.parts().items():
        _write_pairs(out / f"{name}.tsv", ds, pairs)
    sidecar = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "user_ids": list(ds.user_ids),
        "item_ids": list(ds.item_ids),
        "user_group": ds.user_group.tolist(),
        "item_group": ds.item_group.tolist(),
        "user_group_labels": list(ds.user_group_labels),
        "item_group_labels": list(ds.item_group_labels),
        "sizes": {name: len(p) for name, p in split.parts().items()},
    }
    with open(out / SIDECAR, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)


def read_split(data_dir) -> tuple[InteractionDataset, SplitDataset]:
    """Inverse of :func:`write_split`."""
    data_dir = Path(data_dir)
    try:
        with open(data_dir / SIDECAR, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{data_dir} has no {SIDECAR}; run `prep` first") from None
    uidx = {u: k for k, u in enumerate(meta["user_ids"])}
    iidx = {i: k for k, i in enumerate(meta["item_ids"])}
    parts = {}
    for name in SPLIT_NAMES:
        rows = []
        for u, i in _read_tsv(data_dir / f"{name}.tsv"):
            if u not in uidx or i not in iidx:
                raise DataError(f"{name}.tsv references unknown id ({u}, {i})")
            rows.append((uidx[u], iidx[i]))
        parts[name] = _canonical(rows)
    all_pos = _canonical(np.concatenate(list(parts.values())))
    ds = InteractionDataset(
        n_users=len(uidx),
        n_items=len(iidx),
        positives=all_pos,
        user_group=np.array(meta["user_group"]),
        item_group=np.array(meta["item_group"]),
        user_group_labels=tuple(meta["user_group_labels"]),
        item_group_labels=tuple(meta["item_group_labels"]),
        user_ids=tuple(meta["user_ids"]),
        item_ids=tuple(meta["item_ids"]),
    )
    split = SplitDataset(parts["train"], parts["validation"], parts["test"],
                         seed=meta["seed"], ratios=tuple(meta["ratios"]))
    return ds, split


ML1M_GENRES = ("Sci-Fi", "Adventure", "Crime", "Romance", "Children's", "Horror")


def convert_ml1m(raw_dir, out_dir, genres=ML1M_GENRES) -> InteractionDataset:
    """Turn a local MovieLens-1M extract into the three TSV inputs.

    Every rating counts as a positive. Users are grouped by gender; a movie is
    kept only if exactly one of ``genres`` appears in its genre list, which is
    then its item group.
    """
    raw = Path(raw_dir)
    gender = {}
    with open(raw / "users.dat", encoding="latin-1") as fh:
        for line in fh:
            uid, g = line.strip().split("::")[:2]
            gender[uid] = g
    genre_of = {}
    wanted = set(genres)
    with open(raw / "movies.dat", encoding="latin-1") as fh:
        for line in fh:
            mid, _title, glist = line.rstrip("\n").split("::")
            hit = [g for g in glist.split("|") if g in wanted]
            if len(hit) == 1:
                genre_of[mid] = hit[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kept_users, kept_items = {}, {}
    with open(raw / "ratings.dat", encoding="latin-1") as fh, \
            open(out / "interactions.tsv", "w", encoding="utf-8") as oh:
        for line in fh:
            uid, mid = line.split("::")[:2]
            if mid in genre_of and uid in gender:
                oh.write(f"{uid}\t{mid}\n")
                kept_users[uid] = gender[uid]
                kept_items[mid] = genre_of[mid]
    with open(out / "user_groups.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{u}\t{g}\n" for u, g in kept_users.items())
    with open(out / "item_groups.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\t{g}\n" for i, g in kept_items.items())
    return load_dataset(out / "interactions.tsv", out / "user_groups.tsv", out / "item_groups.tsv")
