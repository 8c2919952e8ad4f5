"""Interaction datasets: loading, group splits, negative sampling, synthetic data."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np


class Label(enum.IntEnum):
    """Binary group type.  The integer value is the column in probability pairs."""

    LEADERSHIP = 0
    COLLABORATIVE = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        for member in cls:
            if member.display == text:
                return member
        raise ValueError(f"unknown label {text!r}")

    @property
    def display(self) -> str:
        return "Leadership" if self is Label.LEADERSHIP else "Collaborative"


class DatasetError(ValueError):
    """Raised for malformed dataset files or inconsistent ids."""


@dataclass(frozen=True)
class PlantedLabel:
    kind: Label
    leader: int | None = None  # user id

    def __post_init__(self):
        if (self.kind is Label.LEADERSHIP) != (self.leader is not None):
            raise ValueError("a leader id is required exactly for Leadership labels")


@dataclass(frozen=True)
class Group:
    id: int
    members: tuple[int, ...]
    planted_label: PlantedLabel | None = None

    def __post_init__(self):
        if not self.members:
            raise DatasetError(f"group {self.id} has no members")
        if len(set(self.members)) != len(self.members):
            raise DatasetError(f"group {self.id} has duplicate members")
        if self.planted_label is not None and self.planted_label.leader is not None:
            if self.planted_label.leader not in self.members:
                raise DatasetError(f"group {self.id}: planted leader is not a member")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def is_singleton(self) -> bool:
        return len(self.members) == 1


class InteractionLog:
    """Set of (entity, item) pairs with implicit r = 1."""

    def __init__(self, entries=()):
        seen = set()
        ordered = []
        for e, i in entries:
            pair = (int(e), int(i))
            if pair in seen:
                raise DatasetError(f"duplicate interaction {pair}")
            seen.add(pair)
            ordered.append(pair)
        self.entries: tuple[tuple[int, int], ...] = tuple(ordered)
        self._by_entity: dict[int, tuple[int, ...]] = {}
        tmp: dict[int, list[int]] = {}
        for e, i in self.entries:
            tmp.setdefault(e, []).append(i)
        self._by_entity = {e: tuple(items) for e, items in tmp.items()}
        self._pairs = frozenset(seen)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, pair):
        return tuple(pair) in self._pairs

    def items_of(self, entity: int) -> tuple[int, ...]:
        return self._by_entity.get(entity, ())

    def entities(self):
        return sorted(self._by_entity)


@dataclass
class Dataset:
    num_users: int
    num_items: int
    groups: list[Group]
    user_item: InteractionLog
    group_item: InteractionLog
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    group_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        for g_idx, g in enumerate(self.groups):
            if g.id != g_idx:
                raise DatasetError("group ids must be dense and ordered")
            for u in g.members:
                if not 0 <= u < self.num_users:
                    raise DatasetError(f"group {g.id} references unknown user {u}")
        for u, i in self.user_item.entries:
            if not (0 <= u < self.num_users and 0 <= i < self.num_items):
                raise DatasetError(f"user_item entry ({u}, {i}) out of range")
        for g, i in self.group_item.entries:
            if not (0 <= g < len(self.groups) and 0 <= i < self.num_items):
                raise DatasetError(f"group_item entry ({g}, {i}) out of range")

    @property
    def users(self) -> range:
        return range(self.num_users)

    @property
    def items(self) -> range:
        return range(self.num_items)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def has_planted_labels(self) -> bool:
        return bool(self.groups) and all(g.planted_label is not None for g in self.groups)


@dataclass(frozen=True)
class DatasetSplit:
    train_groups: tuple[int, ...]
    valid_groups: tuple[int, ...]
    test_groups: tuple[int, ...]
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        a, b, c = set(self.train_groups), set(self.valid_groups), set(self.test_groups)
        if a & b or a & c or b & c:
            raise ValueError("split parts overlap")


# ---------------------------------------------------------------------------
# loading


def _sort_key(raw: str):
    try:
        return (0, int(raw), raw)
    except ValueError:
        return (1, 0, raw)


def _read_tsv(path: Path, width: int):
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != width or any(not p.strip() for p in parts):
                raise DatasetError(f"{path.name}:{lineno}: expected {width} tab-separated fields")
            rows.append((lineno, [p.strip() for p in parts]))
    return rows


def _read_id_list(path: Path):
    ids = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                ids.append(line.split("\t")[0])
    return ids


def load_dataset(dir_path) -> Dataset:
    """Load ``groups.tsv``, ``user_item.tsv`` and ``group_item.tsv`` from a directory.

    Raw ids are remapped to dense ranges (numeric ids in numeric order).  The
    optional ``users.tsv`` / ``items.tsv`` files pin the id universes; when
    ``users.tsv`` is present, group members must appear in it.  An optional
    ``labels.tsv`` carries planted labels for synthetic data.
    """
    root = Path(dir_path)
    paths = {name: root / f"{name}.tsv" for name in ("groups", "user_item", "group_item")}
    for name, p in paths.items():
        if not p.is_file():
            raise DatasetError(f"missing file {p}")

    group_rows = _read_tsv(paths["groups"], 2)
    ui_rows = _read_tsv(paths["user_item"], 2)
    gi_rows = _read_tsv(paths["group_item"], 2)

    raw_members = []
    for lineno, (gid, members) in group_rows:
        ms = [m.strip() for m in members.split(",")]
        if any(not m for m in ms):
            raise DatasetError(f"groups.tsv:{lineno}: empty member id")
        if len(set(ms)) != len(ms):
            raise DatasetError(f"groups.tsv:{lineno}: duplicate member in group {gid}")
        raw_members.append((lineno, gid, ms))

    users_file = root / "users.tsv"
    if users_file.is_file():
        user_universe = set(_read_id_list(users_file))
        for lineno, gid, ms in raw_members:
            for m in ms:
                if m not in user_universe:
                    raise DatasetError(f"groups.tsv:{lineno}: member {m} is not a known user")
        for lineno, (u, _) in ui_rows:
            if u not in user_universe:
                raise DatasetError(f"user_item.tsv:{lineno}: unknown user {u}")
    else:
        user_universe = {u for _, (u, _) in ui_rows}
        user_universe.update(m for _, _, ms in raw_members for m in ms)

    items_file = root / "items.tsv"
    item_universe = set(_read_id_list(items_file)) if items_file.is_file() else set()
    item_universe.update(i for _, (_, i) in ui_rows)
    item_universe.update(i for _, (_, i) in gi_rows)

    user_ids = sorted(user_universe, key=_sort_key)
    item_ids = sorted(item_universe, key=_sort_key)
    group_ids = [gid for _, gid, _ in raw_members]
    if len(set(group_ids)) != len(group_ids):
        raise DatasetError("groups.tsv: duplicate group id")
    order = sorted(range(len(group_ids)), key=lambda k: _sort_key(group_ids[k]))
    group_ids = [group_ids[k] for k in order]
    raw_members = [raw_members[k] for k in order]

    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    gmap = {g: k for k, g in enumerate(group_ids)}

    labels = {}
    labels_file = root / "labels.tsv"
    if labels_file.is_file():
        for lineno, (gid, text) in _read_tsv(labels_file, 2):
            if gid not in gmap:
                raise DatasetError(f"labels.tsv:{lineno}: unknown group {gid}")
            kind, _, leader = text.partition(":")
            try:
                label = Label.parse(kind)
            except ValueError as exc:
                raise DatasetError(f"labels.tsv:{lineno}: {exc}") from None
            if label is Label.LEADERSHIP:
                if leader not in umap:
                    raise DatasetError(f"labels.tsv:{lineno}: unknown leader {leader!r}")
                labels[gid] = PlantedLabel(label, umap[leader])
            else:
                labels[gid] = PlantedLabel(label)

    groups = [
        Group(gmap[gid], tuple(umap[m] for m in ms), labels.get(gid))
        for _, gid, ms in raw_members
    ]

    def _log(rows, emap, fname):
        seen = set()
        out = []
        for lineno, (e, i) in rows:
            if e not in emap:
                raise DatasetError(f"{fname}:{lineno}: unknown entity {e}")
            pair = (emap[e], imap[i])
            if pair in seen:
                raise DatasetError(f"{fname}:{lineno}: duplicate interaction")
            seen.add(pair)
            out.append(pair)
        return InteractionLog(out)

    return Dataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        groups=groups,
        user_item=_log(ui_rows, umap, "user_item.tsv"),
        group_item=_log(gi_rows, gmap, "group_item.tsv"),
        user_ids=user_ids,
        item_ids=item_ids,
        group_ids=group_ids,
    )


def save_dataset(ds: Dataset, dir_path) -> Path:
    """Write a dataset (dense ids) in the directory layout read by :func:`load_dataset`."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "groups.tsv").open("w", encoding="utf-8") as fh:
        for g in ds.groups:
            fh.write(f"{g.id}\t{','.join(str(m) for m in g.members)}\n")
    with (root / "user_item.tsv").open("w", encoding="utf-8") as fh:
        for u, i in ds.user_item.entries:
            fh.write(f"{u}\t{i}\n")
    with (root / "group_item.tsv").open("w", encoding="utf-8") as fh:
        for g, i in ds.group_item.entries:
            fh.write(f"{g}\t{i}\n")
    with (root / "users.tsv").open("w", encoding="utf-8") as fh:
        fh.writelines(f"{u}\n" for u in ds.users)
    with (root / "items.tsv").open("w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\n" for i in ds.items)
    if ds.has_planted_labels():
        with (root / "labels.tsv").open("w", encoding="utf-8") as fh:
            for g in ds.groups:
                pl = g.planted_label
                text = pl.kind.display if pl.leader is None else f"{pl.kind.display}:{pl.leader}"
                fh.write(f"{g.id}\t{text}\n")
    return root


# ---------------------------------------------------------------------------
# splitting and sampling


def split_groups(ds: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    """Random group-level split; valid/test sizes are floored, the remainder goes to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = ds.num_groups
    if n < 3:
        raise ValueError("at least 3 groups are required to split")
    n_valid = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    valid = tuple(sorted(int(g) for g in perm[:n_valid]))
    test = tuple(sorted(int(g) for g in perm[n_valid:n_valid + n_test]))
    train = tuple(sorted(int(g) for g in perm[n_valid + n_test:]))
    return DatasetSplit(train, valid, test, ratios)


def negative_sample(ds: Dataset, entity: int, k: int, seed: int, kind: str = "user") -> list[int]:
    """``k`` distinct items the entity has not interacted with."""
    log = {"user": ds.user_item, "group": ds.group_item}[kind]
    positives = set(log.items_of(entity))
    pool = np.array([i for i in ds.items if i not in positives], dtype=np.int64)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > pool.size:
        raise ValueError(f"{kind} {entity}: only {pool.size} negative items, {k} requested")
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(pool, size=k, replace=False)]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    num_users: int = 300
    num_items: int = 500
    num_groups: int = 200
    leadership_fraction: float = 0.5
    group_size_min: int = 3
    group_size_max: int = 6
    items_min: int = 10
    items_max: int = 20

    def validate(self):
        if self.num_users < 1 or self.num_items < 1 or self.num_groups < 0:
            raise ValueError("num_users and num_items must be positive")
        if not 0.0 <= self.leadership_fraction <= 1.0:
            raise ValueError("leadership_fraction must lie in [0, 1]")
        if not 1 <= self.group_size_min <= self.group_size_max:
            raise ValueError("group size range is empty")
        if self.group_size_max > self.num_users:
            raise ValueError("groups cannot be larger than the user population")
        if not 1 <= self.items_min <= self.items_max:
            raise ValueError("items-per-entity range is empty")
        if self.items_max > self.num_items:
            raise ValueError("items-per-entity exceeds the number of items")

    @classmethod
    def from_text(cls, text: str) -> "SynthConfig":
        """Parse a flat ``key = value`` file (``#`` comments allowed)."""
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in known:
                raise ValueError(f"line {lineno}: unknown or malformed setting {line!r}")
            values[key] = float(value) if key == "leadership_fraction" else int(value)
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def generate_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    """Random users with private item pools and groups with planted decision types.

    Leadership groups only ever interact with items from the leader's pool.
    Collaborative groups draw uniformly from the union of their members' pools.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    pools = []
    for _ in range(cfg.num_users):
        size = int(rng.integers(cfg.items_min, cfg.items_max + 1))
        pools.append(np.sort(rng.choice(cfg.num_items, size=size, replace=False)))
    user_item = [(u, int(i)) for u, pool in enumerate(pools) for i in pool]

    n_lead = int(round(cfg.leadership_fraction * cfg.num_groups))
    is_lead = np.zeros(cfg.num_groups, dtype=bool)
    is_lead[rng.permutation(cfg.num_groups)[:n_lead]] = True

    groups = []
    group_item = []
    for g in range(cfg.num_groups):
        size = int(rng.integers(cfg.group_size_min, cfg.group_size_max + 1))
        members = tuple(int(u) for u in rng.choice(cfg.num_users, size=size, replace=False))
        if is_lead[g]:
            leader = members[int(rng.integers(size))]
            label = PlantedLabel(Label.LEADERSHIP, leader)
            source = pools[leader]
        else:
            label = PlantedLabel(Label.COLLABORATIVE)
            source = np.unique(np.concatenate([pools[u] for u in members]))
        count = min(int(rng.integers(cfg.items_min, cfg.items_max + 1)), source.size)
        chosen = np.sort(rng.choice(source, size=count, replace=False))
        group_item.extend((g, int(i)) for i in chosen)
        groups.append(Group(g, members, label))

    return Dataset(
        num_users=cfg.num_users,
        num_items=cfg.num_items,
        groups=groups,
        user_item=InteractionLog(user_item),
        group_item=InteractionLog(group_item),
        user_ids=[str(u) for u in range(cfg.num_users)],
        item_ids=[str(i) for i in range(cfg.num_items)],
        group_ids=[str(g) for g in range(cfg.num_groups)],
    )
