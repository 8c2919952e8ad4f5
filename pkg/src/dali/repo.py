"""Rule memory: semantic-versioned rule repository, case feature bank, and performance log.

On disk a repository is a directory of JSON Lines files::

    versions.jsonl   one RuleVersion per line (canonical rule text embedded)
    perf_log.jsonl   one PerfRecord per epoch
    cases.jsonl      the case feature bank
    rollbacks.jsonl  one RollbackLog per rollback

plus append-only journals written by the evolution loop (``agent_log.jsonl``,
``evolve.jsonl``).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path

import numpy as np

from dali.data import Label
from dali.model import atomic_write_text
from dali.rules import FEATURE_NAMES, FeatureVector, RuleSet, fingerprint_text, parse_rules, seed_rules

CASE_CAPACITY = 10_000
SOURCES = ("synthetic-truth", "fused-decision")
AUTHORS = ("agent", "human", "seed")


class RepoError(RuntimeError):
    pass


class NoOpCommit(RepoError):
    """The proposed rule set is identical to the active one."""


@total_ordering
@dataclass(frozen=True)
class SemVer:
    major: int = 0
    minor: int = 0
    patch: int = 0

    @classmethod
    def parse(cls, text: str) -> "SemVer":
        parts = text.strip().split(".")
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ValueError(f"not a semantic version: {text!r}")
        return cls(*(int(p) for p in parts))

    def bump(self, kind: str) -> "SemVer":
        if kind == "major":
            return SemVer(self.major + 1, 0, 0)
        if kind == "minor":
            return SemVer(self.major, self.minor + 1, 0)
        if kind == "patch":
            return SemVer(self.major, self.minor, self.patch + 1)
        raise ValueError(f"unknown bump {kind!r}")

    def _key(self):
        return (self.major, self.minor, self.patch)

    def __lt__(self, other):
        return self._key() < other._key()

    def __str__(self):
        return f"{self.major}.{self.minor}.{self.patch}"


@dataclass(frozen=True)
class RuleVersion:
    version: SemVer
    rules: RuleSet
    fingerprint: str
    author: str
    created_at: int
    change_context: str
    parent: SemVer | None

    def to_json(self) -> dict:
        return {
            "version": str(self.version),
            "fingerprint": self.fingerprint,
            "rules_text": self.rules.canonical_text(),
            "metadata": {"author": self.author, "created_at": self.created_at, "change_context": self.change_context},
            "parent": None if self.parent is None else str(self.parent),
        }

    @classmethod
    def from_json(cls, d: dict) -> "RuleVersion":
        text = d["rules_text"]
        rules = parse_rules(text)
        if rules.canonical_text() != text or fingerprint_text(text) != d["fingerprint"]:
            raise RepoError(f"version {d['version']}: fingerprint does not match rule text")
        meta = d["metadata"]
        return cls(
            SemVer.parse(d["version"]),
            rules,
            d["fingerprint"],
            meta["author"],
            int(meta["created_at"]),
            meta["change_context"],
            None if d["parent"] is None else SemVer.parse(d["parent"]),
        )


@dataclass(frozen=True)
class CaseRecord:
    features: FeatureVector
    label: Label
    source: str
    epoch: int

    def to_json(self) -> dict:
        return {"features": self.features.as_dict(), "label": self.label.display, "source": self.source, "epoch": self.epoch}

    @classmethod
    def from_json(cls, d: dict) -> "CaseRecord":
        return cls(FeatureVector(**d["features"]), Label.parse(d["label"]), d["source"], int(d["epoch"]))


@dataclass(frozen=True)
class PerfRecord:
    epoch: int
    group_ndcg10: float
    group_hr10: float
    user_ndcg10: float
    loss: float
    active_version: str = ""

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "metrics": {
                "group_ndcg@10": self.group_ndcg10,
                "group_hr@10": self.group_hr10,
                "user_ndcg@10": self.user_ndcg10,
                "loss": self.loss,
            },
            "active_version": self.active_version,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PerfRecord":
        m = d["metrics"]
        return cls(int(d["epoch"]), m["group_ndcg@10"], m["group_hr@10"], m["user_ndcg@10"], m["loss"], d.get("active_version", ""))


@dataclass(frozen=True)
class RollbackLog:
    from_version: str
    to_version: str
    new_version: str
    trigger: str
    preserved_context: tuple[dict, ...] = ()
    epoch: int = 0

    def to_json(self) -> dict:
        return {
            "from_version": self.from_version,
            "to_version": self.to_version,
            "new_version": self.new_version,
            "trigger": self.trigger,
            "preserved_context": list(self.preserved_context),
            "epoch": self.epoch,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RollbackLog":
        return cls(d["from_version"], d["to_version"], d["new_version"], d["trigger"],
                   tuple(d["preserved_context"]), int(d.get("epoch", 0)))


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


class CaseBank:
    """FIFO-bounded store of labelled feature vectors with nearest-neighbour lookup."""

    def __init__(self, capacity: int = CASE_CAPACITY):
        self.capacity = capacity
        self._records: deque[CaseRecord] = deque(maxlen=capacity)

    def add(self, record: CaseRecord) -> None:
        if record.source not in SOURCES:
            raise ValueError(f"unknown case source {record.source!r}")
        self._records.append(record)

    def __len__(self):
        return len(self._records)

    def records(self) -> list[CaseRecord]:
        return list(self._records)

    def query(self, probe: FeatureVector, k: int, label: Label | None = None) -> list[CaseRecord]:
        """``k`` nearest records by Euclidean distance on bank-standardized features."""
        pool = [r for r in self._records if label is None or r.label is label]
        if not pool:
            raise RepoError("case bank is empty")
        X = np.array([r.features.as_array() for r in pool])
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        Z = (X - mu) / sd
        z = (probe.as_array() - mu) / sd
        dist = np.sqrt(((Z - z) ** 2).sum(axis=1))
        order = np.argsort(dist, kind="stable")
        return [pool[i] for i in order[: max(0, k)]]

    def class_medians(self) -> dict[str, dict[str, float]]:
        out = {}
        for label in Label:
            rows = [r.features.as_array() for r in self._records if r.label is label]
            if rows:
                med = np.median(np.array(rows), axis=0)
                out[label.display] = {n: float(v) for n, v in zip(FEATURE_NAMES, med)}
        return out


def query_cases(bank: CaseBank, probe: FeatureVector, k: int) -> list[CaseRecord]:
    return bank.query(probe, k)


class PerfLog:
    """Append-only epoch log."""

    def __init__(self, records=()):
        self._records: list[PerfRecord] = []
        for r in records:
            self.append(r)

    def append(self, record: PerfRecord) -> None:
        if self._records and record.epoch <= self._records[-1].epoch:
            raise RepoError(f"epoch {record.epoch} does not follow epoch {self._records[-1].epoch}")
        self._records.append(record)

    def records(self) -> list[PerfRecord]:
        return list(self._records)

    def __len__(self):
        return len(self._records)

    @property
    def last_epoch(self) -> int | None:
        return self._records[-1].epoch if self._records else None


def append_perf(log: PerfLog, record: PerfRecord) -> None:
    log.append(record)


@dataclass
class Repository:
    root: Path | None = None
    versions: list[RuleVersion] = field(default_factory=list)
    perf: PerfLog = field(default_factory=PerfLog)
    cases: CaseBank = field(default_factory=CaseBank)
    rollbacks: list[RollbackLog] = field(default_factory=list)

    # -- construction / persistence

    @classmethod
    def create(cls, root=None, seed: RuleSet | None = None) -> "Repository":
        repo = cls(Path(root) if root is not None else None)
        repo.commit_rules(seed or seed_rules(), "minor", "seed rule set", author="seed", epoch=0)
        return repo

    @classmethod
    def open(cls, root) -> "Repository":
        root = Path(root)
        vfile = root / "versions.jsonl"
        if not vfile.is_file():
            raise RepoError(f"no rule repository at {root}")
        repo = cls(root)
        repo.versions = [RuleVersion.from_json(d) for d in _read_jsonl(vfile)]
        repo.perf = PerfLog(PerfRecord.from_json(d) for d in _read_jsonl(root / "perf_log.jsonl"))
        for d in _read_jsonl(root / "cases.jsonl"):
            repo.cases.add(CaseRecord.from_json(d))
        repo.rollbacks = [RollbackLog.from_json(d) for d in _read_jsonl(root / "rollbacks.jsonl")]
        return repo

    @classmethod
    def open_or_create(cls, root) -> "Repository":
        root = Path(root)
        if (root / "versions.jsonl").is_file():
            return cls.open(root)
        return cls.create(root)

    def save(self) -> None:
        if self.root is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.root / "versions.jsonl", "".join(_dumps(v.to_json()) + "\n" for v in self.versions))
        atomic_write_text(self.root / "perf_log.jsonl", "".join(_dumps(r.to_json()) + "\n" for r in self.perf.records()))
        atomic_write_text(self.root / "cases.jsonl", "".join(_dumps(c.to_json()) + "\n" for c in self.cases.records()))
        atomic_write_text(self.root / "rollbacks.jsonl", "".join(_dumps(r.to_json()) + "\n" for r in self.rollbacks))

    def journal(self, name: str, record: dict) -> None:
        if self.root is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        with (self.root / name).open("a", encoding="utf-8") as fh:
            fh.write(_dumps(record) + "\n")

    # -- queries

    @property
    def active(self) -> RuleVersion:
        if not self.versions:
            raise RepoError("repository has no versions")
        return self.versions[-1]

    def get(self, version) -> RuleVersion:
        v = SemVer.parse(version) if isinstance(version, str) else version
        for rv in self.versions:
            if rv.version == v:
                return rv
        raise RepoError(f"unknown version {v}")

    def ancestors(self, version) -> list[SemVer]:
        by_version = {rv.version: rv for rv in self.versions}
        out = []
        cur = by_version[version].parent
        while cur is not None:
            out.append(cur)
            cur = by_version[cur].parent
        return out

    # -- mutation

    def commit_rules(self, rules: RuleSet, bump: str, ctx: str, author: str = "agent", epoch: int = 0) -> RuleVersion:
        if author not in AUTHORS:
            raise ValueError(f"unknown author {author!r}")
        if not isinstance(rules, RuleSet) or len(rules) == 0:
            raise RepoError("cannot commit an empty rule set")
        text = rules.canonical_text()
        if parse_rules(text).canonical_text() != text:
            raise RepoError("rule set does not round-trip through the parser")
        fp = fingerprint_text(text)
        base = self.versions[-1].version if self.versions else SemVer()
        if self.versions and fp == self.active.fingerprint:
            raise NoOpCommit(f"rule set is identical to active version {self.active.version}")
        rv = RuleVersion(base.bump(bump), rules, fp, author, int(epoch), ctx,
                         self.versions[-1].version if self.versions else None)
        self.versions.append(rv)
        self.save()
        return rv

    def rollback(self, to, trigger: str = "manual", preserved_context=(), epoch: int | None = None) -> RollbackLog:
        target = self.get(to)
        current = self.active
        if target.version != current.version and target.version not in self.ancestors(current.version):
            raise RepoError(f"{target.version} is not an ancestor of {current.version}")
        epoch = current.created_at if epoch is None else epoch
        rv = self.commit_rules(target.rules, "patch", f"rollback to {target.version}: {trigger}",
                               author="agent" if trigger != "manual" else "human", epoch=epoch)
        log = RollbackLog(str(current.version), str(target.version), str(rv.version), trigger,
                          tuple(r.to_json() for r in preserved_context), epoch)
        self.rollbacks.append(log)
        self.save()
        return log

    def append_perf(self, record: PerfRecord) -> None:
        self.perf.append(record)
        self.save()

    def add_cases(self, records) -> None:
        for r in records:
            self.cases.add(r)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.is_file():
        return []
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise RepoError(f"{path.name}:{lineno}: {exc}") from None
    return out


def commit_rules(repo: Repository, rules: RuleSet, bump: str, ctx: str, **kw) -> RuleVersion:
    return repo.commit_rules(rules, bump, ctx, **kw)


def rollback(repo: Repository, to, **kw) -> RollbackLog:
    return repo.rollback(to, **kw)
