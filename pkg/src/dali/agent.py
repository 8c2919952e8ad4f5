"""Performance-rule feedback loop: drift triggers, rule proposals, sandbox validation, commit/rollback."""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Protocol

from dali.data import Label
from dali.repo import CaseRecord, NoOpCommit, PerfRecord, Repository, RollbackLog
from dali.rules import (
    Compare,
    Feat,
    Num,
    RuleSet,
    RuleSyntaxError,
    classify_features,
    format_rule,
    parse_rules,
    replace_node,
    threshold_of,
)

log = logging.getLogger(__name__)

GOVERNANCE_ROLE = (
    "You are the governor of a rule base that labels each group as leader-driven or collaborative. "
    "Work from statistics of the members' attention weights, apply the discrimination rules, and keep "
    "the labels trustworthy while the recommender trains."
)
EVOLUTION_ROLE = (
    "You are responsible for upgrading that rule base. Retire rules that stopped paying off and propose "
    "replacements whose conditions are computable from member-weight statistics. Every change becomes a "
    "new version, so propose one coherent rule set at a time."
)
INSTRUCTION = (
    "Reply with the complete candidate rule set inside one fenced block (```rules ... ```), one rule per "
    "line, using the grammar\n"
    "  RULE <name>: IF <condition> THEN Leadership|Collaborative CONF <0.5..1> PRI <integer>\n"
    "Conditions may use +, -, *, /, <, <=, >, >=, ==, AND, OR, NOT, parentheses, numbers and the "
    "features {features}. Optional trigger settings go on their own lines as `SET <name> = <value>`. "
    "Text outside the block is recorded as the change rationale."
)
MAX_WINDOW = 10
CASES_PER_CLASS = 5


class DriftKind(enum.Enum):
    ABRUPT_DROP = "AbruptDrop"
    SUSTAINED_DECLINE = "SustainedDecline"
    DEADLOCK = "Deadlock"


@dataclass
class TriggerConfig:
    abrupt_drop_threshold: float = 0.01
    sustained_decline_threshold: float = 0.005
    sustained_epochs: int = 3
    user_stagnation_threshold: float = 0.001
    loss_jump_threshold: float = 0.01
    loss_drop_threshold: float = 0.4
    user_rollback_threshold: float = 0.005

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass(frozen=True)
class DriftEvent:
    kind: DriftKind
    epoch: int
    evidence: tuple[PerfRecord, ...]
    deltas: dict

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "epoch": self.epoch, "deltas": self.deltas,
                "evidence": [r.to_json() for r in self.evidence]}


def detect_drift(records, cfg: TriggerConfig | None = None) -> DriftEvent | None:
    """Evaluate the three triggers on the tail of a performance log.

    Deadlock is the most specific trigger (a large group drop with stalled
    user metrics and a loss anomaly), so it is checked before AbruptDrop.
    """
    cfg = cfg or TriggerConfig()
    recs = list(records.records() if hasattr(records, "records") else records)
    if not recs:
        raise ValueError("performance log is empty")
    if len(recs) < 2:
        return None
    prev, last = recs[-2], recs[-1]
    d_group = last.group_ndcg10 - prev.group_ndcg10
    d_user = last.user_ndcg10 - prev.user_ndcg10
    d_loss = last.loss - prev.loss
    pair = (prev, last)
    deltas = {"group_ndcg@10": d_group, "user_ndcg@10": d_user, "loss": d_loss}

    loss_anomaly = (-d_loss) > cfg.loss_drop_threshold or abs(d_loss) > cfg.loss_jump_threshold
    if -d_group > cfg.abrupt_drop_threshold and abs(d_user) < cfg.user_stagnation_threshold and loss_anomaly:
        return DriftEvent(DriftKind.DEADLOCK, last.epoch, pair, deltas)
    if abs(d_group) > cfg.abrupt_drop_threshold:
        return DriftEvent(DriftKind.ABRUPT_DROP, last.epoch, pair, deltas)
    n = cfg.sustained_epochs
    if len(recs) >= n + 1:
        window = recs[-(n + 1):]
        steps = [b.group_ndcg10 - a.group_ndcg10 for a, b in zip(window, window[1:])]
        if all(-s > cfg.sustained_decline_threshold for s in steps):
            return DriftEvent(DriftKind.SUSTAINED_DECLINE, last.epoch, tuple(window),
                              {"group_ndcg@10_steps": steps})
    return None


# ---------------------------------------------------------------------------
# agent context and clients


@dataclass
class AgentContext:
    window: list[PerfRecord]
    active_version: str
    active_rules: str
    cases: dict[str, list[CaseRecord]]
    class_medians: dict[str, dict[str, float]]
    event: DriftEvent
    triggers: TriggerConfig

    def __post_init__(self):
        if len(self.window) > MAX_WINDOW:
            self.window = self.window[-MAX_WINDOW:]

    def to_json(self) -> dict:
        return {
            "event": self.event.to_json(),
            "window": [r.to_json() for r in self.window],
            "active_version": self.active_version,
            "active_rules": self.active_rules,
            "cases": {k: [c.to_json() for c in v] for k, v in self.cases.items()},
            "class_medians": self.class_medians,
            "triggers": asdict(self.triggers),
        }


def build_context(repo: Repository, event: DriftEvent, triggers: TriggerConfig) -> AgentContext:
    medians = repo.cases.class_medians()
    cases = {}
    for label in Label:
        med = medians.get(label.display)
        if med is None:
            continue
        from dali.rules import FeatureVector

        cases[label.display] = repo.cases.query(FeatureVector(**med), CASES_PER_CLASS, label=label)
    return AgentContext(repo.perf.records()[-MAX_WINDOW:], str(repo.active.version),
                        repo.active.rules.canonical_text(), cases, medians, event, replace(triggers))


class AgentTransportError(RuntimeError):
    pass


class ProposalRejected(RuntimeError):
    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts


class AgentClient(Protocol):
    name: str

    def complete(self, request: dict) -> str: ...


def make_request(ctx: AgentContext, feedback: str = "") -> dict:
    from dali.rules import FEATURE_NAMES

    instruction = INSTRUCTION.format(features=", ".join(FEATURE_NAMES))
    if feedback:
        instruction += "\n\nYour previous reply could not be used: " + feedback
    return {
        "role_prompt": GOVERNANCE_ROLE + "\n\n" + EVOLUTION_ROLE,
        "context": json.dumps(ctx.to_json(), sort_keys=True),
        "instruction": instruction,
    }


class ScriptedAgent:
    """Deterministic offline agent mapping each drift kind to a templated rule edit."""

    name = "scripted"

    def complete(self, request: dict) -> str:
        ctx = json.loads(request["context"])
        rules = parse_rules(ctx["active_rules"])
        kind = DriftKind(ctx["event"]["kind"])
        epoch = ctx["event"]["epoch"]
        medians = ctx["class_medians"]
        settings = []
        if kind is DriftKind.ABRUPT_DROP:
            gap = medians.get("Leadership", {}).get("top2_gap", 0.3)
            kept = [r for r in rules.rules if not r.name.startswith("abrupt_gap")]
            new = parse_rules(f"RULE abrupt_gap: IF top2_gap > {round(gap, 6)!r} THEN Leadership CONF 0.85 PRI 75").rules
            rationale = f"abrupt group NDCG@10 change at epoch {epoch}: gate on the leader's weight gap"
            out = RuleSet(tuple(kept) + new)
        elif kind is DriftKind.SUSTAINED_DECLINE:
            settings.append("SET user_rollback_threshold = 0.001")
            out = tighten_lowest_leadership(rules)
            rationale = f"sustained decline ending at epoch {epoch}: tighten the weakest leadership rule"
        else:
            ent = medians.get("Collaborative", {}).get("entropy", 1.0)
            kept = [r for r in rules.rules if not r.name.startswith("deadlock_balance")]
            new = parse_rules(
                f"RULE deadlock_balance: IF entropy >= {round(ent, 6)!r} THEN Collaborative CONF 0.7 PRI 10"
            ).rules
            out = RuleSet(tuple(kept) + new)
            rationale = f"stalled user metrics with a group drop at epoch {epoch}: mark balanced groups"
        body = "\n".join(settings + [format_rule(r) for r in out.ordered()])
        return f"{rationale}\n```rules\n{body}\n```\n"


def tighten_lowest_leadership(rules: RuleSet, factor: float = 0.1) -> RuleSet:
    """Make the lowest-priority Leadership rule 10% harder to satisfy."""
    leaders = [r for r in rules.ordered() if r.label is Label.LEADERSHIP]
    for rule in reversed(leaders):
        hit = threshold_of(rule.condition)
        if hit is None:
            continue
        cmp, side = hit
        if cmp.op == "==":
            continue
        num = cmp.right if side == "left" else cmp.left
        # feature OP c: '>' style ops get a larger c; with the number on the left the roles flip
        upward = (cmp.op in (">", ">=")) == (side == "left")
        value = num.value * (1 + factor) if upward else num.value * (1 - factor)
        if num.value == 0:
            value = factor / 10 if upward else -factor / 10
        if value < 0:
            continue
        new_cmp = Compare(cmp.op, Feat(cmp.left.name), Num(value)) if side == "left" else Compare(
            cmp.op, Num(value), Feat(cmp.right.name))
        new_rule = replace(rule, condition=replace_node(rule.condition, cmp, new_cmp))
        return RuleSet(tuple(new_rule if r.name == rule.name else r for r in rules.rules))
    return rules


class LlmAgent:
    """HTTP client: POSTs the request JSON and expects text (or ``{"text": ...}``) back."""

    name = "llm"

    def __init__(self, endpoint: str, model: str = "", key: str = "", timeout: float = 30.0):
        self.endpoint = endpoint
        self.model = model
        self.key = key
        self.timeout = timeout

    @classmethod
    def from_env(cls, timeout: float = 30.0) -> "LlmAgent | None":
        endpoint = os.environ.get("DALI_LLM_ENDPOINT")
        if not endpoint:
            return None
        return cls(endpoint, os.environ.get("DALI_LLM_MODEL", ""), os.environ.get("DALI_LLM_KEY", ""), timeout)

    def complete(self, request: dict) -> str:
        body = dict(request, model=self.model)
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        req = urllib.request.Request(self.endpoint, data=json.dumps(body).encode("utf-8"), headers=headers,
                                     method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read().decode("utf-8")
        except (urllib.error.URLError, OSError, TimeoutError, ValueError) as exc:
            raise AgentTransportError(f"{type(exc).__name__}: {exc}") from exc
        try:
            data = json.loads(raw)
        except json.JSONDecodeError:
            return raw
        if isinstance(data, dict):
            if isinstance(data.get("text"), str):
                return data["text"]
            try:
                return data["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError):
                pass
        raise AgentTransportError("response carries no text")


def select_agent(kind: str = "auto", timeout: float = 30.0):
    if kind == "scripted":
        return ScriptedAgent()
    client = LlmAgent.from_env(timeout)
    if kind == "llm":
        if client is None:
            raise ValueError("--agent llm requires DALI_LLM_ENDPOINT")
        return client
    return client or ScriptedAgent()


# ---------------------------------------------------------------------------
# proposals


@dataclass
class Proposal:
    rules: RuleSet
    change_context: str
    settings: dict[str, float]
    attempts: int


_FENCE = re.compile(r"```[A-Za-z_-]*[ \t]*\n(.*?)```", re.DOTALL)
_SET = re.compile(r"^SET\s+([A-Za-z_]+)\s*=\s*([0-9.eE+-]+)\s*$")


def parse_reply(text: str) -> tuple[RuleSet, dict[str, float], str]:
    m = _FENCE.search(text)
    if m is None:
        raise RuleSyntaxError("reply has no fenced rule block", 0, text)
    settings = {}
    lines = []
    known = {f.name for f in fields(TriggerConfig)}
    for line in m.group(1).splitlines():
        s = _SET.match(line.strip())
        if s:
            if s.group(1) not in known:
                raise RuleSyntaxError(f"unknown setting {s.group(1)!r}", 0, line)
            settings[s.group(1)] = float(s.group(2))
        else:
            lines.append(line)
    rules = parse_rules("\n".join(lines))
    if len(rules) == 0:
        raise RuleSyntaxError("rule block is empty", 0, text)
    rationale = (text[: m.start()] + text[m.end():]).strip()[:500]
    return rules, settings, rationale


def propose_rules(agent, ctx: AgentContext, journal: Callable[[str, dict], None] | None = None,
                  max_retries: int = 2) -> Proposal:
    """Ask the agent for a candidate rule set, retrying with the parse error on bad output."""
    feedback = ""
    for attempt in range(1, max_retries + 2):
        request = make_request(ctx, feedback)
        try:
            reply = agent.complete(request)
        except AgentTransportError as exc:
            if journal:
                journal("agent_log.jsonl", {"agent": agent.name, "attempt": attempt, "request": request,
                                            "error": str(exc), "epoch": ctx.event.epoch})
            raise
        if journal:
            journal("agent_log.jsonl", {"agent": agent.name, "attempt": attempt, "request": request,
                                        "reply": reply, "epoch": ctx.event.epoch})
        try:
            rules, settings, rationale = parse_reply(reply)
        except (RuleSyntaxError, ValueError) as exc:
            feedback = str(exc)
            log.info("agent reply unusable (attempt %d): %s", attempt, feedback)
            continue
        return Proposal(rules, rationale or f"{ctx.event.kind.value} at epoch {ctx.event.epoch}", settings, attempt)
    raise ProposalRejected(f"no parsable rule set after {max_retries + 1} attempts: {feedback}", max_retries + 1)


# ---------------------------------------------------------------------------
# validation and evolution


@dataclass(frozen=True)
class ValidationReport:
    candidate_fingerprint: str
    parse_ok: bool
    sandbox_accuracy: float
    active_accuracy: float
    metric_delta: float
    verdict: str  # "Commit" | "Reject"

    def to_json(self) -> dict:
        return asdict(self)


METRIC_TOLERANCE = 0.001


def acceptance_predicate(parse_ok: bool, accuracy: float, active_accuracy: float, metric_delta: float) -> bool:
    return parse_ok and accuracy >= active_accuracy and metric_delta >= -METRIC_TOLERANCE


def sandbox_accuracy(rules: RuleSet, sandbox) -> float:
    hits = sum(classify_features(rules, c.features).label is c.label for c in sandbox)
    return hits / len(sandbox)


def validate_candidate(candidate: RuleSet, sandbox, replay: Callable[[RuleSet], float], active: RuleSet) -> ValidationReport:
    """Score a candidate against labelled cases and a validation replay.

    ``replay(rules)`` returns group NDCG@10 on the validation split with the
    given rules plugged into the symbolic channel.
    """
    sandbox = list(sandbox)
    for label in Label:
        if not any(c.label is label for c in sandbox):
            raise ValueError(f"sandbox has no {label.display} cases")
    acc = sandbox_accuracy(candidate, sandbox)
    acc_active = sandbox_accuracy(active, sandbox)
    if candidate.fingerprint() == active.fingerprint():
        delta = 0.0
    else:
        delta = float(replay(candidate) - replay(active))
    ok = acceptance_predicate(True, acc, acc_active, delta)
    return ValidationReport(candidate.fingerprint(), True, acc, acc_active, delta, "Commit" if ok else "Reject")


@dataclass(frozen=True)
class Committed:
    version: str
    report: ValidationReport


@dataclass(frozen=True)
class RolledBack:
    log: RollbackLog
    report: ValidationReport | None


@dataclass(frozen=True)
class NoChange:
    reason: str
    report: ValidationReport | None = None


def _outcome_json(outcome, event: DriftEvent | None, epoch: int) -> dict:
    rec = {"epoch": epoch, "event": None if event is None else event.kind.value, "outcome": type(outcome).__name__}
    if isinstance(outcome, Committed):
        rec["version"] = outcome.version
    elif isinstance(outcome, RolledBack):
        rec["rollback"] = outcome.log.to_json()
    else:
        rec["reason"] = outcome.reason
    report = getattr(outcome, "report", None)
    rec["report"] = None if report is None else report.to_json()
    return rec


def pre_drift_target(repo: Repository, event: DriftEvent):
    start = min(r.epoch for r in event.evidence)
    candidates = [v for v in repo.versions if v.created_at < start]
    return candidates[-1] if candidates else repo.versions[0]


def evolve(repo: Repository, event: DriftEvent, agent, triggers: TriggerConfig, sandbox,
           replay: Callable[[RuleSet], float], epoch: int | None = None):
    """One closed-loop step: propose, validate, then commit or roll back."""
    epoch = event.epoch if epoch is None else epoch
    active = repo.active
    outcome = None
    report = None
    try:
        ctx = build_context(repo, event, triggers)
        proposal = propose_rules(agent, ctx, journal=repo.journal)
    except AgentTransportError as exc:
        outcome = NoChange(f"agent transport failure: {exc}")
    except ProposalRejected as exc:
        report = ValidationReport("", False, 0.0, 0.0, 0.0, "Reject")
        proposal = None
        log.info("proposal rejected: %s", exc)
    if outcome is None and proposal is not None:
        for key, value in proposal.settings.items():
            setattr(triggers, key, value)
        report = validate_candidate(proposal.rules, sandbox, replay, active.rules)
        if report.verdict == "Commit":
            try:
                rv = repo.commit_rules(proposal.rules, "minor", proposal.change_context, author="agent", epoch=epoch)
                outcome = Committed(str(rv.version), report)
            except NoOpCommit:
                outcome = NoChange("candidate identical to active rules", report)
    if outcome is None:
        target = pre_drift_target(repo, event)
        if target.fingerprint == active.fingerprint:
            outcome = NoChange("validation failed; active rules already match the pre-drift version", report)
        else:
            rb = repo.rollback(target.version, trigger=f"{event.kind.value}: validation failed",
                               preserved_context=event.evidence, epoch=epoch)
            outcome = RolledBack(rb, report)
    repo.journal("evolve.jsonl", _outcome_json(outcome, event, epoch))
    return outcome


def regression_rollback(repo: Repository, triggers: TriggerConfig, epoch: int):
    """Undo the latest agent commit when user NDCG@10 fell by more than the rollback threshold since."""
    active = repo.active
    if active.author != "agent" or active.parent is None or active.change_context.startswith("rollback"):
        return None
    recs = {r.epoch: r for r in repo.perf.records()}
    at_commit = recs.get(active.created_at)
    now = recs.get(epoch)
    if at_commit is None or now is None or now.epoch != active.created_at + 1:
        return None
    if at_commit.user_ndcg10 - now.user_ndcg10 <= triggers.user_rollback_threshold:
        return None
    rb = repo.rollback(active.parent, trigger="validation-failure: user_ndcg@10 regression",
                       preserved_context=(at_commit, now), epoch=epoch)
    outcome = RolledBack(rb, None)
    repo.journal("evolve.jsonl", _outcome_json(outcome, None, epoch))
    return outcome
