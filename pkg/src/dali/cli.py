"""``dali`` command line: synth, train, eval, rule repository inspection, drift replay."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dali.agent import TriggerConfig, detect_drift, select_agent
from dali.data import SynthConfig, generate_synthetic, load_dataset, save_dataset
from dali.repo import PerfRecord, Repository, _read_jsonl


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dali", allow_abbrev=False)
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    s = sub.add_parser("synth", help="generate a synthetic dataset with planted group types", allow_abbrev=False)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="key = value file with generator settings")
    s.add_argument("--groups", type=_non_negative_int)
    s.add_argument("--leader-frac", type=float)
    s.add_argument("--users", type=_positive_int)
    s.add_argument("--items", type=_positive_int)

    t = sub.add_parser("train", help="pretrain and run the closed training loop", allow_abbrev=False)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--repo", help="rule repository directory (default: OUT/repo)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=_positive_int, default=20, help="joint epochs")
    t.add_argument("--pretrain-epochs", type=_non_negative_int, default=5)
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--dim", type=_positive_int, default=32)
    t.add_argument("--lr", type=_positive_float, default=0.001)
    t.add_argument("--delta", type=_positive_float, default=0.5)
    t.add_argument("--bench-k", type=_positive_int, default=5)
    t.add_argument("--agent", choices=("auto", "scripted", "llm"), default="auto")
    t.add_argument("--agent-timeout", type=_positive_float, default=30.0)
    t.add_argument("--no-dali", action="store_true", help="ablation: attention aggregation for every group")

    e = sub.add_parser("eval", help="evaluate a trained run on the test split", allow_abbrev=False)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="run directory holding checkpoint.json")
    e.add_argument("--repo", help="rule repository directory (default: OUT/repo)")

    rl = sub.add_parser("rules-list", help="list rule versions", allow_abbrev=False)
    rl.add_argument("--repo", required=True)

    rs = sub.add_parser("rules-show", help="print a rule version", allow_abbrev=False)
    rs.add_argument("--repo", required=True)
    rs.add_argument("--to", dest="version", metavar="VERSION", help="version to show (default: active)")

    rb = sub.add_parser("rules-rollback", help="restore an earlier rule version", allow_abbrev=False)
    rb.add_argument("--repo", required=True)
    rb.add_argument("--to", required=True)

    ar = sub.add_parser("agent-replay", help="re-run drift detection over a stored perf log", allow_abbrev=False)
    ar.add_argument("--perf", required=True)
    return p


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_text(Path(args.config).read_text(encoding="utf-8")) if args.config else SynthConfig()
    for flag, attr in (("groups", "num_groups"), ("leader_frac", "leadership_fraction"),
                       ("users", "num_users"), ("items", "num_items")):
        if getattr(args, flag) is not None:
            setattr(cfg, attr, getattr(args, flag))
    ds = generate_synthetic(cfg, args.seed)
    out = save_dataset(ds, args.out)
    print(json.dumps({"out": str(out), "users": ds.num_users, "items": ds.num_items, "groups": ds.num_groups,
                      "group_interactions": len(ds.group_item)}))
    return 0


def cmd_train(args) -> int:
    from dali.training import TrainConfig, WeightLossConfig, run_experiment

    ds = load_dataset(args.data)
    out = Path(args.out)
    repo = Repository.open_or_create(Path(args.repo) if args.repo else out / "repo")
    cfg = TrainConfig(
        pretrain_epochs=args.pretrain_epochs, joint_epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        dim=args.dim, seed=args.seed, use_dali=not args.no_dali,
        weight=WeightLossConfig(K=args.bench_k, delta=args.delta, seed=args.seed),
    )
    agent = select_agent(args.agent, timeout=args.agent_timeout)
    result = run_experiment(ds, cfg, out_dir=out, repo=repo, agent=agent)
    print(json.dumps(result.to_json()))
    return 0


def cmd_eval(args) -> int:
    from dali.training import Trainer

    out = Path(args.out)
    ckpt = out / "checkpoint.json"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    ds = load_dataset(args.data)
    repo = Repository.open(Path(args.repo) if args.repo else out / "repo")
    trainer = Trainer.from_checkpoint(ds, ckpt, repo)
    report = trainer.evaluate("test")
    print(json.dumps(report.to_json()))
    return 0


def cmd_rules_list(args) -> int:
    repo = Repository.open(args.repo)
    active = repo.active.version
    for v in repo.versions:
        mark = "*" if v.version == active else " "
        parent = "-" if v.parent is None else str(v.parent)
        print(f"{mark} {v.version}\t{v.fingerprint[:12]}\t{v.author}\tepoch={v.created_at}\tparent={parent}\t"
              f"{v.change_context}")
    return 0


def cmd_rules_show(args) -> int:
    repo = Repository.open(args.repo)
    rv = repo.get(args.version) if args.version else repo.active
    sys.stdout.write(rv.rules.canonical_text())
    return 0


def cmd_rules_rollback(args) -> int:
    repo = Repository.open(args.repo)
    rb = repo.rollback(args.to, trigger="manual")
    print(json.dumps(rb.to_json()))
    return 0


def cmd_agent_replay(args) -> int:
    if not Path(args.perf).is_file():
        raise FileNotFoundError(f"perf log not found: {args.perf}")
    records = [PerfRecord.from_json(d) for d in _read_jsonl(Path(args.perf))]
    cfg = TriggerConfig()
    for i in range(2, len(records) + 1):
        event = detect_drift(records[:i], cfg)
        if event is not None:
            deltas = json.dumps(event.deltas, sort_keys=True)
            print(f"epoch {event.epoch}\t{event.kind.value}\t{deltas}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "rules-list": cmd_rules_list,
    "rules-show": cmd_rules_show,
    "rules-rollback": cmd_rules_rollback,
    "agent-replay": cmd_agent_replay,
}


def parse_args(argv):
    return build_parser().parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - one-line report for scripts
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
