"""Command line entry point.

Exit status: 0 success, 1 reward-check mismatch or unexpected failure,
2 invalid config or arguments, 3 missing file, 4 malformed dataset,
5 unreadable checkpoint, 6 malformed or empty reward fixture. Failures print
exactly one ``error <CODE>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import HarnessError, cmd_eval, cmd_gen_data, cmd_reward_check, cmd_train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise HarnessError("E_CONFIG", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="auxlatent", description="Toy latent-visual-reasoning trainer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the curriculum and RL")
    t.add_argument("--config", help="key = value config file (defaults apply when omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory")

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--max-new-tokens", type=int, default=64)
    e.add_argument("--out", help="write the JSON report here")

    r = sub.add_parser("reward-check", help="recompute a reward fixture")
    r.add_argument("fixture", nargs="?", help="fixture JSONL (shipped fixture when omitted)")
    r.add_argument("--out", help="write per-case JSONL results here")

    g = sub.add_parser("gen-data", help="write a synthetic task dataset")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mc-fraction", type=float, default=0.25)
    g.add_argument("--out", required=True)
    return p


def _run(args) -> int:
    if args.command == "train":
        run_dir = cmd_train(args.config, seed=args.seed, out=args.out)
        print(run_dir)
        return 0
    if args.command == "eval":
        report = cmd_eval(args.checkpoint, args.dataset, args.out, args.max_new_tokens)
        report.pop("predictions")
        print(json.dumps(report, sort_keys=True))
        return 0
    if args.command == "reward-check":
        rows, ok = cmd_reward_check(args.fixture)
        for row in rows:
            status = "PASS" if row["ok"] else "FAIL"
            print(f"{status} {row['name']}" + ("" if row["ok"] else " " + "; ".join(row["diffs"])))
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
        return 0 if ok else 1
    path = cmd_gen_data(args.n, args.seed, args.out, args.mc_fraction)
    print(path)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(build_parser().parse_args(argv))
    except HarnessError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.exit_status
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        print(f"error E_INTERNAL: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
