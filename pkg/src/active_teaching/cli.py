"""Command-line entry point: ingest, score, select, loop, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import io
from .config import EngineConfig, load_config, load_mapping
from .errors import ValidationError
from .prototypes import score_and_update_divergent
from .roicm import Verdict, partition_all
from .selection import plan_round
from .simulator import STRATEGIES, OracleSkill, SyntheticPoolSpec, generate_pool, run_loop

log = logging.getLogger("active_teaching")

SCORES_FILE = "scores.json"
REPORT_FILE = "report.json"


def cmd_ingest(args) -> int:
    n_c, dim, records = io.read_predictions(args.preds)
    paired, incomplete = io.pair_predictions(records)
    summary = {
        "ok": True, "num_classes": n_c, "dim": dim, "records": len(records),
        "images": len(paired), "incomplete": incomplete,
        "rois": sum(len(r.rois) for r in records),
    }
    if not args.validate:
        summary = {k: summary[k] for k in ("ok", "images", "incomplete")}
    print(json.dumps(summary, indent=2))
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    n_c, dim, records = io.read_predictions(args.preds)
    if (n_c, dim) != (cfg.num_classes, cfg.dim):
        raise ValidationError(f"prediction file has N_c={n_c}, D={dim}; config has "
                              f"N_c={cfg.num_classes}, D={cfg.dim}")
    paired, incomplete = io.pair_predictions(records)
    for image_id in incomplete:
        log.warning("%s: missing teacher or student predictions; excluded", image_id)
    bank = io.load_bank(args.bank)
    if (bank.num_classes, bank.dim) != (cfg.num_classes, cfg.dim):
        raise ValidationError("bank shape does not match config")

    partitions = partition_all(paired, cfg)
    divergent = [(p.image_id, p.s_unc, p.rois) for p in partitions if p.verdict is Verdict.DIVERGENT]
    new_bank, div = score_and_update_divergent(bank, divergent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io._write_json(out / SCORES_FILE, {
        "round_index": bank.round_index + 1,
        "config": cfg.to_dict(),
        "partitions": io.partitions_to_rows(partitions, {k: v[0] for k, v in div.items()}),
    })
    io.save_bank(new_bank.replace(round_index=bank.round_index + 1), out / "bank.bin")
    counts = {v.value: sum(1 for p in partitions if p.verdict is v) for v in Verdict}
    print(json.dumps({"out": str(out), **counts}, indent=2))
    return 0


def cmd_select(args) -> int:
    rd = Path(args.round_dir)
    scores = json.loads((rd / SCORES_FILE).read_text(encoding="utf-8"))
    cfg = EngineConfig.from_mapping(scores["config"])
    p = cfg.p if args.p is None else args.p
    rows = scores["partitions"]
    partitions = io.partitions_from_rows(rows)
    candidates = [(r["image_id"], r["s_unc"], r["s_div"]) for r in rows if r["verdict"] == Verdict.DIVERGENT.value]
    plan = plan_round(candidates, args.budget, p, round_index=scores["round_index"])
    bank_path = rd / "bank.bin"
    bank = io.load_bank(bank_path) if bank_path.exists() else None
    io.write_report(rd / REPORT_FILE, plan, partitions, bank, cfg.lambda_u,
                    {r["image_id"]: r["classes"] for r in rows})
    for image_id in plan.selected:
        print(image_id)
    return 0


def cmd_loop(args) -> int:
    data = load_mapping(args.spec) if args.spec else {}
    pool_kw = dict(data.get("pool", {}))
    if args.seed is not None:
        pool_kw["seed"] = args.seed
    spec = SyntheticPoolSpec.from_mapping(pool_kw)
    oracle = OracleSkill.from_mapping(data.get("oracle", {}))
    cfg_kw = {"num_classes": spec.num_classes, "dim": spec.dim, **data.get("engine", {})}
    if args.config:
        cfg_kw.update(load_mapping(args.config))
    cfg = EngineConfig.from_mapping(cfg_kw)
    strategy = args.strategy or data.get("strategy", "combined")
    init_fraction = float(data.get("init_fraction", 0.05))

    pool = generate_pool(spec)
    trace = run_loop(pool, oracle, args.rounds, args.budget, cfg, strategy, init_fraction,
                     seed=spec.seed)
    io.write_trace(trace, args.out, pool, meta={
        "pool": spec.to_dict(), "oracle": oracle.to_dict(), "init_fraction": init_fraction,
    })
    print(json.dumps({
        "out": str(args.out), "rounds": len(trace.rounds),
        "final_labeled": len(trace.final_labeled),
        "classes_covered": trace.final_quality.classes_covered,
        "s_unc_reduction": trace.s_unc_reduction,
    }, indent=2))
    return 0


def _number(text: str):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


REPORT_COLUMNS = ("rank", "image_id", "verdict", "selected", "d_kl", "weight", "s_unc", "s_div", "s_sel")


def cmd_report(args) -> int:
    rd = Path(args.round_dir)
    if (rd / REPORT_FILE).exists():
        rows = list(io.read_report(rd / REPORT_FILE).images)
        columns = REPORT_COLUMNS
    elif (rd / "summary.csv").exists():
        rows = [{k: _number(v) for k, v in row.items()} for row in io.read_summary(rd / "summary.csv")]
        columns = io.SUMMARY_COLUMNS
    else:
        raise ValidationError(f"{rd}: no {REPORT_FILE} or summary.csv")
    if args.format == "csv":
        w = csv.DictWriter(sys.stdout, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        io.format_table(rows, columns, sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="active-teaching", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and validate a prediction file")
    p.add_argument("--preds", required=True)
    p.add_argument("--validate", action="store_true", help="print full validation summary")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", help="partition images and compute uncertainty/diversity")
    p.add_argument("--preds", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="rank a scored round and pick the labeling batch")
    p.add_argument("--round-dir", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--p", type=float, default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("loop", help="run the simulated multi-round loop")
    p.add_argument("--spec", help="YAML/JSON with optional pool, oracle, engine sections")
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="engine config overriding the spec's engine section")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("report", help="print a round report or a loop summary")
    p.add_argument("--round-dir", required=True)
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
