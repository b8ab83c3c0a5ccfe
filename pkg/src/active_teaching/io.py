"""Prediction ingestion, bank/label-state persistence and round reports.

Predictions travel as JSON Lines: a header line carrying the class count and
feature dimension, then one record per (image_id, source). Floats are written
with ``repr`` precision, so every value round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence, TextIO

import numpy as np

from .errors import PredictionFormatError, ValidationError
from .prototypes import PrototypeBank
from .roicm import PartitionResult, PseudoLabel, Verdict
from .selection import CandidateScore, SelectionPlan
from .structures import Box, ImagePrediction, RoiPrediction, Source

log = logging.getLogger(__name__)

PREDICTIONS_FORMAT = "active-teaching/predictions"
BANK_FORMAT = "active-teaching/prototype-bank"
REPORT_FORMAT = "active-teaching/round-report"
LABELS_FORMAT = "active-teaching/label-state"
FORMAT_VERSION = 1

INGEST_PROB_TOL = 1e-4
_RENORM_TOL = 1e-6

_ROI_KEYS = {"box", "confidence", "class_probs", "feature"}
_RECORD_KEYS = {"image_id", "source", "rois"}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# predictions


def roi_to_dict(roi: RoiPrediction) -> dict[str, Any]:
    d = dict(roi.extra)
    d.update(
        box=list(roi.box.as_tuple()),
        confidence=roi.confidence,
        class_probs=roi.class_probs.tolist(),
        feature=roi.feature.tolist(),
    )
    return d


def prediction_to_dict(pred: ImagePrediction) -> dict[str, Any]:
    d = dict(pred.extra)
    d.update(image_id=pred.image_id, source=pred.source.value,
             rois=[roi_to_dict(r) for r in pred.rois])
    return d


def write_predictions(path: str | Path, preds: Iterable[ImagePrediction], num_classes: int, dim: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({"format": PREDICTIONS_FORMAT, "version": FORMAT_VERSION,
                         "num_classes": num_classes, "dim": dim}) + "\n")
        for p in preds:
            fh.write(_dumps(prediction_to_dict(p)) + "\n")


def _parse_header(line: str, lineno: int) -> tuple[int, int]:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise PredictionFormatError(f"header is not valid JSON: {exc}", lineno) from None
    if not isinstance(header, dict) or header.get("format") != PREDICTIONS_FORMAT:
        raise PredictionFormatError(f"header must declare format {PREDICTIONS_FORMAT!r}", lineno)
    if header.get("version") != FORMAT_VERSION:
        raise PredictionFormatError(f"unsupported version {header.get('version')!r}", lineno)
    n_c, dim = header.get("num_classes"), header.get("dim")
    if not (isinstance(n_c, int) and n_c >= 1 and isinstance(dim, int) and dim >= 1):
        raise PredictionFormatError("header needs positive integer num_classes and dim", lineno)
    return n_c, dim


def _number_list(value, length: int, what: str, lineno: int) -> list[float]:
    if not isinstance(value, list) or len(value) != length:
        raise PredictionFormatError(f"{what} must be a list of {length} numbers", lineno)
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise PredictionFormatError(f"{what} contains a non-finite or non-numeric entry", lineno)
        out.append(float(v))
    return out


def _parse_roi(obj, n_c: int, dim: int, lineno: int) -> RoiPrediction:
    if not isinstance(obj, dict) or not _ROI_KEYS <= obj.keys():
        raise PredictionFormatError(f"RoI needs fields {sorted(_ROI_KEYS)}", lineno)
    box = _number_list(obj["box"], 4, "box", lineno)
    probs = np.array(_number_list(obj["class_probs"], n_c, "class_probs", lineno))
    feature = _number_list(obj["feature"], dim, "feature", lineno)
    conf = obj["confidence"]
    if isinstance(conf, bool) or not isinstance(conf, (int, float)):
        raise PredictionFormatError("confidence must be a number", lineno)
    total = float(probs.sum())
    if abs(total - 1.0) > INGEST_PROB_TOL:
        raise PredictionFormatError(f"class_probs sum to {total:.6g}, expected 1", lineno)
    if abs(total - 1.0) > _RENORM_TOL:
        probs = probs / total
    extra = {k: v for k, v in obj.items() if k not in _ROI_KEYS}
    try:
        return RoiPrediction(Box.from_seq(box), float(conf), probs, feature, extra)
    except ValidationError as exc:
        raise PredictionFormatError(str(exc), lineno) from None


def _parse_record(line: str, n_c: int, dim: int, lineno: int) -> ImagePrediction:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise PredictionFormatError(f"not valid JSON: {exc}", lineno) from None
    if not isinstance(obj, dict) or not _RECORD_KEYS <= obj.keys():
        raise PredictionFormatError(f"record needs fields {sorted(_RECORD_KEYS)}", lineno)
    image_id, source, rois = obj["image_id"], obj["source"], obj["rois"]
    if not isinstance(image_id, str) or not image_id:
        raise PredictionFormatError("image_id must be a non-empty string", lineno)
    if source not in (Source.TEACHER.value, Source.STUDENT.value):
        raise PredictionFormatError(f"source must be teacher or student, got {source!r}", lineno)
    if not isinstance(rois, list):
        raise PredictionFormatError("rois must be a list", lineno)
    parsed = tuple(_parse_roi(r, n_c, dim, lineno) for r in rois)
    extra = {k: v for k, v in obj.items() if k not in _RECORD_KEYS}
    return ImagePrediction(image_id, Source(source), parsed, extra)


def read_predictions(path: str | Path) -> tuple[int, int, list[ImagePrediction]]:
    """Parse and validate a prediction file; returns (num_classes, dim, records)."""
    header = None
    records: list[ImagePrediction] = []
    seen: set[tuple[str, Source]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if header is None:
                header = _parse_header(line, lineno)
                continue
            rec = _parse_record(line, *header, lineno)
            key = (rec.image_id, rec.source)
            if key in seen:
                raise PredictionFormatError(
                    f"duplicate record for {rec.image_id!r} ({rec.source.value})", lineno)
            seen.add(key)
            records.append(rec)
    if header is None:
        raise PredictionFormatError("missing header line", 1)
    return header[0], header[1], records


def pair_predictions(
    records: Iterable[ImagePrediction],
) -> tuple[dict[str, tuple[ImagePrediction, ImagePrediction]], list[str]]:
    """Group records by image; images lacking either source are returned separately."""
    by_image: dict[str, dict[Source, ImagePrediction]] = {}
    for rec in records:
        by_image.setdefault(rec.image_id, {})[rec.source] = rec
    paired, incomplete = {}, []
    for image_id, srcs in by_image.items():
        if Source.TEACHER in srcs and Source.STUDENT in srcs:
            paired[image_id] = (srcs[Source.TEACHER], srcs[Source.STUDENT])
        else:
            incomplete.append(image_id)
    return paired, sorted(incomplete)


def ingest(path: str | Path) -> dict[str, tuple[ImagePrediction, ImagePrediction]]:
    """Map image_id -> (teacher, student). Incomplete images are logged and dropped."""
    _, _, records = read_predictions(path)
    paired, incomplete = pair_predictions(records)
    for image_id in incomplete:
        log.warning("%s: missing teacher or student predictions; excluded", image_id)
    return paired


# ---------------------------------------------------------------------------
# prototype bank

_BANK_MAGIC = b"ATPB"
_BANK_HEADER = struct.Struct("<4sHIIddI")


def bank_to_dict(bank: PrototypeBank) -> dict[str, Any]:
    return {
        "format": BANK_FORMAT,
        "version": FORMAT_VERSION,
        "dim": bank.dim,
        "num_classes": bank.num_classes,
        "alpha": bank.alpha,
        "sim_threshold": bank.sim_threshold,
        "round_index": bank.round_index,
        "prototypes": [
            {"present": bool(bank.present[k]), "vector": bank.prototypes[k].tolist()}
            for k in range(bank.num_classes)
        ],
    }


def bank_from_dict(d: dict[str, Any]) -> PrototypeBank:
    if d.get("format") != BANK_FORMAT or d.get("version") != FORMAT_VERSION:
        raise ValidationError("not a prototype bank export")
    rows = d["prototypes"]
    if len(rows) != d["num_classes"] or any(len(r["vector"]) != d["dim"] for r in rows):
        raise ValidationError("prototype bank shape does not match its header")
    protos = np.array([r["vector"] for r in rows], dtype=np.float64).reshape(d["num_classes"], d["dim"])
    return PrototypeBank(protos, [r["present"] for r in rows], d["alpha"], d["sim_threshold"],
                         d["round_index"])


def bank_to_bytes(bank: PrototypeBank) -> bytes:
    parts = [_BANK_HEADER.pack(_BANK_MAGIC, FORMAT_VERSION, bank.dim, bank.num_classes,
                               bank.alpha, bank.sim_threshold, bank.round_index)]
    for k in range(bank.num_classes):
        parts.append(struct.pack("<B", int(bank.present[k])))
        parts.append(bank.prototypes[k].astype("<f8").tobytes())
    return b"".join(parts)


def bank_from_bytes(data: bytes) -> PrototypeBank:
    if len(data) < _BANK_HEADER.size:
        raise ValidationError("truncated prototype bank")
    magic, version, dim, n_c, alpha, s, round_index = _BANK_HEADER.unpack_from(data)
    if magic != _BANK_MAGIC or version != FORMAT_VERSION:
        raise ValidationError("not a prototype bank file")
    rec = 1 + 8 * dim
    if len(data) != _BANK_HEADER.size + n_c * rec:
        raise ValidationError("prototype bank size does not match its header")
    protos = np.zeros((n_c, dim))
    present = np.zeros(n_c, dtype=bool)
    off = _BANK_HEADER.size
    for k in range(n_c):
        present[k] = data[off] != 0
        protos[k] = np.frombuffer(data, dtype="<f8", count=dim, offset=off + 1)
        off += rec
    return PrototypeBank(protos, present, alpha, s, round_index)


def save_bank(bank: PrototypeBank, path: str | Path, text: bool | None = None) -> None:
    """Binary by default; ``.json`` paths (or ``text=True``) get the text export."""
    path = Path(path)
    if text is None:
        text = path.suffix == ".json"
    if text:
        _write_json(path, bank_to_dict(bank))
    else:
        path.write_bytes(bank_to_bytes(bank))


def load_bank(path: str | Path) -> PrototypeBank:
    data = Path(path).read_bytes()
    if data[:4] == _BANK_MAGIC:
        return bank_from_bytes(data)
    return bank_from_dict(json.loads(data))


# ---------------------------------------------------------------------------
# label state


@dataclass(frozen=True)
class LabelState:
    round_index: int
    labeled: tuple[str, ...]
    unlabeled: tuple[str, ...]
    initial_size: int
    history: tuple[SelectionPlan, ...] = field(default=())

    def __post_init__(self):
        if set(self.labeled) & set(self.unlabeled):
            raise ValidationError("labeled and unlabeled sets overlap")
        added = sum(len(p.selected) for p in self.history)
        if added != len(self.labeled) - self.initial_size:
            raise ValidationError("selection history does not account for the labeled set")


def _plan_summary(plan: SelectionPlan) -> dict[str, Any]:
    return {"round_index": plan.round_index, "budget": plan.budget, "p": plan.p,
            "selected": list(plan.selected)}


def save_label_state(state: LabelState, path: str | Path) -> None:
    _write_json(Path(path), {
        "format": LABELS_FORMAT, "version": FORMAT_VERSION,
        "round_index": state.round_index, "initial_size": state.initial_size,
        "labeled": list(state.labeled), "unlabeled": list(state.unlabeled),
        "history": [_plan_summary(p) for p in state.history],
    })


def load_label_state(path: str | Path) -> LabelState:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") != LABELS_FORMAT:
        raise ValidationError(f"{path}: not a label-state file")
    history = tuple(SelectionPlan(h["round_index"], h["budget"], h["p"], (), tuple(h["selected"]))
                    for h in d["history"])
    return LabelState(d["round_index"], tuple(d["labeled"]), tuple(d["unlabeled"]),
                      d["initial_size"], history)


# ---------------------------------------------------------------------------
# round reports


@dataclass(frozen=True, eq=False)
class RoundReport:
    plan: SelectionPlan
    images: tuple[dict[str, Any], ...]
    aggregates: dict[str, Any]
    bank: PrototypeBank | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def _roi_classes(result: PartitionResult) -> list[int]:
    return sorted({r.label for r in result.rois})


def write_report(
    path: str | Path,
    plan: SelectionPlan,
    partitions: Sequence[PartitionResult],
    bank: PrototypeBank | None = None,
    lambda_u: float = 1.0,
    image_classes: dict[str, Sequence[int]] | None = None,
    extra: dict[str, Any] | None = None,
) -> RoundReport:
    """Write one round's per-image verdicts, scores and ranks plus aggregates.

    Class coverage of the selected batch counts distinct teacher argmax
    classes unless ``image_classes`` supplies better labels (the simulator
    passes ground truth).
    """
    if image_classes is None:
        image_classes = {r.image_id: _roi_classes(r) for r in partitions}
    ranks = {c.image_id: (k + 1, c) for k, c in enumerate(plan.ranked)}
    selected = set(plan.selected)
    rows = []
    for r in sorted(partitions, key=lambda r: (ranks.get(r.image_id, (math.inf,))[0], r.image_id)):
        row: dict[str, Any] = {"image_id": r.image_id, "verdict": r.verdict.value,
                               "classes": [int(k) for k in image_classes.get(r.image_id, [])]}
        if r.verdict is Verdict.CONSISTENT:
            row.update(d_kl=r.d_kl, weight=r.weight, unsup_loss_scale=lambda_u * r.weight,
                       pseudo_labels=[{"box": list(pl.box.as_tuple()), "class_index": pl.class_index,
                                       "confidence": pl.confidence} for pl in r.pseudo_labels])
        elif r.verdict is Verdict.DIVERGENT:
            row["s_unc"] = r.s_unc
        if r.image_id in ranks:
            rank, c = ranks[r.image_id]
            row.update(rank=rank, s_unc=c.s_unc, s_div=c.s_div, s_sel=c.s_sel,
                       norm_unc=c.norm_unc, norm_div=c.norm_div, selected=r.image_id in selected)
        rows.append(row)
    if len(ranks) != sum(1 for row in rows if "rank" in row):
        raise ValidationError("plan ranks images that are not among the partitions")

    weights = [r.weight for r in partitions if r.verdict is Verdict.CONSISTENT]
    covered = {int(k) for i in plan.selected for k in image_classes.get(i, [])}
    aggregates = {
        "n_images": len(partitions),
        "n_consistent": len(weights),
        "n_divergent": sum(1 for r in partitions if r.verdict is Verdict.DIVERGENT),
        "n_unscorable": sum(1 for r in partitions if r.verdict is Verdict.UNSCORABLE),
        "n_candidates": plan.pool_size,
        "n_selected": len(plan.selected),
        "mean_weight": float(np.mean(weights)) if weights else 0.0,
        "selected_class_coverage": len(covered),
    }
    doc = {
        "format": REPORT_FORMAT, "version": FORMAT_VERSION,
        "round_index": plan.round_index, "budget": plan.budget, "p": plan.p,
        "lambda_u": lambda_u,
        "selected": list(plan.selected),
        "aggregates": aggregates,
        "images": rows,
        "bank": bank_to_dict(bank) if bank is not None else None,
        "extra": extra or {},
    }
    _write_json(Path(path), doc)
    return RoundReport(plan, tuple(rows), aggregates, bank, extra or {})


def read_report(path: str | Path) -> RoundReport:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") != REPORT_FORMAT:
        raise ValidationError(f"{path}: not a round report")
    ranked_rows = sorted((r for r in d["images"] if "rank" in r), key=lambda r: r["rank"])
    ranked = tuple(CandidateScore(r["image_id"], r["s_unc"], r["s_div"], r["s_sel"],
                                  r["norm_unc"], r["norm_div"]) for r in ranked_rows)
    plan = SelectionPlan(d["round_index"], d["budget"], d["p"], ranked, tuple(d["selected"]))
    bank = bank_from_dict(d["bank"]) if d.get("bank") else None
    return RoundReport(plan, tuple(d["images"]), d["aggregates"], bank, d.get("extra", {}))


def partitions_to_rows(partitions: Sequence[PartitionResult], s_div: dict[str, float]) -> list[dict]:
    """Scored-but-unselected round state, as written by the ``score`` command."""
    rows = []
    for r in partitions:
        row = {"image_id": r.image_id, "verdict": r.verdict.value, "d_kl": r.d_kl,
               "weight": r.weight, "s_unc": r.s_unc, "s_div": s_div.get(r.image_id),
               "classes": _roi_classes(r)}
        if r.pseudo_labels is not None:
            row["pseudo_labels"] = [{"box": list(pl.box.as_tuple()), "class_index": pl.class_index,
                                     "confidence": pl.confidence} for pl in r.pseudo_labels]
        rows.append(row)
    return rows


def partitions_from_rows(rows: Sequence[dict]) -> list[PartitionResult]:
    out = []
    for row in rows:
        labels = None
        if row.get("pseudo_labels") is not None:
            labels = tuple(PseudoLabel(Box.from_seq(pl["box"]), pl["class_index"], pl["confidence"])
                           for pl in row["pseudo_labels"])
        out.append(PartitionResult(row["image_id"], Verdict(row["verdict"]), row.get("d_kl"),
                                   row.get("weight"), row.get("s_unc"), labels))
    return out


SUMMARY_COLUMNS = (
    "round", "label_fraction", "n_consistent", "n_divergent", "n_unscorable", "mean_weight",
    "mean_s_unc", "n_selected", "selected_class_coverage", "labeled_class_coverage", "noise_level",
)


def write_summary(path: str | Path, rows: Sequence[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_summary(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(rows: Sequence[dict[str, Any]], columns: Sequence[str], out: TextIO) -> None:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    cells = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    out.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
    for row in cells:
        out.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")


# ---------------------------------------------------------------------------
# simulator traces


def write_trace(trace, out_dir: str | Path, pool=None, meta: dict[str, Any] | None = None) -> None:
    """Persist a :class:`~active_teaching.simulator.LoopTrace` as a run directory.

    Layout: ``run.json``, ``summary.csv`` and one ``round_NNN`` directory per
    round (``round_000`` is the initial state) with ``labels.json``,
    ``bank.bin`` and, for real rounds, ``report.json``. Nothing time- or
    host-dependent is written, so replays are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = pool.by_id() if pool is not None else {}
    all_ids = set(trace.initial_labeled)
    if trace.rounds:
        all_ids |= set(trace.rounds[0].unlabeled) | set(trace.rounds[0].labeled)
    n_init = len(trace.initial_labeled)

    _write_json(out / "run.json", {
        "strategy": trace.strategy, "seed": trace.seed, "budget": trace.budget,
        "rounds": len(trace.rounds), "config": trace.config.to_dict(),
        "final_mean_s_unc": trace.final_mean_s_unc, "s_unc_reduction": trace.s_unc_reduction,
        **(meta or {}),
    })

    r0 = out / "round_000"
    r0.mkdir(exist_ok=True)
    initial_unlabeled = tuple(sorted(all_ids - set(trace.initial_labeled))) if trace.rounds else ()
    save_label_state(LabelState(0, trace.initial_labeled, initial_unlabeled, n_init), r0 / "labels.json")
    save_bank(trace.initial_bank, r0 / "bank.bin")

    summary = []
    history: list[SelectionPlan] = []
    for rec in trace.rounds:
        rd = out / f"round_{rec.round_index:03d}"
        rd.mkdir(exist_ok=True)
        classes = None
        if by_id:
            classes = {i: sorted({int(k) for k in by_id[i].classes}) for i in
                       (r.image_id for r in rec.partitions)}
        report = write_report(rd / "report.json", rec.plan, rec.partitions, rec.bank,
                              trace.config.lambda_u, classes,
                              extra={"label_fraction": rec.label_fraction, "mean_s_unc": rec.mean_s_unc,
                                     "true_selected_classes": list(rec.selected_classes),
                                     "labeled_class_counts": list(rec.quality.labeled_class_counts),
                                     "noise_level": rec.quality.noise_level})
        save_bank(rec.bank, rd / "bank.bin")
        history.append(rec.plan)
        save_label_state(LabelState(rec.round_index, rec.labeled, rec.unlabeled, n_init, tuple(history)),
                         rd / "labels.json")
        agg = report.aggregates
        summary.append({
            "round": rec.round_index, "label_fraction": rec.label_fraction,
            "n_consistent": agg["n_consistent"], "n_divergent": agg["n_divergent"],
            "n_unscorable": agg["n_unscorable"], "mean_weight": agg["mean_weight"],
            "mean_s_unc": rec.mean_s_unc, "n_selected": agg["n_selected"],
            "selected_class_coverage": rec.selected_coverage,
            "labeled_class_coverage": rec.quality.classes_covered,
            "noise_level": rec.quality.noise_level,
        })
    write_summary(out / "summary.csv", summary)
