"""Labeled datasets and the two evaluation protocols.

``STEP1_ONLY`` runs the lister/reviewer debate and scores the ranked
candidates with top-k recall. ``FULL`` runs whole scans and tabulates
TP/FP/TN/FN per program.

Dataset format: one JSON object per line::

    {"id": "prog-01", "function": "int f(char *p) {\\n  ...\\n}",
     "cwes": ["CWE-120"], "project_root": "programs/prog-01",
     "set_tag": "CONTEXT_DEPENDENT"}

Newlines inside ``function`` use the ordinary JSON ``\\n`` escape.
Relative ``project_root`` paths resolve against the dataset file.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .agents import AgentOutputUnusable, AgentTeam
from .config import Config, ProviderSession
from .cwe import InvalidCweId, normalize_cwe_id, split_cwe_ids
from .llm import LLMError
from .pipeline import ScanReport, scan, step1_list_candidates
from .serialize import atomic_write, dumps

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 3, 5, 10, 20)
STEP1_ONLY, FULL = "STEP1_ONLY", "FULL"
CONTEXT_DEPENDENT, CONTEXT_INDEPENDENT = "CONTEXT_DEPENDENT", "CONTEXT_INDEPENDENT"


class EvalError(Exception):
    pass


class DatasetNotFound(EvalError):
    pass


class EmptyDataset(EvalError):
    pass


class DuplicateId(EvalError):
    pass


class EmptySamples(EvalError):
    pass


class EmptyInput(EvalError):
    pass


@dataclass(frozen=True)
class LabeledFunction:
    id: str
    function_text: str
    ground_truth_cwes: tuple[str, ...]
    project_root: str | None = None
    set_tag: str | None = None

    @property
    def expected_truth(self) -> tuple[str, ...]:
        """Truth used for confusion counts.

        Context-dependent programs are safe once their context is seen, so
        none of their candidates count as true.
        """
        return () if self.set_tag == CONTEXT_DEPENDENT else self.ground_truth_cwes


@dataclass(frozen=True)
class LineError:
    line: int
    message: str


@dataclass
class Dataset:
    functions: list[LabeledFunction]
    errors: list[LineError] = field(default_factory=list)
    path: str | None = None

    def __iter__(self):
        return iter(self.functions)

    def __len__(self) -> int:
        return len(self.functions)

    def __getitem__(self, i):
        return self.functions[i]


def _parse_record(obj, base: Path) -> LabeledFunction:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    sid = obj.get("id")
    if not isinstance(sid, str) or not sid:
        raise ValueError("missing or empty 'id'")
    function = obj.get("function")
    if not isinstance(function, str) or not function.strip():
        raise ValueError("missing or empty 'function'")
    if "cwes" not in obj:
        raise ValueError("missing ground truth field 'cwes'")
    raw = obj["cwes"]
    if not isinstance(raw, list):
        raise ValueError("'cwes' must be a list")
    truth: list[str] = []
    for item in raw:
        try:
            for cid in split_cwe_ids(item):
                if cid not in truth:
                    truth.append(cid)
        except InvalidCweId as exc:
            raise ValueError(str(exc)) from None
    root = obj.get("project_root")
    if root is not None:
        if not isinstance(root, str):
            raise ValueError("'project_root' must be a string")
        root = str((base / root).resolve()) if not os.path.isabs(root) else root
    tag = obj.get("set_tag")
    if tag is not None and tag not in (CONTEXT_DEPENDENT, CONTEXT_INDEPENDENT):
        raise ValueError(f"unknown set_tag {tag!r}")
    return LabeledFunction(sid, function, tuple(truth), root, tag)


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Load a JSON-lines dataset, collecting malformed lines instead of failing."""
    p = Path(path)
    if not p.is_file():
        raise DatasetNotFound(f"dataset not found: {path}")
    functions: list[LabeledFunction] = []
    errors: list[LineError] = []
    seen: dict[str, int] = {}
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = _parse_record(json.loads(line), p.parent)
            except ValueError as exc:
                errors.append(LineError(lineno, str(exc)))
                continue
            if record.id in seen:
                raise DuplicateId(f"duplicate id {record.id!r} on lines {seen[record.id]} and {lineno}")
            seen[record.id] = lineno
            functions.append(record)
    for err in errors:
        log.warning("%s:%d: %s", path, err.line, err.message)
    if not functions:
        raise EmptyDataset(f"no valid records in {path}")
    return Dataset(functions, errors, str(p))


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class RecallTable:
    values: dict[int, float]
    n: int
    hits: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, k: int) -> float:
        return self.values[k]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "recall": {f"top{k}": v for k, v in sorted(self.values.items())},
            "hits": {f"top{k}": v for k, v in sorted(self.hits.items())},
        }


def _norm_ids(ids: Iterable) -> list[str]:
    return [normalize_cwe_id(i) for i in ids]


def topk_recall(
    samples: Sequence[tuple[Sequence, Iterable]], ks: Sequence[int] = DEFAULT_KS
) -> RecallTable:
    """Fraction of samples with a ground-truth id among the first k ranked ids."""
    if not samples:
        raise EmptySamples("top-k recall needs at least one sample")
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise ValueError("every k must be >= 1")
    # first rank (1-based) at which each sample hits; None for never
    first_hit: list[int | None] = []
    for ranking, truth in samples:
        truth_set = set(_norm_ids(truth))
        pos = next((i for i, cid in enumerate(_norm_ids(ranking), 1) if cid in truth_set), None)
        first_hit.append(pos)
    hits = {k: sum(1 for p in first_hit if p is not None and p <= k) for k in ks}
    n = len(samples)
    return RecallTable({k: hits[k] / n for k in ks}, n, hits)


@dataclass(frozen=True)
class ConfusionRow:
    program_id: str
    tp: int
    fp: int
    tn: int
    fn: int
    missed_at_step1: int = 0

    def cells(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    def to_dict(self) -> dict:
        return {
            "program_id": self.program_id,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "missed_at_step1": self.missed_at_step1,
        }


def confusion_for_program(report: ScanReport, truth: Iterable, program_id: str = "") -> ConfusionRow:
    """Count decisions against ground truth over the report's distinct candidates.

    FN includes truth ids that never became candidates; those are also
    counted in ``missed_at_step1``.
    """
    truth_set = set(_norm_ids(truth))
    decided = {d.cwe_id: d.final_decision for d in report.decisions}
    candidates = set(report.ranked_ids())
    confirmed = {c for c in candidates if decided.get(c, "confirmed") == "confirmed"}
    rejected = candidates - confirmed
    missed = len(truth_set - candidates)
    return ConfusionRow(
        program_id or report.function_hash,
        tp=len(confirmed & truth_set),
        fp=len(confirmed - truth_set),
        tn=len(rejected - truth_set),
        fn=len(rejected & truth_set) + missed,
        missed_at_step1=missed,
    )


@dataclass(frozen=True)
class CandidateStats:
    min: float
    median: float
    mean: float
    max: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.min, self.median, self.mean, self.max

    def to_dict(self) -> dict:
        return {"min": self.min, "median": self.median, "mean": self.mean, "max": self.max}


def candidate_stats(reports_or_counts: Iterable) -> CandidateStats:
    """Min, median, mean and max candidate count; median and mean to 2 decimals."""
    counts = [
        len(r.candidates) if isinstance(r, ScanReport) else int(r) for r in reports_or_counts
    ]
    if not counts:
        raise EmptyInput("candidate_stats needs at least one count")
    return CandidateStats(
        min(counts),
        round(statistics.median(counts), 2),
        round(statistics.fmean(counts), 2),
        max(counts),
    )


# -- driver ------------------------------------------------------------------


@dataclass
class SampleOutcome:
    sample_id: str
    ranked_ids: list[str] = field(default_factory=list)
    report: ScanReport | None = None
    error: str | None = None


@dataclass
class EvalResult:
    mode: str
    single_agent: bool
    outcomes: list[SampleOutcome]
    recall: RecallTable | None = None
    confusion: list[ConfusionRow] = field(default_factory=list)
    stats: CandidateStats | None = None
    dataset_errors: list[LineError] = field(default_factory=list)

    @property
    def errors(self) -> list[tuple[str, str]]:
        return [(o.sample_id, o.error) for o in self.outcomes if o.error]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "arm": "single-agent" if self.single_agent else "multi-agent",
            "recall": self.recall.to_dict() if self.recall else None,
            "confusion": [row.to_dict() for row in self.confusion],
            "candidate_stats": self.stats.to_dict() if self.stats else None,
            "samples": [
                {
                    "id": o.sample_id,
                    "ranked_ids": o.ranked_ids,
                    "error": o.error,
                    "context_free": bool(o.report and o.report.context_free),
                    "degraded": bool(o.report and o.report.degraded),
                }
                for o in self.outcomes
            ],
            "errors": [{"id": sid, "error": msg} for sid, msg in self.errors],
            "dataset_errors": [{"line": e.line, "error": e.message} for e in self.dataset_errors],
        }


SessionFactory = Callable[[Config, LabeledFunction], ProviderSession]


def _default_session(config: Config, sample: LabeledFunction) -> ProviderSession:
    return ProviderSession(config, sample_id=sample.id)


def run_eval(
    dataset: Dataset | Sequence[LabeledFunction],
    config: Config,
    mode: str = FULL,
    session_factory: SessionFactory = _default_session,
    ks: Sequence[int] = DEFAULT_KS,
    report_dir: str | os.PathLike | None = None,
) -> EvalResult:
    """Evaluate every sample; per-sample failures are recorded, not raised."""
    if mode not in (STEP1_ONLY, FULL):
        raise ValueError(f"unknown mode {mode!r}")
    samples = list(dataset)
    if not samples:
        raise EmptyDataset("dataset is empty")
    outcomes: list[SampleOutcome] = []
    rows: list[ConfusionRow] = []
    recall_samples = []
    counts = []
    for sample in samples:
        outcome = SampleOutcome(sample.id)
        outcomes.append(outcome)
        try:
            session = session_factory(config, sample)
            if mode == STEP1_ONLY:
                team = AgentTeam(session.llm, config.generation_params)
                candidates, _ = step1_list_candidates(
                    team, sample.function_text, config.max_debate_iterations, config.single_agent
                )
                outcome.ranked_ids = [c.cwe_id for c in candidates]
            else:
                report = scan(
                    sample.function_text, sample.project_root, config, session.llm, session.embedder
                )
                outcome.report = report
                outcome.ranked_ids = report.ranked_ids()
                if report_dir is not None:
                    report.write(report_dir)
                if report.error:
                    outcome.error = report.error
            session.save({"sample_id": sample.id})
        except (AgentOutputUnusable, LLMError, OSError, ValueError) as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
        if outcome.error:
            log.error("sample %s failed: %s", sample.id, outcome.error)
            continue
        recall_samples.append((outcome.ranked_ids, sample.ground_truth_cwes))
        counts.append(len(outcome.ranked_ids))
        if outcome.report is not None:
            rows.append(confusion_for_program(outcome.report, sample.expected_truth, sample.id))
    result = EvalResult(
        mode,
        config.single_agent,
        outcomes,
        confusion=rows,
        dataset_errors=list(getattr(dataset, "errors", [])),
    )
    if recall_samples:
        result.recall = topk_recall(recall_samples, ks)
        result.stats = candidate_stats(counts)
    return result


# -- output ------------------------------------------------------------------


def format_recall_table(tables: Sequence[tuple[str, RecallTable]]) -> str:
    ks = sorted({k for _, t in tables for k in t.values})
    head = ["", *(f"Top-{k}" for k in ks), "n"]
    rows = [[name, *(f"{t.values[k] * 100:.1f}%" for k in ks), str(t.n)] for name, t in tables]
    return _aligned([head, *rows])


def format_confusion_table(rows: Sequence[ConfusionRow]) -> str:
    head = ["Program", "#TP", "#FP", "#TN", "#FN"]
    body = [
        [r.program_id, str(r.tp), str(r.fp), str(r.tn), f"{r.fn}*" if r.missed_at_step1 else str(r.fn)]
        for r in rows
    ]
    text = _aligned([head, *body])
    if any(r.missed_at_step1 for r in rows):
        text += "* includes ground-truth CWEs never listed as candidates\n"
    return text


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append(" | ".join(cells).rstrip())
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_eval_outputs(result: EvalResult, out_dir: str | os.PathLike, name: str | None = None) -> dict[str, Path]:
    """Write the plain-text table and the machine-readable records."""
    out = Path(out_dir)
    name = name or f"{result.mode.lower()}-{'single' if result.single_agent else 'multi'}"
    text = render_eval_text(result)
    paths = {"table": out / f"{name}.txt", "records": out / f"{name}.json"}
    atomic_write(paths["table"], text)
    atomic_write(paths["records"], dumps(result.to_dict()))
    return paths


def render_eval_text(result: EvalResult) -> str:
    arm = "Single-agent" if result.single_agent else "Multi-agent"
    parts = []
    if result.recall is not None:
        parts.append(f"Top-k recall ({result.mode})\n" + format_recall_table([(arm, result.recall)]))
    if result.confusion:
        parts.append("Per-program confusion\n" + format_confusion_table(result.confusion))
    if result.stats is not None:
        s = result.stats
        parts.append(
            f"Candidates per function: min {s.min:g}, median {s.median:.2f}, "
            f"mean {s.mean:.2f}, max {s.max:g}\n"
        )
    if result.errors or result.dataset_errors:
        lines = [f"  {sid}: {msg}" for sid, msg in result.errors]
        lines += [f"  dataset line {e.line}: {e.message}" for e in result.dataset_errors]
        parts.append("Errors\n" + "\n".join(lines) + "\n")
    return "\n".join(parts)
