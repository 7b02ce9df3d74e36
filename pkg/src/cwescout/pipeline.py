"""Three-step scan of one function: list candidates, gather context, audit."""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .agents import (
    APPROVE,
    CONFIRMED,
    NO_CONTEXT,
    REJECTED,
    AgentOutputUnusable,
    AgentTeam,
    AuditDecision,
    CandidateCwe,
    ContextAnswer,
    ContextQuestion,
    ContextRequirement,
    ReviewVerdict,
    merge_candidates,
    rank_candidates,
    template_hash,
)
from .config import Config
from .corpus import CorpusError, chunk_corpus, exclude_function, ingest
from .llm import ChatProvider, LLMError
from .serialize import atomic_write, dumps
from .vectordb import ContextDatabase, EmbeddingProvider, TokenHashEmbedder, VectorDbError

log = logging.getLogger(__name__)

APPROVED = "APPROVED"
MAX_ITERATIONS = "MAX_ITERATIONS"
SINGLE_AGENT = "SINGLE_AGENT"
LISTER_FAILED = "LISTER_FAILED"

REPORT_SUFFIX = ".report"


@dataclass
class DebateRecord:
    iterations: list[tuple[list[CandidateCwe], ReviewVerdict | None]] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def lister_calls(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {
            "iterations": [
                {
                    "candidates": [
                        {"cwe_id": c.cwe_id, "probability": c.probability}
                        for c in rank_candidates(cands)
                    ],
                    "review": verdict.to_dict() if verdict is not None else None,
                }
                for cands, verdict in self.iterations
            ],
            "stop_reason": self.stop_reason,
        }


def function_hash(function_text: str) -> str:
    return hashlib.sha256(function_text.encode("utf-8")).hexdigest()[:16]


@dataclass
class ScanReport:
    function_text: str
    candidates: list[CandidateCwe] = field(default_factory=list)
    debate: DebateRecord = field(default_factory=DebateRecord)
    requirements: list[ContextRequirement] = field(default_factory=list)
    questions: list[ContextQuestion] = field(default_factory=list)
    answers: list[ContextAnswer] = field(default_factory=list)
    decisions: list[AuditDecision] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    degraded: bool = False
    context_free: bool = False
    error: str | None = None
    template_hash: str = ""
    provider_fingerprints: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    # wall-clock seconds per step; kept out of the report file so it stays reproducible
    timings: dict = field(default_factory=dict)

    @property
    def function_hash(self) -> str:
        return function_hash(self.function_text)

    @property
    def confirmed(self) -> list[AuditDecision]:
        return [d for d in self.decisions if d.final_decision == CONFIRMED]

    @property
    def rejected(self) -> list[AuditDecision]:
        return [d for d in self.decisions if d.final_decision == REJECTED]

    @property
    def ok(self) -> bool:
        return self.error is None

    def ranked_ids(self) -> list[str]:
        return [c.cwe_id for c in self.candidates]

    def to_dict(self) -> dict:
        defaulted = sum(1 for d in self.decisions if d.defaulted)
        return {
            "function_hash": self.function_hash,
            "function": self.function_text,
            "status": "ok" if self.ok else "error",
            "error": self.error,
            "candidates": [c.to_dict() for c in self.candidates],
            "debate": self.debate.to_dict(),
            "requirements": [r.to_dict() for r in self.requirements],
            "questions": [q.to_dict() for q in self.questions],
            "answers": [a.to_dict() for a in self.answers],
            "decisions": [d.to_dict() for d in self.decisions],
            "confirmed": [d.cwe_id for d in self.confirmed],
            "counts": {
                "candidates": len(self.candidates),
                "confirmed": len(self.confirmed) - sum(1 for d in self.confirmed if d.defaulted),
                "rejected": len(self.rejected),
                "defaulted": defaulted,
            },
            "flags": {"DEGRADED": self.degraded, "CONTEXT_FREE": self.context_free},
            "warnings": list(self.warnings),
            "template_hash": self.template_hash,
            "provider_fingerprints": dict(self.provider_fingerprints),
            "settings": dict(self.settings),
        }

    def dumps(self) -> str:
        return dumps(self.to_dict())

    def write(self, directory: str | os.PathLike) -> Path:
        path = Path(directory) / f"{self.function_hash}{REPORT_SUFFIX}"
        atomic_write(path, self.dumps())
        return path


# -- steps -------------------------------------------------------------------


def step1_list_candidates(
    team: AgentTeam,
    function_text: str,
    max_iterations: int = 5,
    single_agent: bool = False,
) -> tuple[list[CandidateCwe], DebateRecord]:
    """Lister/reviewer debate, capped at ``max_iterations`` rounds.

    The lister's last parsed list is canonical. If a later lister turn is
    unusable the union of earlier lists is used instead; if the very first
    one is, :class:`AgentOutputUnusable` propagates.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    debate = DebateRecord()
    conversation: list = []
    prior: ReviewVerdict | None = None
    for _ in range(max_iterations):
        try:
            candidates = team.run_lister(function_text, prior, conversation)
        except AgentOutputUnusable as exc:
            if not debate.iterations:
                raise
            team.warn(f"{exc}; using the union of earlier lister iterations")
            team.degraded = True
            union = merge_candidates(c for cands, _ in debate.iterations for c in cands)
            debate.stop_reason = LISTER_FAILED
            return rank_candidates(union), debate
        if single_agent:
            debate.iterations.append((candidates, None))
            debate.stop_reason = SINGLE_AGENT
            break
        verdict = team.run_reviewer(function_text, candidates)
        debate.iterations.append((candidates, verdict))
        if verdict.verdict == APPROVE:
            debate.stop_reason = APPROVED
            break
        prior = verdict
    else:
        debate.stop_reason = MAX_ITERATIONS
    return rank_candidates(debate.iterations[-1][0]), debate


def step2_build_context(
    team: AgentTeam,
    function_text: str,
    candidates: Sequence[CandidateCwe],
    database: ContextDatabase,
    k_retrieval: int = 5,
) -> tuple[list[ContextRequirement], list[ContextQuestion], list[ContextAnswer]]:
    """Requirements per candidate, questions over all of them, one answer per question."""
    requirements: list[ContextRequirement] = []
    for candidate in candidates:
        requirements.extend(team.run_context_extractor(function_text, candidate))
    needed = [r for r in requirements if not r.available]
    questions = team.run_query_agent(function_text, needed)
    answers: list[ContextAnswer] = []
    for question in questions:
        try:
            hits = database.search(question.question, k_retrieval)
        except VectorDbError as exc:
            team.warn(f"retrieval failed for {question.question!r}: {exc}")
            team.degraded = True
            answers.append(ContextAnswer(question.question, NO_CONTEXT, ()))
            continue
        if not hits:
            answers.append(ContextAnswer(question.question, NO_CONTEXT, ()))
            continue
        answers.append(team.run_context_synthesizer(function_text, question, hits))
    return requirements, questions, answers


def step3_audit(
    team: AgentTeam,
    function_text: str,
    candidates: Sequence[CandidateCwe],
    answers: Sequence[ContextAnswer],
) -> list[AuditDecision]:
    decisions = team.run_security_auditor(function_text, candidates, answers)
    log.info(
        "audit: %d confirmed, %d rejected",
        sum(d.final_decision == CONFIRMED for d in decisions),
        sum(d.final_decision == REJECTED for d in decisions),
    )
    return decisions


def build_context_database(
    project_root: str | os.PathLike,
    config: Config,
    embedder: EmbeddingProvider,
    function_text: str | None = None,
) -> ContextDatabase:
    corpus = ingest(project_root, config.include_globs, config.exclude_globs)
    if config.exclude_function and function_text:
        corpus = exclude_function(corpus, function_text)
    return ContextDatabase.build(chunk_corpus(corpus, config.k_chunk), embedder)


def scan(
    function_text: str,
    project_root: str | os.PathLike | None,
    config: Config | None = None,
    llm: ChatProvider | None = None,
    embedder: EmbeddingProvider | None = None,
    database: ContextDatabase | None = None,
) -> ScanReport:
    """Run the full pipeline on one function.

    With neither ``project_root`` nor ``database`` the context step is
    skipped and the report is flagged CONTEXT_FREE. Failures that abort the
    scan come back as a report with ``error`` set instead of raising.
    """
    if not function_text or not function_text.strip():
        raise ValueError("function text is empty")
    config = config or Config()
    if llm is None:
        raise ValueError("scan() needs a chat provider")
    embedder = embedder or (database.embedder if database else TokenHashEmbedder(config.embed_dim))
    team = AgentTeam(llm, config.generation_params)
    report = ScanReport(
        function_text,
        warnings=team.warnings,
        template_hash=template_hash(),
        provider_fingerprints={"llm": llm.fingerprint, "embedder": embedder.fingerprint},
        settings={
            "k_chunk": config.k_chunk,
            "k_retrieval": config.k_retrieval,
            "max_debate_iterations": config.max_debate_iterations,
            "single_agent": config.single_agent,
            "exclude_function": config.exclude_function,
            "model": config.llm_model,
            "temperature": config.temperature,
        },
    )
    clock = time.perf_counter
    try:
        t = clock()
        report.candidates, report.debate = step1_list_candidates(
            team, function_text, config.max_debate_iterations, config.single_agent
        )
        report.timings["step1"] = clock() - t
        if len(report.candidates) > config.candidate_warning_threshold:
            team.warn(f"{len(report.candidates)} candidates exceeds the cost guard of "
                      f"{config.candidate_warning_threshold}")

        t = clock()
        if database is None and project_root is None:
            report.context_free = True
        elif report.candidates:
            try:
                if database is None:
                    database = build_context_database(project_root, config, embedder, function_text)
                report.requirements, report.questions, report.answers = step2_build_context(
                    team, function_text, report.candidates, database, config.k_retrieval
                )
            except (CorpusError, VectorDbError) as exc:
                team.warn(f"context step failed: {exc}")
                team.degraded = True
                report.answers = []
        report.timings["step2"] = clock() - t

        t = clock()
        if report.candidates:
            report.decisions = step3_audit(team, function_text, report.candidates, report.answers)
        report.timings["step3"] = clock() - t
    except (AgentOutputUnusable, LLMError, CorpusError, VectorDbError, OSError) as exc:
        log.error("scan aborted: %s", exc)
        report.error = f"{type(exc).__name__}: {exc}"
    report.degraded = team.degraded
    return report
