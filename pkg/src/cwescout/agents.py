"""The six agents: prompt rendering, output parsing and fallbacks.

Each agent renders a template from ``prompts/``, calls the chat provider and
parses the reply. Structured replies that fail to parse get exactly one
repair turn. After that each agent applies its own fallback:

========================  =============================================
lister                    raise :class:`AgentOutputUnusable`
reviewer                  APPROVE (fail-open, it only ever adds CWEs)
context extractor         no requirements for that candidate
query agent               one literal question per requirement
context synthesizer       ``NO CONTEXT AVAILABLE``
security auditor          confirm everything (fail-closed)
========================  =============================================
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from .cwe import InvalidCweId, cwe_number, split_cwe_ids
from .llm import (
    ChatMessage,
    ChatProvider,
    GenerationParams,
    ProviderError,
    StructuredBlockError,
    extract_structured_block,
)

log = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).parent / "prompts"

AGENTS = (
    "lister",
    "reviewer",
    "context_extractor",
    "query_agent",
    "context_synthesizer",
    "security_auditor",
)

PLACEHOLDERS = {
    "lister": ("function",),
    "reviewer": (),
    "context_extractor": ("function", "cwe"),
    "query_agent": ("function", "context_details"),
    "context_synthesizer": ("function", "contexts"),
    "security_auditor": ("function", "potential_cwes", "contexts"),
}

REPAIR_MESSAGE = (
    "Your previous output was not valid per the required format; "
    "re-emit strictly in the required format."
)
NO_CONTEXT = "NO CONTEXT AVAILABLE"
AUDITOR_OMITTED = "auditor omitted - fail-closed"

# Sent alongside the reviewer template, which itself has no placeholders.
REVIEW_REQUEST = "## Function under review:\n\n{function}\n\n## Previous CWE report:\n\n{report}"

CRITICALITY = ("Low", "Medium", "High", "Critical")
CONFIRMED, REJECTED = "confirmed", "rejected"
APPROVE, REJECT = "APPROVE", "REJECT"


class AgentParseError(ValueError):
    pass


class AgentOutputUnusable(Exception):
    def __init__(self, agent: str, message: str):
        super().__init__(f"{agent}: {message}")
        self.agent = agent


PARSE_ERRORS = (StructuredBlockError, AgentParseError)


# -- templates ---------------------------------------------------------------


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in PLACEHOLDERS:
        raise KeyError(f"unknown agent {name!r}")
    text = (PROMPT_DIR / f"{name}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def render_prompt(name: str, **values: str) -> str:
    expected = set(PLACEHOLDERS[name])
    if set(values) != expected:
        raise TypeError(f"{name} takes placeholders {sorted(expected)}, got {sorted(values)}")
    return load_template(name).format(**values)


@lru_cache(maxsize=None)
def template_hash() -> str:
    h = hashlib.sha256()
    for name in AGENTS:
        h.update(name.encode() + b"\0" + load_template(name).encode("utf-8") + b"\0")
    return h.hexdigest()


# -- domain types ------------------------------------------------------------


@dataclass(frozen=True)
class CandidateCwe:
    cwe_id: str
    title: str
    probability: float
    justification: str = ""

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability out of range: {self.probability}")

    def to_dict(self) -> dict:
        return {
            "cwe_id": self.cwe_id,
            "title": self.title,
            "probability": self.probability,
            "justification": self.justification,
        }


def rank_candidates(candidates: Iterable[CandidateCwe]) -> list[CandidateCwe]:
    """Order by probability descending, then numeric CWE id ascending."""
    return sorted(candidates, key=lambda c: (-c.probability, cwe_number(c.cwe_id)))


def merge_candidates(candidates: Iterable[CandidateCwe]) -> list[CandidateCwe]:
    """Collapse duplicate ids keeping the highest probability; first-seen order."""
    best: dict[str, CandidateCwe] = {}
    for c in candidates:
        prev = best.get(c.cwe_id)
        if prev is None or c.probability > prev.probability:
            best[c.cwe_id] = c
    return list(best.values())


@dataclass(frozen=True)
class MissingCwe:
    cwe_id: str
    title: str
    hint: str = ""


@dataclass(frozen=True)
class ReviewVerdict:
    verdict: str
    missing: tuple[MissingCwe, ...] = ()
    raw: str = ""
    fallback: bool = False

    def __post_init__(self):
        if self.verdict not in (APPROVE, REJECT):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict == APPROVE and self.missing:
            raise ValueError("an APPROVE verdict cannot list missing CWEs")

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "missing": [
                {"cwe_id": m.cwe_id, "title": m.title, "hint": m.hint} for m in self.missing
            ],
            "fallback": self.fallback,
        }


@dataclass(frozen=True)
class ContextRequirement:
    cwe_id: str
    context: str
    available: bool
    criticality: str
    reason: str = ""

    def __post_init__(self):
        if self.criticality not in CRITICALITY:
            raise ValueError(f"bad criticality {self.criticality!r}")

    def to_dict(self) -> dict:
        return {
            "cwe_id": self.cwe_id,
            "context": self.context,
            "available": self.available,
            "criticality": self.criticality,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class ContextQuestion:
    question: str
    reason: str = ""
    source_cwe_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("question must be non-empty")

    @property
    def key(self) -> str:
        return normalize_question(self.question)

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "reason": self.reason,
            "source_cwe_ids": list(self.source_cwe_ids),
        }


@dataclass(frozen=True)
class ContextAnswer:
    question: str
    answer: str
    supporting_chunk_ids: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "answer": self.answer,
            "supporting_chunk_ids": list(self.supporting_chunk_ids),
        }


@dataclass(frozen=True)
class AuditDecision:
    cwe_id: str
    title: str
    final_decision: str
    justification: str = ""
    defaulted: bool = False

    def __post_init__(self):
        if self.final_decision not in (CONFIRMED, REJECTED):
            raise ValueError(f"bad decision {self.final_decision!r}")

    def to_dict(self) -> dict:
        return {
            "cwe_id": self.cwe_id,
            "title": self.title,
            "final_decision": self.final_decision,
            "justification": self.justification,
            "defaulted": self.defaulted,
        }


def normalize_question(text: str) -> str:
    return " ".join(text.casefold().split())


# -- parsers -----------------------------------------------------------------


def _warn(sink: list[str] | None, msg: str) -> None:
    log.warning(msg)
    if sink is not None:
        sink.append(msg)


def _get(d: dict, *keys: str):
    lowered = {k.lower(): v for k, v in d.items() if isinstance(k, str)}
    for key in keys:
        if key.lower() in lowered:
            return lowered[key.lower()]
    return None


def _block_list(text: str, key: str) -> list:
    block = extract_structured_block(text)
    if not isinstance(block, dict):
        raise AgentParseError("expected a JSON object")
    items = _get(block, key)
    if not isinstance(items, list):
        raise AgentParseError(f"missing list field {key!r}")
    return items


def _text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value.strip()
    return json.dumps(value, ensure_ascii=False)


def _probability(value, sink) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, str):
        s = value.strip()
        pct = s.endswith("%")
        try:
            value = float(s.rstrip("%").strip())
        except ValueError:
            return None
        if pct:
            value /= 100.0
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        return None
    if value < 0.0 or value > 1.0:
        _warn(sink, f"probability {value} clamped into [0, 1]")
        value = min(1.0, max(0.0, float(value)))
    return float(value)


def _ids(raw, sink, what: str) -> list[str]:
    if raw is None or isinstance(raw, (list, dict, float)):
        _warn(sink, f"{what}: missing or invalid CWE id {raw!r}")
        return []
    try:
        return split_cwe_ids(raw)
    except InvalidCweId:
        _warn(sink, f"{what}: invalid CWE id {raw!r}")
        return []


def parse_candidates(text: str, warnings: list[str] | None = None) -> list[CandidateCwe]:
    """Parse lister output into merged candidates (compound ids split)."""
    out: list[CandidateCwe] = []
    for item in _block_list(text, "cwes"):
        if not isinstance(item, dict):
            _warn(warnings, f"lister: skipped non-object entry {item!r}")
            continue
        ids = _ids(_get(item, "CWE", "cwe_id", "id"), warnings, "lister")
        prob = _probability(_get(item, "probability"), warnings)
        if prob is None and ids:
            _warn(warnings, f"lister: invalid probability for {ids}")
            continue
        for cid in ids:
            out.append(
                CandidateCwe(cid, _text(_get(item, "title")), prob, _text(_get(item, "justification")))
            )
    return merge_candidates(out)


_VERDICT_RE = re.compile(r"VERDICT\W{0,8}(APPROVE|REJECT)", re.IGNORECASE)
_MISSING_HEADER_RE = re.compile(r"missing\s+cwes?", re.IGNORECASE)
_MISSING_LINE_RE = re.compile(
    r"^\s*(?:\d+\s*[.)]|[-*•])\s*[*_`]*\s*"
    r"(?P<ids>CWE[-_ ]?\d+(?:\s*/\s*(?:CWE[-_ ]?)?\d+)*)"
    r"[*_`]*\s*(?:[:–—-]\s*)?(?P<rest>.*)$",
    re.IGNORECASE,
)
_HINT_SPLIT_RE = re.compile(r"\s+[-–—]\s+")


def parse_review(text: str, warnings: list[str] | None = None) -> ReviewVerdict:
    """Parse the reviewer's plain-text verdict format."""
    if not isinstance(text, str):
        raise AgentParseError("reviewer output is not text")
    m = _VERDICT_RE.search(text)
    if m is None:
        raise AgentParseError("no VERDICT line in reviewer output")
    verdict = m.group(1).upper()
    if verdict == APPROVE:
        return ReviewVerdict(APPROVE, (), text)
    body = text[m.end():]
    header = _MISSING_HEADER_RE.search(body)
    if header is not None:
        body = body[header.end():]
    missing: list[MissingCwe] = []
    seen: set[str] = set()
    for line in body.splitlines():
        lm = _MISSING_LINE_RE.match(line)
        if lm is None:
            continue
        rest = lm.group("rest").strip().strip("*").strip()
        parts = _HINT_SPLIT_RE.split(rest, maxsplit=1)
        title = parts[0].strip()
        hint = parts[1].strip() if len(parts) > 1 else ""
        try:
            ids = split_cwe_ids(lm.group("ids"))
        except InvalidCweId:
            continue
        for cid in ids:
            if cid not in seen:
                seen.add(cid)
                missing.append(MissingCwe(cid, title, hint))
    return ReviewVerdict(REJECT, tuple(missing), text)


def _boolean(value) -> bool | None:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        s = value.strip().lower()
        if s in ("true", "yes", "y", "1"):
            return True
        if s in ("false", "no", "n", "0"):
            return False
    return None


def parse_requirements(
    text: str, cwe_id: str, warnings: list[str] | None = None
) -> list[ContextRequirement]:
    """Parse context-extractor output for one candidate."""
    out: list[ContextRequirement] = []
    for item in _block_list(text, "context_information"):
        if not isinstance(item, dict):
            _warn(warnings, f"context extractor ({cwe_id}): skipped non-object entry")
            continue
        context = _text(_get(item, "context"))
        if not context:
            _warn(warnings, f"context extractor ({cwe_id}): entry without context text dropped")
            continue
        raw_crit = _text(_get(item, "criticality"))
        crit = raw_crit.capitalize()
        if crit not in CRITICALITY:
            _warn(warnings, f"context extractor ({cwe_id}): criticality {raw_crit!r} not in enum; dropped")
            continue
        available = _boolean(_get(item, "available"))
        if available is None:
            _warn(warnings, f"context extractor ({cwe_id}): unreadable 'available'; assuming false")
            available = False
        out.append(ContextRequirement(cwe_id, context, available, crit, _text(_get(item, "reason"))))
    return out


def parse_questions(text: str, warnings: list[str] | None = None) -> list[tuple[str, str]]:
    """Parse query-agent output into (question, reason) pairs."""
    out = []
    for item in _block_list(text, "questions"):
        if isinstance(item, str):
            q, reason = item.strip(), ""
        elif isinstance(item, dict):
            q, reason = _text(_get(item, "Question", "query")), _text(_get(item, "reason"))
        else:
            q = ""
        if not q:
            _warn(warnings, "query agent: empty question dropped")
            continue
        out.append((q, reason))
    return out


def parse_decisions(text: str, warnings: list[str] | None = None) -> dict[str, tuple[str, str, str]]:
    """Parse auditor output into ``{cwe_id: (decision, title, justification)}``."""
    out: dict[str, tuple[str, str, str]] = {}
    for item in _block_list(text, "cwes"):
        if not isinstance(item, dict):
            _warn(warnings, "auditor: skipped non-object entry")
            continue
        ids = _ids(_get(item, "CWE", "cwe_id", "id"), warnings, "auditor")
        decision = _text(_get(item, "final_decision", "decision")).lower()
        if decision in ("confirmed", "confirm"):
            decision = CONFIRMED
        elif decision in ("rejected", "reject"):
            decision = REJECTED
        else:
            if ids:
                _warn(warnings, f"auditor: unreadable decision {decision!r} for {ids}")
            continue
        for cid in ids:
            if cid in out and out[cid][0] != decision:
                _warn(warnings, f"auditor: conflicting decisions for {cid}; keeping confirmed")
                decision = CONFIRMED
            out[cid] = (decision, _text(_get(item, "title")), _text(_get(item, "justification")))
    return out


# -- rendering helpers -------------------------------------------------------


def format_candidates(candidates: Sequence[CandidateCwe]) -> str:
    return json.dumps(
        {
            "cwes": [
                {
                    "CWE": c.cwe_id,
                    "title": c.title,
                    "probability": c.probability,
                    "justification": c.justification,
                }
                for c in candidates
            ]
        },
        indent=2,
        ensure_ascii=False,
    )


def format_requirements(requirements: Sequence[ContextRequirement]) -> str:
    return json.dumps(
        [
            {"CWE": r.cwe_id, "context": r.context, "criticality": r.criticality, "reason": r.reason}
            for r in requirements
        ],
        indent=2,
        ensure_ascii=False,
    )


def format_snippets(question: str, hits: Sequence[tuple]) -> str:
    """``hits`` is a sequence of ``(Chunk, score)`` pairs."""
    parts = [f"### Question: {question}"]
    for i, (chunk, score) in enumerate(hits, start=1):
        parts.append(
            f"#### Code snippet {i} ({chunk.file_path}, lines {chunk.start_line}-{chunk.end_line}, "
            f"similarity {score:.4f}):\n```\n{chunk.text}\n```"
        )
    return "\n\n".join(parts)


def format_answers(answers: Sequence[ContextAnswer]) -> str:
    if not answers:
        return NO_CONTEXT
    return "\n\n".join(f"Q: {a.question}\nA: {a.answer}" for a in answers)


# -- runners -----------------------------------------------------------------

T = TypeVar("T")


@dataclass
class AgentTeam:
    """Runs agents against one provider and collects warnings."""

    llm: ChatProvider
    params: GenerationParams = field(default_factory=GenerationParams)
    warnings: list[str] = field(default_factory=list)
    degraded: bool = False

    def warn(self, msg: str) -> None:
        _warn(self.warnings, msg)

    def _ask(self, messages: list[ChatMessage]) -> str:
        return self.llm.complete(messages, self.params)

    def _structured(self, agent: str, messages: list[ChatMessage], parse: Callable[[str], T]) -> T:
        try:
            text = self._ask(messages)
        except ProviderError as exc:
            raise AgentOutputUnusable(agent, f"provider failed: {exc}") from exc
        try:
            return parse(text)
        except PARSE_ERRORS as exc:
            self.warn(f"{agent}: unparseable output ({exc}); sending repair turn")
        repair = messages + [
            ChatMessage("assistant", text if text.strip() else "(empty response)"),
            ChatMessage("user", REPAIR_MESSAGE),
        ]
        try:
            text = self._ask(repair)
        except ProviderError as exc:
            raise AgentOutputUnusable(agent, f"provider failed during repair: {exc}") from exc
        try:
            return parse(text)
        except PARSE_ERRORS as exc:
            raise AgentOutputUnusable(agent, f"output unusable after repair: {exc}") from exc

    # step 1

    def run_lister(
        self,
        function_text: str,
        prior_review: ReviewVerdict | None = None,
        conversation: list[ChatMessage] | None = None,
    ) -> list[CandidateCwe]:
        """List candidate CWEs.

        ``conversation`` carries the debate across iterations and is
        extended in place: the first call seeds it with the rendered prompt,
        later calls append the reviewer feedback and the new reply.
        """
        if not function_text.strip():
            raise ValueError("function text is empty")
        convo = conversation if conversation is not None else []
        if not convo:
            convo.append(ChatMessage("user", render_prompt("lister", function=function_text)))
        if prior_review is not None:
            convo.append(ChatMessage("user", prior_review.raw or _review_text(prior_review)))
        replies: list[str] = []

        def parse(text: str) -> list[CandidateCwe]:
            replies.append(text)
            return parse_candidates(text, self.warnings)

        candidates = self._structured("lister", list(convo), parse)
        convo.append(ChatMessage("assistant", replies[-1] if replies[-1].strip() else "(empty)"))
        return candidates

    def run_reviewer(self, function_text: str, candidates: Sequence[CandidateCwe]) -> ReviewVerdict:
        messages = [
            ChatMessage("system", render_prompt("reviewer")),
            ChatMessage(
                "user",
                REVIEW_REQUEST.format(function=function_text, report=format_candidates(candidates)),
            ),
        ]
        try:
            verdict = self._structured(
                "reviewer", messages, lambda t: parse_review(t, self.warnings)
            )
        except AgentOutputUnusable as exc:
            self.warn(f"{exc}; treating as APPROVE")
            self.degraded = True
            return ReviewVerdict(APPROVE, (), "", fallback=True)
        known = {c.cwe_id for c in candidates}
        already = [m.cwe_id for m in verdict.missing if m.cwe_id in known]
        if already:
            self.warn(f"reviewer: reported as missing but already listed: {already}")
        return verdict

    # step 2

    def run_context_extractor(self, function_text: str, candidate: CandidateCwe) -> list[ContextRequirement]:
        cwe = f"{candidate.cwe_id}: {candidate.title}" if candidate.title else candidate.cwe_id
        messages = [ChatMessage("user", render_prompt("context_extractor", function=function_text, cwe=cwe))]
        try:
            return self._structured(
                "context_extractor",
                messages,
                lambda t: parse_requirements(t, candidate.cwe_id, self.warnings),
            )
        except AgentOutputUnusable as exc:
            self.warn(f"{exc}; no requirements for {candidate.cwe_id}")
            self.degraded = True
            return []

    def run_query_agent(
        self, function_text: str, requirements: Sequence[ContextRequirement]
    ) -> list[ContextQuestion]:
        if not requirements:
            return []
        all_ids = tuple(dict.fromkeys(r.cwe_id for r in requirements))
        messages = [
            ChatMessage(
                "user",
                render_prompt(
                    "query_agent",
                    function=function_text,
                    context_details=format_requirements(requirements),
                ),
            )
        ]
        try:
            pairs = self._structured("query_agent", messages, lambda t: parse_questions(t, self.warnings))
        except AgentOutputUnusable as exc:
            self.warn(f"{exc}; falling back to one question per requirement")
            self.degraded = True
            return dedupe_questions(
                ContextQuestion(r.context, "fallback: requirement text", (r.cwe_id,))
                for r in requirements
            )
        questions = []
        for q, reason in pairs:
            mentioned = set(_mentioned_ids(q + " " + reason))
            src = tuple(i for i in all_ids if i in mentioned) or all_ids
            questions.append(ContextQuestion(q, reason, src))
        return dedupe_questions(questions)

    def run_context_synthesizer(
        self, function_text: str, question: ContextQuestion | str, hits: Sequence[tuple]
    ) -> ContextAnswer:
        """Answer one question from ``(Chunk, score)`` hits."""
        q = question.question if isinstance(question, ContextQuestion) else question
        ids = tuple(chunk.chunk_id for chunk, _ in hits)
        prompt = render_prompt("context_synthesizer", function=function_text, contexts=format_snippets(q, hits))
        try:
            text = self._ask([ChatMessage("user", prompt)])
        except ProviderError as exc:
            self.warn(f"context_synthesizer: provider failed ({exc}); no context for {q!r}")
            self.degraded = True
            return ContextAnswer(q, NO_CONTEXT, ids)
        if not isinstance(text, str) or not text.strip():
            self.warn(f"context_synthesizer: empty answer for {q!r}")
            self.degraded = True
            return ContextAnswer(q, NO_CONTEXT, ids)
        return ContextAnswer(q, text.strip(), ids)

    # step 3

    def run_security_auditor(
        self,
        function_text: str,
        candidates: Sequence[CandidateCwe],
        answers: Sequence[ContextAnswer],
    ) -> list[AuditDecision]:
        if not candidates:
            raise ValueError("security auditor needs at least one candidate")
        prompt = render_prompt(
            "security_auditor",
            function=function_text,
            potential_cwes=format_candidates(candidates),
            contexts=format_answers(answers),
        )
        try:
            parsed = self._structured(
                "security_auditor", [ChatMessage("user", prompt)], lambda t: parse_decisions(t, self.warnings)
            )
        except AgentOutputUnusable as exc:
            self.warn(f"{exc}; confirming all candidates")
            self.degraded = True
            return [
                AuditDecision(c.cwe_id, c.title, CONFIRMED, f"{AUDITOR_OMITTED} (auditor output unusable)", True)
                for c in candidates
            ]
        known = {c.cwe_id for c in candidates}
        extra = sorted(set(parsed) - known, key=cwe_number)
        if extra:
            self.warn(f"auditor: ignored decisions for unlisted CWEs {extra}")
        decisions = []
        for c in candidates:
            if c.cwe_id in parsed:
                decision, title, justification = parsed[c.cwe_id]
                decisions.append(AuditDecision(c.cwe_id, c.title or title, decision, justification))
            else:
                self.warn(f"auditor: no decision for {c.cwe_id}; defaulting to confirmed")
                decisions.append(AuditDecision(c.cwe_id, c.title, CONFIRMED, AUDITOR_OMITTED, True))
        return decisions


_MENTION_RE = re.compile(r"CWE[-_ ]?0*(\d{1,9})(?!\d)", re.IGNORECASE)


def _mentioned_ids(text: str) -> list[str]:
    return [f"CWE-{int(n)}" for n in _MENTION_RE.findall(text)]


def dedupe_questions(questions: Iterable[ContextQuestion]) -> list[ContextQuestion]:
    """Merge questions equal after case-folding and whitespace collapsing."""
    merged: dict[str, ContextQuestion] = {}
    for q in questions:
        prev = merged.get(q.key)
        if prev is None:
            merged[q.key] = q
        else:
            ids = tuple(dict.fromkeys(prev.source_cwe_ids + q.source_cwe_ids))
            merged[q.key] = ContextQuestion(prev.question, prev.reason, ids)
    return list(merged.values())


def _review_text(review: ReviewVerdict) -> str:
    lines = [f"**VERDICT:** {review.verdict}", "", "**Missing CWEs:**"]
    lines += [f"{i}. {m.cwe_id}: {m.title} - {m.hint}" for i, m in enumerate(review.missing, 1)]
    return "\n".join(lines)
