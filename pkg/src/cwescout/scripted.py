"""Offline chat provider that role-plays all six agents from a scenario.

Used to record the bundled cassettes and for end-to-end tests without a
model. Its answers depend on the prompt contents (which CWEs were listed,
which code snippets were retrieved, which context reached the auditor), so
a scenario only plays out as written when the pipeline delivers the right
information to each agent.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

from .agents import load_template
from .cwe import split_cwe_ids
from .llm import ChatMessage, ChatProvider, GenerationParams, TransportError

__all__ = ["Evidence", "Scenario", "ScenarioProvider"]


def _head(name: str) -> str:
    return load_template(name).splitlines()[0]


@dataclass(frozen=True)
class Evidence:
    """Answer the synthesizer gives when a retrieved snippet contains ``marker``."""

    marker: str
    answer: str


@dataclass
class Scenario:
    """Scripted behaviour for one function under review.

    ``lister_rounds`` holds the lister's list per debate round as
    ``(cwe, title, probability)`` triples; the reviewer asks for whatever
    the next round adds and approves the last round. ``decisions`` gives
    the auditor's verdict per CWE; a CWE listed in ``mitigations`` is
    rejected only if its phrase reaches the auditor's context section and
    confirmed otherwise.
    """

    id: str
    lister_rounds: list[list[tuple[str, str, float]]]
    requirements: dict[str, list[tuple[str, bool, str]]] = field(default_factory=dict)
    questions: list[tuple[str, str]] = field(default_factory=list)
    evidence: list[Evidence] = field(default_factory=list)
    decisions: dict[str, str] = field(default_factory=dict)
    mitigations: dict[str, str] = field(default_factory=dict)
    no_evidence_answer: str = "The provided snippets do not contain information that answers this question."


_CWE_IN_PROMPT = re.compile(r"## Potential CWE in the function: (CWE-\d+)")


class ScenarioProvider(ChatProvider):
    def __init__(self, scenario: Scenario, fingerprint: str = "scenario"):
        self.scenario = scenario
        self.fingerprint = fingerprint
        self.calls: dict[str, int] = {}

    def _complete(self, messages: list[ChatMessage], params: GenerationParams) -> str:
        first = messages[0].content
        for agent, handler in (
            ("lister", self._lister),
            ("reviewer", self._reviewer),
            ("context_extractor", self._extractor),
            ("query_agent", self._query),
            ("context_synthesizer", self._synthesizer),
            ("security_auditor", self._auditor),
        ):
            if first.startswith(_head(agent)):
                self.calls[agent] = self.calls.get(agent, 0) + 1
                return handler(messages)
        raise TransportError("scenario provider cannot identify the agent for this request")

    # -- agents --

    def _lister(self, messages: Sequence[ChatMessage]) -> str:
        rounds = self.scenario.lister_rounds
        i = min(sum(1 for m in messages if m.role == "assistant"), len(rounds) - 1)
        return json.dumps(
            {
                "cwes": [
                    {
                        "CWE": cwe,
                        "title": title,
                        "probability": prob,
                        "justification": f"{cwe} pattern present in the function under review.",
                    }
                    for cwe, title, prob in rounds[i]
                ]
            },
            indent=2,
        )

    def _round_ids(self, i: int) -> set[str]:
        return {cid for cwe, _, _ in self.scenario.lister_rounds[i] for cid in split_cwe_ids(cwe)}

    def _reviewer(self, messages: Sequence[ChatMessage]) -> str:
        report = messages[-1].content.split("## Previous CWE report:", 1)[-1]
        listed = set(re.findall(r'"CWE": "(CWE-\d+)"', report))
        rounds = self.scenario.lister_rounds
        for i in range(len(rounds) - 1):
            if listed == self._round_ids(i):
                nxt = rounds[i + 1]
                missing = [
                    (cwe, title) for cwe, title, _ in nxt
                    if not set(split_cwe_ids(cwe)) <= listed
                ]
                lines = [
                    f"{n}. {cwe}: {title} - may apply on paths the report did not consider"
                    for n, (cwe, title) in enumerate(missing, 1)
                ]
                return (
                    "**VERDICT:** REJECT\n\n**Missing CWEs:**\n" + "\n".join(lines) +
                    "\n\n**Instruction:** Please self-reflect and perform a deeper second-pass "
                    "analysis on the function, addressing why these CWEs were missed and generating "
                    "a **refined, complete CWE list** that includes these and any additional CWEs "
                    "found during this deeper re-analysis in JSON only."
                )
        return "**VERDICT:** APPROVE\n\n**Missing CWEs:**\n(none)"

    def _extractor(self, messages: Sequence[ChatMessage]) -> str:
        m = _CWE_IN_PROMPT.search(messages[0].content)
        cwe = m.group(1) if m else "CWE-0"
        entries = [
            {
                "context": context,
                "available": "true" if available else "false",
                "criticality": criticality,
                "reason": f"needed to decide whether {cwe} can manifest",
            }
            for context, available, criticality in self.scenario.requirements.get(cwe, [])
        ]
        return json.dumps({"CWE": cwe, "context_information": entries}, indent=2)

    def _query(self, messages: Sequence[ChatMessage]) -> str:
        return json.dumps(
            {"questions": [{"Question": q, "reason": r} for q, r in self.scenario.questions]},
            indent=2,
        )

    def _synthesizer(self, messages: Sequence[ChatMessage]) -> str:
        prompt = messages[0].content
        section = prompt.split("## Questions and extracted code snippets", 1)[-1]
        question = re.search(r"### Question: (.*)", section)
        qtext = question.group(1).strip() if question else "the question"
        found = [e.answer for e in self.scenario.evidence if e.marker in section]
        body = " ".join(dict.fromkeys(found)) if found else self.scenario.no_evidence_answer
        return f"{qtext}\n\n{body}"

    def _auditor(self, messages: Sequence[ChatMessage]) -> str:
        prompt = messages[0].content
        listing, _, contexts = prompt.partition("## A list of external contextual information")
        listed = re.findall(r'"CWE": "(CWE-\d+)"', listing.split("## A list of potential CWEs:", 1)[-1])
        out = []
        for cwe in listed:
            if cwe in self.scenario.mitigations:
                phrase = self.scenario.mitigations[cwe]
                decision = "rejected" if phrase in contexts else "confirmed"
                why = (
                    f"The context states that {phrase}, so the weakness cannot manifest."
                    if decision == "rejected"
                    else "Nothing in the provided context prevents the weakness."
                )
            else:
                decision = self.scenario.decisions.get(cwe, "confirmed")
                why = (
                    "The provided context and the function keep this weakness reachable."
                    if decision == "confirmed"
                    else "The function does not exhibit this weakness in the provided context."
                )
            out.append({"CWE": cwe, "title": "", "final_decision": decision, "justification": why})
        return "```json\n" + json.dumps({"cwes": out}, indent=2) + "\n```"
