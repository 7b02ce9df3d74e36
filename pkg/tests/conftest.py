from __future__ import annotations

import json
from pathlib import Path

import pytest

from cwescout.agents import AGENTS, AgentTeam, load_template
from cwescout.llm import ChatProvider, GenerationParams, ScriptedProvider
from cwescout.pipeline import ScanReport

SYNTHETIC = Path(__file__).parent / "fixtures" / "synthetic"

# Every ScanReport built by the suite lands here for the accounting checks.
GENERATED_REPORTS: list = []

_report_init = ScanReport.__init__


def _registering_init(self, *args, **kwargs):
    _report_init(self, *args, **kwargs)
    GENERATED_REPORTS.append(self)


ScanReport.__init__ = _registering_init

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_collection_modifyitems(config, items):
    # tests marked run_last inspect state built up by the rest of the suite
    last = [i for i in items if i.get_closest_marker("run_last")]
    items[:] = [i for i in items if not i.get_closest_marker("run_last")] + last


def pytest_configure(config):
    config.addinivalue_line("markers", "run_last: run after every other test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def synthetic_dir() -> Path:
    return SYNTHETIC


@pytest.fixture
def write_tree(tmp_path):
    """Create files from a {relative_path: text_or_bytes} mapping and return the root."""

    def _write(files: dict, root: Path | None = None) -> Path:
        base = root or tmp_path / "proj"
        base.mkdir(parents=True, exist_ok=True)
        for rel, content in files.items():
            p = base / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(content, bytes):
                p.write_bytes(content)
            else:
                p.write_text(content, encoding="utf-8")
        return base

    return _write


def numbered(n: int, prefix: str = "line") -> str:
    return "".join(f"{prefix} {i}\n" for i in range(1, n + 1))


def cwe_json(*entries) -> str:
    """Lister-style JSON for (cwe, probability) pairs."""
    return json.dumps({
        "cwes": [
            {"CWE": c, "title": f"title {c}", "probability": p, "justification": "j"}
            for c, p in entries
        ]
    })


@pytest.fixture
def scripted():
    """A ScriptedProvider whose fallback is a list of queued responses."""

    def _make(*responses: str, default: str | None = None):
        queue = list(responses)

        def fallback(messages):
            if queue:
                return queue.pop(0)
            if default is not None:
                return default
            raise AssertionError("scripted provider ran out of responses")

        return ScriptedProvider(fallback=fallback)

    return _make


@pytest.fixture
def team_for():
    def _make(provider):
        return AgentTeam(provider, GenerationParams())

    return _make


class Router(ChatProvider):
    """Mock provider dispatching on which agent template opens the request.

    ``handlers`` maps agent name to a string, a list of strings (consumed in
    order, the last one repeats) or a callable taking the messages.
    """

    fingerprint = "router"

    def __init__(self, **handlers):
        self.handlers = handlers
        self.calls: dict[str, int] = {}
        self.prompts: dict[str, list] = {}

    def _complete(self, messages, params):
        first = messages[0].content
        for agent in AGENTS:
            if first.startswith(load_template(agent).splitlines()[0]):
                break
        else:
            raise AssertionError("request does not start with an agent template")
        self.calls[agent] = self.calls.get(agent, 0) + 1
        self.prompts.setdefault(agent, []).append(messages)
        h = self.handlers.get(agent)
        if h is None:
            raise AssertionError(f"no handler for {agent}")
        if callable(h):
            return h(messages)
        if isinstance(h, list):
            return h.pop(0) if len(h) > 1 else h[0]
        return h


@pytest.fixture
def router():
    return Router
