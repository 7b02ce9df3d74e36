"""scikit-learn style wrapper around the scan pipeline.

``fit`` builds the context database for one project, ``predict`` scans
each function and returns its confirmed CWE ids. The estimator only holds
configuration in ``__init__`` so ``get_params``/``set_params``/``clone``
behave as usual.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import Config, make_embedder
from .corpus import DEFAULT_EXCLUDE, DEFAULT_INCLUDE
from .evaluation import topk_recall
from .llm import ChatProvider
from .pipeline import ScanReport, build_context_database, scan


def _check_functions(X) -> list[str]:
    if isinstance(X, str):
        raise ValueError("expected a sequence of function texts, got a single string")
    functions = list(X)
    if not functions:
        raise ValueError("X is empty")
    for i, f in enumerate(functions):
        if not isinstance(f, str) or not f.strip():
            raise ValueError(f"X[{i}] is not a non-empty function text")
    return functions


class CweIdentifier(BaseEstimator):
    """Multi-label CWE predictor over function texts.

    Parameters mirror :class:`cwescout.config.Config`. ``llm`` is any
    :class:`~cwescout.llm.ChatProvider`; ``project_root`` may be left as
    None for context-free scans.

    Attributes set by ``fit``: ``database_`` (None when context-free) and
    ``config_``. ``predict`` stores its reports in ``reports_``.
    """

    def __init__(
        self,
        llm: ChatProvider | None = None,
        project_root: str | None = None,
        llm_model: str = "gpt-4o",
        temperature: float = 0.0,
        embedder: str = "mock",
        embed_model: str = "all-MiniLM-L6-v2",
        embed_dim: int = 256,
        k_chunk: int = 10,
        k_retrieval: int = 5,
        max_debate_iterations: int = 5,
        single_agent: bool = False,
        include_globs: Sequence[str] = DEFAULT_INCLUDE,
        exclude_globs: Sequence[str] = DEFAULT_EXCLUDE,
    ):
        self.llm = llm
        self.project_root = project_root
        self.llm_model = llm_model
        self.temperature = temperature
        self.embedder = embedder
        self.embed_model = embed_model
        self.embed_dim = embed_dim
        self.k_chunk = k_chunk
        self.k_retrieval = k_retrieval
        self.max_debate_iterations = max_debate_iterations
        self.single_agent = single_agent
        self.include_globs = include_globs
        self.exclude_globs = exclude_globs

    def _make_config(self) -> Config:
        return Config(
            llm_model=self.llm_model,
            temperature=self.temperature,
            embedder=self.embedder,
            embed_model=self.embed_model,
            embed_dim=self.embed_dim,
            k_chunk=self.k_chunk,
            k_retrieval=self.k_retrieval,
            max_debate_iterations=self.max_debate_iterations,
            single_agent=self.single_agent,
            include_globs=tuple(self.include_globs),
            exclude_globs=tuple(self.exclude_globs),
        )

    def fit(self, X=None, y=None):
        """Index ``project_root``. ``X`` and ``y`` are accepted for API compatibility and ignored."""
        if self.llm is None:
            raise ValueError("CweIdentifier needs an llm provider")
        self.config_ = self._make_config()
        self.embedder_ = make_embedder(self.config_)
        self.database_ = (
            build_context_database(self.project_root, self.config_, self.embedder_)
            if self.project_root is not None
            else None
        )
        return self

    def scan(self, X: Iterable[str]) -> list[ScanReport]:
        check_is_fitted(self, "config_")
        functions = _check_functions(X)
        self.reports_ = [
            scan(f, None, self.config_, self.llm, self.embedder_, self.database_) for f in functions
        ]
        return self.reports_

    def predict(self, X: Iterable[str]) -> list[list[str]]:
        """Confirmed CWE ids per function, in ranking order."""
        return [[d.cwe_id for d in _ranked_confirmed(r)] for r in self.scan(X)]

    def predict_ranking(self, X: Iterable[str]) -> list[list[str]]:
        """Step-1 candidate ids per function, most likely first."""
        return [r.ranked_ids() for r in self.scan(X)]

    def score(self, X, y, k: int = 5) -> float:
        """Top-``k`` recall of the candidate ranking against ``y`` (lists of CWE ids)."""
        rankings = self.predict_ranking(X)
        return topk_recall(list(zip(rankings, y)), [k]).values[k]


def _ranked_confirmed(report: ScanReport):
    order = {cid: i for i, cid in enumerate(report.ranked_ids())}
    return sorted(report.confirmed, key=lambda d: order.get(d.cwe_id, len(order)))
