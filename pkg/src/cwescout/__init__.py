"""cwescout: CWE identification with a multi-agent LLM pipeline.

Step 1 lists candidate CWEs through a lister/reviewer debate, step 2
gathers project context by retrieval over code chunks, and step 3 confirms
or rejects each candidate against that context.
"""

__version__ = "0.1.0"

from .agents import AgentTeam, AuditDecision, CandidateCwe, ContextAnswer, ContextQuestion, ContextRequirement
from .config import Config, ProviderSession, load_config
from .corpus import Chunk, ProjectCorpus, SourceFile, chunk_corpus, exclude_function, ingest
from .cwe import normalize_cwe_id, split_cwe_ids
from .estimator import CweIdentifier
from .evaluation import candidate_stats, confusion_for_program, load_dataset, run_eval, topk_recall
from .pipeline import ScanReport, scan
from .vectordb import ContextDatabase, TokenHashEmbedder, VectorIndex, build_index, cosine, query_top_k

__all__ = [
    "AgentTeam",
    "AuditDecision",
    "CandidateCwe",
    "Chunk",
    "Config",
    "ContextAnswer",
    "ContextDatabase",
    "ContextQuestion",
    "ContextRequirement",
    "CweIdentifier",
    "ProjectCorpus",
    "ProviderSession",
    "ScanReport",
    "SourceFile",
    "TokenHashEmbedder",
    "VectorIndex",
    "build_index",
    "candidate_stats",
    "chunk_corpus",
    "confusion_for_program",
    "cosine",
    "exclude_function",
    "ingest",
    "load_config",
    "load_dataset",
    "normalize_cwe_id",
    "query_top_k",
    "run_eval",
    "scan",
    "split_cwe_ids",
    "topk_recall",
]
