"""Project ingestion and fixed-size line chunking."""

from __future__ import annotations

import hashlib
import logging
import os
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .serialize import atomic_write, dumps

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_EXCLUDE",
    "DEFAULT_INCLUDE",
    "DEFAULT_K",
    "Chunk",
    "CorpusError",
    "NoFilesMatched",
    "ProjectCorpus",
    "RootNotFound",
    "SourceFile",
    "chunk_corpus",
    "exclude_function",
    "ingest",
    "manifest",
    "write_manifest",
]

DEFAULT_K = 10

DEFAULT_INCLUDE: tuple[str, ...] = tuple(
    f"**/*.{ext}"
    for ext in (
        "c", "h", "cc", "cpp", "cxx", "hh", "hpp", "hxx", "m", "mm",
        "cs", "java", "kt", "go", "rs", "swift", "py", "js", "jsx", "ts",
        "tsx", "rb", "php", "pl", "sh", "bash", "lua",
    )
)
DEFAULT_EXCLUDE: tuple[str, ...] = ("**/.git/**", "**/.cwescout/**")

# NUL byte in this prefix marks a file as binary.
_BINARY_PROBE = 8192

_EXT_LANG = {
    "c": "c", "h": "c", "cc": "cpp", "cpp": "cpp", "cxx": "cpp", "hh": "cpp",
    "hpp": "cpp", "hxx": "cpp", "py": "python", "js": "javascript",
    "jsx": "javascript", "ts": "typescript", "tsx": "typescript",
    "java": "java", "go": "go", "rs": "rust", "rb": "ruby", "php": "php",
    "sh": "shell", "bash": "shell", "cs": "csharp", "kt": "kotlin",
}


class CorpusError(Exception):
    pass


class RootNotFound(CorpusError):
    pass


class NoFilesMatched(CorpusError):
    pass


@dataclass(frozen=True)
class SourceFile:
    path: str
    lines: tuple[str, ...]
    trailing_newline: bool = False
    language_hint: str | None = None
    # 1-based inclusive line ranges withheld from chunking
    excluded: tuple[tuple[int, int], ...] = ()

    @property
    def line_count(self) -> int:
        return len(self.lines)

    @property
    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.trailing_newline else "")

    def to_bytes(self) -> bytes:
        return self.text.encode("utf-8")

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_text(cls, path: str, text: str) -> "SourceFile":
        trailing = text.endswith("\n")
        body = text[:-1] if trailing else text
        lines = tuple(body.split("\n")) if (body or trailing) else ()
        ext = path.rsplit(".", 1)[-1].lower() if "." in path.rsplit("/", 1)[-1] else ""
        return cls(path, lines, trailing, _EXT_LANG.get(ext))


@dataclass(frozen=True)
class ProjectCorpus:
    root: str
    files: tuple[SourceFile, ...]
    include_globs: tuple[str, ...] = DEFAULT_INCLUDE
    exclude_globs: tuple[str, ...] = DEFAULT_EXCLUDE
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def file(self, path: str) -> SourceFile:
        for f in self.files:
            if f.path == path:
                return f
        raise KeyError(path)


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    file_path: str
    start_line: int
    end_line: int
    text: str

    @property
    def line_count(self) -> int:
        return self.end_line - self.start_line + 1


@lru_cache(maxsize=256)
def _glob_regex(pattern: str) -> re.Pattern[str]:
    # "**/" spans zero or more directories, "*" and "?" never cross "/".
    i, out = 0, []
    while i < len(pattern):
        if pattern.startswith("**/", i):
            out.append("(?:.*/)?")
            i += 3
        elif pattern.startswith("**", i):
            out.append(".*")
            i += 2
        elif pattern[i] == "*":
            out.append("[^/]*")
            i += 1
        elif pattern[i] == "?":
            out.append("[^/]")
            i += 1
        elif pattern[i] == "[":
            j = pattern.find("]", i + 1)
            if j == -1:
                out.append(re.escape(pattern[i]))
                i += 1
            else:
                body = pattern[i + 1:j]
                if body.startswith("!"):
                    body = "^" + body[1:]
                out.append(f"[{body}]")
                i = j + 1
        else:
            out.append(re.escape(pattern[i]))
            i += 1
    return re.compile("".join(out) + r"\Z")


def glob_match(path: str, pattern: str) -> bool:
    return _glob_regex(pattern).match(path) is not None


def _matches(path: str, include: Sequence[str], exclude: Sequence[str]) -> bool:
    return any(glob_match(path, p) for p in include) and not any(
        glob_match(path, p) for p in exclude
    )


def ingest(
    root: str | os.PathLike,
    include_globs: Iterable[str] | None = None,
    exclude_globs: Iterable[str] | None = None,
) -> ProjectCorpus:
    """Read every matching text file under ``root`` into a sorted corpus.

    Binary files are skipped with a warning. Invalid UTF-8 is decoded with
    replacement characters. Raises :class:`NoFilesMatched` when nothing
    survives the glob filters.
    """
    root_path = Path(root)
    if not root_path.is_dir():
        raise RootNotFound(f"project root not found or not a directory: {root}")
    include = tuple(include_globs) if include_globs is not None else DEFAULT_INCLUDE
    exclude = tuple(exclude_globs) if exclude_globs is not None else DEFAULT_EXCLUDE

    candidates: list[tuple[str, Path]] = []
    for dirpath, dirnames, filenames in os.walk(root_path):
        dirnames.sort()
        for name in filenames:
            full = Path(dirpath) / name
            rel = full.relative_to(root_path).as_posix()
            if full.is_file() and _matches(rel, include, exclude):
                candidates.append((rel, full))
    candidates.sort(key=lambda item: item[0])

    files: list[SourceFile] = []
    warnings: list[str] = []
    for rel, full in candidates:
        data = full.read_bytes()
        if b"\x00" in data[:_BINARY_PROBE]:
            msg = f"skipped binary file: {rel}"
            log.warning(msg)
            warnings.append(msg)
            continue
        text = data.decode("utf-8", errors="replace")
        if text.encode("utf-8") != data:
            warnings.append(f"invalid UTF-8 replaced in: {rel}")
        files.append(SourceFile.from_text(rel, text))

    corpus = ProjectCorpus(str(root_path), tuple(files), include, exclude, tuple(warnings))
    if not files:
        raise NoFilesMatched(
            f"no files under {root} matched include={list(include)} exclude={list(exclude)}"
        )
    return corpus


def _kept_segments(f: SourceFile) -> list[tuple[int, int]]:
    """1-based inclusive line segments of ``f`` that are not excluded."""
    segments: list[tuple[int, int]] = []
    cursor = 1
    for start, end in sorted(f.excluded):
        if start > cursor:
            segments.append((cursor, start - 1))
        cursor = max(cursor, end + 1)
    if cursor <= f.line_count:
        segments.append((cursor, f.line_count))
    return segments


def chunk_corpus(corpus: ProjectCorpus, k: int = DEFAULT_K) -> list[Chunk]:
    """Split each file into consecutive non-overlapping windows of ``k`` lines."""
    if k < 1:
        raise ValueError(f"chunk size must be >= 1, got {k}")
    chunks: list[Chunk] = []
    for f in corpus.files:
        for seg_start, seg_end in _kept_segments(f):
            for start in range(seg_start, seg_end + 1, k):
                end = min(start + k - 1, seg_end)
                text = "\n".join(f.lines[start - 1:end])
                chunks.append(Chunk(len(chunks), f.path, start, end, text))
    return chunks


def _normalize_lines(lines: Iterable[str]) -> list[str]:
    out = [" ".join(line.split()) for line in lines]
    while out and not out[0]:
        out.pop(0)
    while out and not out[-1]:
        out.pop()
    return out


def exclude_function(corpus: ProjectCorpus, function_text: str) -> ProjectCorpus:
    """Withhold every region whose text equals ``function_text`` from chunking.

    Comparison collapses intra-line whitespace and ignores leading and
    trailing blank lines, so indentation or CRLF differences do not matter.
    """
    target = _normalize_lines(function_text.replace("\r\n", "\n").split("\n"))
    if not target:
        return corpus
    n = len(target)
    new_files = []
    changed = False
    for f in corpus.files:
        norm = [" ".join(line.split()) for line in f.lines]
        regions = list(f.excluded)
        i = 0
        while i + n <= len(norm):
            if norm[i:i + n] == target:
                regions.append((i + 1, i + n))
                i += n
            else:
                i += 1
        if len(regions) != len(f.excluded):
            changed = True
            f = replace(f, excluded=tuple(sorted(regions)))
        new_files.append(f)
    if not changed:
        return corpus
    return replace(corpus, files=tuple(new_files))


def manifest(corpus: ProjectCorpus) -> list[dict]:
    return [
        {"path": f.path, "line_count": f.line_count, "sha256": f.sha256}
        for f in corpus.files
    ]


def write_manifest(corpus: ProjectCorpus, path: str | os.PathLike) -> str:
    text = dumps({"files": manifest(corpus)})
    atomic_write(path, text)
    return text
