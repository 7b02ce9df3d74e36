"""Command-line entry point.

Exit codes: 0 clean, 1 confirmed weaknesses found, 2 operational error.
"""

from __future__ import annotations

import functools
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .config import Config, ConfigError, ProviderSession, load_config, make_embedder
from .corpus import CorpusError, chunk_corpus, ingest, manifest
from .evaluation import (
    FULL,
    STEP1_ONLY,
    EvalError,
    format_recall_table,
    load_dataset,
    run_eval,
    write_eval_outputs,
    render_eval_text,
)
from .llm import Cassette, LLMError
from .pipeline import ScanReport, scan
from .serialize import atomic_write, dumps
from .vectordb import ContextDatabase, IndexFormatError, VectorDbError, VectorIndex, build_index

EXIT_CLEAN, EXIT_FINDINGS, EXIT_ERROR = 0, 1, 2
INDEX_DIRNAME = ".cwescout"
INDEX_FILE, MANIFEST_FILE = "index.idx", "manifest.json"

log = logging.getLogger("cwescout")


def _defaults_epilog() -> str:
    # "\b" stops click from rewrapping the paragraph that follows
    lines = ["\b", "Configuration fields (config file keys) and defaults:"]
    for name, value in Config.describe_defaults():
        if isinstance(value, tuple):
            value = ", ".join(value)
        lines.append(f"  {name} = {value}")
    lines += [
        "",
        "\b",
        "Environment: CWESCOUT_LLM_URL, CWESCOUT_LLM_KEY, CWESCOUT_EMBED_URL.",
        "Secrets are never accepted as flags or config keys.",
    ]
    return "\n".join(lines)


def config_options(f):
    """Options shared by the group and every subcommand; later ones win."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file."),
        click.option("--record", type=click.Path(), help="Record LLM calls to this cassette (file or directory)."),
        click.option("--replay", type=click.Path(), help="Replay LLM calls from this cassette (file or directory)."),
        click.option("--single-agent", is_flag=True, default=None, help="Disable the reviewer agent.  [default: off]"),
        click.option("--no-context", is_flag=True, default=None, help="Skip project context retrieval.  [default: off]"),
        click.option("--k-chunk", type=int, help="Lines per code chunk.  [default: 10]"),
        click.option("--k-retrieval", type=int, help="Chunks retrieved per question.  [default: 5]"),
        click.option("--max-iterations", type=int, help="Lister/reviewer debate cap.  [default: 5]"),
        click.option("--model", "llm_model", help="Chat model name.  [default: gpt-4o]"),
        click.option("--embedder", type=click.Choice(["mock", "http"]), help="Embedding provider.  [default: mock]"),
        click.option("--include", "include_globs", multiple=True, help="Include glob (repeatable)."),
        click.option("--exclude", "exclude_globs", multiple=True, help="Exclude glob (repeatable)."),
        click.option("--exclude-function", is_flag=True, default=None,
                      help="Keep the function under review out of the context database.  [default: off]"),
    ]
    for opt in reversed(options):
        f = opt(f)

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        settings = dict(ctx.obj or {})
        keys = ("config_path", "record", "replay", "single_agent", "no_context", "k_chunk",
                "k_retrieval", "max_iterations", "llm_model", "embedder", "include_globs",
                "exclude_globs", "exclude_function")
        for key in keys:
            value = kwargs.pop(key)
            if value not in (None, ()):
                settings[key] = value
        ctx.obj = settings
        return f(*args, **kwargs)

    return wrapper


def _resolve(ctx: click.Context) -> tuple[Config, bool]:
    s = dict(ctx.obj or {})
    overrides = {
        "record": s.get("record"),
        "replay": s.get("replay"),
        "single_agent": s.get("single_agent"),
        "k_chunk": s.get("k_chunk"),
        "k_retrieval": s.get("k_retrieval"),
        "max_debate_iterations": s.get("max_iterations"),
        "llm_model": s.get("llm_model"),
        "embedder": s.get("embedder"),
        "include_globs": s.get("include_globs"),
        "exclude_globs": s.get("exclude_globs"),
        "exclude_function": s.get("exclude_function"),
    }
    try:
        config = load_config(s.get("config_path"), overrides)
    except ConfigError as exc:
        raise _fail(str(exc))
    return config, bool(s.get("no_context"))


def _fail(message: str) -> click.exceptions.Exit:
    click.echo(f"error: {message}", err=True)
    return click.exceptions.Exit(EXIT_ERROR)


@click.group(epilog=_defaults_epilog(), context_settings={"max_content_width": 100})
@click.version_option(__version__, prog_name="cwescout")
@click.option("-v", "--verbose", count=True, help="More logging (-vv for debug).")
@config_options
def main(verbose: int):
    """Identify CWE weaknesses in a function with a multi-agent LLM pipeline."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- index -------------------------------------------------------------------


def _manifest_doc(corpus, config: Config, fingerprint: str, n_chunks: int) -> str:
    return dumps({
        "files": manifest(corpus),
        "k_chunk": config.k_chunk,
        "chunks": n_chunks,
        "embedder": fingerprint,
        "include_globs": list(corpus.include_globs),
        "exclude_globs": list(corpus.exclude_globs),
    })


def _index_dir(root: Path, out: str | None) -> Path:
    return Path(out) if out else root / INDEX_DIRNAME


@main.command("index")
@click.argument("root", type=click.Path(file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Index directory.  [default: ROOT/.cwescout]")
@config_options
@click.pass_context
def cmd_index(ctx, root, out):
    """Build the context embedding database for a project."""
    config, _ = _resolve(ctx)
    root_path = Path(root)
    try:
        corpus = ingest(root_path, config.include_globs, config.exclude_globs)
        chunks = chunk_corpus(corpus, config.k_chunk)
        embedder = make_embedder(config)
        outdir = _index_dir(root_path, out)
        doc = _manifest_doc(corpus, config, embedder.fingerprint, len(chunks))
        index_path, manifest_path = outdir / INDEX_FILE, outdir / MANIFEST_FILE
        for w in corpus.warnings:
            click.echo(f"warning: {w}", err=True)
        if (
            index_path.is_file()
            and manifest_path.is_file()
            and manifest_path.read_text(encoding="utf-8") == doc
        ):
            click.echo(f"index up to date: {len(corpus.files)} files, {len(chunks)} chunks")
            return
        index = build_index(chunks, embedder)
        index.save(index_path)
        atomic_write(manifest_path, doc)
    except (CorpusError, VectorDbError, LLMError, OSError) as exc:
        raise _fail(f"{type(exc).__name__}: {exc}")
    click.echo(f"indexed {len(corpus.files)} files, {len(chunks)} chunks (k={config.k_chunk}) -> {index_path}")


def _cached_database(root: Path, config: Config, embedder) -> ContextDatabase | None:
    """Load ROOT/.cwescout if it was built from the same files and settings."""
    if config.exclude_function:
        return None
    outdir = root / INDEX_DIRNAME
    try:
        corpus = ingest(root, config.include_globs, config.exclude_globs)
        chunks = chunk_corpus(corpus, config.k_chunk)
        doc = _manifest_doc(corpus, config, embedder.fingerprint, len(chunks))
        if (outdir / MANIFEST_FILE).read_text(encoding="utf-8") != doc:
            return None
        return ContextDatabase(chunks, VectorIndex.load(outdir / INDEX_FILE), embedder)
    except (OSError, CorpusError, IndexFormatError, VectorDbError, ValueError):
        return None


# -- scan / replay -----------------------------------------------------------


def _summary(report: ScanReport) -> str:
    lines = []
    if report.error:
        lines.append(f"scan failed: {report.error}")
    flags = [name for name, on in (("DEGRADED", report.degraded), ("CONTEXT_FREE", report.context_free)) if on]
    lines.append(
        f"{len(report.candidates)} candidates, {len(report.confirmed)} confirmed, "
        f"{len(report.rejected)} rejected" + (f"  [{', '.join(flags)}]" if flags else "")
    )
    prob = {c.cwe_id: c.probability for c in report.candidates}
    order = {c.cwe_id: i for i, c in enumerate(report.candidates)}
    for label, decisions in (("CONFIRMED", report.confirmed), ("rejected", report.rejected)):
        for d in sorted(decisions, key=lambda d: order.get(d.cwe_id, 0)):
            why = " ".join(d.justification.split())
            if len(why) > 100:
                why = why[:97] + "..."
            lines.append(f"  {label:<9} {d.cwe_id:<9} p={prob.get(d.cwe_id, 0):.2f}  {d.title}  -- {why}")
    if report.warnings:
        lines.append(f"{len(report.warnings)} warning(s); see the report file")
    return "\n".join(lines)


def _exit_code(report: ScanReport) -> int:
    if report.error:
        return EXIT_ERROR
    return EXIT_FINDINGS if report.confirmed else EXIT_CLEAN


def _run_scan(config: Config, function_text: str, root: str | None, out: str, session: ProviderSession) -> int:
    database = None
    if root is not None and session.cassette is None:
        database = _cached_database(Path(root), config, session.embedder)
    report = scan(function_text, root, config, session.llm, session.embedder, database)
    path = report.write(out)
    saved = session.save({
        "function": function_text,
        "project_root": str(Path(root).resolve()) if root else None,
        "config": {
            "k_chunk": config.k_chunk,
            "k_retrieval": config.k_retrieval,
            "max_debate_iterations": config.max_debate_iterations,
            "single_agent": config.single_agent,
            "llm_model": config.llm_model,
            "temperature": config.temperature,
            "embedder": config.embedder,
            "embed_dim": config.embed_dim,
            "exclude_function": config.exclude_function,
            "include_globs": list(config.include_globs),
            "exclude_globs": list(config.exclude_globs),
        },
    })
    click.echo(_summary(report))
    click.echo(f"report: {path}")
    if saved:
        click.echo(f"cassette: {saved}")
    return _exit_code(report)


@main.command("scan")
@click.argument("function_file", type=click.Path(dir_okay=False))
@click.option("--root", type=click.Path(file_okay=False), help="Project root for context retrieval.")
@click.option("--out", default=".", show_default=True, type=click.Path(file_okay=False),
              help="Directory for the <function-hash>.report file.")
@config_options
@click.pass_context
def cmd_scan(ctx, function_file, root, out):
    """Scan the function in FUNCTION_FILE."""
    config, no_context = _resolve(ctx)
    try:
        function_text = Path(function_file).read_text(encoding="utf-8")
    except OSError as exc:
        raise _fail(str(exc))
    if not function_text.strip():
        raise _fail(f"{function_file} is empty")
    if no_context:
        root = None
    try:
        session = ProviderSession(config)
        code = _run_scan(config, function_text, root, out, session)
    except (LLMError, VectorDbError, OSError) as exc:
        raise _fail(f"{type(exc).__name__}: {exc}")
    ctx.exit(code)


@main.command("replay")
@click.argument("cassette", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=".", show_default=True, type=click.Path(file_okay=False))
@config_options
@click.pass_context
def cmd_replay(ctx, cassette, out):
    """Re-render a scan report from a recorded CASSETTE without network access."""
    config, _ = _resolve(ctx)
    try:
        meta = Cassette.load(cassette).meta
        function_text = meta["function"]
        recorded = dict(meta.get("config", {}))
    except (LLMError, KeyError) as exc:
        raise _fail(f"cassette cannot be replayed: {exc}")
    try:
        config = config.merged(recorded).merged({"replay": cassette})
        config = replace(config, record=None)
        session = ProviderSession(config)
        code = _run_scan(config, function_text, meta.get("project_root"), out, session)
    except (ConfigError, LLMError, VectorDbError, OSError) as exc:
        raise _fail(f"{type(exc).__name__}: {exc}")
    ctx.exit(code)


# -- eval --------------------------------------------------------------------


@main.command("eval")
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--mode", type=click.Choice([STEP1_ONLY, FULL], case_sensitive=False), default=FULL,
              show_default=True, help="STEP1_ONLY scores candidate lists; FULL runs whole scans.")
@click.option("--out", default="eval-out", show_default=True, type=click.Path(file_okay=False),
              help="Directory for tables, records and per-sample reports.")
@click.option("--compare-arms", is_flag=True,
              help="Run both single- and multi-agent arms; cassettes live in <dir>/single-agent and <dir>/multi-agent.")
@config_options
@click.pass_context
def cmd_eval(ctx, dataset, mode, out, compare_arms):
    """Evaluate the pipeline on a JSON-lines DATASET."""
    config, _ = _resolve(ctx)
    mode = mode.upper()
    try:
        data = load_dataset(dataset)
    except (EvalError, OSError) as exc:
        raise _fail(f"{type(exc).__name__}: {exc}")
    for err in data.errors:
        click.echo(f"warning: {dataset}:{err.line}: {err.message}", err=True)

    arms = [("multi-agent", False), ("single-agent", True)] if compare_arms else [(None, config.single_agent)]
    results = []
    for arm, single in arms:
        cfg = replace(config, single_agent=single)
        if arm is not None:
            cfg = replace(
                cfg,
                record=str(Path(config.record) / arm) if config.record else None,
                replay=str(Path(config.replay) / arm) if config.replay else None,
            )
        try:
            result = run_eval(data, cfg, mode, report_dir=Path(out) / "reports")
        except (EvalError, ConfigError, OSError) as exc:
            raise _fail(f"{type(exc).__name__}: {exc}")
        write_eval_outputs(result, out)
        results.append(result)
        click.echo(render_eval_text(result))

    if compare_arms and all(r.recall for r in results):
        table = format_recall_table(
            [("Single-agent", results[1].recall), ("Multi-agent", results[0].recall)]
        )
        atomic_write(Path(out) / f"{mode.lower()}-arms.txt", table)
        click.echo("Arm comparison\n" + table)
    failed = sum(len(r.errors) for r in results)
    if failed:
        click.echo(f"partial completion: {failed} sample(s) failed", err=True)
        ctx.exit(EXIT_ERROR)
    ctx.exit(EXIT_CLEAN)


if __name__ == "__main__":
    sys.exit(main())
