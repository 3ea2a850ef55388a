import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click
import pandas as pd

import annostore
import kgstore
from agents import Ablation, AnswerKind
from backends import CachedBackend, ChatBackend, MockBackend, MockScript, OpenAIChatBackend
from captioning import CaptioningTool, CommandCaptioningTool, StaticCaptioningTool
from config import EngineConfig
from embed import EmbeddingProvider, EmbeddingTable, FingerprintEmbedding, TableEmbedding, load_embedding_file
from evalharness import (
    DatasetError,
    check_task_schema,
    load_dataset,
    run_eval,
    split_overlap,
    write_captions,
    write_results,
)
from pipeline import PipelineDeps, TraceLog, run_query
from tasks import TaskLibrary, create_task_library

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVEL_ENV = "MOLRAG_LOG_LEVEL"


def configure_logging(verbose: int = 0):
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    env_level = os.environ.get(LOG_LEVEL_ENV)
    if env_level:
        level = env_level.upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


class EngineGroup(click.Group):
    """Reports operational failures as ``Error: ...`` with exit status 1; usage errors keep click's status 2."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except Exception as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(1)


class EngineContext:
    """Effective configuration plus lazily loaded snapshots and backends for one invocation."""

    def __init__(self, config: EngineConfig):
        self.config = config
        self._kg: Optional[kgstore.KnowledgeGraph] = None
        self._report: Optional[kgstore.IngestReport] = None
        self._store: Optional[annostore.AnnotationStore] = None
        self._working_kg: Optional[kgstore.KnowledgeGraph] = None
        self._working_store: Optional[annostore.AnnotationStore] = None
        self._backend: Optional[ChatBackend] = None

    @property
    def paths(self):
        return self.config.paths

    def tasks(self) -> TaskLibrary:
        return create_task_library(self.config.tasks)

    def knowledge_graph(self) -> kgstore.KnowledgeGraph:
        if self._kg is None:
            self.paths.ensure_exist("kg_snapshot")
            self._kg, self._report = kgstore.load_snapshot(self.paths.kg_snapshot)
        return self._kg

    def ingest_report(self) -> kgstore.IngestReport:
        self.knowledge_graph()
        return self._report

    def annotation_store(self) -> annostore.AnnotationStore:
        if self._store is None:
            self.paths.ensure_exist("annotation_snapshot")
            self._store = annostore.load_snapshot(self.paths.annotation_snapshot)
        return self._store

    def working_graph(self) -> kgstore.KnowledgeGraph:
        """Knowledge graph the pipeline retrieves from, pruned by ``pipeline.kg_fraction``."""
        if self._working_kg is None:
            settings = self.config.pipeline
            self._working_kg = self.knowledge_graph().subsample(settings.kg_fraction, settings.prune_seed)
        return self._working_kg

    def working_store(self) -> annostore.AnnotationStore:
        """Annotation store the pipeline reads captions from, pruned by ``pipeline.annotation_fraction``."""
        if self._working_store is None:
            settings = self.config.pipeline
            self._working_store = self.annotation_store().subsample(settings.annotation_fraction, settings.prune_seed)
        return self._working_store

    def embeddings(self) -> EmbeddingProvider:
        settings = self.config.pipeline
        fallback = FingerprintEmbedding(self.working_graph(), settings.fingerprint_radius, settings.fingerprint_width)
        if Path(self.paths.embeddings).exists():
            logger.info(f"Using embedding table {self.paths.embeddings}")
            return TableEmbedding(EmbeddingTable.load(self.paths.embeddings), fallback)
        return fallback

    def backend(self) -> ChatBackend:
        if self._backend is not None:
            return self._backend
        settings = self.config.backend
        if settings.kind == "mock":
            if settings.script is None:
                raise ValueError("The mock backend needs a script (--script or backend.script)")
            inner: ChatBackend = MockBackend(MockScript.from_file(settings.script))
        else:
            api_key = settings.api_key()
            if api_key is None:
                logger.warning(f"{settings.api_key_env} is not set; requests are sent without a credential")
            inner = OpenAIChatBackend(
                endpoint=settings.endpoint,
                model=settings.model,
                api_key=api_key,
                timeout=settings.timeout,
                max_in_flight=settings.max_in_flight,
                requests_per_second=settings.requests_per_second,
            )
        self._backend = CachedBackend(inner, self.paths.cache_dir)
        return self._backend

    def captioner(self) -> Optional[CaptioningTool]:
        if self.paths.captioning_command:
            return CommandCaptioningTool(self.paths.captioning_command)
        if self.paths.captioning_table is not None:
            self.paths.ensure_exist("captioning_table")
            return StaticCaptioningTool.from_file(self.paths.captioning_table)
        return None

    def aliases(self) -> Optional[Dict[str, str]]:
        if self.paths.target_aliases is None:
            return None
        self.paths.ensure_exist("target_aliases")
        df = pd.read_csv(self.paths.target_aliases, sep="\t", dtype=str, keep_default_na=False)
        return dict(zip(df["alias"], df["symbol"]))

    def deps(self) -> PipelineDeps:
        return PipelineDeps(
            kg=self.working_graph(),
            store=self.working_store(),
            embeddings=self.embeddings(),
            backend=self.backend(),
            captioner=self.captioner(),
            settings=self.config.pipeline,
            aliases=self.aliases(),
        )

    def trace_log(self) -> TraceLog:
        return TraceLog(self.paths.trace_log)


pass_engine = click.make_pass_decorator(EngineContext)

# Config overrides accepted before and after the subcommand name: (option declarations, click kwargs, config key).
OVERRIDE_OPTIONS = [
    (("--backend",), dict(type=click.Choice(["openai", "mock"]), help="Chat backend kind."), "backend.kind"),
    (
        ("--script",),
        dict(type=click.Path(dir_okay=False, path_type=Path), help="Mock backend script."),
        "backend.script",
    ),
    (("--endpoint",), dict(help="Chat-completions endpoint URL."), "backend.endpoint"),
    (("--model",), dict(help="Model name sent to the endpoint."), "backend.model"),
    (
        ("--k", "k_related"),
        dict(type=click.IntRange(min=1), help="Number of related drugs."),
        "pipeline.k_related",
    ),
    (
        ("--path-cap",),
        dict(type=click.IntRange(min=1), help="Maximum 2-hop paths per prompt."),
        "pipeline.path_cap",
    ),
    (
        ("--ablation",),
        dict(type=click.Choice([a.value for a in Ablation]), help="Agent-team ablation mode."),
        "pipeline.ablation",
    ),
    (
        ("--kg-fraction",),
        dict(type=click.FloatRange(0, 1, min_open=True), help="Share of KG triplets kept for retrieval."),
        "pipeline.kg_fraction",
    ),
    (
        ("--annotation-fraction",),
        dict(type=click.FloatRange(0, 1, min_open=True), help="Share of annotated molecules kept."),
        "pipeline.annotation_fraction",
    ),
    (("--prune-seed",), dict(type=int, help="Seed of the KG and annotation pruning."), "pipeline.prune_seed"),
    (
        ("--cache-dir",),
        dict(type=click.Path(file_okay=False, path_type=Path), help="Response cache directory."),
        "paths.cache_dir",
    ),
    (
        ("--parallelism",),
        dict(type=click.IntRange(min=1), help="Concurrent queries during eval."),
        "parallelism",
    ),
]


def _param_name(decls) -> str:
    explicit = [d for d in decls if not d.startswith("-")]
    return explicit[0] if explicit else decls[0].lstrip("-").replace("-", "_")


OVERRIDE_KEYS = {_param_name(decls): key for decls, _, key in OVERRIDE_OPTIONS}


def _apply_override(key: str) -> Callable[[click.Context, click.Parameter, Any], None]:
    def callback(ctx: click.Context, param: click.Parameter, value: Any):
        if value is None or ctx.resilient_parsing:
            return
        engine = ctx.find_object(EngineContext)
        engine.config = engine.config.with_overrides({key: value})

    return callback


def override_options(group: bool = False):
    """Attach the config override options; on subcommands they update the already built EngineContext."""

    def decorator(f):
        for decls, kwargs, key in reversed(OVERRIDE_OPTIONS):
            if group:
                f = click.option(*decls, default=None, **kwargs)(f)
            else:
                f = click.option(*decls, default=None, expose_value=False, callback=_apply_override(key), **kwargs)(f)
        return f

    return decorator


@click.group(cls=EngineGroup)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="YAML config file; relative paths inside it resolve against its directory.",
)
@override_options(group=True)
@click.option("-v", "--verbose", count=True, help="Repeat for more log output (-v info, -vv debug).")
@click.pass_context
def cli(ctx, config_path, verbose, **overrides):
    """Multi-agent retrieval-augmented molecular question answering."""
    configure_logging(verbose)
    config = EngineConfig.load(config_path).with_overrides(
        {OVERRIDE_KEYS[name]: value for name, value in overrides.items()}
    )
    ctx.obj = EngineContext(config)


@cli.command("ingest-kg")
@click.argument("tsv", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Snapshot directory.")
@click.option(
    "--layout",
    type=click.Choice(["engine", "primekg"]),
    default="engine",
    show_default=True,
    help="Triplet TSV in engine columns, or a raw PrimeKG kg.csv.",
)
@click.option(
    "--drug-smiles",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="TSV with columns id and smiles joined onto PrimeKG drugs.",
)
@pass_engine
def ingest_kg(engine: EngineContext, tsv: Path, out: Optional[Path], layout: str, drug_smiles: Optional[Path]):
    """Ingest knowledge-graph triplets into a snapshot."""
    smiles = None
    if drug_smiles is not None:
        df = pd.read_csv(drug_smiles, sep="\t", dtype=str, keep_default_na=False)
        smiles = dict(zip(df["id"], df["smiles"]))
    kg, report = kgstore.load_triplet_file(tsv, layout=layout, drug_smiles=smiles)
    out = kgstore.save_snapshot(kg, report, out or engine.paths.kg_snapshot)
    click.echo(f"triplets: {report.triplet_count}")
    click.echo(f"entities: {len(kg.entities)}")
    click.echo(f"rejected: {len(report.rejected_lines)}")
    click.echo(f"duplicates collapsed: {report.duplicates_collapsed}")
    click.echo(f"snapshot: {out}")


@cli.command("ingest-annotations")
@click.argument("tsv", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Snapshot TSV.")
@pass_engine
def ingest_annotations(engine: EngineContext, tsv: Path, out: Optional[Path]):
    """Ingest a molecule caption TSV into a snapshot."""
    store = annostore.load_annotation_file(tsv)
    out = annostore.save_snapshot(store, out or engine.paths.annotation_snapshot)
    stats = store.stats
    click.echo(f"molecules: {stats.molecule_count}")
    click.echo(f"captions: {stats.caption_count}")
    click.echo(f"unparseable: {stats.unparseable_rows}")
    click.echo(f"snapshot: {out}")


@cli.command("import-embeddings")
@click.argument("file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Archive path (.npz).")
@pass_engine
def import_embeddings(engine: EngineContext, file: Path, out: Optional[Path]):
    """Validate a text embedding table and store it in the workspace."""
    table, rejected = load_embedding_file(file)
    out = table.save(out or engine.paths.embeddings)
    click.echo(f"embeddings: {len(table)} x {table.dim}")
    click.echo(f"rejected: {len(rejected)}")
    click.echo(f"archive: {out}")


@cli.command()
@click.option("--smiles", required=True, help="Query molecule.")
@click.option("--task", "task_id", required=True, help="Task id, e.g. dili or targets_activate.")
@override_options()
@pass_engine
def query(engine: EngineContext, smiles: str, task_id: str):
    """Answer one molecule-task query and log its trace."""
    task = engine.tasks().get_task(task_id)
    deps = engine.deps()
    trace = run_query(deps, smiles, task)
    log = engine.trace_log()
    log.append(trace.to_record(deps.kg))
    click.echo(f"answer: {trace.answer}")
    click.echo(f"trace: {trace.trace_id}")
    click.echo(f"trace log: {log.path}")
    for warning in trace.warnings:
        click.echo(f"warning: {warning}", err=True)


@cli.command("eval")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--schema", type=click.Choice(["toxicity", "targets", "captioning"]), required=True)
@click.option("--task", "task_id", required=True, help="Task id the dataset is evaluated under.")
@click.option(
    "--split-overlap",
    "use_split",
    is_flag=True,
    help="Evaluate only molecules not covered by the KG or annotations.",
)
@click.option("--judge", is_flag=True, help="Use the backend to judge annotation sufficiency for --split-overlap.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Results JSON.")
@click.option("--captions-out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Captions TSV.")
@click.option("--strict", is_flag=True, help="Exit with status 1 when any query failed.")
@click.option("--no-progress", is_flag=True, help="Disable the progress bar.")
@override_options()
@click.pass_context
def evaluate(
    ctx: click.Context,
    dataset: Path,
    schema: str,
    task_id: str,
    use_split: bool,
    judge: bool,
    out: Optional[Path],
    captions_out: Optional[Path],
    strict: bool,
    no_progress: bool,
):
    """Run a labeled dataset through the pipeline and report the task metric."""
    engine: EngineContext = ctx.obj
    task = engine.tasks().get_task(task_id)
    check_task_schema(schema, task)
    loaded = load_dataset(dataset, schema)
    deps = engine.deps()
    examples = loaded.examples

    relaxed = None
    if use_split:
        split = split_overlap(examples, deps.kg, deps.store, deps.backend if judge else None, task)
        click.echo(f"overlap: {len(split.overlap)}")
        click.echo(f"no overlap: {len(split.no_overlap)}")
        if split.judge_failures:
            click.echo(f"judge failures: {split.judge_failures}")
        if not split.no_overlap:
            raise DatasetError("Every example overlaps the knowledge sources; nothing left to evaluate")
        examples, relaxed = split.no_overlap, split.relaxed

    log = engine.trace_log()
    result = run_eval(
        deps,
        examples,
        task,
        parallelism=engine.config.parallelism,
        progress=not no_progress and sys.stderr.isatty(),
        on_trace=lambda trace: log.append(trace.to_record(deps.kg)),
    )
    result = result.model_copy(update={"overlap_relaxed": relaxed})

    click.echo(f"{result.metric_name}: {result.metric:.4f}")
    click.echo(f"n: {result.n}")
    click.echo(f"errors: {result.errors}")
    click.echo(f"tool rate: {result.tool_rate:.4f}")
    click.echo(f"kg rate: {result.kg_rate:.4f}")
    if out is not None:
        click.echo(f"results: {write_results(result, out)}")
    if captions_out is not None:
        if task.answer_format.kind is not AnswerKind.CAPTION:
            raise click.UsageError(
                f"--captions-out needs a captioning task, {task.id} is {task.answer_format.kind.value}"
            )
        click.echo(f"captions: {write_captions(result, captions_out)}")
    if strict and result.errors:
        click.echo(f"Error: {result.errors} of {result.n} queries failed", err=True)
        ctx.exit(1)


@cli.command()
@pass_engine
def stats(engine: EngineContext):
    """Print knowledge-graph and annotation statistics."""
    shown = False
    if Path(engine.paths.kg_snapshot).exists():
        report = engine.ingest_report()
        click.echo(f"triplets: {report.triplet_count}")
        click.echo(f"entity kinds: {len(report.entity_counts)}")
        for kind, count in report.entity_counts.items():
            click.echo(f"  {kind}: {count}")
        click.echo(f"relations: {len(report.relation_counts)}")
        for relation, count in report.relation_counts.items():
            click.echo(f"  {relation}: {count}")
        click.echo(f"rejected: {len(report.rejected_lines)}")
        click.echo(f"duplicates collapsed: {report.duplicates_collapsed}")
        shown = True
    if Path(engine.paths.annotation_snapshot).exists():
        store_stats = engine.annotation_store().stats
        click.echo(f"molecules: {store_stats.molecule_count}")
        click.echo(f"captions: {store_stats.caption_count}")
        click.echo(f"mean captions per molecule: {store_stats.mean_captions:.3f}")
        shown = True
    if not shown:
        raise FileNotFoundError(f"No snapshots found in {engine.paths.workspace}; run ingest-kg or ingest-annotations")


@cli.command("trace-show")
@click.argument("trace_id")
@pass_engine
def trace_show(engine: EngineContext, trace_id: str):
    """Print a logged trace by id or unique id prefix."""
    log = engine.trace_log()
    record = log.find(trace_id)
    if record is None:
        raise LookupError(f"No trace {trace_id!r} in {log.path}")
    click.echo(record.model_dump_json(indent=2))


def main():
    cli(prog_name="molrag")


if __name__ == "__main__":
    main()
