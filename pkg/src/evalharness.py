import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Callable, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from agents import AnswerKind, ParseError, decode_answer, parse_yes_no
from annostore import AnnotationStore, escape_field
from backends import BackendError, ChatBackend, ChatRequest
from chem import SmilesSyntaxError, canonical_key, parse_smiles
from kgstore import KnowledgeGraph
from pipeline import AgentPipeline, PipelineDeps, PipelineTrace
from tasks import DIRECTIONS, TaskSpec

logger = logging.getLogger(__name__)

OVERLAP_JUDGE_PROMPT = """You are now working as an excellent expert in chemistry and drug discovery.
Your task is to judge whether the following description of a molecule contains sufficient information
relevant to predicting {task}.

Description: {description}

You should answer in the following format:

Answer = YES or NO
REASON = YOUR REASON HERE

THERE SHOULD BE NO OTHER CONTENT INCLUDED IN YOUR RESPONSE."""


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class EmptyGold(ValueError):
    pass


class DatasetError(ValueError):
    pass


class AbsentClassWarning(UserWarning):
    pass


class DatasetSchema(Enum):
    TOXICITY = "toxicity"
    TARGETS = "targets"
    CAPTIONING = "captioning"

    @property
    def columns(self) -> List[str]:
        return {
            DatasetSchema.TOXICITY: ["smiles", "label"],
            DatasetSchema.TARGETS: ["smiles", "activate", "inhibit"],
            DatasetSchema.CAPTIONING: ["smiles"],
        }[self]


class LabeledExample(NamedTuple):
    smiles: str
    label: Optional[bool] = None
    activate: FrozenSet[str] = frozenset()
    inhibit: FrozenSet[str] = frozenset()

    def gold(self, direction: str) -> FrozenSet[str]:
        return self.activate if direction == "activate" else self.inhibit


class LoadedDataset(NamedTuple):
    schema: DatasetSchema
    examples: List[LabeledExample]
    rejected_lines: List[Tuple[int, str]]
    unparseable: int


def _symbols(cell: str) -> FrozenSet[str]:
    return frozenset(s.strip().upper() for s in cell.split(",") if s.strip())


def _read_cells(path: Path) -> List[Tuple[int, List[str]]]:
    """Non-blank rows with their 1-based line numbers; rows may have any number of cells."""
    with open(path, "r", encoding="utf-8", newline="") as infile:
        reader = csv.reader(infile, delimiter="\t", quoting=csv.QUOTE_NONE)
        return [(reader.line_num, [cell.strip() for cell in row]) for row in reader if any(c.strip() for c in row)]


def _as_schema(schema: Union[str, DatasetSchema]) -> DatasetSchema:
    if isinstance(schema, DatasetSchema):
        return schema
    try:
        return DatasetSchema(schema)
    except ValueError:
        raise DatasetError(f"Unknown dataset schema {schema!r}; expected one of {[s.value for s in DatasetSchema]}")


TASK_SCHEMAS = {
    AnswerKind.YES_NO: DatasetSchema.TOXICITY,
    AnswerKind.TARGET_LIST: DatasetSchema.TARGETS,
}


def check_task_schema(schema: Union[str, DatasetSchema], task: TaskSpec) -> DatasetSchema:
    """The dataset schema a task can be scored against; captioning tasks accept any schema."""
    schema = _as_schema(schema)
    expected = TASK_SCHEMAS.get(task.answer_format.kind)
    if expected is not None and schema is not expected:
        raise DatasetError(
            f"Task {task.id} ({task.answer_format.kind.value}) needs a {expected.value} dataset, got {schema.value}"
        )
    return schema


def load_dataset(path: Path, schema: Union[str, DatasetSchema]) -> LoadedDataset:
    """Load a task dataset TSV.

    Toxicity rows are ``smiles label(0|1)``, target rows ``smiles activate inhibit`` with comma-separated
    symbols, captioning rows ``smiles``. A leading header row is optional. Missing trailing cells read as empty;
    rows with more cells than the schema has columns are rejected. Unparseable SMILES are skipped and counted;
    malformed rows are rejected with their line number.
    """
    schema = _as_schema(schema)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")

    rows = _read_cells(path)
    if rows and rows[0][1][0].lower() == "smiles":
        rows = rows[1:]
    if not rows:
        raise DatasetError(f"Dataset {path} is empty")

    examples: List[LabeledExample] = []
    rejected: List[Tuple[int, str]] = []
    unparseable = 0
    width = len(schema.columns)
    for line_number, cells in rows:
        while len(cells) > width and not cells[-1]:
            cells.pop()
        if len(cells) > width:
            rejected.append((line_number, f"expected at most {width} fields, got {len(cells)}"))
            continue
        cells = cells + [""] * (width - len(cells))
        smiles = cells[0]
        if not smiles:
            rejected.append((line_number, "missing smiles"))
            continue
        try:
            parse_smiles(smiles)
        except SmilesSyntaxError as e:
            unparseable += 1
            rejected.append((line_number, f"unparseable SMILES: {e}"))
            continue

        if schema is DatasetSchema.TOXICITY:
            if cells[1] not in ("0", "1"):
                rejected.append((line_number, f"label must be 0 or 1, got {cells[1]!r}"))
                continue
            examples.append(LabeledExample(smiles, label=cells[1] == "1"))
        elif schema is DatasetSchema.TARGETS:
            activate, inhibit = _symbols(cells[1]), _symbols(cells[2])
            if not activate and not inhibit:
                rejected.append((line_number, "no gold targets"))
                continue
            examples.append(LabeledExample(smiles, activate=activate, inhibit=inhibit))
        else:
            examples.append(LabeledExample(smiles))

    for line_number, reason in rejected:
        logger.warning(f"{path.name} line {line_number} rejected: {reason}")
    if not examples:
        raise DatasetError(f"Dataset {path} has no valid rows ({len(rejected)} rejected)")
    logger.info(f"Loaded {len(examples)} {schema.value} examples from {path} ({unparseable} unparseable)")
    return LoadedDataset(schema, examples, rejected, unparseable)


def macro_f1(predictions: Sequence[bool], labels: Sequence[bool]) -> float:
    """Unweighted mean of positive- and negative-class F1; a class absent from both sides scores 0."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not len(labels):
        raise EmptyInput("macro_f1 needs at least one example")
    predicted = np.asarray(predictions, dtype=bool)
    actual = np.asarray(labels, dtype=bool)

    scores = []
    for cls in (True, False):
        tp = int(np.sum((predicted == cls) & (actual == cls)))
        fp = int(np.sum((predicted == cls) & (actual != cls)))
        fn = int(np.sum((predicted != cls) & (actual == cls)))
        if tp + fp + fn == 0:
            warnings.warn(f"Class {cls} absent from predictions and labels; scored F1 = 0", AbsentClassWarning)
            scores.append(0.0)
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def precision_at_k(predicted: Sequence[str], gold: Iterable[str], k: int) -> float:
    """|first k predictions in gold| / k; the divisor stays k when fewer are predicted."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    gold_set = {g.strip().upper() for g in gold if g.strip()}
    if not gold_set:
        raise EmptyGold("precision_at_k needs a non-empty gold set")
    top: List[str] = []
    for symbol in (p.strip().upper() for p in predicted):
        if symbol and symbol not in top:
            top.append(symbol)
    return len(set(top[:k]) & gold_set) / k


class OverlapSplit(NamedTuple):
    overlap: List[LabeledExample]
    no_overlap: List[LabeledExample]
    relaxed: bool
    judge_failures: int


def split_overlap(
    examples: Sequence[LabeledExample],
    kg: KnowledgeGraph,
    store: AnnotationStore,
    judge: Optional[ChatBackend] = None,
    task: Optional[TaskSpec] = None,
) -> OverlapSplit:
    """Partition examples by whether the external knowledge already covers them.

    A molecule overlaps when it is a KG drug, or when its annotation is judged task-sufficient. Without a judge,
    having an annotation at all counts as overlap and the split is flagged as relaxed.
    """
    overlap: List[LabeledExample] = []
    no_overlap: List[LabeledExample] = []
    failures = 0
    for example in examples:
        key = canonical_key(parse_smiles(example.smiles))
        if kg.drug_by_key(key) is not None:
            overlap.append(example)
            continue
        caption = store.lookup_caption(key)
        if caption is None:
            no_overlap.append(example)
            continue
        if judge is None:
            overlap.append(example)
            continue
        prompt = OVERLAP_JUDGE_PROMPT.format(task=task.description if task else "the task", description=caption)
        try:
            sufficient = parse_yes_no(judge.complete(ChatRequest(user=prompt))).value
        except (BackendError, ParseError) as e:
            failures += 1
            logger.warning(f"Overlap judge failed for {example.smiles}, using annotation presence: {e}")
            sufficient = True
        (overlap if sufficient else no_overlap).append(example)

    logger.info(f"Overlap split: {len(overlap)} overlap, {len(no_overlap)} no overlap")
    return OverlapSplit(overlap, no_overlap, relaxed=judge is None, judge_failures=failures)


class ExampleResult(BaseModel):
    smiles: str
    predicted: Union[bool, List[str], str, None] = None
    score: Optional[float] = None
    trace_ids: List[str] = []


class ExampleFailure(BaseModel):
    smiles: str
    error: str


class EvalResult(BaseModel):
    task: str
    metric_name: str
    metric: float
    n: int
    errors: int
    tool_rate: float = 0.0
    kg_rate: float = 0.0
    overlap_relaxed: Optional[bool] = None
    per_example: List[ExampleResult] = []
    failures: List[ExampleFailure] = []


class _Outcome(NamedTuple):
    example: LabeledExample
    result: Optional[ExampleResult]
    traces: List[PipelineTrace]
    error: Optional[str]


def _run_example(pipeline: AgentPipeline, example: LabeledExample, task: TaskSpec) -> _Outcome:
    traces: List[PipelineTrace] = []
    try:
        if task.answer_format.kind is AnswerKind.TARGET_LIST:
            if task.directional:
                runs = [(task.for_direction(d), example.gold(d)) for d in DIRECTIONS]
            else:
                direction = task.id.rpartition("_")[2]
                gold = example.gold(direction) if direction in DIRECTIONS else example.activate | example.inhibit
                runs = [(task, gold)]
            scores = []
            predicted: List[str] = []
            for concrete, gold in runs:
                if not gold:
                    continue
                trace = pipeline.run_query(example.smiles, concrete)
                traces.append(trace)
                if trace.error:
                    raise ParseError(trace.error)
                symbols = decode_answer(trace.answer, task.answer_format)
                predicted.extend(symbols)
                scores.append(precision_at_k(symbols, gold, task.answer_format.k))
            if not scores:
                raise EmptyGold(f"No gold targets for {task.id}")
            result = ExampleResult(
                smiles=example.smiles,
                predicted=predicted,
                score=float(np.mean(scores)),
                trace_ids=[t.trace_id for t in traces],
            )
        else:
            trace = pipeline.run_query(example.smiles, task)
            traces.append(trace)
            if trace.error:
                raise ParseError(trace.error)
            predicted = decode_answer(trace.answer, task.answer_format)
            score = None
            if task.answer_format.kind is AnswerKind.YES_NO:
                score = 1.0 if predicted == example.label else 0.0
            result = ExampleResult(smiles=example.smiles, predicted=predicted, score=score, trace_ids=[trace.trace_id])
    except Exception as e:  # one failed query never aborts the batch
        logger.warning(f"Query failed for {example.smiles}: {e}")
        return _Outcome(example, None, traces, f"{type(e).__name__}: {e}")
    return _Outcome(example, result, traces, None)


def run_eval(
    deps: PipelineDeps,
    examples: Sequence[LabeledExample],
    task: TaskSpec,
    parallelism: int = 4,
    progress: bool = False,
    on_trace: Optional[Callable[[PipelineTrace], None]] = None,
) -> EvalResult:
    """Run every example through the pipeline with bounded parallelism and score the answers.

    Yes/no tasks report Macro-F1, target tasks mean precision@k over the scored directions, captioning tasks the
    share of examples that produced a caption. Results are assembled in dataset order.
    """
    if not examples:
        raise EmptyInput("run_eval needs at least one example")
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    if task.answer_format.kind is AnswerKind.YES_NO and any(e.label is None for e in examples):
        raise DatasetError(f"Task {task.id} needs yes/no labels on every example")

    pipeline = AgentPipeline(deps)

    with ThreadPoolExecutor(max_workers=parallelism) as executor:
        outcomes = list(
            tqdm(
                executor.map(lambda example: _run_example(pipeline, example, task), examples),
                total=len(examples),
                desc=task.id,
                disable=not progress,
            )
        )

    per_example = [o.result for o in outcomes if o.result is not None]
    failures = [ExampleFailure(smiles=o.example.smiles, error=o.error) for o in outcomes if o.error is not None]
    traces = [trace for o in outcomes for trace in o.traces]
    if on_trace is not None:
        for trace in traces:
            on_trace(trace)

    kind = task.answer_format.kind
    succeeded = [o for o in outcomes if o.result is not None]
    if kind is AnswerKind.YES_NO:
        metric_name = "macro_f1"
        predictions = [o.result.predicted for o in succeeded]
        metric = macro_f1(predictions, [o.example.label for o in succeeded]) if succeeded else 0.0
    elif kind is AnswerKind.TARGET_LIST:
        metric_name = f"precision_at_{task.answer_format.k}"
        metric = float(np.mean([r.score for r in per_example])) if per_example else 0.0
    else:
        metric_name = "caption_rate"
        metric = len(per_example) / len(examples)

    planned = [t for t in traces if t.o_map is not None and t.o_kgp is not None]
    return EvalResult(
        task=task.id,
        metric_name=metric_name,
        metric=metric,
        n=len(per_example) + len(failures),
        errors=len(failures),
        tool_rate=float(np.mean([t.tool_invoked for t in planned])) if planned else 0.0,
        kg_rate=float(np.mean([t.o_kgp.value for t in planned])) if planned else 0.0,
        per_example=per_example,
        failures=failures,
    )


def write_results(result: EvalResult, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.model_dump(), indent=2) + "\n", encoding="utf-8")
    return path


def write_captions(result: EvalResult, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as outfile:
        outfile.write("smiles\tcaption\n")
        for example in result.per_example:
            outfile.write(f"{example.smiles}\t{escape_field(str(example.predicted))}\n")
    return path
