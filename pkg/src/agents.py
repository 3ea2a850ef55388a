import re
import string
from dataclasses import dataclass
from enum import Enum, auto
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Union

from kgstore import TwoHopPath, top_k_related

TEMPLATE_DIR = Path(__file__).parent / "templates"

NO_REPORT = "No report available."
NO_RELATED_DRUGS = "No related drugs found in the knowledge graph."
NO_DESCRIPTION = "No description available."
SIMILARITY_UNAVAILABLE = "similarity unavailable"
ERROR_ANSWER = "<error: unparseable prediction>"

PLANNER_REMINDER = (
    "\n\nREMINDER: Reply with exactly two lines, 'Answer = YES' or 'Answer = NO' followed by 'REASON = ...'."
)


class AutoName(Enum):
    def _generate_next_value_(name, start, count, last_values):
        return name.lower()


class AgentId(AutoName):
    MOLANN_PLANNER = auto()
    KG_PLANNER = auto()
    DRUGREL = auto()
    BIOREL = auto()
    MU = auto()
    PREDICTION = auto()


class AnswerKind(AutoName):
    YES_NO = auto()
    TARGET_LIST = auto()
    CAPTION = auto()


class Ablation(AutoName):
    """Which parts of the agent team take part in a run."""

    FULL = auto()
    NO_PLANNING = auto()
    ONLY_MU = auto()
    ONLY_KG = auto()
    ONLY_PLANNING = auto()
    ONLY_EXPERT_ANNOTATION = auto()
    ONLY_GENERATED_CAPTION = auto()
    NO_DRUGREL = auto()
    NO_BIOREL = auto()
    NO_MU = auto()


TEMPLATE_PLACEHOLDERS: Dict[AgentId, FrozenSet[str]] = {
    AgentId.MOLANN_PLANNER: frozenset({"DESCRIPTION"}),
    AgentId.KG_PLANNER: frozenset({"TARGET_SMILES", "ANCHOR_SMILES", "ANCHOR_NAME", "TANIMOTO"}),
    AgentId.BIOREL: frozenset({"TASK_DESCRIPTION", "TANIMOTO", "TARGET_SMILES", "TWO_HOP_PATHS"}),
    AgentId.DRUGREL: frozenset(
        {
            "TASK_DESCRIPTION",
            "TARGET_SMILES",
            "ANCHOR_SMILES",
            "ANCHOR_NAME",
            "TANIMOTO",
            "RELATED_DRUGS",
            "RELATED_TANIMOTO",
        }
    ),
    AgentId.MU: frozenset({"TASK_DESCRIPTION", "TARGET_SMILES", "CAPTION", "DRUGREL_REPORT", "BIOREL_REPORT"}),
    AgentId.PREDICTION: frozenset(
        {"TASK_DESCRIPTION", "TARGET_SMILES", "MU_REPORT", "DRUGREL_REPORT", "BIOREL_REPORT", "ANSWER_FORMAT"}
    ),
}


class MissingPlaceholder(KeyError):
    def __init__(self, name: str, template: AgentId):
        super().__init__(name)
        self.name = name
        self.template = template

    def __str__(self) -> str:
        return f"Missing placeholder {self.name!r} for template {self.template.value}"


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: AgentId
    body: str

    def __post_init__(self):
        undeclared = self.fields() - TEMPLATE_PLACEHOLDERS[self.id]
        if undeclared:
            raise ValueError(f"Template {self.id.value} uses undeclared placeholders: {sorted(undeclared)}")

    def fields(self) -> FrozenSet[str]:
        return frozenset(name for _, name, _, _ in string.Formatter().parse(self.body) if name)

    @classmethod
    def from_file(cls, agent: AgentId, directory: Path = TEMPLATE_DIR) -> "PromptTemplate":
        path = Path(directory) / f"{agent.value}.txt"
        return cls(agent, path.read_text(encoding="utf-8"))


@lru_cache(maxsize=4)
def load_templates(directory: Path = TEMPLATE_DIR) -> Dict[AgentId, PromptTemplate]:
    return {agent: PromptTemplate.from_file(agent, directory) for agent in AgentId}


def _format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_prompt(template: PromptTemplate, context: Mapping[str, object]) -> str:
    """Substitute every placeholder of the template; floats are written with 4 decimals."""
    values = {}
    for name in sorted(template.fields()):
        if name not in context:
            raise MissingPlaceholder(name, template.id)
        values[name] = _format_value(context[name])
    return template.body.format_map(values)


@dataclass(frozen=True)
class PlannerDecision:
    value: bool
    reason: str
    forced: bool = False

    @classmethod
    def forced_by(cls, value: bool, rule: str) -> "PlannerDecision":
        return cls(value, rule, forced=True)


@dataclass(frozen=True)
class AgentReport:
    agent: AgentId
    text: str
    elapsed: float = 0.0


class AnswerFormat(NamedTuple):
    kind: AnswerKind
    k: int = 5


_ANSWER_LINE = re.compile(r"^\s*answer\s*=\s*(yes|no)\b", re.IGNORECASE | re.MULTILINE)
_REASON_LINE = re.compile(r"^\s*reason\s*=\s*(.*?)\s*$", re.IGNORECASE | re.MULTILINE)
_LIST_ITEM = re.compile(r"^\s*\d+\.\s*(.+?)\s*$", re.MULTILINE)
_TOKEN = re.compile(r"\S+")


def parse_yes_no(text: str) -> PlannerDecision:
    answer = _ANSWER_LINE.search(text)
    if answer is None:
        raise ParseError(f"No 'Answer = YES|NO' line in response: {text[:80]!r}")
    reason = _REASON_LINE.search(text)
    return PlannerDecision(answer.group(1).upper() == "YES", reason.group(1) if reason else "")


def parse_target_list(text: str, k: int, aliases: Optional[Mapping[str, str]] = None) -> List[str]:
    """Numbered ``<n>. <name>`` items, uppercased, deduplicated in order, at most ``k``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    items = _LIST_ITEM.findall(text)
    if not items:
        raise ParseError(f"No numbered list items in response: {text[:80]!r}")
    alias_table = {alias.upper(): symbol.upper() for alias, symbol in (aliases or {}).items()}
    targets: List[str] = []
    for item in items:
        symbol = item.strip().strip("*").strip().upper()
        symbol = alias_table.get(symbol, symbol)
        if symbol and symbol not in targets:
            targets.append(symbol)
    return targets[:k]


def clip_to_budget(text: str, budget: int) -> str:
    """Keep at most ``budget`` whitespace-separated tokens; whitespace inside the kept prefix is untouched."""
    text = text.strip()
    tokens = list(_TOKEN.finditer(text))
    if len(tokens) <= budget:
        return text
    return text[: tokens[budget - 1].end()]


def select_paths(
    paths: Sequence[TwoHopPath], cap: int, ranking: Optional[Sequence[str]] = None
) -> List[TwoHopPath]:
    """Paths to the best-ranked related drugs first, then truncated to ``cap``."""
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    if not paths:
        return []
    if ranking is None:
        ranking = [drug for drug, _ in top_k_related(paths, len(paths))]
    rank = {drug: i for i, drug in enumerate(ranking)}
    ordered = sorted(paths, key=lambda p: (rank.get(p.drug, len(rank)), p.drug, p.mid, p.rel1, p.rel2))
    return ordered[:cap]


def format_paths(
    paths: Sequence[TwoHopPath],
    cap: int,
    names: Optional[Mapping[str, str]] = None,
    ranking: Optional[Sequence[str]] = None,
) -> str:
    names = names or {}
    lines = []
    for path in select_paths(paths, cap, ranking):
        anchor, mid, drug = (names.get(i, i) for i in (path.anchor, path.mid, path.drug))
        lines.append(f"({anchor}, {path.rel1}, {mid}, {path.rel2}, {drug})")
    return "\n".join(lines)


def answer_instruction(task_description: str, fmt: AnswerFormat) -> str:
    """Fills the Prediction agent's task-and-answer-format slot."""
    if fmt.kind is AnswerKind.YES_NO:
        return (
            f"predict {task_description}. You should answer in the following format:\n\n"
            "Answer = YES or NO\nREASON = YOUR REASON HERE"
        )
    if fmt.kind is AnswerKind.TARGET_LIST:
        example = "\n".join(f"{i}. GENE SYMBOL" for i in range(1, fmt.k + 1))
        return (
            f"predict {task_description}. You should answer with a numbered list of exactly {fmt.k} "
            f"protein gene symbols, one per line, in the following format:\n\n{example}"
        )
    return f"describe {task_description}. DO NOT WRITE MORE THAN 300 TOKENS."


def format_reminder(fmt: AnswerFormat) -> str:
    if fmt.kind is AnswerKind.YES_NO:
        return PLANNER_REMINDER
    if fmt.kind is AnswerKind.TARGET_LIST:
        return f"\n\nREMINDER: Reply only with a numbered list '1. SYMBOL' to '{fmt.k}. SYMBOL'."
    return "\n\nREMINDER: Reply with a non-empty paragraph."


def parse_answer(
    text: str, fmt: AnswerFormat, aliases: Optional[Mapping[str, str]] = None, token_budget: int = 300
) -> str:
    """Canonical answer text: ``YES``/``NO``, comma-separated symbols, or the clipped caption."""
    if fmt.kind is AnswerKind.YES_NO:
        return "YES" if parse_yes_no(text).value else "NO"
    if fmt.kind is AnswerKind.TARGET_LIST:
        return ",".join(parse_target_list(text, fmt.k, aliases))
    caption = clip_to_budget(text, token_budget)
    if not caption:
        raise ParseError("Empty caption")
    return caption


def decode_answer(answer: str, fmt: AnswerFormat) -> Union[bool, List[str], str]:
    if fmt.kind is AnswerKind.YES_NO:
        return answer == "YES"
    if fmt.kind is AnswerKind.TARGET_LIST:
        return [symbol for symbol in answer.split(",") if symbol]
    return answer
