from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional

from agents import AnswerFormat, AnswerKind

DIRECTIONS = ("activate", "inhibit")


@dataclass(frozen=True)
class TaskSpec:
    """Holds the instruction a query is answered under."""

    id: str
    description: str
    answer_format: AnswerFormat
    directional: bool = False

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError(f"Task {self.id} needs a non-empty description")

    def for_direction(self, direction: str) -> "TaskSpec":
        """Concrete task for one direction of a directional task (``targets`` -> ``targets_activate``)."""
        if not self.directional:
            raise ValueError(f"Task {self.id} is not directional")
        if direction not in DIRECTIONS:
            raise ValueError(f"Unknown direction {direction!r}; expected one of {DIRECTIONS}")
        return TaskSpec(
            id=f"{self.id}_{direction}",
            description=self.description.format(direction=direction),
            answer_format=self.answer_format,
        )


class TaskLibrary:
    def __init__(self):
        self.tasks: Dict[str, TaskSpec] = {}

    def add_task(self, task: TaskSpec) -> None:
        if task.id in self.tasks:
            raise ValueError(f"Task {task.id} already exists")
        self.tasks[task.id] = task

    def get_task(self, task_id: str) -> TaskSpec:
        """Look up a task; ``<id>_<direction>`` resolves to a direction of a directional task."""
        if task_id in self.tasks:
            return self.tasks[task_id]
        base, _, direction = task_id.rpartition("_")
        if base in self.tasks and self.tasks[base].directional:
            return self.tasks[base].for_direction(direction)
        raise KeyError(f"Unknown task {task_id!r}; known tasks: {', '.join(self.ids())}")

    def __getitem__(self, task_id: str) -> TaskSpec:
        return self.get_task(task_id)

    def __contains__(self, task_id: str) -> bool:
        try:
            self.get_task(task_id)
        except (KeyError, ValueError):
            return False
        return True

    def ids(self) -> List[str]:
        return sorted(self.tasks)

    def by_kind(self, kind: AnswerKind) -> List[TaskSpec]:
        return [task for task in self.tasks.values() if task.answer_format.kind is kind]


def map_to_answer_kind(value: str) -> AnswerKind:
    try:
        return AnswerKind[value.upper().replace(" ", "_")]
    except KeyError:
        raise ValueError(f"Invalid answer format '{value}'. Valid values are: {[k.value for k in AnswerKind]}")


def task_from_mapping(data: Mapping) -> TaskSpec:
    """Build a custom task from a config entry with ``id``, ``description``, ``answer_format`` and optional ``k``."""
    kind = map_to_answer_kind(str(data["answer_format"]))
    description = str(data["description"])
    return TaskSpec(
        id=str(data["id"]),
        description=description,
        answer_format=AnswerFormat(kind, int(data.get("k", 5))),
        directional="{direction}" in description,
    )


def create_task_library(custom_tasks: Optional[Iterable[Mapping]] = None) -> TaskLibrary:
    library = TaskLibrary()

    tasks = [
        TaskSpec(
            id="herg",
            description="whether the molecule blocks the human ether-a-go-go related gene (hERG) potassium channel",
            answer_format=AnswerFormat(AnswerKind.YES_NO),
        ),
        TaskSpec(
            id="dili",
            description="whether the molecule is likely to cause drug-induced liver injury (DILI)",
            answer_format=AnswerFormat(AnswerKind.YES_NO),
        ),
        TaskSpec(
            id="skin",
            description="whether the molecule induces a skin reaction (skin sensitization)",
            answer_format=AnswerFormat(AnswerKind.YES_NO),
        ),
        TaskSpec(
            id="carcinogens",
            description="whether the molecule has carcinogenic properties",
            answer_format=AnswerFormat(AnswerKind.YES_NO),
        ),
        TaskSpec(
            id="bbbp",
            description="the ability of the molecule to penetrate the blood-brain barrier",
            answer_format=AnswerFormat(AnswerKind.CAPTION),
        ),
        TaskSpec(
            id="sider",
            description="the side effects of the molecule, grouped by the organ systems they affect",
            answer_format=AnswerFormat(AnswerKind.CAPTION),
        ),
        TaskSpec(
            id="clintox",
            description="the toxicity of the molecule in clinical trials and its likelihood of FDA approval",
            answer_format=AnswerFormat(AnswerKind.CAPTION),
        ),
        TaskSpec(
            id="bace",
            description="the binding of the molecule to human beta-secretase 1 (BACE-1) as an inhibitor",
            answer_format=AnswerFormat(AnswerKind.CAPTION),
        ),
        TaskSpec(
            id="targets",
            description="the top 5 proteins that the molecule is most likely to {direction}",
            answer_format=AnswerFormat(AnswerKind.TARGET_LIST, k=5),
            directional=True,
        ),
    ]

    for task in tasks:
        library.add_task(task)
    for data in custom_tasks or ():
        library.add_task(task_from_mapping(data))

    return library
