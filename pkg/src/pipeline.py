import hashlib
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple

from pydantic import BaseModel

from agents import (
    ERROR_ANSWER,
    NO_DESCRIPTION,
    NO_RELATED_DRUGS,
    NO_REPORT,
    PLANNER_REMINDER,
    SIMILARITY_UNAVAILABLE,
    Ablation,
    AgentId,
    AgentReport,
    ParseError,
    PlannerDecision,
    PromptTemplate,
    answer_instruction,
    clip_to_budget,
    format_paths,
    format_reminder,
    load_templates,
    parse_answer,
    parse_yes_no,
    render_prompt,
    select_paths,
)
from annostore import AnnotationStore
from backends import ChatBackend, ChatRequest
from captioning import CaptioningError, CaptioningTool
from chem import Molecule, tanimoto
from config import PipelineSettings
from embed import AnchorResult, AnchorWithoutSmiles, EmbeddingProvider, NoEmbeddedDrugs
from kgstore import KnowledgeGraph, TwoHopPath, top_k_related
from tasks import TaskSpec

logger = logging.getLogger(__name__)


class RelatedDrug(NamedTuple):
    drug: str
    count: int
    tanimoto: Optional[float]


class AgentCall(NamedTuple):
    agent: AgentId
    prompt: str
    response: str
    elapsed: float


class PlanningResult(NamedTuple):
    o_map: PlannerDecision
    o_kgp: PlannerDecision
    anchor: Optional[AnchorResult]
    caption: Optional[str]


class KgContext(NamedTuple):
    related: List[RelatedDrug]
    paths_used: List[TwoHopPath]
    related_drugs: str
    related_tanimoto: str
    two_hop_paths: str


class KgTeamResult(NamedTuple):
    o_dra: AgentReport
    o_bra: AgentReport
    related: List[RelatedDrug]
    paths_used: List[TwoHopPath]


@dataclass
class PipelineDeps:
    """Shared, read-only inputs of a pipeline run."""

    kg: KnowledgeGraph
    store: AnnotationStore
    embeddings: EmbeddingProvider
    backend: ChatBackend
    captioner: Optional[CaptioningTool] = None
    settings: PipelineSettings = field(default_factory=PipelineSettings)
    templates: Dict[AgentId, PromptTemplate] = field(default_factory=load_templates)
    aliases: Optional[Mapping[str, str]] = None


class DecisionRecord(BaseModel):
    value: bool
    reason: str
    forced: bool


class AnchorRecord(BaseModel):
    drug: str
    name: str
    cosine: float
    tanimoto: float


class RelatedRecord(BaseModel):
    drug: str
    name: str
    count: int
    tanimoto: Optional[float]


class ReportRecord(BaseModel):
    text: str
    elapsed: Optional[float] = None


class CallRecord(BaseModel):
    agent: str
    prompt: str
    response: str
    elapsed: Optional[float] = None


class TraceRecord(BaseModel):
    """One line of the trace log."""

    trace_id: str
    smiles: str
    key: str
    query_fingerprint: List[int]
    fingerprint_radius: int
    fingerprint_width: int
    task: str
    backend: str
    ablation: str
    o_map: Optional[DecisionRecord] = None
    o_kgp: Optional[DecisionRecord] = None
    anchor: Optional[AnchorRecord] = None
    related: List[RelatedRecord] = []
    paths_used: List[Tuple[str, str, str, str, str]] = []
    caption: Optional[str] = None
    tool_invoked: bool = False
    reports: Dict[str, ReportRecord] = {}
    answer: str = ""
    error: Optional[str] = None
    warnings: List[str] = []
    calls: List[CallRecord] = []


def trace_id_for(key: str, task_id: str, backend_tag: str, ablation: Ablation) -> str:
    raw = "\x1f".join([key, task_id, backend_tag, ablation.value]).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class PipelineTrace:
    """Ordered record of every prompt, response and decision of one query."""

    trace_id: str
    query: Molecule
    task: TaskSpec
    backend: str
    ablation: Ablation
    o_map: Optional[PlannerDecision] = None
    o_kgp: Optional[PlannerDecision] = None
    anchor: Optional[AnchorResult] = None
    related: List[RelatedDrug] = field(default_factory=list)
    paths_used: List[TwoHopPath] = field(default_factory=list)
    caption: Optional[str] = None
    tool_invoked: bool = False
    reports: Dict[AgentId, AgentReport] = field(default_factory=dict)
    answer: str = ""
    error: Optional[str] = None
    warnings: List[str] = field(default_factory=list)
    calls: List[AgentCall] = field(default_factory=list)

    def agent_sequence(self) -> List[AgentId]:
        return [call.agent for call in self.calls]

    def warn(self, message: str):
        logger.warning(f"[{self.trace_id}] {message}")
        self.warnings.append(message)

    def to_record(self, kg: KnowledgeGraph, include_timing: bool = True) -> TraceRecord:
        """Serializable form; without timing the record is identical across repeated runs."""

        def timing(value: float) -> Optional[float]:
            return round(value, 6) if include_timing else None

        def decision(value: Optional[PlannerDecision]) -> Optional[DecisionRecord]:
            return DecisionRecord(value=value.value, reason=value.reason, forced=value.forced) if value else None

        return TraceRecord(
            trace_id=self.trace_id,
            smiles=self.query.graph.source_smiles,
            key=self.query.key.key,
            query_fingerprint=self.query.fingerprint.on_bits(),
            fingerprint_radius=self.query.fingerprint.radius,
            fingerprint_width=self.query.fingerprint.width,
            task=self.task.id,
            backend=self.backend,
            ablation=self.ablation.value,
            o_map=decision(self.o_map),
            o_kgp=decision(self.o_kgp),
            anchor=(
                AnchorRecord(
                    drug=self.anchor.drug,
                    name=kg.name_of(self.anchor.drug),
                    cosine=self.anchor.cosine,
                    tanimoto=self.anchor.tanimoto,
                )
                if self.anchor
                else None
            ),
            related=[
                RelatedRecord(drug=r.drug, name=kg.name_of(r.drug), count=r.count, tanimoto=r.tanimoto)
                for r in self.related
            ],
            paths_used=[tuple(path) for path in self.paths_used],
            caption=self.caption,
            tool_invoked=self.tool_invoked,
            reports={
                agent.value: ReportRecord(text=report.text, elapsed=timing(report.elapsed))
                for agent, report in self.reports.items()
            },
            answer=self.answer,
            error=self.error,
            warnings=list(self.warnings),
            calls=[
                CallRecord(agent=c.agent.value, prompt=c.prompt, response=c.response, elapsed=timing(c.elapsed))
                for c in self.calls
            ],
        )


class TraceLog:
    """Append-only JSON-lines log, one record per query."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: TraceRecord) -> None:
        line = record.model_dump_json() + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as outfile:
                outfile.write(line)

    def records(self) -> List[TraceRecord]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8") as infile:
            return [TraceRecord.model_validate_json(line) for line in infile if line.strip()]

    def find(self, trace_id: str) -> Optional[TraceRecord]:
        """Latest record with the given id, also accepting a unique id prefix."""
        matches = [r for r in self.records() if r.trace_id == trace_id or r.trace_id.startswith(trace_id)]
        return matches[-1] if matches else None


class AgentPipeline:
    """Planning team, conditional KG team, MU team and Prediction agent over shared dependencies.

    Every method records the calls it makes on the trace it is given; dependencies are never mutated.
    """

    def __init__(self, deps: PipelineDeps):
        self.deps = deps
        self.settings = deps.settings

    # Agent calls

    def _call_agent(self, agent: AgentId, context: Mapping, trace: PipelineTrace, reminder: str = "") -> AgentCall:
        prompt = render_prompt(self.deps.templates[agent], context) + reminder
        request = ChatRequest(
            user=prompt, temperature=self.settings.temperature_for(agent), max_tokens=self.settings.max_tokens
        )
        start = time.perf_counter()
        response = self.deps.backend.complete(request)
        call = AgentCall(agent, prompt, response, time.perf_counter() - start)
        trace.calls.append(call)
        return call

    def _decide(self, agent: AgentId, context: Mapping, trace: PipelineTrace, fallback: bool) -> PlannerDecision:
        """Planner decision with one format-reminder retry, then the conservative fallback."""
        call = self._call_agent(agent, context, trace)
        try:
            return parse_yes_no(call.response)
        except ParseError as e:
            trace.warn(f"{agent.value} response unparseable, retrying: {e}")
        call = self._call_agent(agent, context, trace, reminder=PLANNER_REMINDER)
        try:
            return parse_yes_no(call.response)
        except ParseError:
            verdict = "YES" if fallback else "NO"
            trace.warn(f"{agent.value} response unparseable after retry, defaulting to {verdict}")
            return PlannerDecision.forced_by(fallback, f"planner response unparseable after retry; default {verdict}")

    def _report(self, agent: AgentId, context: Mapping, trace: PipelineTrace) -> AgentReport:
        if self._ablated(agent):
            logger.debug(f"[{trace.trace_id}] {agent.value} skipped ({self.settings.ablation.value} ablation)")
            return AgentReport(agent, NO_REPORT, 0.0)
        call = self._call_agent(agent, context, trace)
        text = clip_to_budget(call.response, self.settings.report_token_budget)
        if not text:
            trace.warn(f"{agent.value} returned an empty report")
            text = NO_REPORT
        report = AgentReport(agent, text, call.elapsed)
        trace.reports[agent] = report
        return report

    def _ablated(self, agent: AgentId) -> bool:
        ablation = self.settings.ablation
        return (agent, ablation) in {
            (AgentId.DRUGREL, Ablation.NO_DRUGREL),
            (AgentId.BIOREL, Ablation.NO_BIOREL),
        }

    # Teams

    def _find_anchor(self, query: Molecule, trace: PipelineTrace) -> Optional[AnchorResult]:
        try:
            return self.deps.embeddings.find_anchor(self.deps.kg, query)
        except (NoEmbeddedDrugs, AnchorWithoutSmiles) as e:
            trace.warn(f"No anchor drug: {e}")
            return None

    def _kg_planner_context(self, query: Molecule, anchor: AnchorResult) -> Dict[str, object]:
        entity = self.deps.kg.entity(anchor.drug)
        return {
            "TARGET_SMILES": query.graph.source_smiles,
            "ANCHOR_SMILES": entity.smiles,
            "ANCHOR_NAME": entity.name,
            "TANIMOTO": anchor.tanimoto,
        }

    def run_planning(self, query: Molecule, trace: PipelineTrace) -> PlanningResult:
        """MolAnn planner over the stored caption, anchor retrieval, then the KG planner.

        Without a caption o_map is forced TRUE; without an anchor o_kgp is forced FALSE. Ablations force the
        disabled side as well. With only_generated_caption the stored caption is never looked up.
        """
        ablation = self.settings.ablation
        caption = None
        if ablation is not Ablation.ONLY_GENERATED_CAPTION:
            caption = self.deps.store.lookup_caption(query.key)

        if ablation is Ablation.NO_PLANNING:
            o_map = PlannerDecision.forced_by(True, "planning disabled (no_planning ablation)")
        elif ablation is Ablation.ONLY_KG:
            o_map = PlannerDecision.forced_by(False, "molecule understanding disabled (only_kg ablation)")
        elif ablation is Ablation.ONLY_EXPERT_ANNOTATION:
            o_map = PlannerDecision.forced_by(False, "captioning tool disabled (only_expert_annotation ablation)")
        elif ablation is Ablation.ONLY_GENERATED_CAPTION:
            o_map = PlannerDecision.forced_by(True, "database annotation disabled (only_generated_caption ablation)")
        elif caption is None:
            o_map = PlannerDecision.forced_by(True, "no annotation in the database; captioning tool required")
        else:
            o_map = self._decide(AgentId.MOLANN_PLANNER, {"DESCRIPTION": caption}, trace, fallback=True)

        anchor = None
        if ablation is Ablation.ONLY_MU:
            o_kgp = PlannerDecision.forced_by(False, "knowledge graph disabled (only_mu ablation)")
        else:
            anchor = self._find_anchor(query, trace)
            if anchor is None:
                o_kgp = PlannerDecision.forced_by(False, "no embedded knowledge-graph drug available as anchor")
            elif ablation is Ablation.NO_PLANNING:
                o_kgp = PlannerDecision.forced_by(True, "planning disabled (no_planning ablation)")
            else:
                o_kgp = self._decide(
                    AgentId.KG_PLANNER, self._kg_planner_context(query, anchor), trace, fallback=False
                )

        trace.o_map, trace.o_kgp, trace.anchor = o_map, o_kgp, anchor
        return PlanningResult(o_map, o_kgp, anchor, caption)

    def gather_kg_context(self, query: Molecule, anchor: AnchorResult) -> KgContext:
        """Related drugs of the anchor, their Tanimoto to the query and the capped path listing."""
        kg = self.deps.kg
        paths = kg.two_hop_paths(anchor.drug)
        ranking = top_k_related(paths, self.settings.k_related)
        if not ranking:
            return KgContext([], [], NO_RELATED_DRUGS, NO_RELATED_DRUGS, NO_RELATED_DRUGS)

        related = []
        for drug, count in ranking:
            molecule = kg.drug_molecule(drug, query.fingerprint.radius, query.fingerprint.width)
            similarity = tanimoto(query.fingerprint, molecule.fingerprint) if molecule is not None else None
            related.append(RelatedDrug(drug, count, similarity))

        related_ids = [r.drug for r in related]
        kept = set(related_ids)
        paths_used = select_paths([p for p in paths if p.drug in kept], self.settings.path_cap, related_ids)
        names = {i: kg.name_of(i) for p in paths_used for i in (p.anchor, p.mid, p.drug)}
        similarities = ", ".join(
            f"{kg.name_of(r.drug)}: {r.tanimoto:.4f}"
            if r.tanimoto is not None
            else f"{kg.name_of(r.drug)}: {SIMILARITY_UNAVAILABLE}"
            for r in related
        )
        return KgContext(
            related=related,
            paths_used=paths_used,
            related_drugs=", ".join(kg.name_of(d) for d in related_ids),
            related_tanimoto=similarities,
            two_hop_paths=format_paths(paths_used, self.settings.path_cap, names, related_ids),
        )

    def run_kg_team(
        self, query: Molecule, anchor: AnchorResult, task: TaskSpec, trace: PipelineTrace
    ) -> KgTeamResult:
        context = self.gather_kg_context(query, anchor)
        trace.related, trace.paths_used = context.related, context.paths_used
        planner_context = self._kg_planner_context(query, anchor)

        o_dra = self._report(
            AgentId.DRUGREL,
            {
                **planner_context,
                "TASK_DESCRIPTION": f"predict {task.description}",
                "RELATED_DRUGS": context.related_drugs,
                "RELATED_TANIMOTO": context.related_tanimoto,
            },
            trace,
        )
        o_bra = self._report(
            AgentId.BIOREL,
            {
                "TASK_DESCRIPTION": task.description,
                "TANIMOTO": anchor.tanimoto,
                "TARGET_SMILES": query.graph.source_smiles,
                "TWO_HOP_PATHS": context.two_hop_paths,
            },
            trace,
        )
        return KgTeamResult(o_dra, o_bra, context.related, context.paths_used)

    def gather_caption(
        self, query: Molecule, caption: Optional[str], o_map: PlannerDecision, trace: PipelineTrace
    ) -> Optional[str]:
        """Database caption, extended by the captioning tool's output when o_map is true."""
        if not o_map.value:
            return caption
        if self.deps.captioner is None:
            trace.warn("o_map is true but no captioning tool is configured")
            return caption
        trace.tool_invoked = True
        try:
            tool_caption = self.deps.captioner.caption(query)
        except CaptioningError as e:
            trace.warn(f"Captioning tool failed, using database caption only: {e}")
            return caption
        return f"{caption} {tool_caption}" if caption else tool_caption

    def run_mu_team(
        self,
        query: Molecule,
        caption: Optional[str],
        o_map: PlannerDecision,
        kg_reports: Optional[KgTeamResult],
        task: TaskSpec,
        trace: PipelineTrace,
    ) -> AgentReport:
        final_caption = self.gather_caption(query, caption, o_map, trace)
        trace.caption = final_caption
        return self._report(
            AgentId.MU,
            {
                "TASK_DESCRIPTION": task.description,
                "TARGET_SMILES": query.graph.source_smiles,
                "CAPTION": final_caption or NO_DESCRIPTION,
                "DRUGREL_REPORT": kg_reports.o_dra.text if kg_reports else NO_REPORT,
                "BIOREL_REPORT": kg_reports.o_bra.text if kg_reports else NO_REPORT,
            },
            trace,
        )

    def run_prediction(
        self, query: Molecule, task: TaskSpec, slots: Mapping[AgentId, str], trace: PipelineTrace
    ) -> str:
        """Prediction agent over the three report slots; the answer is parsed per the task's format."""
        fmt = task.answer_format
        context = {
            "TASK_DESCRIPTION": task.description,
            "TARGET_SMILES": query.graph.source_smiles,
            "MU_REPORT": slots.get(AgentId.MU, NO_REPORT),
            "DRUGREL_REPORT": slots.get(AgentId.DRUGREL, NO_REPORT),
            "BIOREL_REPORT": slots.get(AgentId.BIOREL, NO_REPORT),
            "ANSWER_FORMAT": answer_instruction(task.description, fmt),
        }
        budget = self.settings.report_token_budget
        for reminder in ("", format_reminder(fmt)):
            call = self._call_agent(AgentId.PREDICTION, context, trace, reminder=reminder)
            trace.reports[AgentId.PREDICTION] = AgentReport(AgentId.PREDICTION, call.response.strip(), call.elapsed)
            try:
                trace.answer = parse_answer(call.response, fmt, self.deps.aliases, budget)
                return trace.answer
            except ParseError as e:
                trace.warn(f"prediction response unparseable: {e}")
        trace.error = "prediction response unparseable after retry"
        trace.answer = ERROR_ANSWER
        return trace.answer

    def new_trace(self, query: Molecule, task: TaskSpec) -> PipelineTrace:
        ablation = self.settings.ablation
        trace_id = trace_id_for(query.key.key, task.id, self.deps.backend.tag, ablation)
        return PipelineTrace(trace_id, query, task, self.deps.backend.tag, ablation)

    def run_query(self, smiles: str, task: TaskSpec) -> PipelineTrace:
        """Planning, conditional KG team, MU team and prediction for one molecule.

        This method performs the following operations:
        1. Parse the query and run the planning team.
        2. Run the KG team when o_kgp is true.
        3. Run the MU team, unless the MU side is ablated. With no_mu the gathered caption fills the MU slot.
        4. Ask the Prediction agent and parse its answer.
        With the only_planning ablation, steps 2 and 3 hand the retrieved raw context to the Prediction agent
        instead of calling the report agents.
        """
        if task.directional:
            raise ValueError(f"Task {task.id} is directional; query one of its directions instead")
        query = Molecule.from_smiles(smiles, self.settings.fingerprint_radius, self.settings.fingerprint_width)
        trace = self.new_trace(query, task)
        ablation = self.settings.ablation

        planning = self.run_planning(query, trace)
        slots: Dict[AgentId, str] = {}

        if ablation is Ablation.ONLY_PLANNING:
            if planning.o_kgp.value:
                context = self.gather_kg_context(query, planning.anchor)
                trace.related, trace.paths_used = context.related, context.paths_used
                slots[AgentId.DRUGREL] = f"Related drugs: {context.related_drugs}\nTanimoto: {context.related_tanimoto}"
                slots[AgentId.BIOREL] = context.two_hop_paths
            trace.caption = self.gather_caption(query, planning.caption, planning.o_map, trace)
            slots[AgentId.MU] = trace.caption or NO_DESCRIPTION
        else:
            kg_reports = None
            if planning.o_kgp.value:
                kg_reports = self.run_kg_team(query, planning.anchor, task, trace)
                slots[AgentId.DRUGREL] = kg_reports.o_dra.text
                slots[AgentId.BIOREL] = kg_reports.o_bra.text
            if ablation is Ablation.NO_MU:
                trace.caption = self.gather_caption(query, planning.caption, planning.o_map, trace)
                slots[AgentId.MU] = trace.caption or NO_DESCRIPTION
            elif ablation is not Ablation.ONLY_KG:
                o_mua = self.run_mu_team(query, planning.caption, planning.o_map, kg_reports, task, trace)
                slots[AgentId.MU] = o_mua.text

        self.run_prediction(query, task, slots, trace)
        logger.info(f"[{trace.trace_id}] {task.id} {query.smiles}: {trace.answer} ({len(trace.calls)} calls)")
        return trace


def run_query(deps: PipelineDeps, smiles: str, task: TaskSpec) -> PipelineTrace:
    return AgentPipeline(deps).run_query(smiles, task)
