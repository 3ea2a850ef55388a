import re
from concurrent.futures import ThreadPoolExecutor

import pytest

from agents import ERROR_ANSWER, NO_REPORT, Ablation, AgentId
from annostore import ingest_annotations
from backends import MockRule
from captioning import CaptioningTool
from chem import Molecule, SmilesSyntaxError, tanimoto
from conftest import ASPIRIN, BIOREL_REPORT, DRUGREL_REPORT, MU_REPORT, make_deps, make_script
from kgstore import ingest_triplets
from pipeline import AgentPipeline, TraceLog, run_query, trace_id_for
from tasks import create_task_library

TASKS = create_task_library()
DILI = TASKS["dili"]

FULL_SEQUENCE = [
    AgentId.MOLANN_PLANNER,
    AgentId.KG_PLANNER,
    AgentId.DRUGREL,
    AgentId.BIOREL,
    AgentId.MU,
    AgentId.PREDICTION,
]


class SpyCaptioner(CaptioningTool):
    def __init__(self, text="Contains a hydroxyl group."):
        self.text = text
        self.calls = []

    def caption(self, molecule):
        self.calls.append(molecule.smiles)
        return self.text


def prompt_of(trace, agent):
    prompts = [call.prompt for call in trace.calls if call.agent is agent]
    assert len(prompts) == 1
    return prompts[0]


def drug_row(head, relation, tail, head_smiles="", tail_kind="gene/protein", head_name=None):
    return {
        "head_id": head,
        "head_kind": "drug",
        "head_name": head_name or head,
        "relation": relation,
        "tail_id": tail,
        "tail_kind": tail_kind,
        "tail_name": tail,
        "head_smiles": head_smiles,
        "tail_smiles": "",
    }


@pytest.fixture
def solvent_store():
    return ingest_annotations([{"smiles": "CCO", "caption": "A solvent."}])


def test_all_yes_runs_every_agent(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script()), "CCO", DILI)
    assert trace.agent_sequence() == FULL_SEQUENCE
    assert trace.o_map.value and not trace.o_map.forced
    assert trace.o_kgp.value and not trace.o_kgp.forced
    assert trace.answer == "YES"
    assert trace.error is None


def test_kg_planner_no_skips_the_kg_team(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(kg=False)), "CCO", DILI)
    assert trace.agent_sequence() == [AgentId.MOLANN_PLANNER, AgentId.KG_PLANNER, AgentId.MU, AgentId.PREDICTION]
    assert prompt_of(trace, AgentId.MU).count(NO_REPORT) == 2
    assert trace.related == []


def test_missing_caption_forces_the_tool(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script()), "CCCCCCCCO", DILI)
    assert trace.agent_sequence() == FULL_SEQUENCE[1:]
    assert trace.o_map.value and trace.o_map.forced
    assert trace.o_map.reason
    assert trace.tool_invoked
    assert trace.warnings
    assert "Description: No description available." in prompt_of(trace, AgentId.MU)


def test_tool_caption_is_appended_to_the_stored_one(mini_kg, solvent_store):
    trace = run_query(make_deps(mini_kg, solvent_store, make_script()), "CCO", DILI)
    assert "A solvent. Contains a hydroxyl group." in prompt_of(trace, AgentId.MU)
    assert trace.caption == "A solvent. Contains a hydroxyl group."


def test_tool_caption_stands_alone_without_a_stored_caption(mini_kg, solvent_store):
    deps = make_deps(mini_kg, solvent_store, make_script(), captions={"CCCN": "A primary amine."})
    trace = run_query(deps, "NCCC", DILI)
    assert "Description: A primary amine.\n" in prompt_of(trace, AgentId.MU)


def test_planner_no_keeps_the_tool_idle(mini_kg, solvent_store):
    deps = make_deps(mini_kg, solvent_store, make_script(molann=False))
    spy = SpyCaptioner()
    deps.captioner = spy
    trace = run_query(deps, "CCO", DILI)
    assert spy.calls == []
    assert not trace.tool_invoked
    assert "Description: A solvent.\n" in prompt_of(trace, AgentId.MU)


def test_graph_without_drug_smiles_forces_kg_off(mini_rows, mini_store):
    rows = [{**row, "head_smiles": "", "tail_smiles": ""} for row in mini_rows]
    kg, _ = ingest_triplets(rows)
    trace = run_query(make_deps(kg, mini_store, make_script()), "CCO", DILI)
    assert AgentId.KG_PLANNER not in trace.agent_sequence()
    assert not trace.o_kgp.value and trace.o_kgp.forced
    assert trace.anchor is None


def test_small_graph_paths(mini_store):
    rows = [
        drug_row("D1", "target", "P1", "CCO"),
        drug_row("D2", "target", "P1", "CCN"),
        drug_row("D1", "target", "P2", "CCO"),
        drug_row("D3", "carrier", "P2", "CCC"),
    ]
    kg, _ = ingest_triplets(rows)
    trace = run_query(make_deps(kg, mini_store, make_script()), "OCC", DILI)
    assert trace.anchor.drug == "D1"
    assert len(trace.paths_used) == 2
    assert trace.reports[AgentId.BIOREL].text == BIOREL_REPORT
    assert trace.reports[AgentId.DRUGREL].text == DRUGREL_REPORT
    biorel = prompt_of(trace, AgentId.BIOREL)
    assert "(D1, target, P1, target, D2)" in biorel
    assert "(D1, target, P2, carrier, D3)" in biorel


def test_anchor_without_paths_still_runs_both_agents(mini_store):
    kg, _ = ingest_triplets([drug_row("D1", "indication", "X1", "CCO", tail_kind="disease")])
    trace = run_query(make_deps(kg, mini_store, make_script()), "CCO", DILI)
    assert trace.agent_sequence() == FULL_SEQUENCE
    assert "No related drugs found in the knowledge graph." in prompt_of(trace, AgentId.DRUGREL)
    assert "No related drugs found in the knowledge graph." in prompt_of(trace, AgentId.BIOREL)


def test_path_listing_is_capped(mini_store):
    rows = [drug_row("A", "target", f"G{i:02d}", "CCO", head_name="anchor drug") for i in range(60)]
    rows += [drug_row("R", "target", f"G{i:02d}", "CCN") for i in range(60)]
    kg, _ = ingest_triplets(rows)
    trace = run_query(make_deps(kg, mini_store, make_script(), path_cap=50), "CCO", DILI)
    lines = [line for line in prompt_of(trace, AgentId.BIOREL).splitlines() if line.startswith("(anchor drug, ")]
    assert len(lines) == 50
    assert len(trace.paths_used) == 50


def test_related_drug_without_smiles(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script()), ASPIRIN, DILI)
    assert trace.anchor.drug == "DB00945"
    assert "Biologic X: similarity unavailable" in prompt_of(trace, AgentId.DRUGREL)
    assert {r.drug: r.tanimoto for r in trace.related}["DB09999"] is None


def test_printed_similarities_match_recomputed_values(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script()), "CC(=O)Oc1ccccc1", DILI)
    query = trace.query
    anchor = mini_kg.drug_molecule(trace.anchor.drug)
    assert f"is {tanimoto(query.fingerprint, anchor.fingerprint):.4f}" in prompt_of(trace, AgentId.KG_PLANNER)
    drugrel = prompt_of(trace, AgentId.DRUGREL)
    for related in trace.related:
        molecule = mini_kg.drug_molecule(related.drug)
        if molecule is not None:
            printed = f"{mini_kg.name_of(related.drug)}: {tanimoto(query.fingerprint, molecule.fingerprint):.4f}"
            assert printed in drugrel


def test_prediction_prompt_carries_the_reports(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script()), "CCO", DILI)
    prediction = prompt_of(trace, AgentId.PREDICTION)
    for agent in (AgentId.MU, AgentId.DRUGREL, AgentId.BIOREL):
        assert trace.reports[agent].text in prediction
    assert trace.reports[AgentId.MU].text == MU_REPORT
    assert "Answer = YES or NO" in prediction


def test_runs_are_deterministic(mini_kg, mini_store):
    deps = make_deps(mini_kg, mini_store, make_script())
    records = {
        run_query(deps, "CCO", DILI).to_record(mini_kg, include_timing=False).model_dump_json() for _ in range(3)
    }
    assert len(records) == 1


def test_concurrent_runs_match_serial_runs(mini_kg, mini_store):
    deps = make_deps(mini_kg, mini_store, make_script())
    smiles = ["CCO", ASPIRIN, "CCCCCCCCO", "c1ccccc1", "CN", "CC(=O)O"]

    def record(s):
        return run_query(deps, s, DILI).to_record(mini_kg, include_timing=False)

    serial = [record(s) for s in smiles]
    with ThreadPoolExecutor(max_workers=6) as pool:
        parallel = list(pool.map(record, smiles))
    assert parallel == serial


def test_trace_id(mini_kg, mini_store):
    deps = make_deps(mini_kg, mini_store, make_script())
    trace = run_query(deps, "OCC", DILI)
    assert trace.trace_id == trace_id_for(Molecule.from_smiles("CCO").key.key, "dili", deps.backend.tag, Ablation.FULL)
    assert re.fullmatch(r"[0-9a-f]{16}", trace.trace_id)


@pytest.mark.parametrize(
    "ablation, sequence",
    [
        (Ablation.NO_PLANNING, [AgentId.DRUGREL, AgentId.BIOREL, AgentId.MU, AgentId.PREDICTION]),
        (Ablation.ONLY_MU, [AgentId.MOLANN_PLANNER, AgentId.MU, AgentId.PREDICTION]),
        (Ablation.ONLY_KG, [AgentId.KG_PLANNER, AgentId.DRUGREL, AgentId.BIOREL, AgentId.PREDICTION]),
        (Ablation.ONLY_PLANNING, [AgentId.MOLANN_PLANNER, AgentId.KG_PLANNER, AgentId.PREDICTION]),
        (Ablation.ONLY_EXPERT_ANNOTATION, FULL_SEQUENCE[1:]),
        (Ablation.ONLY_GENERATED_CAPTION, FULL_SEQUENCE[1:]),
        (Ablation.NO_DRUGREL, [a for a in FULL_SEQUENCE if a is not AgentId.DRUGREL]),
        (Ablation.NO_BIOREL, [a for a in FULL_SEQUENCE if a is not AgentId.BIOREL]),
        (Ablation.NO_MU, [a for a in FULL_SEQUENCE if a is not AgentId.MU]),
    ],
)
def test_ablations(mini_kg, mini_store, ablation, sequence):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(), ablation=ablation), "CCO", DILI)
    assert trace.agent_sequence() == sequence
    assert trace.answer == "YES"


def test_no_planning_forces_both_teams(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(), ablation=Ablation.NO_PLANNING), "CCO", DILI)
    assert trace.o_map.forced and trace.o_map.value
    assert trace.o_kgp.forced and trace.o_kgp.value
    assert trace.tool_invoked


def test_only_kg_leaves_the_understanding_slot_empty(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(), ablation=Ablation.ONLY_KG), "CCO", DILI)
    assert "Molecule Understanding Agent:\nNo report available." in prompt_of(trace, AgentId.PREDICTION)


def test_only_expert_annotation_skips_the_tool(mini_kg, mini_store):
    captioner = SpyCaptioner()
    deps = make_deps(mini_kg, mini_store, make_script(), ablation=Ablation.ONLY_EXPERT_ANNOTATION)
    deps.captioner = captioner
    trace = run_query(deps, "CCO", DILI)
    mu = prompt_of(trace, AgentId.MU)
    assert "A solvent." in mu
    assert "Contains a hydroxyl group." not in mu
    assert trace.o_map.forced and not trace.o_map.value
    assert not trace.tool_invoked
    assert captioner.calls == []


def test_only_generated_caption_ignores_the_database(mini_kg, mini_store):
    deps = make_deps(mini_kg, mini_store, make_script(), ablation=Ablation.ONLY_GENERATED_CAPTION)
    trace = run_query(deps, "CCO", DILI)
    mu = prompt_of(trace, AgentId.MU)
    assert "Contains a hydroxyl group." in mu
    assert "A solvent." not in mu
    assert trace.o_map.forced and trace.o_map.value
    assert trace.tool_invoked


@pytest.mark.parametrize(
    "ablation, dropped, kept",
    [(Ablation.NO_DRUGREL, DRUGREL_REPORT, BIOREL_REPORT), (Ablation.NO_BIOREL, BIOREL_REPORT, DRUGREL_REPORT)],
)
def test_dropped_kg_agent_leaves_its_slot_empty(mini_kg, mini_store, ablation, dropped, kept):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(), ablation=ablation), "CCO", DILI)
    for agent in (AgentId.MU, AgentId.PREDICTION):
        prompt = prompt_of(trace, agent)
        assert dropped not in prompt
        assert kept in prompt
        assert NO_REPORT in prompt
    assert set(trace.reports) == {AgentId.DRUGREL, AgentId.BIOREL, AgentId.MU, AgentId.PREDICTION} - {
        AgentId.DRUGREL if ablation is Ablation.NO_DRUGREL else AgentId.BIOREL
    }


def test_no_mu_hands_the_caption_to_prediction(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(), ablation=Ablation.NO_MU), "CCO", DILI)
    prediction = prompt_of(trace, AgentId.PREDICTION)
    assert "A solvent." in prediction
    assert "Contains a hydroxyl group." in prediction
    assert MU_REPORT not in prediction
    assert DRUGREL_REPORT in prediction
    assert trace.tool_invoked


def test_only_planning_hands_raw_context_to_prediction(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(), ablation=Ablation.ONLY_PLANNING), ASPIRIN, DILI)
    prediction = prompt_of(trace, AgentId.PREDICTION)
    assert "Related drugs: Naproxen" in prediction
    assert "(Aspirin, " in prediction
    assert trace.caption in prediction


def test_unparseable_planner_falls_back(mini_kg, mini_store):
    script = make_script(
        extra=[
            MockRule("provided description is enough", "Probably fine."),
            MockRule("decide whether to utilize the knowledge graph", "Hard to say."),
        ]
    )
    trace = run_query(make_deps(mini_kg, mini_store, script), "CCO", DILI)
    assert trace.agent_sequence()[:4] == [AgentId.MOLANN_PLANNER] * 2 + [AgentId.KG_PLANNER] * 2
    assert trace.o_map.value and trace.o_map.forced
    assert not trace.o_kgp.value and trace.o_kgp.forced
    assert "REMINDER" in trace.calls[1].prompt
    assert len(trace.warnings) == 4


def test_unparseable_prediction_gives_error_answer(mini_kg, mini_store):
    trace = run_query(make_deps(mini_kg, mini_store, make_script(prediction="I cannot tell.")), "CCO", DILI)
    assert trace.agent_sequence()[-2:] == [AgentId.PREDICTION, AgentId.PREDICTION]
    assert trace.answer == ERROR_ANSWER
    assert trace.error


def test_target_list_task(mini_kg, mini_store):
    deps = make_deps(mini_kg, mini_store, make_script(prediction="1. ptgs1\n2. PTGS2\n3. ptgs1"))
    trace = run_query(deps, ASPIRIN, TASKS["targets_inhibit"])
    assert trace.answer == "PTGS1,PTGS2"
    assert "5. GENE SYMBOL" in prompt_of(trace, AgentId.PREDICTION)


def test_directional_task_needs_a_direction(mini_kg, mini_store):
    with pytest.raises(ValueError):
        run_query(make_deps(mini_kg, mini_store, make_script()), "CCO", TASKS["targets"])


def test_invalid_smiles(mini_kg, mini_store):
    pipeline = AgentPipeline(make_deps(mini_kg, mini_store, make_script()))
    with pytest.raises(SmilesSyntaxError):
        pipeline.run_query("C1CC", DILI)


def test_trace_log_round_trip(tmp_path, mini_kg, mini_store):
    log = TraceLog(tmp_path / "logs" / "traces.jsonl")
    assert log.records() == []
    trace = run_query(make_deps(mini_kg, mini_store, make_script()), "CCO", DILI)
    record = trace.to_record(mini_kg)
    log.append(record)
    log.append(run_query(make_deps(mini_kg, mini_store, make_script()), ASPIRIN, DILI).to_record(mini_kg))
    assert len(log.records()) == 2
    assert log.find(trace.trace_id) == record
    assert log.find(trace.trace_id[:8]).trace_id == trace.trace_id
    assert log.find("ffffffffffffffff") is None
    assert record.calls[0].agent == "molann_planner"
    assert record.o_map.value is True
    assert record.answer == "YES"
