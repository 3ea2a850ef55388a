import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
import pytest

from annostore import AnnotationStore, escape_field, ingest_annotations
from backends import MockBackend, MockRule, MockScript
from captioning import StaticCaptioningTool
from config import PipelineSettings
from embed import FingerprintEmbedding
from kgstore import TRIPLET_COLUMNS, KnowledgeGraph, ingest_triplets
from pipeline import PipelineDeps

ASPIRIN = "CC(=O)Oc1ccccc1C(=O)O"
IBUPROFEN = "CC(C)Cc1ccc(cc1)C(C)C(=O)O"
ACETAMINOPHEN = "CC(=O)Nc1ccc(O)cc1"
CAFFEINE = "Cn1cnc2c1c(=O)n(C)c(=O)n2C"

DRUGS = {
    "DB00945": ("Aspirin", ASPIRIN),
    "DB01050": ("Ibuprofen", IBUPROFEN),
    "DB00316": ("Acetaminophen", ACETAMINOPHEN),
    "DB00788": ("Naproxen", "COc1ccc2cc(ccc2c1)C(C)C(=O)O"),
    "DB00201": ("Caffeine", CAFFEINE),
    "DB00331": ("Metformin", "CN(C)C(=N)NC(=N)N"),
    "DB00682": ("Warfarin", "CC(=O)CC(c1ccccc1)c1c(O)c2ccccc2oc1=O"),
    "DB00564": ("Carbamazepine", "NC(=O)N1c2ccccc2C=Cc2ccccc21"),
    "DB09999": ("Biologic X", ""),
}
GENES = [
    "PTGS1",
    "PTGS2",
    "ALB",
    "CYP1A2",
    "CYP2C9",
    "CYP3A4",
    "ADORA1",
    "ADORA2A",
    "PRKAA1",
    "SLC22A1",
    "VKORC1",
    "SCN1A",
    "EGFR",
    "DRD2",
]
DISEASES = ["pain", "fever", "thrombosis", "epilepsy", "type 2 diabetes mellitus", "hypertension"]
PHENOTYPES = ["nausea", "gastrointestinal bleeding", "rash", "insomnia"]
PATHWAYS = ["arachidonic acid metabolism", "caffeine metabolism", "AMPK signaling"]

DRUG_TARGETS = {
    "DB00945": ["PTGS1", "PTGS2", "ALB"],
    "DB01050": ["PTGS1", "PTGS2", "CYP2C9"],
    "DB00788": ["PTGS1", "PTGS2", "CYP2C9"],
    "DB00316": ["PTGS2", "CYP1A2"],
    "DB09999": ["PTGS1", "PTGS2"],
    "DB00201": ["ADORA1", "ADORA2A", "CYP1A2"],
    "DB00331": ["PRKAA1", "SLC22A1"],
    "DB00682": ["VKORC1", "CYP2C9", "ALB"],
    "DB00564": ["SCN1A", "CYP3A4"],
}
INDICATIONS = {
    "DB00945": ["pain", "fever", "thrombosis"],
    "DB01050": ["pain"],
    "DB00316": ["pain", "fever"],
    "DB00788": ["pain"],
    "DB00682": ["thrombosis"],
    "DB00564": ["epilepsy"],
    "DB00331": ["type 2 diabetes mellitus"],
}
SIDE_EFFECTS = {
    "DB00945": ["nausea", "gastrointestinal bleeding"],
    "DB01050": ["nausea"],
    "DB00788": ["gastrointestinal bleeding"],
    "DB00682": ["gastrointestinal bleeding"],
    "DB00564": ["rash"],
    "DB00331": ["nausea"],
    "DB00201": ["insomnia"],
}

DRUGREL_REPORT = "The target molecule closely resembles the anchor drug."
BIOREL_REPORT = "The related drugs share cyclooxygenase targets."
MU_REPORT = "The molecule is a small aromatic acid."
CAPTIONS = {"CCO": "Contains a hydroxyl group.", ASPIRIN: "An acetylated salicylate."}


def _slug(text: str) -> str:
    return text.replace(" ", "_")


def _row(head, head_kind, relation, tail, tail_kind) -> Dict[str, str]:
    def describe(entity_id, kind):
        if kind == "drug":
            name, smiles = DRUGS[entity_id]
            return entity_id, name, smiles
        return f"{kind.split('/')[0].upper()}:{_slug(entity_id)}", entity_id, ""

    head_id, head_name, head_smiles = describe(head, head_kind)
    tail_id, tail_name, tail_smiles = describe(tail, tail_kind)
    return {
        "head_id": head_id,
        "head_kind": head_kind,
        "head_name": head_name,
        "relation": relation,
        "tail_id": tail_id,
        "tail_kind": tail_kind,
        "tail_name": tail_name,
        "head_smiles": head_smiles,
        "tail_smiles": tail_smiles,
    }


def mini_triplet_rows() -> List[Dict[str, str]]:
    rows = []
    for drug, genes in DRUG_TARGETS.items():
        rows += [_row(drug, "drug", "target", gene, "gene/protein") for gene in genes]
    for drug, diseases in INDICATIONS.items():
        rows += [_row(drug, "drug", "indication", disease, "disease") for disease in diseases]
    for drug, phenotypes in SIDE_EFFECTS.items():
        rows += [_row(drug, "drug", "side effect", phenotype, "effect/phenotype") for phenotype in phenotypes]
    for step in (1, 2):
        for i in range(len(GENES) - step):
            rows.append(_row(GENES[i], "gene/protein", "ppi", GENES[i + step], "gene/protein"))
    for i, gene in enumerate(GENES):
        rows.append(_row(gene, "gene/protein", "disease_protein", DISEASES[i % len(DISEASES)], "disease"))
        rows.append(
            _row(gene, "gene/protein", "phenotype_protein", PHENOTYPES[i % len(PHENOTYPES)], "effect/phenotype")
        )
        rows.append(_row(gene, "gene/protein", "pathway_protein", PATHWAYS[i % len(PATHWAYS)], "pathway"))
    return rows


ANNOTATED_SMILES = [
    "C", "CC", "CCC", "CCCC", "CCCCC", "CCCCCC", "CO", "CCCO", "CCCCO", "C=O",
    "CC=O", "CCC=O", "CC(=O)O", "CCC(=O)O", "CCCC(=O)O", "CN", "CCN", "CCCN", "CC(C)O", "CC(C)C",
    "CC(C)(C)C", "C1CCCCC1", "C1CCCC1", "C1CCC1", "c1ccccc1", "Cc1ccccc1", "Oc1ccccc1", "Nc1ccccc1", "Clc1ccccc1",
    "Brc1ccccc1", "Fc1ccccc1", "c1ccncc1", "c1ccoc1", "c1ccsc1", "c1cc[nH]c1", "CC#N", "C#C", "CC#C", "C=C",
    "CC=C", "CCOC(=O)C", "COC", "CCOCC", "CS", "CCS", "CSC", "ClCCl", "ClC(Cl)Cl", "OCCO", ASPIRIN,
]  # fmt: skip


def mini_annotation_rows() -> List[Dict[str, str]]:
    rows = [
        {"smiles": smiles, "caption": f"Annotated molecule number {i}.", "source": "pubchem"}
        for i, smiles in enumerate(ANNOTATED_SMILES)
    ]
    rows.append({"smiles": "CCO", "caption": "A solvent.", "source": "pubchem"})
    rows.append({"smiles": "OCC", "caption": "A fuel.", "source": "chebi"})
    rows.append({"smiles": "C1CC", "caption": "Broken ring.", "source": "pubchem"})
    return rows


def write_tsv(path: Path, rows: Sequence[Dict[str, str]], columns: Optional[List[str]] = None) -> Path:
    pd.DataFrame(list(rows), columns=columns).to_csv(path, sep="\t", index=False)
    return path


def script_lines(script: MockScript) -> List[str]:
    lines = [f"{escape_field(rule.matcher)}\t{escape_field(rule.response)}" for rule in script.rules]
    if script.default is not None:
        lines.append(f"*\t{escape_field(script.default)}")
    return lines


def write_script(path: Path, script: MockScript) -> Path:
    path.write_text("\n".join(script_lines(script)) + "\n", encoding="utf-8")
    return path


def yes_no(value: bool, reason: str = "scripted") -> str:
    return f"Answer = {'YES' if value else 'NO'}\nREASON = {reason}"


def make_script(
    molann: bool = True,
    kg: bool = True,
    prediction: str = yes_no(True),
    extra: Sequence[MockRule] = (),
) -> MockScript:
    """Scripted agent team; ``extra`` rules are matched before the generic ones."""
    rules = list(extra) + [
        MockRule("Based on the reports,", prediction),
        MockRule("provided description is enough", yes_no(molann)),
        MockRule("decide whether to utilize the knowledge graph", yes_no(kg)),
        MockRule("structural similarity to anchor drugs", DRUGREL_REPORT),
        MockRule("two-hop relationships", BIOREL_REPORT),
        MockRule("by using the SMILES representation", MU_REPORT),
    ]
    return MockScript(tuple(rules))


def make_deps(
    kg: KnowledgeGraph,
    store: AnnotationStore,
    script: MockScript,
    captions: Optional[Dict[str, str]] = None,
    **settings,
) -> PipelineDeps:
    return PipelineDeps(
        kg=kg,
        store=store,
        embeddings=FingerprintEmbedding(kg),
        backend=MockBackend(script),
        captioner=StaticCaptioningTool(CAPTIONS if captions is None else captions),
        settings=PipelineSettings(**settings),
    )


@pytest.fixture
def mini_rows() -> List[Dict[str, str]]:
    return mini_triplet_rows()


@pytest.fixture
def mini_kg(mini_rows) -> KnowledgeGraph:
    kg, _ = ingest_triplets(mini_rows)
    return kg


@pytest.fixture
def mini_store() -> AnnotationStore:
    return ingest_annotations(mini_annotation_rows())


@pytest.fixture
def triplet_file(tmp_path, mini_rows) -> Path:
    return write_tsv(tmp_path / "triplets.tsv", mini_rows, TRIPLET_COLUMNS)


@pytest.fixture
def annotation_file(tmp_path) -> Path:
    return write_tsv(tmp_path / "annotations.tsv", mini_annotation_rows(), ["smiles", "caption", "source"])


def large_data_path(variable: str) -> Path:
    value = os.environ.get(variable)
    if not value or not Path(value).exists():
        pytest.skip(f"{variable} does not point to a dump")
    return Path(value)


def pytest_configure(config):
    config.addinivalue_line("markers", "large_data: needs the full PrimeKG / PubChem dumps")
