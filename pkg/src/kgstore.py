import csv
import json
import logging
import threading
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from chem import DEFAULT_RADIUS, DEFAULT_WIDTH, CanonicalKey, Molecule, SmilesSyntaxError, canonical_key, parse_smiles

logger = logging.getLogger(__name__)

TRIPLET_COLUMNS = [
    "head_id",
    "head_kind",
    "head_name",
    "relation",
    "tail_id",
    "tail_kind",
    "tail_name",
    "head_smiles",
    "tail_smiles",
]
REQUIRED_COLUMNS = TRIPLET_COLUMNS[:7]
READ_CHUNK_SIZE = 200_000


class EntityKind(Enum):
    DRUG = "drug"
    GENE_PROTEIN = "gene/protein"
    DISEASE = "disease"
    EFFECT_PHENOTYPE = "effect/phenotype"
    PATHWAY = "pathway"
    ANATOMY = "anatomy"
    BIOLOGICAL_PROCESS = "biological_process"
    CELLULAR_COMPONENT = "cellular_component"
    EXPOSURE = "exposure"
    MOLECULAR_FUNCTION = "molecular_function"

    @classmethod
    def parse(cls, text: str) -> "EntityKind":
        """Accept PrimeKG spellings as well as spaced ones ("biological process")."""
        normalized = str(text).strip().lower().replace(" ", "_")
        for kind in cls:
            if kind.value == normalized:
                return kind
        raise ValueError(f"unknown entity kind {text!r}")


MID_KINDS = frozenset({EntityKind.GENE_PROTEIN, EntityKind.EFFECT_PHENOTYPE, EntityKind.DISEASE})


class UnknownEntity(KeyError):
    pass


class NotADrug(ValueError):
    pass


class EmptyGraphError(ValueError):
    pass


class Entity(NamedTuple):
    id: str
    kind: EntityKind
    name: str
    smiles: Optional[str] = None


class Triplet(NamedTuple):
    head: str
    relation: str
    tail: str


class TwoHopPath(NamedTuple):
    anchor: str
    rel1: str
    mid: str
    rel2: str
    drug: str


@dataclass
class IngestReport:
    triplet_count: int = 0
    entity_counts: Dict[str, int] = field(default_factory=dict)
    relation_counts: Dict[str, int] = field(default_factory=dict)
    rejected_lines: List[Tuple[int, str]] = field(default_factory=list)
    duplicates_collapsed: int = 0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["rejected_lines"] = [list(item) for item in self.rejected_lines]
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "IngestReport":
        return cls(
            triplet_count=int(data["triplet_count"]),
            entity_counts=dict(data["entity_counts"]),
            relation_counts=dict(data["relation_counts"]),
            rejected_lines=[(int(line), str(reason)) for line, reason in data.get("rejected_lines", [])],
            duplicates_collapsed=int(data.get("duplicates_collapsed", 0)),
        )


class KnowledgeGraph:
    """Read-only typed multigraph with an undirected adjacency index and a canonical-key drug index."""

    def __init__(
        self,
        entities: Mapping[str, Entity],
        triplets: Sequence[Triplet],
        drug_keys: Mapping[str, CanonicalKey],
    ):
        self.entities: Dict[str, Entity] = dict(entities)
        self.triplets: Tuple[Triplet, ...] = tuple(triplets)
        self._drug_keys: Dict[str, CanonicalKey] = dict(drug_keys)
        self._adjacency: Dict[str, List[Tuple[str, str]]] = defaultdict(list)
        self._key_index: Dict[str, str] = {}
        self._molecules: Dict[Tuple[str, int, int], Molecule] = {}
        self._lock = threading.Lock()
        self._update_indices()

    def _update_indices(self):
        for head, relation, tail in self.triplets:
            self._adjacency[head].append((relation, tail))
            if head != tail:
                self._adjacency[tail].append((relation, head))
        for drug_id in sorted(self._drug_keys):
            self._key_index.setdefault(self._drug_keys[drug_id].key, drug_id)

    def __len__(self) -> int:
        return len(self.triplets)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.entities

    def entity(self, entity_id: str) -> Entity:
        try:
            return self.entities[entity_id]
        except KeyError:
            raise UnknownEntity(entity_id) from None

    def name_of(self, entity_id: str) -> str:
        return self.entity(entity_id).name

    def neighbors(self, entity_id: str) -> List[Tuple[str, str]]:
        return list(self._adjacency.get(entity_id, ()))

    def drug_ids(self) -> List[str]:
        return sorted(e.id for e in self.entities.values() if e.kind is EntityKind.DRUG)

    def drug_key(self, drug_id: str) -> Optional[CanonicalKey]:
        return self._drug_keys.get(drug_id)

    def drug_by_key(self, key: CanonicalKey) -> Optional[Entity]:
        """Drug whose stored SMILES canonicalizes to ``key``; drugs without SMILES never match."""
        drug_id = self._key_index.get(key.key)
        return self.entities[drug_id] if drug_id is not None else None

    def drug_molecule(
        self, drug_id: str, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH
    ) -> Optional[Molecule]:
        """Parsed molecule for a drug with stored SMILES, built once per fingerprint setting."""
        entity = self.entity(drug_id)
        if entity.smiles is None:
            return None
        cache_key = (drug_id, radius, width)
        with self._lock:
            cached = self._molecules.get(cache_key)
        if cached is None:
            cached = Molecule.from_smiles(entity.smiles, radius, width)
            with self._lock:
                self._molecules.setdefault(cache_key, cached)
        return cached

    def two_hop_paths(self, anchor: str) -> List[TwoHopPath]:
        """All anchor -> mid -> drug chains through gene/protein, effect/phenotype or disease entities.

        Edges are walked regardless of their stored direction and keep their stored labels.
        """
        if self.entity(anchor).kind is not EntityKind.DRUG:
            raise NotADrug(f"{anchor} is a {self.entities[anchor].kind.value}, not a drug")

        paths = set()
        for rel1, mid in self.neighbors(anchor):
            if self.entities[mid].kind not in MID_KINDS:
                continue
            for rel2, drug in self.neighbors(mid):
                if drug == anchor or self.entities[drug].kind is not EntityKind.DRUG:
                    continue
                paths.add(TwoHopPath(anchor, rel1, mid, rel2, drug))
        return sorted(paths, key=lambda p: (p.drug, p.mid, p.rel1, p.rel2))

    def subsample(self, fraction: float, seed: int = 0) -> "KnowledgeGraph":
        """Seeded random share of the triplets; entities and drug keys shrink to what the kept triplets mention."""
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        if fraction == 1 or not self.triplets:
            return self
        n = max(1, round(fraction * len(self.triplets)))
        kept = np.sort(np.random.default_rng(seed).choice(len(self.triplets), size=n, replace=False))
        triplets = [self.triplets[i] for i in kept]
        ids = {t.head for t in triplets} | {t.tail for t in triplets}
        logger.info(f"Pruned knowledge graph to {n}/{len(self.triplets)} triplets, {len(ids)} entities (seed {seed})")
        return KnowledgeGraph(
            {i: e for i, e in self.entities.items() if i in ids},
            triplets,
            {i: k for i, k in self._drug_keys.items() if i in ids},
        )

    def to_rows(self) -> Iterator[Dict[str, str]]:
        """Re-emit the graph in the ingestion row format."""
        for head, relation, tail in self.triplets:
            h, t = self.entities[head], self.entities[tail]
            yield {
                "head_id": h.id,
                "head_kind": h.kind.value,
                "head_name": h.name,
                "relation": relation,
                "tail_id": t.id,
                "tail_kind": t.kind.value,
                "tail_name": t.name,
                "head_smiles": h.smiles or "",
                "tail_smiles": t.smiles or "",
            }


def top_k_related(paths: Iterable[TwoHopPath], k: int) -> List[Tuple[str, int]]:
    """Drugs ranked by number of paths to the anchor, ties by ascending id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = Counter(path.drug for path in paths)
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:k]


class _EntityBuilder:
    """Accumulates entities while rows stream in; the first declaration of an id fixes its kind."""

    def __init__(self):
        self.entities: Dict[str, Entity] = {}
        self.drug_keys: Dict[str, CanonicalKey] = {}
        self._parsed: Dict[str, CanonicalKey] = {}

    def check(self, entity_id: str, kind: EntityKind, smiles: str) -> Optional[str]:
        """Reason the declaration is unacceptable, or None."""
        known = self.entities.get(entity_id)
        if known is not None and known.kind is not kind:
            return f"conflicting entity kind for {entity_id}: {known.kind.value} vs {kind.value}"
        if smiles:
            if kind is not EntityKind.DRUG:
                return f"SMILES given for non-drug entity {entity_id}"
            if smiles not in self._parsed:
                try:
                    self._parsed[smiles] = canonical_key(parse_smiles(smiles))
                except SmilesSyntaxError as e:
                    return f"unparseable SMILES for {entity_id}: {e}"
        return None

    def add(self, entity_id: str, kind: EntityKind, name: str, smiles: str):
        known = self.entities.get(entity_id)
        if known is None:
            self.entities[entity_id] = Entity(entity_id, kind, name, smiles or None)
        elif smiles and known.smiles is None:
            self.entities[entity_id] = known._replace(smiles=smiles)
        if smiles and entity_id not in self.drug_keys:
            self.drug_keys[entity_id] = self._parsed[smiles]


def _cell(row: Mapping, column: str) -> str:
    value = row.get(column)
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return ""
    return str(value).strip()


def ingest_triplets(rows: Iterable[Mapping], first_line: int = 2) -> Tuple[KnowledgeGraph, IngestReport]:
    """Build a knowledge graph from triplet rows.

    This method performs the following operations:
    1. Validate each row (required fields, entity kinds, SMILES) and record rejects with their line numbers.
    2. Register entities, keeping the first declaration of each id.
    3. Collapse duplicate triplets, treating (a, r, b) and (b, r, a) as the same edge.
    4. Tally entity and relation counts.
    """
    builder = _EntityBuilder()
    report = IngestReport()
    seen = set()
    triplets: List[Triplet] = []

    for line_number, row in enumerate(rows, start=first_line):
        missing = [column for column in REQUIRED_COLUMNS if not _cell(row, column)]
        if missing:
            report.rejected_lines.append((line_number, f"missing field: {', '.join(missing)}"))
            continue
        try:
            head_kind = EntityKind.parse(_cell(row, "head_kind"))
            tail_kind = EntityKind.parse(_cell(row, "tail_kind"))
        except ValueError as e:
            report.rejected_lines.append((line_number, str(e)))
            continue

        head_id, tail_id = _cell(row, "head_id"), _cell(row, "tail_id")
        head_smiles, tail_smiles = _cell(row, "head_smiles"), _cell(row, "tail_smiles")
        reason = builder.check(head_id, head_kind, head_smiles) or builder.check(tail_id, tail_kind, tail_smiles)
        if reason is None and head_id == tail_id and head_kind is not tail_kind:
            reason = f"conflicting entity kind for {head_id}: {head_kind.value} vs {tail_kind.value}"
        if reason is not None:
            report.rejected_lines.append((line_number, reason))
            continue

        builder.add(head_id, head_kind, _cell(row, "head_name"), head_smiles)
        builder.add(tail_id, tail_kind, _cell(row, "tail_name"), tail_smiles)

        relation = _cell(row, "relation")
        edge = (min(head_id, tail_id), relation, max(head_id, tail_id))
        if edge in seen:
            report.duplicates_collapsed += 1
            continue
        seen.add(edge)
        triplets.append(Triplet(head_id, relation, tail_id))

    for line_number, reason in report.rejected_lines:
        logger.debug(f"Rejected line {line_number}: {reason}")
    if not triplets:
        raise EmptyGraphError(f"No valid triplets found ({len(report.rejected_lines)} rejected rows)")

    report.triplet_count = len(triplets)
    report.relation_counts = dict(sorted(Counter(t.relation for t in triplets).items()))
    report.entity_counts = dict(sorted(Counter(e.kind.value for e in builder.entities.values()).items()))
    logger.info(
        f"Ingested {report.triplet_count} triplets over {len(builder.entities)} entities "
        f"({len(report.rejected_lines)} rejected, {report.duplicates_collapsed} duplicates collapsed)"
    )
    return KnowledgeGraph(builder.entities, triplets, builder.drug_keys), report


def _standardize_primekg_columns(df: pd.DataFrame, drug_smiles: Optional[Mapping[str, str]]) -> pd.DataFrame:
    """Rename raw PrimeKG ``kg.csv`` columns onto the triplet columns.

    Node indices become entity ids; drug SMILES are joined on the source identifier (e.g. DrugBank id).
    """
    column_mapping = {
        "x_index": "head_id",
        "x_type": "head_kind",
        "x_name": "head_name",
        "display_relation": "relation",
        "y_index": "tail_id",
        "y_type": "tail_kind",
        "y_name": "tail_name",
    }
    renamed = df.rename(columns=column_mapping)
    smiles = drug_smiles or {}
    for side, source in (("head", "x"), ("tail", "y")):
        source_ids = df.get(f"{source}_id", pd.Series([""] * len(df), index=df.index))
        is_drug = renamed[f"{side}_kind"] == EntityKind.DRUG.value
        renamed[f"{side}_smiles"] = [
            smiles.get(source_id, "") if drug else "" for source_id, drug in zip(source_ids, is_drug)
        ]
    return renamed[TRIPLET_COLUMNS]


def _read_triplet_rows(
    path: Path, layout: str, drug_smiles: Optional[Mapping[str, str]]
) -> Iterator[Dict[str, str]]:
    if layout == "engine":
        reader = pd.read_csv(
            path, sep="\t", dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE, chunksize=READ_CHUNK_SIZE
        )
    elif layout == "primekg":
        reader = pd.read_csv(path, dtype=str, keep_default_na=False, chunksize=READ_CHUNK_SIZE)
    else:
        raise ValueError(f"Unknown triplet file layout {layout!r}; expected 'engine' or 'primekg'")

    for chunk in reader:
        if layout == "primekg":
            chunk = _standardize_primekg_columns(chunk, drug_smiles)
        else:
            missing = [c for c in REQUIRED_COLUMNS if c not in chunk.columns]
            if missing:
                raise ValueError(f"Triplet file {path} lacks columns: {', '.join(missing)}")
        yield from chunk.to_dict("records")


def load_triplet_file(
    path: Path, layout: str = "engine", drug_smiles: Optional[Mapping[str, str]] = None
) -> Tuple[KnowledgeGraph, IngestReport]:
    """Ingest a triplet TSV (engine layout) or a raw PrimeKG ``kg.csv`` dump."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Triplet file not found: {path}")
    logger.info(f"Reading triplets from {path} ({layout} layout)")
    return ingest_triplets(_read_triplet_rows(path, layout, drug_smiles))


def save_snapshot(kg: KnowledgeGraph, report: IngestReport, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entities = pd.DataFrame(
        [
            {
                "id": e.id,
                "kind": e.kind.value,
                "name": e.name,
                "smiles": e.smiles or "",
                "key": kg.drug_key(e.id).key if kg.drug_key(e.id) else "",
            }
            for e in sorted(kg.entities.values(), key=lambda e: e.id)
        ],
        columns=["id", "kind", "name", "smiles", "key"],
    )
    triplets = pd.DataFrame([t._asdict() for t in kg.triplets], columns=list(Triplet._fields))
    entities.to_csv(directory / "entities.tsv", sep="\t", index=False)
    triplets.to_csv(directory / "triplets.tsv", sep="\t", index=False)
    (directory / "report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    logger.info(f"Saved knowledge graph snapshot to {directory}")
    return directory


def load_snapshot(directory: Path) -> Tuple[KnowledgeGraph, IngestReport]:
    """Load a snapshot written by ``save_snapshot``; stored keys are trusted, SMILES are parsed on demand."""
    directory = Path(directory)
    for name in ("entities.tsv", "triplets.tsv", "report.json"):
        if not (directory / name).exists():
            raise FileNotFoundError(f"Knowledge graph snapshot incomplete: {directory / name} missing")

    entities_df = pd.read_csv(directory / "entities.tsv", sep="\t", dtype=str, keep_default_na=False)
    triplets_df = pd.read_csv(directory / "triplets.tsv", sep="\t", dtype=str, keep_default_na=False)
    entities = {}
    drug_keys = {}
    for row in entities_df.itertuples(index=False):
        entities[row.id] = Entity(row.id, EntityKind.parse(row.kind), row.name, row.smiles or None)
        if row.key:
            drug_keys[row.id] = CanonicalKey(row.key)
    triplets = [Triplet(row.head, row.relation, row.tail) for row in triplets_df.itertuples(index=False)]
    report = IngestReport.from_dict(json.loads((directory / "report.json").read_text(encoding="utf-8")))
    return KnowledgeGraph(entities, triplets, drug_keys), report
