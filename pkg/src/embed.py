import logging
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np

from chem import DEFAULT_RADIUS, DEFAULT_WIDTH, Molecule, tanimoto
from kgstore import EntityKind, KnowledgeGraph

logger = logging.getLogger(__name__)


class EmbeddingFormatError(ValueError):
    pass


class EmptyEmbeddingTable(EmbeddingFormatError):
    pass


class ZeroVectorError(ValueError):
    pass


class NoEmbeddedDrugs(LookupError):
    pass


class AnchorWithoutSmiles(LookupError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Row-aligned entity ids and vectors; rows are read-only once built."""

    dim: int
    ids: Tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if not self.ids:
            raise EmptyEmbeddingTable("Embedding table has no entries")
        if matrix.shape != (len(self.ids), self.dim):
            raise EmbeddingFormatError(f"Matrix shape {matrix.shape} does not match {len(self.ids)} x {self.dim}")
        if len(set(self.ids)) != len(self.ids):
            raise EmbeddingFormatError("Duplicate ids in embedding table")
        if not np.isfinite(matrix).all():
            raise EmbeddingFormatError("Embedding table contains non-finite components")
        matrix.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "_rows", {entity_id: i for i, entity_id in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._rows

    def vector(self, entity_id: str) -> Optional[np.ndarray]:
        row = self._rows.get(entity_id)
        return self.matrix[row] if row is not None else None

    @property
    def entries(self) -> Dict[str, np.ndarray]:
        return {entity_id: self.matrix[i] for i, entity_id in enumerate(self.ids)}

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as outfile:
            np.savez_compressed(outfile, ids=np.array(self.ids, dtype=str), matrix=self.matrix)
        return path

    @classmethod
    def load(cls, path: Path) -> "EmbeddingTable":
        with np.load(Path(path), allow_pickle=False) as archive:
            matrix = archive["matrix"]
            return cls(int(matrix.shape[1]), tuple(str(i) for i in archive["ids"]), matrix)


class AnchorResult(NamedTuple):
    drug: str
    cosine: float
    tanimoto: float


def load_embedding_table(lines: Iterable[str]) -> Tuple[EmbeddingTable, List[Tuple[int, str]]]:
    """Parse a whitespace-separated table: header ``id <dim>``, then ``entity_id v1 ... v_dim`` per line.

    Bad rows are rejected with their line number; a bad header or a table without valid rows is an error.
    """
    iterator = iter(lines)
    header = next(iterator, "").split()
    if len(header) != 2 or header[0] != "id" or not header[1].isdigit() or int(header[1]) < 1:
        raise EmbeddingFormatError(f"Inconsistent header {' '.join(header)!r}; expected 'id <dim>'")
    dim = int(header[1])

    ids: List[str] = []
    rows: List[List[float]] = []
    seen = set()
    rejected: List[Tuple[int, str]] = []
    for line_number, line in enumerate(iterator, start=2):
        tokens = line.split()
        if not tokens:
            continue
        entity_id, components = tokens[0], tokens[1:]
        if len(components) != dim:
            rejected.append((line_number, f"expected {dim} components, got {len(components)}"))
            continue
        try:
            vector = [float(token) for token in components]
        except ValueError:
            rejected.append((line_number, "non-numeric component"))
            continue
        if not all(math.isfinite(value) for value in vector):
            rejected.append((line_number, "non-finite component"))
            continue
        if entity_id in seen:
            rejected.append((line_number, f"duplicate id {entity_id}"))
            continue
        seen.add(entity_id)
        ids.append(entity_id)
        rows.append(vector)

    for line_number, reason in rejected:
        logger.warning(f"Embedding line {line_number} rejected: {reason}")
    if not ids:
        raise EmptyEmbeddingTable(f"No valid embedding rows ({len(rejected)} rejected)")
    return EmbeddingTable(dim, tuple(ids), np.array(rows, dtype=np.float64)), rejected


def load_embedding_file(path: Path) -> Tuple[EmbeddingTable, List[Tuple[int, str]]]:
    with open(path, "r", encoding="utf-8") as infile:
        return load_embedding_table(infile)


def fingerprint_vector(molecule: Molecule) -> np.ndarray:
    """0/1 vector of fingerprint bits, so cosine equals |A&B| / sqrt(|A||B|)."""
    return molecule.fingerprint.bits.astype(np.float64)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        raise ZeroVectorError("Cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def find_anchor(
    query_vec: np.ndarray,
    kg: KnowledgeGraph,
    table: EmbeddingTable,
    query_molecule: Molecule,
) -> AnchorResult:
    """Embedded KG drug with the highest cosine to the query, ties by ascending id.

    Candidates without stored SMILES are passed over in favor of the next best one.
    """
    query = np.asarray(query_vec, dtype=np.float64)
    if query.shape != (table.dim,):
        raise ValueError(f"Query vector has shape {query.shape}, table dim is {table.dim}")
    query_norm = np.linalg.norm(query)
    if query_norm == 0:
        raise ZeroVectorError("Query embedding is the zero vector")

    rows = [
        i
        for i, entity_id in enumerate(table.ids)
        if entity_id in kg.entities and kg.entities[entity_id].kind is EntityKind.DRUG
    ]
    norms = np.linalg.norm(table.matrix[rows], axis=1) if rows else np.zeros(0)
    rows = [row for row, norm in zip(rows, norms) if norm > 0]
    if not rows:
        raise NoEmbeddedDrugs("No knowledge-graph drug has a non-zero embedding")

    candidates = table.matrix[rows]
    scores = np.clip(candidates @ query / (np.linalg.norm(candidates, axis=1) * query_norm), -1.0, 1.0)
    ranked = sorted(zip(scores.tolist(), (table.ids[row] for row in rows)), key=lambda item: (-item[0], item[1]))

    for score, drug_id in ranked:
        molecule = kg.drug_molecule(drug_id, query_molecule.fingerprint.radius, query_molecule.fingerprint.width)
        if molecule is None:
            logger.debug(f"Skipping anchor candidate {drug_id}: no stored SMILES")
            continue
        return AnchorResult(drug_id, float(score), tanimoto(query_molecule.fingerprint, molecule.fingerprint))
    raise AnchorWithoutSmiles("No embedded drug with stored SMILES is available as anchor")


class EmbeddingProvider(ABC):
    """Supplies the query vector together with the drug table it must be compared against."""

    name = "embedding"

    @abstractmethod
    def resolve(self, molecule: Molecule) -> Tuple[np.ndarray, EmbeddingTable]:
        pass

    def find_anchor(self, kg: KnowledgeGraph, molecule: Molecule) -> AnchorResult:
        query_vec, table = self.resolve(molecule)
        return find_anchor(query_vec, kg, table, molecule)


class FingerprintEmbedding(EmbeddingProvider):
    """Fallback provider: fingerprint bit vectors of every KG drug that has SMILES."""

    name = "fingerprint"

    def __init__(self, kg: KnowledgeGraph, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH):
        self.kg = kg
        self.radius = radius
        self.width = width
        self._table: Optional[EmbeddingTable] = None
        self._lock = threading.Lock()

    @property
    def table(self) -> EmbeddingTable:
        with self._lock:
            if self._table is None:
                self._table = self._build_table()
            return self._table

    def _build_table(self) -> EmbeddingTable:
        ids: List[str] = []
        vectors: List[np.ndarray] = []
        for drug_id in self.kg.drug_ids():
            molecule = self.kg.drug_molecule(drug_id, self.radius, self.width)
            if molecule is not None:
                ids.append(drug_id)
                vectors.append(fingerprint_vector(molecule))
        if not ids:
            raise NoEmbeddedDrugs("No knowledge-graph drug carries SMILES to fingerprint")
        logger.info(f"Built fingerprint embeddings for {len(ids)} drugs")
        return EmbeddingTable(self.width, tuple(ids), np.vstack(vectors))

    def resolve(self, molecule: Molecule) -> Tuple[np.ndarray, EmbeddingTable]:
        return fingerprint_vector(molecule), self.table


class TableEmbedding(EmbeddingProvider):
    """Precomputed table (e.g. exported GNN embeddings).

    Query vectors are looked up by canonical SMILES; molecules without a row fall back to fingerprints.
    """

    name = "table"

    def __init__(self, table: EmbeddingTable, fallback: FingerprintEmbedding):
        self.table = table
        self.fallback = fallback

    def resolve(self, molecule: Molecule) -> Tuple[np.ndarray, EmbeddingTable]:
        vector = self.table.vector(molecule.key.key)
        if vector is None:
            logger.info(f"No embedding row for {molecule.smiles}; using fingerprint embeddings")
            return self.fallback.resolve(molecule)
        return vector, self.table
