import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from chem import CanonicalKey, SmilesSyntaxError, canonical_key, parse_smiles

logger = logging.getLogger(__name__)

CAPTION_SEPARATOR = " "
ANNOTATION_COLUMNS = ["smiles", "caption", "source"]
SNAPSHOT_COLUMNS = ["key", "source", "caption"]
READ_CHUNK_SIZE = 100_000

_UNESCAPES = {"t": "\t", "n": "\n", "\\": "\\"}
_ESCAPES = {"\t": "\\t", "\n": "\\n", "\\": "\\\\"}


class EmptyStoreError(ValueError):
    pass


def unescape_field(text: str) -> str:
    return re.sub(r"\\([tn\\])", lambda m: _UNESCAPES[m.group(1)], text)


def escape_field(text: str) -> str:
    return re.sub(r"[\t\n\\]", lambda m: _ESCAPES[m.group()], text)


class AnnotationRecord(NamedTuple):
    key: CanonicalKey
    captions: Tuple[Tuple[str, str], ...]

    def text(self) -> str:
        return CAPTION_SEPARATOR.join(caption for _, caption in self.captions)


@dataclass(frozen=True)
class StoreStats:
    molecule_count: int
    caption_count: int
    unparseable_rows: int = 0
    duplicate_rows: int = 0
    rejected_rows: int = 0

    @property
    def mean_captions(self) -> float:
        return self.caption_count / self.molecule_count if self.molecule_count else 0.0


class AnnotationStore:
    """Captions grouped by canonical key, in ingestion order."""

    def __init__(self, records: Mapping[str, AnnotationRecord], stats: StoreStats):
        self._records: Dict[str, AnnotationRecord] = dict(records)
        self.stats = stats

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: CanonicalKey) -> bool:
        return key.key in self._records

    def record(self, key: CanonicalKey) -> Optional[AnnotationRecord]:
        return self._records.get(key.key)

    def records(self) -> Iterator[AnnotationRecord]:
        return iter(self._records.values())

    def lookup_caption(self, key: CanonicalKey) -> Optional[str]:
        record = self._records.get(key.key)
        return record.text() if record is not None else None

    def subsample(self, fraction: float, seed: int = 0) -> "AnnotationStore":
        """Seeded random share of the annotated molecules, kept in ingestion order."""
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        if fraction == 1 or not self._records:
            return self
        keys = list(self._records)
        n = max(1, round(fraction * len(keys)))
        kept = np.sort(np.random.default_rng(seed).choice(len(keys), size=n, replace=False))
        records = {keys[i]: self._records[keys[i]] for i in kept}
        logger.info(f"Pruned annotation store to {n}/{len(keys)} molecules (seed {seed})")
        stats = replace(
            self.stats, molecule_count=n, caption_count=sum(len(r.captions) for r in records.values())
        )
        return AnnotationStore(records, stats)


class _CaptionGrouper:
    def __init__(self):
        self.groups: Dict[str, List[Tuple[str, str]]] = {}
        self.duplicates = 0

    def add(self, key: str, source: str, caption: str):
        if any(c == caption for _, c in self.groups.get(key, ())):
            self.duplicates += 1
            return
        self.groups.setdefault(key, []).append((source, caption))

    def records(self) -> Dict[str, AnnotationRecord]:
        return {key: AnnotationRecord(CanonicalKey(key), tuple(captions)) for key, captions in self.groups.items()}


def ingest_annotations(rows: Iterable[Mapping], first_line: int = 2) -> AnnotationStore:
    """Group caption rows by canonical key.

    Rows with unparseable SMILES are skipped and counted; rows without a caption are rejected. Exact duplicate
    captions of a molecule are kept once.
    """
    grouper = _CaptionGrouper()
    keys: Dict[str, Optional[str]] = {}
    unparseable = rejected = 0

    for line_number, row in enumerate(rows, start=first_line):
        smiles = str(row.get("smiles") or "").strip()
        caption = unescape_field(str(row.get("caption") or "")).strip()
        source = unescape_field(str(row.get("source") or "")).strip()
        if not smiles or not caption:
            rejected += 1
            logger.debug(f"Rejected line {line_number}: missing smiles or caption")
            continue
        if smiles not in keys:
            try:
                keys[smiles] = canonical_key(parse_smiles(smiles)).key
            except SmilesSyntaxError as e:
                keys[smiles] = None
                logger.debug(f"Line {line_number}: {e}")
        if keys[smiles] is None:
            unparseable += 1
            continue
        grouper.add(keys[smiles], source, caption)

    records = grouper.records()
    if not records:
        raise EmptyStoreError(f"No valid annotation rows ({unparseable} unparseable, {rejected} rejected)")

    stats = StoreStats(
        molecule_count=len(records),
        caption_count=sum(len(r.captions) for r in records.values()),
        unparseable_rows=unparseable,
        duplicate_rows=grouper.duplicates,
        rejected_rows=rejected,
    )
    logger.info(
        f"Annotation store: {stats.molecule_count} molecules, {stats.caption_count} captions "
        f"(mean {stats.mean_captions:.3f}), {unparseable} unparseable rows skipped"
    )
    return AnnotationStore(records, stats)


def _read_rows(path: Path, columns: List[str]) -> Iterator[Dict[str, str]]:
    reader = pd.read_csv(
        path, sep="\t", dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE, chunksize=READ_CHUNK_SIZE
    )
    for chunk in reader:
        missing = [c for c in columns if c not in chunk.columns]
        if missing:
            raise ValueError(f"{path} lacks columns: {', '.join(missing)}")
        yield from chunk.to_dict("records")


def load_annotation_file(path: Path) -> AnnotationStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Annotation file not found: {path}")
    return ingest_annotations(_read_rows(path, ANNOTATION_COLUMNS[:2]))


def _stats_path(path: Path) -> Path:
    return path.with_name(path.stem + ".stats.json")


def save_snapshot(store: AnnotationStore, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as outfile:
        outfile.write("\t".join(SNAPSHOT_COLUMNS) + "\n")
        for record in store.records():
            for source, caption in record.captions:
                outfile.write(f"{record.key.key}\t{escape_field(source)}\t{escape_field(caption)}\n")
    _stats_path(path).write_text(json.dumps(asdict(store.stats), indent=2), encoding="utf-8")
    logger.info(f"Saved annotation snapshot to {path}")
    return path


def load_snapshot(path: Path) -> AnnotationStore:
    """Load a snapshot written by ``save_snapshot``; keys are already canonical and are not re-parsed."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Annotation snapshot not found: {path}")
    grouper = _CaptionGrouper()
    for row in _read_rows(path, SNAPSHOT_COLUMNS):
        grouper.add(row["key"], unescape_field(row["source"]), unescape_field(row["caption"]))
    records = grouper.records()
    if not records:
        raise EmptyStoreError(f"Annotation snapshot {path} is empty")
    stats_path = _stats_path(path)
    if stats_path.exists():
        stats = StoreStats(**json.loads(stats_path.read_text(encoding="utf-8")))
    else:
        stats = StoreStats(len(records), sum(len(r.captions) for r in records.values()))
    return AnnotationStore(records, stats)
