import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np
from rdkit import Chem, rdBase
from rdkit.Chem import rdFingerprintGenerator

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 2
DEFAULT_WIDTH = 2048
MIN_FINGERPRINT_WIDTH = 64

_TOKEN_PATTERN = re.compile(
    r"(?P<atom>\[[^\[\]]*\]|Br|Cl|[BCNOSPFI]|[bcnops]|\*)"
    r"|(?P<ring>%\d{2}|\d)"
    r"|(?P<bond>[-=#$:/\\.])"
    r"|(?P<open>\()"
    r"|(?P<close>\))"
)

_VALENCE_PROBLEMS = {"AtomValenceException"}


class SmilesSyntaxError(SyntaxError):
    """A SMILES string that cannot be turned into a molecular graph.

    ``offset`` is the 0-based character offset of the offending token, or None when no position is known.
    """

    def __init__(self, message: str, smiles: str, offset: Optional[int] = None):
        super().__init__(message)
        self.msg = message
        self.smiles = smiles
        self.text = smiles
        self.offset = offset

    def __str__(self) -> str:
        where = f" at offset {self.offset}" if self.offset is not None else ""
        return f"{self.msg}{where} in {self.smiles!r}"


class WidthMismatch(ValueError):
    """Two fingerprints of different width were compared."""


class BondOrder(Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    AROMATIC = "aromatic"


_RDKIT_BOND_ORDERS = {
    Chem.BondType.SINGLE: BondOrder.SINGLE,
    Chem.BondType.DOUBLE: BondOrder.DOUBLE,
    Chem.BondType.TRIPLE: BondOrder.TRIPLE,
    Chem.BondType.AROMATIC: BondOrder.AROMATIC,
}


class Atom(NamedTuple):
    element: str
    charge: int
    hydrogens: int
    aromatic: bool


class Bond(NamedTuple):
    begin: int
    end: int
    order: BondOrder


@dataclass(frozen=True)
class MolecularGraph:
    """Immutable snapshot of a parsed, stereo-free molecule.

    The RDKit molecule is kept alongside the atom/bond tables so that canonicalization and fingerprinting
    do not have to re-parse the source string.
    """

    atoms: Tuple[Atom, ...]
    bonds: Tuple[Bond, ...]
    source_smiles: str
    mol: Any = field(compare=False, repr=False)

    @property
    def atom_count(self) -> int:
        return len(self.atoms)

    @property
    def bond_count(self) -> int:
        return len(self.bonds)


class CanonicalKey(NamedTuple):
    key: str

    def __str__(self) -> str:
        return self.key


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Fixed-width bitset with the radius it was generated at."""

    bits: np.ndarray
    radius: int = DEFAULT_RADIUS

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool).copy()
        if bits.ndim != 1 or not _is_power_of_two(bits.size):
            raise ValueError(f"Fingerprint width must be a power of two, got {bits.size}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_indices(cls, indices: Iterable[int], width: int, radius: int = DEFAULT_RADIUS) -> "Fingerprint":
        bits = np.zeros(width, dtype=bool)
        bits[list(indices)] = True
        return cls(bits, radius)

    @property
    def width(self) -> int:
        return int(self.bits.size)

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def on_bits(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.radius == other.radius and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash((self.radius, self.bits.tobytes()))


@dataclass(frozen=True)
class Molecule:
    """A query or reference molecule: parsed graph, canonical key and fingerprint."""

    graph: MolecularGraph
    key: CanonicalKey
    fingerprint: Fingerprint

    @classmethod
    def from_smiles(cls, smiles: str, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> "Molecule":
        graph = parse_smiles(smiles)
        return cls(graph, canonical_key(graph), morgan_fingerprint(graph, radius, width))

    @property
    def smiles(self) -> str:
        return self.key.key


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


def _atom_offsets(smiles: str) -> List[int]:
    """Character offsets of atom tokens, in the order the parser numbers atoms."""
    offsets = []
    pos = 0
    while pos < len(smiles):
        match = _TOKEN_PATTERN.match(smiles, pos)
        if match is None:
            pos += 1
            continue
        if match.lastgroup == "atom":
            offsets.append(pos)
        pos = match.end()
    return offsets


def _locate_syntax_error(smiles: str) -> Tuple[str, Optional[int]]:
    """Scan the token stream for the first structural error RDKit rejected.

    Returns a short reason and the offset of the offending token.
    """
    open_branches: List[int] = []
    open_rings = {}
    pos = 0
    last_kind = None
    while pos < len(smiles):
        match = _TOKEN_PATTERN.match(smiles, pos)
        if match is None:
            return f"unexpected character {smiles[pos]!r}", pos
        kind = match.lastgroup
        if kind == "atom" and match.group().startswith("["):
            with rdBase.BlockLogs():
                if Chem.MolFromSmiles(match.group(), sanitize=False) is None:
                    return f"unknown element in {match.group()}", pos
        elif kind == "open":
            open_branches.append(pos)
        elif kind == "close":
            if not open_branches:
                return "unbalanced parentheses", pos
            open_branches.pop()
        elif kind == "ring":
            label = match.group()
            if label in open_rings:
                del open_rings[label]
            else:
                open_rings[label] = pos
        last_kind = kind
        pos = match.end()

    if open_branches:
        return "unbalanced parentheses", open_branches[-1]
    if open_rings:
        return "unmatched ring closure", min(open_rings.values())
    if last_kind == "bond":
        return "dangling bond", len(smiles) - 1
    return "syntax error", None


def _check_chemistry(mol, smiles: str) -> bool:
    """Raise on chemistry problems of organic-subset atoms.

    Returns True when valence problems on bracket atoms were waived, so the caller sanitizes without the
    property check.
    """
    waived = False
    for problem in Chem.DetectChemistryProblems(mol):
        kind = problem.GetType()
        if kind in _VALENCE_PROBLEMS:
            atom = mol.GetAtomWithIdx(problem.GetAtomIdx())
            if atom.GetNoImplicit():
                waived = True
                continue
            indices = [problem.GetAtomIdx()]
        elif hasattr(problem, "GetAtomIndices"):
            indices = list(problem.GetAtomIndices())
        elif hasattr(problem, "GetAtomIdx"):
            indices = [problem.GetAtomIdx()]
        else:
            indices = []

        offsets = _atom_offsets(smiles)
        offset = offsets[min(indices)] if indices and min(indices) < len(offsets) else None
        reason = "valence overflow" if kind in _VALENCE_PROBLEMS else "cannot kekulize aromatic system"
        raise SmilesSyntaxError(reason, smiles, offset)
    return waived


def parse_smiles(smiles: str) -> MolecularGraph:
    """Parse a SMILES string into a stereo-free molecular graph.

    This method performs the following operations:
    1. Parse without sanitization; on failure locate the offending token.
    2. Check valences of organic-subset atoms and kekulizability of aromatic systems.
    3. Sanitize and drop stereo markers.
    4. Snapshot atoms and bonds.
    """
    if not isinstance(smiles, str) or not smiles.strip():
        raise SmilesSyntaxError("empty SMILES", str(smiles), 0)
    smiles = smiles.strip()

    with rdBase.BlockLogs():
        mol = Chem.MolFromSmiles(smiles, sanitize=False)
    if mol is None:
        reason, offset = _locate_syntax_error(smiles)
        raise SmilesSyntaxError(reason, smiles, offset)

    waived = _check_chemistry(mol, smiles)
    try:
        with rdBase.BlockLogs():
            if waived:
                mol.UpdatePropertyCache(strict=False)
                Chem.SanitizeMol(mol, Chem.SanitizeFlags.SANITIZE_ALL ^ Chem.SanitizeFlags.SANITIZE_PROPERTIES)
            else:
                Chem.SanitizeMol(mol)
    except Exception as e:
        raise SmilesSyntaxError(f"sanitization failed: {e}", smiles) from e
    Chem.RemoveStereochemistry(mol)

    atoms = tuple(
        Atom(atom.GetSymbol(), atom.GetFormalCharge(), atom.GetTotalNumHs(), atom.GetIsAromatic())
        for atom in mol.GetAtoms()
    )
    bonds = []
    for bond in mol.GetBonds():
        order = _RDKIT_BOND_ORDERS.get(bond.GetBondType())
        if order is None:
            raise SmilesSyntaxError(f"unsupported bond type {bond.GetBondType()}", smiles)
        bonds.append(Bond(bond.GetBeginAtomIdx(), bond.GetEndAtomIdx(), order))

    return MolecularGraph(atoms=atoms, bonds=tuple(bonds), source_smiles=smiles, mol=mol)


def canonical_key(graph: MolecularGraph) -> CanonicalKey:
    """Order-invariant 2D key; itself valid SMILES."""
    return CanonicalKey(Chem.MolToSmiles(graph.mol, canonical=True, isomericSmiles=False))


@lru_cache(maxsize=16)
def _morgan_generator(radius: int, width: int):
    return rdFingerprintGenerator.GetMorganGenerator(radius=radius, fpSize=width)


def morgan_fingerprint(graph: MolecularGraph, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> Fingerprint:
    if radius < 0:
        raise ValueError(f"Fingerprint radius must be >= 0, got {radius}")
    if width < MIN_FINGERPRINT_WIDTH or not _is_power_of_two(width):
        raise ValueError(f"Fingerprint width must be a power of two >= {MIN_FINGERPRINT_WIDTH}, got {width}")
    bits = _morgan_generator(radius, width).GetFingerprintAsNumPy(graph.mol)
    return Fingerprint(bits.astype(bool), radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|A & B| / |A | B| over set bits; 0.0 when both are empty."""
    if a.width != b.width:
        raise WidthMismatch(f"Cannot compare fingerprints of width {a.width} and {b.width}")
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a.bits & b.bits)) / union
