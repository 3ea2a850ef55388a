import logging
import shlex
import subprocess
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, Mapping, Union

import pandas as pd

from chem import Molecule, SmilesSyntaxError, canonical_key, parse_smiles

logger = logging.getLogger(__name__)


class CaptioningError(RuntimeError):
    pass


class CaptioningTool(ABC):
    """Turns a molecule into a free-text description."""

    name = "captioning"

    @abstractmethod
    def caption(self, molecule: Molecule) -> str:
        pass


class CommandCaptioningTool(CaptioningTool):
    """Runs an external captioning model: SMILES on stdin, caption on stdout."""

    name = "command"

    def __init__(self, command: Union[str, List[str]], timeout: float = 120.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def caption(self, molecule: Molecule) -> str:
        try:
            completed = subprocess.run(
                self.command,
                input=molecule.smiles + "\n",
                capture_output=True,
                text=True,
                timeout=self.timeout,
                check=False,
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            raise CaptioningError(f"Captioning command {self.command[0]!r} failed: {e}") from e
        if completed.returncode != 0:
            raise CaptioningError(
                f"Captioning command exited with status {completed.returncode}: {completed.stderr.strip()[:200]}"
            )
        text = " ".join(completed.stdout.split())
        if not text:
            raise CaptioningError("Captioning command produced no output")
        return text


class StaticCaptioningTool(CaptioningTool):
    """Lookup table keyed by canonical SMILES."""

    name = "static"

    def __init__(self, table: Mapping[str, str]):
        self._table: Dict[str, str] = {}
        for smiles, text in table.items():
            try:
                key = canonical_key(parse_smiles(smiles)).key
            except SmilesSyntaxError:
                logger.warning(f"Skipping captioning table entry with unparseable SMILES {smiles!r}")
                continue
            self._table[key] = text

    @classmethod
    def from_file(cls, path: Path) -> "StaticCaptioningTool":
        df = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
        return cls(dict(zip(df["smiles"], df["caption"])))

    def caption(self, molecule: Molecule) -> str:
        try:
            return self._table[molecule.key.key]
        except KeyError:
            raise CaptioningError(f"No caption for {molecule.smiles}") from None
