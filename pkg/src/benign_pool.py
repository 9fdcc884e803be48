import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Tuple

import pandas as pd

from src.argument_parser import logger
from src.errors import IoFailure

POOL_VERSION = "v1"
DEFAULT_DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@dataclass(frozen=True)
class BenignPool:
    """Versioned benign material the mutation actions draw from.

    Attributes:
        pool_bytes: raw benign byte pool (strings, zero runs, manifests)
        imports: (dll, symbol) pairs for the imports-append action
        section_names: section names of at most 8 bytes
    """

    pool_bytes: bytes
    imports: Tuple[Tuple[bytes, bytes], ...]
    section_names: Tuple[bytes, ...]


def data_dir() -> Path:
    override = os.environ.get("TESTBED_DATA_DIR")
    return Path(override) if override else DEFAULT_DATA_DIR


@lru_cache(maxsize=4)
def _load(directory: str) -> BenignPool:
    root = Path(directory)
    pool_file = root / f"benign_pool_{POOL_VERSION}.bin"
    imports_file = root / f"benign_imports_{POOL_VERSION}.txt"
    names_file = root / f"benign_section_names_{POOL_VERSION}.txt"

    try:
        pool_bytes = pool_file.read_bytes()
        imports_df = pd.read_csv(
            imports_file, sep=":", comment="#", header=None, names=["dll", "symbol"], dtype=str
        )
        names_df = pd.read_csv(names_file, comment="#", header=None, names=["name"], dtype=str)
    except (OSError, pd.errors.ParserError) as e:
        raise IoFailure(f"Cannot load benign pool from {root}: {e}") from e

    imports = tuple(
        (dll.strip().encode("ascii"), symbol.strip().encode("ascii"))
        for dll, symbol in imports_df.itertuples(index=False)
    )
    names = tuple(name.strip().encode("ascii") for name in names_df["name"])
    too_long = [n for n in names if len(n) > 8]
    if too_long:
        raise IoFailure(f"Section names longer than 8 bytes in {names_file}: {too_long}")
    if not pool_bytes or not imports or not names:
        raise IoFailure(f"Benign pool in {root} is empty")

    logger.debug(
        f"Loaded benign pool {POOL_VERSION}: {len(pool_bytes)} bytes, "
        f"{len(imports)} imports, {len(names)} section names"
    )
    return BenignPool(pool_bytes, imports, names)


def load_benign_pool() -> BenignPool:
    """Load the bundled pool once per process (per data directory)."""
    return _load(str(data_dir()))
