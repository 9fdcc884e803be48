"""272-dimensional feature vector shared by the surrogate detectors and the agent.

Layout: 256 normalized byte-histogram bins, then the 16 structural features
named in ``STRUCTURAL_FEATURES`` (in that order). Entropies are Shannon entropy
in bits divided by 8, so they lie in [0, 1].
"""

from typing import List, Optional, Union

import numpy as np
from scipy.stats import entropy

from src.errors import PeFormatError
from src.packer import is_internally_packed
from src.pe_model import (
    DIRECTORY_DEBUG,
    DIRECTORY_SECURITY,
    SCN_MEM_EXECUTE,
    SCN_MEM_WRITE,
    PeBinary,
    parse_pe,
)

HISTOGRAM_BINS = 256

STRUCTURAL_FEATURES: List[str] = [
    "section_count",
    "mean_section_entropy",
    "max_section_entropy",
    "import_descriptor_count",
    "imported_symbol_count",
    "overlay_fraction",
    "log2_file_size",
    "has_signature",
    "has_debug",
    "checksum_is_zero",
    "packed_marker",
    "entry_section_entropy",
    "timestamp_normalized",
    "executable_section_count",
    "writable_section_count",
    "mean_section_name_printability",
]

FEATURE_NAMES: List[str] = [f"byte_{i:02x}" for i in range(HISTOGRAM_BINS)] + STRUCTURAL_FEATURES
FEATURE_DIM = len(FEATURE_NAMES)
STRUCTURAL_OFFSET = HISTOGRAM_BINS


def feature_index(name: str) -> int:
    return FEATURE_NAMES.index(name)


# 1990-01-01 and 2030-01-01, epoch seconds
TIMESTAMP_FLOOR = 631152000
TIMESTAMP_CEILING = 1893456000


def byte_histogram(data: bytes) -> np.ndarray:
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=HISTOGRAM_BINS).astype(np.float64)
    total = counts.sum()
    if total == 0:
        return counts
    return counts / total


def normalized_entropy(data: bytes) -> float:
    """Shannon entropy of ``data`` in bits per byte, divided by 8."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=HISTOGRAM_BINS)
    return float(entropy(counts, base=2)) / 8.0


def _printability(name: bytes) -> float:
    if not name:
        return 0.0
    return sum(0x20 <= b < 0x7F for b in name) / len(name)


def structural_features(pe: PeBinary) -> np.ndarray:
    sections = pe.sections
    entropies = [normalized_entropy(pe.section_data(s)) for s in sections]
    entry_section = pe.section_for_rva(pe.optional_header.entry_point_rva)
    size = len(pe.raw)
    timestamp = pe.coff_header.timestamp

    values = [
        len(sections),
        float(np.mean(entropies)) if entropies else 0.0,
        max(entropies, default=0.0),
        len(pe.imports),
        sum(len(d.imported_symbols) for d in pe.imports),
        pe.overlay.length / size if size else 0.0,
        float(np.log2(size)) if size else 0.0,
        float(pe.data_directory(DIRECTORY_SECURITY).size > 0),
        float(pe.data_directory(DIRECTORY_DEBUG).size > 0),
        float(pe.optional_header.checksum == 0),
        float(is_internally_packed(pe)),
        normalized_entropy(pe.section_data(entry_section)) if entry_section is not None else 0.0,
        float(np.clip((timestamp - TIMESTAMP_FLOOR) / (TIMESTAMP_CEILING - TIMESTAMP_FLOOR), 0.0, 1.0)),
        sum(bool(s.characteristics & SCN_MEM_EXECUTE) for s in sections),
        sum(bool(s.characteristics & SCN_MEM_WRITE) for s in sections),
        float(np.mean([_printability(s.label) for s in sections])) if sections else 0.0,
    ]
    return np.asarray(values, dtype=np.float64)


def extract_features(sample: Union[PeBinary, bytes]) -> np.ndarray:
    """Feature vector for a parsed image or raw bytes.

    Bytes that do not parse as PE keep their histogram and get an all-zero
    structural block.
    """
    pe: Optional[PeBinary]
    if isinstance(sample, PeBinary):
        pe = sample
        data = pe.raw
    else:
        data = bytes(sample)
        try:
            pe = parse_pe(data)
        except PeFormatError:
            pe = None

    structural = structural_features(pe) if pe is not None else np.zeros(len(STRUCTURAL_FEATURES))
    return np.concatenate([byte_histogram(data), structural])


def feature_matrix(samples) -> np.ndarray:
    """Stack ``extract_features`` over an iterable of samples."""
    rows = [extract_features(s) for s in samples]
    if not rows:
        return np.zeros((0, FEATURE_DIM))
    return np.vstack(rows)
