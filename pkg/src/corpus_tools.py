"""Synthetic corpus generation and ingestion.

Malicious-proxy files are benign by construction: a valid PE image with a
category-shaped layout and a planted byte marker, never any real payload.
Manifests are JSON lines, one entry per file, with paths relative to the
manifest's directory unless absolute.
"""

import hashlib
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.argument_parser import logger
from src.attack_env import Sample
from src.benign_pool import BenignPool, load_benign_pool
from src.detectors import BENIGN, MALICIOUS, PLANTED_MARKER
from src.errors import IoFailure, PeFormatError
from src.mutation_actions import TIMESTAMP_HIGH, TIMESTAMP_LOW
from src.pe_model import (
    CODE_CHARACTERISTICS,
    DATA_CHARACTERISTICS,
    RDATA_CHARACTERISTICS,
    BuiltPe,
    ImportDescriptor,
    PeBuildPlan,
    SectionPlan,
    build_pe,
    parse_pe,
)

MALICIOUS_CATEGORIES: Tuple[str, ...] = ("botnet", "ransomware", "rootkit", "spyware", "virus")
BENIGN_CATEGORY = "benign"
CATEGORIES: Tuple[str, ...] = MALICIOUS_CATEGORIES + (BENIGN_CATEGORY,)

LABEL_MALICIOUS = "malicious-proxy"
LABEL_BENIGN = "benign"
LABELS = (LABEL_MALICIOUS, LABEL_BENIGN)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_COLUMNS = ["path", "sha256", "label", "category", "seed"]

# 20 desk-scale malicious-proxy files per category plus 100 benign ones
DEFAULT_COUNTS: Dict[str, int] = {**{c: 20 for c in MALICIOUS_CATEGORIES}, BENIGN_CATEGORY: 100}

STANDARD_SECTION_NAMES = (b".text", b".rdata", b".data", b".rsrc", b".reloc")

# common one-byte x86 opcodes; code-like sections draw from these
CODE_ALPHABET = np.frombuffer(
    bytes([0x55, 0x89, 0xE5, 0x8B, 0x45, 0x08, 0x83, 0xEC, 0xC3, 0x90, 0xE8, 0x50, 0x51, 0x5D, 0x31, 0xC0,
           0x74, 0x75, 0xFF, 0x00, 0x48, 0x4C, 0x8D, 0x0F, 0x85, 0x84, 0xCC, 0x6A, 0x68, 0x24, 0x44, 0xEB]),
    dtype=np.uint8,
)


@dataclass(frozen=True)
class CategoryProfile:
    """Layout shape of one category.

    ``kinds`` lists the content kind of each section in order (``code``,
    ``text``, ``high``, ``low``); ``extra_kinds`` are drawn for sections beyond
    ``len(kinds)`` up to ``sections[1]``.
    """

    sections: Tuple[int, int]
    kinds: Tuple[str, ...]
    import_symbols: Tuple[int, int]
    size_scale: float = 1.0
    extra_kinds: Tuple[str, ...] = ("code", "text", "high")


PROFILES: Dict[str, CategoryProfile] = {
    "botnet": CategoryProfile((3, 5), ("code", "text", "high"), (5, 8)),
    "ransomware": CategoryProfile((2, 2), ("code", "high"), (3, 5), size_scale=2.0),
    "rootkit": CategoryProfile((2, 3), ("code", "text"), (10, 14), extra_kinds=("low",)),
    "spyware": CategoryProfile((3, 4), ("text", "text", "code"), (14, 18), extra_kinds=("text",)),
    "virus": CategoryProfile((1, 1), ("low",), (1, 2), size_scale=0.25),
    "benign": CategoryProfile((2, 5), ("text", "text"), (3, 8), extra_kinds=("text", "code")),
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic generator.

    Attributes:
        section_size: byte range each section's size is drawn from, before the category scale
        signature_probability: chance of a certificate table
        debug_probability: chance of a debug directory
        overlay_probability: chance of an overlay
        pe32_plus_probability: chance of a PE32+ image
        checksum_probability: chance the header checksum is set rather than zero
        marker: bytes planted in malicious-proxy files
        marker_repeats: consecutive copies of ``marker`` planted
        seed: base seed; file ``i`` of a corpus uses ``seed * 100003 + i``
    """

    section_size: Tuple[int, int] = (1024, 6144)
    signature_probability: float = 0.3
    debug_probability: float = 0.5
    overlay_probability: float = 0.2
    pe32_plus_probability: float = 0.25
    checksum_probability: float = 0.8
    marker: bytes = PLANTED_MARKER
    marker_repeats: int = 8
    seed: int = 0
    profiles: Dict[str, CategoryProfile] = field(default_factory=lambda: dict(PROFILES))

    def __post_init__(self) -> None:
        low, high = self.section_size
        if not 0 < low <= high:
            raise ValueError(f"section size range {self.section_size} is empty")
        for name in ("signature", "debug", "overlay", "pe32_plus", "checksum"):
            p = getattr(self, f"{name}_probability")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}_probability must lie in [0, 1], got {p}")
        for category, profile in self.profiles.items():
            if not 1 <= profile.sections[0] <= profile.sections[1]:
                raise ValueError(f"section count range of {category} is empty")

    def file_seed(self, index: int) -> int:
        return self.seed * 100003 + index


def _pool_slice(pool: BenignPool, size: int, rng: np.random.Generator) -> bytes:
    data = pool.pool_bytes
    out = bytearray()
    while len(out) < size:
        start = int(rng.integers(0, len(data)))
        out += data[start:start + size - len(out)]
    return bytes(out)


def section_content(kind: str, size: int, rng: np.random.Generator, pool: BenignPool) -> bytes:
    if kind == "high":
        return rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()
    if kind == "code":
        return rng.choice(CODE_ALPHABET, size=size).tobytes()
    if kind == "text":
        return _pool_slice(pool, size, rng)
    if kind == "low":
        # mostly padding with a sprinkle of opcodes
        out = np.zeros(size, dtype=np.uint8)
        mask = rng.random(size) < 0.1
        out[mask] = rng.choice(CODE_ALPHABET[:8], size=int(mask.sum()))
        return out.tobytes()
    raise ValueError(f"unknown section kind {kind!r}")


_KIND_CHARACTERISTICS = {
    "code": CODE_CHARACTERISTICS,
    "text": RDATA_CHARACTERISTICS,
    "high": DATA_CHARACTERISTICS,
    "low": CODE_CHARACTERISTICS,
}


def _imports(pool: BenignPool, count: int, rng: np.random.Generator) -> Tuple[ImportDescriptor, ...]:
    picks = rng.choice(len(pool.imports), size=min(count, len(pool.imports)), replace=False)
    by_dll: Dict[bytes, List[bytes]] = {}
    for index in sorted(int(i) for i in picks):
        dll, symbol = pool.imports[index]
        by_dll.setdefault(dll, []).append(symbol)
    return tuple(ImportDescriptor(dll, tuple(symbols)) for dll, symbols in by_dll.items())


def generate_pe(config: GeneratorConfig, category: str, seed: int) -> BuiltPe:
    """A structurally valid image shaped by ``category``; same arguments, same bytes."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {', '.join(CATEGORIES)}")
    profile = config.profiles[category]
    pool = load_benign_pool()
    rng = np.random.default_rng((seed, CATEGORIES.index(category)))
    malicious = category != BENIGN_CATEGORY

    count = int(rng.integers(profile.sections[0], profile.sections[1] + 1))
    kinds = list(profile.kinds[:count])
    while len(kinds) < count:
        kinds.append(str(rng.choice(profile.extra_kinds)))

    low, high = config.section_size
    sections = []
    for index, kind in enumerate(kinds):
        size = max(64, int(int(rng.integers(low, high + 1)) * profile.size_scale))
        if malicious:
            name = STANDARD_SECTION_NAMES[index % len(STANDARD_SECTION_NAMES)]
        else:
            name = pool.section_names[int(rng.integers(len(pool.section_names)))]
        sections.append(SectionPlan(name, section_content(kind, size, rng, pool), _KIND_CHARACTERISTICS[kind]))

    if malicious:
        planted = config.marker * config.marker_repeats
        target = sections[0]
        data = bytearray(target.data)
        if len(data) < len(planted):
            data.extend(bytes(len(planted) - len(data)))
        at = int(rng.integers(0, len(data) - len(planted) + 1))
        data[at:at + len(planted)] = planted
        sections[0] = SectionPlan(target.name, bytes(data), target.characteristics)

    symbols = int(rng.integers(profile.import_symbols[0], profile.import_symbols[1] + 1))
    plan = PeBuildPlan(
        sections=tuple(sections),
        pe32_plus=bool(rng.random() < config.pe32_plus_probability),
        timestamp=int(rng.integers(TIMESTAMP_LOW, TIMESTAMP_HIGH)),
        imports=_imports(pool, symbols, rng),
        debug_pdb_path=(
            f"C:\\build\\{category}_{seed}.pdb".encode() if rng.random() < config.debug_probability else None
        ),
        certificate=(
            rng.integers(0, 256, size=int(rng.integers(64, 257)), dtype=np.uint8).tobytes()
            if rng.random() < config.signature_probability else None
        ),
        overlay=(
            _pool_slice(pool, int(rng.integers(64, 1025)), rng) if rng.random() < config.overlay_probability else b""
        ),
        entry_offset=int(rng.integers(0, 16)),
        set_checksum=bool(rng.random() < config.checksum_probability),
    )
    return build_pe(plan)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

class ManifestEntry(NamedTuple):
    path: str
    sha256: str
    label: str
    category: str
    seed: int


@dataclass(frozen=True)
class CorpusManifest:
    root: Path
    entries: Tuple[ManifestEntry, ...] = ()
    skipped: Tuple[str, ...] = ()

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        return path if path.is_absolute() else self.root / path

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for entry in self.entries:
            out[entry.category] = out.get(entry.category, 0) + 1
        return out

    def digests(self) -> set:
        return {entry.sha256 for entry in self.entries}

    def __len__(self) -> int:
        return len(self.entries)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_manifest(manifest: CorpusManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    frame = pd.DataFrame([e._asdict() for e in manifest.entries], columns=MANIFEST_COLUMNS)
    text = frame.to_json(orient="records", lines=True).rstrip("\n") + "\n" if len(frame) else ""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            handle.write(text)
    except OSError as e:
        raise IoFailure(f"Cannot write manifest {path}: {e}") from e
    return path


def load_manifest(path: Union[str, Path]) -> CorpusManifest:
    """Read a manifest; relative entry paths resolve against its directory.

    Raises:
        IoFailure: the manifest cannot be read or has unknown categories or labels
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text()
    except OSError as e:
        raise IoFailure(f"Cannot read manifest {path}: {e}") from e
    if not text.strip():
        return CorpusManifest(path.parent)
    frame = pd.read_json(io.StringIO(text), orient="records", lines=True, dtype=False, convert_dates=False)
    missing = set(MANIFEST_COLUMNS) - set(frame.columns)
    if missing:
        raise IoFailure(f"Manifest {path} lacks columns {sorted(missing)}")
    entries = tuple(
        ManifestEntry(str(r["path"]), str(r["sha256"]), str(r["label"]), str(r["category"]), int(r["seed"]))
        for r in frame.to_dict(orient="records")
    )
    bad = [e.path for e in entries if e.category not in CATEGORIES or e.label not in LABELS]
    if bad:
        raise IoFailure(f"Manifest {path} has entries with unknown category or label: {bad[:5]}")
    return CorpusManifest(path.parent, entries)


def verify_manifest(manifest: CorpusManifest) -> List[ManifestEntry]:
    """Entries whose file is missing or whose digest no longer matches."""
    mismatched = []
    for entry in manifest.entries:
        try:
            actual = sha256_hex(manifest.resolve(entry).read_bytes())
        except OSError:
            mismatched.append(entry)
            continue
        if actual != entry.sha256:
            mismatched.append(entry)
    return mismatched


def _generate_one(job: Tuple[str, int], config: GeneratorConfig) -> bytes:
    category, seed = job
    return generate_pe(config, category, seed).data


def build_corpus(
    config: GeneratorConfig,
    counts: Mapping[str, int],
    out_dir: Union[str, Path],
    jobs: int = 1,
) -> CorpusManifest:
    """Generate ``counts[category]`` files per category under ``out_dir`` and write the manifest.

    Raises:
        IoFailure: a file cannot be written or reads back with a different digest
    """
    out_dir = Path(out_dir)
    for category, count in counts.items():
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        if count < 0:
            raise ValueError(f"negative count for {category}")

    plan: List[Tuple[str, str, int]] = []
    for category in CATEGORIES:
        for i in range(counts.get(category, 0)):
            plan.append((f"{category}_{i:04d}.bin", category, config.file_seed(len(plan))))

    jobs_list = [(category, seed) for _, category, seed in plan]
    worker = partial(_generate_one, config=config)
    if jobs > 1 and len(plan) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            images = list(pool.map(worker, jobs_list))
    else:
        images = [worker(job) for job in jobs_list]

    entries = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for (name, category, seed), data in zip(plan, images):
            target = out_dir / name
            target.write_bytes(data)
            digest = sha256_hex(data)
            if sha256_hex(target.read_bytes()) != digest:
                raise IoFailure(f"{target} reads back with a different digest")
            label = LABEL_BENIGN if category == BENIGN_CATEGORY else LABEL_MALICIOUS
            entries.append(ManifestEntry(name, digest, label, category, seed))
    except OSError as e:
        raise IoFailure(f"Cannot write corpus under {out_dir}: {e}") from e

    manifest = CorpusManifest(out_dir, tuple(entries))
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(f"Generated {len(entries)} files under {out_dir}: {manifest.counts()}")
    return manifest


def ingest_directory(
    path: Union[str, Path],
    label: str,
    category: str,
    existing: Optional[CorpusManifest] = None,
) -> CorpusManifest:
    """Add every parseable PE file directly under ``path``.

    Files already present by digest (in ``existing`` or earlier in this
    directory) are not added twice; unparseable files go to ``skipped``.

    Raises:
        IoFailure: ``path`` is not a readable directory
    """
    root = Path(path)
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}; expected one of {', '.join(LABELS)}")
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {', '.join(CATEGORIES)}")
    if not root.is_dir():
        raise IoFailure(f"{root} is not a directory")

    base = existing if existing is not None else CorpusManifest(root)
    seen = base.digests()
    entries = list(base.entries)
    skipped = list(base.skipped)
    try:
        files = sorted(p for p in root.iterdir() if p.is_file() and p.name != MANIFEST_NAME)
        for file in files:
            data = file.read_bytes()
            try:
                parse_pe(data)
            except PeFormatError as e:
                logger.debug(f"Skipping {file}: {e}")
                skipped.append(str(file))
                continue
            digest = sha256_hex(data)
            if digest in seen:
                continue
            seen.add(digest)
            relative = file.relative_to(base.root) if file.is_relative_to(base.root) else file.resolve()
            entries.append(ManifestEntry(str(relative), digest, label, category, 0))
    except OSError as e:
        raise IoFailure(f"Cannot read {root}: {e}") from e
    logger.info(f"Ingested {len(entries) - len(base.entries)} files from {root}, skipped {len(skipped)}")
    return CorpusManifest(base.root, tuple(entries), tuple(dict.fromkeys(skipped)))


def load_samples(manifest: CorpusManifest, label: Optional[str] = None) -> List[Sample]:
    """Samples in manifest order, optionally only those with ``label``.

    Raises:
        IoFailure: a listed file cannot be read
    """
    samples = []
    for entry in manifest.entries:
        if label is not None and entry.label != label:
            continue
        try:
            data = manifest.resolve(entry).read_bytes()
        except OSError as e:
            raise IoFailure(f"Cannot read corpus file {entry.path}: {e}") from e
        samples.append(Sample(
            Path(entry.path).stem, data, entry.category, MALICIOUS if entry.label == LABEL_MALICIOUS else BENIGN
        ))
    return samples


def labeled_corpus(samples: Sequence[Sample]) -> List[Tuple[bytes, int]]:
    return [(s.data, s.label) for s in samples]
