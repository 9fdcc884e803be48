"""Shared fixtures: small hand-planned images, a generated corpus and toy detectors."""

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List

import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.attack_env import Sample  # noqa: E402
from src.corpus_tools import (  # noqa: E402
    CATEGORIES,
    DEFAULT_COUNTS,
    GeneratorConfig,
    build_corpus,
    generate_pe,
    load_samples,
)
from src.detectors import MALICIOUS, DetectorVerdict, verdict_for  # noqa: E402
from src.errors import NotAStub  # noqa: E402
from src.pe_model import (  # noqa: E402
    CODE_CHARACTERISTICS,
    DATA_CHARACTERISTICS,
    BuiltPe,
    ImportDescriptor,
    PeBuildPlan,
    SectionPlan,
    build_pe,
)
from src.xor_stub import read_stub_layout  # noqa: E402

TEXT = SectionPlan(b".text", bytes(range(256)) * 4, CODE_CHARACTERISTICS)
DATA = SectionPlan(b".data", b"benign data " * 100, DATA_CHARACTERISTICS)
KERNEL32 = ImportDescriptor(b"kernel32.dll", (b"GetTickCount", b"Sleep"))
USER32 = ImportDescriptor(b"user32.dll", (b"MessageBoxW",))


def plan(**overrides) -> PeBuildPlan:
    """A two-section PE32 plan with imports; keyword arguments override fields."""
    fields = dict(
        sections=(TEXT, DATA),
        timestamp=1_234_567_890,
        imports=(KERNEL32, USER32),
    )
    fields.update(overrides)
    return PeBuildPlan(**fields)


@pytest.fixture
def full_pe() -> BuiltPe:
    """Imports, debug directory, certificate and overlay."""
    return build_pe(plan(debug_pdb_path=b"C:\\build\\sample.pdb", certificate=b"\x30\x82" + bytes(62), overlay=b"tail" * 16))


@pytest.fixture
def plain_pe() -> BuiltPe:
    """Sections only: no imports, no directories, no overlay."""
    return build_pe(plan(imports=()))


@pytest.fixture
def pe32_plus() -> BuiltPe:
    return build_pe(plan(pe32_plus=True, debug_pdb_path=b"x64.pdb"))


@pytest.fixture(scope="session")
def generated_files():
    """Two generated files per category, as raw bytes."""
    config = GeneratorConfig(seed=7)
    return [generate_pe(config, category, seed).data for category in CATEGORIES for seed in (1, 2)]


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory) -> List[Sample]:
    """The default 200-file generated corpus: 20 per malicious category plus 100 benign."""
    manifest = build_corpus(GeneratorConfig(seed=11), DEFAULT_COUNTS, tmp_path_factory.mktemp("desk"))
    return load_samples(manifest)


@pytest.fixture(scope="session")
def desk_malicious(desk_corpus) -> List[Sample]:
    return [s for s in desk_corpus if s.label == MALICIOUS]


@dataclass(frozen=True)
class PredicateDetector:
    """Toy detector: malicious exactly when ``predicate(data)`` holds."""

    predicate: Callable[[bytes], bool]
    detector_id: str = "predicate"

    def score(self, data: bytes) -> DetectorVerdict:
        return verdict_for(1.0 if self.predicate(data) else 0.0, 0.5)


def always_malicious(data: bytes) -> bool:
    return True


@pytest.fixture
def flag_everything() -> PredicateDetector:
    return PredicateDetector(always_malicious, "flag-everything")


def not_a_double_xor_carrier(data: bytes) -> bool:
    """Flags everything except a carrier whose outermost layer has exactly two XOR loops."""
    try:
        return read_stub_layout(data).loop_count != 2
    except NotAStub:
        return True
