import re
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from src import packer, xor_stub
from src.argument_parser import logger, packer_command
from src.benign_pool import BenignPool, load_benign_pool
from src.errors import ActionInapplicable, UnknownAction
from src.pe_model import (
    DIRECTORY_DEBUG,
    DIRECTORY_SECURITY,
    RDATA_CHARACTERISTICS,
    DataDirectory,
    ImportDescriptor,
    PeBinary,
    add_section,
    parse_pe,
    serialize_pe,
    with_checksum,
    with_data_directory,
    with_imports,
    with_section_name,
    with_timestamp,
)

# 2000-01-01 .. 2020-01-01 (exclusive), epoch seconds
TIMESTAMP_LOW = 946684800
TIMESTAMP_HIGH = 1577836800


class MutationAction(IntEnum):
    """The twelve actions. Values are the agent's output indices and never change."""

    OVERLAY_APPEND = 0
    IMPORTS_APPEND = 1
    SECTION_RENAME = 2
    REMOVE_SIGNATURE = 3
    REMOVE_DEBUG = 4
    SECTION_APPEND = 5
    BREAK_CHECKSUM = 6
    CHANGE_TIMESTAMP = 7
    UPX_PACK = 8
    XOR_EL1 = 9
    XOR_EL2 = 10
    XOR_EL3 = 11

    @property
    def variant(self) -> str:
        """CamelCase name, e.g. ``OverlayAppend`` or ``XorEL2``."""
        return _VARIANTS[self]

    @property
    def label(self) -> str:
        return _LABELS[self]


_VARIANTS: Dict[MutationAction, str] = {
    MutationAction.OVERLAY_APPEND: "OverlayAppend",
    MutationAction.IMPORTS_APPEND: "ImportsAppend",
    MutationAction.SECTION_RENAME: "SectionRename",
    MutationAction.REMOVE_SIGNATURE: "RemoveSignature",
    MutationAction.REMOVE_DEBUG: "RemoveDebug",
    MutationAction.SECTION_APPEND: "SectionAppend",
    MutationAction.BREAK_CHECKSUM: "BreakChecksum",
    MutationAction.CHANGE_TIMESTAMP: "ChangeTimestamp",
    MutationAction.UPX_PACK: "UpxPack",
    MutationAction.XOR_EL1: "XorEL1",
    MutationAction.XOR_EL2: "XorEL2",
    MutationAction.XOR_EL3: "XorEL3",
}

_LABELS: Dict[MutationAction, str] = {
    MutationAction.OVERLAY_APPEND: "Overlay Append",
    MutationAction.IMPORTS_APPEND: "Imports Append",
    MutationAction.SECTION_RENAME: "Section Rename",
    MutationAction.REMOVE_SIGNATURE: "Remove Signature",
    MutationAction.REMOVE_DEBUG: "Remove Debug",
    MutationAction.SECTION_APPEND: "Section Append",
    MutationAction.BREAK_CHECKSUM: "Break Checksum",
    MutationAction.CHANGE_TIMESTAMP: "Change Timestamp",
    MutationAction.UPX_PACK: "UPX Pack",
    MutationAction.XOR_EL1: "XOR EL1",
    MutationAction.XOR_EL2: "XOR EL2",
    MutationAction.XOR_EL3: "XOR EL3",
}

ACTION_COUNT = len(MutationAction)
XOR_ACTIONS: Tuple[MutationAction, ...] = (
    MutationAction.XOR_EL1,
    MutationAction.XOR_EL2,
    MutationAction.XOR_EL3,
)
OBFUSCATION_ACTIONS: Tuple[MutationAction, ...] = XOR_ACTIONS + (MutationAction.UPX_PACK,)
NON_OBFUSCATION_ACTIONS: Tuple[MutationAction, ...] = tuple(a for a in MutationAction if a not in XOR_ACTIONS)
ALL_ACTIONS: Tuple[MutationAction, ...] = tuple(MutationAction)


def _normalize(name: str) -> str:
    return re.sub(r"[\s_\-]", "", name).lower()


_BY_NAME: Dict[str, MutationAction] = {}
for _action in MutationAction:
    for _alias in (_action.name, _action.variant, _action.label):
        _BY_NAME[_normalize(_alias)] = _action
# sequence-mining tables use "Change TDS" for the timestamp edit
_BY_NAME[_normalize("Change TDS")] = MutationAction.CHANGE_TIMESTAMP


def action_from_name(name: str) -> MutationAction:
    """Resolve ``OverlayAppend``, ``overlay_append`` or ``Overlay Append``.

    Raises:
        UnknownAction: the name matches no action
    """
    try:
        return _BY_NAME[_normalize(name)]
    except KeyError:
        raise UnknownAction(f"unknown action {name!r}") from None


def randomness_source(seed: int) -> np.random.Generator:
    """Seeded generator every action draws from."""
    return np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class ActionConfig:
    """Draw ranges and external tools for the actions.

    ``forced_overlay_length`` and ``forced_xor_keys`` are test hooks that
    replace the corresponding random draws.
    """

    overlay_min: int = 128
    overlay_max: int = 4096
    section_min: int = 512
    section_max: int = 4096
    timestamp_low: int = TIMESTAMP_LOW
    timestamp_high: int = TIMESTAMP_HIGH
    packer_command: Optional[str] = None
    packer_timeout: float = 120.0
    forced_overlay_length: Optional[int] = None
    forced_xor_keys: Optional[Tuple[bytes, ...]] = None

    @classmethod
    def from_environment(cls, **overrides) -> "ActionConfig":
        return cls(packer_command=packer_command(), **overrides)

    def pool(self) -> BenignPool:
        return load_benign_pool()


def _pool_slice(pool: BenignPool, length: int, rng: np.random.Generator) -> bytes:
    data = pool.pool_bytes
    if length <= len(data):
        start = int(rng.integers(0, len(data) - length + 1))
        return data[start:start + length]
    return (data * (length // len(data) + 1))[:length]


def overlay_append(pe: PeBinary, rng: np.random.Generator, config: ActionConfig = ActionConfig()) -> PeBinary:
    if config.forced_overlay_length is not None:
        length = config.forced_overlay_length
    else:
        length = int(rng.integers(config.overlay_min, config.overlay_max + 1))
    if length == 0:
        return pe
    return parse_pe(serialize_pe(pe) + _pool_slice(config.pool(), length, rng))


def imports_append(pe: PeBinary, rng: np.random.Generator, config: ActionConfig = ActionConfig()) -> PeBinary:
    imports = config.pool().imports
    dll, symbol = imports[int(rng.integers(len(imports)))]
    return with_imports(pe, pe.imports + (ImportDescriptor(dll, (symbol,)),))


def section_rename(pe: PeBinary, rng: np.random.Generator, config: ActionConfig = ActionConfig()) -> PeBinary:
    if not pe.sections:
        raise ActionInapplicable("no sections to rename")
    index = int(rng.integers(len(pe.sections)))
    names = config.pool().section_names
    return with_section_name(pe, index, names[int(rng.integers(len(names)))])


def _unlink_directory(pe: PeBinary, index: int) -> PeBinary:
    if index >= min(pe.optional_header.number_of_rva_and_sizes, 16):
        return pe
    if pe.data_directory(index) == DataDirectory(0, 0):
        return pe
    return with_data_directory(pe, index, DataDirectory(0, 0))


def remove_signature(pe: PeBinary) -> PeBinary:
    """Zero the security directory; certificate bytes stay in the overlay."""
    return _unlink_directory(pe, DIRECTORY_SECURITY)


def remove_debug(pe: PeBinary) -> PeBinary:
    return _unlink_directory(pe, DIRECTORY_DEBUG)


def section_append(pe: PeBinary, rng: np.random.Generator, config: ActionConfig = ActionConfig()) -> PeBinary:
    pool = config.pool()
    length = int(rng.integers(config.section_min, config.section_max + 1))
    data = _pool_slice(pool, length, rng)
    name = pool.section_names[int(rng.integers(len(pool.section_names)))]
    return add_section(pe, name, data, RDATA_CHARACTERISTICS)


def break_checksum(pe: PeBinary) -> PeBinary:
    if pe.optional_header.checksum == 0:
        return pe
    return with_checksum(pe, 0)


def change_timestamp(pe: PeBinary, rng: np.random.Generator, config: ActionConfig = ActionConfig()) -> PeBinary:
    return with_timestamp(pe, int(rng.integers(config.timestamp_low, config.timestamp_high)))


def upx_pack(pe: PeBinary, config: ActionConfig = ActionConfig()) -> PeBinary:
    return packer.upx_pack(pe, config.packer_command, config.packer_timeout)


def xor_obfuscate(
    pe: PeBinary, loops: int, rng: np.random.Generator, config: ActionConfig = ActionConfig()
) -> PeBinary:
    keys: Optional[Sequence[bytes]] = None
    if config.forced_xor_keys is not None:
        keys = config.forced_xor_keys[:loops]
    return xor_stub.xor_obfuscate(pe, loops, rng, keys=keys)


ActionFn = Callable[[PeBinary, np.random.Generator, ActionConfig], PeBinary]

_DISPATCH: Dict[MutationAction, ActionFn] = {
    MutationAction.OVERLAY_APPEND: overlay_append,
    MutationAction.IMPORTS_APPEND: imports_append,
    MutationAction.SECTION_RENAME: section_rename,
    MutationAction.REMOVE_SIGNATURE: lambda pe, rng, config: remove_signature(pe),
    MutationAction.REMOVE_DEBUG: lambda pe, rng, config: remove_debug(pe),
    MutationAction.SECTION_APPEND: section_append,
    MutationAction.BREAK_CHECKSUM: lambda pe, rng, config: break_checksum(pe),
    MutationAction.CHANGE_TIMESTAMP: change_timestamp,
    MutationAction.UPX_PACK: lambda pe, rng, config: upx_pack(pe, config),
    MutationAction.XOR_EL1: lambda pe, rng, config: xor_obfuscate(pe, 1, rng, config),
    MutationAction.XOR_EL2: lambda pe, rng, config: xor_obfuscate(pe, 2, rng, config),
    MutationAction.XOR_EL3: lambda pe, rng, config: xor_obfuscate(pe, 3, rng, config),
}


def apply_action(
    pe: PeBinary,
    action: MutationAction,
    rng: np.random.Generator,
    config: Optional[ActionConfig] = None,
) -> PeBinary:
    """Apply one of the twelve actions and return the new image.

    Raises:
        ActionInapplicable: the action has nothing to act on (e.g. no sections)
        AlreadyPacked: internal packing of an already packed image
        PackerFailed: the external packer failed
        LayoutConflict: the edit cannot be laid out
    """
    action = MutationAction(action)
    result = _DISPATCH[action](pe, rng, config or ActionConfig())
    logger.debug(f"Applied {action.variant}: {len(pe.raw)} -> {len(result.raw)} bytes")
    return result
