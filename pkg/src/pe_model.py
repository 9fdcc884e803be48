"""Parsed, rewritable model of a Portable Executable.

A ``PeBinary`` always carries the raw bytes it was parsed from, and every edit
produces a new value: header-level edits are patched in place by
``serialize_pe``; structures that grow (sections, the import directory) are
placed in a freshly appended section and the relevant data-directory entry is
re-pointed, so no existing RVA ever moves. Section data is never shifted; the
overlay (and a certificate table living in it) is the only thing that moves
when a section is appended.

Parsing is strict about reads: any structure that would need bytes outside the
input raises ``OutOfBounds`` and a bad magic/signature raises
``MalformedHeader``. Everything else that is merely suspicious (overlapping
sections, dangling entry point, ...) is a finding for ``validate_structure``.

See docs/DESIGN_DECISIONS.md for the overlay and relocation rules.
"""

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.argument_parser import logger
from src.errors import LayoutConflict, MalformedHeader, OutOfBounds

DOS_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\x00\x00"
PE32_MAGIC = 0x10B
PE32_PLUS_MAGIC = 0x20B

MACHINE_I386 = 0x14C
MACHINE_AMD64 = 0x8664

COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40
NUM_DATA_DIRECTORIES = 16
IMPORT_DESCRIPTOR_SIZE = 20
DEBUG_DIRECTORY_SIZE = 28

DIRECTORY_IMPORT = 1
DIRECTORY_SECURITY = 4
DIRECTORY_DEBUG = 6

# Optional-header field offsets shared by PE32 and PE32+.
OPT_ENTRY_POINT = 16
OPT_SECTION_ALIGNMENT = 32
OPT_FILE_ALIGNMENT = 36
OPT_SIZE_OF_IMAGE = 56
OPT_SIZE_OF_HEADERS = 60
OPT_CHECKSUM = 64
OPT_SUBSYSTEM = 68

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

CODE_CHARACTERISTICS = SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ
RDATA_CHARACTERISTICS = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ
DATA_CHARACTERISTICS = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE

DEFAULT_FILE_ALIGNMENT = 0x200
DEFAULT_SECTION_ALIGNMENT = 0x1000
DEFAULT_SIZE_OF_HEADERS = 0x400
DEFAULT_PE_OFFSET = 0x80

MAX_IMPORT_DESCRIPTORS = 1024
MAX_THUNKS_PER_DESCRIPTOR = 8192
MAX_NAME_LENGTH = 512

RELOCATED_IMPORT_SECTION = b".idata2"

DOS_STUB = (
    b"\x0e\x1f\xba\x0e\x00\xb4\x09\xcd\x21\xb8\x01\x4c\xcd\x21"
    b"This program cannot be run in DOS mode.\r\r\n$"
).ljust(64, b"\x00")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class DataDirectory(NamedTuple):
    rva: int
    size: int


@dataclass(frozen=True)
class DosHeader:
    magic: bytes
    pe_offset: int


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    section_count: int
    timestamp: int
    pointer_to_symbol_table: int
    number_of_symbols: int
    optional_header_size: int
    characteristics: int


@dataclass(frozen=True)
class OptionalHeader:
    magic: int
    entry_point_rva: int
    image_base: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    subsystem: int
    number_of_rva_and_sizes: int
    data_directories: Tuple[DataDirectory, ...]

    @property
    def is_pe32_plus(self) -> bool:
        return self.magic == PE32_PLUS_MAGIC

    @property
    def data_directories_offset(self) -> int:
        return 112 if self.is_pe32_plus else 96


@dataclass(frozen=True)
class SectionEntry:
    """One section-table row. ``name`` is the raw name field, NUL padding included."""

    name: bytes
    virtual_size: int
    virtual_rva: int
    raw_size: int
    raw_offset: int
    characteristics: int

    @property
    def label(self) -> bytes:
        return self.name.rstrip(b"\x00")

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size

    @property
    def virtual_extent(self) -> int:
        return max(self.virtual_size, self.raw_size)

    def contains_rva(self, rva: int) -> bool:
        return self.virtual_rva <= rva < self.virtual_rva + self.virtual_extent


@dataclass(frozen=True)
class ImportDescriptor:
    """One imported DLL. ``iat_rva`` is 0 for descriptors that do not exist on disk yet."""

    dll_name: bytes
    imported_symbols: Tuple[bytes, ...]
    iat_rva: int = 0

    def same_entry(self, other: "ImportDescriptor") -> bool:
        return self.dll_name == other.dll_name and self.imported_symbols == other.imported_symbols


class OverlaySpan(NamedTuple):
    offset: int
    length: int


@dataclass(frozen=True)
class PeBinary:
    raw: bytes = field(repr=False)
    dos_header: DosHeader
    coff_header: CoffHeader
    optional_header: OptionalHeader
    sections: Tuple[SectionEntry, ...]
    overlay: OverlaySpan
    imports: Tuple[ImportDescriptor, ...]

    @property
    def coff_offset(self) -> int:
        return self.dos_header.pe_offset + 4

    @property
    def optional_header_offset(self) -> int:
        return self.coff_offset + COFF_HEADER_SIZE

    @property
    def section_table_offset(self) -> int:
        return self.optional_header_offset + self.coff_header.optional_header_size

    @property
    def section_table_end(self) -> int:
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.sections)

    @property
    def checksum_offset(self) -> int:
        return self.optional_header_offset + OPT_CHECKSUM

    @property
    def is_pe32_plus(self) -> bool:
        return self.optional_header.is_pe32_plus

    def data_directory(self, index: int) -> DataDirectory:
        return self.optional_header.data_directories[index]

    def section_named(self, name: bytes) -> Optional[SectionEntry]:
        for section in self.sections:
            if section.label == name:
                return section
        return None

    def section_data(self, section: SectionEntry) -> bytes:
        return self.raw[section.raw_offset:section.raw_end]

    def section_for_rva(self, rva: int) -> Optional[SectionEntry]:
        for section in self.sections:
            if section.contains_rva(rva):
                return section
        return None

    def overlay_bytes(self) -> bytes:
        return self.raw[self.overlay.offset:]

    def __len__(self) -> int:
        return len(self.raw)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _read(fmt: str, data: bytes, offset: int, what: str) -> Tuple[int, ...]:
    size = struct.calcsize(fmt)
    if offset < 0 or offset + size > len(data):
        raise OutOfBounds(f"{what} at offset {offset:#x} (+{size}) exceeds file of {len(data)} bytes")
    return struct.unpack_from(fmt, data, offset)


def _read_cstring(data: bytes, offset: int, what: str) -> bytes:
    if offset < 0 or offset >= len(data):
        raise OutOfBounds(f"{what} at offset {offset:#x} outside file")
    end = data.find(b"\x00", offset, offset + MAX_NAME_LENGTH)
    if end < 0:
        raise OutOfBounds(f"{what} at offset {offset:#x} is not NUL-terminated")
    return data[offset:end]


def _rva_to_offset(
    rva: int, sections: Sequence[SectionEntry], size_of_headers: int
) -> Optional[int]:
    for section in sections:
        if section.contains_rva(rva):
            delta = rva - section.virtual_rva
            if delta >= section.raw_size:
                return None
            return section.raw_offset + delta
    if rva < size_of_headers:
        return rva
    return None


def rva_to_offset(pe: PeBinary, rva: int) -> Optional[int]:
    """File offset backing ``rva``, or None when the RVA has no file data."""
    return _rva_to_offset(rva, pe.sections, pe.optional_header.size_of_headers)


def _parse_imports(
    data: bytes,
    directory: DataDirectory,
    sections: Sequence[SectionEntry],
    size_of_headers: int,
    pe32_plus: bool,
) -> Tuple[ImportDescriptor, ...]:
    if directory.rva == 0 or directory.size == 0:
        return ()

    def offset_of(rva: int, what: str) -> int:
        off = _rva_to_offset(rva, sections, size_of_headers)
        if off is None:
            raise OutOfBounds(f"{what} RVA {rva:#x} is not backed by file data")
        return off

    thunk_fmt = "<Q" if pe32_plus else "<I"
    thunk_size = 8 if pe32_plus else 4
    ordinal_flag = 1 << 63 if pe32_plus else 1 << 31

    descriptors: List[ImportDescriptor] = []
    table = offset_of(directory.rva, "import directory")
    for index in range(MAX_IMPORT_DESCRIPTORS):
        original_first_thunk, _, _, name_rva, first_thunk = _read(
            "<IIIII", data, table + index * IMPORT_DESCRIPTOR_SIZE, "import descriptor"
        )
        if original_first_thunk == 0 and name_rva == 0 and first_thunk == 0:
            return tuple(descriptors)
        dll_name = _read_cstring(data, offset_of(name_rva, "import name"), "import name")

        thunk_rva = original_first_thunk or first_thunk
        thunk_off = offset_of(thunk_rva, "import lookup table")
        symbols: List[bytes] = []
        for n in range(MAX_THUNKS_PER_DESCRIPTOR):
            (value,) = _read(thunk_fmt, data, thunk_off + n * thunk_size, "import thunk")
            if value == 0:
                break
            if value & ordinal_flag:
                symbols.append(b"#%d" % (value & 0xFFFF))
            else:
                hint_off = offset_of(value & 0x7FFFFFFF, "hint/name entry")
                symbols.append(_read_cstring(data, hint_off + 2, "imported symbol"))
        else:
            raise OutOfBounds(f"import lookup table for {dll_name!r} is not terminated")
        descriptors.append(ImportDescriptor(dll_name, tuple(symbols), first_thunk))
    raise OutOfBounds("import directory is not terminated")


def parse_pe(data: bytes) -> PeBinary:
    """Parse ``data`` into a PeBinary, keeping the bytes verbatim.

    Raises:
        MalformedHeader: bad magic/signature, unknown optional-header magic or a
            header too small for its own fields
        OutOfBounds: any header, section or import structure extends past the file
    """
    data = bytes(data)
    if not data:
        raise MalformedHeader("empty input")
    if len(data) < 64:
        raise MalformedHeader(f"truncated DOS header ({len(data)} bytes)")
    if data[:2] != DOS_MAGIC:
        raise MalformedHeader(f"bad DOS magic {data[:2]!r}")

    (pe_offset,) = _read("<I", data, 0x3C, "e_lfanew")
    signature = data[pe_offset:pe_offset + 4]
    if len(signature) < 4:
        raise OutOfBounds(f"PE signature offset {pe_offset:#x} outside file")
    if signature != PE_SIGNATURE:
        raise MalformedHeader(f"bad PE signature {signature!r}")

    coff = CoffHeader(*_read("<HHIIIHH", data, pe_offset + 4, "COFF header"))
    opt_offset = pe_offset + 4 + COFF_HEADER_SIZE
    if opt_offset + coff.optional_header_size > len(data):
        raise OutOfBounds("optional header extends past end of file")

    (magic,) = _read("<H", data, opt_offset, "optional header magic")
    if magic not in (PE32_MAGIC, PE32_PLUS_MAGIC):
        raise MalformedHeader(f"unknown optional header magic {magic:#x}")
    pe32_plus = magic == PE32_PLUS_MAGIC
    dirs_offset = 112 if pe32_plus else 96
    if coff.optional_header_size < dirs_offset:
        raise MalformedHeader(f"optional header too small ({coff.optional_header_size} bytes)")

    (entry_point,) = _read("<I", data, opt_offset + OPT_ENTRY_POINT, "entry point")
    if pe32_plus:
        (image_base,) = _read("<Q", data, opt_offset + 24, "image base")
    else:
        (image_base,) = _read("<I", data, opt_offset + 28, "image base")
    section_alignment, file_alignment = _read("<II", data, opt_offset + OPT_SECTION_ALIGNMENT, "alignment")
    size_of_image, size_of_headers, checksum = _read("<III", data, opt_offset + OPT_SIZE_OF_IMAGE, "image sizes")
    (subsystem,) = _read("<H", data, opt_offset + OPT_SUBSYSTEM, "subsystem")
    (rva_count,) = _read("<I", data, opt_offset + dirs_offset - 4, "NumberOfRvaAndSizes")

    present = min(rva_count, NUM_DATA_DIRECTORIES)
    if dirs_offset + 8 * present > coff.optional_header_size:
        raise MalformedHeader(f"{present} data directories do not fit the optional header")
    directories = [
        DataDirectory(*_read("<II", data, opt_offset + dirs_offset + 8 * i, "data directory"))
        for i in range(present)
    ]
    directories += [DataDirectory(0, 0)] * (NUM_DATA_DIRECTORIES - present)

    optional = OptionalHeader(
        magic=magic,
        entry_point_rva=entry_point,
        image_base=image_base,
        section_alignment=section_alignment,
        file_alignment=file_alignment,
        size_of_image=size_of_image,
        size_of_headers=size_of_headers,
        checksum=checksum,
        subsystem=subsystem,
        number_of_rva_and_sizes=rva_count,
        data_directories=tuple(directories),
    )

    table_offset = opt_offset + coff.optional_header_size
    if table_offset + SECTION_HEADER_SIZE * coff.section_count > len(data):
        raise OutOfBounds(f"section table of {coff.section_count} entries extends past end of file")

    sections: List[SectionEntry] = []
    for i in range(coff.section_count):
        name, vsize, va, raw_size, raw_offset, _, _, _, _, characteristics = struct.unpack_from(
            "<8sIIIIIIHHI", data, table_offset + SECTION_HEADER_SIZE * i
        )
        if raw_size and raw_offset + raw_size > len(data):
            raise OutOfBounds(
                f"section {name.rstrip(bytes(1))!r} raw data {raw_offset:#x}+{raw_size:#x} exceeds file"
            )
        sections.append(SectionEntry(name, vsize, va, raw_size, raw_offset, characteristics))

    raw_ends = [s.raw_end for s in sections if s.raw_size]
    overlay_offset = max(raw_ends) if raw_ends else len(data)
    overlay = OverlaySpan(overlay_offset, len(data) - overlay_offset)

    imports = _parse_imports(
        data, optional.data_directories[DIRECTORY_IMPORT], sections, size_of_headers, pe32_plus
    )

    return PeBinary(
        raw=data,
        dos_header=DosHeader(DOS_MAGIC, pe_offset),
        coff_header=coff,
        optional_header=optional,
        sections=tuple(sections),
        overlay=overlay,
        imports=imports,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _align(value: int, alignment: int) -> int:
    if alignment <= 0:
        return value
    return (value + alignment - 1) // alignment * alignment


def _write_headers(pe: PeBinary) -> bytes:
    """Patch every model header field into a copy of ``pe.raw``."""
    out = bytearray(pe.raw)
    table_end = pe.section_table_end
    if table_end > len(out):
        raise LayoutConflict(f"section table ends at {table_end:#x}, past end of file")
    for s in pe.sections:
        if len(s.name) > 8:
            raise LayoutConflict(f"section name {s.name!r} longer than 8 bytes")

    _patch_header_fields(out, pe)
    if out == pe.raw:
        return pe.raw

    data_starts = [s.raw_offset for s in pe.sections if s.raw_size]
    if data_starts and table_end > min(data_starts):
        raise LayoutConflict(
            f"section table ({table_end:#x}) would overwrite section data at {min(data_starts):#x}"
        )
    for s in pe.sections:
        if s.raw_size and s.raw_end > len(out):
            raise LayoutConflict(f"section {s.label!r} raw span exceeds image")
    return bytes(out)


def _patch_header_fields(out: bytearray, pe: PeBinary) -> None:
    coff = pe.coff_header
    opt = pe.optional_header
    struct.pack_into("<2s", out, 0, pe.dos_header.magic)
    struct.pack_into("<I", out, 0x3C, pe.dos_header.pe_offset)
    struct.pack_into(
        "<HHIIIHH", out, pe.coff_offset,
        coff.machine, len(pe.sections), coff.timestamp, coff.pointer_to_symbol_table,
        coff.number_of_symbols, coff.optional_header_size, coff.characteristics,
    )
    base = pe.optional_header_offset
    struct.pack_into("<H", out, base, opt.magic)
    struct.pack_into("<I", out, base + OPT_ENTRY_POINT, opt.entry_point_rva)
    if opt.is_pe32_plus:
        struct.pack_into("<Q", out, base + 24, opt.image_base)
    else:
        struct.pack_into("<I", out, base + 28, opt.image_base)
    struct.pack_into("<II", out, base + OPT_SECTION_ALIGNMENT, opt.section_alignment, opt.file_alignment)
    struct.pack_into("<III", out, base + OPT_SIZE_OF_IMAGE, opt.size_of_image, opt.size_of_headers, opt.checksum)
    struct.pack_into("<H", out, base + OPT_SUBSYSTEM, opt.subsystem)
    struct.pack_into("<I", out, base + opt.data_directories_offset - 4, opt.number_of_rva_and_sizes)
    for i in range(min(opt.number_of_rva_and_sizes, NUM_DATA_DIRECTORIES)):
        struct.pack_into("<II", out, base + opt.data_directories_offset + 8 * i, *opt.data_directories[i])

    for i, s in enumerate(pe.sections):
        offset = pe.section_table_offset + SECTION_HEADER_SIZE * i
        struct.pack_into(
            "<8sIIII", out, offset,
            s.name.ljust(8, b"\x00"), s.virtual_size, s.virtual_rva, s.raw_size, s.raw_offset,
        )
        struct.pack_into("<I", out, offset + 36, s.characteristics)


def serialize_pe(pe: PeBinary) -> bytes:
    """Emit the bytes for ``pe``.

    An unedited model re-emits ``pe.raw`` exactly. Header edits are patched in
    place; an edited import list is rebuilt in a new appended section.

    Raises:
        LayoutConflict: the edited headers cannot be laid out over the existing data
    """
    out = _write_headers(pe)
    current = parse_pe(out)
    if current.imports == pe.imports:
        return out
    return _relocate_imports(current, pe.imports)


# ---------------------------------------------------------------------------
# Growing structures
# ---------------------------------------------------------------------------

SectionPayload = Union[bytes, Callable[[int], bytes]]


def add_section(
    pe: PeBinary,
    name: bytes,
    payload: SectionPayload,
    characteristics: int = RDATA_CHARACTERISTICS,
    payload_size: Optional[int] = None,
) -> PeBinary:
    """Append a section; its raw data is inserted where the overlay begins.

    ``payload`` may be a callable receiving the new section's RVA (for content
    holding RVAs, like an import directory); ``payload_size`` must then be given.

    Raises:
        LayoutConflict: no free zero-filled slot left in the header area
    """
    pe = parse_pe(serialize_pe(pe))
    if len(name) > 8:
        raise LayoutConflict(f"section name {name!r} longer than 8 bytes")
    size = len(payload) if isinstance(payload, (bytes, bytearray)) else payload_size
    if not size:
        raise LayoutConflict("cannot append an empty section")

    opt = pe.optional_header
    file_alignment = opt.file_alignment or DEFAULT_FILE_ALIGNMENT
    section_alignment = opt.section_alignment or DEFAULT_SECTION_ALIGNMENT

    slot = pe.section_table_end
    limit = min([opt.size_of_headers] + [s.raw_offset for s in pe.sections if s.raw_size])
    if slot + SECTION_HEADER_SIZE > limit or any(pe.raw[slot:slot + SECTION_HEADER_SIZE]):
        raise LayoutConflict(f"no free section header slot at {slot:#x} (headers end {limit:#x})")

    if pe.sections:
        virtual_end = max(s.virtual_rva + s.virtual_extent for s in pe.sections)
    else:
        virtual_end = opt.size_of_headers
    rva = _align(virtual_end, section_alignment)
    data = payload(rva) if callable(payload) else bytes(payload)
    if len(data) != size:
        raise LayoutConflict(f"payload builder returned {len(data)} bytes, expected {size}")

    insert_at = pe.overlay.offset
    raw_offset = _align(insert_at, file_alignment)
    raw_size = _align(len(data), file_alignment)
    insertion = bytes(raw_offset - insert_at) + data + bytes(raw_size - len(data))

    out = bytearray(pe.raw[:insert_at] + insertion + pe.raw[insert_at:])
    struct.pack_into(
        "<8sIIIIIIHHI", out, slot,
        name.ljust(8, b"\x00"), len(data), rva, raw_size, raw_offset, 0, 0, 0, 0, characteristics,
    )
    struct.pack_into("<H", out, pe.coff_offset + 2, len(pe.sections) + 1)
    struct.pack_into(
        "<I", out, pe.optional_header_offset + OPT_SIZE_OF_IMAGE,
        _align(rva + len(data), section_alignment),
    )
    security = pe.data_directory(DIRECTORY_SECURITY)
    if security.size and security.rva >= insert_at:
        _patch_directory(out, pe, DIRECTORY_SECURITY, DataDirectory(security.rva + len(insertion), security.size))

    logger.debug(f"Appended section {name!r} at RVA {rva:#x}, raw {raw_offset:#x}+{raw_size:#x}")
    return parse_pe(bytes(out))


def _patch_directory(out: bytearray, pe: PeBinary, index: int, value: DataDirectory) -> None:
    opt = pe.optional_header
    if index >= min(opt.number_of_rva_and_sizes, NUM_DATA_DIRECTORIES):
        raise LayoutConflict(f"data directory {index} not present in optional header")
    struct.pack_into("<II", out, pe.optional_header_offset + opt.data_directories_offset + 8 * index, *value)


def import_blob_size(descriptors: Sequence[ImportDescriptor], pe32_plus: bool) -> int:
    return len(build_import_blob(descriptors, 0, pe32_plus)[0])


def build_import_blob(
    descriptors: Sequence[ImportDescriptor], base_rva: int, pe32_plus: bool
) -> Tuple[bytes, Tuple[ImportDescriptor, ...]]:
    """Lay out an import directory starting at ``base_rva``.

    Descriptors that already have an IAT on disk keep it (code refers to it);
    new descriptors get a fresh IAT inside the blob. Returns the blob and the
    descriptors with their final ``iat_rva``.
    """
    thunk_size = 8 if pe32_plus else 4
    thunk_fmt = "<Q" if pe32_plus else "<I"
    ordinal_flag = 1 << 63 if pe32_plus else 1 << 31

    table_size = IMPORT_DESCRIPTOR_SIZE * (len(descriptors) + 1)
    cursor = table_size
    ilt_offsets: List[int] = []
    iat_offsets: List[Optional[int]] = []
    for d in descriptors:
        ilt_offsets.append(cursor)
        cursor += thunk_size * (len(d.imported_symbols) + 1)
        if d.iat_rva:
            iat_offsets.append(None)
        else:
            iat_offsets.append(cursor)
            cursor += thunk_size * (len(d.imported_symbols) + 1)

    hint_name_offsets: Dict[Tuple[int, int], int] = {}
    for i, d in enumerate(descriptors):
        for j, symbol in enumerate(d.imported_symbols):
            if symbol.startswith(b"#"):
                continue
            hint_name_offsets[(i, j)] = cursor
            cursor = _align(cursor + 2 + len(symbol) + 1, 2)
    name_offsets: List[int] = []
    for d in descriptors:
        name_offsets.append(cursor)
        cursor += len(d.dll_name) + 1
    blob = bytearray(_align(cursor, 4))

    final: List[ImportDescriptor] = []
    for i, d in enumerate(descriptors):
        thunks: List[int] = []
        for j, symbol in enumerate(d.imported_symbols):
            if symbol.startswith(b"#"):
                thunks.append(ordinal_flag | int(symbol[1:]))
            else:
                entry = hint_name_offsets[(i, j)]
                struct.pack_into(f"<H{len(symbol)}s", blob, entry, 0, symbol)
                thunks.append(base_rva + entry)
        for k, value in enumerate(thunks):
            struct.pack_into(thunk_fmt, blob, ilt_offsets[i] + k * thunk_size, value)
            iat = iat_offsets[i]
            if iat is not None:
                struct.pack_into(thunk_fmt, blob, iat + k * thunk_size, value)
        blob[name_offsets[i]:name_offsets[i] + len(d.dll_name)] = d.dll_name
        iat_rva = d.iat_rva or base_rva + (iat_offsets[i] or 0)
        struct.pack_into(
            "<IIIII", blob, IMPORT_DESCRIPTOR_SIZE * i,
            base_rva + ilt_offsets[i], 0, 0, base_rva + name_offsets[i], iat_rva,
        )
        final.append(ImportDescriptor(d.dll_name, d.imported_symbols, iat_rva))
    return bytes(blob), tuple(final)


def _relocate_imports(pe: PeBinary, descriptors: Sequence[ImportDescriptor]) -> bytes:
    size = import_blob_size(descriptors, pe.is_pe32_plus)
    grown = add_section(
        pe,
        RELOCATED_IMPORT_SECTION,
        lambda rva: build_import_blob(descriptors, rva, pe.is_pe32_plus)[0],
        DATA_CHARACTERISTICS,
        payload_size=size,
    )
    new_section = grown.sections[-1]
    out = bytearray(grown.raw)
    _patch_directory(
        out, grown, DIRECTORY_IMPORT,
        DataDirectory(new_section.virtual_rva, IMPORT_DESCRIPTOR_SIZE * (len(descriptors) + 1)),
    )
    logger.debug(f"Relocated {len(descriptors)} import descriptors to RVA {new_section.virtual_rva:#x}")
    return bytes(out)


# ---------------------------------------------------------------------------
# Field edits
# ---------------------------------------------------------------------------

def rebuild(pe: PeBinary) -> PeBinary:
    return parse_pe(serialize_pe(pe))


def with_timestamp(pe: PeBinary, timestamp: int) -> PeBinary:
    return rebuild(replace(pe, coff_header=replace(pe.coff_header, timestamp=timestamp & 0xFFFFFFFF)))


def with_checksum(pe: PeBinary, checksum: int) -> PeBinary:
    return rebuild(replace(pe, optional_header=replace(pe.optional_header, checksum=checksum & 0xFFFFFFFF)))


def with_data_directory(pe: PeBinary, index: int, value: DataDirectory) -> PeBinary:
    dirs = list(pe.optional_header.data_directories)
    dirs[index] = value
    return rebuild(replace(pe, optional_header=replace(pe.optional_header, data_directories=tuple(dirs))))


def with_section_name(pe: PeBinary, index: int, name: bytes) -> PeBinary:
    if len(name) > 8:
        raise LayoutConflict(f"section name {name!r} longer than 8 bytes")
    sections = list(pe.sections)
    sections[index] = replace(sections[index], name=name.ljust(8, b"\x00"))
    return rebuild(replace(pe, sections=tuple(sections)))


def with_imports(pe: PeBinary, imports: Sequence[ImportDescriptor]) -> PeBinary:
    return rebuild(replace(pe, imports=tuple(imports)))


# ---------------------------------------------------------------------------
# Checksum
# ---------------------------------------------------------------------------

def pe_word_checksum(data: bytes, checksum_offset: int) -> int:
    """16-bit one's-complement word sum over ``data`` with the 4-byte checksum
    field at ``checksum_offset`` treated as zero, plus the data length."""
    buf = bytearray(data)
    buf[checksum_offset:checksum_offset + 4] = bytes(len(buf[checksum_offset:checksum_offset + 4]))
    if len(buf) % 2:
        buf.append(0)
    total = int(np.frombuffer(bytes(buf), dtype="<u2").sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


def compute_checksum(data: bytes) -> int:
    """The PE/COFF image checksum of ``data``.

    Raises:
        MalformedHeader: the checksum field cannot be located
    """
    if len(data) < 64 or data[:2] != DOS_MAGIC:
        raise MalformedHeader("cannot locate checksum field: bad or truncated DOS header")
    (pe_offset,) = struct.unpack_from("<I", data, 0x3C)
    field_offset = pe_offset + 4 + COFF_HEADER_SIZE + OPT_CHECKSUM
    if field_offset + 4 > len(data) or data[pe_offset:pe_offset + 4] != PE_SIGNATURE:
        raise MalformedHeader("cannot locate checksum field: bad PE header")
    return pe_word_checksum(data, field_offset)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

class ViolationCode(str, Enum):
    BAD_DOS_MAGIC = "BadDosMagic"
    BAD_PE_SIGNATURE = "BadPeSignature"
    SECTION_COUNT_MISMATCH = "SectionCountMismatch"
    BAD_SECTION_NAME = "BadSectionName"
    OUT_OF_BOUNDS_SECTION = "OutOfBoundsSection"
    SECTION_OVERLAP = "SectionOverlap"
    OUT_OF_BOUNDS_DIRECTORY = "OutOfBoundsDirectory"
    DANGLING_ENTRY_POINT = "DanglingEntryPoint"
    MALFORMED_IMPORT_THUNK = "MalformedImportThunk"


class Violation(NamedTuple):
    code: ViolationCode
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[Violation, ...] = ()

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def codes(self) -> List[ViolationCode]:
        return [v.code for v in self.violations]


def validate_structure(pe: PeBinary) -> ValidationReport:
    """Every structural rule ``pe`` violates; never raises."""
    found: List[Violation] = []
    raw = pe.raw
    opt = pe.optional_header

    if pe.dos_header.magic != DOS_MAGIC or raw[:2] != DOS_MAGIC:
        found.append(Violation(ViolationCode.BAD_DOS_MAGIC, f"magic {raw[:2]!r}"))
    signature = raw[pe.dos_header.pe_offset:pe.dos_header.pe_offset + 4]
    if signature != PE_SIGNATURE:
        found.append(Violation(ViolationCode.BAD_PE_SIGNATURE, f"signature {signature!r}"))
    if pe.coff_header.section_count != len(pe.sections):
        found.append(Violation(
            ViolationCode.SECTION_COUNT_MISMATCH,
            f"header says {pe.coff_header.section_count}, table has {len(pe.sections)}",
        ))

    headers_end = pe.section_table_end
    spans: List[Tuple[int, int, bytes]] = []
    for s in pe.sections:
        if len(s.name) > 8:
            found.append(Violation(ViolationCode.BAD_SECTION_NAME, f"{s.name!r}"))
        if s.raw_size == 0:
            continue
        if s.raw_end > len(raw):
            found.append(Violation(
                ViolationCode.OUT_OF_BOUNDS_SECTION,
                f"{s.label!r} raw {s.raw_offset:#x}+{s.raw_size:#x} past end of file ({len(raw):#x})",
            ))
        if s.raw_offset < headers_end:
            found.append(Violation(ViolationCode.SECTION_OVERLAP, f"{s.label!r} overlaps the headers"))
        spans.append((s.raw_offset, s.raw_end, s.label))
    spans.sort()
    for (a_start, a_end, a_name), (b_start, _, b_name) in zip(spans, spans[1:]):
        if b_start < a_end:
            found.append(Violation(ViolationCode.SECTION_OVERLAP, f"{a_name!r} overlaps {b_name!r}"))

    for index, directory in enumerate(opt.data_directories):
        if directory.size == 0:
            continue
        end = directory.rva + directory.size
        if index == DIRECTORY_SECURITY:
            # the certificate table is addressed by file offset, not RVA
            ok = end <= len(raw) and directory.rva >= headers_end
        else:
            section = pe.section_for_rva(directory.rva)
            if section is not None:
                ok = end <= section.virtual_rva + section.virtual_extent
            else:
                ok = end <= opt.size_of_headers
        if not ok:
            found.append(Violation(
                ViolationCode.OUT_OF_BOUNDS_DIRECTORY,
                f"directory {index} {directory.rva:#x}+{directory.size:#x}",
            ))

    if opt.entry_point_rva and pe.section_for_rva(opt.entry_point_rva) is None:
        found.append(Violation(ViolationCode.DANGLING_ENTRY_POINT, f"entry point {opt.entry_point_rva:#x}"))

    for descriptor in pe.imports:
        if not descriptor.dll_name or not descriptor.imported_symbols:
            found.append(Violation(ViolationCode.MALFORMED_IMPORT_THUNK, f"descriptor {descriptor.dll_name!r}"))

    return ValidationReport(tuple(found))


# ---------------------------------------------------------------------------
# Building fresh images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SectionPlan:
    name: bytes
    data: bytes
    characteristics: int = RDATA_CHARACTERISTICS
    virtual_size: Optional[int] = None


@dataclass(frozen=True)
class PeBuildPlan:
    sections: Tuple[SectionPlan, ...]
    pe32_plus: bool = False
    timestamp: int = 0
    machine: Optional[int] = None
    image_base: Optional[int] = None
    subsystem: int = 2
    characteristics: Optional[int] = None
    imports: Tuple[ImportDescriptor, ...] = ()
    debug_pdb_path: Optional[bytes] = None
    certificate: Optional[bytes] = None
    overlay: bytes = b""
    entry_section: int = 0
    entry_offset: int = 0
    set_checksum: bool = True


@dataclass(frozen=True)
class LayoutRecord:
    """Every field ``build_pe`` chose, for cross-checking against ``parse_pe``."""

    pe_offset: int
    machine: int
    timestamp: int
    characteristics: int
    magic: int
    entry_point_rva: int
    image_base: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    data_directories: Tuple[DataDirectory, ...]
    sections: Tuple[SectionEntry, ...]
    imports: Tuple[ImportDescriptor, ...]
    overlay: OverlaySpan


class BuiltPe(NamedTuple):
    data: bytes
    layout: LayoutRecord


IMPORT_SECTION_NAME = b".idata"
DEBUG_SECTION_NAME = b".rdata"


def _debug_blob(base_rva: int, raw_offset: int, timestamp: int, pdb_path: bytes) -> bytes:
    codeview = b"RSDS" + bytes(range(16)) + struct.pack("<I", 1) + pdb_path + b"\x00"
    header = struct.pack(
        "<IIHHIIII",
        0, timestamp, 0, 0, 2, len(codeview),
        base_rva + DEBUG_DIRECTORY_SIZE, raw_offset + DEBUG_DIRECTORY_SIZE,
    )
    return header + codeview


def build_pe(plan: PeBuildPlan) -> BuiltPe:
    """Lay out a fresh, structurally valid image from ``plan``."""
    pe32_plus = plan.pe32_plus
    machine = plan.machine if plan.machine is not None else (MACHINE_AMD64 if pe32_plus else MACHINE_I386)
    image_base = plan.image_base if plan.image_base is not None else (0x140000000 if pe32_plus else 0x400000)
    characteristics = plan.characteristics if plan.characteristics is not None else (0x0022 if pe32_plus else 0x0102)
    opt_size = 240 if pe32_plus else 224

    section_count = len(plan.sections) + bool(plan.imports) + bool(plan.debug_pdb_path)
    table_offset = DEFAULT_PE_OFFSET + 4 + COFF_HEADER_SIZE + opt_size
    size_of_headers = _align(
        max(table_offset + SECTION_HEADER_SIZE * section_count, DEFAULT_SIZE_OF_HEADERS),
        DEFAULT_FILE_ALIGNMENT,
    )

    # Pass 1: addresses. Aux sections have fixed sizes, so RVAs are known up front.
    names: List[bytes] = [s.name for s in plan.sections]
    sizes: List[int] = [len(s.data) for s in plan.sections]
    flags: List[int] = [s.characteristics for s in plan.sections]
    vsizes: List[int] = [max(len(s.data), s.virtual_size or 0) for s in plan.sections]
    aux_sections: List[Tuple[bytes, int, int]] = []
    if plan.imports:
        aux_sections.append((IMPORT_SECTION_NAME, import_blob_size(plan.imports, pe32_plus), DATA_CHARACTERISTICS))
    if plan.debug_pdb_path:
        debug_size = DEBUG_DIRECTORY_SIZE + 24 + len(plan.debug_pdb_path) + 1
        aux_sections.append((DEBUG_SECTION_NAME, debug_size, RDATA_CHARACTERISTICS))
    for name, size, flag in aux_sections:
        names.append(name)
        sizes.append(size)
        flags.append(flag)
        vsizes.append(size)

    rvas: List[int] = []
    offsets: List[int] = []
    raw_sizes: List[int] = []
    rva = DEFAULT_SECTION_ALIGNMENT
    cursor = size_of_headers
    for size, vsize in zip(sizes, vsizes):
        rvas.append(rva)
        raw_size = _align(size, DEFAULT_FILE_ALIGNMENT)
        raw_sizes.append(raw_size)
        offsets.append(cursor if raw_size else 0)
        cursor += raw_size
        rva += _align(max(vsize, 1), DEFAULT_SECTION_ALIGNMENT)
    size_of_image = rva

    # Pass 2: contents.
    contents: List[bytes] = [s.data for s in plan.sections]
    directories = [DataDirectory(0, 0)] * NUM_DATA_DIRECTORIES
    imports: Tuple[ImportDescriptor, ...] = ()
    aux = len(plan.sections)
    if plan.imports:
        blob, imports = build_import_blob(plan.imports, rvas[aux], pe32_plus)
        contents.append(blob)
        directories[DIRECTORY_IMPORT] = DataDirectory(rvas[aux], IMPORT_DESCRIPTOR_SIZE * (len(imports) + 1))
        aux += 1
    if plan.debug_pdb_path:
        contents.append(_debug_blob(rvas[aux], offsets[aux], plan.timestamp, plan.debug_pdb_path))
        directories[DIRECTORY_DEBUG] = DataDirectory(rvas[aux], DEBUG_DIRECTORY_SIZE)

    sections = tuple(
        SectionEntry(name.ljust(8, b"\x00"), vsize, va, raw_size, offset, flag)
        for name, vsize, va, raw_size, offset, flag in zip(names, vsizes, rvas, raw_sizes, offsets, flags)
    )

    out = bytearray(size_of_headers)
    for section, content in zip(sections, contents):
        out.extend(bytes(max(0, section.raw_end - len(out))))
        out[section.raw_offset:section.raw_offset + len(content)] = content
    out.extend(plan.overlay)
    if plan.certificate is not None:
        out.extend(bytes(_align(len(out), 8) - len(out)))
        certificate = struct.pack("<IHH", 8 + len(plan.certificate), 0x0200, 0x0002) + plan.certificate
        directories[DIRECTORY_SECURITY] = DataDirectory(len(out), len(certificate))
        out.extend(certificate)

    entry_point = 0
    if sections:
        entry_point = sections[plan.entry_section].virtual_rva + plan.entry_offset

    # DOS header + stub
    struct.pack_into("<2sHHHHHHHHH", out, 0, DOS_MAGIC, 0x90, 3, 0, 4, 0, 0xFFFF, 0, 0xB8, 0)
    struct.pack_into("<H", out, 0x18, 0x40)
    struct.pack_into("<I", out, 0x3C, DEFAULT_PE_OFFSET)
    out[0x40:0x40 + len(DOS_STUB)] = DOS_STUB
    out[DEFAULT_PE_OFFSET:DEFAULT_PE_OFFSET + 4] = PE_SIGNATURE
    struct.pack_into(
        "<HHIIIHH", out, DEFAULT_PE_OFFSET + 4,
        machine, len(sections), plan.timestamp & 0xFFFFFFFF, 0, 0, opt_size, characteristics,
    )

    base = DEFAULT_PE_OFFSET + 4 + COFF_HEADER_SIZE
    code_size = sum(s.raw_size for s in sections if s.characteristics & SCN_CNT_CODE)
    data_size = sum(s.raw_size for s in sections if not s.characteristics & SCN_CNT_CODE)
    code_base = next((s.virtual_rva for s in sections if s.characteristics & SCN_CNT_CODE), 0)
    struct.pack_into(
        "<HBBIIIII", out, base,
        PE32_PLUS_MAGIC if pe32_plus else PE32_MAGIC, 14, 0, code_size, data_size, 0, entry_point, code_base,
    )
    if pe32_plus:
        struct.pack_into("<Q", out, base + 24, image_base)
    else:
        struct.pack_into("<II", out, base + 24, 0, image_base)
    struct.pack_into(
        "<IIHHHHHHIIIIHH", out, base + OPT_SECTION_ALIGNMENT,
        DEFAULT_SECTION_ALIGNMENT, DEFAULT_FILE_ALIGNMENT, 6, 0, 0, 0, 6, 0, 0,
        size_of_image, size_of_headers, 0, plan.subsystem, 0x8140,
    )
    if pe32_plus:
        struct.pack_into("<QQQQII", out, base + 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, NUM_DATA_DIRECTORIES)
        dirs_offset = base + 112
    else:
        struct.pack_into("<IIIIII", out, base + 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, NUM_DATA_DIRECTORIES)
        dirs_offset = base + 96
    for i, directory in enumerate(directories):
        struct.pack_into("<II", out, dirs_offset + 8 * i, *directory)

    for i, s in enumerate(sections):
        struct.pack_into(
            "<8sIIIIIIHHI", out, table_offset + SECTION_HEADER_SIZE * i,
            s.name, s.virtual_size, s.virtual_rva, s.raw_size, s.raw_offset, 0, 0, 0, 0, s.characteristics,
        )

    checksum = 0
    if plan.set_checksum:
        checksum = pe_word_checksum(bytes(out), base + OPT_CHECKSUM)
        struct.pack_into("<I", out, base + OPT_CHECKSUM, checksum)

    raw_ends = [s.raw_end for s in sections if s.raw_size]
    overlay_offset = max(raw_ends) if raw_ends else len(out)

    layout = LayoutRecord(
        pe_offset=DEFAULT_PE_OFFSET,
        machine=machine,
        timestamp=plan.timestamp & 0xFFFFFFFF,
        characteristics=characteristics,
        magic=PE32_PLUS_MAGIC if pe32_plus else PE32_MAGIC,
        entry_point_rva=entry_point,
        image_base=image_base,
        size_of_image=size_of_image,
        size_of_headers=size_of_headers,
        checksum=checksum,
        data_directories=tuple(directories),
        sections=sections,
        imports=imports,
        overlay=OverlaySpan(overlay_offset, len(out) - overlay_offset),
    )
    return BuiltPe(bytes(out), layout)
