"""Compression action: external packer when configured, internal zlib packer otherwise.

The internal packer stores every byte covered by a section's raw data,
compressed, in a section named ``UPX0`` and keeps everything else (headers,
alignment gaps, overlay) compressed in a metadata section together with the
covered spans, so ``unpack_internal`` can interleave the two back into the
original file exactly.
"""

import shlex
import struct
import subprocess
import tempfile
import zlib
from pathlib import Path
from typing import List, Optional, Tuple

from src.argument_parser import logger
from src.errors import AlreadyPacked, MalformedHeader, NotAStub, OutOfBounds, PackerFailed
from src.pe_model import (
    SCN_CNT_CODE,
    SCN_CNT_INITIALIZED_DATA,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    ImportDescriptor,
    PeBinary,
    PeBuildPlan,
    SectionPlan,
    build_pe,
    parse_pe,
    serialize_pe,
)

PACKED_SECTION_NAME = b"UPX0"
METADATA_SECTION_NAME = b"UPX1"
PACK_MAGIC = b"OBFUPX01"
PACKED_CHARACTERISTICS = SCN_CNT_CODE | SCN_CNT_INITIALIZED_DATA | SCN_MEM_EXECUTE | SCN_MEM_READ | SCN_MEM_WRITE

# magic, original length, index of the compressed section, compressed length,
# rest compressed length, span count
METADATA_HEADER = struct.Struct("<8sQIQQI")
SPAN = struct.Struct("<QQ")

PACKER_IMPORTS = (
    ImportDescriptor(b"kernel32.dll", (b"LoadLibraryA", b"GetProcAddress", b"VirtualProtect", b"ExitProcess")),
)

Span = Tuple[int, int]


def _covered_spans(pe: PeBinary) -> List[Span]:
    """Merged, sorted (offset, length) spans covered by section raw data."""
    ranges = sorted((s.raw_offset, s.raw_end) for s in pe.sections if s.raw_size)
    merged: List[List[int]] = []
    for start, end in ranges:
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(start, end - start) for start, end in merged]


def is_internally_packed(pe: PeBinary) -> bool:
    if pe.section_named(PACKED_SECTION_NAME) is not None:
        return True
    return any(pe.section_data(s).startswith(PACK_MAGIC) for s in pe.sections)


def pack_internal(pe: PeBinary) -> PeBinary:
    """Pack ``pe`` with the internal zlib packer.

    Raises:
        AlreadyPacked: the input already carries the internal packer's marker
    """
    if is_internally_packed(pe):
        raise AlreadyPacked("input already carries an internal-packer section")

    original = serialize_pe(pe)
    spans = _covered_spans(pe)
    covered = b"".join(original[offset:offset + length] for offset, length in spans)
    rest = bytearray()
    cursor = 0
    for offset, length in spans:
        rest += original[cursor:offset]
        cursor = offset + length
    rest += original[cursor:]

    packed = zlib.compress(covered, 9)
    packed_rest = zlib.compress(bytes(rest), 9)
    metadata = (
        METADATA_HEADER.pack(PACK_MAGIC, len(original), 0, len(packed), len(packed_rest), len(spans))
        + b"".join(SPAN.pack(offset, length) for offset, length in spans)
        + packed_rest
    )
    built = build_pe(PeBuildPlan(
        sections=(
            SectionPlan(PACKED_SECTION_NAME, packed, PACKED_CHARACTERISTICS),
            SectionPlan(METADATA_SECTION_NAME, metadata, PACKED_CHARACTERISTICS),
        ),
        pe32_plus=pe.is_pe32_plus,
        timestamp=pe.coff_header.timestamp,
        machine=pe.coff_header.machine,
        imports=PACKER_IMPORTS,
        entry_section=1,
    ))
    logger.debug(f"Internal pack: {len(original)} -> {len(built.data)} bytes")
    return parse_pe(built.data)


def unpack_internal(pe: PeBinary) -> bytes:
    """Restore the exact bytes that ``pack_internal`` compressed.

    Raises:
        NotAStub: no internal-packer metadata section present, or it is corrupt
    """
    for section in pe.sections:
        metadata = pe.section_data(section)
        if metadata.startswith(PACK_MAGIC):
            break
    else:
        raise NotAStub("no internal packer metadata found")

    try:
        _, original_length, index, packed_length, rest_length, span_count = METADATA_HEADER.unpack_from(metadata)
        spans = [
            SPAN.unpack_from(metadata, METADATA_HEADER.size + SPAN.size * i) for i in range(span_count)
        ]
        rest_start = METADATA_HEADER.size + SPAN.size * span_count
        rest = zlib.decompress(metadata[rest_start:rest_start + rest_length])
        covered = zlib.decompress(pe.section_data(pe.sections[index])[:packed_length])
    except (struct.error, zlib.error, IndexError) as e:
        raise NotAStub(f"corrupt internal packer metadata: {e}") from e

    out = bytearray()
    rest_cursor = 0
    covered_cursor = 0
    for offset, length in spans:
        gap = offset - len(out)
        out += rest[rest_cursor:rest_cursor + gap]
        rest_cursor += gap
        out += covered[covered_cursor:covered_cursor + length]
        covered_cursor += length
    out += rest[rest_cursor:]
    if len(out) != original_length:
        raise NotAStub(f"unpacked {len(out)} bytes, metadata says {original_length}")
    return bytes(out)


def pack_external(pe: PeBinary, command: str, timeout: float = 120.0) -> PeBinary:
    """Run an external packer command template with ``{input}`` and ``{output}``.

    Raises:
        PackerFailed: nonzero exit, timeout, missing or unparseable output
    """
    with tempfile.TemporaryDirectory(prefix="testbed-pack-") as tmp:
        input_path = Path(tmp) / "input.exe"
        output_path = Path(tmp) / "output.exe"
        input_path.write_bytes(serialize_pe(pe))
        cmd = [part.format(input=input_path, output=output_path) for part in shlex.split(command)]
        logger.debug(f"Running external packer: {cmd}")
        try:
            result = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise PackerFailed(f"external packer could not run: {e}") from e
        if result.returncode != 0:
            raise PackerFailed(f"external packer exited {result.returncode}: {result.stderr.strip()[:200]}")
        if not output_path.exists():
            # packers such as upx rewrite in place when no output is given
            output_path = input_path
        try:
            return parse_pe(output_path.read_bytes())
        except (MalformedHeader, OutOfBounds) as e:
            raise PackerFailed(f"external packer produced an unparseable file: {e}") from e


def upx_pack(pe: PeBinary, command: Optional[str] = None, timeout: float = 120.0) -> PeBinary:
    if command:
        return pack_external(pe, command, timeout)
    return pack_internal(pe)
