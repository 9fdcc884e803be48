"""Tests for PE parsing, serialization, checksum and structural validation."""

import struct
from dataclasses import replace

import numpy as np
import pytest

from src.errors import LayoutConflict, MalformedHeader, OutOfBounds, PeFormatError
from src.pe_model import (
    DIRECTORY_DEBUG,
    DIRECTORY_IMPORT,
    DIRECTORY_SECURITY,
    RELOCATED_IMPORT_SECTION,
    DataDirectory,
    ImportDescriptor,
    ViolationCode,
    add_section,
    compute_checksum,
    parse_pe,
    rva_to_offset,
    serialize_pe,
    validate_structure,
    with_imports,
    with_section_name,
    with_timestamp,
)


def reference_checksum(data: bytes, field_offset: int) -> int:
    """Straight-line word sum with the carry folded after every addition."""
    total = 0
    for i in range(0, len(data), 2):
        if field_offset <= i < field_offset + 4:
            continue
        word = data[i] | ((data[i + 1] << 8) if i + 1 < len(data) else 0)
        total += word
        total = (total & 0xFFFF) + (total >> 16)
    return total + len(data)


def differing_offsets(a: bytes, b: bytes):
    assert len(a) == len(b)
    return [i for i, (x, y) in enumerate(zip(a, b)) if x != y]


class TestParse:
    """parse_pe against the layout the builder recorded."""

    def test_fields_match_layout(self, full_pe):
        pe = parse_pe(full_pe.data)
        layout = full_pe.layout
        assert pe.dos_header.pe_offset == layout.pe_offset
        assert pe.coff_header.machine == layout.machine
        assert pe.coff_header.timestamp == layout.timestamp
        assert pe.coff_header.characteristics == layout.characteristics
        assert pe.optional_header.magic == layout.magic
        assert pe.optional_header.entry_point_rva == layout.entry_point_rva
        assert pe.optional_header.image_base == layout.image_base
        assert pe.optional_header.size_of_image == layout.size_of_image
        assert pe.optional_header.size_of_headers == layout.size_of_headers
        assert pe.optional_header.checksum == layout.checksum
        assert pe.optional_header.data_directories == layout.data_directories
        assert pe.sections == layout.sections
        assert pe.imports == layout.imports
        assert pe.overlay == layout.overlay

    def test_pe32_plus_fields_match_layout(self, pe32_plus):
        pe = parse_pe(pe32_plus.data)
        assert pe.is_pe32_plus
        assert pe.optional_header.image_base == pe32_plus.layout.image_base
        assert pe.imports == pe32_plus.layout.imports

    def test_generated_files_match_layout(self):
        from src.corpus_tools import CATEGORIES, GeneratorConfig, generate_pe

        for seed in range(3):
            for category in CATEGORIES:
                built = generate_pe(GeneratorConfig(), category, seed)
                pe = parse_pe(built.data)
                assert pe.sections == built.layout.sections
                assert pe.imports == built.layout.imports
                assert pe.optional_header.data_directories == built.layout.data_directories

    def test_imports_are_named(self, full_pe):
        pe = parse_pe(full_pe.data)
        assert [d.dll_name for d in pe.imports] == [b"kernel32.dll", b"user32.dll"]
        assert pe.imports[0].imported_symbols == (b"GetTickCount", b"Sleep")

    def test_overlay_holds_tail_and_certificate(self, full_pe):
        pe = parse_pe(full_pe.data)
        security = pe.data_directory(DIRECTORY_SECURITY)
        assert pe.overlay_bytes().startswith(b"tail" * 16)
        assert security.rva >= pe.overlay.offset
        assert security.rva + security.size == len(pe.raw)

    def test_rva_to_offset(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        text = pe.sections[0]
        assert rva_to_offset(pe, text.virtual_rva + 5) == text.raw_offset + 5
        assert rva_to_offset(pe, 0x10) == 0x10
        assert rva_to_offset(pe, 0x7FFFFFF0) is None


class TestRoundTrip:

    def test_unedited_model_reemits_identical_bytes(self, full_pe, plain_pe, pe32_plus):
        for built in (full_pe, plain_pe, pe32_plus):
            assert serialize_pe(parse_pe(built.data)) == built.data

    def test_generated_corpus_round_trips(self, generated_files):
        for data in generated_files:
            assert serialize_pe(parse_pe(data)) == data

    @pytest.mark.acceptance
    def test_desk_corpus_round_trips(self, desk_corpus):
        assert len(desk_corpus) == 200
        for sample in desk_corpus:
            assert serialize_pe(parse_pe(sample.data)) == sample.data, sample.sample_id

    def test_unparsed_padding_is_preserved(self, plain_pe):
        data = bytearray(plain_pe.data)
        # junk in the DOS stub area is not modeled but must survive
        data[0x50:0x54] = b"JUNK"
        assert serialize_pe(parse_pe(bytes(data))) == bytes(data)


class TestMalformedInput:

    @pytest.mark.parametrize("length", [0, 1, 2, 63])
    def test_short_input_is_malformed(self, plain_pe, length):
        with pytest.raises(MalformedHeader):
            parse_pe(plain_pe.data[:length])

    def test_bad_dos_magic(self, plain_pe):
        with pytest.raises(MalformedHeader):
            parse_pe(b"ZM" + plain_pe.data[2:])

    def test_bad_pe_signature(self, plain_pe):
        data = bytearray(plain_pe.data)
        data[0x80:0x84] = b"NE\x00\x00"
        with pytest.raises(MalformedHeader):
            parse_pe(bytes(data))

    def test_signature_offset_outside_file(self, plain_pe):
        data = bytearray(plain_pe.data)
        struct.pack_into("<I", data, 0x3C, len(data) + 100)
        with pytest.raises(OutOfBounds):
            parse_pe(bytes(data))

    def test_every_truncation_is_rejected(self, plain_pe):
        """Without an overlay, any strict prefix cuts into a header or a section."""
        rng = np.random.default_rng(0)
        data = plain_pe.data
        for length in list(rng.integers(0, len(data), size=200)) + [64, 0x80, 0x84, 0x100, len(data) - 1]:
            with pytest.raises(PeFormatError):
                parse_pe(data[:int(length)])

    def test_random_bytes_never_crash(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            blob = bytearray(rng.bytes(int(rng.integers(0, 2048))))
            if blob:
                blob[0] = 0
            with pytest.raises(PeFormatError):
                parse_pe(bytes(blob))

    def test_corrupted_headers_raise_coded_errors_only(self, full_pe):
        rng = np.random.default_rng(2)
        for _ in range(300):
            data = bytearray(full_pe.data)
            at = int(rng.integers(0, 0x400))
            data[at] = int(rng.integers(0, 256))
            try:
                parse_pe(bytes(data))
            except PeFormatError:
                pass


class TestChecksum:

    def test_matches_straight_line_reference(self, generated_files):
        for data in generated_files:
            pe = parse_pe(data)
            assert compute_checksum(data) == reference_checksum(data, pe.checksum_offset)

    def test_random_files(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            data = bytearray(rng.bytes(int(rng.integers(200, 4000))))
            data[:2] = b"MZ"
            struct.pack_into("<I", data, 0x3C, 0x40)
            data[0x40:0x44] = b"PE\x00\x00"
            assert compute_checksum(bytes(data)) == reference_checksum(bytes(data), 0x40 + 4 + 20 + 64)

    def test_builder_stores_valid_checksum(self, full_pe):
        pe = parse_pe(full_pe.data)
        assert pe.optional_header.checksum == compute_checksum(full_pe.data)
        assert pe.optional_header.checksum != 0

    def test_checksum_field_is_excluded(self, full_pe):
        pe = parse_pe(full_pe.data)
        data = bytearray(full_pe.data)
        data[pe.checksum_offset:pe.checksum_offset + 4] = b"\xff\xff\xff\xff"
        assert compute_checksum(bytes(data)) == compute_checksum(full_pe.data)

    def test_not_a_pe(self):
        with pytest.raises(MalformedHeader):
            compute_checksum(b"not a portable executable" * 4)

    def test_agrees_with_pefile(self, generated_files):
        pefile = pytest.importorskip("pefile")
        for data in generated_files[:6]:
            assert compute_checksum(data) == pefile.PE(data=data, fast_load=True).generate_checksum()


class TestValidation:

    def test_built_images_are_valid(self, full_pe, plain_pe, pe32_plus, generated_files):
        for data in [full_pe.data, plain_pe.data, pe32_plus.data] + generated_files:
            report = validate_structure(parse_pe(data))
            assert report.is_valid, report.violations

    def test_bad_dos_magic(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        broken = replace(pe, dos_header=replace(pe.dos_header, magic=b"ZM"))
        assert ViolationCode.BAD_DOS_MAGIC in validate_structure(broken).codes()

    def test_section_count_mismatch(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        broken = replace(pe, coff_header=replace(pe.coff_header, section_count=5))
        assert validate_structure(broken).codes() == [ViolationCode.SECTION_COUNT_MISMATCH]

    def test_overlapping_sections(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        second = replace(pe.sections[1], raw_offset=pe.sections[0].raw_offset)
        broken = replace(pe, sections=(pe.sections[0], second))
        assert ViolationCode.SECTION_OVERLAP in validate_structure(broken).codes()

    def test_section_past_end_of_file(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        last = replace(pe.sections[-1], raw_size=pe.sections[-1].raw_size + 0x1000)
        broken = replace(pe, sections=pe.sections[:-1] + (last,))
        assert ViolationCode.OUT_OF_BOUNDS_SECTION in validate_structure(broken).codes()

    def test_directory_out_of_bounds(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        dirs = list(pe.optional_header.data_directories)
        dirs[DIRECTORY_DEBUG] = DataDirectory(pe.sections[0].virtual_rva, 0x100000)
        broken = replace(pe, optional_header=replace(pe.optional_header, data_directories=tuple(dirs)))
        assert validate_structure(broken).codes() == [ViolationCode.OUT_OF_BOUNDS_DIRECTORY]

    def test_dangling_entry_point(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        broken = replace(pe, optional_header=replace(pe.optional_header, entry_point_rva=0x7FFF0000))
        assert validate_structure(broken).codes() == [ViolationCode.DANGLING_ENTRY_POINT]

    def test_empty_import_thunk(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        broken = replace(pe, imports=(ImportDescriptor(b"kernel32.dll", ()),))
        assert validate_structure(broken).codes() == [ViolationCode.MALFORMED_IMPORT_THUNK]


class TestEdits:

    def test_timestamp_touches_four_bytes(self, full_pe):
        pe = parse_pe(full_pe.data)
        edited = with_timestamp(pe, 0x01020304)
        assert edited.coff_header.timestamp == 0x01020304
        changed = differing_offsets(pe.raw, edited.raw)
        assert changed
        assert all(pe.coff_offset + 4 <= i < pe.coff_offset + 8 for i in changed)

    def test_section_rename_touches_name_only(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        edited = with_section_name(pe, 1, b".rsrc")
        changed = differing_offsets(pe.raw, edited.raw)
        start = pe.section_table_offset + 40
        assert changed and all(start <= i < start + 8 for i in changed)
        assert edited.sections[1].label == b".rsrc"

    def test_long_section_name_conflicts(self, plain_pe):
        with pytest.raises(LayoutConflict):
            with_section_name(parse_pe(plain_pe.data), 0, b".toolongname")

    def test_add_section_keeps_prior_spans(self, full_pe):
        pe = parse_pe(full_pe.data)
        grown = add_section(pe, b".extra", b"x" * 700)
        assert grown.coff_header.section_count == pe.coff_header.section_count + 1
        for before, after in zip(pe.sections, grown.sections):
            assert before == after
            assert pe.section_data(before) == grown.section_data(after)
        new = grown.sections[-1]
        assert grown.section_data(new)[:700] == b"x" * 700
        assert new.virtual_rva % pe.optional_header.section_alignment == 0
        assert validate_structure(grown).is_valid

    def test_add_section_moves_certificate_with_overlay(self, full_pe):
        pe = parse_pe(full_pe.data)
        security = pe.data_directory(DIRECTORY_SECURITY)
        certificate = pe.raw[security.rva:security.rva + security.size]
        grown = add_section(pe, b".extra", b"y" * 100)
        moved = grown.data_directory(DIRECTORY_SECURITY)
        assert moved.size == security.size
        assert grown.raw[moved.rva:moved.rva + moved.size] == certificate
        assert grown.overlay_bytes() == pe.overlay_bytes()

    def test_import_edit_relocates_directory(self, full_pe):
        pe = parse_pe(full_pe.data)
        extra = ImportDescriptor(b"gdi32.dll", (b"CreatePen",))
        edited = with_imports(pe, pe.imports + (extra,))
        assert len(edited.imports) == len(pe.imports) + 1
        for old, new in zip(pe.imports, edited.imports):
            assert old == new
        assert edited.imports[-1].same_entry(extra)
        directory = edited.data_directory(DIRECTORY_IMPORT)
        holder = edited.section_for_rva(directory.rva)
        assert holder is not None and holder.label == RELOCATED_IMPORT_SECTION
        assert validate_structure(edited).is_valid

    def test_pe32_plus_import_edit(self, pe32_plus):
        pe = parse_pe(pe32_plus.data)
        edited = with_imports(pe, pe.imports + (ImportDescriptor(b"ole32.dll", (b"CoInitialize",)),))
        assert edited.is_pe32_plus
        assert [d.dll_name for d in edited.imports][-1] == b"ole32.dll"
