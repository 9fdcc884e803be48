"""Tests for the internal and external packers."""

import sys
import zlib

import pytest

from src.errors import AlreadyPacked, NotAStub, PackerFailed
from src.packer import (
    METADATA_SECTION_NAME,
    PACK_MAGIC,
    PACKED_SECTION_NAME,
    is_internally_packed,
    pack_external,
    pack_internal,
    unpack_internal,
    upx_pack,
)
from src.pe_model import parse_pe, validate_structure


class TestInternalPacker:

    def test_round_trip(self, full_pe):
        packed = pack_internal(parse_pe(full_pe.data))
        assert unpack_internal(packed) == full_pe.data

    def test_round_trip_pe32_plus(self, pe32_plus):
        packed = pack_internal(parse_pe(pe32_plus.data))
        assert packed.is_pe32_plus
        assert unpack_internal(packed) == pe32_plus.data

    def test_packed_layout(self, full_pe):
        packed = pack_internal(parse_pe(full_pe.data))
        assert validate_structure(packed).is_valid
        assert [s.label for s in packed.sections][:2] == [PACKED_SECTION_NAME, METADATA_SECTION_NAME]
        assert packed.section_data(packed.section_named(METADATA_SECTION_NAME)).startswith(PACK_MAGIC)
        assert is_internally_packed(packed)
        assert not is_internally_packed(parse_pe(full_pe.data))

    def test_packed_section_holds_compressed_stream(self, full_pe):
        packed = pack_internal(parse_pe(full_pe.data))
        stream = packed.section_data(packed.section_named(PACKED_SECTION_NAME))
        decompressor = zlib.decompressobj()
        assert decompressor.decompress(stream)
        assert decompressor.eof

    def test_keeps_timestamp(self, full_pe):
        packed = pack_internal(parse_pe(full_pe.data))
        assert packed.coff_header.timestamp == parse_pe(full_pe.data).coff_header.timestamp

    def test_already_packed(self, full_pe):
        packed = pack_internal(parse_pe(full_pe.data))
        with pytest.raises(AlreadyPacked):
            pack_internal(packed)

    def test_unpack_plain_file(self, full_pe):
        with pytest.raises(NotAStub):
            unpack_internal(parse_pe(full_pe.data))


class TestExternalPacker:

    def test_nonzero_exit(self, full_pe):
        with pytest.raises(PackerFailed, match="exited 2"):
            pack_external(parse_pe(full_pe.data), f"{sys.executable} -c 'import sys; sys.exit(2)'")

    def test_missing_executable(self, full_pe):
        with pytest.raises(PackerFailed):
            pack_external(parse_pe(full_pe.data), "/nonexistent/packer-binary {input}")

    def test_unparseable_output(self, full_pe):
        command = f"{sys.executable} -c 'import sys; open(sys.argv[1], \"wb\").write(b\"junk\")' {{output}}"
        with pytest.raises(PackerFailed, match="unparseable"):
            pack_external(parse_pe(full_pe.data), command)

    def test_in_place_rewrite(self, full_pe):
        # no {output}: the packer result is read back from the input path
        out = pack_external(parse_pe(full_pe.data), f"{sys.executable} -c 'pass' {{input}}")
        assert out.raw == full_pe.data

    def test_upx_pack_dispatch(self, full_pe):
        pe = parse_pe(full_pe.data)
        assert upx_pack(pe).section_named(PACKED_SECTION_NAME) is not None
        copy = f"{sys.executable} -c 'import shutil, sys; shutil.copy(sys.argv[1], sys.argv[2])' {{input}} {{output}}"
        assert upx_pack(pe, copy).raw == full_pe.data
