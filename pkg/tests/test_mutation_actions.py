"""Tests for the twelve mutation actions and their dispatcher."""

import sys

import pytest

from src.errors import AlreadyPacked, PackerFailed, UnknownAction
from src.mutation_actions import (
    ACTION_COUNT,
    ALL_ACTIONS,
    NON_OBFUSCATION_ACTIONS,
    XOR_ACTIONS,
    ActionConfig,
    MutationAction,
    action_from_name,
    apply_action,
    break_checksum,
    change_timestamp,
    imports_append,
    overlay_append,
    randomness_source,
    remove_debug,
    remove_signature,
    section_append,
    section_rename,
)
from src.packer import PACKED_SECTION_NAME, unpack_internal
from src.pe_model import (
    DIRECTORY_DEBUG,
    DIRECTORY_IMPORT,
    DIRECTORY_SECURITY,
    DataDirectory,
    PeBuildPlan,
    build_pe,
    compute_checksum,
    parse_pe,
    validate_structure,
)
from src.xor_stub import decode_stub
from tests.conftest import TEXT


def differing_offsets(a: bytes, b: bytes):
    return [i for i, (x, y) in enumerate(zip(a, b)) if x != y]


class TestActionSpace:

    def test_twelve_stable_indices(self):
        assert ACTION_COUNT == 12
        assert [int(a) for a in ALL_ACTIONS] == list(range(12))
        assert MutationAction.OVERLAY_APPEND == 0
        assert MutationAction.XOR_EL3 == 11

    def test_action_subsets(self):
        assert len(NON_OBFUSCATION_ACTIONS) == 9
        assert set(NON_OBFUSCATION_ACTIONS).isdisjoint(XOR_ACTIONS)
        assert len(XOR_ACTIONS) == 3

    @pytest.mark.parametrize("name,expected", [
        ("OverlayAppend", MutationAction.OVERLAY_APPEND),
        ("overlay_append", MutationAction.OVERLAY_APPEND),
        ("XOR EL2", MutationAction.XOR_EL2),
        ("XorEL3", MutationAction.XOR_EL3),
        ("Change TDS", MutationAction.CHANGE_TIMESTAMP),
        ("UPX Pack", MutationAction.UPX_PACK),
    ])
    def test_action_from_name(self, name, expected):
        assert action_from_name(name) is expected

    def test_unknown_action_name(self):
        with pytest.raises(UnknownAction, match="unknown action"):
            action_from_name("FormatDisk")

    def test_variant_names_round_trip(self):
        for action in ALL_ACTIONS:
            assert action_from_name(action.variant) is action


class TestEveryAction:

    @pytest.mark.parametrize("action", ALL_ACTIONS, ids=[a.variant for a in ALL_ACTIONS])
    def test_output_is_structurally_valid(self, action, generated_files):
        for i, data in enumerate(generated_files):
            out = apply_action(parse_pe(data), action, randomness_source(i))
            report = validate_structure(out)
            assert report.is_valid, (action.variant, i, report.violations)

    @pytest.mark.acceptance
    @pytest.mark.parametrize("action", ALL_ACTIONS, ids=[a.variant for a in ALL_ACTIONS])
    def test_desk_corpus_stays_valid(self, action, desk_malicious):
        assert len(desk_malicious) == 100
        for i, sample in enumerate(desk_malicious):
            out = apply_action(parse_pe(sample.data), action, randomness_source(i))
            report = validate_structure(out)
            assert report.is_valid, (action.variant, sample.sample_id, report.violations)

    @pytest.mark.parametrize("action", ALL_ACTIONS, ids=[a.variant for a in ALL_ACTIONS])
    def test_deterministic_given_seed(self, action, full_pe):
        pe = parse_pe(full_pe.data)
        first = apply_action(pe, action, randomness_source(42))
        second = apply_action(pe, action, randomness_source(42))
        assert first.raw == second.raw

    def test_input_is_not_mutated(self, full_pe):
        pe = parse_pe(full_pe.data)
        for action in ALL_ACTIONS:
            apply_action(pe, action, randomness_source(0))
        assert pe.raw == full_pe.data


class TestOverlayAppend:

    def test_zero_length_is_identity(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = overlay_append(pe, randomness_source(0), ActionConfig(forced_overlay_length=0))
        assert out.raw == pe.raw

    def test_appends_k_pool_bytes(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = overlay_append(pe, randomness_source(1))
        k = len(out.raw) - len(pe.raw)
        assert 128 <= k <= 4096
        assert out.raw[:len(pe.raw)] == pe.raw
        assert out.overlay.length == pe.overlay.length + k

    def test_forced_length(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        out = overlay_append(pe, randomness_source(1), ActionConfig(forced_overlay_length=300))
        assert len(out.raw) == len(pe.raw) + 300
        assert out.overlay.length == 300


class TestImportsAppend:

    def test_adds_one_descriptor(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = imports_append(pe, randomness_source(3))
        assert len(out.imports) == len(pe.imports) + 1
        for old, new in zip(pe.imports, out.imports):
            assert old.same_entry(new)
        assert len(out.imports[-1].imported_symbols) == 1

    def test_directory_lives_in_new_section(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = imports_append(pe, randomness_source(3))
        assert len(out.sections) == len(pe.sections) + 1
        assert out.sections[-1].contains_rva(out.data_directory(DIRECTORY_IMPORT).rva)

    def test_file_without_imports(self, plain_pe):
        out = imports_append(parse_pe(plain_pe.data), randomness_source(4))
        assert len(out.imports) == 1
        assert validate_structure(out).is_valid


class TestSectionRename:

    def test_single_section_only_name_bytes_change(self):
        pe = parse_pe(build_pe(PeBuildPlan(sections=(TEXT,))).data)
        for seed in range(10):
            out = section_rename(pe, randomness_source(seed))
            changed = differing_offsets(pe.raw, out.raw)
            start = pe.section_table_offset
            assert all(start <= i < start + 8 for i in changed)
            assert len(out.raw) == len(pe.raw)

    def test_raw_data_untouched(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = section_rename(pe, randomness_source(5))
        for before, after in zip(pe.sections, out.sections):
            assert pe.section_data(before) == out.section_data(after)


class TestUnlinkDirectories:

    def test_remove_signature(self, full_pe):
        pe = parse_pe(full_pe.data)
        security = pe.data_directory(DIRECTORY_SECURITY)
        out = remove_signature(pe)
        assert out.data_directory(DIRECTORY_SECURITY) == DataDirectory(0, 0)
        # certificate bytes stay in the overlay, unlinked
        assert out.raw[security.rva:security.rva + security.size] == pe.raw[security.rva:security.rva + security.size]
        assert validate_structure(out).is_valid

    def test_remove_signature_on_unsigned_is_noop(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        assert remove_signature(pe).raw == pe.raw

    def test_remove_debug(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = remove_debug(pe)
        assert out.data_directory(DIRECTORY_DEBUG) == DataDirectory(0, 0)
        assert len(out.raw) == len(pe.raw)
        assert validate_structure(out).is_valid

    def test_remove_debug_on_absent_is_noop(self, plain_pe):
        pe = parse_pe(plain_pe.data)
        assert remove_debug(pe).raw == pe.raw


class TestSectionAppend:

    def test_appends_one_section(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = section_append(pe, randomness_source(6))
        assert out.coff_header.section_count == pe.coff_header.section_count + 1
        for before, after in zip(pe.sections, out.sections):
            assert pe.section_data(before) == out.section_data(after)
        assert 512 <= out.sections[-1].virtual_size <= 4096
        assert out.sections[-1].label in ActionConfig().pool().section_names


class TestBreakChecksum:

    def test_zeroes_the_field_only(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = break_checksum(pe)
        assert out.optional_header.checksum == 0
        changed = differing_offsets(pe.raw, out.raw)
        assert changed and all(pe.checksum_offset <= i < pe.checksum_offset + 4 for i in changed)

    def test_idempotent(self, full_pe):
        once = break_checksum(parse_pe(full_pe.data))
        assert break_checksum(once).raw == once.raw

    def test_mismatch_is_detectable(self, full_pe):
        out = break_checksum(parse_pe(full_pe.data))
        assert compute_checksum(out.raw) != out.optional_header.checksum


class TestChangeTimestamp:

    def test_only_timestamp_bytes_change(self, full_pe):
        pe = parse_pe(full_pe.data)
        out = change_timestamp(pe, randomness_source(8))
        changed = differing_offsets(pe.raw, out.raw)
        assert all(pe.coff_offset + 4 <= i < pe.coff_offset + 8 for i in changed)
        assert 946684800 <= out.coff_header.timestamp < 1577836800

    def test_same_seed_same_timestamp(self, full_pe):
        pe = parse_pe(full_pe.data)
        a = change_timestamp(pe, randomness_source(9)).coff_header.timestamp
        b = change_timestamp(pe, randomness_source(9)).coff_header.timestamp
        assert a == b


class TestUpxPack:

    def test_internal_round_trip(self, generated_files):
        for data in generated_files:
            packed = apply_action(parse_pe(data), MutationAction.UPX_PACK, randomness_source(0))
            assert packed.section_named(PACKED_SECTION_NAME) is not None
            assert unpack_internal(packed) == data

    def test_packing_twice_is_inapplicable(self, full_pe):
        packed = apply_action(parse_pe(full_pe.data), MutationAction.UPX_PACK, randomness_source(0))
        with pytest.raises(AlreadyPacked):
            apply_action(packed, MutationAction.UPX_PACK, randomness_source(0))

    def test_external_packer_failure(self, full_pe):
        config = ActionConfig(packer_command=f"{sys.executable} -c 'import sys; sys.exit(3)'")
        with pytest.raises(PackerFailed):
            apply_action(parse_pe(full_pe.data), MutationAction.UPX_PACK, randomness_source(0), config)

    def test_external_packer_output_is_parsed(self, full_pe):
        copy = f"{sys.executable} -c 'import shutil, sys; shutil.copy(sys.argv[1], sys.argv[2])' {{input}} {{output}}"
        out = apply_action(
            parse_pe(full_pe.data), MutationAction.UPX_PACK, randomness_source(0), ActionConfig(packer_command=copy)
        )
        assert out.raw == full_pe.data


class TestXorActions:

    @pytest.mark.parametrize("action", XOR_ACTIONS, ids=[a.variant for a in XOR_ACTIONS])
    def test_decodes_to_original(self, action, generated_files):
        for i, data in enumerate(generated_files):
            carrier = apply_action(parse_pe(data), action, randomness_source(i))
            assert validate_structure(carrier).is_valid
            assert decode_stub(carrier) == data

    def test_forced_zero_keys_leave_plaintext(self, full_pe):
        config = ActionConfig(forced_xor_keys=(bytes(8), bytes(8)))
        carrier = apply_action(parse_pe(full_pe.data), MutationAction.XOR_EL1, randomness_source(0), config)
        assert full_pe.data in carrier.raw
