"""Tests for the XOR carrier."""

import numpy as np
import pytest

from src.errors import NotAStub
from src.pe_model import parse_pe, validate_structure
from src.xor_stub import (
    KEY_LENGTH,
    STUB_MAGIC,
    decode_stub,
    draw_keys,
    read_stub_layout,
    xor_obfuscate,
    xor_pass,
)


class TestXorPass:

    def test_all_ones_key_complements(self):
        data = bytes(range(256))
        assert xor_pass(data, b"\xff" * KEY_LENGTH) == bytes(255 - b for b in data)

    def test_zero_key_is_identity(self):
        assert xor_pass(b"payload bytes", bytes(KEY_LENGTH)) == b"payload bytes"

    def test_involution(self):
        key = b"\x01\x23\x45\x67\x89\xab\xcd\xef"
        data = bytes(range(100))
        assert xor_pass(xor_pass(data, key), key) == data

    def test_empty_key_rejected(self):
        with pytest.raises(ValueError):
            xor_pass(b"abc", b"")


class TestDrawKeys:

    def test_distinct_keys(self):
        keys = draw_keys(3, np.random.default_rng(0))
        assert len(set(keys)) == 3
        assert all(len(k) == KEY_LENGTH for k in keys)


class TestCarrier:

    @pytest.mark.parametrize("loops", [1, 2, 3])
    def test_decode_recovers_original(self, loops, full_pe):
        carrier = xor_obfuscate(parse_pe(full_pe.data), loops, np.random.default_rng(loops))
        assert validate_structure(carrier).is_valid
        assert decode_stub(carrier) == full_pe.data
        assert read_stub_layout(carrier).loop_count == loops

    def test_decode_from_bytes(self, pe32_plus):
        carrier = xor_obfuscate(parse_pe(pe32_plus.data), 2, np.random.default_rng(1))
        assert carrier.is_pe32_plus
        assert decode_stub(carrier.raw) == pe32_plus.data

    @pytest.mark.acceptance
    @pytest.mark.parametrize("loops", [1, 2, 3])
    def test_desk_files_decode(self, loops, desk_corpus):
        files = desk_corpus[::4]
        assert len(files) == 50
        for i, sample in enumerate(files):
            carrier = xor_obfuscate(parse_pe(sample.data), loops, np.random.default_rng((loops, i)))
            assert decode_stub(carrier.raw) == sample.data, sample.sample_id
            zero_keys = xor_obfuscate(
                parse_pe(sample.data), loops, np.random.default_rng(i), keys=[bytes(KEY_LENGTH)] * loops
            )
            assert read_stub_layout(zero_keys).ciphertext() == sample.data

    def test_zero_keys_store_plaintext(self, full_pe):
        carrier = xor_obfuscate(parse_pe(full_pe.data), 2, np.random.default_rng(0), keys=[bytes(8), bytes(8)])
        assert read_stub_layout(carrier).ciphertext() == full_pe.data

    def test_distinct_seeds_distinct_ciphertexts(self, full_pe):
        pe = parse_pe(full_pe.data)
        a = read_stub_layout(xor_obfuscate(pe, 1, np.random.default_rng(1))).ciphertext()
        b = read_stub_layout(xor_obfuscate(pe, 1, np.random.default_rng(2))).ciphertext()
        assert a != b

    def test_ciphertext_hides_plaintext(self, full_pe):
        carrier = xor_obfuscate(parse_pe(full_pe.data), 1, np.random.default_rng(3))
        assert full_pe.data not in carrier.raw
        assert STUB_MAGIC in carrier.raw

    def test_explicit_timestamp(self, full_pe):
        carrier = xor_obfuscate(parse_pe(full_pe.data), 1, np.random.default_rng(0), timestamp=1_000_000_000)
        assert carrier.coff_header.timestamp == 1_000_000_000

    @pytest.mark.parametrize("loops", [0, 4])
    def test_loop_count_out_of_range(self, loops, full_pe):
        with pytest.raises(ValueError):
            xor_obfuscate(parse_pe(full_pe.data), loops, np.random.default_rng(0))

    def test_wrong_key_count(self, full_pe):
        with pytest.raises(ValueError):
            xor_obfuscate(parse_pe(full_pe.data), 2, np.random.default_rng(0), keys=[bytes(8)])


class TestNotAStub:

    def test_plain_pe(self, full_pe):
        with pytest.raises(NotAStub):
            decode_stub(full_pe.data)

    def test_not_a_pe(self):
        with pytest.raises(NotAStub):
            read_stub_layout(b"definitely not a PE file")
