"""Multi-loop XOR carrier.

The whole original image is encrypted with 1..3 XOR loops (a distinct 8-byte
repeating key per loop) and stored, keys first, in the data section of a small
generated carrier PE. The carrier's code section is an inert placeholder: it
never decrypts anything at run time.

Carrier data section layout (little-endian)::

    magic            8 bytes   b"OBFXOR01"
    loop_count       u32
    payload_length   u64
    keys             loop_count * 8 bytes, in encryption order
    ciphertext       payload_length bytes
"""

import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.argument_parser import logger
from src.errors import MalformedHeader, NotAStub, OutOfBounds
from src.pe_model import (
    CODE_CHARACTERISTICS,
    DATA_CHARACTERISTICS,
    ImportDescriptor,
    PeBinary,
    PeBuildPlan,
    SectionPlan,
    build_pe,
    parse_pe,
    serialize_pe,
)

STUB_MAGIC = b"OBFXOR01"
STUB_HEADER = struct.Struct("<8sIQ")
KEY_LENGTH = 8
MAX_LOOPS = 3

# xor eax, eax; ret -- padded with int3
LOADER_PLACEHOLDER = b"\x31\xc0\xc3".ljust(64, b"\xcc")

CARRIER_IMPORTS = (
    ImportDescriptor(b"kernel32.dll", (b"GetModuleHandleW", b"GetCommandLineW", b"ExitProcess")),
    ImportDescriptor(b"user32.dll", (b"MessageBoxW",)),
)


@dataclass(frozen=True)
class XorStubLayout:
    loop_count: int
    keys: Tuple[bytes, ...]
    payload_offset: int
    payload_length: int
    carrier: PeBinary

    def ciphertext(self) -> bytes:
        return self.carrier.raw[self.payload_offset:self.payload_offset + self.payload_length]


def xor_pass(data: bytes, key: bytes) -> bytes:
    """One XOR loop of ``data`` with ``key`` repeated to the data length."""
    if not key:
        raise ValueError("XOR key must not be empty")
    plain = np.frombuffer(data, dtype=np.uint8)
    stream = np.resize(np.frombuffer(key, dtype=np.uint8), plain.size)
    return np.bitwise_xor(plain, stream).tobytes()


def draw_keys(loops: int, rng: np.random.Generator) -> Tuple[bytes, ...]:
    """``loops`` pairwise distinct 8-byte keys from ``rng``."""
    keys: list = []
    while len(keys) < loops:
        key = rng.bytes(KEY_LENGTH)
        if key not in keys:
            keys.append(key)
    return tuple(keys)


def xor_obfuscate(
    pe: PeBinary,
    loops: int,
    rng: np.random.Generator,
    keys: Optional[Sequence[bytes]] = None,
    timestamp: Optional[int] = None,
) -> PeBinary:
    """Encrypt ``pe`` with ``loops`` XOR passes and wrap it in a fresh carrier.

    Args:
        pe: image to hide
        loops: number of XOR loops, 1..3
        rng: randomness source for keys and the carrier timestamp
        keys: explicit keys, bypassing ``rng`` (test hook; all-zero keys leave
            the ciphertext equal to the plaintext)
        timestamp: carrier COFF timestamp; drawn from ``rng`` when omitted

    Returns:
        The carrier image
    """
    if loops not in range(1, MAX_LOOPS + 1):
        raise ValueError(f"XOR loop count must be 1..{MAX_LOOPS}, got {loops}")
    if keys is None:
        keys = draw_keys(loops, rng)
    keys = tuple(bytes(k) for k in keys)
    if len(keys) != loops or any(len(k) != KEY_LENGTH for k in keys):
        raise ValueError(f"expected {loops} keys of {KEY_LENGTH} bytes")
    if timestamp is None:
        timestamp = int(rng.integers(946684800, 1577836800))

    payload = serialize_pe(pe)
    ciphertext = payload
    for key in keys:
        ciphertext = xor_pass(ciphertext, key)

    blob = STUB_HEADER.pack(STUB_MAGIC, loops, len(payload)) + b"".join(keys) + ciphertext
    built = build_pe(PeBuildPlan(
        sections=(
            SectionPlan(b".text", LOADER_PLACEHOLDER, CODE_CHARACTERISTICS),
            SectionPlan(b".data", blob, DATA_CHARACTERISTICS),
        ),
        pe32_plus=pe.is_pe32_plus,
        timestamp=timestamp,
        imports=CARRIER_IMPORTS,
    ))
    logger.debug(f"XOR carrier with {loops} loop(s) around {len(payload)} payload bytes")
    return parse_pe(built.data)


def read_stub_layout(carrier: Union[PeBinary, bytes]) -> XorStubLayout:
    """Locate the XOR layout in ``carrier``.

    Raises:
        NotAStub: no section starts with a well-formed layout
    """
    if not isinstance(carrier, PeBinary):
        try:
            carrier = parse_pe(carrier)
        except (MalformedHeader, OutOfBounds) as e:
            raise NotAStub(f"not a PE file: {e}") from e

    for section in carrier.sections:
        data = carrier.section_data(section)
        if not data.startswith(STUB_MAGIC) or len(data) < STUB_HEADER.size:
            continue
        _, loops, length = STUB_HEADER.unpack_from(data, 0)
        keys_end = STUB_HEADER.size + KEY_LENGTH * loops
        if not 1 <= loops <= MAX_LOOPS or keys_end + length > len(data):
            raise NotAStub(f"corrupt XOR layout in section {section.label!r}")
        keys = tuple(
            data[STUB_HEADER.size + KEY_LENGTH * i:STUB_HEADER.size + KEY_LENGTH * (i + 1)]
            for i in range(loops)
        )
        return XorStubLayout(loops, keys, section.raw_offset + keys_end, length, carrier)
    raise NotAStub("no XOR layout found in any section")


def decode_stub(carrier: Union[PeBinary, bytes]) -> bytes:
    """Undo every XOR loop, last key first, and return the original image bytes."""
    layout = read_stub_layout(carrier)
    data = layout.ciphertext()
    for key in reversed(layout.keys):
        data = xor_pass(data, key)
    return data
