"""Wire frames: a 13-byte little-endian header followed by the payload.

Header layout: opcode u8, tag u32, chunk_index u32, payload_len u32.
Tensor payloads are little-endian float32.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

from ..errors import ProtocolError

HEADER = struct.Struct("<BIII")
HEADER_SIZE = HEADER.size  # 13


class Op(enum.IntEnum):
    HELLO = 1
    RANK_ASSIGN = 2
    BARRIER_ARRIVE = 3
    BARRIER_RELEASE = 4
    REDUCE_CHUNK = 5
    GATHER_CHUNK = 6
    BCAST = 7
    SHUTDOWN = 8


@dataclass(frozen=True)
class Frame:
    opcode: Op
    tag: int = 0
    chunk_index: int = 0
    payload: bytes = b""

    def encode(self) -> bytes:
        return HEADER.pack(int(self.opcode), self.tag, self.chunk_index, len(self.payload)) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> Frame:
        if len(data) < HEADER_SIZE:
            raise ProtocolError(f"frame of {len(data)} bytes is shorter than the header")
        opcode, tag, chunk, length = HEADER.unpack_from(data)
        if len(data) - HEADER_SIZE != length:
            raise ProtocolError(f"header announces {length} payload bytes, frame carries {len(data) - HEADER_SIZE}")
        return cls(parse_opcode(opcode), tag, chunk, bytes(data[HEADER_SIZE:]))

    def json(self):
        return json.loads(self.payload.decode("utf-8")) if self.payload else {}


def parse_opcode(value: int) -> Op:
    try:
        return Op(value)
    except ValueError:
        raise ProtocolError(f"unknown opcode {value}") from None


def json_frame(opcode: Op, obj, tag: int = 0) -> Frame:
    return Frame(opcode, tag, 0, json.dumps(obj, sort_keys=True).encode("utf-8"))
