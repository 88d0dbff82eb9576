"""Reader and writer for a flat subset of the GDSII stream format.

A stream is a sequence of records ``uint16 length | uint8 type | uint8
datatype | payload``, all big-endian, where ``length`` counts the 4 header
bytes and is even. Supported records:

    HEADER BGNLIB LIBNAME UNITS BGNSTR STRNAME ENDSTR ENDLIB
    BOUNDARY LAYER DATATYPE XY ENDEL

Hierarchy and non-polygon elements (SREF, AREF, PATH, TEXT, BOX, NODE) are
rejected with :class:`UnsupportedElementError`; any other unknown record is
skipped with a warning. Every error carries the byte offset of the record
that triggered it.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

from ..errors import ContractError, GdsParseError, LayoutRangeError, UnsupportedElementError

HEADER = 0x0002
BGNLIB = 0x0102
LIBNAME = 0x0206
UNITS = 0x0305
ENDLIB = 0x0400
BGNSTR = 0x0502
STRNAME = 0x0606
ENDSTR = 0x0700
BOUNDARY = 0x0800
PATH = 0x0900
SREF = 0x0A00
AREF = 0x0B00
TEXT = 0x0C00
LAYER = 0x0D02
DATATYPE = 0x0E02
XY = 0x1003
ENDEL = 0x1100
NODE = 0x1500
BOX = 0x2D00

UNSUPPORTED = {PATH: "PATH", SREF: "SREF", AREF: "AREF", TEXT: "TEXT", NODE: "NODE", BOX: "BOX"}
NAMES = {
    HEADER: "HEADER", BGNLIB: "BGNLIB", LIBNAME: "LIBNAME", UNITS: "UNITS", ENDLIB: "ENDLIB",
    BGNSTR: "BGNSTR", STRNAME: "STRNAME", ENDSTR: "ENDSTR", BOUNDARY: "BOUNDARY", LAYER: "LAYER",
    DATATYPE: "DATATYPE", XY: "XY", ENDEL: "ENDEL", **UNSUPPORTED,
}

STREAM_VERSION = 600
# fixed modification/access time (2000-01-01 00:00:00, twice) keeps output canonical
TIMESTAMP = (2000, 1, 1, 0, 0, 0) * 2
STRUCTURE_NAME = "TOP"
MAX_POINTS = 8191  # (65535 - 4) // 8 coordinate pairs fit one XY record
INT32 = (-(2**31), 2**31 - 1)


@dataclass
class PolySet:
    """Closed integer rings on one (layer, datatype); first point repeated last."""

    layer: int = 1
    datatype: int = 0
    polygons: list[list[tuple[int, int]]] = field(default_factory=list)
    dbu_nm: float = 1.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolySet):
            return NotImplemented
        return (
            self.layer == other.layer
            and self.datatype == other.datatype
            and self.dbu_nm == other.dbu_nm
            and [[tuple(map(int, p)) for p in ring] for ring in self.polygons]
            == [[tuple(map(int, p)) for p in ring] for ring in other.polygons]
        )


@dataclass(frozen=True)
class GdsRecord:
    offset: int
    length: int
    record_type: int
    data_type: int
    payload: bytes

    @property
    def key(self) -> int:
        return (self.record_type << 8) | self.data_type

    @property
    def name(self) -> str:
        return NAMES.get(self.key, f"0x{self.key:04X}")


# -- excess-64 reals --------------------------------------------------------
def encode_real8(value: float) -> bytes:
    """8-byte GDSII real: sign, 7-bit base-16 exponent biased by 64, 56-bit fraction."""
    if value == 0:
        return b"\x00" * 8
    sign = 0x80 if value < 0 else 0
    f = Fraction(abs(value))
    exp = 64
    while f >= 1:
        f /= 16
        exp += 1
    while f < Fraction(1, 16):
        f *= 16
        exp -= 1
    mantissa = round(f * 2**56)
    if mantissa == 2**56:
        mantissa = 2**52
        exp += 1
    if not 0 <= exp <= 127:
        raise LayoutRangeError(f"{value!r} is outside the 8-byte real range")
    return bytes([sign | exp]) + mantissa.to_bytes(7, "big")


def decode_real8(data: bytes) -> float:
    if len(data) != 8:
        raise ValueError("an 8-byte real needs exactly 8 bytes")
    sign = -1 if data[0] & 0x80 else 1
    exp = (data[0] & 0x7F) - 64
    mantissa = int.from_bytes(data[1:], "big")
    return float(sign * Fraction(mantissa, 2**56) * Fraction(16) ** exp)


# -- writing ------------------------------------------------------------------
def _record(key: int, payload: bytes = b"") -> bytes:
    if len(payload) % 2:
        payload += b"\x00"
    length = 4 + len(payload)
    if length > 0xFFFF:
        raise LayoutRangeError(f"{NAMES.get(key, key)} record of {length} bytes exceeds 65535")
    return struct.pack(">HH", length, key) + payload


def _ascii(text: str) -> bytes:
    try:
        return text.encode("ascii")
    except UnicodeEncodeError as exc:
        raise ContractError(f"GDSII names must be ASCII: {text!r}") from exc


def validate_ring(ring: Sequence[tuple[int, int]]) -> None:
    pts = [tuple(p) for p in ring]
    if len(pts) < 4 or pts[0] != pts[-1]:
        raise ContractError("a ring needs at least 4 points with the first repeated last")
    if len(pts) > MAX_POINTS:
        raise LayoutRangeError(f"ring with {len(pts)} points exceeds the {MAX_POINTS}-point XY limit")
    for x, y in pts:
        if not (INT32[0] <= x <= INT32[1] and INT32[0] <= y <= INT32[1]):
            raise LayoutRangeError(f"coordinate ({x}, {y}) does not fit a signed 32-bit integer")
    area2 = sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(pts, pts[1:]))
    if area2 == 0:
        raise ContractError("ring has zero area")


def write_gds(polysets: Sequence[PolySet], library_name: str = "LIB") -> bytes:
    """Serialize ``polysets`` into one flat structure named TOP.

    All polysets must share ``dbu_nm`` and have distinct (layer, datatype)
    pairs; polysets without polygons are omitted. Output bytes depend only
    on the input (timestamps are fixed).
    """
    dbu_values = {p.dbu_nm for p in polysets}
    if len(dbu_values) > 1:
        raise ContractError(f"polysets disagree on dbu_nm: {sorted(dbu_values)}")
    dbu_nm = dbu_values.pop() if dbu_values else 1.0
    if dbu_nm <= 0:
        raise ContractError("dbu_nm must be positive")
    keys = [(p.layer, p.datatype) for p in polysets]
    if len(set(keys)) != len(keys):
        raise ContractError("each (layer, datatype) pair may appear in only one polyset")

    out = [
        _record(HEADER, struct.pack(">h", STREAM_VERSION)),
        _record(BGNLIB, struct.pack(">12h", *TIMESTAMP)),
        _record(LIBNAME, _ascii(library_name)),
        # user unit = 1 micrometre
        _record(UNITS, encode_real8(dbu_nm * 1e-3) + encode_real8(dbu_nm * 1e-9)),
        _record(BGNSTR, struct.pack(">12h", *TIMESTAMP)),
        _record(STRNAME, _ascii(STRUCTURE_NAME)),
    ]
    for ps in polysets:
        for v, what in ((ps.layer, "layer"), (ps.datatype, "datatype")):
            if not 0 <= v <= 32767:
                raise LayoutRangeError(f"{what} {v} outside 0..32767")
        for ring in ps.polygons:
            validate_ring(ring)
            flat = [int(c) for p in ring for c in p]
            out += [
                _record(BOUNDARY),
                _record(LAYER, struct.pack(">h", ps.layer)),
                _record(DATATYPE, struct.pack(">h", ps.datatype)),
                _record(XY, struct.pack(f">{len(flat)}i", *flat)),
                _record(ENDEL),
            ]
    out += [_record(ENDSTR), _record(ENDLIB)]
    return b"".join(out)


# -- reading ------------------------------------------------------------------
def iter_records(data: bytes) -> Iterator[GdsRecord]:
    """Split a stream into records, never reading past a declared length."""
    pos = 0
    n = len(data)
    while pos < n:
        if n - pos < 4:
            raise GdsParseError(f"truncated record header ({n - pos} bytes left)", pos)
        length, key = struct.unpack_from(">HH", data, pos)
        if length < 4:
            raise GdsParseError(f"record length {length} is shorter than its header", pos)
        if length % 2:
            raise GdsParseError(f"odd record length {length}", pos)
        if pos + length > n:
            raise GdsParseError(f"record of {length} bytes runs past the end of the stream ({n - pos} left)", pos)
        yield GdsRecord(pos, length, key >> 8, key & 0xFF, bytes(data[pos + 4 : pos + length]))
        pos += length


def _ints(rec: GdsRecord, fmt: str, size: int, minimum: int = 1) -> tuple:
    if len(rec.payload) % size or len(rec.payload) // size < minimum:
        raise GdsParseError(f"{rec.name} payload of {len(rec.payload)} bytes is malformed", rec.offset)
    return struct.unpack(f">{len(rec.payload) // size}{fmt}", rec.payload)


def read_gds(data: bytes) -> list[PolySet]:
    """Parse a stream into polysets grouped by (layer, datatype), in first-seen order."""
    data = bytes(data)
    groups: dict[tuple[int, int], PolySet] = {}
    dbu_nm = None
    state = "start"  # start -> lib -> struct -> element -> lib ... -> end
    element: dict | None = None
    for rec in iter_records(data):
        key = rec.key
        if key in UNSUPPORTED:
            raise UnsupportedElementError(f"unsupported element {UNSUPPORTED[key]}", rec.offset)
        if state == "start":
            if key != HEADER:
                raise GdsParseError(f"stream must start with HEADER, found {rec.name}", rec.offset)
            _ints(rec, "h", 2)
            state = "header"
        elif key == BGNLIB:
            if state != "header":
                raise GdsParseError("BGNLIB out of order", rec.offset)
            state = "lib"
        elif key in (LIBNAME, STRNAME):
            if state not in ("lib", "struct"):
                raise GdsParseError(f"{rec.name} out of order", rec.offset)
        elif key == UNITS:
            if state != "lib":
                raise GdsParseError("UNITS outside the library header", rec.offset)
            if len(rec.payload) != 16:
                raise GdsParseError(f"UNITS payload must be 16 bytes, got {len(rec.payload)}", rec.offset)
            meters = decode_real8(rec.payload[8:])
            if not meters > 0:
                raise GdsParseError(f"non-positive database unit {meters}", rec.offset)
            dbu_nm = round(meters * 1e9, 9)
        elif key == BGNSTR:
            if state != "lib":
                raise GdsParseError("BGNSTR out of order", rec.offset)
            if dbu_nm is None:
                raise GdsParseError("structure begins before UNITS", rec.offset)
            state = "struct"
        elif key == ENDSTR:
            if state != "struct":
                raise GdsParseError("ENDSTR without an open structure", rec.offset)
            state = "lib"
        elif key == BOUNDARY:
            if state != "struct":
                raise GdsParseError("BOUNDARY outside a structure", rec.offset)
            element = {"offset": rec.offset}
            state = "element"
        elif key in (LAYER, DATATYPE):
            if state != "element":
                raise GdsParseError(f"{rec.name} outside an element", rec.offset)
            element["layer" if key == LAYER else "datatype"] = _ints(rec, "h", 2)[0]
        elif key == XY:
            if state != "element":
                raise GdsParseError("XY outside an element", rec.offset)
            values = _ints(rec, "i", 4, minimum=2)
            if len(values) % 2:
                raise GdsParseError("XY holds an odd number of coordinates", rec.offset)
            pts = list(zip(values[0::2], values[1::2]))
            if len(pts) < 4:
                raise GdsParseError(f"XY with {len(pts)} points; a boundary needs at least 4", rec.offset)
            if pts[0] != pts[-1]:
                raise GdsParseError("boundary XY is not closed", rec.offset)
            element["xy"] = pts
        elif key == ENDEL:
            if state != "element":
                raise GdsParseError("ENDEL without an open element", rec.offset)
            for need in ("layer", "datatype", "xy"):
                if need not in element:
                    raise GdsParseError(f"BOUNDARY lacks {need.upper()}", element["offset"])
            gk = (element["layer"], element["datatype"])
            if gk not in groups:
                groups[gk] = PolySet(gk[0], gk[1], [], dbu_nm)
            groups[gk].polygons.append(element["xy"])
            element = None
            state = "struct"
        elif key == ENDLIB:
            if state != "lib":
                raise GdsParseError(f"ENDLIB while {state} is still open", rec.offset)
            state = "end"
            # bytes after ENDLIB (often zero padding) are ignored
            break
        elif key == HEADER:
            raise GdsParseError("duplicate HEADER", rec.offset)
        else:
            warnings.warn(f"skipping unknown GDSII record {rec.name} at byte offset {rec.offset}", stacklevel=2)
    if state != "end":
        raise GdsParseError("stream ends without ENDLIB", len(data))
    return list(groups.values())
