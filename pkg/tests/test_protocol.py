import math
import struct

import numpy as np
import pytest

import lbw.protocol as pr


def roundtrip(msg):
    wire = pr.encode(msg)
    got, used = pr.try_decode(wire)
    assert used == len(wire)
    assert pr.encode(got) == wire
    return got


class TestRoundTrips:
    def test_action_spec_example(self):
        msg = pr.Action(frozenset({"W", "D"}), yaw_delta=0.1, pitch_delta=0.0, timestamp=1.5)
        wire = pr.encode(msg)
        assert wire[pr._HEADER.size] == 0b00001001
        got = roundtrip(msg)
        assert got == msg
        assert got.keys == frozenset({"W", "D"})
        assert math.isclose(got.yaw_delta, 0.1, rel_tol=1e-6)
        assert got.timestamp == 1.5

    def test_action_all_keys_and_negatives(self):
        got = roundtrip(pr.Action(frozenset("WASD"), -0.25, -0.125, 123.456))
        assert got.yaw_delta == -0.25 and got.pitch_delta == -0.125

    def test_frame(self):
        rgb = bytes(range(48)) * 4  # 8x8
        got = roundtrip(pr.Frame(chunk=7, frame=3, height=8, width=8, rgb=rgb))
        assert (got.chunk, got.frame, got.height, got.width) == (7, 3, 8, 8)
        assert got.rgb == rgb

    def test_prompt_is_utf8(self):
        assert roundtrip(pr.Prompt("nuit étoilée ✨")).text == "nuit étoilée ✨"

    def test_empty_bodied_types(self):
        assert roundtrip(pr.Reset()) == pr.Reset()
        assert roundtrip(pr.StatsRequest()) == pr.StatsRequest()

    def test_stats_json(self):
        data = {"frames": 40, "model": {"p50_ms": 12.5}, "achieved_fps": 7.9}
        assert roundtrip(pr.Stats(data)).data == data

    def test_error_reply(self):
        got = roundtrip(pr.ErrorReply("unknown_type", "type 9"))
        assert got.code == "unknown_type" and got.detail == "type 9"

    def test_wire_is_little_endian_and_headed(self):
        wire = pr.encode(pr.Reset())
        assert wire[:4] == b"LBWP"
        assert wire[4] == pr.VERSION
        assert wire[5] == pr.MSG_RESET
        assert struct.unpack_from("<I", wire, 6)[0] == 0


class TestValidation:
    def test_frame_rgb_size_enforced_at_build(self):
        with pytest.raises(ValueError, match="rgb"):
            pr.Frame(0, 0, 8, 8, b"short")

    def test_action_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown keys"):
            pr.Action(frozenset({"Q"}))

    def test_encode_rejects_foreign_objects(self):
        with pytest.raises(TypeError):
            pr.encode({"type": "ACTION"})

    def test_encode_respects_payload_cap(self):
        with pytest.raises(pr.LengthOverflowError):
            pr.encode(pr.Prompt("x" * (pr.MAX_PAYLOAD + 1)))

    def test_error_codes_are_distinct(self):
        classes = [pr.BadMagicError, pr.BadVersionError, pr.LengthOverflowError,
                   pr.ReservedBitsError, pr.UnknownTypeError, pr.MalformedPayloadError]
        codes = {c.code for c in classes}
        assert len(codes) == len(classes)


def mangle(wire: bytes, offset: int, value: int) -> bytes:
    raw = bytearray(wire)
    raw[offset] = value
    return bytes(raw)


class TestDecodeErrors:
    def test_bad_magic_loses_framing(self):
        wire = mangle(pr.encode(pr.Reset()), 0, ord("X"))
        with pytest.raises(pr.BadMagicError) as e:
            pr.try_decode(wire)
        assert e.value.consumed == 0

    def test_bad_version(self):
        wire = mangle(pr.encode(pr.Reset()), 4, pr.VERSION + 1)
        with pytest.raises(pr.BadVersionError):
            pr.try_decode(wire)

    def test_declared_length_over_cap(self):
        head = pr._HEADER.pack(pr.MAGIC, pr.VERSION, pr.MSG_PROMPT, pr.MAX_PAYLOAD + 1)
        with pytest.raises(pr.LengthOverflowError):
            pr.try_decode(head)

    def test_reserved_bits_consume_the_frame(self):
        wire = pr.encode(pr.Action(frozenset({"W"})))
        wire = mangle(wire, pr._HEADER.size, 0b00010001)
        with pytest.raises(pr.ReservedBitsError) as e:
            pr.try_decode(wire)
        assert e.value.consumed == len(wire)

    def test_unknown_type_consumes_the_frame(self):
        wire = pr._HEADER.pack(pr.MAGIC, pr.VERSION, 9, 2) + b"zz"
        with pytest.raises(pr.UnknownTypeError) as e:
            pr.try_decode(wire)
        assert e.value.consumed == len(wire)

    def test_reset_with_payload_is_malformed(self):
        wire = pr._HEADER.pack(pr.MAGIC, pr.VERSION, pr.MSG_RESET, 1) + b"!"
        with pytest.raises(pr.MalformedPayloadError):
            pr.try_decode(wire)

    def test_prompt_bad_utf8(self):
        wire = pr._HEADER.pack(pr.MAGIC, pr.VERSION, pr.MSG_PROMPT, 2) + b"\xff\xfe"
        with pytest.raises(pr.MalformedPayloadError):
            pr.try_decode(wire)

    def test_stats_non_object_json(self):
        wire = pr._HEADER.pack(pr.MAGIC, pr.VERSION, pr.MSG_STATS, 4) + b"[1]s"[:4]
        with pytest.raises(pr.MalformedPayloadError):
            pr.try_decode(wire)


class TestIncremental:
    def test_truncation_is_need_more_not_error(self):
        wire = pr.encode(pr.Action(frozenset({"A"}), 0.5, 0.0, 2.0))
        for cut in range(len(wire)):
            assert pr.try_decode(wire[:cut]) is None

    def test_decoder_reassembles_split_frames(self):
        msgs = [pr.Action(frozenset({"W"})), pr.Prompt("go"), pr.Reset()]
        wire = b"".join(pr.encode(m) for m in msgs)
        dec = pr.Decoder()
        got = []
        for i in range(0, len(wire), 3):
            got.extend(dec.feed(wire[i:i + 3]))
        assert got == msgs
        assert dec.pending() == 0

    def test_decoder_resyncs_after_a_bad_frame(self):
        good = pr.Action(frozenset({"S"}))
        bad = pr._HEADER.pack(pr.MAGIC, pr.VERSION, 9, 1) + b"?"
        tail = pr.Prompt("still here")
        dec = pr.Decoder()
        with pytest.raises(pr.UnknownTypeError) as e:
            dec.feed(pr.encode(good) + bad + pr.encode(tail))
        assert e.value.decoded == [good]
        assert dec.feed() == [tail]

    def test_decoder_poisoned_by_lost_framing(self):
        dec = pr.Decoder()
        with pytest.raises(pr.BadMagicError):
            dec.feed(b"GARBAGEGARBAGE")
        with pytest.raises(pr.BadMagicError):
            dec.feed(pr.encode(pr.Reset()))


class TestFuzz:
    def test_random_bytes_never_crash(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            n = int(rng.integers(0, 64))
            blob = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
            try:
                got = pr.try_decode(blob)
            except pr.ProtocolError:
                continue
            assert got is None or isinstance(got, tuple)

    def test_bitflipped_valid_frames_give_typed_errors(self):
        rng = np.random.default_rng(1)
        base = pr.encode(pr.Action(frozenset({"W", "A"}), 0.25, -0.5, 9.0))
        for _ in range(500):
            raw = bytearray(base)
            raw[int(rng.integers(len(raw)))] = int(rng.integers(256))
            try:
                got = pr.try_decode(bytes(raw))
            except pr.ProtocolError:
                continue
            assert got is None or isinstance(got[0], pr.Action)
