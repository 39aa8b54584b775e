"""Wire format: exact round-trips, malformed input, record/replay channels."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aftl.errors import FormatError
from aftl.messages import (Channel, ConsistencyFeedback, DiscFeedback,
                           FeatureUpload, ParamBroadcast, PredictionUpload,
                           RecordingChannel, ReplayChannel,
                           TargetFeatureBroadcast, decode_message,
                           encode_message, messages_equal)


def _random_message(rng):
    kind = rng.integers(0, 6)
    tensor = lambda *shape: rng.normal(size=shape)
    cid = int(rng.integers(0, 12))
    if kind == 0:
        return ParamBroadcast(
            tuple(tensor(*rng.integers(1, 5, size=2)) for _ in range(rng.integers(1, 4))),
            tuple(tensor(*rng.integers(1, 5, size=2)) for _ in range(rng.integers(1, 4))))
    if kind == 1:
        n = int(rng.integers(1, 6))
        return FeatureUpload(cid, tensor(n, int(rng.integers(1, 7))),
                             rng.integers(0, 1000, size=n).astype(np.int64))
    if kind == 2:
        return TargetFeatureBroadcast(tensor(int(rng.integers(1, 6)), 4))
    if kind == 3:
        return PredictionUpload(cid, tensor(3, 5))
    if kind == 4:
        return DiscFeedback(cid, tensor(4, 6), float(rng.normal()))
    return ConsistencyFeedback(cid, tensor(2, 3), float(rng.normal()))


def test_each_variant_round_trips_exactly():
    rng = np.random.default_rng(0)
    seen = set()
    while len(seen) < 6:
        msg = _random_message(rng)
        seen.add(type(msg).__name__)
        decoded, consumed = decode_message(encode_message(msg))
        assert consumed == len(encode_message(msg))
        assert messages_equal(msg, decoded)


def test_thousand_randomized_round_trips():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        msg = _random_message(rng)
        decoded, _ = decode_message(encode_message(msg))
        assert messages_equal(msg, decoded)


@given(st.integers(0, 2**31 - 1),
       hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(allow_nan=False, width=64)))
@settings(max_examples=60, deadline=None)
def test_feedback_round_trip_property(cid, grads):
    msg = DiscFeedback(cid, grads, float(grads.flat[0]))
    decoded, _ = decode_message(encode_message(msg))
    assert decoded.client_id == cid
    assert np.array_equal(decoded.feature_grads, grads)
    assert decoded.loss == msg.loss


def test_special_float_values_survive():
    grads = np.array([[0.0, -0.0, 5e-324, -1.7976931348623157e308]])
    decoded, _ = decode_message(encode_message(DiscFeedback(1, grads, 0.0)))
    assert decoded.feature_grads.tobytes() == grads.tobytes()


def test_high_rank_and_scalar_tensors_round_trip():
    # conv weights are rank 4; biases rank 1; scalars rank 0
    rng = np.random.default_rng(4)
    msg = ParamBroadcast(
        (rng.normal(size=(3, 2, 5, 5)), rng.normal(size=3)),
        (rng.normal(size=(4, 2)), np.float64(1.75)))
    decoded, _ = decode_message(encode_message(msg))
    assert messages_equal(msg, decoded)
    assert decoded.classifier[1].shape == ()


def test_stream_of_records_decodes_in_order():
    rng = np.random.default_rng(7)
    msgs = [_random_message(rng) for _ in range(20)]
    buf = b"".join(encode_message(m) for m in msgs)
    off = 0
    for expected in msgs:
        got, off = decode_message(buf, off)
        assert messages_equal(expected, got)
    assert off == len(buf)


class TestMalformedInput:
    def test_truncated_length(self):
        with pytest.raises(FormatError):
            decode_message(b"\x01\x02")

    def test_record_longer_than_buffer(self):
        record = encode_message(TargetFeatureBroadcast(np.zeros((2, 2))))
        with pytest.raises(FormatError) as err:
            decode_message(record[:-3])
        assert err.value.offset is not None

    def test_unknown_tag(self):
        bad = b"\x01\x00\x00\x00" + bytes([99])
        with pytest.raises(FormatError):
            decode_message(bad)

    def test_length_field_mismatch(self):
        record = bytearray(encode_message(PredictionUpload(1, np.zeros((1, 2)))))
        record[0:4] = (len(record) - 4 + 8).to_bytes(4, "little")
        record.extend(b"\x00" * 8)
        with pytest.raises(FormatError):
            decode_message(bytes(record))

    def test_hostile_dims_rejected_cleanly(self):
        # dims whose product overflows int64 must still raise FormatError
        record = bytearray(encode_message(TargetFeatureBroadcast(np.zeros((2, 2)))))
        huge = (2**40).to_bytes(8, "little")
        record[9:17] = huge
        record[17:25] = huge
        with pytest.raises(FormatError):
            decode_message(bytes(record))


class TestChannels:
    def test_recording_passes_through_decoded_values(self, tmp_path):
        path = tmp_path / "transcript.bin"
        chan = RecordingChannel(path)
        msg = DiscFeedback(3, np.random.default_rng(0).normal(size=(4, 5)), 1.25)
        out = chan.transmit(msg)
        chan.close()
        assert messages_equal(msg, out)
        replay = ReplayChannel(path)
        assert messages_equal(replay.transmit(msg), msg)
        assert replay.exhausted

    def test_replay_detects_divergence(self, tmp_path):
        path = tmp_path / "transcript.bin"
        chan = RecordingChannel(path)
        chan.transmit(PredictionUpload(1, np.ones((2, 2))))
        chan.close()
        replay = ReplayChannel(path)
        with pytest.raises(FormatError):
            replay.transmit(PredictionUpload(1, np.zeros((2, 2))))

    def test_replay_exhaustion(self, tmp_path):
        path = tmp_path / "transcript.bin"
        RecordingChannel(path).close()
        replay = ReplayChannel(path)
        with pytest.raises(FormatError):
            replay.transmit(TargetFeatureBroadcast(np.zeros((1, 1))))

    def test_base_channel_is_identity(self):
        msg = TargetFeatureBroadcast(np.ones((2, 3)))
        assert Channel().transmit(msg) is msg
