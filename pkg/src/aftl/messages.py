"""Protocol payloads and their binary wire format.

The closed message set exchanged between clients and server. Records are
length-prefixed: a 4-byte little-endian payload length, a 1-byte variant
tag, then the fields in declaration order. Tensors serialize as a 4-byte
rank, 8-byte little-endian dims, and the raw little-endian float64 payload;
index lists as a 4-byte count plus 8-byte entries. Round-trips are exact to
the bit, so recorded transcripts replay to identical states.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import FormatError


@dataclass(frozen=True)
class ParamBroadcast:
    """Initialization fan-out: the representative's extractor + classifier
    weights, in flat [W1, b1, W2, b2, ...] order."""
    extractor: tuple
    classifier: tuple


@dataclass(frozen=True)
class FeatureUpload:
    """One client's features for this round's batch."""
    client_id: int
    features: np.ndarray
    sample_indices: np.ndarray


@dataclass(frozen=True)
class TargetFeatureBroadcast:
    """Target features fanned out to source clients for consistency scoring."""
    features: np.ndarray


@dataclass(frozen=True)
class PredictionUpload:
    """A source classifier's probabilities over the broadcast target batch."""
    client_id: int
    probabilities: np.ndarray


@dataclass(frozen=True)
class DiscFeedback:
    """Discriminator loss gradient w.r.t. one client's uploaded features,
    plus that client's own discrimination-loss term."""
    client_id: int
    feature_grads: np.ndarray
    loss: float


@dataclass(frozen=True)
class ConsistencyFeedback:
    """Consistency loss gradient w.r.t. one classifier's probabilities."""
    client_id: int
    probability_grads: np.ndarray
    loss: float


MESSAGE_TYPES = (ParamBroadcast, FeatureUpload, TargetFeatureBroadcast,
                 PredictionUpload, DiscFeedback, ConsistencyFeedback)
_TAG_OF = {cls: tag for tag, cls in enumerate(MESSAGE_TYPES)}


def _pack_tensor(a):
    # asarray, not ascontiguousarray: the latter promotes rank-0 to rank-1,
    # and tobytes() already emits row-major bytes for any layout
    a = np.asarray(a, dtype=np.float64)
    parts = [struct.pack("<I", a.ndim)]
    parts.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
    parts.append(a.tobytes())
    return b"".join(parts)


def _unpack_tensor(buf, off):
    if off + 4 > len(buf):
        raise FormatError("truncated tensor rank", offset=off)
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + 8 * rank > len(buf):
        raise FormatError("truncated tensor dims", offset=off)
    dims = struct.unpack_from(f"<{rank}Q", buf, off) if rank else ()
    off += 8 * rank
    count = 1
    for d in dims:  # python ints: no overflow on hostile dims
        count *= int(d)
    nbytes = 8 * count
    if off + nbytes > len(buf):
        raise FormatError("truncated tensor payload", offset=off)
    a = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims)
    return a.astype(np.float64, copy=True), off + nbytes


def _pack_tensor_list(tensors):
    return struct.pack("<I", len(tensors)) + b"".join(_pack_tensor(t) for t in tensors)


def _unpack_tensor_list(buf, off):
    if off + 4 > len(buf):
        raise FormatError("truncated tensor-list count", offset=off)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = []
    for _ in range(count):
        t, off = _unpack_tensor(buf, off)
        out.append(t)
    return tuple(out), off


def _pack_indices(indices):
    idx = np.asarray(indices, dtype=np.int64)
    return struct.pack("<I", idx.size) + struct.pack(f"<{idx.size}q", *idx.tolist())


def _unpack_indices(buf, off):
    if off + 4 > len(buf):
        raise FormatError("truncated index count", offset=off)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + 8 * count > len(buf):
        raise FormatError("truncated index payload", offset=off)
    values = struct.unpack_from(f"<{count}q", buf, off)
    return np.array(values, dtype=np.int64), off + 8 * count


def encode_message(msg):
    """Serialize one message into a length-prefixed record."""
    tag = _TAG_OF.get(type(msg))
    if tag is None:
        raise FormatError(f"unknown message type {type(msg).__name__}")
    body = [bytes([tag])]
    if isinstance(msg, ParamBroadcast):
        body.append(_pack_tensor_list(msg.extractor))
        body.append(_pack_tensor_list(msg.classifier))
    elif isinstance(msg, FeatureUpload):
        body.append(struct.pack("<I", msg.client_id))
        body.append(_pack_tensor(msg.features))
        body.append(_pack_indices(msg.sample_indices))
    elif isinstance(msg, TargetFeatureBroadcast):
        body.append(_pack_tensor(msg.features))
    elif isinstance(msg, PredictionUpload):
        body.append(struct.pack("<I", msg.client_id))
        body.append(_pack_tensor(msg.probabilities))
    elif isinstance(msg, DiscFeedback):
        body.append(struct.pack("<I", msg.client_id))
        body.append(_pack_tensor(msg.feature_grads))
        body.append(struct.pack("<d", msg.loss))
    elif isinstance(msg, ConsistencyFeedback):
        body.append(struct.pack("<I", msg.client_id))
        body.append(_pack_tensor(msg.probability_grads))
        body.append(struct.pack("<d", msg.loss))
    payload = b"".join(body)
    return struct.pack("<I", len(payload)) + payload


def decode_message(buf, offset=0):
    """Parse one record at `offset`; returns (message, next_offset)."""
    if offset + 4 > len(buf):
        raise FormatError("truncated record length", offset=offset)
    (length,) = struct.unpack_from("<I", buf, offset)
    start = offset + 4
    end = start + length
    if end > len(buf):
        raise FormatError(f"record claims {length} bytes beyond end of buffer", offset=offset)
    if length < 1:
        raise FormatError("empty record", offset=offset)
    tag = buf[start]
    off = start + 1
    if tag >= len(MESSAGE_TYPES):
        raise FormatError(f"unknown message tag {tag}", offset=start)
    cls = MESSAGE_TYPES[tag]
    if cls is ParamBroadcast:
        extractor, off = _unpack_tensor_list(buf, off)
        classifier, off = _unpack_tensor_list(buf, off)
        msg = ParamBroadcast(extractor, classifier)
    elif cls is FeatureUpload:
        (cid,) = struct.unpack_from("<I", buf, off)
        features, off = _unpack_tensor(buf, off + 4)
        indices, off = _unpack_indices(buf, off)
        msg = FeatureUpload(cid, features, indices)
    elif cls is TargetFeatureBroadcast:
        features, off = _unpack_tensor(buf, off)
        msg = TargetFeatureBroadcast(features)
    elif cls is PredictionUpload:
        (cid,) = struct.unpack_from("<I", buf, off)
        probabilities, off = _unpack_tensor(buf, off + 4)
        msg = PredictionUpload(cid, probabilities)
    elif cls is DiscFeedback:
        (cid,) = struct.unpack_from("<I", buf, off)
        grads, off = _unpack_tensor(buf, off + 4)
        (loss,) = struct.unpack_from("<d", buf, off)
        off += 8
        msg = DiscFeedback(cid, grads, loss)
    else:
        (cid,) = struct.unpack_from("<I", buf, off)
        grads, off = _unpack_tensor(buf, off + 4)
        (loss,) = struct.unpack_from("<d", buf, off)
        off += 8
        msg = ConsistencyFeedback(cid, grads, loss)
    if off != end:
        raise FormatError(f"record length {length} does not match decoded fields", offset=off)
    return msg, end


def messages_equal(a, b):
    """Exact (bitwise for tensors) equality of two messages."""
    if type(a) is not type(b):
        return False
    for f in fields(a):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if isinstance(va, np.ndarray):
            if va.shape != vb.shape or not np.array_equal(va, vb):
                return False
        elif isinstance(va, tuple):
            if len(va) != len(vb) or any(
                    t.shape != u.shape or not np.array_equal(t, u) for t, u in zip(va, vb)):
                return False
        elif va != vb:
            return False
    return True


class Channel:
    """Message transport hook for the round loop.

    The base channel is an in-memory pass-through. The recording channel
    pushes every message through the wire encoding and appends the record to
    a file, so the running simulation consumes exactly what was written. The
    replay channel substitutes the recorded message stream, verifying that
    locally recomputed messages match it bit for bit.
    """

    def transmit(self, msg):
        return msg

    def close(self):
        pass


class RecordingChannel(Channel):
    def __init__(self, path):
        self._fh = open(path, "wb")

    def transmit(self, msg):
        record = encode_message(msg)
        self._fh.write(record)
        decoded, _ = decode_message(record)
        return decoded

    def close(self):
        self._fh.close()


class ReplayChannel(Channel):
    def __init__(self, path, verify=True):
        with open(path, "rb") as fh:
            buf = fh.read()
        self._messages = []
        off = 0
        while off < len(buf):
            msg, off = decode_message(buf, off)
            self._messages.append(msg)
        self._cursor = 0
        self._verify = verify

    def transmit(self, msg):
        if self._cursor >= len(self._messages):
            raise FormatError("transcript exhausted: more messages sent than recorded")
        recorded = self._messages[self._cursor]
        self._cursor += 1
        if self._verify and not messages_equal(msg, recorded):
            raise FormatError(
                f"replay divergence at message {self._cursor - 1}: "
                f"recomputed {type(msg).__name__} differs from recorded "
                f"{type(recorded).__name__}")
        return recorded

    @property
    def exhausted(self):
        return self._cursor == len(self._messages)
