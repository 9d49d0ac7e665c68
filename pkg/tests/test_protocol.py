import json
import math
import struct

import numpy as np
import pytest

from splitpriv.model import PLMConfig, build_plm
from splitpriv.privatizer import PrivacyConfig
from splitpriv.protocol import (C2V, HEADER_SIZE, V2C, DecodeError, Endpoint, Message, MsgType, ProtocolError,
                                SessionConfig, TranscriptLog, decode_message, encode_message, loopback_pair,
                                run_centralized, run_inference, run_session, tcp_pair, validate_message,
                                verify_transcript)

SID = bytes(range(16))


def random_message(rng) -> Message:
    tensors = [rng.normal(size=tuple(rng.integers(1, 5, size=rng.integers(1, 4)))).astype(np.float32)
               for _ in range(rng.integers(0, 3))]
    mask = None
    if rng.random() < 0.5:
        mask = rng.random(tuple(rng.integers(1, 5, size=2))) < 0.5
    meta = {"step": int(rng.integers(0, 1000)), "note": "x" * int(rng.integers(0, 5))}
    return Message(MsgType(int(rng.integers(1, 10))), rng.bytes(16), int(rng.integers(0, 2**63)), tensors, meta, mask)


class TestWireFormat:
    @pytest.mark.parametrize("mt", list(MsgType))
    def test_round_trip_each_type(self, mt, rng):
        msg = Message(mt, SID, 7, [rng.normal(size=(2, 3)).astype(np.float32)], {"k": [1, 2]},
                      np.array([[True, False]]))
        assert decode_message(encode_message(msg)) == msg

    def test_random_round_trips(self, rng):
        for _ in range(300):
            msg = random_message(rng)
            frame = encode_message(msg)
            assert decode_message(frame) == msg
            assert encode_message(decode_message(frame)) == frame

    def test_rep_batch_size_arithmetic(self):
        b, n, d = 2, 8, 64
        meta = {"epoch": 0, "round": 0, "step": 0, "total_steps": 1}
        msg = Message(MsgType.REP_BATCH, SID, 0, [np.zeros((b, n, d), np.float32)], meta, np.ones((b, n), bool))
        meta_len = len(json.dumps(meta, sort_keys=True, separators=(",", ":")))
        tensor = 1 + 3 * 8 + b * n * d * 4
        mask = 1 + 2 * 8 + b * n
        assert len(encode_message(msg)) == HEADER_SIZE + 4 + meta_len + 4 + tensor + mask
        assert HEADER_SIZE == 4 + 1 + 16 + 8 + 8

    def test_header_fields(self):
        frame = encode_message(Message(MsgType.DONE, SID, 5))
        magic, t, sid, seq, plen = struct.unpack_from("<4sB16sQQ", frame)
        assert (magic, t, sid, seq, plen) == (b"SAP1", 9, SID, 5, len(frame) - HEADER_SIZE)

    def test_truncation(self):
        frame = encode_message(Message(MsgType.OUTPUT_GRAD, SID, 0, [np.ones((2, 2), np.float32)]))
        for cut in (3, HEADER_SIZE - 1, HEADER_SIZE + 5, len(frame) - 1):
            with pytest.raises(DecodeError):
                decode_message(frame[:cut])

    def test_bad_magic(self):
        frame = bytearray(encode_message(Message(MsgType.DONE, SID, 0)))
        frame[:4] = b"XXXX"
        with pytest.raises(DecodeError):
            decode_message(bytes(frame))

    def test_unknown_type(self):
        frame = bytearray(encode_message(Message(MsgType.DONE, SID, 0)))
        frame[4] = 42
        with pytest.raises(DecodeError):
            decode_message(bytes(frame))

    def test_trailing_bytes(self):
        with pytest.raises(DecodeError):
            decode_message(encode_message(Message(MsgType.DONE, SID, 0)) + b"\x00")


class TestSchema:
    def test_labels_cannot_cross(self):
        msg = Message(MsgType.REP_BATCH_FULL, SID, 0, [np.zeros((1, 2, 4), np.float32)],
                      {"sample_ids": [0], "round": 0, "labels": [1]}, np.ones((1, 2), bool))
        with pytest.raises(ProtocolError, match="labels"):
            validate_message(msg, C2V)

    def test_wrong_direction(self):
        with pytest.raises(ProtocolError):
            validate_message(Message(MsgType.OUTPUT_BATCH, SID, 0, [np.zeros((1, 2))], {}), C2V)

    def test_shape_checked_against_model(self):
        cfg = PLMConfig(embed_dim=16, max_seq_len=8)
        msg = Message(MsgType.EVAL_REQUEST, SID, 0, [np.zeros((1, 4, 12), np.float32)], {"batch": 0, "round": 0},
                      np.ones((1, 4), bool))
        with pytest.raises(ProtocolError):
            validate_message(msg, C2V, cfg)

    def test_missing_mask(self):
        msg = Message(MsgType.REP_BATCH, SID, 0, [np.zeros((1, 2, 4), np.float32)], {})
        with pytest.raises(ProtocolError):
            validate_message(msg, C2V)

    def test_out_of_order_sequence(self):
        a, b = loopback_pair()
        a.send(encode_message(Message(MsgType.DONE, SID, 3, meta={"reason": "x"})))
        ep = Endpoint(b, SID, V2C, TranscriptLog())
        with pytest.raises(ProtocolError, match="out-of-order"):
            ep.recv()

    def test_foreign_session(self):
        a, b = loopback_pair()
        a.send(encode_message(Message(MsgType.DONE, bytes(16), 0, meta={"reason": "x"})))
        with pytest.raises(ProtocolError, match="session"):
            Endpoint(b, SID, V2C, TranscriptLog()).recv()


def test_tcp_carries_frames():
    a, b = tcp_pair()
    try:
        for size in (0, 10, 300000):
            frame = encode_message(Message(MsgType.OUTPUT_GRAD, SID, 0, [np.ones(size + 1, np.float32)]))
            a.send(frame)
            assert b.recv(5) == frame
    finally:
        a.close()
        b.close()


def session(**kw) -> SessionConfig:
    kw.setdefault("epochs", 1)
    return SessionConfig(**kw)


class TestSessions:
    def test_zero_epochs_only_bottom_and_done(self, tiny_plm, small_splits):
        res = run_session(tiny_plm, session(epochs=0), small_splits[0])
        assert [e.msg_type for e in res.transcript.entries] == ["BOTTOM_MODEL", "DONE", "DONE"]
        assert res.customer.losses == []

    def test_frozen_message_counts(self, tiny_plm, small_splits):
        train = small_splits[0]
        res = run_session(tiny_plm, session(epochs=2, batch_size=10, split=1), train)
        t = res.transcript
        steps = 2 * math.ceil(len(train) / 10)
        assert t.count(MsgType.REP_BATCH_FULL) == 1
        assert t.count(MsgType.REP_BATCH) == 0
        assert t.count(MsgType.OUTPUT_BATCH) == t.count(MsgType.OUTPUT_GRAD) == steps
        assert len(res.customer.losses) == steps

    def test_trainable_message_counts(self, tiny_plm, small_splits):
        train = small_splits[0]
        res = run_session(tiny_plm, session(epochs=2, batch_size=10, split=1, bottom_trainable=True), train)
        steps = 2 * math.ceil(len(train) / 10)
        assert res.transcript.count(MsgType.REP_BATCH) == steps
        assert res.transcript.count(MsgType.INPUT_GRAD) == steps
        assert res.transcript.count(MsgType.REP_BATCH_FULL) == 0

    def test_customer_payloads_hold_no_labels(self, tiny_plm, small_splits):
        train = small_splits[0]
        res = run_session(tiny_plm, session(split=1), train, keep_frames=True)
        for direction, msg in res.transcript.messages():
            if direction == C2V:
                assert "labels" not in json.dumps(msg.meta)
                # no integer tensor equal to the label vector
                for t in msg.tensors:
                    assert t.shape != train.labels.shape

    def test_split_equals_centralized(self, tiny_plm, small_splits):
        train, dev, _ = small_splits
        s = session(epochs=2, split=2)
        res = run_session(tiny_plm, s, train, {"dev": dev})
        oracle = run_centralized(tiny_plm, s, train, {"dev": dev})
        assert res.customer.losses == oracle.losses
        assert np.array_equal(res.customer.predictions["dev"], oracle.predictions["dev"])
        trained = res.vendor.top.trainable()
        for k, t in oracle.top.trainable().items():
            assert trained[k].data.tobytes() == t.data.tobytes(), k

    def test_trainable_split_equals_centralized_with_privacy(self, tiny_plm, small_splits):
        train, dev, _ = small_splits
        s = session(epochs=1, split=1, bottom_trainable=True, privacy=PrivacyConfig(eta=50.0))
        res = run_session(tiny_plm, s, train, {"dev": dev})
        oracle = run_centralized(tiny_plm, s, train, {"dev": dev})
        assert res.customer.losses == oracle.losses
        assert res.customer.accuracy == oracle.accuracy

    def test_transports_agree(self, tiny_plm, small_splits):
        s = session(split=1, privacy=PrivacyConfig(eta=50.0))
        a = run_session(tiny_plm, s, small_splits[0], {"dev": small_splits[1]})
        b = run_session(tiny_plm, s, small_splits[0], {"dev": small_splits[1]}, transport="tcp")
        assert a.transcript.digest() == b.transcript.digest()

    def test_dumps_verify(self, tiny_plm, small_splits, tmp_path):
        res = run_session(tiny_plm, session(split=1), small_splits[0], dump_dir=tmp_path / "d")
        res.transcript.save(tmp_path / "t.jsonl")
        entries = TranscriptLog.load(tmp_path / "t.jsonl")
        assert verify_transcript(entries, tmp_path / "d")
        victim = sorted((tmp_path / "d").glob("*.bin"))[1]
        raw = bytearray(victim.read_bytes())
        raw[-1] ^= 1
        victim.write_bytes(bytes(raw))
        assert not verify_transcript(entries, tmp_path / "d")

    def test_bad_split_aborts(self, tiny_plm, small_splits):
        with pytest.raises(ProtocolError):
            run_session(tiny_plm, session(split=9), small_splits[0])

    def test_vendor_frozen_bottom_unchanged(self, tiny_plm, small_splits):
        res = run_session(tiny_plm, session(split=2), small_splits[0])
        for k, t in res.customer.bottom.params.items():
            assert t.data.tobytes() == tiny_plm.params[k].data.tobytes()


class TestInference:
    def _serve(self, plm, s, fn):
        """Run the vendor in a thread while ``fn(endpoint, bottom)`` plays the customer."""
        import threading
        from splitpriv.protocol import _recv_bottom, run_vendor
        vt, ct = loopback_pair()
        th = threading.Thread(target=run_vendor, args=(plm, s, vt), daemon=True)
        th.start()
        ep, bottom = _recv_bottom(ct, s, TranscriptLog(), 30)
        out = fn(ep, bottom)
        ep.send(MsgType.DONE, meta={"reason": "complete"})
        ep.recv(MsgType.DONE)
        th.join()
        return out

    def test_deterministic_and_empty(self, tiny_plm, small_splits):
        s = session(epochs=0, split=1, privacy=PrivacyConfig(eta=40.0))
        ids = small_splits[1].ids[:5]

        def play(ep, bottom):
            a = run_inference(ep, bottom, ids, s.privacy)
            b = run_inference(ep, bottom, ids, s.privacy)
            empty = run_inference(ep, bottom, np.array([[2, 3] + [0] * 30]), s.privacy)
            return a, b, empty

        a, b, empty = self._serve(tiny_plm, s, play)
        assert np.array_equal(a[1], b[1])
        assert empty[0].shape == (1,) and np.isfinite(empty[1]).all()
