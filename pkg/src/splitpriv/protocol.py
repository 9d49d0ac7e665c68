"""Vendor/customer state machines, wire format and transports.

Frame layout (all integers little-endian)::

    b"SAP1" | msg_type u8 | session_id 16B | seq u64 | payload_len u64 | payload

Payload::

    meta_len u32 | meta JSON (utf-8, sorted keys)
    tensor_count u32 | per tensor: rank u8, dims u64 * rank, float32 data
    mask: rank u8 (0 = absent), dims u64 * rank, one byte per entry

The vendor holds the top model and all trainable adapters; the customer holds
the data, the labels and the bottom model it received.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import queue
import socket
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import (AdamW, BottomModel, LoraConfig, PLM, PLMConfig, TopModel, attach_lora, forward_bottom,
                    forward_top, linear_lr, merge_lora, split_model)
from .numerics import Graph, Tensor
from .privatizer import INFERENCE_ROUND, ContributingSet, NearestNeighbor, PrivacyConfig, identify_contributing, \
    privatize_ids

MAGIC = b"SAP1"
_HEADER = struct.Struct("<4sB16sQQ")
HEADER_SIZE = _HEADER.size


class ProtocolError(RuntimeError):
    pass


class DecodeError(ProtocolError):
    pass


class TransportClosed(ProtocolError):
    pass


class MsgType(enum.IntEnum):
    BOTTOM_MODEL = 1
    REP_BATCH_FULL = 2
    REP_BATCH = 3
    OUTPUT_BATCH = 4
    OUTPUT_GRAD = 5
    INPUT_GRAD = 6
    EVAL_REQUEST = 7
    EVAL_RESPONSE = 8
    DONE = 9


@dataclass
class Message:
    msg_type: MsgType
    session_id: bytes
    seq: int
    tensors: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    mask: np.ndarray | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        if (self.msg_type, self.session_id, self.seq, self.meta) != \
                (other.msg_type, other.session_id, other.seq, other.meta):
            return False
        if len(self.tensors) != len(other.tensors):
            return False
        if any(a.shape != b.shape or a.astype("<f4").tobytes() != b.astype("<f4").tobytes()
               for a, b in zip(self.tensors, other.tensors)):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or np.array_equal(self.mask.astype(bool), other.mask.astype(bool))


# -- wire format ---------------------------------------------------------------

def _pack_array(arr: np.ndarray, dtype: str) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ProtocolError("array rank too large")
    dims = struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape)
    return dims + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def encode_payload(tensors, meta: dict, mask) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t)
        if t.ndim == 0 or t.ndim > nx.MAX_RANK:
            raise ProtocolError(f"tensor rank {t.ndim} not in [1, {nx.MAX_RANK}]")
        parts.append(_pack_array(t, "<f4"))
    if mask is None:
        parts.append(b"\x00")
    else:
        parts.append(_pack_array(np.asarray(mask, dtype=bool), "u1"))
    return b"".join(parts)


def encode_message(msg: Message) -> bytes:
    if len(msg.session_id) != 16:
        raise ProtocolError("session_id must be 16 bytes")
    payload = encode_payload(msg.tensors, msg.meta, msg.mask)
    return _HEADER.pack(MAGIC, int(msg.msg_type), msg.session_id, msg.seq, len(payload)) + payload


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise DecodeError("truncated message")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, itemsize: int, allow_empty_rank: bool):
        (rank,) = self.unpack("<B")
        if rank == 0:
            if allow_empty_rank:
                return None
            raise DecodeError("tensor of rank 0")
        dims = self.unpack(f"<{rank}Q")
        count = math.prod(dims)
        raw = self.take(count * itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def decode_header(buf: bytes) -> tuple[MsgType, bytes, int, int]:
    if len(buf) < HEADER_SIZE:
        raise DecodeError("truncated header")
    magic, mtype, sid, seq, plen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise DecodeError(f"unknown message type {mtype}") from None
    return mtype, sid, seq, plen


def decode_message(buf: bytes) -> Message:
    mtype, sid, seq, plen = decode_header(buf)
    if len(buf) != HEADER_SIZE + plen:
        raise DecodeError(f"payload length {len(buf) - HEADER_SIZE} != declared {plen}")
    r = _Reader(buf, HEADER_SIZE)
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DecodeError("corrupt metadata block") from None
    (count,) = r.unpack("<I")
    tensors = [r.array("<f4", 4, False).astype(np.float32) for _ in range(count)]
    mask = r.array("u1", 1, True)
    if mask is not None:
        mask = mask.astype(bool)
    if r.pos != len(buf):
        raise DecodeError("trailing bytes after payload")
    return Message(mtype, sid, seq, tensors, meta, mask)


def frame_hash(frame: bytes) -> str:
    return hashlib.blake2b(frame, digest_size=16).hexdigest()


# -- transports -------------------------------------------------------------

class Transport:
    """Ordered, reliable byte-frame channel; one endpoint per party."""

    def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackTransport(Transport):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self.inbox = inbox
        self.outbox = outbox

    def send(self, frame: bytes) -> None:
        self.outbox.put(bytes(frame))

    def recv(self, timeout: float | None = None) -> bytes:
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportClosed("receive timed out") from None
        if item is None:
            raise TransportClosed("peer closed the channel")
        return item

    def close(self) -> None:
        self.outbox.put(None)


def loopback_pair() -> tuple[LoopbackTransport, LoopbackTransport]:
    a, b = queue.Queue(), queue.Queue()
    return LoopbackTransport(a, b), LoopbackTransport(b, a)


class TcpTransport(Transport):
    """Frames are self-delimiting via the header's payload length."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _read(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise TransportClosed("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def send(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportClosed(f"send failed: {exc}") from None

    def recv(self, timeout: float | None = None) -> bytes:
        self.sock.settimeout(timeout)
        try:
            head = self._read(HEADER_SIZE)
            _, _, _, plen = decode_header(head)
            return head + self._read(plen)
        except socket.timeout:
            raise TransportClosed("receive timed out") from None
        except OSError as exc:
            raise TransportClosed(f"receive failed: {exc}") from None

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def tcp_pair(host: str = "127.0.0.1") -> tuple[TcpTransport, TcpTransport]:
    """Connected (vendor, customer) endpoints over a real localhost socket."""
    with socket.create_server((host, 0)) as srv:
        client = socket.create_connection(srv.getsockname())
        server, _ = srv.accept()
    return TcpTransport(server), TcpTransport(client)


def transport_pair(kind: str):
    if kind == "loopback":
        return loopback_pair()
    if kind == "tcp":
        return tcp_pair()
    raise ProtocolError(f"unknown transport {kind!r}")


# -- session configuration and transcript ---------------------------------------

@dataclass
class SessionConfig:
    split: int = 0
    bottom_trainable: bool = False
    epochs: int = 2
    batch_size: int = 16
    lr: float = 3e-3
    bottom_lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_seed: int = 0
    shuffle_seed: int = 0
    eval_batch_size: int = 64
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    timeout: float = 600.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["privacy"] = self.privacy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "privacy" in d and isinstance(d["privacy"], dict):
            d["privacy"] = PrivacyConfig.from_dict(d["privacy"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def validate(self, plm_config: PLMConfig) -> None:
        if not 0 <= self.split <= plm_config.num_blocks:
            raise ProtocolError(f"split {self.split} outside [0, {plm_config.num_blocks}]")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ProtocolError("epochs must be >= 0 and batch sizes >= 1")
        self.privacy.validate()

    def session_id(self, plm_config: PLMConfig) -> bytes:
        """Deterministic 16-byte id derived from the full configuration."""
        blob = json.dumps({"session": self.to_dict(), "plm": plm_config.to_dict()}, sort_keys=True, default=str)
        return hashlib.blake2b(blob.encode(), digest_size=16).digest()

    def lora_config(self) -> LoraConfig:
        return LoraConfig(self.lora_rank, self.lora_alpha, self.lora_seed)


V2C, C2V = "v->c", "c->v"
_DIRECTION = {
    MsgType.BOTTOM_MODEL: V2C, MsgType.OUTPUT_BATCH: V2C, MsgType.INPUT_GRAD: V2C, MsgType.EVAL_RESPONSE: V2C,
    MsgType.REP_BATCH_FULL: C2V, MsgType.REP_BATCH: C2V, MsgType.OUTPUT_GRAD: C2V, MsgType.EVAL_REQUEST: C2V,
}
# allowed metadata keys and tensor count per message type; customer->vendor
# entries form the privacy boundary (no labels, nothing derived from them
# except the output-layer gradient tensor)
_SCHEMA = {
    MsgType.BOTTOM_MODEL: ({"config", "split", "names"}, None, False),
    MsgType.REP_BATCH_FULL: ({"sample_ids", "round"}, 1, True),
    MsgType.REP_BATCH: ({"epoch", "step", "round", "total_steps"}, 1, True),
    MsgType.OUTPUT_BATCH: ({"epoch", "step", "sample_ids"}, 1, False),
    MsgType.OUTPUT_GRAD: ({"step"}, 1, False),
    MsgType.INPUT_GRAD: ({"step"}, 1, False),
    MsgType.EVAL_REQUEST: ({"batch", "round"}, 1, True),
    MsgType.EVAL_RESPONSE: ({"batch"}, 1, False),
    MsgType.DONE: ({"reason"}, 0, False),
}


def validate_message(msg: Message, direction: str, plm_config: PLMConfig | None = None) -> None:
    """Schema check applied to every message sent or received."""
    keys, count, needs_mask = _SCHEMA[msg.msg_type]
    want_dir = _DIRECTION.get(msg.msg_type)
    if want_dir is not None and want_dir != direction:
        raise ProtocolError(f"{msg.msg_type.name} may not travel {direction}")
    extra = set(msg.meta) - keys
    if extra:
        raise ProtocolError(f"{msg.msg_type.name} carries unexpected metadata {sorted(extra)}")
    if count is not None and len(msg.tensors) != count:
        raise ProtocolError(f"{msg.msg_type.name} expects {count} tensor(s), got {len(msg.tensors)}")
    if needs_mask and (msg.mask is None or msg.mask.shape != msg.tensors[0].shape[:2]):
        raise ProtocolError(f"{msg.msg_type.name} needs a token mask matching the representation")
    if plm_config is None:
        return
    d, n, C = plm_config.embed_dim, plm_config.max_seq_len, plm_config.num_classes
    t = msg.tensors[0] if msg.tensors else None
    if msg.msg_type in (MsgType.REP_BATCH_FULL, MsgType.REP_BATCH, MsgType.EVAL_REQUEST, MsgType.INPUT_GRAD):
        if t.ndim != 3 or t.shape[2] != d or t.shape[1] > n:
            raise ProtocolError(f"{msg.msg_type.name} tensor shape {t.shape} does not fit d={d}, n<={n}")
    elif msg.msg_type in (MsgType.OUTPUT_BATCH, MsgType.OUTPUT_GRAD, MsgType.EVAL_RESPONSE):
        if t.ndim != 2 or t.shape[1] != C:
            raise ProtocolError(f"{msg.msg_type.name} tensor shape {t.shape} does not fit C={C}")


@dataclass
class TranscriptEntry:
    direction: str
    msg_type: str
    seq: int
    size: int
    hash: str

    def to_json(self) -> str:
        return json.dumps({"dir": self.direction, "type": self.msg_type, "seq": self.seq,
                           "bytes": self.size, "hash": self.hash}, sort_keys=True)


class TranscriptLog:
    """Append-only record of every frame a party sent or received."""

    def __init__(self, dump_dir=None, keep_frames: bool = False):
        self.entries: list[TranscriptEntry] = []
        self.frames: list[tuple[str, bytes]] | None = [] if keep_frames else None
        self.dump_dir = Path(dump_dir) if dump_dir else None
        if self.dump_dir:
            self.dump_dir.mkdir(parents=True, exist_ok=True)

    def record(self, direction: str, msg_type: MsgType, seq: int, frame: bytes) -> None:
        self.entries.append(TranscriptEntry(direction, msg_type.name, seq, len(frame), frame_hash(frame)))
        if self.frames is not None:
            self.frames.append((direction, frame))
        if self.dump_dir:
            tag = "v2c" if direction == V2C else "c2v"
            (self.dump_dir / f"{len(self.entries) - 1:06d}_{tag}_{msg_type.name}.bin").write_bytes(frame)

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.entries)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    def digest(self) -> str:
        return hashlib.blake2b(self.to_jsonl().encode(), digest_size=16).hexdigest()

    def count(self, msg_type: MsgType, direction: str | None = None) -> int:
        return sum(e.msg_type == msg_type.name and (direction is None or e.direction == direction)
                   for e in self.entries)

    def messages(self) -> list[tuple[str, Message]]:
        """Decoded frames, from memory or from the dump directory."""
        if self.frames is not None:
            return [(d, decode_message(f)) for d, f in self.frames]
        if self.dump_dir is not None:
            return load_dumped_messages(self.dump_dir)
        raise ProtocolError("transcript kept neither frames nor a dump directory")

    @staticmethod
    def load(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def verify_transcript(entries: list[dict], dump_dir) -> bool:
    """Re-hash dumped frames and compare with the logged summaries."""
    files = sorted(Path(dump_dir).glob("*.bin"))
    if len(files) != len(entries):
        return False
    for entry, f in zip(entries, files):
        frame = f.read_bytes()
        msg = decode_message(frame)
        if (frame_hash(frame) != entry["hash"] or len(frame) != entry["bytes"]
                or msg.seq != entry["seq"] or msg.msg_type.name != entry["type"]):
            return False
    return True


def load_dumped_messages(dump_dir) -> list[tuple[str, Message]]:
    out = []
    for f in sorted(Path(dump_dir).glob("*.bin")):
        direction = V2C if "_v2c_" in f.name else C2V
        out.append((direction, decode_message(f.read_bytes())))
    if not out:
        raise ProtocolError(f"no payload dumps in {dump_dir}")
    return out


class Endpoint:
    """Sequence-numbered, schema-checked, logged message channel for one party."""

    def __init__(self, transport: Transport, session_id: bytes, outgoing: str, log: TranscriptLog,
                 plm_config: PLMConfig | None = None, timeout: float | None = None):
        self.transport = transport
        self.session_id = session_id
        self.outgoing = outgoing
        self.incoming = C2V if outgoing == V2C else V2C
        self.log = log
        self.plm_config = plm_config
        self.timeout = timeout
        self.send_seq = 0
        self.recv_seq = 0

    def send(self, msg_type: MsgType, tensors=(), meta=None, mask=None) -> Message:
        msg = Message(msg_type, self.session_id, self.send_seq,
                      [np.asarray(t, dtype=np.float32) for t in tensors], meta or {}, mask)
        validate_message(msg, self.outgoing, self.plm_config)
        frame = encode_message(msg)
        self.log.record(self.outgoing, msg_type, msg.seq, frame)
        self.transport.send(frame)
        self.send_seq += 1
        return msg

    def recv(self, *expected: MsgType) -> Message:
        frame = self.transport.recv(self.timeout)
        msg = decode_message(frame)
        if msg.session_id != self.session_id:
            raise ProtocolError("message from a different session")
        if msg.seq != self.recv_seq:
            raise ProtocolError(f"out-of-order message: seq {msg.seq}, expected {self.recv_seq}")
        if expected and msg.msg_type not in expected:
            raise ProtocolError(f"unexpected {msg.msg_type.name}; expected {[e.name for e in expected]}")
        validate_message(msg, self.incoming, self.plm_config)
        self.log.record(self.incoming, msg.msg_type, msg.seq, frame)
        self.recv_seq += 1
        return msg


# -- shared computation (used by both parties and by the centralized oracle) -----

def epoch_orders(n: int, epochs: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.permutation(n) for _ in range(epochs)]


def batches(order: np.ndarray, b: int) -> list[np.ndarray]:
    return [order[i:i + b] for i in range(0, len(order), b)]


def loss_and_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Customer-side loss on received logits and the output-layer gradient."""
    lt = Tensor(logits, requires_grad=True)
    with Graph() as g:
        loss = nx.cross_entropy(lt, labels)
    g.backward(loss)
    return float(loss.data), lt.grad


def top_forward(top: TopModel, reps: np.ndarray, mask, graph_grad: bool = False):
    """Vendor forward; returns (logits tensor, input tensor, graph)."""
    x = Tensor(reps, requires_grad=graph_grad)
    g = Graph()
    with g:
        logits = forward_top(top, x, mask)
    return logits, x, g


def top_backward(opt: AdamW, g: Graph, logits: Tensor, grad: np.ndarray, lr: float) -> None:
    opt.zero_grad()
    g.backward(logits, grad)
    opt.step(lr)


def customer_reps(bottom: BottomModel, ids: np.ndarray, privacy: PrivacyConfig, contributing, round_id: int,
                  sample_ids, nn: NearestNeighbor | None = None, track: bool = False):
    """Privatise token ids, then run the bottom model.

    Returns (representation tensor, released ids, graph or None). With
    ``track`` the graph routes the embedding gradient to the original ids
    (straight-through past the nearest-neighbour remap).
    """
    released = privatize_ids(ids, bottom.token_table.data, privacy, contributing, round_id, sample_ids, nn).token_ids
    if track:
        g = Graph()
        with g:
            h = forward_bottom(bottom, released, grad_ids=ids)
        return h, released, g
    return forward_bottom(bottom, released), released, None


def _round_for_epoch(epoch: int) -> int:
    return epoch


@dataclass
class VendorResult:
    top: TopModel
    plm: PLM               # fine-tuned model with adapters merged
    transcript: TranscriptLog
    steps: int = 0


@dataclass
class CustomerResult:
    transcript: TranscriptLog
    losses: list[float] = field(default_factory=list)
    predictions: dict[str, np.ndarray] = field(default_factory=dict)
    accuracy: dict[str, float] = field(default_factory=dict)
    contributing: ContributingSet | None = None
    released_ids: np.ndarray | None = None
    bottom: BottomModel | None = None


def _bottom_message(bottom: BottomModel) -> tuple[list[np.ndarray], dict]:
    names = list(bottom.params)
    return [bottom.params[k].data for k in names], {"config": bottom.config.to_dict(), "split": bottom.split,
                                                    "names": names}


def bottom_from_message(msg: Message, trainable: bool = False) -> BottomModel:
    cfg = PLMConfig.from_dict(msg.meta["config"])
    params = {k: Tensor(t.copy(), name=k) for k, t in zip(msg.meta["names"], msg.tensors)}
    b = BottomModel(cfg, int(msg.meta["split"]), params)
    b.set_trainable(trainable)
    return b


def run_vendor(plm: PLM, session: SessionConfig, transport: Transport, dump_dir=None,
               keep_frames: bool = False) -> VendorResult:
    """Vendor state machine: send bottom, train the top on received batches, serve evaluation."""
    session.validate(plm.config)
    sid = session.session_id(plm.config)
    log = TranscriptLog(dump_dir, keep_frames)
    ep = Endpoint(transport, sid, V2C, log, plm.config, session.timeout)
    work = plm.copy()
    bottom, top = split_model(work, session.split, bottom_frozen=True)
    attach_lora(top, session.lora_config())
    opt = AdamW(top.trainable(), session.betas, session.weight_decay, decay=top.decay_names())
    tensors, meta = _bottom_message(bottom)
    ep.send(MsgType.BOTTOM_MODEL, tensors, meta)
    step = 0
    if session.epochs > 0:
        if session.bottom_trainable:
            step = _vendor_trainable(ep, top, opt, session)
        else:
            step = _vendor_frozen(ep, top, opt, session)
    # inference service until the customer is done
    while True:
        msg = ep.recv(MsgType.EVAL_REQUEST, MsgType.DONE)
        if msg.msg_type == MsgType.DONE:
            ep.send(MsgType.DONE, meta={"reason": "complete"})
            break
        logits, _, _ = top_forward(top, msg.tensors[0], msg.mask)
        ep.send(MsgType.EVAL_RESPONSE, [logits.data], {"batch": msg.meta["batch"]})
    merged = dict(bottom.params)
    merged.update(merge_lora(top))
    final = PLM(plm.config, {k: merged[k] for k in plm.params})
    return VendorResult(top, final, log, step)


def _vendor_frozen(ep: Endpoint, top: TopModel, opt: AdamW, session: SessionConfig) -> int:
    msg = ep.recv(MsgType.REP_BATCH_FULL)
    reps, mask = msg.tensors[0], msg.mask
    sample_ids = np.asarray(msg.meta["sample_ids"], dtype=np.int64)
    orders = epoch_orders(len(reps), session.epochs, session.shuffle_seed)
    total = session.epochs * math.ceil(len(reps) / session.batch_size)
    step = 0
    for epoch, order in enumerate(orders):
        for idx in batches(order, session.batch_size):
            logits, _, g = top_forward(top, reps[idx], mask[idx])
            ep.send(MsgType.OUTPUT_BATCH, [logits.data],
                    {"epoch": epoch, "step": step, "sample_ids": sample_ids[idx].tolist()})
            grad = ep.recv(MsgType.OUTPUT_GRAD).tensors[0]
            top_backward(opt, g, logits, grad, linear_lr(step, total, session.lr))
            step += 1
    return step


def _vendor_trainable(ep: Endpoint, top: TopModel, opt: AdamW, session: SessionConfig) -> int:
    step, total = 0, None
    while total is None or step < total:
        msg = ep.recv(MsgType.REP_BATCH)
        total = int(msg.meta["total_steps"])
        if int(msg.meta["step"]) != step:
            raise ProtocolError(f"batch step {msg.meta['step']} != expected {step}")
        logits, x, g = top_forward(top, msg.tensors[0], msg.mask, graph_grad=True)
        ep.send(MsgType.OUTPUT_BATCH, [logits.data], {"epoch": msg.meta["epoch"], "step": step})
        grad = ep.recv(MsgType.OUTPUT_GRAD).tensors[0]
        top_backward(opt, g, logits, grad, linear_lr(step, total, session.lr))
        ep.send(MsgType.INPUT_GRAD, [x.grad], {"step": step})
        step += 1
    return step


def _recv_bottom(transport: Transport, session: SessionConfig, log: TranscriptLog, timeout) -> tuple[Endpoint, BottomModel]:
    """Read the first frame, derive the session id from the shipped config and verify it."""
    frame = transport.recv(timeout)
    msg = decode_message(frame)
    if msg.msg_type != MsgType.BOTTOM_MODEL or msg.seq != 0:
        raise ProtocolError(f"session must open with BOTTOM_MODEL seq 0, got {msg.msg_type.name} seq {msg.seq}")
    cfg = PLMConfig.from_dict(msg.meta["config"])
    if session.session_id(cfg) != msg.session_id:
        raise ProtocolError("session id does not match the local session configuration")
    validate_message(msg, V2C, cfg)
    log.record(V2C, msg.msg_type, msg.seq, frame)
    ep = Endpoint(transport, msg.session_id, C2V, log, cfg, timeout)
    ep.recv_seq = 1
    return ep, bottom_from_message(msg, trainable=session.bottom_trainable)


def run_inference(ep: Endpoint, bottom: BottomModel, token_ids, privacy: PrivacyConfig,
                  contributing: ContributingSet | None = None, batch_size: int = 64,
                  round_id: int = INFERENCE_ROUND) -> tuple[np.ndarray, np.ndarray]:
    """Customer side of the inference phase: privatise, send, argmax locally.

    Returns (predictions, logits).
    """
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    nn = NearestNeighbor(bottom.token_table.data) if privacy.enabled else None
    out = []
    for bi, lo in enumerate(range(0, len(ids), batch_size)):
        sel = np.arange(lo, min(lo + batch_size, len(ids)))
        h, _, _ = customer_reps(bottom, ids[sel], privacy, contributing, round_id, sel, nn)
        ep.send(MsgType.EVAL_REQUEST, [h.data], {"batch": bi, "round": round_id}, mask=ids[sel] != 0)
        resp = ep.recv(MsgType.EVAL_RESPONSE)
        if resp.meta["batch"] != bi:
            raise ProtocolError(f"evaluation response for batch {resp.meta['batch']}, expected {bi}")
        out.append(resp.tensors[0])
    logits = np.concatenate(out) if out else np.zeros((0, bottom.config.num_classes), np.float32)
    return logits.argmax(axis=1), logits


def run_customer(session: SessionConfig, transport: Transport, train, eval_sets: dict | None = None,
                 dump_dir=None) -> CustomerResult:
    """Customer state machine: privatise, ship representations, compute loss locally.

    ``train`` and the values of ``eval_sets`` are :class:`~splitpriv.data.Corpus`
    objects. Labels are only used locally.
    """
    log = TranscriptLog(dump_dir)
    ep, bottom = _recv_bottom(transport, session, log, session.timeout)
    privacy = session.privacy
    res = CustomerResult(log, bottom=bottom)
    cfg = bottom.config
    if privacy.enabled and privacy.cti_enabled:
        res.contributing = identify_contributing(train.ids, train.labels, cfg.vocab_size, cfg.num_classes, privacy)
    if session.epochs > 0:
        if session.bottom_trainable:
            res.losses, res.released_ids = _customer_trainable(ep, bottom, train, session, res.contributing)
        else:
            res.losses, res.released_ids = _customer_frozen(ep, bottom, train, session, res.contributing)
    for k, (name, corpus) in enumerate((eval_sets or {}).items()):
        preds, _ = run_inference(ep, bottom, corpus.ids, privacy, res.contributing, session.eval_batch_size,
                                 INFERENCE_ROUND + k)
        res.predictions[name] = preds
        res.accuracy[name] = float((preds == corpus.labels).mean()) if len(corpus) else float("nan")
    ep.send(MsgType.DONE, meta={"reason": "complete"})
    ep.recv(MsgType.DONE)
    return res


def _customer_frozen(ep: Endpoint, bottom: BottomModel, train, session: SessionConfig, contributing):
    N = len(train)
    sample_ids = np.arange(N)
    h, released, _ = customer_reps(bottom, train.ids, session.privacy, contributing, 0, sample_ids)
    ep.send(MsgType.REP_BATCH_FULL, [h.data], {"sample_ids": sample_ids.tolist(), "round": 0}, mask=train.mask)
    total = session.epochs * math.ceil(N / session.batch_size)
    losses = []
    for _ in range(total):
        msg = ep.recv(MsgType.OUTPUT_BATCH)
        idx = np.asarray(msg.meta["sample_ids"], dtype=np.int64)
        loss, grad = loss_and_grad(msg.tensors[0], train.labels[idx])
        losses.append(loss)
        ep.send(MsgType.OUTPUT_GRAD, [grad], {"step": msg.meta["step"]})
    return losses, released


def _customer_trainable(ep: Endpoint, bottom: BottomModel, train, session: SessionConfig, contributing):
    N = len(train)
    orders = epoch_orders(N, session.epochs, session.shuffle_seed)
    total = session.epochs * math.ceil(N / session.batch_size)
    bopt = AdamW(bottom.params, session.betas, weight_decay=0.0)
    losses, released_all = [], np.zeros((session.epochs,) + train.ids.shape, dtype=np.int64)
    step = 0
    for epoch, order in enumerate(orders):
        for idx in batches(order, session.batch_size):
            nn = NearestNeighbor(bottom.token_table.data) if session.privacy.enabled else None
            h, released, g = customer_reps(bottom, train.ids[idx], session.privacy, contributing,
                                           _round_for_epoch(epoch), idx, nn, track=True)
            released_all[epoch, idx] = released
            ep.send(MsgType.REP_BATCH, [h.data], {"epoch": epoch, "step": step, "round": _round_for_epoch(epoch),
                                                  "total_steps": total}, mask=train.ids[idx] != 0)
            out = ep.recv(MsgType.OUTPUT_BATCH)
            loss, grad = loss_and_grad(out.tensors[0], train.labels[idx])
            losses.append(loss)
            ep.send(MsgType.OUTPUT_GRAD, [grad], {"step": step})
            in_grad = ep.recv(MsgType.INPUT_GRAD).tensors[0]
            bopt.zero_grad()
            g.backward(h, in_grad)
            bopt.step(linear_lr(step, total, session.bottom_lr))
            step += 1
    return losses, released_all


# -- orchestration -------------------------------------------------------------

@dataclass
class SessionResult:
    vendor: VendorResult
    customer: CustomerResult

    @property
    def transcript(self) -> TranscriptLog:
        return self.vendor.transcript


def run_session(plm: PLM, session: SessionConfig, train, eval_sets: dict | None = None,
                transport: str = "loopback", dump_dir=None, keep_frames: bool = False) -> SessionResult:
    """Run both parties concurrently (vendor in a worker thread) over one transport.

    The vendor's transcript (which sees every frame) is the session record;
    ``dump_dir`` receives the raw frames for the attack harness.
    """
    vt, ct = transport_pair(transport)
    box: dict = {}

    def vendor():
        try:
            box["vendor"] = run_vendor(plm, session, vt, dump_dir, keep_frames)
        except BaseException as exc:  # surfaced in the caller
            box["vendor_error"] = exc
            vt.close()

    th = threading.Thread(target=vendor, name="vendor", daemon=True)
    th.start()
    try:
        cust = run_customer(session, ct, train, eval_sets)
    except BaseException as exc:
        ct.close()
        th.join(5)
        if "vendor_error" in box:
            raise ProtocolError(f"vendor aborted: {box['vendor_error']!r}") from box["vendor_error"]
        raise
    th.join()
    if transport == "tcp":
        vt.close()
        ct.close()
    if "vendor_error" in box:
        raise ProtocolError(f"vendor aborted: {box['vendor_error']!r}") from box["vendor_error"]
    return SessionResult(box["vendor"], cust)


@dataclass
class CentralizedResult:
    losses: list[float]
    predictions: dict[str, np.ndarray]
    accuracy: dict[str, float]
    top: TopModel
    released_ids: np.ndarray | None = None


def run_centralized(plm: PLM, session: SessionConfig, train, eval_sets: dict | None = None) -> CentralizedResult:
    """Single-process oracle with the same seeds, batches and arithmetic as the split run."""
    session.validate(plm.config)
    privacy = session.privacy
    work = plm.copy()
    bottom, top = split_model(work, session.split, bottom_frozen=not session.bottom_trainable)
    attach_lora(top, session.lora_config())
    opt = AdamW(top.trainable(), session.betas, session.weight_decay, decay=top.decay_names())
    cfg = plm.config
    contributing = None
    if privacy.enabled and privacy.cti_enabled:
        contributing = identify_contributing(train.ids, train.labels, cfg.vocab_size, cfg.num_classes, privacy)
    N = len(train)
    total = session.epochs * math.ceil(N / session.batch_size)
    losses: list[float] = []
    released = None
    step = 0
    if session.epochs > 0 and not session.bottom_trainable:
        h, released, _ = customer_reps(bottom, train.ids, privacy, contributing, 0, np.arange(N))
        reps = h.data
        for order in epoch_orders(N, session.epochs, session.shuffle_seed):
            for idx in batches(order, session.batch_size):
                logits, _, g = top_forward(top, reps[idx], train.mask[idx])
                loss, grad = loss_and_grad(logits.data, train.labels[idx])
                losses.append(loss)
                top_backward(opt, g, logits, grad, linear_lr(step, total, session.lr))
                step += 1
    elif session.epochs > 0:
        bopt = AdamW(bottom.params, session.betas, weight_decay=0.0)
        for epoch, order in enumerate(epoch_orders(N, session.epochs, session.shuffle_seed)):
            for idx in batches(order, session.batch_size):
                nn = NearestNeighbor(bottom.token_table.data) if privacy.enabled else None
                h, _, gb = customer_reps(bottom, train.ids[idx], privacy, contributing, _round_for_epoch(epoch),
                                         idx, nn, track=True)
                logits, x, g = top_forward(top, h.data, train.ids[idx] != 0, graph_grad=True)
                loss, grad = loss_and_grad(logits.data, train.labels[idx])
                losses.append(loss)
                top_backward(opt, g, logits, grad, linear_lr(step, total, session.lr))
                bopt.zero_grad()
                gb.backward(h, x.grad)
                bopt.step(linear_lr(step, total, session.bottom_lr))
                step += 1
    predictions, accuracy = {}, {}
    for k, (name, corpus) in enumerate((eval_sets or {}).items()):
        nn = NearestNeighbor(bottom.token_table.data) if privacy.enabled else None
        out = []
        for lo in range(0, len(corpus), session.eval_batch_size):
            sel = np.arange(lo, min(lo + session.eval_batch_size, len(corpus)))
            h, _, _ = customer_reps(bottom, corpus.ids[sel], privacy, contributing, INFERENCE_ROUND + k, sel, nn)
            logits, _, _ = top_forward(top, h.data, corpus.ids[sel] != 0)
            out.append(logits.data)
        logits = np.concatenate(out) if out else np.zeros((0, cfg.num_classes), np.float32)
        predictions[name] = logits.argmax(axis=1)
        accuracy[name] = float((predictions[name] == corpus.labels).mean()) if len(corpus) else float("nan")
    return CentralizedResult(losses, predictions, accuracy, top, released)
