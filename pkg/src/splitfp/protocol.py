"""Single-client split learning over a message transport.

The client owns layers ``[0, k)`` and the server owns ``[k, end)``. Each
training batch is a strict request/response exchange:

* topology A (label sharing): client sends SMASHED and LABELS, server
  answers GRAD and LOSS.
* topology B (labels on the server): client sends SMASHED, server answers
  GRAD. Labels reach the server out of band, never on the wire.
* topology C (labels on the client): client sends SMASHED, server answers
  with its output scores (as SMASHED), the client computes the loss and
  sends the score gradient as GRAD, and the server answers with the
  split-layer GRAD.

Every frame the client sends or receives is passed to the optional tap in
transmission order.
"""
from __future__ import annotations

import enum
import logging
import socket
import threading
from collections import deque

import numpy as np

from . import engine
from .engine import LayerStack, Softmax
from .wire import MsgType, WireError, WireMessage, encode, read_frame

log = logging.getLogger(__name__)


class Topology(str, enum.Enum):
    A = "a"  # label sharing
    B = "b"  # labels held by the server
    C = "c"  # labels held by the client, nothing label-derived crosses the wire

    @classmethod
    def parse(cls, value) -> "Topology":
        if isinstance(value, Topology):
            return value
        return cls(str(value).lower())


FRAMES_PER_BATCH = {Topology.A: 4, Topology.B: 2, Topology.C: 4}


class ProtocolError(RuntimeError):
    pass


class TransportError(RuntimeError):
    pass


def split_model(stack: LayerStack, k: int) -> tuple[LayerStack, LayerStack]:
    return stack.split(k)


def _body(stack: LayerStack) -> LayerStack:
    """The stack without a terminal softmax (it outputs logits)."""
    if stack.layers and isinstance(stack.layers[-1], Softmax):
        return LayerStack(stack.layers[:-1], stack.input_shape, stack.rng_seed)
    return stack


# --------------------------------------------------------------------------
# endpoints


class ServerNode:
    """Server half: reacts to client frames, returns reply frames."""

    def __init__(self, stack: LayerStack, topology: Topology, lr: float):
        self.stack = stack
        self.topology = Topology.parse(topology)
        self.lr = lr
        self.epoch = 0
        self.last_loss: float | None = None
        self._pending_labels: deque = deque()
        self._smashed = None
        self._scores = None

    def expect_labels(self, y) -> None:
        """Hand the server its own labels for the next batch (topology B)."""
        self._pending_labels.append(np.asarray(y, dtype=np.int64))

    def _step(self, y) -> list[WireMessage]:
        loss, dlogits = engine.head_loss(self.stack, self._scores, y)
        grads = engine.backward_from_loss(self.stack, dlogits, need_input_grad=True)
        engine.sgd_step(self.stack, grads, self.lr)
        self.last_loss = loss
        self._smashed = None
        return [WireMessage(MsgType.GRAD, grads.input_grad)]

    def handle(self, msg: WireMessage) -> list[WireMessage]:
        t, topo = msg.msg_type, self.topology
        if t == MsgType.END_EPOCH:
            if self._smashed is not None:
                raise ProtocolError("END_EPOCH in the middle of a batch")
            self.epoch += 1
            return []
        if t == MsgType.SMASHED and self._smashed is None:
            self._smashed = msg.tensor
            if topo == Topology.C:
                body = _body(self.stack)
                logits = engine.forward(body, msg.tensor)
                return [WireMessage(MsgType.SMASHED, logits)]
            self._scores = engine.forward(self.stack, msg.tensor)
            if topo == Topology.B:
                if not self._pending_labels:
                    raise ProtocolError("server has no labels for this batch")
                return self._step(self._pending_labels.popleft())
            return []
        if t == MsgType.LABELS and topo == Topology.A and self._smashed is not None:
            y = msg.tensor.astype(np.int64)
            replies = self._step(y)
            return replies + [WireMessage(MsgType.LOSS, np.float32(self.last_loss))]
        if t == MsgType.GRAD and topo == Topology.C and self._smashed is not None:
            body = _body(self.stack)
            grads = engine.backward(body, msg.tensor, need_input_grad=True)
            engine.sgd_step(body, grads, self.lr)
            self._smashed = None
            return [WireMessage(MsgType.GRAD, grads.input_grad)]
        state = "awaiting batch" if self._smashed is None else "mid-batch"
        raise ProtocolError(f"unexpected {t.name} frame ({state}, topology {topo.value})")


class InProcTransport:
    """Client-side channel that delivers frames straight to a ServerNode."""

    def __init__(self, server: ServerNode):
        self.server = server
        self._inbox: deque = deque()

    def send(self, msg: WireMessage) -> None:
        self._inbox.extend(self.server.handle(msg))

    def recv(self) -> WireMessage:
        if not self._inbox:
            raise ProtocolError("expected a reply from the server, none pending")
        return self._inbox.popleft()

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


class TcpServer:
    """Serve one client connection for a ServerNode on a background thread."""

    def __init__(self, node: ServerNode, host: str = "127.0.0.1", port: int = 0):
        self.node = node
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()[:2]
        self.error: BaseException | None = None
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        try:
            conn, _ = self._sock.accept()
            with conn:
                while True:
                    msg = read_frame(lambda n: _recv_exact(conn, n))
                    if msg is None:
                        return
                    for reply in self.node.handle(msg):
                        conn.sendall(encode(reply))
        except BaseException as e:  # surfaced to the client via .error
            self.error = e
            log.error("tcp server stopped: %s", e)
        finally:
            self._sock.close()

    def join(self, timeout=None):
        self._thread.join(timeout)


class TcpTransport:
    def __init__(self, host: str, port: int, server: TcpServer | None = None):
        self._server = server
        self._sock = socket.create_connection((host, port))
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg: WireMessage) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as e:
            raise TransportError(f"send failed: {e}") from e

    def recv(self) -> WireMessage:
        try:
            msg = read_frame(lambda n: _recv_exact(self._sock, n))
        except (OSError, WireError) as e:
            raise TransportError(f"receive failed: {e}") from e
        if msg is None:
            err = self._server.error if self._server is not None else None
            if isinstance(err, ProtocolError):
                raise err
            raise TransportError(f"connection closed by server ({err!r})")
        return msg

    def close(self) -> None:
        self._sock.close()
        if self._server is not None:
            self._server.join(timeout=5)


# --------------------------------------------------------------------------
# session


class SplitSession:
    def __init__(self, client_stack: LayerStack, server: ServerNode, split_index: int,
                 topology: Topology, transport, lr: float, tap=None):
        self.client_stack = client_stack
        self.server = server
        self.split_index = split_index
        self.topology = Topology.parse(topology)
        self.transport = transport
        self.lr = lr
        self.tap = tap
        self.batches_done = 0
        self.epoch = 0

    @classmethod
    def create(cls, stack: LayerStack, k: int, topology="b", lr: float = 0.01,
               transport: str = "inproc", tap=None, host: str = "127.0.0.1", port: int = 0):
        """Split ``stack`` at ``k`` and connect the halves. The stack's arrays are shared."""
        topology = Topology.parse(topology)
        client, server_stack = split_model(stack, k)
        node = ServerNode(server_stack, topology, lr)
        if transport == "inproc":
            chan = InProcTransport(node)
        elif transport == "tcp":
            srv = TcpServer(node, host, port)
            chan = TcpTransport(*srv.address, server=srv)
        else:
            raise ValueError(f"unknown transport {transport!r}")
        return cls(client, node, k, topology, chan, lr, tap)

    @property
    def server_stack(self) -> LayerStack:
        return self.server.stack

    def full_stack(self) -> LayerStack:
        return self.client_stack + self.server.stack

    def _send(self, msg):
        if self.tap is not None:
            self.tap(msg, "c2s")
        self.transport.send(msg)

    def _recv(self, expected: MsgType):
        msg = self.transport.recv()
        if self.tap is not None:
            self.tap(msg, "s2c")
        if msg.msg_type != expected:
            raise ProtocolError(f"expected {expected.name}, got {msg.msg_type.name}")
        return msg

    def train_batch(self, x_batch, y_batch) -> float:
        """One lockstep SGD step of both halves; returns the batch loss."""
        y_batch = np.asarray(y_batch, dtype=np.int64)
        smashed = engine.forward(self.client_stack, x_batch)
        topo = self.topology
        if topo == Topology.B:
            self.server.expect_labels(y_batch)
        self._send(WireMessage(MsgType.SMASHED, smashed))
        if topo == Topology.A:
            self._send(WireMessage(MsgType.LABELS, y_batch.astype(np.float32)))
            grad = self._recv(MsgType.GRAD).tensor
            loss = float(self._recv(MsgType.LOSS).tensor)
        elif topo == Topology.B:
            grad = self._recv(MsgType.GRAD).tensor
            loss = self.server.last_loss
        else:
            logits = self._recv(MsgType.SMASHED).tensor
            loss, dlogits = engine.cross_entropy(logits, y_batch)
            self._send(WireMessage(MsgType.GRAD, dlogits))
            grad = self._recv(MsgType.GRAD).tensor
        grads = engine.backward(self.client_stack, grad, need_input_grad=False)
        engine.sgd_step(self.client_stack, grads, self.lr)
        self.batches_done += 1
        return loss

    def end_epoch(self) -> None:
        self._send(WireMessage(MsgType.END_EPOCH))
        self.epoch += 1

    def serve_inference(self, x, batch_size: int = 1024) -> np.ndarray:
        """Predicted labels from the client half followed by the server half."""
        x = np.asarray(x)
        if len(x) == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        for i in range(0, len(x), batch_size):
            scores = engine.forward(self.server.stack, engine.forward(self.client_stack, x[i:i + batch_size]))
            out.append(np.argmax(scores, axis=1))
        return np.concatenate(out).astype(np.int64)

    def close(self) -> None:
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# taps


class TranscriptRecorder:
    """In-memory tap. Keeps frames of the first ``max_epochs`` epochs (all if None)."""

    def __init__(self, max_epochs: int | None = None):
        self.max_epochs = max_epochs
        self.frames: list[tuple[str, WireMessage]] = []
        self.epochs_seen = 0

    def _active(self):
        return self.max_epochs is None or self.epochs_seen < self.max_epochs

    def __call__(self, msg: WireMessage, direction: str) -> None:
        if self._active():
            self.frames.append((direction, msg))
        if msg.msg_type == MsgType.END_EPOCH:
            self.epochs_seen += 1

    @property
    def messages(self) -> list[WireMessage]:
        return [m for _, m in self.frames]


class TranscriptWriter(TranscriptRecorder):
    """Tap that streams frames to a file in wire format."""

    def __init__(self, path, max_epochs: int | None = None):
        super().__init__(max_epochs)
        self.path = path
        self._f = open(path, "wb")
        self.count = 0

    def __call__(self, msg, direction):
        if self._active() and not self._f.closed:
            self._f.write(encode(msg))
            self.count += 1
        if msg.msg_type == MsgType.END_EPOCH:
            self.epochs_seen += 1

    def close(self):
        self._f.close()
