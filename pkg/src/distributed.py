"""
distributed - 資料平行訓練（TCP 星狀拓撲）
------------------------------------------------------------
rank 0 為協調者：收齊各 rank 的梯度後依 rank 由小到大加總、除以 world_size，
再把平均梯度回送；因加總順序固定，結果可重現。

訊息格式（little-endian）：
    magic "RLDD" | version u8 | msg_type u8 | rank u32 | payload_len u64 | payload (float32…)
"""

from __future__ import annotations

import hashlib
import socket
import struct
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tensor
from errors import ConfigError, DivergenceError, PeerDisconnected, ProtocolError, StartupTimeout
from optim import assign_flat_grads, assign_flat_params, flatten_grads, flatten_params

MAGIC = b"RLDD"
VERSION = 1
HEADER = struct.Struct("<4sBBIQ")
STARTUP_TIMEOUT_S = 30.0
CHECKSUM_INTERVAL = 50


class MsgType(IntEnum):
    HELLO = 0
    PARAMS = 1
    GRADS = 2
    AVG_GRADS = 3
    SHUTDOWN = 4
    STATS = 5          # 純量統計（例如 KL）的歸約
    AVG_STATS = 6


_PARAM_SIZED = (MsgType.PARAMS, MsgType.GRADS, MsgType.AVG_GRADS)


# ===============
# 身分與訊息
# ===============


@dataclass(frozen=True)
class WorkerIdentity:
    rank: int
    world_size: int
    host: str = "127.0.0.1"
    port: int = 29500

    def __post_init__(self):
        if self.world_size < 1:
            raise ConfigError("world_size 必須 ≥ 1")
        if not 0 <= self.rank < self.world_size:
            raise ConfigError(f"rank {self.rank} 超出 [0, {self.world_size})")

    @property
    def is_coordinator(self) -> bool:
        return self.rank == 0

    @classmethod
    def parse(cls, rank: int, world_size: int, address: str) -> "WorkerIdentity":
        host, sep, port = address.rpartition(":")
        if not sep or not port.isdigit():
            raise ConfigError(f"協調者位址需為 HOST:PORT，收到 '{address}'")
        return cls(rank=rank, world_size=world_size, host=host or "127.0.0.1", port=int(port))


@dataclass
class WireMessage:
    msg_type: int
    rank: int
    payload: bytes = b""

    @classmethod
    def with_floats(cls, msg_type: int, rank: int, values: np.ndarray) -> "WireMessage":
        return cls(int(msg_type), rank, np.ascontiguousarray(values, dtype="<f4").tobytes())

    def floats(self) -> np.ndarray:
        if len(self.payload) % 4:
            raise ProtocolError(f"payload 長度 {len(self.payload)} 不是 4 的倍數")
        return np.frombuffer(self.payload, dtype="<f4").astype(np.float32)


def encode(msg: WireMessage) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg.msg_type), int(msg.rank), len(msg.payload)) + msg.payload


def decode_header(header: bytes) -> Tuple[int, int, int]:
    if len(header) != HEADER.size:
        raise ProtocolError(f"訊息標頭長度 {len(header)}，需要 {HEADER.size}")
    magic, version, msg_type, rank, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"magic 不符：{magic!r}")
    if version != VERSION:
        raise ProtocolError(f"不支援的協定版本：{version}")
    if msg_type not in MsgType._value2member_map_:
        raise ProtocolError(f"未知的訊息類型：{msg_type}")
    return msg_type, rank, length


def decode(data: bytes) -> WireMessage:
    msg_type, rank, length = decode_header(data[:HEADER.size])
    payload = data[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"payload_len={length} 與實際長度 {len(payload)} 不符")
    return WireMessage(msg_type, rank, bytes(payload))


def _recv_exact(sock: socket.socket, n: int, peer_rank: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except (socket.timeout, OSError) as e:
            raise PeerDisconnected(peer_rank, f"（{e}）") from None
        if not chunk:
            raise PeerDisconnected(peer_rank, "（連線被關閉）")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg: WireMessage, peer_rank: int) -> None:
    try:
        sock.sendall(encode(msg))
    except OSError as e:
        raise PeerDisconnected(peer_rank, f"（{e}）") from None


def read_message(sock: socket.socket, peer_rank: int) -> WireMessage:
    msg_type, rank, length = decode_header(_recv_exact(sock, HEADER.size, peer_rank))
    payload = _recv_exact(sock, length, peer_rank) if length else b""
    return WireMessage(msg_type, rank, payload)


def params_checksum(params: Sequence[Tuple[str, Tensor]]) -> str:
    return hashlib.sha256(flatten_params(params).astype("<f4").tobytes()).hexdigest()


# ===============
# 通訊器
# ===============


class Communicator:
    """所有 rank 共用的集體運算介面。"""

    rank = 0
    world_size = 1

    @property
    def is_coordinator(self) -> bool:
        return self.rank == 0

    def broadcast_params(self, params) -> None:
        raise NotImplementedError

    def allreduce(self, flat: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def allreduce_stats(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def verify_params(self, params) -> str:
        raise NotImplementedError

    def shutdown(self) -> None:
        pass

    def close(self) -> None:
        pass


class LocalCommunicator(Communicator):
    """world_size = 1：所有運算皆為恆等。"""

    def broadcast_params(self, params) -> None:
        return None

    def allreduce(self, flat):
        return flat

    def allreduce_stats(self, values):
        return values

    def verify_params(self, params) -> str:
        return params_checksum(params)


class TcpCommunicator(Communicator):
    """星狀拓撲；rank 0 依 rank 順序逐一服務各連線。"""

    def __init__(self, identity: WorkerIdentity, param_count: int, startup_timeout: float = STARTUP_TIMEOUT_S,
                 io_timeout: Optional[float] = 600.0, verbose: bool = False):
        self.identity = identity
        self.rank = identity.rank
        self.world_size = identity.world_size
        self.param_count = int(param_count)
        self.startup_timeout = startup_timeout
        self.io_timeout = io_timeout
        self.verbose = verbose
        self.peers: Dict[int, socket.socket] = {}
        self._server: Optional[socket.socket] = None
        self._coordinator: Optional[socket.socket] = None
        self.closed = False
        if self.is_coordinator:
            self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._server.bind((identity.host, identity.port))
            self._server.listen(max(1, self.world_size - 1))

    @property
    def bound_port(self) -> int:
        if self._server is None:
            return self.identity.port
        return self._server.getsockname()[1]

    # ------------------------ 啟動 ------------------------ #
    def connect(self) -> "TcpCommunicator":
        if self.world_size == 1:
            return self
        if self.is_coordinator:
            self._accept_all()
        else:
            self._dial()
        if self.verbose:
            print(f"🔗 rank {self.rank}/{self.world_size} 已連線")
        return self

    def _accept_all(self) -> None:
        deadline = time.monotonic() + self.startup_timeout
        expected = set(range(1, self.world_size))
        while set(self.peers) != expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise StartupTimeout(expected - set(self.peers))
            self._server.settimeout(remaining)
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                raise StartupTimeout(expected - set(self.peers)) from None
            conn.settimeout(self.startup_timeout)
            hello = read_message(conn, -1)
            if hello.msg_type != MsgType.HELLO or hello.rank not in expected or hello.rank in self.peers:
                conn.close()
                raise ProtocolError(f"非預期的 hello：type={hello.msg_type} rank={hello.rank}")
            conn.settimeout(self.io_timeout)
            self.peers[hello.rank] = conn

    def _dial(self) -> None:
        deadline = time.monotonic() + self.startup_timeout
        addr = (self.identity.host, self.identity.port)
        while True:
            try:
                sock = socket.create_connection(addr, timeout=max(0.1, deadline - time.monotonic()))
                break
            except OSError:
                if time.monotonic() >= deadline:
                    raise StartupTimeout([0]) from None
                time.sleep(0.05)
        sock.settimeout(self.io_timeout)
        send_message(sock, WireMessage(MsgType.HELLO, self.rank), 0)
        self._coordinator = sock

    # ------------------------ 集體運算 ------------------------ #
    def _check_length(self, msg: WireMessage, expected: int) -> np.ndarray:
        if len(msg.payload) != 4 * expected:
            raise ProtocolError(
                f"rank {msg.rank} 的 payload_len={len(msg.payload)}，需要 {4 * expected}（{expected} 個參數）")
        return msg.floats()

    def _expect(self, msg: WireMessage, msg_type: MsgType, rank: int) -> None:
        if msg.msg_type != msg_type or msg.rank != rank:
            raise ProtocolError(f"預期 {msg_type.name} 來自 rank {rank}，收到 type={msg.msg_type} rank={msg.rank}")

    def broadcast_params(self, params) -> None:
        if self.world_size == 1:
            return
        if self.is_coordinator:
            msg = WireMessage.with_floats(MsgType.PARAMS, 0, flatten_params(params))
            for r in sorted(self.peers):
                send_message(self.peers[r], msg, r)
        else:
            msg = read_message(self._coordinator, 0)
            self._expect(msg, MsgType.PARAMS, 0)
            assign_flat_params(params, self._check_length(msg, self.param_count))

    def _reduce(self, values: np.ndarray, send_type: MsgType, reply_type: MsgType, expected: int) -> np.ndarray:
        values = np.asarray(values, dtype=np.float32)
        if values.size != expected:
            raise ProtocolError(f"本地向量長度 {values.size}，需要 {expected}")
        if self.world_size == 1:
            return values
        if not self.is_coordinator:
            send_message(self._coordinator, WireMessage.with_floats(send_type, self.rank, values), 0)
            reply = read_message(self._coordinator, 0)
            self._expect(reply, reply_type, 0)
            return self._check_length(reply, expected)

        total = values.astype(np.float64)
        for r in sorted(self.peers):
            msg = read_message(self.peers[r], r)
            self._expect(msg, send_type, r)
            total += self._check_length(msg, expected)
        avg = (total / self.world_size).astype(np.float32)
        reply = WireMessage.with_floats(reply_type, 0, avg)
        for r in sorted(self.peers):
            send_message(self.peers[r], reply, r)
        return avg

    def allreduce(self, flat: np.ndarray) -> np.ndarray:
        return self._reduce(flat, MsgType.GRADS, MsgType.AVG_GRADS, self.param_count)

    def allreduce_stats(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float32).reshape(-1)
        return self._reduce(values, MsgType.STATS, MsgType.AVG_STATS, values.size)

    def verify_params(self, params) -> str:
        """各 rank 把參數送到 rank 0 比對 SHA-256；不一致時所有 rank 都拋出 DivergenceError。"""
        own = params_checksum(params)
        if self.world_size == 1:
            return own
        if not self.is_coordinator:
            send_message(self._coordinator, WireMessage.with_floats(MsgType.PARAMS, self.rank, flatten_params(params)), 0)
            verdict = read_message(self._coordinator, 0)
            self._expect(verdict, MsgType.AVG_STATS, 0)
            if verdict.floats()[0] != 1.0:
                raise DivergenceError(f"rank {self.rank} 的參數與 rank 0 不一致")
            return own
        bad: List[int] = []
        for r in sorted(self.peers):
            msg = read_message(self.peers[r], r)
            self._expect(msg, MsgType.PARAMS, r)
            payload = self._check_length(msg, self.param_count)
            if hashlib.sha256(payload.astype("<f4").tobytes()).hexdigest() != own:
                bad.append(r)
        verdict = WireMessage.with_floats(MsgType.AVG_STATS, 0, np.array([0.0 if bad else 1.0]))
        for r in sorted(self.peers):
            send_message(self.peers[r], verdict, r)
        if bad:
            raise DivergenceError(f"參數校驗和不一致的 rank：{bad}")
        return own

    # ------------------------ 結束 ------------------------ #
    def shutdown(self) -> None:
        """rank 0 通知所有 worker 結束。"""
        if self.is_coordinator and not self.closed:
            for r in sorted(self.peers):
                try:
                    send_message(self.peers[r], WireMessage(MsgType.SHUTDOWN, 0), r)
                except PeerDisconnected:
                    pass
        self.close()

    def wait_shutdown(self) -> None:
        if self.is_coordinator or self._coordinator is None:
            return
        msg = read_message(self._coordinator, 0)
        self._expect(msg, MsgType.SHUTDOWN, 0)
        self.close()

    def close(self) -> None:
        if self.closed:
            return
        for sock in [*self.peers.values(), self._coordinator, self._server]:
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        self.closed = True


def make_communicator(identity: Optional[WorkerIdentity], param_count: int, verbose: bool = False) -> Communicator:
    if identity is None or identity.world_size == 1:
        return LocalCommunicator()
    return TcpCommunicator(identity, param_count, verbose=verbose).connect()


def worker_seed(seed: int, rank: int) -> int:
    return int(seed) + int(rank)


def allreduce_gradients(reducer, params) -> None:
    """把本地梯度換成所有 worker 的平均梯度（原地寫回 .grad）。

    沒有 reducer 或 world_size 為 1 時不動，梯度逐位元不變。
    """
    if reducer is None or reducer.world_size <= 1:
        return
    assign_flat_grads(params, reducer.allreduce(flatten_grads(params)))


__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER",
    "MsgType",
    "WorkerIdentity",
    "WireMessage",
    "encode",
    "decode",
    "decode_header",
    "send_message",
    "read_message",
    "params_checksum",
    "Communicator",
    "LocalCommunicator",
    "TcpCommunicator",
    "make_communicator",
    "worker_seed",
    "allreduce_gradients",
    "STARTUP_TIMEOUT_S",
    "CHECKSUM_INTERVAL",
]
