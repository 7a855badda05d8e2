"""Bandwidth accounting and the delta wire protocol.

Map updates travel as minimum-bounding-rectangle (MBR) patches of the
changed region.  Wire layout, all little-endian:

    [kind u8][pad u8][row0 u16][col0 u16][h u16][w u16]
    [x f16][y f16][theta f16]
    [payload h*w x u16, row-major]

Accounting charges the 8-byte MBR coordinates plus the payload to the map
stream and the 6 pose bytes to the pose stream; the leading kind/pad pair
is framing only and is not billed.  A one-cell patch therefore costs
2 + 6 + 8 = 16 accounted bytes.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .grid_world import Pose
from .mapping import GlobalMaps, LocalState, StateMode

MBR_HEADER_BYTES = 8
POSE_BYTES = 6
_FRAME = struct.Struct("<BBHHHH")

# fixed-point scales used when channels go on the wire
DIST_SCALE = 256.0
IVFM_SCALE = 1024.0


class DeltaKind(IntEnum):
    OCCUPANCY = 0
    VFM = 1


class ProtocolError(RuntimeError):
    """Malformed or out-of-range packet."""


@dataclass
class DeltaPacket:
    """One MBR patch of a single map layer plus the sender's pose."""

    kind: DeltaKind
    row0: int
    col0: int
    height: int
    width: int
    payload: np.ndarray
    pose_f16: np.ndarray

    @property
    def payload_bytes(self) -> int:
        return 2 * self.height * self.width

    @property
    def accounted_map_bytes(self) -> int:
        return MBR_HEADER_BYTES + self.payload_bytes

    def to_bytes(self) -> bytes:
        head = _FRAME.pack(int(self.kind), 0, self.row0, self.col0, self.height, self.width)
        return head + self.pose_f16.astype("<f2").tobytes() + self.payload.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeltaPacket":
        if len(data) < _FRAME.size + POSE_BYTES:
            raise ProtocolError(f"packet truncated at {len(data)} bytes")
        kind, pad, row0, col0, h, w = _FRAME.unpack_from(data, 0)
        if pad != 0:
            raise ProtocolError(f"nonzero pad byte {pad}")
        try:
            kind = DeltaKind(kind)
        except ValueError as exc:
            raise ProtocolError(f"unknown delta kind {kind}") from exc
        expected = _FRAME.size + POSE_BYTES + 2 * h * w
        if len(data) != expected:
            raise ProtocolError(f"packet length {len(data)} != {expected}")
        pose = np.frombuffer(data, dtype="<f2", count=3, offset=_FRAME.size).astype(np.float16)
        payload = (
            np.frombuffer(data, dtype="<u2", count=h * w, offset=_FRAME.size + POSE_BYTES)
            .reshape(h, w)
            .astype(np.uint16)
        )
        return cls(kind=kind, row0=row0, col0=col0, height=h, width=w, payload=payload, pose_f16=pose)


def encode_delta(
    before: np.ndarray, after: np.ndarray, pose: Pose, kind: DeltaKind
) -> DeltaPacket | None:
    """Diff two snapshots of one map layer into a minimal MBR patch.

    Returns None when nothing changed.  The patch is the tightest rectangle
    covering every changed cell; unchanged cells inside it ride along and
    are rewritten with their current values (last writer wins).
    """
    if before.shape != after.shape:
        raise ValueError("snapshot shapes differ")
    diff = before != after
    if not diff.any():
        return None
    rows = np.flatnonzero(diff.any(axis=1))
    cols = np.flatnonzero(diff.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    payload = np.ascontiguousarray(after[r0 : r1 + 1, c0 : c1 + 1], dtype=np.uint16)
    pose_f16 = np.array([pose.x, pose.y, pose.theta], dtype=np.float16)
    return DeltaPacket(
        kind=kind,
        row0=r0,
        col0=c0,
        height=r1 - r0 + 1,
        width=c1 - c0 + 1,
        payload=payload,
        pose_f16=pose_f16,
    )


def apply_delta(target: np.ndarray, packet: DeltaPacket) -> np.ndarray:
    """Overwrite the patch region of ``target`` with the packet payload."""
    h, w = target.shape
    if packet.row0 + packet.height > h or packet.col0 + packet.width > w:
        raise ProtocolError("patch exceeds map bounds")
    target[
        packet.row0 : packet.row0 + packet.height, packet.col0 : packet.col0 + packet.width
    ] = packet.payload.astype(target.dtype)
    return target


def account_state(mode: StateMode, crop_side: int) -> int:
    """Bytes to ship one local state: u16 per channel cell."""
    channels = 4 if mode is StateMode.VFM4 else 2
    return channels * crop_side * crop_side * 2


def encode_state(state: LocalState) -> bytes:
    """Serialize the local state channels at u16 per cell.

    The shortest-path channel is fixed-point 1/256 cell, the integrated
    channel fixed-point 1/1024; unreachable cells saturate.  The byte count
    always equals :func:`account_state` for the state's mode.
    """
    spf = state.shortest_path * DIST_SCALE
    spf = np.where(np.isfinite(spf), np.clip(spf, 0, 65535), 65535.0).astype("<u2")
    if state.mode is StateMode.VFM4:
        chans = [
            state.robot_mask.astype("<u2"),
            state.overhead.astype("<u2"),
            state.vfm.astype("<u2"),
            spf,
        ]
    else:
        ivfm = np.clip(np.rint(state.ivfm * IVFM_SCALE), 0, 65535).astype("<u2")
        chans = [ivfm, spf]
    return b"".join(ch.tobytes() for ch in chans)


@dataclass
class BandwidthLedger:
    """Per-agent byte counters for the three traffic streams."""

    state_bytes: np.ndarray
    delta_bytes: np.ndarray
    pose_bytes: np.ndarray

    @classmethod
    def create(cls, n_agents: int) -> "BandwidthLedger":
        return cls(
            state_bytes=np.zeros(n_agents, dtype=np.int64),
            delta_bytes=np.zeros(n_agents, dtype=np.int64),
            pose_bytes=np.zeros(n_agents, dtype=np.int64),
        )

    @property
    def n_agents(self) -> int:
        return int(self.state_bytes.size)

    def add_state(self, agent_id: int, nbytes: int) -> None:
        self.state_bytes[agent_id] += nbytes

    def add_packet(self, agent_id: int, packet: DeltaPacket) -> None:
        self.delta_bytes[agent_id] += packet.accounted_map_bytes
        self.pose_bytes[agent_id] += POSE_BYTES

    @property
    def total_bytes(self) -> int:
        return int(self.state_bytes.sum() + self.delta_bytes.sum() + self.pose_bytes.sum())

    @property
    def total_mib(self) -> float:
        return self.total_bytes / 2**20

    def totals(self) -> dict:
        return {
            "state_bytes": int(self.state_bytes.sum()),
            "delta_bytes": int(self.delta_bytes.sum()),
            "pose_bytes": int(self.pose_bytes.sum()),
            "total_bytes": self.total_bytes,
            "total_mib": self.total_mib,
        }


class SyncServer:
    """Receiver-side reconstruction of the shared maps from delta traffic.

    Holds its own copies of the overhead map and every per-agent VFM layer;
    applying the full packet stream must reproduce the authoritative
    :class:`GlobalMaps` exactly.
    """

    def __init__(self, shape: tuple[int, int], n_agents: int, resolution: float):
        self.overhead = np.zeros(shape, dtype=np.uint8)
        self.vfm_per_agent = np.zeros((n_agents,) + tuple(shape), dtype=np.uint16)
        self.resolution = resolution

    def apply(self, agent_id: int, packet: DeltaPacket) -> None:
        if not 0 <= agent_id < self.vfm_per_agent.shape[0]:
            raise ProtocolError(f"unknown agent_id {agent_id}")
        if packet.kind is DeltaKind.OCCUPANCY:
            apply_delta(self.overhead, packet)
        else:
            apply_delta(self.vfm_per_agent[agent_id], packet)

    def merged(self) -> np.ndarray:
        sums = self.vfm_per_agent.astype(np.int64).sum(axis=0)
        return np.minimum(sums, 65535).astype(np.uint16)

    def matches(self, maps: GlobalMaps) -> bool:
        return (
            np.array_equal(self.overhead, maps.overhead)
            and np.array_equal(self.vfm_per_agent, maps.vfm_per_agent)
            and np.array_equal(self.merged(), maps.vfm_merged)
        )


def loopback_roundtrip(
    packets: list[tuple[int, DeltaPacket]],
    shape: tuple[int, int],
    n_agents: int,
    resolution: float,
) -> SyncServer:
    """Push a packet stream through a real localhost TCP socket.

    Demonstration transport only; the episode loop applies packets
    in-process.  Frames are ``[agent u8][len u32][packet bytes]``.
    """
    server = SyncServer(shape, n_agents, resolution)
    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]

    def _serve() -> None:
        conn, _ = listener.accept()
        with conn:
            buf = b""
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                buf += chunk
            off = 0
            while off < len(buf):
                agent_id, length = struct.unpack_from("<BI", buf, off)
                off += 5
                server.apply(agent_id, DeltaPacket.from_bytes(buf[off : off + length]))
                off += length

    thread = threading.Thread(target=_serve)
    thread.start()
    with socket.create_connection(("127.0.0.1", port)) as sock:
        for agent_id, packet in packets:
            blob = packet.to_bytes()
            sock.sendall(struct.pack("<BI", agent_id, len(blob)) + blob)
    thread.join(timeout=30.0)
    listener.close()
    if thread.is_alive():
        raise RuntimeError("loopback server did not finish")
    return server
