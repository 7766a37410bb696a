"""LAN emulation over ATM: clients, the address server and the
broadcast-and-unknown server.

A client (LEC) bridges Ethernet-style MAC frames onto VCs.  Unicast
frames go out on a cached data-direct VC when one exists; otherwise the
client asks the LE-ARP server (LES) for the target's ATM address, queues
the frame while waiting (optionally copying it through the BUS in
parallel), and switches to a fresh data-direct VC once the reply lands.
Multicast and broadcast frames always go through the BUS, which floods
every attached client except the sender exactly once.

The entities are transport-agnostic: a LEC talks to the fabric through a
LecPort adapter, so they run identically under the event engine and
under plain unit tests.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

from .errors import ContractError

MAC_BYTES = 6
ATM_ADDRESS_BYTES = 20
FRAME_HEADER_BYTES = 2 * MAC_BYTES + 2

BROADCAST_MAC = b"\xff" * MAC_BYTES

PENDING_DEPTH = 64  # queued frames per unresolved MAC
PENDING_TIMEOUT_S = 1.0
CACHE_AGING_S = 300.0


class RegistrationConflict(ContractError):
    """A MAC registered twice with different ATM addresses."""


def parse_mac(text: str) -> bytes:
    parts = text.split(":")
    if len(parts) != MAC_BYTES:
        raise ValueError(f"MAC address needs {MAC_BYTES} octets: {text!r}")
    return bytes(int(p, 16) for p in parts)


def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def is_multicast(mac: bytes) -> bool:
    """Group bit: least significant bit of the first octet."""
    return bool(mac[0] & 0x01)


def atm_address(name: str) -> bytes:
    """Deterministic 20-byte endpoint identifier for a scenario node name."""
    raw = name.encode()
    if len(raw) > ATM_ADDRESS_BYTES:
        raise ValueError(f"node name {name!r} too long for an ATM address")
    return raw.ljust(ATM_ADDRESS_BYTES, b"\x00")


def encode_frame(dest: bytes, src: bytes, payload: bytes) -> bytes:
    """MAC frame: destination, source, 2-byte length, payload."""
    if len(dest) != MAC_BYTES or len(src) != MAC_BYTES:
        raise ValueError("MAC addresses are 6 bytes")
    if len(payload) > 0xFFFF:
        raise ValueError("payload too long for the length field")
    return dest + src + len(payload).to_bytes(2, "big") + payload


def decode_frame(raw: bytes) -> Tuple[bytes, bytes, bytes]:
    if len(raw) < FRAME_HEADER_BYTES:
        raise ValueError(f"frame shorter than its {FRAME_HEADER_BYTES}-byte header")
    length = int.from_bytes(raw[12:14], "big")
    if FRAME_HEADER_BYTES + length != len(raw):
        raise ValueError("frame length field disagrees with frame size")
    return raw[:6], raw[6:12], raw[FRAME_HEADER_BYTES:]


# Control-channel messages (internal encoding; the standardized control
# frame format is out of scope).
OP_ARP_REQUEST = 1
OP_ARP_REPLY = 2


def encode_arp_request(requester: bytes, target_mac: bytes) -> bytes:
    return bytes((OP_ARP_REQUEST,)) + requester + target_mac


def encode_arp_reply(target_mac: bytes, atm: Optional[bytes]) -> bytes:
    if atm is None:
        return bytes((OP_ARP_REPLY, 0)) + target_mac + bytes(ATM_ADDRESS_BYTES)
    if len(atm) != ATM_ADDRESS_BYTES:
        raise ValueError("ATM addresses are 20 bytes")
    return bytes((OP_ARP_REPLY, 1)) + target_mac + atm


def decode_control(raw: bytes) -> Tuple[int, Any]:
    if not raw:
        raise ValueError("empty control message")
    op = raw[0]
    if op == OP_ARP_REQUEST:
        if len(raw) != 1 + 2 * MAC_BYTES:
            raise ValueError("malformed LE-ARP request")
        return op, (raw[1:7], raw[7:13])
    if op == OP_ARP_REPLY:
        if len(raw) != 2 + MAC_BYTES + ATM_ADDRESS_BYTES:
            raise ValueError("malformed LE-ARP reply")
        found = raw[1] == 1
        mac = raw[2:8]
        atm = raw[8:] if found else None
        return op, (mac, atm)
    raise ValueError(f"unknown control opcode {op}")


class Les:
    """LE-ARP server: the MAC -> ATM address directory of one LAN."""

    def __init__(self) -> None:
        self.directory: Dict[bytes, bytes] = {}
        self.arp_requests = 0
        self.arp_hits = 0
        self.arp_misses = 0
        self.conflicts = 0

    def register(self, mac: bytes, atm: bytes) -> None:
        """Idempotent for the same pair; a different ATM address for a
        known MAC is a registration conflict."""
        existing = self.directory.get(mac)
        if existing is not None and existing != atm:
            self.conflicts += 1
            raise RegistrationConflict(
                f"MAC {format_mac(mac)} already registered to a different address"
            )
        self.directory[mac] = atm

    def resolve(self, mac: bytes) -> Optional[bytes]:
        self.arp_requests += 1
        atm = self.directory.get(mac)
        if atm is None:
            self.arp_misses += 1
        else:
            self.arp_hits += 1
        return atm


class Bus:
    """Broadcast-and-unknown server: floods to every attached client but
    the sender, one copy each."""

    def __init__(self) -> None:
        self._attached: Dict[bytes, Callable[[bytes], None]] = {}
        self.frames_in = 0
        self.copies_out = 0

    def attach(self, atm: bytes, forward: Callable[[bytes], None]) -> None:
        if atm in self._attached:
            raise ValueError("already attached to the BUS")
        self._attached[atm] = forward

    def forward(self, frame: bytes, origin_atm: bytes) -> int:
        """Flood one frame; returns the number of copies sent."""
        self.frames_in += 1
        copies = 0
        for atm, send in self._attached.items():
            if atm != origin_atm:
                send(frame)
                copies += 1
        self.copies_out += copies
        return copies


@dataclass
class ArpCacheEntry:
    atm: bytes
    vc: Any = None  # engine's VC handle; None while setup failed/pending
    learned_at: float = 0.0


@dataclass
class DestinationStats:
    """Per-target unicast accounting for one client."""

    sent_direct: int = 0
    sent_bus: int = 0
    queued: int = 0
    dropped_overflow: int = 0
    dropped_timeout: int = 0
    dropped_setup: int = 0


@dataclass
class LecCounters:
    frames_sent: int = 0
    broadcast_sent: int = 0
    arp_requests: int = 0
    arp_replies: int = 0
    received_direct: int = 0
    received_bus: int = 0
    received_broadcast: int = 0
    filtered: int = 0
    duplicates: int = 0
    pending_dropped: int = 0


class LecPort:
    """Fabric adapter a LEC drives; the engine (or a test fake) implements it."""

    def now(self) -> float:
        raise NotImplementedError

    def send_arp_request(self, message: bytes) -> None:
        raise NotImplementedError

    def send_to_bus(self, frame: bytes) -> None:
        raise NotImplementedError

    def send_on_vc(self, vc: Any, frame: bytes) -> None:
        raise NotImplementedError

    def open_data_vc(self, dest_atm: bytes) -> Any:
        """Set up a data-direct VC; None when admission refuses it."""
        raise NotImplementedError

    def schedule(self, delay: float, fn: Callable[[], None]) -> None:
        raise NotImplementedError


class Lec:
    """One LAN-emulation client."""

    def __init__(
        self,
        mac: bytes,
        atm: bytes,
        port: LecPort,
        parallel_bus: bool = False,
        pending_depth: int = PENDING_DEPTH,
        pending_timeout: float = PENDING_TIMEOUT_S,
        cache_aging: float = CACHE_AGING_S,
    ):
        self.mac = mac
        self.atm = atm
        self.port = port
        self.parallel_bus = parallel_bus
        self.pending_depth = pending_depth
        self.pending_timeout = pending_timeout
        self.cache_aging = cache_aging
        self.cache: Dict[bytes, ArpCacheEntry] = {}
        self.counters = LecCounters()
        self.per_destination: Dict[bytes, DestinationStats] = {}
        self.lookup_log: List[Tuple[bytes, bytes]] = []  # (mac, atm) at each cache hit
        self._pending: Dict[bytes, Deque[bytes]] = {}
        self._request_id: Dict[bytes, int] = {}
        self._next_request_id = 0
        self._seen: Dict[bytes, None] = {}  # (src+payload[:8]) keys, insertion-ordered

    # -- sending ---------------------------------------------------------

    def send(self, dest_mac: bytes, payload: bytes) -> None:
        """Bridge one frame toward dest_mac per the three-step rule:
        cached VC, else LE-ARP + queue (+ optional parallel BUS copy);
        group addresses always go through the BUS."""
        frame = encode_frame(dest_mac, self.mac, payload)
        self.counters.frames_sent += 1
        if is_multicast(dest_mac):
            self.counters.broadcast_sent += 1
            self.port.send_to_bus(frame)
            return
        stats = self._dst(dest_mac)
        entry = self._cache_get(dest_mac)
        if entry is not None:
            if entry.vc is None:
                # Address known but no VC (earlier setup refused); retry now.
                entry.vc = self.port.open_data_vc(entry.atm)
            if entry.vc is not None:
                stats.sent_direct += 1
                self.port.send_on_vc(entry.vc, frame)
            else:
                stats.dropped_setup += 1
            return
        queue = self._pending.setdefault(dest_mac, deque())
        if len(queue) >= self.pending_depth:
            stats.dropped_overflow += 1
            self.counters.pending_dropped += 1
            return
        queue.append(frame)
        stats.queued += 1
        if dest_mac not in self._request_id:
            request_id = self._next_request_id
            self._next_request_id += 1
            self._request_id[dest_mac] = request_id
            self.counters.arp_requests += 1
            self.port.send_arp_request(encode_arp_request(self.mac, dest_mac))
            self.port.schedule(
                self.pending_timeout, lambda: self._on_arp_timeout(dest_mac, request_id)
            )
        if self.parallel_bus:
            stats.sent_bus += 1
            self.port.send_to_bus(frame)

    def on_arp_reply(self, target_mac: bytes, atm: Optional[bytes]) -> None:
        """Reply from the LES: fill the cache, set up the VC and flush the
        queue in order.  Unknown targets stay queued until the timeout."""
        self.counters.arp_replies += 1
        if atm is None:
            return
        entry = ArpCacheEntry(atm=atm, vc=None, learned_at=self.port.now())
        self.cache[target_mac] = entry
        self._request_id.pop(target_mac, None)
        entry.vc = self.port.open_data_vc(atm)
        queue = self._pending.pop(target_mac, None)
        if not queue:
            return
        stats = self._dst(target_mac)
        if entry.vc is None:
            stats.dropped_setup += len(queue)
            self.counters.pending_dropped += len(queue)
            return
        for frame in queue:
            stats.sent_direct += 1
            self.port.send_on_vc(entry.vc, frame)

    def _on_arp_timeout(self, dest_mac: bytes, request_id: int) -> None:
        if self._request_id.get(dest_mac) != request_id:
            return  # resolved, or superseded by a newer request
        del self._request_id[dest_mac]
        queue = self._pending.pop(dest_mac, None)
        if queue:
            stats = self._dst(dest_mac)
            stats.dropped_timeout += len(queue)
            self.counters.pending_dropped += len(queue)

    # -- receiving -------------------------------------------------------

    def deliver(self, raw_frame: bytes, via_bus: bool) -> Optional[Tuple[bytes, bytes, bytes]]:
        """Accept a frame off a VC.  Frames for other stations are
        filtered; returns (dest, src, payload) on acceptance."""
        dest, src, payload = decode_frame(raw_frame)
        if dest != self.mac and not is_multicast(dest):
            self.counters.filtered += 1
            return None
        key = src + payload[:8]
        if key in self._seen:
            self.counters.duplicates += 1
        else:
            self._seen[key] = None
        if is_multicast(dest):
            self.counters.received_broadcast += 1
        elif via_bus:
            self.counters.received_bus += 1
        else:
            self.counters.received_direct += 1
        return dest, src, payload

    # -- internals -------------------------------------------------------

    def _dst(self, mac: bytes) -> DestinationStats:
        stats = self.per_destination.get(mac)
        if stats is None:
            stats = self.per_destination[mac] = DestinationStats()
        return stats

    def _cache_get(self, mac: bytes) -> Optional[ArpCacheEntry]:
        entry = self.cache.get(mac)
        if entry is None:
            return None
        if self.port.now() - entry.learned_at >= self.cache_aging:
            del self.cache[mac]
            return None
        self.lookup_log.append((mac, entry.atm))
        return entry
