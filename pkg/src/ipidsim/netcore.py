"""Packet model, modular sequence arithmetic and the discrete-event network.

Every simulated packet is an immutable value; hosts receive the very object the
sender built, which is safe because nothing can mutate it in flight.  Time is
an integer count of virtual milliseconds.
"""

from __future__ import annotations

import heapq
import ipaddress
import itertools
import random
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Optional, Union

MASK16 = 0xFFFF
MASK32 = 0xFFFFFFFF
SEQ_SPACE = 1 << 32
HALF_SEQ_SPACE = 1 << 31

# IP protocol numbers
ICMP = 1
TCP = 6

# TCP flag bits (plain ints: these are tested on every simulated segment)
FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10
SYNACK = SYN | ACK

_FLAG_LETTERS = ((SYN, "S"), (ACK, "A"), (RST, "R"), (FIN, "F"), (PSH, "P"))

# ICMP type/code used in byte images
ICMP_ECHO_REPLY = 0
ICMP_DEST_UNREACH = 3
ICMP_FRAG_NEEDED_CODE = 4
ICMP_ECHO_REQUEST = 8

MIN_EMBEDDED_OCTETS = 28
MAX_EMBEDDED_OCTETS = 576


def seq_add(a: int, b: int) -> int:
    return (a + b) & MASK32


def seq_sub(a: int, b: int) -> int:
    """Distance from ``b`` forward to ``a`` in the 32-bit sequence space."""
    return (a - b) & MASK32


def seq_in_window(x: int, lo: int, size: int) -> bool:
    """True iff ``x`` lies in ``[lo, lo + size]`` modulo 2**32."""
    if not 0 <= size < HALF_SEQ_SPACE:
        raise ValueError(f"window size {size} outside [0, 2**31)")
    return ((x - lo) & MASK32) <= size


def ipid_delta(later: int, earlier: int) -> int:
    return (later - earlier) & MASK16


@lru_cache(maxsize=65536)
def ip_str(addr: int) -> str:
    return str(ipaddress.IPv4Address(addr))


def ip_int(addr: Union[str, int]) -> int:
    if isinstance(addr, int):
        return addr
    return int(ipaddress.IPv4Address(addr))


# --------------------------------------------------------------------------
# packets


@dataclass(frozen=True, slots=True)
class Ipv4Header:
    src: int
    dst: int
    ipid: int
    df: bool
    protocol: int
    total_length: int = 40

    def __post_init__(self):
        if not 0 <= self.ipid <= MASK16:
            raise ValueError(f"ipid {self.ipid} out of range")


@dataclass(frozen=True, slots=True)
class TcpSegment:
    sport: int
    dport: int
    seq: int
    ack: int
    flags: int
    window: int = 65535
    payload: bytes = b""

    def __post_init__(self):
        if self.flags & RST and self.payload:
            raise ValueError("RST segments carry no payload")

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def has(self, flag: int) -> bool:
        return self.flags & flag == flag


@dataclass(frozen=True, slots=True)
class EchoRequest:
    ident: int
    seqno: int


@dataclass(frozen=True, slots=True)
class EchoReply:
    ident: int
    seqno: int


@dataclass(frozen=True, slots=True)
class FragNeeded:
    """ICMP destination-unreachable / fragmentation-needed."""

    next_hop_mtu: int
    embedded: bytes

    def __post_init__(self):
        if len(self.embedded) > MAX_EMBEDDED_OCTETS:
            raise ValueError(
                f"embedded data is {len(self.embedded)} octets; at most {MAX_EMBEDDED_OCTETS}"
            )


IcmpMessage = Union[EchoRequest, EchoReply, FragNeeded]
Body = Union[TcpSegment, EchoRequest, EchoReply, FragNeeded]


@dataclass(frozen=True, slots=True)
class Packet:
    ip: Ipv4Header
    body: Body

    @property
    def is_tcp(self) -> bool:
        return self.ip.protocol == TCP


def tcp_packet(src: int, dst: int, seg: TcpSegment, ipid: int = 0, df: bool = True) -> Packet:
    return Packet(Ipv4Header(src, dst, ipid, df, TCP, 40 + len(seg.payload)), seg)


def icmp_packet(src: int, dst: int, msg: IcmpMessage, ipid: int = 0, df: bool = False) -> Packet:
    length = 28 + (len(msg.embedded) if isinstance(msg, FragNeeded) else 0)
    return Packet(Ipv4Header(src, dst, ipid, df, ICMP, length), msg)


def flag_str(flags: int) -> str:
    return "".join(letter for bit, letter in _FLAG_LETTERS if flags & bit) or "."


def summarize(pkt: Packet) -> str:
    ip = pkt.ip
    body = pkt.body
    if isinstance(body, TcpSegment):
        return (
            f"TCP {ip_str(ip.src)}:{body.sport}>{ip_str(ip.dst)}:{body.dport} "
            f"id={ip.ipid} df={int(ip.df)} {flag_str(body.flags)} "
            f"seq={body.seq} ack={body.ack} len={len(body.payload)}"
        )
    head = f"ICMP {ip_str(ip.src)}>{ip_str(ip.dst)} id={ip.ipid} df={int(ip.df)}"
    if isinstance(body, EchoRequest):
        return f"{head} echo-request ident={body.ident} seqno={body.seqno}"
    if isinstance(body, EchoReply):
        return f"{head} echo-reply ident={body.ident} seqno={body.seqno}"
    return f"{head} frag-needed mtu={body.next_hop_mtu} embedded={len(body.embedded)}"


# --------------------------------------------------------------------------
# byte images, used only for the data quoted inside FragNeeded


_IP_FMT = "!BBHHHBBHII"


def ip_image(pkt: Packet, length: int = MIN_EMBEDDED_OCTETS) -> bytes:
    """The first ``length`` octets of ``pkt`` as it would appear on the wire.

    Only the IPv4 header and the first eight octets of the transport header are
    rendered; anything beyond is zero padding.  Checksums are left at zero.
    """
    ip = pkt.ip
    flags_frag = 0x4000 if ip.df else 0
    header = struct.pack(
        _IP_FMT, 0x45, 0, ip.total_length, ip.ipid, flags_frag, 64, ip.protocol, 0, ip.src, ip.dst
    )
    body = pkt.body
    if isinstance(body, TcpSegment):
        transport = struct.pack("!HHI", body.sport, body.dport, body.seq)
    elif isinstance(body, (EchoRequest, EchoReply)):
        kind = ICMP_ECHO_REPLY if isinstance(body, EchoReply) else ICMP_ECHO_REQUEST
        transport = struct.pack("!BBHHH", kind, 0, 0, body.ident, body.seqno)
    else:
        transport = struct.pack("!BBHHH", ICMP_DEST_UNREACH, ICMP_FRAG_NEEDED_CODE, 0, 0, body.next_hop_mtu)
    image = header + transport
    if length <= len(image):
        return image[:length]
    return image + bytes(length - len(image))


@dataclass(frozen=True)
class QuotedPacket:
    """Fields recovered from the octets quoted in an ICMP error."""

    src: int
    dst: int
    protocol: int
    ipid: int
    icmp_type: Optional[int] = None
    ident: Optional[int] = None
    seqno: Optional[int] = None
    sport: Optional[int] = None
    dport: Optional[int] = None
    seq: Optional[int] = None


def parse_image(data: bytes) -> Optional[QuotedPacket]:
    """Parse an embedded packet image; None when it is too short or not IPv4."""
    if len(data) < MIN_EMBEDDED_OCTETS:
        return None
    ver_ihl, _, _, ipid, _, _, proto, _, src, dst = struct.unpack_from(_IP_FMT, data)
    if ver_ihl >> 4 != 4:
        return None
    off = (ver_ihl & 0x0F) * 4
    if off < 20 or len(data) < off + 8:
        return None
    if proto == ICMP:
        kind, _, _, ident, seqno = struct.unpack_from("!BBHHH", data, off)
        return QuotedPacket(src, dst, proto, ipid, icmp_type=kind, ident=ident, seqno=seqno)
    if proto == TCP:
        sport, dport, seq = struct.unpack_from("!HHI", data, off)
        return QuotedPacket(src, dst, proto, ipid, sport=sport, dport=dport, seq=seq)
    return QuotedPacket(src, dst, proto, ipid)


# --------------------------------------------------------------------------
# event loop


class Deliver(NamedTuple):
    packet: Packet
    host_id: str


class Timer(NamedTuple):
    host_id: str
    token: object


class Event(NamedTuple):
    fire_time: int
    seqno: int
    action: Union[Deliver, Timer]


class SchedulingError(RuntimeError):
    """An event was scheduled before the current virtual time."""


@dataclass
class LinkModel:
    latency_ms: int = 10
    loss_rate: float = 0.0
    spoofing_permitted: bool = True

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must lie in [0, 1]")


class Trace:
    """Line-oriented event log: ``time_ms host direction summary``."""

    def __init__(self):
        self.lines: list[str] = []

    def record(self, time_ms: int, host: str, direction: str, text: str) -> None:
        self.lines.append(f"{time_ms} {host} {direction} {text}")

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.text())


class Host:
    """Base class for anything attached to the network."""

    def __init__(self, host_id: str, addresses):
        self.host_id = host_id
        self.addresses = set(addresses)
        self.sim: Optional[Network] = None

    def attach(self, sim: "Network") -> None:
        self.sim = sim

    def send(self, pkt: Packet) -> None:
        self.sim.transmit(self.host_id, pkt)

    def note(self, text: str) -> None:
        sim = self.sim
        if sim.trace is not None:
            sim.trace.record(sim.now, self.host_id, "note", text)

    def on_packet(self, pkt: Packet) -> None:
        pass

    def on_timer(self, token) -> None:
        pass


def derive_rng(seed: int, name: str) -> random.Random:
    """Independent stream for one component, fixed by (seed, name)."""
    return random.Random(f"{seed}/{name}")


class Network:
    """Single-threaded discrete-event simulator connecting hosts by links."""

    def __init__(self, seed: int = 0, trace: Optional[Trace] = None):
        self.seed = seed
        self.trace = trace
        self.now = 0
        self.hosts: dict[str, Host] = {}
        self.links: dict[tuple[str, str], LinkModel] = {}
        self.sent: dict[str, int] = {}
        self.lost = 0
        self.filtered = 0
        self.processed = 0
        self._owner: dict[int, str] = {}
        self._ranges: list[tuple[int, int, str]] = []
        self._queue: list[Event] = []
        self._seqno = itertools.count()
        self._loss_rng: dict[tuple[str, str], random.Random] = {}
        self._stopped = False

    def rng(self, name: str) -> random.Random:
        return derive_rng(self.seed, name)

    # topology -------------------------------------------------------------

    def add_host(self, host: Host) -> Host:
        if host.host_id in self.hosts:
            raise ValueError(f"duplicate host id {host.host_id!r}")
        for addr in host.addresses:
            if addr in self._owner:
                raise ValueError(f"address {ip_str(addr)} already owned by {self._owner[addr]}")
            self._owner[addr] = host.host_id
        self.hosts[host.host_id] = host
        self.sent[host.host_id] = 0
        host.attach(self)
        return host

    def own_address(self, host_id: str, addr: int) -> None:
        if addr in self._owner:
            raise ValueError(f"address {ip_str(addr)} already owned by {self._owner[addr]}")
        self._owner[addr] = host_id
        self.hosts[host_id].addresses.add(addr)

    def own_range(self, host_id: str, lo: int, hi: int) -> None:
        """Route every address in ``[lo, hi]`` to ``host_id`` (an address block)."""
        if lo > hi:
            raise ValueError("empty address range")
        for a_lo, a_hi, other in self._ranges:
            if lo <= a_hi and a_lo <= hi:
                raise ValueError(f"range overlaps one owned by {other}")
        self._ranges.append((lo, hi, host_id))

    def owner_of(self, addr: int) -> Optional[str]:
        owner = self._owner.get(addr)
        if owner is None:
            for lo, hi, host_id in self._ranges:
                if lo <= addr <= hi:
                    return host_id
        return owner

    def connect(self, a: str, b: str, link: LinkModel, reverse: Optional[LinkModel] = None) -> None:
        self.links[(a, b)] = link
        self.links[(b, a)] = reverse if reverse is not None else link
        self._loss_rng[(a, b)] = self.rng(f"link:{a}>{b}")
        self._loss_rng[(b, a)] = self.rng(f"link:{b}>{a}")

    # scheduling -----------------------------------------------------------

    def schedule(self, fire_time: int, action: Union[Deliver, Timer]) -> Event:
        if fire_time < self.now:
            raise SchedulingError(f"event at t={fire_time} scheduled after clock reached {self.now}")
        ev = Event(fire_time, next(self._seqno), action)
        heapq.heappush(self._queue, ev)
        return ev

    def set_timer(self, host_id: str, fire_time: int, token=None) -> Event:
        return self.schedule(fire_time, Timer(host_id, token))

    def transmit(self, from_id: str, pkt: Packet) -> None:
        self.sent[from_id] += 1
        trace = self.trace
        if trace is not None:
            trace.record(self.now, from_id, "tx", summarize(pkt))
        to_id = self._owner.get(pkt.ip.dst)
        if to_id is None and self._ranges:
            to_id = self.owner_of(pkt.ip.dst)
        if to_id is None:
            if trace is not None:
                trace.record(self.now, from_id, "noroute", summarize(pkt))
            return
        link = self.links.get((from_id, to_id))
        if link is None:
            if trace is not None:
                trace.record(self.now, from_id, "nolink", summarize(pkt))
            return
        if not link.spoofing_permitted and self.owner_of(pkt.ip.src) != from_id:
            self.filtered += 1
            if trace is not None:
                trace.record(self.now, from_id, "filtered", summarize(pkt))
            return
        if link.loss_rate and self._loss_rng[(from_id, to_id)].random() < link.loss_rate:
            self.lost += 1
            if trace is not None:
                trace.record(self.now, from_id, "lost", summarize(pkt))
            return
        self.schedule(self.now + link.latency_ms, Deliver(pkt, to_id))

    # running --------------------------------------------------------------

    def stop(self) -> None:
        self._stopped = True

    def run(self, until: Optional[int] = None, stop_when: Optional[Callable[[], bool]] = None) -> int:
        """Process events in (time, seqno) order; returns the final clock."""
        queue = self._queue
        hosts = self.hosts
        trace = self.trace
        self._stopped = False
        while queue and not self._stopped:
            if until is not None and queue[0].fire_time > until:
                self.now = until
                break
            fire_time, _, action = heapq.heappop(queue)
            self.now = fire_time
            self.processed += 1
            if type(action) is Deliver:
                pkt, host_id = action
                if trace is not None:
                    trace.record(fire_time, host_id, "rx", summarize(pkt))
                hosts[host_id].on_packet(pkt)
            else:
                hosts[action.host_id].on_timer(action.token)
            if stop_when is not None and stop_when():
                return self.now
        if until is not None and not self._stopped and self.now < until:
            self.now = until
        return self.now

    @property
    def pending(self) -> int:
        return len(self._queue)
