"""The simulated Linux server and a plain TCP client.

The server reproduces the 4.18+ identification logic (RST -> 0; DF clear ->
one of 2048 hash counters; SYN/ACK with DF -> 0; otherwise the socket
counter), path-MTU handling that clears DF below ``min_pmtu``, an ICMP echo
responder, and a TCP endpoint with the RFC 5961 challenge-ACK rules.
"""

from __future__ import annotations

import itertools
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from hashlib import blake2b
from typing import NamedTuple, Optional

from . import countermeasures
from .countermeasures import PolicyVariant
from .netcore import (
    ACK,
    HALF_SEQ_SPACE,
    ICMP,
    ICMP_ECHO_REPLY,
    MASK16,
    MASK32,
    MIN_EMBEDDED_OCTETS,
    PSH,
    RST,
    SYN,
    SYNACK,
    TCP,
    EchoReply,
    EchoRequest,
    FragNeeded,
    Host,
    Ipv4Header,
    Packet,
    TcpSegment,
    parse_image,
    seq_in_window,
)

HASH_COUNTERS = 2048
DEFAULT_RCV_WND = 87380
DEFAULT_SND_MAX_WND = 65535

MIN_PMTU_PRESETS = {"freebsd": 256, "macos": 296, "linux": 552, "rfc1191": 576, "windows": 596}

_HASH_INPUT = struct.Struct("!IIB")


def hash_counter_index(src: int, dst: int, protocol: int, boot_key: bytes, n_counters: int = HASH_COUNTERS) -> int:
    digest = blake2b(_HASH_INPUT.pack(src, dst, protocol), key=boot_key, digest_size=8).digest()
    return int.from_bytes(digest, "big") % n_counters


@dataclass(frozen=True, slots=True)
class PacketMeta:
    protocol: int
    src: int
    dst: int
    df: bool
    is_rst: bool = False
    is_synack: bool = False
    socket_id: Optional[int] = None
    # socket of a live connection to ``dst``; consulted only for RSTs
    dest_socket_id: Optional[int] = None


class IpidAssigner:
    """Identification counters of one host and the policy choosing among them."""

    def __init__(
        self,
        rng: random.Random,
        policy: PolicyVariant = PolicyVariant.MIXED_DF_BASED,
        n_counters: int = HASH_COUNTERS,
        dest_idle_ticks: int = 15000,
    ):
        self.rng = rng
        self.policy = policy
        self.n_counters = n_counters
        self.boot_key = rng.randbytes(16)
        self.hash_values = [rng.randrange(MASK16 + 1) for _ in range(n_counters)]
        self.hash_last_tick = [0] * n_counters
        self.socket_counters: dict[int, int] = {}
        self.dest_counters: dict[int, list[int]] = {}
        self.dest_idle_ticks = dest_idle_ticks
        self.hash_draws = {ICMP: 0, TCP: 0}
        self.socketless_fallbacks = 0
        # (kind, key) of the counter behind the most recent assignment
        self.last_source: tuple[str, Optional[int]] = ("zero", None)
        self._index_cache: dict[tuple[int, int, int], int] = {}

    @property
    def hash_counters(self) -> list[tuple[int, int]]:
        return list(zip(self.hash_values, self.hash_last_tick))

    def index(self, src: int, dst: int, protocol: int) -> int:
        key = (src, dst, protocol)
        idx = self._index_cache.get(key)
        if idx is None:
            idx = hash_counter_index(src, dst, protocol, self.boot_key, self.n_counters)
            if len(self._index_cache) > 200_000:
                self._index_cache.clear()
            self._index_cache[key] = idx
        return idx

    def new_socket(self, socket_id: int) -> None:
        self.socket_counters[socket_id] = self.rng.randrange(MASK16 + 1)

    def close_socket(self, socket_id: int) -> None:
        self.socket_counters.pop(socket_id, None)

    def assign(self, meta: PacketMeta, now_tick: int) -> int:
        policy = self.policy
        if policy is PolicyVariant.MIXED_DF_BASED:
            return self._assign_mixed(meta, now_tick)
        if policy.tcp_uses_socket_counter:
            return countermeasures.assign_ipid_protocol_field(self, meta, now_tick)
        if meta.is_rst:
            return countermeasures.assign_ipid_rst_dest_counter(self, meta, now_tick)
        return self._assign_mixed(meta, now_tick)

    def _assign_mixed(self, meta: PacketMeta, now_tick: int) -> int:
        if meta.is_rst:
            return self.zero()
        if not meta.df:
            return self.draw_hash(meta, now_tick)
        if meta.is_synack:
            return self.zero()
        if meta.socket_id is None:
            raise ValueError("DF set on a packet without a socket")
        return self.draw_socket(meta.socket_id)

    # counter primitives ----------------------------------------------------

    def zero(self) -> int:
        self.last_source = ("zero", None)
        return 0

    def draw_hash(self, meta: PacketMeta, now_tick: int) -> int:
        if meta.protocol == TCP and self.policy.tcp_uses_socket_counter:
            raise AssertionError(f"TCP packet reached a hash counter under {self.policy.value}")
        idx = self.index(meta.src, meta.dst, meta.protocol)
        value = self.hash_values[idx]
        elapsed = now_tick - self.hash_last_tick[idx]
        step = self.rng.randint(1, elapsed) if elapsed > 1 else 1
        self.hash_values[idx] = (value + step) & MASK16
        self.hash_last_tick[idx] = now_tick
        self.hash_draws[meta.protocol] = self.hash_draws.get(meta.protocol, 0) + 1
        self.last_source = ("hash", idx)
        return value

    def draw_socket(self, socket_id: int) -> int:
        value = self.socket_counters[socket_id]
        self.socket_counters[socket_id] = (value + 1) & MASK16
        self.last_source = ("socket", socket_id)
        return value

    def draw_destination(self, dst: int, now_tick: int) -> int:
        entry = self.dest_counters.get(dst)
        if entry is None or now_tick - entry[1] > self.dest_idle_ticks:
            if len(self.dest_counters) > 4096:
                self._collect_idle(now_tick)
            entry = [self.rng.randrange(MASK16 + 1), now_tick]
            self.dest_counters[dst] = entry
        value = entry[0]
        entry[0] = (value + 1) & MASK16
        entry[1] = now_tick
        self.last_source = ("dest", dst)
        return value

    def _collect_idle(self, now_tick: int) -> None:
        stale = [d for d, (_, t) in self.dest_counters.items() if now_tick - t > self.dest_idle_ticks]
        for d in stale:
            del self.dest_counters[d]


# --------------------------------------------------------------------------
# configuration and state


@dataclass
class PmtudConfig:
    min_pmtu: int = 552
    validate_embedded_provenance: bool = False
    interface_mtu: int = 1500

    def __post_init__(self):
        if self.min_pmtu <= 0:
            raise ValueError("min_pmtu must be positive")


@dataclass
class EndpointConfig:
    listening_ports: frozenset = frozenset({80})
    rst_on_unexpected_synack: bool = True
    challenge_ack_interval_ms: int = 500
    # None or 0 disables the host-wide limit
    global_challenge_ack_per_sec: Optional[int] = 1000
    rcv_wnd: int = DEFAULT_RCV_WND
    snd_max_wnd: int = DEFAULT_SND_MAX_WND
    tick_ms: int = 4
    policy: PolicyVariant = PolicyVariant.MIXED_DF_BASED
    dest_counter_idle_ms: int = 60_000

    def __post_init__(self):
        self.listening_ports = frozenset(self.listening_ports)
        if self.challenge_ack_interval_ms <= 0:
            raise ValueError("challenge_ack_interval_ms must be positive")
        if not 0 < self.rcv_wnd < HALF_SEQ_SPACE:
            raise ValueError("rcv_wnd must lie in (0, 2**31)")
        if self.tick_ms <= 0:
            raise ValueError("tick_ms must be positive")


@dataclass
class RouteCacheEntry:
    dst: int
    pmtu: int
    df_cleared: bool = False


@dataclass(slots=True)
class TcpConnState:
    four_tuple: tuple[int, int, int, int]  # local addr, local port, remote addr, remote port
    rcv_nxt: int
    snd_una: int
    snd_nxt: int
    socket_id: int
    rcv_wnd: int = DEFAULT_RCV_WND
    snd_max_wnd: int = DEFAULT_SND_MAX_WND
    last_challenge_ack_ms: Optional[int] = None
    delivered: list = field(default_factory=list)


class Emission(NamedTuple):
    time_ms: int
    protocol: int
    dst: int
    kind: str
    counter: str
    counter_key: Optional[int]
    ipid: int


# --------------------------------------------------------------------------
# server


class VictimHost(Host):
    def __init__(
        self,
        host_id: str,
        address: int,
        endpoint: Optional[EndpointConfig] = None,
        pmtud: Optional[PmtudConfig] = None,
        rng: Optional[random.Random] = None,
        n_counters: int = HASH_COUNTERS,
        record_emissions: bool = False,
    ):
        super().__init__(host_id, [address])
        self.address = address
        self.endpoint = endpoint or EndpointConfig()
        self.pmtud = pmtud or PmtudConfig()
        self.rng = rng or random.Random(0)
        ep = self.endpoint
        self.assigner = IpidAssigner(
            self.rng, ep.policy, n_counters, dest_idle_ticks=ep.dest_counter_idle_ms // ep.tick_ms
        )
        self.routes: dict[int, RouteCacheEntry] = {}
        self.connections: dict[tuple, TcpConnState] = {}
        self.aborted: list[tuple] = []
        self.emissions: Optional[list[Emission]] = [] if record_emissions else None
        self.stats = dict.fromkeys(
            ("synack", "rst", "challenge_ack", "challenge_suppressed", "dup_ack", "ack", "data", "echo_reply", "dropped"),
            0,
        )
        self._cookie_key = self.rng.randbytes(16)
        self._isn_overrides: dict[tuple, int] = {}
        self._by_remote: dict[int, list[TcpConnState]] = {}
        self._socket_ids = itertools.count(1)
        self._echo_replies_sent: set[tuple[int, int, int]] = set()
        self._echo_reply_order: deque = deque()
        self._global_bucket = -1
        self._global_count = 0

    # helpers ------------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.sim.now

    def tick(self) -> int:
        return self.sim.now // self.endpoint.tick_ms

    def route(self, dst: int) -> RouteCacheEntry:
        entry = self.routes.get(dst)
        if entry is None:
            entry = RouteCacheEntry(dst, self.pmtud.interface_mtu)
        return entry

    def df_for(self, dst: int) -> bool:
        entry = self.routes.get(dst)
        return entry is None or not entry.df_cleared

    def set_isn(self, four_tuple: tuple, isn: int) -> None:
        self._isn_overrides[four_tuple] = isn & MASK32

    def isn(self, four_tuple: tuple) -> int:
        isn = self._isn_overrides.get(four_tuple)
        if isn is None:
            digest = blake2b(struct.pack("!IHIH", *four_tuple), key=self._cookie_key, digest_size=4).digest()
            isn = int.from_bytes(digest, "big")
        return isn

    def connection_to(self, remote: int) -> Optional[TcpConnState]:
        conns = self._by_remote.get(remote)
        return conns[0] if conns else None

    def _record(self, protocol: int, dst: int, kind: str, ipid: int) -> None:
        if self.emissions is not None:
            src_kind, key = self.assigner.last_source
            self.emissions.append(Emission(self.sim.now, protocol, dst, kind, src_kind, key, ipid))

    def emit_tcp(self, dst: int, seg: TcpSegment, conn: Optional[TcpConnState], kind: str) -> Packet:
        df = self.df_for(dst)
        flags = seg.flags
        is_rst = bool(flags & RST)
        dest_sid = None
        if is_rst:
            live = self.connection_to(dst)
            dest_sid = live.socket_id if live is not None else None
        meta = PacketMeta(
            TCP,
            self.address,
            dst,
            df,
            is_rst,
            flags & SYNACK == SYNACK,
            conn.socket_id if conn is not None else None,
            dest_sid,
        )
        ipid = self.assigner.assign(meta, self.tick())
        self.stats[kind] += 1
        self._record(TCP, dst, kind, ipid)
        return Packet(Ipv4Header(self.address, dst, ipid, df, TCP, 40 + len(seg.payload)), seg)

    def _ack_for(self, conn: TcpConnState, kind: str) -> Packet:
        local, lport, remote, rport = conn.four_tuple
        seg = TcpSegment(lport, rport, conn.snd_nxt, conn.rcv_nxt, ACK, min(conn.rcv_wnd, 65535))
        return self.emit_tcp(remote, seg, conn, kind)

    # packet dispatch -------------------------------------------------------------

    def on_packet(self, pkt: Packet) -> None:
        if pkt.ip.dst != self.address:
            return
        body = pkt.body
        if type(body) is TcpSegment:
            responses = self.handle_tcp_segment(pkt, self.sim.now)
        elif type(body) is EchoRequest:
            responses = [self.handle_icmp_echo_request(pkt, self.sim.now)]
        elif type(body) is FragNeeded:
            self.handle_frag_needed(body)
            responses = ()
        else:
            responses = ()
        for out in responses:
            self.send(out)

    # ICMP ---------------------------------------------------------------------------

    def handle_icmp_echo_request(self, pkt: Packet, now: int) -> Packet:
        req = pkt.body
        dst = pkt.ip.src
        meta = PacketMeta(ICMP, self.address, dst, False)
        ipid = self.assigner.assign(meta, now // self.endpoint.tick_ms)
        self.stats["echo_reply"] += 1
        self._record(ICMP, dst, "echo_reply", ipid)
        if self.pmtud.validate_embedded_provenance:
            key = (dst, req.ident, req.seqno)
            if key not in self._echo_replies_sent:
                self._echo_replies_sent.add(key)
                self._echo_reply_order.append(key)
                if len(self._echo_reply_order) > 8192:
                    self._echo_replies_sent.discard(self._echo_reply_order.popleft())
        return Packet(Ipv4Header(self.address, dst, ipid, False, ICMP, 28), EchoReply(req.ident, req.seqno))

    def embedded_check(self, embedded: bytes, cfg: Optional[PmtudConfig] = None) -> bool:
        cfg = cfg or self.pmtud
        if len(embedded) < MIN_EMBEDDED_OCTETS:
            return False
        quoted = parse_image(embedded)
        if quoted is None:
            return False
        if not cfg.validate_embedded_provenance:
            return True
        if quoted.src != self.address:
            return False
        if quoted.protocol == ICMP:
            return (
                quoted.icmp_type == ICMP_ECHO_REPLY
                and (quoted.dst, quoted.ident, quoted.seqno) in self._echo_replies_sent
            )
        if quoted.protocol == TCP:
            conn = self.connections.get((self.address, quoted.sport, quoted.dst, quoted.dport))
            if conn is None:
                return False
            return ((quoted.seq - conn.snd_una) & MASK32) <= ((conn.snd_nxt - conn.snd_una) & MASK32)
        return False

    def handle_frag_needed(self, msg: FragNeeded, cfg: Optional[PmtudConfig] = None) -> Optional[RouteCacheEntry]:
        cfg = cfg or self.pmtud
        if not self.embedded_check(msg.embedded, cfg):
            self.note(f"frag-needed discarded embedded={len(msg.embedded)}")
            return None
        dst = parse_image(msg.embedded).dst
        entry = self.route(dst)
        if msg.next_hop_mtu < cfg.min_pmtu:
            entry.pmtu = cfg.min_pmtu
            entry.df_cleared = True
        else:
            entry.pmtu = min(entry.pmtu, msg.next_hop_mtu)
        self.routes[dst] = entry
        return entry

    # TCP --------------------------------------------------------------------------------

    def challenge_ack_permitted(self, conn: TcpConnState, now: int) -> bool:
        ep = self.endpoint
        last = conn.last_challenge_ack_ms
        if last is not None and now - last < ep.challenge_ack_interval_ms:
            return False
        limit = ep.global_challenge_ack_per_sec
        if limit:
            bucket = now // 1000
            if bucket != self._global_bucket:
                self._global_bucket = bucket
                self._global_count = 0
            if self._global_count >= limit:
                return False
            self._global_count += 1
        conn.last_challenge_ack_ms = now
        return True

    def _challenge(self, conn: TcpConnState, now: int) -> list[Packet]:
        if not self.challenge_ack_permitted(conn, now):
            self.stats["challenge_suppressed"] += 1
            return []
        return [self._ack_for(conn, "challenge_ack")]

    def _drop(self, why: str) -> list[Packet]:
        self.stats["dropped"] += 1
        if self.sim is not None and self.sim.trace is not None:
            self.note(f"drop {why}")
        return []

    def _establish(self, key: tuple, seg: TcpSegment) -> TcpConnState:
        isn = self.isn(key)
        sid = next(self._socket_ids)
        self.assigner.new_socket(sid)
        ep = self.endpoint
        conn = TcpConnState(
            key,
            rcv_nxt=seg.seq,
            snd_una=(isn + 1) & MASK32,
            snd_nxt=(isn + 1) & MASK32,
            socket_id=sid,
            rcv_wnd=ep.rcv_wnd,
            snd_max_wnd=ep.snd_max_wnd,
        )
        self.connections[key] = conn
        self._by_remote.setdefault(key[2], []).append(conn)
        return conn

    def abort(self, key: tuple) -> None:
        conn = self.connections.pop(key)
        self._by_remote[key[2]].remove(conn)
        self.assigner.close_socket(conn.socket_id)
        self.aborted.append(key)

    def handle_tcp_segment(self, pkt: Packet, now: int) -> list[Packet]:
        ip = pkt.ip
        seg = pkt.body
        key = (ip.dst, seg.dport, ip.src, seg.sport)
        conn = self.connections.get(key)
        flags = seg.flags
        ep = self.endpoint

        if flags & SYN:
            if not flags & ACK:
                if conn is not None:
                    return self._challenge(conn, now)
                if seg.dport in ep.listening_ports:
                    reply = TcpSegment(
                        seg.dport, seg.sport, self.isn(key), (seg.seq + 1) & MASK32, SYNACK, min(ep.rcv_wnd, 65535)
                    )
                    return [self.emit_tcp(ip.src, reply, None, "synack")]
                return self._drop("syn to closed port")
            if conn is not None:
                return self._challenge(conn, now)
            if ep.rst_on_unexpected_synack:
                return [self.emit_tcp(ip.src, TcpSegment(seg.dport, seg.sport, seg.ack, 0, RST, 0), None, "rst")]
            return self._drop("unexpected syn/ack")

        if flags & RST:
            if conn is None:
                return self._drop("rst without connection")
            if not seq_in_window(seg.seq, conn.rcv_nxt, conn.rcv_wnd):
                return self._drop("rst out of window")
            if seg.seq == conn.rcv_nxt:
                self.abort(key)
                self.note("connection reset")
                return []
            return self._challenge(conn, now)

        if not flags & ACK:
            return self._drop("no ack flag")

        if conn is None:
            if seg.dport in ep.listening_ports and seg.ack == (self.isn(key) + 1) & MASK32:
                conn = self._establish(key, seg)
                if not seg.payload:
                    return []
            else:
                return self._drop("ack without connection")

        behind = (conn.rcv_nxt - seg.seq) & MASK32
        if 0 < behind < HALF_SEQ_SPACE:
            return [self._ack_for(conn, "dup_ack")]
        if not seq_in_window(seg.seq, conn.rcv_nxt, conn.rcv_wnd):
            return self._drop("seq above window")

        lag = (conn.snd_una - seg.ack) & MASK32
        if conn.snd_max_wnd < lag < HALF_SEQ_SPACE:
            return self._challenge(conn, now)
        floor = (conn.snd_una - conn.snd_max_wnd) & MASK32
        if ((seg.ack - floor) & MASK32) > ((conn.snd_nxt - floor) & MASK32):
            return self._drop("ack not acceptable")
        advance = (seg.ack - conn.snd_una) & MASK32
        if 0 < advance <= ((conn.snd_nxt - conn.snd_una) & MASK32):
            conn.snd_una = seg.ack
        if seg.payload:
            if seg.seq == conn.rcv_nxt:
                conn.rcv_nxt = (conn.rcv_nxt + len(seg.payload)) & MASK32
                conn.delivered.append(seg.payload)
                return [self._ack_for(conn, "ack")]
            return [self._ack_for(conn, "dup_ack")]
        return []

    def send_data(self, four_tuple: tuple, data: bytes) -> int:
        """Queue application data on a connection; returns octets actually sent."""
        conn = self.connections[four_tuple]
        in_flight = (conn.snd_nxt - conn.snd_una) & MASK32
        room = max(0, conn.snd_max_wnd - in_flight)
        data = data[:room]
        mss = self.route(four_tuple[2]).pmtu - 40
        local, lport, remote, rport = four_tuple
        for off in range(0, len(data), mss):
            chunk = data[off : off + mss]
            seg = TcpSegment(lport, rport, conn.snd_nxt, conn.rcv_nxt, ACK | PSH, min(conn.rcv_wnd, 65535), chunk)
            conn.snd_nxt = (conn.snd_nxt + len(chunk)) & MASK32
            self.send(self.emit_tcp(remote, seg, conn, "data"))
        return len(data)


# --------------------------------------------------------------------------
# client


SYN_RTO_MS = 1000
SYN_RETRIES = 5


class ClientHost(Host):
    """A well-behaved peer: one connection to the server, optional periodic data."""

    def __init__(
        self,
        host_id: str,
        address: int,
        server: int,
        server_port: int,
        rng: random.Random,
        port: Optional[int] = None,
        isn: Optional[int] = None,
        connect_at: Optional[int] = 0,
        send_interval_ms: int = 0,
        send_size: int = 48,
        rcv_wnd: int = 65535,
    ):
        super().__init__(host_id, [address])
        self.address = address
        self.server = server
        self.server_port = server_port
        self.rng = rng
        self.port = port if port is not None else rng.randint(32768, 61000)
        self.isn = isn if isn is not None else rng.getrandbits(32)
        self.connect_at = connect_at
        self.send_interval_ms = send_interval_ms
        self.send_size = send_size
        self.rcv_wnd = rcv_wnd
        self.snd_una = self.snd_nxt = (self.isn + 1) & MASK32
        self.rcv_nxt = 0
        self.established = False
        self.closed = False
        self.received: list[bytes] = []
        self._ipid = rng.randrange(MASK16 + 1)
        self._syn_tries = 0

    @property
    def four_tuple_at_server(self) -> tuple[int, int, int, int]:
        return (self.server, self.server_port, self.address, self.port)

    def attach(self, sim) -> None:
        super().attach(sim)
        if self.connect_at is not None:
            sim.set_timer(self.host_id, self.connect_at, "connect")

    def _send_seg(self, seg: TcpSegment) -> None:
        ipid = self._ipid
        self._ipid = (ipid + 1) & MASK16
        self.send(Packet(Ipv4Header(self.address, self.server, ipid, True, TCP, 40 + len(seg.payload)), seg))

    def on_timer(self, token) -> None:
        if token == "connect":
            self._syn_tries = 0
            self.on_timer("syn")
        elif token == "syn" and not self.established and self._syn_tries <= SYN_RETRIES:
            self._send_seg(TcpSegment(self.port, self.server_port, self.isn, 0, SYN, self.rcv_wnd))
            self.sim.set_timer(self.host_id, self.sim.now + (SYN_RTO_MS << self._syn_tries), "syn")
            self._syn_tries += 1
        elif token == "data" and self.established and not self.closed:
            self.send_data(bytes(self.send_size))
            self.sim.set_timer(self.host_id, self.sim.now + self.send_interval_ms, "data")

    def send_data(self, payload: bytes) -> None:
        seg = TcpSegment(self.port, self.server_port, self.snd_nxt, self.rcv_nxt, ACK | PSH, self.rcv_wnd, payload)
        self.snd_nxt = (self.snd_nxt + len(payload)) & MASK32
        self._send_seg(seg)

    def on_packet(self, pkt: Packet) -> None:
        seg = pkt.body
        if type(seg) is not TcpSegment or pkt.ip.src != self.server or seg.sport != self.server_port:
            return
        flags = seg.flags
        ours = seg.dport == self.port
        if flags & SYN and flags & ACK:
            if ours and not self.established and seg.ack == (self.isn + 1) & MASK32:
                self.established = True
                self.rcv_nxt = (seg.seq + 1) & MASK32
                self._send_seg(TcpSegment(self.port, self.server_port, self.snd_nxt, self.rcv_nxt, ACK, self.rcv_wnd))
                if self.send_interval_ms > 0:
                    self.sim.set_timer(self.host_id, self.sim.now + self.send_interval_ms, "data")
            elif not ours:
                self._send_seg(TcpSegment(seg.dport, self.server_port, seg.ack, 0, RST, 0))
            return
        if not ours or not self.established:
            return
        if flags & RST:
            if seg.seq == self.rcv_nxt:
                self.closed = True
            return
        if seg.payload:
            if seg.seq == self.rcv_nxt:
                self.rcv_nxt = (self.rcv_nxt + len(seg.payload)) & MASK32
                self.received.append(seg.payload)
                self._send_seg(TcpSegment(self.port, self.server_port, self.snd_nxt, self.rcv_nxt, ACK, self.rcv_wnd))
            return
        advance = (seg.ack - self.snd_una) & MASK32
        if 0 < advance <= ((self.snd_nxt - self.snd_una) & MASK32):
            self.snd_una = seg.ack
