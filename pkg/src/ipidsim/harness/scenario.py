"""Build a simulated world from a scenario config and run one attack in it."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Optional

from ..attacker import PHASES, AttackConfig, AttackerHost, AttackReport
from ..netcore import HALF_SEQ_SPACE, ICMP, MASK32, TCP, LinkModel, Network, Trace, ip_int, ip_str
from ..victim_stack import ClientHost, EndpointConfig, PmtudConfig, VictimHost
from .config import ScenarioConfig, ScenarioKind

PIPELINES = {
    ScenarioKind.DOWNGRADE_ONLY: ("downgrade",),
    ScenarioKind.COLLISION_SCAN: ("downgrade", "collision"),
    ScenarioKind.PORT_DETECT: ("downgrade", "port"),
    ScenarioKind.FULL_RESET: ("downgrade", "collision", "port", "seq", "window", "exact_seq", "reset"),
    ScenarioKind.FULL_INJECT: ("downgrade", "collision", "port", "seq", "window", "exact_seq", "ack", "inject"),
    ScenarioKind.PATCHED_CONTROL: ("downgrade", "collision", "port", "seq", "window", "exact_seq", "reset"),
}

ADDRESS_PHASES = ("downgrade", "collision")


@dataclass
class World:
    cfg: ScenarioConfig
    seed: int
    net: Network
    server: VictimHost
    client: ClientHost
    attacker: AttackerHost
    pool: list[int]
    rtt_ms: int
    server_addr: int = 0
    client_addr: int = 0

    @property
    def four_tuple(self) -> tuple[int, int, int, int]:
        return self.client.four_tuple_at_server

    def connection(self):
        return self.server.connections.get(self.four_tuple)

    def colliding_address(self, rng) -> int:
        """An attacker-block address whose ICMP counter is the client's TCP counter."""
        assigner = self.server.assigner
        target = assigner.index(self.server_addr, self.client_addr, TCP)
        block = ipaddress.IPv4Network(self.cfg.topology.attacker_block)
        base = int(block.network_address) + 1
        span = block.num_addresses - 2
        while True:
            addr = base + rng.randrange(span)
            if assigner.index(self.server_addr, addr, ICMP) == target:
                return addr

    def ground_truth(self) -> dict:
        conn = self.connection()
        route = self.server.routes.get(self.client_addr)
        truth = {
            # with SYN cookies a lost final ACK leaves the client alone believing it is connected
            "port": self.client.port if conn is not None else None,
            "df_cleared": bool(route and route.df_cleared),
            "connection_alive": conn is not None,
        }
        if conn is not None:
            truth.update(rcv_nxt=conn.rcv_nxt, snd_una=conn.snd_una, snd_nxt=conn.snd_nxt)
        return truth


@dataclass
class ScenarioResult:
    summary: dict
    world: World
    report: AttackReport
    trace: Optional[Trace] = None
    known: dict = field(default_factory=dict)


def _link(spec, rtt_ms: Optional[int] = None) -> LinkModel:
    latency = spec.latency_ms if rtt_ms is None else rtt_ms // 2
    return LinkModel(latency, spec.loss_rate, spec.spoofing_permitted)


def _draw_rtt(net: Network, name: str, spec) -> Optional[int]:
    if spec.rtt_ms is None:
        return None
    return net.rng(name).randint(*spec.rtt_ms)


def build_world(
    cfg: ScenarioConfig, seed: Optional[int] = None, trace: Optional[Trace] = None, record_emissions: bool = False
) -> World:
    seed = cfg.seed if seed is None else seed
    net = Network(seed, trace)
    topo = cfg.topology
    server_addr, client_addr, attacker_addr = ip_int(topo.server), ip_int(topo.client), ip_int(topo.attacker)
    v = cfg.victim
    endpoint = EndpointConfig(
        listening_ports=frozenset(v.listening_ports),
        rst_on_unexpected_synack=v.rst_on_unexpected_synack,
        challenge_ack_interval_ms=v.challenge_ack_interval_ms,
        global_challenge_ack_per_sec=v.global_challenge_ack_per_sec,
        rcv_wnd=v.rcv_wnd,
        snd_max_wnd=v.snd_max_wnd,
        tick_ms=v.tick_ms,
        policy=v.policy,
        dest_counter_idle_ms=v.dest_counter_idle_ms,
    )
    pmtud = PmtudConfig(min_pmtu=v.min_pmtu, validate_embedded_provenance=v.validate_embedded_provenance)
    server = VictimHost("server", server_addr, endpoint, pmtud, net.rng("server"), v.hash_counters, record_emissions)

    c = cfg.client
    client = ClientHost(
        "client",
        client_addr,
        server_addr,
        cfg.server_port,
        net.rng("client"),
        port=c.port,
        isn=c.isn,
        connect_at=c.connect_at_ms if c.connect else None,
        send_interval_ms=c.send_interval_ms,
        send_size=c.send_size,
    )
    if c.server_isn is not None:
        server.set_isn(client.four_tuple_at_server, c.server_isn)

    block = ipaddress.IPv4Network(topo.attacker_block)
    base = int(block.network_address) + 1
    pool_rng = net.rng("pool")
    span = block.num_addresses - 2
    if cfg.attack.pool_size > span:
        raise ValueError(f"attack.pool_size {cfg.attack.pool_size} exceeds the {span} usable block addresses")
    pool = [base + off for off in pool_rng.sample(range(span), cfg.attack.pool_size)]

    a = cfg.attack
    attack_cfg = AttackConfig(
        server=server_addr,
        server_port=cfg.server_port,
        client=client_addr,
        addr_pool=pool,
        probe_rate_pps=a.probe_rate_pps,
        scan_rate_pps=a.scan_rate_pps,
        port_rate_pps=a.port_rate_pps,
        port_range=tuple(a.port_range),
        retry_on_ambiguity=a.retry_on_ambiguity,
        max_window_retries=a.max_window_retries,
        phase_timeout_ms=dict(a.phase_timeout_ms),
        default_timeout_ms=a.default_timeout_ms,
        embedded_source=a.embedded_source,
        port_block=a.port_block,
        seq_block=a.seq_block,
        seq_stride=v.rcv_wnd,
        challenge_interval_ms=v.challenge_ack_interval_ms,
        jitter_probes=a.jitter_probes,
        jitter_window_ms=a.jitter_window_ms,
        linearize_interval_ms=a.linearize_interval_ms,
        payload=a.payload.encode(),
    )
    attacker = AttackerHost("attacker", attack_cfg, net.rng("attacker"), primary=attacker_addr)

    attacker_link = _link(topo.attacker_link, _draw_rtt(net, "rtt", topo.attacker_link))
    client_link = _link(topo.client_link, _draw_rtt(net, "client-rtt", topo.client_link))

    for host in (server, client, attacker):
        net.add_host(host)
    net.own_range("attacker", int(block.network_address), int(block.broadcast_address))
    net.connect("attacker", "server", attacker_link)
    net.connect("client", "server", client_link)
    return World(cfg, seed, net, server, client, attacker, pool, 2 * attacker_link.latency_ms, server_addr, client_addr)


def prepare_inputs(world: World, phases: tuple[str, ...]) -> dict:
    """Ground-truth values for every input the chosen phases need but do not infer."""
    rng = world.net.rng("harness")
    ran = set(phases)
    given: dict = {}
    conn = world.connection()
    v = world.cfg.victim
    if "collision" not in ran and ran & set(PHASES[2:]):
        given["collision"] = world.colliding_address(rng)
    if "port" not in ran:
        given["port"] = world.client.port
    if conn is None:
        return given
    if "seq" not in ran:
        given["seq"] = (conn.rcv_nxt + rng.randint(1, v.rcv_wnd)) & MASK32
    if "window" not in ran:
        given["window"] = (conn.snd_una - rng.randint(v.snd_max_wnd + 1, HALF_SEQ_SPACE - 1)) & MASK32
    if "exact_seq" not in ran:
        given["exact_seq"] = conn.rcv_nxt
    if "ack" not in ran:
        given["ack"] = conn.snd_una
    return given


def phases_for(cfg: ScenarioConfig, phase: Optional[str] = None) -> tuple[str, ...]:
    if phase is None:
        return PIPELINES[cfg.kind]
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; known: {', '.join(PHASES)}")
    return ("downgrade",) if phase == "downgrade" else ("downgrade", phase)


def _json_value(name: str, value):
    if value is None:
        return None
    if name in ADDRESS_PHASES:
        return ip_str(value)
    return value


def run_scenario(
    cfg: ScenarioConfig,
    seed: Optional[int] = None,
    trace: bool = False,
    phase: Optional[str] = None,
    record_emissions: bool = False,
) -> ScenarioResult:
    seed = cfg.seed if seed is None else seed
    log = Trace() if trace else None
    world = build_world(cfg, seed, log, record_emissions)
    net = world.net
    net.run(until=cfg.attack.start_ms)
    phases = phases_for(cfg, phase)
    given = prepare_inputs(world, phases)
    before = world.ground_truth()
    attacker = world.attacker
    attacker.start(attacker.pipeline(phases, given))
    net.run(stop_when=lambda: attacker.done)
    if not attacker.done:
        raise RuntimeError("event queue drained before the attack finished")
    known = attacker.result
    report = attacker.report
    summary = summarize_run(world, report, known, phases, seed, before)
    return ScenarioResult(summary, world, report, log, known)


def _judge(world: World, report: AttackReport, known: dict, phases: tuple[str, ...], before: dict, truth: dict):
    """Final (outcome, failure_phase, failure_reason, verified) against ground truth.

    ``before`` is the victim's state when the attack started, ``truth`` its
    state at the end.
    """
    kind = world.cfg.kind
    last = phases[-1]
    if not before["connection_alive"]:
        # a retransmitted SYN may complete the handshake after the attack began
        before = truth
    failure_phase, failure_reason = report.failure_phase, report.failure_reason
    verified = None
    if failure_reason is None:
        if last == "downgrade":
            verified = truth["df_cleared"]
            if not verified:
                failure_phase, failure_reason = "downgrade", "Rejected"
        elif last == "collision":
            addr = known["collision"]
            a = world.server.assigner
            verified = a.index(world.server_addr, addr, ICMP) == a.index(world.server_addr, world.client_addr, TCP)
        elif last == "port":
            verified = known["port"] == truth["port"]
        elif last == "seq":
            rcv_nxt = before.get("rcv_nxt")
            verified = rcv_nxt is not None and ((known["seq"] - rcv_nxt) & MASK32) <= world.cfg.victim.rcv_wnd
        elif last == "window":
            snd_una = before.get("snd_una")
            lag = (snd_una - known["window"]) & MASK32 if snd_una is not None else -1
            verified = world.cfg.victim.snd_max_wnd < lag < HALF_SEQ_SPACE
        elif last == "exact_seq":
            verified = known["exact_seq"] == before.get("rcv_nxt") and truth["connection_alive"]
        elif last == "ack":
            verified = known["ack"] == before.get("snd_una")
        elif last == "reset":
            verified = not truth["connection_alive"]
            if not verified:
                failure_phase, failure_reason = "reset", "Stale"
        elif last == "inject":
            conn = world.connection()
            payload = world.attacker.cfg.payload
            verified = conn is not None and bool(conn.delivered) and conn.delivered[-1] == payload
            if not verified:
                failure_phase, failure_reason = "inject", "BadAck"
    elif failure_phase == "port" and failure_reason == "NoConnection":
        verified = truth["port"] is None
    if failure_reason is not None and failure_phase != "reset":
        if before["connection_alive"] and not truth["connection_alive"]:
            failure_reason = "ConnectionReset"
    if kind is ScenarioKind.PATCHED_CONTROL:
        # the control is "verified" when the patched victim stops the attack at the collision search
        verified = failure_phase == "collision"
    outcome = "Success" if failure_reason is None else "Failure"
    return outcome, failure_phase, failure_reason, verified


def summarize_run(
    world: World, report: AttackReport, known: dict, phases: tuple[str, ...], seed: int, before: dict
) -> dict:
    truth = world.ground_truth()
    outcome, failure_phase, failure_reason, verified = _judge(world, report, known, phases, before, truth)
    phase_rows = [
        {
            "name": p.name,
            "virtual_ms": p.virtual_ms,
            "packets_sent": p.packets_sent,
            "outcome": p.outcome,
            "inferred_value": _json_value(p.name, p.inferred_value),
        }
        for p in report.phases
    ]
    truth_out = dict(truth)
    truth_out["at_start"] = before
    return {
        "kind": world.cfg.kind.value,
        "seed": seed,
        "phases_requested": list(phases),
        "outcome": outcome,
        "failure_phase": failure_phase,
        "failure_reason": failure_reason,
        "verified": verified,
        "total_virtual_ms": sum(p.virtual_ms for p in report.phases),
        "rtt_ms": world.rtt_ms,
        "collision_trials": known.get("collision_trials"),
        "phases": phase_rows,
        "packets_sent": dict(world.net.sent),
        "ground_truth": truth_out,
        "policy": world.cfg.victim.policy.value,
    }
