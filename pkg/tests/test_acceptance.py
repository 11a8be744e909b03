"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

import random
import statistics
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, make_world, run_attack  # noqa: E402
from test_golden import CASES, GOLDEN  # noqa: E402

from ipidsim.countermeasures import PolicyVariant  # noqa: E402
from ipidsim.harness import load_config, parse_config, run_scenario  # noqa: E402
from ipidsim.harness.analysis import collision_probability, oracle_small_pool  # noqa: E402
from ipidsim.harness.batch import run_batch  # noqa: E402
from ipidsim.netcore import ICMP, MASK16, TCP  # noqa: E402
from ipidsim.victim_stack import IpidAssigner, PacketMeta  # noqa: E402

DOCS = Path(__file__).resolve().parent.parent / "docs" / "scenarios"
LOSSY = {"topology": {"attacker_link": {"rtt_ms": [20, 200], "loss_rate": 0.005}, "client_link": {"loss_rate": 0.005}}}


def record(n, ok, detail):
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def merged(*parts):
    out: dict = {}
    for part in parts:
        for key, value in part.items():
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = merged(out[key], value)
            else:
                out[key] = value
    return out


def test_c1_ipid_policy_properties():
    started = time.perf_counter()
    rng = random.Random(2024)
    a = IpidAssigner(random.Random(1))
    for sock in range(16):
        a.new_socket(sock)
    dests = [rng.getrandbits(32) for _ in range(64)]
    violations = 0
    now = 0
    n = 100_000
    for _ in range(n):
        now += rng.choice((0, 0, 1, 1, 2, 5, 40, 700))
        kind = rng.randrange(4)
        dst = rng.choice(dests)
        if kind == 0:
            m = PacketMeta(TCP, 1, dst, rng.random() < 0.5, is_rst=True, socket_id=rng.choice((None, 3)))
        elif kind == 1:
            m = PacketMeta(TCP, 1, dst, True, is_synack=True)
        elif kind == 2:
            m = PacketMeta(TCP, 1, dst, True, socket_id=rng.randrange(16))
        else:
            m = PacketMeta(rng.choice((TCP, ICMP)), 1, dst, False)
        sockets = dict(a.socket_counters)
        hashes = list(a.hash_values)
        idx = a.index(m.src, m.dst, m.protocol)
        last = a.hash_last_tick[idx]
        value = a.assign(m, now)
        if kind in (0, 1):
            ok = value == 0 and a.hash_values == hashes and a.socket_counters == sockets
        elif kind == 2:
            ok = value == sockets[m.socket_id] and a.socket_counters[m.socket_id] == (value + 1) & MASK16
        else:
            step = (a.hash_values[idx] - value) & MASK16
            ok = value == hashes[idx] and 1 <= step <= max(1, now - last)
        violations += not ok
    elapsed = time.perf_counter() - started
    record(1, violations == 0 and elapsed < 5, f"{n} assignments, {violations} violations, {elapsed:.1f} s")


def test_c2_collision_statistics():
    started = time.perf_counter()
    cfg = parse_config({"kind": "CollisionScan", "attack": {"pool_size": 32768}})
    trials = []
    for i in range(200):
        s = run_scenario(cfg, seed=10_000 + i).summary
        trials.append(s["collision_trials"] if s["verified"] else None)
    found = [t for t in trials if t is not None]
    rate = {k: sum(t <= k for t in found) / len(trials) for k in (3000, 2048)}
    mean = statistics.fmean(found)
    elapsed = time.perf_counter() - started
    ok = (
        abs(rate[3000] - 0.769) <= 0.05
        and abs(rate[2048] - 0.632) <= 0.05
        and 1600 <= mean <= 2300
        and elapsed < 120
    )
    record(
        2,
        ok,
        f"pool 3000 {rate[3000]:.1%} (76.9%), pool 2048 {rate[2048]:.1%} (63.2%), "
        f"mean trials {mean:.0f}, {len(found)}/200 found, {elapsed:.0f} s",
    )


def test_c3_reduced_pool_oracle():
    started = time.perf_counter()
    parts = []
    ok = True
    for n in (2, 16, 64):
        stats = oracle_small_pool(n, n, 5000, seed=3)
        cfg = parse_config({"kind": "CollisionScan", "victim": {"hash_counters": n}, "attack": {"pool_size": n}})
        sim_hits = sum(bool(run_scenario(cfg, seed=20_000 + i).summary["verified"]) for i in range(200))
        expected = collision_probability(n, n)
        sigma = (expected * (1 - expected) / 200) ** 0.5
        sim_ok = abs(sim_hits / 200 - expected) <= 3 * sigma
        ok = ok and stats.within(3.0) and sim_ok
        parts.append(f"n={n}: expected {expected:.3f}, hash {stats.rate:.3f}, simulated {sim_hits / 200:.3f}")
    elapsed = time.perf_counter() - started
    record(3, ok and elapsed < 30, "; ".join(parts) + f"; {elapsed:.0f} s")


def test_c4_connection_detection():
    live = parse_config({"kind": "PortDetect", "topology": {"attacker_link": {"rtt_ms": [20, 200]}}})
    results = {}
    for label, cfg in (
        ("live", live),
        ("rst-off", live.with_overrides(**{"victim.rst_on_unexpected_synack": False})),
    ):
        runs = run_batch(cfg.with_overrides(seed=30_000), 50)["runs_detail"]
        good = [s for s in runs if s["outcome"] == "Success" and s["verified"]]
        worst = max(s["total_virtual_ms"] for s in runs)
        results[label] = (len(good), worst)
    idle = live.with_overrides(**{"client.connect": False, "seed": 31_000})
    idle_runs = run_batch(idle, 20)["runs_detail"]
    false_pos = sum(s["failure_reason"] != "NoConnection" for s in idle_runs)
    ok = all(n == 50 and worst <= 40_000 for n, worst in results.values()) and false_pos == 0
    detail = ", ".join(f"{k} {n}/50 detected, slowest {w / 1000:.1f} s" for k, (n, w) in results.items())
    record(4, ok, f"{detail}; no connection: {false_pos}/20 false positives")


def test_c5_exact_seq():
    cfg = parse_config(merged({"kind": "FullReset", "seed": 40_000}, LOSSY))
    runs = run_batch(cfg, 50, phase="exact_seq")["runs_detail"]
    wrong = resets = successes = 0
    for s in runs:
        truth = s["ground_truth"]
        if not truth["connection_alive"]:
            resets += 1
        if s["outcome"] == "Success":
            successes += 1
            inferred = s["phases"][-1]["inferred_value"]
            wrong += inferred != truth["at_start"]["rcv_nxt"]
    record(5, wrong == 0 and resets == 0, f"{successes}/50 succeeded, {wrong} wrong rcv_nxt, {resets} connections reset")


def test_c6_jitter_signal():
    data = {"client": {"port": 40321, "isn": 999_999, "server_isn": 4_999_999}}
    windows = 10
    counts = {}
    observed = {}
    for label, seq in (("below", 1_000_000 - 1000), ("in-window", 1_000_000 + 1000)):
        world = make_world(data, record_emissions=True)
        attacker = world.attacker
        run_attack(world, attacker.downgrade())
        addr = world.colliding_address(random.Random(5))
        idx = world.server.assigner.index(world.server_addr, world.client_addr, TCP)
        world.server.emissions.clear()
        # the window opens one echo interval in and reaches the server a one-way delay later
        start = world.net.now + attacker.cfg.linearize_interval_ms + world.rtt_ms // 2
        extras = run_attack(world, attacker.measure_jitter(addr, 40321, seq, 0, windows=windows, probes=20, window_ms=500))
        tcp = [e for e in world.server.emissions if e.protocol == TCP and e.counter == "hash" and e.counter_key == idx]
        per_window = [0] * windows
        for e in tcp:
            w = (e.time_ms - start) // 500
            if 0 <= w < windows:
                per_window[w] += 1
        counts[label] = per_window
        observed[label] = extras
    below, above = counts["below"], counts["in-window"]
    ok = (
        all(c == 20 for c in below)
        and all(c <= 1 for c in above)
        and sum(above) >= windows - 1
        and observed["below"] == below
        and observed["in-window"] == above
    )
    record(
        6,
        ok,
        f"counter increments per 500 ms: below rcv_nxt {statistics.fmean(below):.1f}, "
        f"in window {statistics.fmean(above):.1f} (attacker saw {observed['below'][0]} vs {observed['in-window'][0]})",
    )


def test_c7_end_to_end_reset():
    started = time.perf_counter()
    cfg = load_config(DOCS / "full_reset.toml").with_overrides(seed=50_000)
    batch = run_batch(cfg, 50)
    elapsed = time.perf_counter() - started
    verified = sum(bool(s["verified"]) for s in batch["runs_detail"] if s["outcome"] == "Success")
    mean_s = (batch["mean_virtual_ms"] or 0) / 1000
    ok = batch["success_rate"] >= 0.88 and verified == batch["successes"] and 75 <= mean_s <= 300 and elapsed < 600
    record(
        7,
        ok,
        f"{batch['successes']}/50 reset ({batch['success_rate']:.0%}), mean {mean_s:.1f} s virtual, "
        f"failures {batch['failures'] or 'none'}, {elapsed:.0f} s wall",
    )


def test_c8_end_to_end_injection():
    cfg = load_config(DOCS / "full_inject.toml").with_overrides(seed=60_000)
    batch = run_batch(cfg, 20)
    phases = batch["phase_mean_ms"]
    total = sum(phases.values())
    seq_share = phases.get("seq", 0) / total if total else 0.0
    dominant = max(phases, key=phases.get) if phases else None
    ok = batch["success_rate"] >= 0.9 and seq_share > 0.5 and dominant == "seq"
    record(
        8,
        ok,
        f"{batch['successes']}/20 injected ({batch['success_rate']:.0%}), seq share {seq_share:.1%} of phase time",
    )


def test_c9_countermeasure_regression():
    started = time.perf_counter()
    base = {"kind": "CollisionScan", "attack": {"pool_size": 1024}}
    patched = parse_config(merged(base, {"victim": {"policy": PolicyVariant.PROTOCOL_FIELD_BASED.value}}))
    control = parse_config(base)
    detections = tcp_hash = 0
    hits = 0
    for i in range(200):
        result = run_scenario(patched, seed=70_000 + i)
        detections += result.summary["outcome"] == "Success"
        tcp_hash += result.world.server.assigner.hash_draws[TCP]
        hits += bool(run_scenario(control, seed=70_000 + i).summary["verified"])
    expected = collision_probability(1024)
    sigma = (expected * (1 - expected) / 200) ** 0.5
    elapsed = time.perf_counter() - started
    ok = detections == 0 and tcp_hash == 0 and abs(hits / 200 - expected) <= 3 * sigma and elapsed < 180
    record(
        9,
        ok,
        f"patched: {detections}/200 detections, {tcp_hash} TCP hash draws; "
        f"control {hits / 200:.3f} vs {expected:.3f} +- {3 * sigma:.3f}; {elapsed:.0f} s",
    )


def test_c10_determinism():
    mismatched = []
    for name, data in sorted(CASES.items()):
        cfg = parse_config(data)
        first = run_scenario(cfg, trace=True).trace.text()
        second = run_scenario(cfg, trace=True).trace.text()
        golden = (GOLDEN / f"{name}.trace").read_text(encoding="utf-8")
        if not first == second == golden:
            mismatched.append(name)
    record(10, not mismatched, f"{len(CASES) - len(mismatched)}/{len(CASES)} canned scenarios byte-identical to golden")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(ACCEPTANCE_LINES))
    sys.exit(code)
