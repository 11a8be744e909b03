import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipidsim.netcore import (
    ACK,
    RST,
    SYN,
    TCP,
    Deliver,
    EchoReply,
    FragNeeded,
    Host,
    LinkModel,
    Network,
    SchedulingError,
    TcpSegment,
    Timer,
    Trace,
    icmp_packet,
    ip_image,
    ip_int,
    ipid_delta,
    parse_image,
    seq_add,
    seq_in_window,
    seq_sub,
    summarize,
    tcp_packet,
)

u32 = st.integers(0, 2**32 - 1)


class Sink(Host):
    def __init__(self, host_id, addresses):
        super().__init__(host_id, addresses)
        self.got = []
        self.timers = []

    def on_packet(self, pkt):
        self.got.append((self.sim.now, pkt))

    def on_timer(self, token):
        self.timers.append((self.sim.now, token))


def two_hosts(link=None, seed=0, trace=None):
    net = Network(seed, trace)
    a = net.add_host(Sink("a", [ip_int("10.0.0.1")]))
    b = net.add_host(Sink("b", [ip_int("10.0.0.2")]))
    net.connect("a", "b", link or LinkModel(latency_ms=10))
    return net, a, b


def seg_pkt(src="10.0.0.1", dst="10.0.0.2", flags=ACK, seq=0):
    return tcp_packet(ip_int(src), ip_int(dst), TcpSegment(1000, 80, seq, 0, flags))


class TestSeqArithmetic:
    def test_lower_boundary(self):
        assert seq_in_window(1000, 1000, 87380)

    def test_one_below(self):
        assert not seq_in_window(999, 1000, 87380)

    def test_wraparound(self):
        # brute-force membership over the wrapped window agrees
        lo = 2**32 - 100
        members = {(lo + i) % 2**32 for i in range(87381)}
        assert 50 in members
        assert seq_in_window(50, lo, 87380)

    def test_upper_boundary_inclusive(self):
        assert seq_in_window(1000 + 87380, 1000, 87380)
        assert not seq_in_window(1000 + 87381, 1000, 87380)

    def test_size_limit(self):
        with pytest.raises(ValueError):
            seq_in_window(0, 0, 2**31)

    @settings(max_examples=300)
    @given(lo=u32, size=st.integers(0, 300), offset=st.integers(-400, 400))
    def test_matches_enumeration(self, lo, size, offset):
        x = (lo + offset) % 2**32
        members = {(lo + i) % 2**32 for i in range(size + 1)}
        assert seq_in_window(x, lo, size) == (x in members)

    @given(a=u32, b=u32)
    def test_add_sub_inverse(self, a, b):
        assert seq_add(seq_sub(a, b), b) == a

    def test_ipid_wraps(self):
        assert ipid_delta(2, 65535) == 3


class TestPackets:
    def test_rst_without_payload(self):
        with pytest.raises(ValueError):
            TcpSegment(1, 2, 0, 0, RST, payload=b"x")

    def test_frag_needed_cap(self):
        FragNeeded(68, bytes(576))
        with pytest.raises(ValueError):
            FragNeeded(68, bytes(577))

    def test_short_embedded_is_constructible(self):
        assert len(FragNeeded(68, bytes(20)).embedded) == 20

    def test_ipid_range(self):
        with pytest.raises(ValueError):
            tcp_packet(1, 2, TcpSegment(1, 2, 0, 0, SYN), ipid=70000)

    def test_image_roundtrip_echo(self):
        pkt = icmp_packet(ip_int("10.0.0.1"), ip_int("10.0.1.2"), EchoReply(7, 9), ipid=1234)
        image = ip_image(pkt, 28)
        assert len(image) == 28
        q = parse_image(image)
        assert (q.src, q.dst, q.protocol, q.ipid, q.icmp_type, q.ident, q.seqno) == (
            pkt.ip.src, pkt.ip.dst, 1, 1234, 0, 7, 9,
        )

    def test_image_roundtrip_tcp(self):
        pkt = seg_pkt(seq=123456)
        q = parse_image(ip_image(pkt, 40))
        assert (q.protocol, q.sport, q.dport, q.seq) == (TCP, 1000, 80, 123456)

    def test_parse_rejects_short_and_non_ipv4(self):
        image = ip_image(seg_pkt(), 28)
        assert parse_image(image[:27]) is None
        assert parse_image(b"\x65" + image[1:]) is None

    def test_summary_format(self):
        text = summarize(seg_pkt(flags=SYN | ACK, seq=5))
        assert text == "TCP 10.0.0.1:1000>10.0.0.2:80 id=0 df=1 SA seq=5 ack=0 len=0"


class TestScheduling:
    def test_tie_break_is_insertion_order(self):
        net, a, b = two_hosts()
        first, second = seg_pkt(seq=1), seg_pkt(seq=2)
        net.schedule(5, Deliver(first, "b"))
        net.schedule(5, Deliver(second, "b"))
        net.run()
        assert [p.body.seq for _, p in b.got] == [1, 2]

    def test_past_event_aborts(self):
        net, a, b = two_hosts()
        net.set_timer("a", 4, "x")
        net.run()
        assert net.now == 4
        with pytest.raises(SchedulingError):
            net.schedule(3, Timer("a", "y"))

    def test_events_totally_ordered(self):
        net, a, b = two_hosts()
        events = [net.set_timer("a", t, i) for i, t in enumerate([3, 1, 3, 2, 1])]
        keys = [(e.fire_time, e.seqno) for e in events]
        assert len(set(keys)) == len(keys)
        net.run()
        assert a.timers == [(1, 1), (1, 4), (2, 3), (3, 0), (3, 2)]

    def test_run_until_stops_clock(self):
        net, a, b = two_hosts()
        net.set_timer("a", 50)
        assert net.run(until=20) == 20
        assert net.pending == 1

    def test_run_until_advances_idle_clock(self):
        net, a, b = two_hosts()
        net.set_timer("a", 5)
        assert net.run(until=1000) == 1000
        assert net.now == 1000


class TestTransmit:
    def test_latency(self):
        net, a, b = two_hosts(LinkModel(latency_ms=10))
        a.send(seg_pkt())
        net.run()
        assert b.got[0][0] == 10

    def test_spoof_filtered(self):
        trace = Trace()
        net, a, b = two_hosts(LinkModel(latency_ms=1, spoofing_permitted=False), trace=trace)
        a.send(seg_pkt(src="10.9.9.9"))
        a.send(seg_pkt())
        net.run()
        assert len(b.got) == 1
        assert net.filtered == 1
        assert any(" filtered " in line for line in trace.lines)

    def test_spoof_allowed_when_permitted(self):
        net, a, b = two_hosts(LinkModel(latency_ms=1))
        a.send(seg_pkt(src="10.9.9.9"))
        net.run()
        assert len(b.got) == 1

    def test_loss_rate_binomial(self):
        # 10000 sends at p=0.1: mean 1000, sd 30; the +-100 band is over 3 sd wide
        net, a, b = two_hosts(LinkModel(latency_ms=1, loss_rate=0.1), seed=42)
        for _ in range(10000):
            a.send(seg_pkt())
        net.run()
        assert 900 <= net.lost <= 1100
        assert len(b.got) == 10000 - net.lost

    def test_loss_is_seeded(self):
        counts = []
        for _ in range(2):
            net, a, b = two_hosts(LinkModel(latency_ms=1, loss_rate=0.3), seed=9)
            for _ in range(500):
                a.send(seg_pkt())
            net.run()
            counts.append(net.lost)
        assert counts[0] == counts[1]

    def test_unowned_destination_dropped(self):
        net, a, b = two_hosts()
        a.send(seg_pkt(dst="10.0.0.99"))
        net.run()
        assert b.got == []

    def test_range_ownership(self):
        net, a, b = two_hosts()
        net.own_range("b", ip_int("100.64.0.0"), ip_int("100.127.255.255"))
        a.send(seg_pkt(dst="100.70.1.2"))
        net.run()
        assert len(b.got) == 1
        with pytest.raises(ValueError):
            net.own_range("a", ip_int("100.100.0.0"), ip_int("100.100.0.255"))

    def test_link_validation(self):
        with pytest.raises(ValueError):
            LinkModel(loss_rate=1.5)
        with pytest.raises(ValueError):
            LinkModel(latency_ms=-1)


def test_identical_seeds_identical_log():
    logs = []
    for _ in range(2):
        trace = Trace()
        net, a, b = two_hosts(LinkModel(latency_ms=3, loss_rate=0.2), seed=5, trace=trace)
        for i in range(200):
            a.send(seg_pkt(seq=i))
        net.run()
        logs.append(trace.text())
    assert logs[0] == logs[1]
