"""Collision-probability formula and brute-force oracles to check it against."""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass

from ..netcore import ICMP, TCP
from ..victim_stack import HASH_COUNTERS, hash_counter_index


def collision_probability(k: int, counters: int = HASH_COUNTERS) -> float:
    """Chance that at least one of ``k`` random addresses shares the client's counter."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return 1.0 - (1.0 - 1.0 / counters) ** k


def expected_trials(counters: int = HASH_COUNTERS) -> float:
    """Mean number of addresses tried before the first collision (geometric)."""
    return float(counters)


@dataclass
class OracleStats:
    counters: int
    k: int
    trials: int
    successes: int

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def expected(self) -> float:
        return collision_probability(self.k, self.counters)

    @property
    def sigma(self) -> float:
        p = self.expected
        return math.sqrt(p * (1 - p) / self.trials) if self.trials else 0.0

    def within(self, n_sigma: float = 3.0) -> bool:
        if self.sigma == 0.0:
            return self.rate == self.expected
        return abs(self.rate - self.expected) <= n_sigma * self.sigma


def oracle_small_pool(counters: int, k: int, trials: int, seed: int = 0) -> OracleStats:
    """Monte Carlo over the real counter hash with a reduced number of counters.

    Each trial draws a fresh boot key, client and ``k`` attacker addresses and
    checks whether any attacker's ICMP counter equals the client's TCP counter.
    """
    if not 2 <= counters <= HASH_COUNTERS:
        raise ValueError(f"counters must lie in [2, {HASH_COUNTERS}]")
    rng = random.Random(f"oracle/{seed}/{counters}/{k}")
    server = 0x0A000001
    hits = 0
    for _ in range(trials):
        key = rng.randbytes(16)
        client = rng.getrandbits(32)
        target = hash_counter_index(server, client, TCP, key, counters)
        for addr in rng.sample(range(1 << 32), k) if k else ():
            if hash_counter_index(server, addr, ICMP, key, counters) == target:
                hits += 1
                break
    return OracleStats(counters, k, trials, hits)


def enumerate_collision_rate(counters: int, k: int) -> float:
    """Exact collision rate by enumerating every assignment of ``k`` addresses to counters.

    The client's counter is fixed at 0 without loss of generality; feasible
    only while ``counters ** k`` stays small.
    """
    if counters ** k > 1 << 22:
        raise ValueError("too many assignments to enumerate")
    if k == 0:
        return 0.0
    hits = sum(1 for combo in itertools.product(range(counters), repeat=k) if 0 in combo)
    return hits / counters**k
