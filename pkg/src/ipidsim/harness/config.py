"""Scenario files: TOML parsed into strict pydantic models.

Unknown keys are rejected, and a file with several problems reports all of
them at once.
"""

from __future__ import annotations

import enum
import ipaddress
import sys
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..attacker import PHASES, EmbeddedSource
from ..countermeasures import PolicyVariant
from ..victim_stack import MIN_PMTU_PRESETS


class ScenarioKind(enum.Enum):
    DOWNGRADE_ONLY = "DowngradeOnly"
    COLLISION_SCAN = "CollisionScan"
    PORT_DETECT = "PortDetect"
    FULL_RESET = "FullReset"
    FULL_INJECT = "FullInject"
    PATCHED_CONTROL = "PatchedControl"


class ConfigError(ValueError):
    """A scenario file failed validation; ``problems`` lists every violation."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid scenario:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _address(value) -> str:
    return str(ipaddress.IPv4Address(value))


class LinkSpec(_Strict):
    latency_ms: int = Field(10, ge=0)
    # when set, each run draws its round-trip time uniformly from this range
    rtt_ms: Optional[tuple[int, int]] = None
    loss_rate: float = Field(0.0, ge=0.0, le=1.0)
    spoofing_permitted: bool = True

    @field_validator("rtt_ms")
    @classmethod
    def _rtt_order(cls, v):
        if v is not None and not 0 <= v[0] <= v[1]:
            raise ValueError("rtt_ms must be [lo, hi] with 0 <= lo <= hi")
        return v


class TopologySpec(_Strict):
    server: str = "10.0.0.1"
    client: str = "10.0.1.2"
    attacker: str = "198.51.100.7"
    # attacker-owned block the address pool is drawn from
    attacker_block: str = "100.64.0.0/10"
    attacker_link: LinkSpec = LinkSpec(latency_ms=50)
    client_link: LinkSpec = LinkSpec(latency_ms=10)

    @field_validator("server", "client", "attacker")
    @classmethod
    def _valid_address(cls, v):
        return _address(v)

    @field_validator("attacker_block")
    @classmethod
    def _valid_block(cls, v):
        return str(ipaddress.IPv4Network(v, strict=True))

    @model_validator(mode="after")
    def _distinct(self):
        addrs = [self.server, self.client, self.attacker]
        if len(set(addrs)) != 3:
            raise ValueError("server, client and attacker addresses must be distinct")
        block = ipaddress.IPv4Network(self.attacker_block)
        for name in ("server", "client", "attacker"):
            if ipaddress.IPv4Address(getattr(self, name)) in block:
                raise ValueError(f"{name} address lies inside attacker_block")
        return self


class VictimSpec(_Strict):
    policy: PolicyVariant = PolicyVariant.MIXED_DF_BASED
    min_pmtu: int = Field(552, gt=0)
    validate_embedded_provenance: bool = False
    listening_ports: list[int] = [80]
    rst_on_unexpected_synack: bool = True
    challenge_ack_interval_ms: int = Field(500, gt=0)
    global_challenge_ack_per_sec: Optional[int] = Field(1000, ge=0)
    rcv_wnd: int = Field(87380, gt=0, lt=2**31)
    snd_max_wnd: int = Field(65535, gt=0, lt=2**31)
    tick_ms: int = Field(4, gt=0)
    hash_counters: int = Field(2048, ge=2)
    dest_counter_idle_ms: int = Field(60_000, gt=0)

    @field_validator("min_pmtu", mode="before")
    @classmethod
    def _preset(cls, v):
        if isinstance(v, str):
            try:
                return MIN_PMTU_PRESETS[v]
            except KeyError:
                raise ValueError(f"unknown min_pmtu preset {v!r}; known: {sorted(MIN_PMTU_PRESETS)}") from None
        return v

    @field_validator("listening_ports")
    @classmethod
    def _ports(cls, v):
        if not v or any(not 0 < p <= 65535 for p in v):
            raise ValueError("listening_ports must be a non-empty list of ports in 1..65535")
        return v


class ClientSpec(_Strict):
    connect: bool = True
    port: Optional[int] = Field(None, gt=0, le=65535)
    isn: Optional[int] = Field(None, ge=0, lt=2**32)
    server_isn: Optional[int] = Field(None, ge=0, lt=2**32)
    send_interval_ms: int = Field(0, ge=0)
    send_size: int = Field(48, gt=0)
    connect_at_ms: int = Field(0, ge=0)


class AttackSpec(_Strict):
    start_ms: int = Field(1000, ge=0)
    pool_size: int = Field(8192, gt=0)
    probe_rate_pps: int = Field(300, gt=0)
    scan_rate_pps: int = Field(584, gt=0)
    port_rate_pps: int = Field(1000, gt=0)
    port_range: tuple[int, int] = (32768, 61000)
    port_block: int = Field(64, gt=0)
    seq_block: int = Field(97, gt=0)
    retry_on_ambiguity: int = Field(1, ge=0)
    max_window_retries: int = Field(3, ge=0)
    embedded_source: EmbeddedSource = EmbeddedSource.SYNTHETIC
    jitter_probes: int = Field(20, gt=0)
    jitter_window_ms: int = Field(500, gt=0)
    linearize_interval_ms: int = Field(4, gt=0)
    phase_timeout_ms: dict[str, int] = {}
    default_timeout_ms: int = Field(600_000, gt=0)
    payload: str = "injected by an off-path attacker\n"

    @field_validator("phase_timeout_ms")
    @classmethod
    def _known_phases(cls, v):
        unknown = sorted(set(v) - set(PHASES))
        if unknown:
            raise ValueError(f"unknown phases {unknown}; known: {list(PHASES)}")
        return v

    @field_validator("port_range")
    @classmethod
    def _port_range(cls, v):
        if not 0 < v[0] <= v[1] <= 65535:
            raise ValueError("port_range must be [lo, hi] with 0 < lo <= hi <= 65535")
        return v

    @model_validator(mode="after")
    def _budgets(self):
        problems = []
        if self.port_block + 3 > self.port_rate_pps:
            problems.append("port_block + 3 must not exceed port_rate_pps")
        if self.seq_block + 3 > self.probe_rate_pps:
            problems.append("seq_block + 3 must not exceed probe_rate_pps")
        spread = 1000 // self.linearize_interval_ms + self.jitter_probes * 1000 // self.jitter_window_ms
        if spread > self.probe_rate_pps:
            problems.append(f"jitter windows need {spread} packets/s, above probe_rate_pps")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class ScenarioConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    kind: ScenarioKind = ScenarioKind.FULL_RESET
    server_port: int = Field(80, gt=0, le=65535)
    topology: TopologySpec = TopologySpec()
    victim: VictimSpec = VictimSpec()
    client: ClientSpec = ClientSpec()
    attack: AttackSpec = AttackSpec()

    @model_validator(mode="after")
    def _server_port_listens(self):
        if self.server_port not in self.victim.listening_ports:
            raise ValueError("server_port must be one of victim.listening_ports")
        return self

    def with_overrides(self, **changes) -> "ScenarioConfig":
        """A copy with dotted-path overrides, e.g. ``**{"victim.policy": "Combined"}``."""
        data = self.model_dump(mode="json")
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value.value if isinstance(value, enum.Enum) else value
        return parse_config(data)


def _describe(err: ValidationError) -> list[str]:
    out = []
    for item in err.errors():
        where = ".".join(str(p) for p in item["loc"]) or "<root>"
        msg = item["msg"]
        if item["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append(f"{where}: {msg}")
    return out


def parse_config(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def load_config(path) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"{path}: {err}"]) from None
    return parse_config(data)
