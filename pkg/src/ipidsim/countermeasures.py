"""Patched IPID selection policies and a check that the side channel is gone.

Two fixes are modelled, usable alone or together:

* choose the per-socket counter by the IP protocol field instead of the DF bit,
  so a forged Fragmentation-Needed can no longer push TCP onto a shared counter;
* give RST segments the counter of their destination instead of the constant 0,
  so a RST and a challenge ACK move the same counter by the same amount.
"""

from __future__ import annotations

import enum
from typing import TYPE_CHECKING

from .netcore import TCP

if TYPE_CHECKING:
    from .victim_stack import IpidAssigner, PacketMeta


class PolicyVariant(enum.Enum):
    MIXED_DF_BASED = "MixedDfBased"
    PROTOCOL_FIELD_BASED = "ProtocolFieldBased"
    RST_DESTINATION_COUNTER = "RstDestinationCounter"
    COMBINED = "Combined"

    @property
    def tcp_uses_socket_counter(self) -> bool:
        return self in (PolicyVariant.PROTOCOL_FIELD_BASED, PolicyVariant.COMBINED)

    @property
    def rst_uses_destination(self) -> bool:
        return self in (PolicyVariant.RST_DESTINATION_COUNTER, PolicyVariant.COMBINED)


def assign_ipid_protocol_field(assigner: "IpidAssigner", meta: "PacketMeta", now_tick: int) -> int:
    if meta.protocol != TCP:
        return assigner.draw_hash(meta, now_tick)
    if meta.is_rst:
        if assigner.policy.rst_uses_destination:
            return assign_ipid_rst_dest_counter(assigner, meta, now_tick)
        return assigner.zero()
    if meta.is_synack:
        return assigner.zero()
    if meta.socket_id is None:
        assigner.socketless_fallbacks += 1
        return assigner.draw_destination(meta.dst, now_tick)
    return assigner.draw_socket(meta.socket_id)


def assign_ipid_rst_dest_counter(assigner: "IpidAssigner", meta: "PacketMeta", now_tick: int) -> int:
    """RST identification taken from whatever counter the destination already uses.

    With a live connection to the destination the RST is numbered exactly like
    that connection's other segments: its socket counter, or (when only this
    fix is deployed and DF was cleared for the destination) the same hash
    counter.  Without one, a per-destination counter is used.
    """
    if meta.dest_socket_id is not None:
        if not meta.df and not assigner.policy.tcp_uses_socket_counter:
            return assigner.draw_hash(meta, now_tick)
        return assigner.draw_socket(meta.dest_socket_id)
    return assigner.draw_destination(meta.dst, now_tick)


def verify_no_shared_counter(scenario) -> bool:
    """Replay the full attack under ``scenario`` and check the channel is closed.

    True iff no TCP packet the victim sent to the client touched any hash
    counter and the attack stopped at the collision search.
    """
    from .harness.scenario import run_scenario

    result = run_scenario(scenario, record_emissions=True)
    client = result.world.client_addr
    tcp_hash_to_client = [
        e for e in result.world.server.emissions if e.protocol == TCP and e.dst == client and e.counter == "hash"
    ]
    return not tcp_hash_to_client and result.summary["failure_phase"] == "collision"
