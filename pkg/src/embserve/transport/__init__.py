"""Modeled RDMA-style transport: topology, virtual-time and threaded backends."""

from .topology import (
    Assignment,
    Connection,
    CreditState,
    Engine,
    ParallelismUnit,
    Priority,
    ResourceDomain,
    Topology,
    assign_mapping_aware,
    assign_naive,
    create_connections,
    shared_units,
)
from .virtual import EventLoop, Message, TransportParams, VirtualTransport

__all__ = [
    "Assignment",
    "Connection",
    "CreditState",
    "Engine",
    "EventLoop",
    "Message",
    "ParallelismUnit",
    "Priority",
    "ResourceDomain",
    "Topology",
    "TransportParams",
    "VirtualTransport",
    "assign_mapping_aware",
    "assign_naive",
    "create_connections",
    "shared_units",
]
