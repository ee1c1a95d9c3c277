"""Serverless model exchange: wire format, one-hop broadcast, averaging.

Wire format of a ModelMessage (all little-endian, 24-byte header)::

    offset  size  field
    0       4     magic b"PFLM"
    4       2     version (1)
    6       4     node_id (uint32)
    10      4     channel_id (uint32)
    14      2     m   (input dim)
    16      2     P   (first LSTM layer)
    18      2     Q   (second LSTM layer)
    20      4     param_count (uint32)
    24      4*n   float32 parameters in ParamVector order

Model files on disk use the same bytes.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .neuralnet import Architecture, ParamVector

MAGIC = b"PFLM"
VERSION = 1
HEADER = struct.Struct("<4sHIIHHHI")
DEFAULT_REGISTRY_CAPACITY = 8


class MessageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelMessage:
    node_id: int
    channel_id: int
    params: ParamVector = field(repr=False)
    version: int = VERSION

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    @property
    def payload_size(self) -> int:
        return 4 * len(self.params)


def serialize(node_id: int, channel_id: int, params: ParamVector) -> bytes:
    arch = params.arch
    if len(params) != arch.n_params:
        raise ValueError("parameter count does not match the architecture")
    head = HEADER.pack(
        MAGIC, VERSION, node_id, channel_id, arch.input_dim, arch.p_units, arch.q_units, arch.n_params
    )
    return head + params.values.astype("<f4").tobytes()


def deserialize(data: bytes) -> ModelMessage:
    if len(data) < HEADER.size:
        raise MessageFormatError(f"message of {len(data)} bytes is shorter than the header")
    magic, version, node_id, channel_id, m, P, Q, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MessageFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MessageFormatError(f"unsupported version {version}")
    try:
        arch = Architecture(m, P, Q)
    except ValueError as exc:
        raise MessageFormatError(str(exc)) from exc
    if count != arch.n_params:
        raise MessageFormatError(f"param_count {count} does not match architecture ({arch.n_params})")
    if len(data) != HEADER.size + 4 * count:
        raise MessageFormatError(f"payload is {len(data) - HEADER.size} bytes, expected {4 * count}")
    values = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(np.float64)
    try:
        params = ParamVector(arch, values)
    except ValueError as exc:
        raise MessageFormatError(str(exc)) from exc
    return ModelMessage(node_id, channel_id, params, version)


def save_model(path, node_id: int, channel_id: int, params: ParamVector) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(node_id, channel_id, params))


def load_model(path) -> ModelMessage:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


class Topology:
    """Undirected one-hop adjacency."""

    def __init__(self, nodes: Iterable[int], edges: Iterable[tuple[int, int]] = ()):
        self._adj: dict[int, set[int]] = {n: set() for n in nodes}
        for a, b in edges:
            if a not in self._adj or b not in self._adj:
                raise ValueError(f"edge ({a}, {b}) references an unknown node")
            if a == b:
                raise ValueError("self-loops are not allowed")
            self._adj[a].add(b)
            self._adj[b].add(a)

    @property
    def nodes(self) -> list[int]:
        return list(self._adj)

    def neighbors(self, node: int) -> frozenset[int]:
        try:
            return frozenset(self._adj[node])
        except KeyError:
            raise KeyError(f"unknown node {node}") from None

    def edges(self) -> list[tuple[int, int]]:
        return sorted((a, b) for a, nb in self._adj.items() for b in nb if a < b)

    def distance(self, src: int, dst: int) -> float:
        seen, frontier, d = {src}, {src}, 0
        while frontier:
            if dst in frontier:
                return d
            frontier = {n for f in frontier for n in self._adj[f]} - seen
            seen |= frontier
            d += 1
        return float("inf")


def broadcast(topology: Topology, sender: int, msg, inboxes: Optional[dict] = None) -> frozenset[int]:
    """Deliver ``msg`` to the sender's one-hop neighbours, never further.

    If ``inboxes`` is given, the message is appended to ``inboxes[receiver]``.
    """
    receivers = topology.neighbors(sender)
    if inboxes is not None:
        for r in sorted(receivers):
            inboxes.setdefault(r, []).append(msg)
    return receivers


def corrupt(params: ParamVector, noise_std: float, seed) -> ParamVector:
    """Additive zero-mean Gaussian noise on every parameter."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if noise_std == 0:
        return params.copy()
    rng = np.random.default_rng(seed)
    return ParamVector(params.arch, params.values + rng.normal(0.0, noise_std, len(params)))


@dataclass
class GlobalModel:
    owner_node: int
    params: ParamVector = field(repr=False)
    contributors: list[int]

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    @property
    def values(self) -> np.ndarray:
        return self.params.values


def _check_same_arch(own: ParamVector, received: Sequence[ParamVector]):
    for p in received:
        if p.arch != own.arch:
            raise ValueError(f"architecture mismatch: {p.arch} vs {own.arch}")


def aggregate_average(
    own: ParamVector,
    received: Sequence[ParamVector],
    weights: Optional[Sequence[float]] = None,
    owner: int = 0,
    senders: Optional[Sequence[int]] = None,
) -> GlobalModel:
    """Weighted mean over {own} + received; own has weight 1.

    With the default unit weights this is the plain average over the node and
    its M-1 neighbours.
    """
    _check_same_arch(own, received)
    w = np.ones(len(received)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(received),):
        raise ValueError("need exactly one weight per received model")
    acc = own.values.copy()
    for wl, p in zip(w, received):
        acc += wl * p.values
    total = 1.0 + float(w.sum())
    if total <= 0:
        raise ValueError("weights must give a positive normaliser")
    senders = list(senders) if senders is not None else list(range(1, len(received) + 1))
    return GlobalModel(owner, ParamVector(own.arch, acc / total), [owner, *senders])


def aggregate_offset(
    own: ParamVector,
    received: Sequence[ParamVector],
    weights: Optional[Sequence[float]] = None,
    owner: int = 0,
    senders: Optional[Sequence[int]] = None,
) -> GlobalModel:
    """``own + (1/M) * sum(w_l * theta_l)`` over the M received models.

    Not a convex combination; kept as an alternative aggregation rule.
    """
    _check_same_arch(own, received)
    w = np.ones(len(received)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(received),):
        raise ValueError("need exactly one weight per received model")
    acc = own.values.copy()
    if received:
        acc += sum(wl * p.values for wl, p in zip(w, received)) / len(received)
    senders = list(senders) if senders is not None else list(range(1, len(received) + 1))
    return GlobalModel(owner, ParamVector(own.arch, acc), [owner, *senders])


AGGREGATORS = {"mean": aggregate_average, "offset": aggregate_offset}


class ChannelModelRegistry:
    """Models for channels this node does not sense, evicted least-recently-used."""

    def __init__(self, own_channels: Iterable[int] = (0,), capacity: int = DEFAULT_REGISTRY_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.own_channels = frozenset(own_channels)
        self._models: OrderedDict[int, ParamVector] = OrderedDict()

    def __len__(self) -> int:
        return len(self._models)

    def __contains__(self, channel_id) -> bool:
        return channel_id in self._models

    def channels(self) -> list[int]:
        return list(self._models)

    def register(self, channel_id: int, params) -> None:
        if channel_id in self.own_channels:
            raise ValueError(f"channel {channel_id} is sensed locally; average it instead")
        if isinstance(params, GlobalModel):
            params = params.params
        self._models[channel_id] = params
        self._models.move_to_end(channel_id)
        while len(self._models) > self.capacity:
            self._models.popitem(last=False)

    def lookup(self, channel_id: int) -> ParamVector:
        params = self._models[channel_id]
        self._models.move_to_end(channel_id)
        return params

    def route(self, channel_id: int, own_model: ParamVector) -> ParamVector:
        """Model to use for predicting ``channel_id``."""
        if channel_id in self.own_channels:
            return own_model
        return self.lookup(channel_id)


def register_foreign_model(registry: ChannelModelRegistry, channel_id: int, params) -> ChannelModelRegistry:
    registry.register(channel_id, params)
    return registry


def exchange(
    topology: Topology,
    local: Mapping[int, ParamVector],
    channel_of: Mapping[int, int],
    noise_std: float = 0.0,
    seed: int = 0,
) -> dict[int, list[ModelMessage]]:
    """Every node broadcasts its serialized local model once.

    Receivers decode the float32 payload and optionally add Gaussian
    corruption; returns each node's inbox.
    """
    wire: dict[int, list[bytes]] = {n: [] for n in topology.nodes}
    for sender in sorted(local):
        broadcast(topology, sender, serialize(sender, channel_of[sender], local[sender]), wire)
    inboxes: dict[int, list[ModelMessage]] = {}
    for receiver, packets in wire.items():
        out = []
        for raw in packets:
            msg = deserialize(raw)
            if noise_std > 0:
                ss = np.random.SeedSequence([seed, receiver, msg.node_id])
                msg = ModelMessage(msg.node_id, msg.channel_id, corrupt(msg.params, noise_std, ss))
            out.append(msg)
        inboxes[receiver] = out
    return inboxes
