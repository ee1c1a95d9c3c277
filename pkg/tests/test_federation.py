import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params
from peerfl import neuralnet as nn
from peerfl.federation import (
    HEADER,
    ChannelModelRegistry,
    MessageFormatError,
    Topology,
    aggregate_average,
    aggregate_offset,
    broadcast,
    corrupt,
    deserialize,
    exchange,
    load_model,
    register_foreign_model,
    save_model,
    serialize,
)


def pv(value, arch=nn.T_S):
    return nn.ParamVector(arch, np.full(arch.n_params, float(value)))


class TestCodec:
    def test_header_size(self):
        assert HEADER.size == 24

    def test_small_model_payload(self):
        raw = serialize(4, 1, nn.init_params(nn.T_S, 0))
        assert len(raw) == 24 + 392 * 4 == 24 + 1568

    def test_layout(self):
        p = nn.init_params(nn.T_S, 0)
        raw = serialize(7, 3, p)
        assert raw[:4] == b"PFLM"
        assert struct.unpack_from("<HIIHHHI", raw, 4) == (1, 7, 3, 2, 5, 5, 392)
        np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f4"), p.values.astype(np.float32))

    def test_round_trip(self):
        p = random_params(nn.T_S, np.random.default_rng(0), 3.0)
        msg = deserialize(serialize(2, 9, p))
        assert (msg.node_id, msg.channel_id, msg.arch) == (2, 9, nn.T_S)
        np.testing.assert_array_equal(msg.params.values, p.values.astype(np.float32).astype(np.float64))
        np.testing.assert_allclose(msg.params.values, p.values, rtol=2**-24)
        assert serialize(2, 9, msg.params) == serialize(2, 9, p)

    def test_corrupt_magic(self):
        raw = bytearray(serialize(0, 0, nn.init_params(nn.T_S, 0)))
        raw[0] ^= 0xFF
        with pytest.raises(MessageFormatError):
            deserialize(bytes(raw))

    def test_truncated(self):
        raw = serialize(0, 0, nn.init_params(nn.T_S, 0))
        with pytest.raises(MessageFormatError):
            deserialize(raw[:-4])
        with pytest.raises(MessageFormatError):
            deserialize(raw[:10])

    def test_count_mismatch(self):
        raw = bytearray(serialize(0, 0, nn.init_params(nn.T_S, 0)))
        struct.pack_into("<I", raw, 20, 391)
        with pytest.raises(MessageFormatError):
            deserialize(bytes(raw))

    def test_big_model_count(self):
        raw = serialize(0, 0, nn.ParamVector(nn.T_B, np.zeros(nn.T_B.n_params)))
        assert len(raw) - 24 == 4 * 102_242

    def test_file_round_trip(self, tmp_path):
        p = nn.init_params(nn.T_S, 1)
        save_model(tmp_path / "m.pflm", 5, 0, p)
        assert (tmp_path / "m.pflm").read_bytes() == serialize(5, 0, p)
        assert load_model(tmp_path / "m.pflm").node_id == 5


def line():
    return Topology([1, 2, 3], [(1, 2), (2, 3)])


class TestBroadcast:
    def test_hidden_terminal_line(self):
        assert broadcast(line(), 2, "m") == {1, 3}
        assert broadcast(line(), 1, "m") == {2}

    def test_isolated(self):
        assert broadcast(Topology([1, 2]), 1, "m") == frozenset()

    def test_star_single_copy(self):
        topo = Topology(range(6), [(0, k) for k in range(1, 6)])
        inboxes = {}
        assert broadcast(topo, 0, "m", inboxes) == {1, 2, 3, 4, 5}
        assert inboxes == {k: ["m"] for k in range(1, 6)}

    def test_unknown_sender(self):
        with pytest.raises(KeyError):
            broadcast(line(), 9, "m")

    def test_bad_edges(self):
        with pytest.raises(ValueError):
            Topology([1, 2], [(1, 3)])
        with pytest.raises(ValueError):
            Topology([1], [(1, 1)])

    def test_exchange_one_hop_containment(self):
        rng = np.random.default_rng(0)
        topo = Topology(range(6), [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5)])
        local = {k: random_params(nn.T_S, rng) for k in topo.nodes}
        inboxes = exchange(topo, local, {k: 0 for k in topo.nodes})
        for receiver, msgs in inboxes.items():
            senders = [m.node_id for m in msgs]
            assert sorted(senders) == sorted(topo.neighbors(receiver))
            assert all(topo.distance(s, receiver) == 1 for s in senders)

    def test_exchange_noise_is_seeded(self):
        rng = np.random.default_rng(1)
        topo = line()
        local = {k: random_params(nn.T_S, rng) for k in topo.nodes}
        chan = {k: 0 for k in topo.nodes}
        a = exchange(topo, local, chan, noise_std=0.1, seed=4)
        b = exchange(topo, local, chan, noise_std=0.1, seed=4)
        np.testing.assert_array_equal(a[2][0].params.values, b[2][0].params.values)
        clean = exchange(topo, local, chan)
        assert not np.array_equal(a[2][0].params.values, clean[2][0].params.values)


class TestCorrupt:
    def test_zero_noise_identity(self):
        p = nn.init_params(nn.T_S, 0)
        np.testing.assert_array_equal(corrupt(p, 0.0, 1).values, p.values)

    def test_seeded(self):
        p = nn.init_params(nn.T_S, 0)
        np.testing.assert_array_equal(corrupt(p, 0.3, 5).values, corrupt(p, 0.3, 5).values)

    def test_empirical_std(self):
        # Monte Carlo over 10,000 draws per coordinate
        p = pv(0.0, nn.Architecture(2, 1, 1))
        sigma = 0.25
        draws = np.stack([corrupt(p, sigma, s).values for s in range(10_000)])
        np.testing.assert_allclose(draws.std(axis=0), sigma, rtol=0.05)
        assert np.abs(draws.mean(axis=0)).max() < 5 * sigma / 100

    def test_negative(self):
        with pytest.raises(ValueError):
            corrupt(pv(0), -1.0, 0)


class TestAggregate:
    def test_no_neighbors(self):
        own = nn.init_params(nn.T_S, 0)
        g = aggregate_average(own, [], owner=3)
        np.testing.assert_array_equal(g.values, own.values)
        assert g.contributors == [3]

    def test_pairwise_mean(self):
        g = aggregate_average(pv(2), [pv(4)])
        np.testing.assert_array_equal(g.values, 3.0)

    def test_matches_elementwise_mean(self):
        rng = np.random.default_rng(2)
        vs = [random_params(nn.T_S, rng) for _ in range(5)]
        g = aggregate_average(vs[0], vs[1:], owner=0, senders=[1, 2, 3, 4])
        expected = [sum(v.values[i] for v in vs) / 5 for i in range(392)]
        np.testing.assert_allclose(g.values, expected, rtol=1e-12, atol=1e-15)
        assert g.contributors == [0, 1, 2, 3, 4]

    def test_weights(self):
        g = aggregate_average(pv(0), [pv(3), pv(6)], weights=[2.0, 0.0])
        np.testing.assert_allclose(g.values, 2.0)

    def test_arch_mismatch(self):
        with pytest.raises(ValueError):
            aggregate_average(pv(0), [pv(0, nn.Architecture(2, 1, 1))])

    def test_weight_count(self):
        with pytest.raises(ValueError):
            aggregate_average(pv(0), [pv(1)], weights=[1.0, 1.0])

    def test_offset_rule(self):
        g = aggregate_offset(pv(1), [pv(2), pv(4)])
        np.testing.assert_allclose(g.values, 1 + (2 + 4) / 2)
        np.testing.assert_array_equal(aggregate_offset(pv(1), []).values, 1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 5))
    def test_permutation_invariant(self, seed, n):
        rng = np.random.default_rng(seed)
        own = random_params(nn.T_S, rng)
        rec = [random_params(nn.T_S, rng) for _ in range(n)]
        ref = aggregate_average(own, rec).values
        for perm in itertools.islice(itertools.permutations(rec), 6):
            np.testing.assert_allclose(aggregate_average(own, list(perm)).values, ref, rtol=1e-12, atol=1e-15)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_idempotent(self, seed, n):
        p = random_params(nn.T_S, np.random.default_rng(seed))
        g = aggregate_average(p, [p.copy() for _ in range(n)])
        np.testing.assert_allclose(g.values, p.values, rtol=1e-12, atol=1e-15)

    def test_commutes_with_codec(self):
        rng = np.random.default_rng(3)
        vs = [random_params(nn.T_S, rng) for _ in range(4)]
        decoded = [deserialize(serialize(0, 0, v)).params for v in vs]
        a = aggregate_average(vs[0], vs[1:]).values
        b = aggregate_average(decoded[0], decoded[1:]).values
        # float32 rounding is relative to the inputs, not to the (possibly cancelling) mean
        scale = np.max([np.abs(v.values) for v in vs], axis=0)
        assert (np.abs(a - b) / scale).max() < 1e-6


class TestRegistry:
    def test_lookup(self):
        reg = ChannelModelRegistry(own_channels=[0])
        p = nn.init_params(nn.T_S, 0)
        register_foreign_model(reg, 5, p)
        assert reg.lookup(5) is p

    def test_lru_eviction(self):
        reg = ChannelModelRegistry(own_channels=[0], capacity=2)
        reg.register(1, pv(1))
        reg.register(2, pv(2))
        reg.lookup(1)
        reg.register(3, pv(3))
        assert reg.channels() == [1, 3]
        assert 2 not in reg

    def test_capacity_validation(self):
        with pytest.raises(ValueError):
            ChannelModelRegistry(capacity=0)

    def test_own_channel_rejected(self):
        with pytest.raises(ValueError):
            ChannelModelRegistry(own_channels=[0]).register(0, pv(0))

    def test_replace_keeps_one_entry(self):
        reg = ChannelModelRegistry(own_channels=[0])
        reg.register(4, pv(1))
        reg.register(4, pv(2))
        assert len(reg) == 1 and reg.lookup(4).values[0] == 2.0

    def test_routing_to_foreign_model(self):
        # two distinguishable models: one always predicts busy, one always idle
        busy = nn.ParamVector(nn.T_S, np.zeros(392))
        busy.tensors()["bd"][:] = [0.0, 5.0]
        idle = nn.ParamVector(nn.T_S, np.zeros(392))
        idle.tensors()["bd"][:] = [5.0, 0.0]
        reg = ChannelModelRegistry(own_channels=[0])
        reg.register(6, busy)
        window = np.eye(2)[[0, 0, 1]]
        assert nn.predict(reg.route(6, idle), window).all()
        assert not nn.predict(reg.route(0, idle), window).any()
