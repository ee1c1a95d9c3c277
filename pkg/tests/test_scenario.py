import csv
import json

import numpy as np
import pytest

from peerfl import neuralnet as nn
from peerfl import scenario as sc
from peerfl.scenario import NodeSpec, Scenario, Seeds
from peerfl.sensing import ChannelTrace, sense
from peerfl.traffic import ArrivalProcess, occupancy_union, sample_arrivals


def quick(s, epochs=2, horizon=0.2, **overrides):
    """Small, fast variant of a scenario for pipeline tests."""
    return sc.configure(s, "t_s", "desk", epochs=epochs, horizon=horizon, **overrides)


def uniform_traffic(n=3):
    nodes = [NodeSpec(k, f"n{k}", ["air"], []) for k in range(n)]
    edges = [(0, k) for k in range(1, n)]
    return Scenario("same-air", nodes, edges, {"air": [40.0]}, primary=0)


class TestBuiltins:
    def test_names(self):
        assert set(sc.builtin_scenarios()) == {"three-neighbor", "five-neighbor", "hidden-terminal"}

    def test_three_neighbor_star(self):
        s = sc.three_neighbor()
        assert [n.node_id for n in s.nodes] == [0, 1, 2, 3]
        assert s.topology.neighbors(0) == {1, 2, 3}
        assert all(s.topology.neighbors(k) == {0} for k in (1, 2, 3))
        assert s.shared_mixes == {"common": [5.0]}

    def test_neighbor_rates(self):
        s = sc.five_neighbor()
        own = {n.node_id: n.own for n in s.nodes}
        assert own == {0: [], 1: [9.5, 12.0], 2: [8.6, 10.5], 3: [16.0, 6.0], 4: [15.8, 21.0], 5: [2.8, 13.0]}
        assert all(n.shared == ["common"] for n in s.nodes)

    def test_hidden_terminal_geometry(self):
        s = sc.hidden_terminal()
        topo = s.topology
        assert topo.distance(1, 3) == 2
        assert s.node(2).shared == ["n1_tx", "n3_tx"]
        assert "n3_tx" not in s.node(1).shared
        assert s.shared_mixes["n3_tx"] == [20.0]

    def test_validate_single_listener(self):
        with pytest.raises(ValueError, match="need >= 2"):
            Scenario("x", [NodeSpec(0, shared=["a"]), NodeSpec(1)], [(0, 1)], {"a": [1.0]})

    def test_validate_unknown_mix(self):
        with pytest.raises(ValueError, match="unknown shared"):
            Scenario("x", [NodeSpec(0, shared=["b"]), NodeSpec(1)], [(0, 1)], {})

    def test_validate_primary(self):
        with pytest.raises(ValueError):
            Scenario("x", [NodeSpec(0)], [], {}, primary=4)


class TestConfigure:
    def test_desk_small(self):
        s = sc.configure(sc.three_neighbor(), "t_s", "desk")
        assert (s.horizon, s.epochs, s.learning_rate, s.arch.n_params) == (1.0, 100, 0.05, 392)

    def test_paper_full_big(self):
        s = sc.configure(sc.three_neighbor(), "t_b", "paper-full")
        assert (s.horizon, s.epochs, s.learning_rate, s.arch.n_params) == (5.0, 40, 0.01, 102_242)

    def test_override(self):
        assert sc.configure(sc.three_neighbor(), epochs=3).epochs == 3

    def test_unknown(self):
        with pytest.raises(ValueError):
            sc.configure(sc.three_neighbor(), "t_x")
        with pytest.raises(ValueError):
            sc.configure(sc.three_neighbor(), profile="huge")

    def test_param_count_note(self):
        assert sc.param_count_notes(nn.T_S) == []
        (note,) = sc.param_count_notes(nn.T_B)
        assert "102242" in note and "102252" in note


class TestYaml:
    def test_round_trip(self, tmp_path):
        s = sc.configure(sc.hidden_terminal(), "t_b", noise_std=0.01, seeds=Seeds(traffic=5))
        sc.save_scenario(s, tmp_path / "s.yaml")
        back = sc.load_scenario(tmp_path / "s.yaml")
        assert back == s

    def test_named_arch_and_ids(self, tmp_path):
        (tmp_path / "s.yaml").write_text(
            "name: pair\narch: t_s\nedges: [[1, 2]]\nshared_mixes: {air: [3.0]}\nprimary: 1\n"
            "nodes:\n  - {id: 1, shared: [air]}\n  - {id: 2, shared: [air], own: [4.0]}\n"
        )
        s = sc.load_scenario(tmp_path / "s.yaml")
        assert s.arch == nn.T_S and s.node(2).own == [4.0]

    def test_not_a_mapping(self, tmp_path):
        (tmp_path / "s.yaml").write_text("- 1\n- 2\n")
        with pytest.raises(ValueError):
            sc.load_scenario(tmp_path / "s.yaml")


class TestTraces:
    def test_lengths(self):
        s = sc.configure(sc.three_neighbor())
        train, val = sc.generate_traces(s)
        assert sorted(train) == [0, 1, 2, 3]
        assert all(len(t) == 50_000 for t in train.values())
        assert all(len(t) == 5_000 for t in val.values())

    def test_equal_seeds_rejected(self):
        s = quick(sc.three_neighbor(), seeds=Seeds(traffic=3, validation=3))
        with pytest.raises(ValueError):
            sc.generate_traces(s)

    def test_shared_traffic_is_common(self):
        train, _ = sc.generate_traces(quick(sc.three_neighbor()))
        for k in (1, 2, 3):
            # neighbours hear the primary's traffic plus their own
            assert np.all(train[k].slots >= train[0].slots)
            assert train[k].busy_fraction() > train[0].busy_fraction()

    def test_hidden_terminal_sensing(self):
        train, _ = sc.generate_traces(quick(sc.hidden_terminal()))
        n1, n2, n3 = (train[k].slots for k in (1, 2, 3))
        assert np.all(n2 == (n1 | n3))
        assert np.any(n3 & ~n1)

    def test_validation_differs(self):
        train, val = sc.generate_traces(quick(sc.three_neighbor()))
        assert not np.array_equal(train[1].slots[:5000], val[1].slots)


class TestAccuracy:
    def test_constant(self):
        assert sc.persistence_accuracy(ChannelTrace(np.ones(50, np.uint8))) == 1.0

    def test_alternating(self):
        assert sc.persistence_accuracy(ChannelTrace(np.arange(50) % 2)) == 0.0

    def test_fixed_length_packets(self):
        # 2340-byte packets at 24 Mb/s last exactly 39 slots of 20 us
        proc = ArrivalProcess((20.0,), 2340, 2340)
        busy = occupancy_union(sample_arrivals(proc, 2.0, 3), 2.0)
        assert sc.persistence_accuracy(sense(busy, 20e-6)) >= 0.9

    def test_baseline_alignment(self):
        np.testing.assert_array_equal(sc.baseline_persistence([0, 1, 1, 0]), [0, 1, 1])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            sc.accuracy([0, 1], [0])
        with pytest.raises(ValueError):
            sc.accuracy([], [])


class TestRun:
    def test_report_shape(self):
        rep = sc.run(quick(sc.three_neighbor()))
        assert rep.primary == 0 and sorted(rep.nodes) == [0, 1, 2, 3]
        assert rep.n_params == 392 and rep.notes == []
        prim = rep.nodes[0]
        assert prim.contributors == [0, 1, 2, 3]
        assert rep.eta1 == pytest.approx(1 - prim.local_acc)
        assert rep.eta2 == pytest.approx(1 - prim.global_acc)
        assert [c["epoch"] for c in prim.curve] == [1, 2]
        assert set(prim.neighbor_eval) == {1, 2, 3}
        assert rep.nodes[1].contributors == [1, 0]  # owner first

    def test_deterministic(self):
        s = quick(sc.hidden_terminal())
        assert sc.run(s).comparable() == sc.run(s, workers=3).comparable()

    def test_identical_traffic_global_equals_local(self):
        rep = sc.run(quick(uniform_traffic(), epochs=3))
        for node in rep.nodes.values():
            assert abs(node.global_acc - node.local_acc) <= 1e-3

    def test_identical_traffic_models_agree(self):
        _, art = sc.run(quick(uniform_traffic(), epochs=1), return_artifacts=True)
        for k in (1, 2):
            np.testing.assert_array_equal(art.local[k].values, art.local[0].values)
        np.testing.assert_allclose(art.global_models[0].values, art.local[0].values, rtol=1e-7, atol=1e-9)

    def test_divergence_is_per_node(self, monkeypatch):
        real = nn.train

        def flaky(params, data, *a, **kw):
            if data.targets.mean() > sc_state["bad_frac"]:
                raise nn.TrainingDiverged(1, [])
            return real(params, data, *a, **kw)

        s = quick(sc.three_neighbor(), epochs=1)
        train, _ = sc.generate_traces(s)
        sc_state = {"bad_frac": max(t.busy_fraction() for t in train.values()) - 1e-9}
        monkeypatch.setattr(nn, "train", flaky)
        rep = sc.run(s)
        bad = [k for k, n in rep.nodes.items() if n.diverged]
        assert len(bad) == 1 and rep.nodes[bad[0]].local_acc is None
        assert all(n.local_acc is not None for k, n in rep.nodes.items() if k not in bad)
        assert any("diverged" in f for f in rep.invariant_failures())
        assert rep.nodes[0].contributors == sorted(set(range(4)) - set(bad))

    def test_outputs(self, tmp_path):
        rep = sc.run(quick(sc.three_neighbor(), epochs=1))
        rep.write_json(tmp_path / "r.json")
        rep.write_metrics_csv(tmp_path / "m.csv")
        rep.write_summary_csv(tmp_path / "s.csv")
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["nodes"]["0"]["node_id"] == 0
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert len(rows) == 4
        assert list(rows[0]) == ["node_id", "epoch", "loss", "train_acc", "val_acc", "wall_time_ms"]
        assert len(list(csv.reader(open(tmp_path / "s.csv")))) == 5

    def test_invariant_failures_detect_global_below_baseline(self):
        rep = sc.run(quick(sc.three_neighbor(), epochs=1))
        node = rep.nodes[1]
        node.global_acc = node.baseline_acc - 0.02
        assert any("node 1: global" in f for f in rep.invariant_failures())

    def test_eta_is_one_minus_accuracy(self):
        rep = sc.run(quick(sc.hidden_terminal(), epochs=1))
        prim = rep.nodes[rep.primary]
        assert rep.eta1 == 1.0 - prim.local_acc and rep.eta2 == 1.0 - prim.global_acc

    def test_invariant_failures_detect_eta(self):
        rep = sc.run(quick(sc.three_neighbor(), epochs=1))
        rep.eta1, rep.eta2 = 0.01, 0.02
        assert any("eta2" in f for f in rep.invariant_failures())


class TestHiddenTerminalCheck:
    def test_wrong_family(self):
        rep = sc.run(quick(sc.three_neighbor(), epochs=1))
        with pytest.raises(ValueError):
            sc.hidden_terminal_margin(rep)

    def test_silent_third_node(self):
        # with N3 silent N1 and N2 see the same air, so averaging changes nothing
        rep = sc.run(quick(sc.hidden_terminal(n3_rate=0.0), epochs=2))
        assert abs(sc.hidden_terminal_margin(rep)) <= 1e-3
        assert sc.hidden_terminal_check(rep, min_margin=0.0)

    def test_aggregate_tracks_receiver_model(self):
        # N1's average moves off its local model exactly when N2's model differs
        _, art = sc.run(quick(sc.hidden_terminal(), epochs=1), return_artifacts=True)
        assert not np.array_equal(art.local[2].values, art.local[1].values)
        assert np.abs(art.global_models[1].values - art.local[1].values).max() > 1e-6
        _, art = sc.run(quick(sc.hidden_terminal(n3_rate=0.0), epochs=1), return_artifacts=True)
        np.testing.assert_array_equal(art.local[2].values, art.local[1].values)
        np.testing.assert_allclose(art.global_models[1].values, art.local[1].values, rtol=2**-24, atol=1e-12)
