"""Experiment topologies and the end-to-end pipeline.

generate traffic -> sense -> train local -> broadcast -> aggregate -> evaluate
"""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import neuralnet as nn
from ._backend import BACKEND
from .federation import AGGREGATORS, Topology, exchange
from .neuralnet import ARCHITECTURES, Architecture, ParamVector
from .sensing import (
    DEFAULT_DELTA,
    DEFAULT_WINDOW,
    ChannelTrace,
    Dataset,
    build_dataset,
    n_slots,
    sense,
)
from .traffic import (
    DEFAULT_PHY_RATE,
    DEFAULT_PKT_LEN_MAX,
    DEFAULT_PKT_LEN_MIN,
    ArrivalProcess,
    BusyIntervalSet,
    compose_node_traffic,
    sample_arrivals,
)

log = logging.getLogger(__name__)

PROFILES = {"desk": 1.0, "paper-full": 5.0}  # horizon in seconds
LEARNING_RATES = {"t_s": 0.05, "t_b": 0.01}
DESK_EPOCHS = {"t_s": 100, "t_b": 5}
FULL_EPOCHS = {"t_s": 400, "t_b": 40}
HIDDEN_TERMINAL_MARGIN = 0.01
ETA_SLACK = 0.005
BASELINE_SLACK = 0.01
# parameter counts quoted elsewhere for the named architectures, kept so
# reports can flag disagreement with the enumerated count
PUBLISHED_PARAM_COUNTS = {nn.T_S: 392, nn.T_B: 102_252}


@dataclass
class NodeSpec:
    node_id: int
    name: str = ""
    shared: list[str] = field(default_factory=list)
    own: list[float] = field(default_factory=list)
    channel: int = 0


@dataclass
class Seeds:
    traffic: int = 1
    init: int = 7
    shuffle: int = 11
    validation: int = 2
    noise: int = 13


@dataclass
class Scenario:
    name: str
    nodes: list[NodeSpec]
    edges: list[tuple[int, int]]
    shared_mixes: dict[str, list[float]]
    primary: int = 0
    family: str = ""
    arch: Architecture = nn.T_S
    delta: float = DEFAULT_DELTA
    horizon: float = PROFILES["desk"]
    epochs: int = DESK_EPOCHS["t_s"]
    learning_rate: float = LEARNING_RATES["t_s"]
    window_len: int = DEFAULT_WINDOW
    seeds: Seeds = field(default_factory=Seeds)
    noise_std: float = 0.0
    aggregation: str = "mean"
    pkt_len_min: int = DEFAULT_PKT_LEN_MIN
    pkt_len_max: int = DEFAULT_PKT_LEN_MAX
    phy_rate: float = DEFAULT_PHY_RATE

    def __post_init__(self):
        self.family = self.family or self.name
        self.edges = [tuple(e) for e in self.edges]
        self.validate()

    def validate(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        if self.primary not in ids:
            raise ValueError(f"primary node {self.primary} is not in the node list")
        Topology(ids, self.edges)  # raises on unknown endpoints / self-loops
        for name in self.shared_mixes:
            users = sum(name in n.shared for n in self.nodes)
            if users < 2:
                raise ValueError(f"shared mix {name!r} is heard by {users} node(s); need >= 2")
        for n in self.nodes:
            missing = set(n.shared) - set(self.shared_mixes)
            if missing:
                raise ValueError(f"node {n.node_id} references unknown shared mixes {sorted(missing)}")
        if self.aggregation not in AGGREGATORS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if not (self.delta > 0 and self.horizon > self.delta):
            raise ValueError("need 0 < delta < horizon")
        if self.epochs < 0 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 0 and learning_rate > 0")

    @property
    def topology(self) -> Topology:
        return Topology([n.node_id for n in self.nodes], self.edges)

    def node(self, node_id: int) -> NodeSpec:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def process(self, rates, source_id: str) -> ArrivalProcess:
        return ArrivalProcess(tuple(rates), self.pkt_len_min, self.pkt_len_max, self.phy_rate, source_id)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = {"m": self.arch.input_dim, "p": self.arch.p_units, "q": self.arch.q_units}
        d["edges"] = [list(e) for e in self.edges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        d = dict(d)
        arch = d.pop("arch", "t_s")
        if isinstance(arch, str):
            if arch not in ARCHITECTURES:
                raise ValueError(f"unknown architecture {arch!r}")
            arch = ARCHITECTURES[arch]
        else:
            arch = Architecture(int(arch.get("m", 2)), int(arch["p"]), int(arch["q"]))
        nodes = [NodeSpec(**{k: v for k, v in n.items() if k != "id"}, node_id=n["id"])
                 if "id" in n else NodeSpec(**n) for n in d.pop("nodes")]
        seeds = Seeds(**d.pop("seeds", {}))
        d["shared_mixes"] = {k: [float(r) for r in v] for k, v in d.get("shared_mixes", {}).items()}
        return cls(nodes=nodes, arch=arch, seeds=seeds, **d)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return Scenario.from_dict(data)


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario.to_dict(), fh, sort_keys=False)


# --- builtin topologies ------------------------------------------------------

COMMON_RATE = 5.0
NEIGHBOR_OWN = [
    [9.5, 12.0],
    [8.6, 10.5],
    [16.0, 6.0],
    [15.8, 21.0],
    [2.8, 13.0],
]


def _star(name: str, n_neighbors: int) -> Scenario:
    nodes = [NodeSpec(0, "primary", ["common"], [])]
    for k in range(n_neighbors):
        nodes.append(NodeSpec(k + 1, f"neighbor{k + 1}", ["common"], list(NEIGHBOR_OWN[k])))
    edges = [(0, k + 1) for k in range(n_neighbors)]
    return Scenario(name, nodes, edges, {"common": [COMMON_RATE]}, primary=0)


def three_neighbor() -> Scenario:
    return _star("three-neighbor", 3)


def five_neighbor() -> Scenario:
    return _star("five-neighbor", 5)


def hidden_terminal(n3_rate: float = 20.0, n1_rate: float = COMMON_RATE) -> Scenario:
    """N1 - N2 - N3 in a line; N1 and N3 cannot hear each other.

    N2 (the common receiver) senses both transmitters. The N3 traffic is
    therefore part of N2's trace but never of N1's.
    """
    nodes = [
        NodeSpec(1, "N1", ["n1_tx"], []),
        NodeSpec(2, "N2", ["n1_tx", "n3_tx"], []),
        NodeSpec(3, "N3", ["n3_tx"], []),
    ]
    mixes = {"n1_tx": [n1_rate], "n3_tx": [n3_rate]}
    return Scenario("hidden-terminal", nodes, [(1, 2), (2, 3)], mixes, primary=1, family="hidden-terminal")


BUILTINS = {
    "hidden-terminal": hidden_terminal,
    "three-neighbor": three_neighbor,
    "five-neighbor": five_neighbor,
}


def builtin_scenarios() -> dict[str, Scenario]:
    return {name: make() for name, make in BUILTINS.items()}


def configure(scenario: Scenario, arch: str = "t_s", profile: str = "desk", **overrides) -> Scenario:
    """Apply an architecture/profile preset (epochs, learning rate, horizon)."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    epochs = (FULL_EPOCHS if profile == "paper-full" else DESK_EPOCHS)[arch]
    out = replace(
        scenario,
        arch=ARCHITECTURES[arch],
        horizon=PROFILES[profile],
        epochs=epochs,
        learning_rate=LEARNING_RATES[arch],
    )
    return replace(out, **{k: v for k, v in overrides.items() if v is not None})


# --- traffic realisation ---------------------------------------------------


def component_seed(seed: int, key: str) -> int:
    """Stable per-component seed derived from a scenario seed and a name."""
    ss = np.random.SeedSequence([seed, zlib.crc32(key.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def realize_busy(scenario: Scenario, seed: int, horizon: float) -> dict[int, BusyIntervalSet]:
    """Busy sets per node; shared mixes are sampled once and reused."""
    shared = {
        name: sample_arrivals(scenario.process(rates, name), horizon, component_seed(seed, f"shared:{name}"))
        for name, rates in scenario.shared_mixes.items()
    }
    out = {}
    for n in scenario.nodes:
        own = []
        if n.own:
            key = f"own:{n.node_id}"
            own.append(sample_arrivals(scenario.process(n.own, key), horizon, component_seed(seed, key)))
        out[n.node_id] = compose_node_traffic([shared[s] for s in n.shared], own, horizon)
    return out


def validation_horizon(scenario: Scenario) -> float:
    return n_slots(scenario.horizon, scenario.delta) // 10 * scenario.delta


def generate_traces(scenario: Scenario) -> tuple[dict[int, ChannelTrace], dict[int, ChannelTrace]]:
    """(training traces, validation traces) keyed by node id."""
    if scenario.seeds.traffic == scenario.seeds.validation:
        raise ValueError("validation seed must differ from the traffic seed")
    train_busy = realize_busy(scenario, scenario.seeds.traffic, scenario.horizon)
    val_busy = realize_busy(scenario, scenario.seeds.validation, validation_horizon(scenario))
    train = {k: sense(b, scenario.delta, scenario.node(k).channel) for k, b in train_busy.items()}
    val = {k: sense(b, scenario.delta, scenario.node(k).channel) for k, b in val_busy.items()}
    return train, val


# --- evaluation helpers ------------------------------------------------------


def accuracy(predictions, targets) -> float:
    p = np.asarray(predictions)
    t = np.asarray(targets)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty sequence")
    return float(np.mean(p == t))


def baseline_persistence(trace) -> np.ndarray:
    """Predict slot t+1 as slot t; prediction k targets slot k+1."""
    slots = np.asarray(trace.slots if isinstance(trace, ChannelTrace) else trace)
    if slots.shape[0] < 2:
        raise ValueError("need at least two slots")
    return slots[:-1].copy()


def persistence_accuracy(trace: ChannelTrace) -> float:
    return accuracy(baseline_persistence(trace), trace.slots[1:])


# --- report ------------------------------------------------------------------


@dataclass
class NodeReport:
    node_id: int
    name: str
    neighbors: list[int]
    train_busy_fraction: float
    val_busy_fraction: float
    baseline_acc: float
    local_acc: Optional[float] = None
    global_acc: Optional[float] = None
    contributors: list[int] = field(default_factory=list)
    curve: list[dict] = field(default_factory=list)
    # accuracy of this node's models on each neighbour's validation trace
    neighbor_eval: dict[int, dict[str, float]] = field(default_factory=dict)
    diverged: bool = False
    error: str = ""


@dataclass
class EvalReport:
    scenario: str
    family: str
    primary: int
    arch: dict
    n_params: int
    nodes: dict[int, NodeReport]
    eta1: Optional[float]
    eta2: Optional[float]
    notes: list[str] = field(default_factory=list)
    backend: str = BACKEND
    runtimes: dict[str, float] = field(default_factory=dict)

    def to_dict(self, with_runtimes: bool = True) -> dict:
        d = asdict(self)
        d["nodes"] = {str(k): v for k, v in d["nodes"].items()}
        for n in d["nodes"].values():
            n["neighbor_eval"] = {str(k): v for k, v in n["neighbor_eval"].items()}
            if not with_runtimes:
                for row in n["curve"]:
                    row.pop("wall_time_ms", None)
        if not with_runtimes:
            d.pop("runtimes")
            d.pop("backend")
        return d

    def comparable(self) -> dict:
        """Report content with wall-clock fields removed."""
        return self.to_dict(with_runtimes=False)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "epoch", "loss", "train_acc", "val_acc", "wall_time_ms"])
            for nid, node in sorted(self.nodes.items()):
                for row in node.curve:
                    w.writerow([nid, row["epoch"], row["loss"], row["train_acc"], row["val_acc"],
                                row["wall_time_ms"]])

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "name", "baseline_acc", "local_acc", "global_acc", "diverged"])
            for nid, node in sorted(self.nodes.items()):
                w.writerow([nid, node.name, node.baseline_acc, node.local_acc, node.global_acc, node.diverged])

    def invariant_failures(self) -> list[str]:
        """Acceptance invariants violated by this report (empty when healthy)."""
        bad = []
        for nid, node in sorted(self.nodes.items()):
            if node.diverged:
                bad.append(f"node {nid}: training diverged ({node.error})")
                continue
            for kind, acc in (("local", node.local_acc), ("global", node.global_acc)):
                if acc < node.baseline_acc - BASELINE_SLACK:
                    bad.append(f"node {nid}: {kind} accuracy {acc:.4f} below persistence "
                               f"baseline {node.baseline_acc:.4f} - {BASELINE_SLACK}")
        if self.eta1 is not None and self.eta2 is not None and self.eta2 > self.eta1 + ETA_SLACK:
            bad.append(f"primary: eta2 {self.eta2:.4f} > eta1 {self.eta1:.4f} + {ETA_SLACK}")
        return bad


# --- pipeline ----------------------------------------------------------------


@dataclass
class RunArtifacts:
    """Everything ``run`` produced besides the report (for writing to disk)."""

    train_traces: dict[int, ChannelTrace]
    val_traces: dict[int, ChannelTrace]
    local: dict[int, ParamVector]
    global_models: dict[int, ParamVector]


def _train_node(scenario: Scenario, node_id: int, data: Dataset, val: Dataset, init: ParamVector):
    # one scenario-wide shuffle seed: nodes with identical data train identical models
    try:
        params, curve = nn.train(init, data, scenario.epochs, scenario.learning_rate,
                                 scenario.seeds.shuffle, val=val)
        return params, curve, ""
    except nn.TrainingDiverged as exc:
        return None, exc.metrics, str(exc)


def run(scenario: Scenario, workers: int = 1, return_artifacts: bool = False):
    """Execute the full pipeline; returns an ``EvalReport``.

    With ``return_artifacts`` returns ``(report, RunArtifacts)``.
    """
    timings = {}
    t0 = time.perf_counter()
    train_tr, val_tr = generate_traces(scenario)
    datasets = {k: build_dataset(tr, scenario.window_len, scenario.arch.input_dim) for k, tr in train_tr.items()}
    val_sets = {k: build_dataset(tr, scenario.window_len, scenario.arch.input_dim) for k, tr in val_tr.items()}
    timings["generate_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    init = nn.init_params(scenario.arch, scenario.seeds.init)
    ids = [n.node_id for n in scenario.nodes]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {k: pool.submit(_train_node, scenario, k, datasets[k], val_sets[k], init) for k in ids}
        trained = {k: f.result() for k, f in futures.items()}
    timings["train_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    topo = scenario.topology
    local = {k: p for k, (p, _, _) in trained.items() if p is not None}
    channel_of = {n.node_id: n.channel for n in scenario.nodes}
    inboxes = exchange(topo, local, channel_of, scenario.noise_std, scenario.seeds.noise)
    aggregate = AGGREGATORS[scenario.aggregation]
    global_models = {}
    contributors = {}
    for k in local:
        msgs = [m for m in inboxes.get(k, []) if m.channel_id == channel_of[k]]
        g = aggregate(local[k], [m.params for m in msgs], owner=k, senders=[m.node_id for m in msgs])
        global_models[k] = g.params
        contributors[k] = g.contributors
    timings["aggregate_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    nodes = {}
    for n in scenario.nodes:
        k = n.node_id
        params, curve, err = trained[k]
        rep = NodeReport(
            node_id=k,
            name=n.name,
            neighbors=sorted(topo.neighbors(k)),
            train_busy_fraction=train_tr[k].busy_fraction(),
            val_busy_fraction=val_tr[k].busy_fraction(),
            baseline_acc=persistence_accuracy(val_tr[k]),
            curve=[asdict(c) for c in curve],
            diverged=params is None,
            error=err,
        )
        if params is not None:
            rep.local_acc = nn.evaluate(params, val_sets[k])
            rep.global_acc = nn.evaluate(global_models[k], val_sets[k])
            rep.contributors = contributors[k]
            for nb in rep.neighbors:
                rep.neighbor_eval[nb] = {
                    "local": nn.evaluate(params, val_sets[nb]),
                    "global": nn.evaluate(global_models[k], val_sets[nb]),
                    "baseline": persistence_accuracy(val_tr[nb]),
                }
        else:
            log.warning("node %s diverged: %s", k, err)
        nodes[k] = rep
    timings["evaluate_s"] = time.perf_counter() - t0

    prim = nodes[scenario.primary]
    eta1 = None if prim.local_acc is None else 1.0 - prim.local_acc
    eta2 = None if prim.global_acc is None else 1.0 - prim.global_acc
    report = EvalReport(
        scenario=scenario.name,
        family=scenario.family,
        primary=scenario.primary,
        arch={"m": scenario.arch.input_dim, "p": scenario.arch.p_units, "q": scenario.arch.q_units},
        n_params=scenario.arch.n_params,
        nodes=nodes,
        eta1=eta1,
        eta2=eta2,
        notes=param_count_notes(scenario.arch),
        runtimes=timings,
    )
    if return_artifacts:
        return report, RunArtifacts(train_tr, val_tr, local, global_models)
    return report


def param_count_notes(arch: Architecture) -> list[str]:
    published = PUBLISHED_PARAM_COUNTS.get(arch)
    if published is None or published == arch.n_params:
        return []
    return [f"enumerated parameter count {arch.n_params} differs from the published "
            f"figure {published} by {published - arch.n_params}"]


def hidden_terminal_margin(report: EvalReport) -> float:
    """N1 global-minus-local accuracy on N2's validation trace."""
    if report.family != "hidden-terminal":
        raise ValueError(f"report is from {report.family!r}, not the hidden-terminal scenario")
    n1 = report.nodes[report.primary]
    if n1.diverged:
        raise ValueError("N1 diverged; no models to compare")
    # the common receiver is N1's only neighbour
    (receiver,) = n1.neighbors
    ev = n1.neighbor_eval[receiver]
    return ev["global"] - ev["local"]


def hidden_terminal_check(report: EvalReport, min_margin: float = HIDDEN_TERMINAL_MARGIN) -> bool:
    return hidden_terminal_margin(report) >= min_margin
