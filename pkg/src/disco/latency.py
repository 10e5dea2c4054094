"""Analytic latency model for partitioned inference.

Per layer, with dense compute cost C_c (ops), input feature size F_s (bytes),
link bandwidth B (bytes/s), per-node compute rate C (ops/s), and N nodes:

    L_comm = F_s * (1 - S_comm) / B
    L_comp = C_c * (1 - S_comp) / (N * C)
    L      = max(L_comm, L_comp)   pipelined
    L      = L_comm + L_comp       waiting (no overlap)

S_comm is the fraction of possible cross-node feature messages not sent and
S_comp the fraction of kernels removed; under block masks they are tied by
S_comm = N/(N-1) * S_comp. Setting L_comm = L_comp and solving gives the
per-layer equilibrium

    S_comm_eql = (A*N - N) / (A*N - N + 1),   A = (N*C / C_c) * (F_s / B)

which is attainable only when A >= 1; A < 1 layers are compute-bound and get
flagged instead of clamped.

Send bytes are counted once per distinct feature leaving a node (a feature
forwarded to several peers is serialized once onto the fabric), received
bytes once per arrival; a node's communication time is (sent + received)/B
with no full-duplex overlap, and a layer's L_comm under an explicit plan is
the maximum over nodes. With symmetric per-destination feature sets this
reproduces Eq-style F_s*(1-S_comm)/B exactly at any node count, and at N=2
for any plan. Kinds that move nothing between nodes (pools, adds, depthwise
convs) and the replicated first input charge L_comm accordingly (zero and
dense respectively). A single node charges no communication at all.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .masks import BlockMask, CommPlan, even_ranges, input_ownership, mask_to_commplan, sparsity_stats
from .model import LayerSpec, ModelSpec, feature_bytes, flop_count

MODES = ("pipeline", "waiting")

# kinds whose input never crosses node boundaries under a channel partition
NO_TRAFFIC_KINDS = ("pool", "elementwise_add", "dwconv")

LATENCY_CSV_HEADER = ["layer_id", "kind", "C_c", "F_s", "S_comm", "S_comp",
                      "L_comm_s", "L_comp_s", "L_pipeline_s", "L_waiting_s"]


@dataclass(frozen=True)
class SystemConfig:
    """Deployment description: fabric bandwidth, per-node compute, node count."""

    name: str
    bandwidth_bytes_per_s: float
    compute_ops_per_s: float
    nodes: int = 2
    bytes_per_value: int = 4
    mode: str = "pipeline"

    def __post_init__(self) -> None:
        if self.bandwidth_bytes_per_s <= 0 or self.compute_ops_per_s <= 0:
            raise ValueError("bandwidth and compute rate must be positive")
        if self.nodes < 1:
            raise ValueError("node count must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


PRESETS: dict[str, SystemConfig] = {
    # desk-scale measurement point: 300 Mbit/s link, 125 GOP/s edge devices
    "dong2022": SystemConfig("dong2022", 37.5e6, 125e9),
    "t4_pcie": SystemConfig("t4_pcie", 32e9, 65e12),
    "a100_nvlink": SystemConfig("a100_nvlink", 600e9, 312e12),
    "xeon_ethernet": SystemConfig("xeon_ethernet", 125e6, 96e9),
    "cortexm4_wireless": SystemConfig("cortexm4_wireless", 125e3, 64e6),
    # small-core configuration used for the 8-node latency table
    "table2": SystemConfig("table2", 37.5e6, 3.75e9),
}


def system_to_dict(system: SystemConfig) -> dict:
    return {
        "name": system.name,
        "bandwidth": system.bandwidth_bytes_per_s,
        "compute_rate": system.compute_ops_per_s,
        "nodes": system.nodes,
        "bytes_per_value": system.bytes_per_value,
        "mode": system.mode,
    }


def system_from_dict(data: dict) -> SystemConfig:
    try:
        return SystemConfig(
            name=str(data["name"]),
            bandwidth_bytes_per_s=float(data["bandwidth"]),
            compute_ops_per_s=float(data["compute_rate"]),
            nodes=int(data.get("nodes", 2)),
            bytes_per_value=int(data.get("bytes_per_value", 4)),
            mode=str(data.get("mode", "pipeline")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed system config: {exc}") from exc


def resolve_system(name_or_path: str, nodes: int | None = None,
                   mode: str | None = None) -> SystemConfig:
    """Accept a preset name or a JSON file path; optionally override fields."""
    if name_or_path in PRESETS:
        system = PRESETS[name_or_path]
    else:
        try:
            data = json.loads(Path(name_or_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValueError(
                f"unknown system {name_or_path!r}: not a preset "
                f"({', '.join(sorted(PRESETS))}) and not a file") from None
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed system config {name_or_path}: {exc}") from exc
        system = system_from_dict(data)
    if nodes is not None:
        system = replace(system, nodes=nodes)
    if mode is not None:
        system = replace(system, mode=mode)
    return system


# -- core equations ----------------------------------------------------------


def comm_latency(feature_bytes_: float, s_comm: float, bandwidth: float) -> float:
    """Seconds for one node's share of a layer's feature exchange."""
    return feature_bytes_ * (1.0 - s_comm) / bandwidth


def comp_latency(ops: float, s_comp: float, nodes: int, compute_rate: float) -> float:
    """Seconds for one node's share of a layer's arithmetic."""
    return ops * (1.0 - s_comp) / (nodes * compute_rate)


def arithmetic_intensity_ratio(ops: float, feature_bytes_: float,
                               system: SystemConfig) -> float:
    """A = (N*C / C_c) * (F_s / B): dense comm time over dense comp time."""
    return (system.nodes * system.compute_ops_per_s / ops) * \
        (feature_bytes_ / system.bandwidth_bytes_per_s)


def equilibrium_scomm(a: float, nodes: int) -> float:
    """Communication sparsity at which L_comm meets L_comp; needs A >= 1."""
    if nodes < 2:
        raise ValueError("equilibrium needs at least 2 nodes")
    if a < 1:
        raise ValueError(f"layer is compute-bound (A={a:.6g} < 1); "
                         "no equilibrium sparsity exists in [0, 1]")
    return (a * nodes - nodes) / (a * nodes - nodes + 1.0)


# -- per-layer latency -------------------------------------------------------


@dataclass(frozen=True)
class LayerLatency:
    layer_id: int
    kind: str
    ops: int
    feature_bytes: int
    s_comm: float
    s_comp: float
    l_comm: float
    l_comp: float

    @property
    def l_pipeline(self) -> float:
        return max(self.l_comm, self.l_comp)

    @property
    def l_waiting(self) -> float:
        return self.l_comm + self.l_comp


@dataclass(frozen=True)
class LatencyReport:
    system: SystemConfig
    layers: tuple[LayerLatency, ...]

    @property
    def total_pipeline(self) -> float:
        return sum(l.l_pipeline for l in self.layers)

    @property
    def total_waiting(self) -> float:
        return sum(l.l_waiting for l in self.layers)

    @property
    def total(self) -> float:
        return self.total_pipeline if self.system.mode == "pipeline" else self.total_waiting

    def layer(self, layer_id: int) -> LayerLatency:
        return self.layers[layer_id]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LATENCY_CSV_HEADER)
        for l in self.layers:
            w.writerow([l.layer_id, l.kind, l.ops, l.feature_bytes,
                        fmt(l.s_comm), fmt(l.s_comp), fmt(l.l_comm), fmt(l.l_comp),
                        fmt(l.l_pipeline), fmt(l.l_waiting)])
        w.writerow(["total", "", sum(l.ops for l in self.layers),
                    sum(l.feature_bytes for l in self.layers), "", "",
                    fmt(sum(l.l_comm for l in self.layers)),
                    fmt(sum(l.l_comp for l in self.layers)),
                    fmt(self.total_pipeline), fmt(self.total_waiting)])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")


def fmt(x: float) -> str:
    """Shortest round-trippable decimal; deterministic for reproducible files."""
    return repr(float(x))


def _layer_scomm(model: ModelSpec, layer: LayerSpec, system: SystemConfig,
                 sparsity, stats) -> tuple[float, float, bool]:
    """(s_comm, s_comp, charges_comm) for the closed-form (non-plan) path."""
    if system.nodes == 1:
        return 0.0, 0.0, False
    if layer.kind in NO_TRAFFIC_KINDS:
        return 0.0, 0.0, False
    if not layer.sparsifiable:
        return 0.0, 0.0, True  # replicated first input or dense exchange
    if stats is not None and layer.id in stats:
        st = stats[layer.id]
        return float(st.s_comm), float(st.s_comp), True
    if isinstance(sparsity, dict):
        s = float(sparsity.get(layer.id, 0.0))
    else:
        s = float(sparsity or 0.0)
    if not 0 <= s <= 1:
        raise ValueError(f"layer {layer.id}: S_comm={s} outside [0, 1]")
    return s, s * (system.nodes - 1) / system.nodes, True


def model_latency(
    model: ModelSpec,
    system: SystemConfig,
    sparsity: float | dict[int, float] | None = None,
    mask: BlockMask | None = None,
    plan: CommPlan | None = None,
) -> LatencyReport:
    """Latency report from a uniform/per-layer sparsity, a mask, or a plan.

    Exactly one sparsity source may be given (none means dense). A mask is
    reduced to its exact per-layer statistics; an explicit plan switches to
    per-node byte/op accounting with the layer cost as the slowest node.
    """
    given = [x is not None for x in (sparsity, mask, plan)]
    if sum(given) > 1:
        raise ValueError("pass at most one of sparsity, mask, plan")
    if plan is not None:
        return _latency_from_plan(model, system, plan)
    stats = None
    if mask is not None:
        if mask.nodes != system.nodes:
            raise ValueError(f"mask built for {mask.nodes} nodes, system has {system.nodes}")
        stats = sparsity_stats(mask, model)
    rows = []
    for layer in model.layers:
        ops = flop_count(layer)
        fbytes = feature_bytes(layer, system.bytes_per_value)
        s_comm, s_comp, charges = _layer_scomm(model, layer, system, sparsity, stats)
        l_comm = comm_latency(fbytes, s_comm, system.bandwidth_bytes_per_s) if charges else 0.0
        l_comp = comp_latency(ops, s_comp, system.nodes, system.compute_ops_per_s)
        rows.append(LayerLatency(layer.id, layer.kind, ops, fbytes,
                                 s_comm, s_comp, l_comm, l_comp))
    return LatencyReport(system, tuple(rows))


# -- per-node accounting (shared with the simulator) -------------------------


@dataclass(frozen=True)
class NodeLayerCost:
    """One node's traffic and arithmetic for one layer."""

    layer_id: int
    node: int
    bytes_out: int   # distinct features leaving this node, in bytes
    bytes_in: int    # arrivals, in bytes
    ops: int

    def t_comm(self, system: SystemConfig) -> float:
        return (self.bytes_out + self.bytes_in) / system.bandwidth_bytes_per_s

    def t_comp(self, system: SystemConfig) -> float:
        return self.ops / system.compute_ops_per_s


def per_node_costs(model: ModelSpec, plan: CommPlan,
                   system: SystemConfig) -> dict[int, list[NodeLayerCost]]:
    """Exact per-layer, per-node byte and op counts under an explicit plan.

    The simulator emits its timing trace from this same routine, so trace
    aggregates and plan-based reports agree to the last bit.
    """
    n = system.nodes
    bpv = system.bytes_per_value
    out: dict[int, list[NodeLayerCost]] = {}
    for layer in model.layers:
        per_feature_bytes = (1 if layer.kind == "dense"
                             else layer.in_height * layer.in_width) * bpv
        own = input_ownership(model, layer, n) if n > 1 else None
        entries = plan.pairs.get(layer.id, {})
        rows = []
        for node in range(n):
            if n == 1:
                bytes_out = bytes_in = 0
                gathered = layer.in_features
            elif own is None:
                # replicated model input: charged as a dense arrival per node
                bytes_out = 0
                bytes_in = layer.in_features * per_feature_bytes
                gathered = layer.in_features
            else:
                lo, hi = own[node]
                bytes_out = plan.distinct_sent(layer.id, node) * per_feature_bytes
                received = sum(len(f) for (s, d), f in entries.items() if d == node)
                bytes_in = received * per_feature_bytes
                gathered = (hi - lo) + received

            olo, ohi = even_ranges(layer.out_features, n)[node] if n > 1 else (0, layer.out_features)
            owned_out = ohi - olo
            if layer.kind == "conv2d":
                ops = 2 * layer.kernel_h * layer.kernel_w * gathered * owned_out \
                    * layer.out_height * layer.out_width
            elif layer.kind == "dense":
                ops = 2 * gathered * owned_out
            elif layer.kind == "dwconv":
                lo, hi = (own[node] if own is not None else (0, layer.in_features)) \
                    if n > 1 else (0, layer.in_features)
                ops = 2 * layer.kernel_h * layer.kernel_w * (hi - lo) \
                    * layer.out_height * layer.out_width
            elif layer.kind == "elementwise_add":
                ops = owned_out * layer.out_height * layer.out_width
            elif layer.kind == "pool":
                lo, hi = (own[node] if own is not None else (0, layer.in_features)) \
                    if n > 1 else (0, layer.in_features)
                ops = (hi - lo) * layer.in_height * layer.in_width
            else:  # feature_matmul: accounting-only, split evenly
                ops = flop_count(layer) // n
            rows.append(NodeLayerCost(layer.id, node, bytes_out, bytes_in, ops))
        out[layer.id] = rows
    return out


def _latency_from_plan(model: ModelSpec, system: SystemConfig,
                       plan: CommPlan) -> LatencyReport:
    if plan.nodes != system.nodes:
        raise ValueError(f"plan built for {plan.nodes} nodes, system has {system.nodes}")
    costs = per_node_costs(model, plan, system)
    rows = []
    for layer in model.layers:
        ops = flop_count(layer)
        fbytes = feature_bytes(layer, system.bytes_per_value)
        possible = layer.in_features * (system.nodes - 1)
        if layer.sparsifiable and possible:
            sent = plan.messages_in_layer(layer.id)
            s_comm = 1.0 - sent / possible
            s_comp = s_comm * (system.nodes - 1) / system.nodes
        else:
            s_comm = s_comp = 0.0
        node_rows = costs[layer.id]
        l_comm = max(r.t_comm(system) for r in node_rows)
        l_comp = max(r.t_comp(system) for r in node_rows)
        rows.append(LayerLatency(layer.id, layer.kind, ops, fbytes,
                                 s_comm, s_comp, l_comm, l_comp))
    return LatencyReport(system, tuple(rows))


# -- equilibrium profile -----------------------------------------------------


@dataclass(frozen=True)
class LayerEquilibrium:
    layer_id: int
    kind: str
    a: float | None           # dense comm time / dense comp time
    s_comm: float | None
    s_comp: float | None
    status: str               # ok | compute_bound | no_comm | always_dense


EQUILIBRIUM_CSV_HEADER = ["layer_id", "kind", "A", "S_comm_eql", "S_comp_eql", "status"]


def equilibrium_profile(model: ModelSpec, system: SystemConfig) -> list[LayerEquilibrium]:
    """Per-layer equilibrium sparsity; layers that cannot balance are flagged.

    Pools, adds, and depthwise convs exchange nothing (``no_comm``);
    feature_matmul traffic cannot be pruned (``always_dense``); layers with
    A < 1 cannot reach balance inside [0, 1] (``compute_bound``).
    """
    if system.nodes < 2:
        raise ValueError("equilibrium profile needs at least 2 nodes")
    rows = []
    for layer in model.layers:
        if layer.kind in NO_TRAFFIC_KINDS:
            rows.append(LayerEquilibrium(layer.id, layer.kind, None, None, None, "no_comm"))
            continue
        if layer.kind == "feature_matmul":
            rows.append(LayerEquilibrium(layer.id, layer.kind, None, None, None, "always_dense"))
            continue
        ops = flop_count(layer)
        fbytes = feature_bytes(layer, system.bytes_per_value)
        a = arithmetic_intensity_ratio(ops, fbytes, system)
        if a < 1:
            rows.append(LayerEquilibrium(layer.id, layer.kind, a, None, None, "compute_bound"))
            continue
        s = equilibrium_scomm(a, system.nodes)
        rows.append(LayerEquilibrium(layer.id, layer.kind, a, s,
                                     s * (system.nodes - 1) / system.nodes, "ok"))
    return rows


def equilibrium_csv_text(rows: list[LayerEquilibrium]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EQUILIBRIUM_CSV_HEADER)
    for r in rows:
        w.writerow([r.layer_id, r.kind,
                    "" if r.a is None else fmt(r.a),
                    "" if r.s_comm is None else fmt(r.s_comm),
                    "" if r.s_comp is None else fmt(r.s_comp),
                    r.status])
    return buf.getvalue()


def equilibrium_mapping(rows: list[LayerEquilibrium], model: ModelSpec) -> dict[int, float]:
    """Sparsifiable-layer mapping usable as a per-layer sparsity profile."""
    out = {}
    for r in rows:
        if r.status == "ok" and model.layer(r.layer_id).sparsifiable:
            out[r.layer_id] = r.s_comm
    return out
