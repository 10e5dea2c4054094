"""Block-structured communication masks and their algebra.

Partitioning a layer over N nodes splits its I input features and O output
features into N contiguous blocks; node j computes output block j from its
own input block plus whatever foreign features other nodes transmit to it.
Skipping a transmission is equivalent to pruning, for one input feature f and
one destination block j, the whole *sub-row* of kernels {(f, o) : o in block
j}. A mask is therefore a kernel-granularity boolean matrix per layer with
two structural invariants: diagonal blocks are all ones (a node always uses
its own features), and within any off-diagonal block all kernels of one
sub-row share a single value (a feature is either sent to a node or not).

This module owns mask construction (magnitude-ranked or random sub-row
selection, fixed patterns), the translation between masks and per-node-pair
communication plans, exact sparsity statistics (kept as ``Fraction`` so the
S_comm = N/(N-1) * S_wt identity is checkable without rounding), and per-node
memory estimates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .model import LayerSpec, ModelSpec
from .weights import WeightStore


class MaskError(ValueError):
    """Structural problem with a mask, plan, or partition."""


def even_ranges(total: int, nodes: int) -> list[tuple[int, int]]:
    """Contiguous per-node ranges with floor boundaries (exact when divisible)."""
    return [(i * total // nodes, (i + 1) * total // nodes) for i in range(nodes)]


def input_ownership(model: ModelSpec, layer: LayerSpec, nodes: int) -> list[tuple[int, int]] | None:
    """Per-node ranges of the layer's input features, or None when replicated.

    Input features of a layer are the output features of its source layer,
    so ownership follows the source's output partition. Across a flatten
    boundary (dense fed by a spatial layer) each channel expands to its
    height*width scalar features, keeping blocks contiguous.
    """
    src_id = model.input_source(layer.id)
    if src_id < 0:
        return None  # model input, replicated to every node
    src = model.layer(src_id)
    ranges = even_ranges(src.out_features, nodes)
    if layer.kind == "dense" and src.kind != "dense":
        scale = src.out_height * src.out_width
        ranges = [(lo * scale, hi * scale) for lo, hi in ranges]
    return ranges


@dataclass
class BlockMask:
    """Kernel-granularity keep matrices for the sparsifiable layers.

    ``keep[layer_id]`` is a bool array of shape (in_features, out_features).
    Layers without an entry are implicitly dense. ``nodes`` fixes the block
    structure for every entry.
    """

    nodes: int
    keep: dict[int, np.ndarray]

    def block_kept(self, layer: LayerSpec) -> np.ndarray:
        """(I, nodes) view: is feature f's sub-row toward block j kept?

        Relies on sub-row atomicity: the first kernel of each sub-row stands
        for the whole sub-row.
        """
        k = self.keep[layer.id]
        starts = [lo for lo, _ in even_ranges(layer.out_features, self.nodes)]
        return k[:, starts]

    def pruned_subrows(self, layer: LayerSpec) -> int:
        bk = self.block_kept(layer)
        in_ranges = even_ranges(layer.in_features, self.nodes)
        pruned = 0
        for j in range(self.nodes):
            for i, (lo, hi) in enumerate(in_ranges):
                if i == j:
                    continue
                pruned += int((hi - lo) - bk[lo:hi, j].sum())
        return pruned

    def validate(self, model: ModelSpec) -> None:
        n = self.nodes
        if n < 1:
            raise MaskError("node count must be >= 1")
        for lid, k in self.keep.items():
            layer = model.layer(lid)
            if not layer.sparsifiable:
                raise MaskError(f"layer {lid} is not sparsifiable but has a mask entry")
            if layer.in_features % n or layer.out_features % n:
                raise MaskError(
                    f"layer {lid}: features ({layer.in_features}x{layer.out_features}) "
                    f"not divisible by {n} nodes")
            if k.shape != (layer.in_features, layer.out_features):
                raise MaskError(f"layer {lid}: mask shape {k.shape} mismatch")
            own = input_ownership(model, layer, n)
            if own is not None and own != even_ranges(layer.in_features, n):
                raise MaskError(
                    f"layer {lid}: source partition does not align with its "
                    f"input blocks; cannot mask")
            in_ranges = even_ranges(layer.in_features, n)
            out_ranges = even_ranges(layer.out_features, n)
            for i, (ilo, ihi) in enumerate(in_ranges):
                for j, (olo, ohi) in enumerate(out_ranges):
                    block = k[ilo:ihi, olo:ohi]
                    if i == j:
                        if not block.all():
                            raise MaskError(f"layer {lid}: diagonal block ({i},{i}) not all-ones")
                    else:
                        rowwise = block == block[:, :1]
                        if not rowwise.all():
                            raise MaskError(
                                f"layer {lid}: block ({i},{j}) breaks sub-row atomicity")


# -- fixed patterns ----------------------------------------------------------


def _full_keep(layer: LayerSpec) -> np.ndarray:
    return np.ones((layer.in_features, layer.out_features), dtype=bool)


def pattern_dense(model: ModelSpec, nodes: int) -> BlockMask:
    """Everything transmitted: all-ones masks (prune fraction 0)."""
    mask = BlockMask(nodes, {l.id: _full_keep(l) for l in model.sparsifiable_layers})
    mask.validate(model)
    return mask


def pattern_independent(model: ModelSpec, nodes: int) -> BlockMask:
    """No cross-node traffic on any sparsifiable layer (prune fraction 1)."""
    keep = {}
    for layer in model.sparsifiable_layers:
        k = np.zeros((layer.in_features, layer.out_features), dtype=bool)
        for (ilo, ihi), (olo, ohi) in zip(even_ranges(layer.in_features, nodes),
                                          even_ranges(layer.out_features, nodes)):
            k[ilo:ihi, olo:ohi] = True
        keep[layer.id] = k
    mask = BlockMask(nodes, keep)
    mask.validate(model)
    return mask


def pattern_dense_then_split(model: ModelSpec, nodes: int, split_layer: int) -> BlockMask:
    """Dense below ``split_layer``, fully independent from it onward."""
    dense = pattern_dense(model, nodes)
    split = pattern_independent(model, nodes)
    keep = {lid: (dense.keep[lid] if lid < split_layer else split.keep[lid])
            for lid in dense.keep}
    return BlockMask(nodes, keep)


# -- scoring and selection ---------------------------------------------------


def score_subrows_l1(layer: LayerSpec, kernel: np.ndarray, nodes: int) -> np.ndarray:
    """(I, nodes) sub-row importance: sum of |kernel| over each output block.

    Entry (f, j) aggregates the out_features/nodes * kernel_h * kernel_w
    weights that connect input feature f to output block j; the diagonal
    entries are computed too but never ranked (a node keeps its own features).
    """
    # kernel is (O, I, kh, kw); fold the spatial taps first
    mass = np.abs(kernel.astype(np.float64)).sum(axis=(2, 3))  # (O, I)
    out_ranges = even_ranges(layer.out_features, nodes)
    cols = [mass[lo:hi, :].sum(axis=0) for lo, hi in out_ranges]
    return np.stack(cols, axis=1)  # (I, nodes)


def prune_count(q: float | Fraction, possible: int) -> int:
    """floor(q * possible) with decimal semantics for float q.

    Floats are routed through their shortest decimal repr so that q=0.3 of 30
    sub-rows prunes 9, not 8; exact Fractions pass straight through.
    """
    frac = q if isinstance(q, Fraction) else Fraction(repr(float(q)))
    if not 0 <= frac <= 1:
        raise MaskError(f"prune fraction {q} outside [0, 1]")
    return math.floor(frac * possible)


def select_subrows(
    model: ModelSpec,
    weights: WeightStore | None,
    nodes: int,
    prune_fraction: float | Fraction | dict[int, float | Fraction],
    strategy: str = "l1",
    seed: int = 0,
    base_mask: BlockMask | None = None,
) -> BlockMask:
    """Build a mask by pruning the lowest-value off-diagonal sub-rows.

    Per sparsifiable layer, exactly floor(q * I * (nodes-1)) sub-rows are
    pruned. ``l1`` ranks all of a layer's off-diagonal sub-rows together by
    ascending L1 mass, ties broken by ascending (feature, block); ``random``
    draws the pruned set uniformly from a PCG64 stream seeded per call.
    ``prune_fraction`` may be one number or a per-layer mapping. When
    ``base_mask`` is given its pruned sub-rows stay pruned and only the
    remainder is ranked, so schedules produce nested masks.
    """
    if strategy not in ("l1", "random"):
        raise MaskError(f"unknown selection strategy {strategy!r}")
    if strategy == "l1" and weights is None:
        raise MaskError("l1 selection needs weights to score")
    if base_mask is not None and base_mask.nodes != nodes:
        raise MaskError("base mask was built for a different node count")
    rng = np.random.default_rng(seed)
    keep: dict[int, np.ndarray] = {}
    for layer in model.sparsifiable_layers:
        if layer.in_features % nodes or layer.out_features % nodes:
            raise MaskError(
                f"layer {layer.id}: features ({layer.in_features}x{layer.out_features}) "
                f"not divisible by {nodes} nodes")
        q = prune_fraction.get(layer.id, 0) if isinstance(prune_fraction, dict) else prune_fraction
        possible = layer.in_features * (nodes - 1)
        target = prune_count(q, possible)

        in_ranges = even_ranges(layer.in_features, nodes)
        owner = np.empty(layer.in_features, dtype=int)
        for i, (lo, hi) in enumerate(in_ranges):
            owner[lo:hi] = i

        if base_mask is not None and layer.id in base_mask.keep:
            base_kept = base_mask.block_kept(layer)
        else:
            base_kept = np.ones((layer.in_features, nodes), dtype=bool)

        # candidates: (f, j) pairs of still-kept off-diagonal sub-rows
        candidates = [(f, j) for f in range(layer.in_features) for j in range(nodes)
                      if j != owner[f] and base_kept[f, j]]
        already = possible - len(candidates)
        if target < already:
            raise MaskError(
                f"layer {layer.id}: target prune count {target} below the "
                f"{already} sub-rows already pruned in the base mask")
        extra = target - already

        if strategy == "l1":
            scores = score_subrows_l1(layer, weights.kernel(layer.id), nodes)
            ranked = sorted(candidates, key=lambda fj: (scores[fj[0], fj[1]], fj[0], fj[1]))
            pruned = ranked[:extra]
        else:
            order = rng.permutation(len(candidates))
            pruned = [candidates[i] for i in order[:extra]]

        kept = base_kept.copy()
        for f, j in pruned:
            kept[f, j] = False
        k = np.zeros((layer.in_features, layer.out_features), dtype=bool)
        out_ranges = even_ranges(layer.out_features, nodes)
        for j, (olo, ohi) in enumerate(out_ranges):
            k[:, olo:ohi] = kept[:, j:j + 1]
        # diagonal blocks stay dense regardless of the kept matrix
        for i, ((ilo, ihi), (olo, ohi)) in enumerate(zip(in_ranges, out_ranges)):
            k[ilo:ihi, olo:ohi] = True
        keep[layer.id] = k
    mask = BlockMask(nodes, keep)
    mask.validate(model)
    return mask


def apply_mask(weights: WeightStore, mask: BlockMask, model: ModelSpec) -> WeightStore:
    """Copy of the weights with pruned kernels set to exactly zero."""
    out = weights.copy()
    for lid, k in mask.keep.items():
        lw = out.tensors[lid]
        lw.kernel *= k.T[:, :, None, None].astype(lw.kernel.dtype)
    return out


# -- sparsity statistics -----------------------------------------------------


@dataclass(frozen=True)
class SparsityStats:
    """Exact per-layer sparsity bookkeeping (all ratios are Fractions)."""

    layer_id: int
    nodes: int
    possible_messages: int     # I * (nodes - 1)
    sent_messages: int
    s_comm: Fraction           # 1 - sent / possible
    s_wt: Fraction             # pruned kernels / total kernels
    s_comp: Fraction           # equals s_wt: compute saved tracks weights removed


def layer_stats(mask: BlockMask, layer: LayerSpec) -> SparsityStats:
    n = mask.nodes
    possible = layer.in_features * (n - 1)
    pruned = mask.pruned_subrows(layer)
    sent = possible - pruned
    s_comm = Fraction(pruned, possible) if possible else Fraction(0)
    total_kernels = layer.in_features * layer.out_features
    pruned_kernels = pruned * (layer.out_features // n)
    s_wt = Fraction(pruned_kernels, total_kernels)
    return SparsityStats(layer.id, n, possible, sent, s_comm, s_wt, s_wt)


def sparsity_stats(mask: BlockMask, model: ModelSpec) -> dict[int, SparsityStats]:
    """Stats for every masked layer; unmasked layers are implicitly dense."""
    return {lid: layer_stats(mask, model.layer(lid)) for lid in sorted(mask.keep)}


def scomm_from_scomp(s_comp: float, nodes: int) -> float:
    """Communication sparsity implied by compute/weight sparsity: N/(N-1) * S_comp."""
    if nodes < 2:
        raise MaskError("conversion needs at least 2 nodes")
    s = s_comp * nodes / (nodes - 1)
    if not 0 <= s_comp <= 1 or s > 1 + 1e-12:
        raise MaskError(
            f"s_comp={s_comp} maps to s_comm={s} outside [0, 1] for {nodes} nodes")
    return min(s, 1.0)


def scomp_from_scomm(s_comm: float, nodes: int) -> float:
    if nodes < 2:
        raise MaskError("conversion needs at least 2 nodes")
    if not 0 <= s_comm <= 1:
        raise MaskError(f"s_comm={s_comm} outside [0, 1]")
    return s_comm * (nodes - 1) / nodes


# -- communication plans -----------------------------------------------------


@dataclass
class CommPlan:
    """Sorted feature lists per ordered node pair, for each exchanging layer.

    ``pairs[layer_id][(src, dst)]`` lists global input-feature indices that
    src transmits to dst before the layer runs. Layers with no cross-node
    traffic (replicated first layer, pools, adds, dwconv) have no entry.
    """

    nodes: int
    pairs: dict[int, dict[tuple[int, int], tuple[int, ...]]]

    def messages_in_layer(self, layer_id: int) -> int:
        return sum(len(v) for v in self.pairs.get(layer_id, {}).values())

    def features_into(self, layer_id: int, dst: int) -> list[int]:
        entries = self.pairs.get(layer_id, {})
        got: list[int] = []
        for (_, d), feats in sorted(entries.items()):
            if d == dst:
                got.extend(feats)
        return sorted(got)

    def distinct_sent(self, layer_id: int, src: int) -> int:
        entries = self.pairs.get(layer_id, {})
        sent: set[int] = set()
        for (s, _), feats in entries.items():
            if s == src:
                sent.update(feats)
        return len(sent)


def _dense_pairs(ownership: list[tuple[int, int]], nodes: int) -> dict[tuple[int, int], tuple[int, ...]]:
    pairs = {}
    for i, (lo, hi) in enumerate(ownership):
        feats = tuple(range(lo, hi))
        for j in range(nodes):
            if j != i and feats:
                pairs[(i, j)] = feats
    return pairs


def mask_to_commplan(mask: BlockMask, model: ModelSpec) -> CommPlan:
    """Expand a mask into explicit per-pair transmissions.

    Masked layers send exactly their kept off-diagonal sub-rows' features.
    Unmasked conv/dense/feature_matmul layers that read a partitioned input
    exchange it densely; the replicated first input and the partition-aligned
    kinds move nothing.
    """
    n = mask.nodes
    pairs: dict[int, dict[tuple[int, int], tuple[int, ...]]] = {}
    for layer in model.layers:
        own = input_ownership(model, layer, n)
        if own is None or n == 1:
            continue
        if layer.kind in ("pool", "elementwise_add", "dwconv"):
            continue
        if layer.id in mask.keep:
            bk = mask.block_kept(layer)
            entry: dict[tuple[int, int], tuple[int, ...]] = {}
            for i, (lo, hi) in enumerate(even_ranges(layer.in_features, n)):
                for j in range(n):
                    if j == i:
                        continue
                    feats = tuple(int(f) for f in range(lo, hi) if bk[f, j])
                    if feats:
                        entry[(i, j)] = feats
            if entry:
                pairs[layer.id] = entry
        else:
            entry = _dense_pairs(own, n)
            if entry:
                pairs[layer.id] = entry
    return CommPlan(n, pairs)


def commplan_to_mask(plan: CommPlan, model: ModelSpec) -> BlockMask:
    """Inverse of mask_to_commplan on sparsifiable layers (exact round-trip)."""
    n = plan.nodes
    keep: dict[int, np.ndarray] = {}
    for layer in model.sparsifiable_layers:
        kept = np.zeros((layer.in_features, n), dtype=bool)
        in_ranges = even_ranges(layer.in_features, n)
        for i, (lo, hi) in enumerate(in_ranges):
            kept[lo:hi, i] = True
        for (src, dst), feats in plan.pairs.get(layer.id, {}).items():
            for f in feats:
                if not 0 <= f < layer.in_features:
                    raise MaskError(f"layer {layer.id}: feature {f} out of range")
                if src != f * n // layer.in_features:
                    raise MaskError(
                        f"layer {layer.id}: feature {f} not owned by node {src}")
                kept[f, dst] = True
        k = np.zeros((layer.in_features, layer.out_features), dtype=bool)
        for j, (olo, ohi) in enumerate(even_ranges(layer.out_features, n)):
            k[:, olo:ohi] = kept[:, j:j + 1]
        keep[layer.id] = k
    mask = BlockMask(n, keep)
    mask.validate(model)
    return mask


# -- memory ------------------------------------------------------------------


@dataclass(frozen=True)
class NodeMemory:
    node: int
    weight_bytes: int
    peak_feature_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.peak_feature_bytes


@dataclass(frozen=True)
class MemoryEstimate:
    per_node: tuple[NodeMemory, ...]

    @property
    def max_total_bytes(self) -> int:
        return max(n.total_bytes for n in self.per_node)

    @property
    def total_weight_bytes(self) -> int:
        return sum(n.weight_bytes for n in self.per_node)


def memory_estimate(
    model: ModelSpec,
    nodes: int,
    mask: BlockMask | None = None,
    bytes_per_value: int = 4,
) -> MemoryEstimate:
    """Per-node bytes: kept kernels + owned biases + peak held features.

    The feature peak is the largest (local slice + received features) input
    any single layer requires on that node, which doubles as the receive
    buffer bound. Kernel counting honours the mask, so pruning off-diagonal
    sub-rows shrinks the estimate monotonically.
    """
    if mask is not None and mask.nodes != nodes:
        raise MaskError("mask node count mismatch")
    plan = mask_to_commplan(mask, model) if mask is not None and nodes > 1 else None
    result = []
    for node in range(nodes):
        wbytes = 0
        for layer in model.weighted_layers:
            olo, ohi = even_ranges(layer.out_features, nodes)[node]
            owned_out = ohi - olo
            if mask is not None and layer.id in mask.keep:
                kernels = int(mask.keep[layer.id][:, olo:ohi].sum())
            elif layer.kind == "dwconv":
                kernels = owned_out
            else:
                kernels = layer.in_features * owned_out
            wbytes += kernels * layer.kernel_h * layer.kernel_w * bytes_per_value
            wbytes += owned_out * bytes_per_value
        peak = 0
        for layer in model.layers:
            per_feature = (1 if layer.kind == "dense"
                           else layer.in_height * layer.in_width)
            own = input_ownership(model, layer, nodes) if nodes > 1 else None
            if own is None:
                held = layer.in_features
            else:
                lo, hi = own[node]
                held = hi - lo
                if plan is not None:
                    held += len(plan.features_into(layer.id, node))
            peak = max(peak, held * per_feature * bytes_per_value)
        result.append(NodeMemory(node, wbytes, peak))
    return MemoryEstimate(tuple(result))


# -- file formats ------------------------------------------------------------


def mask_to_dict(mask: BlockMask, model: ModelSpec) -> dict:
    layers = []
    for lid in sorted(mask.keep):
        layer = model.layer(lid)
        bk = mask.block_kept(layer)
        blocks = []
        for i, (lo, hi) in enumerate(even_ranges(layer.in_features, mask.nodes)):
            for j in range(mask.nodes):
                if j == i:
                    continue
                kept = [int(f) for f in range(lo, hi) if bk[f, j]]
                blocks.append({"src": i, "dst": j, "kept": kept})
        layers.append({"layer_id": lid, "blocks": blocks})
    return {"nodes": mask.nodes, "layers": layers}


def mask_from_dict(data: dict, model: ModelSpec) -> BlockMask:
    try:
        n = int(data["nodes"])
        keep: dict[int, np.ndarray] = {}
        for entry in data["layers"]:
            layer = model.layer(int(entry["layer_id"]))
            kept = np.zeros((layer.in_features, n), dtype=bool)
            for i, (lo, hi) in enumerate(even_ranges(layer.in_features, n)):
                kept[lo:hi, i] = True
            for block in entry["blocks"]:
                i, j = int(block["src"]), int(block["dst"])
                for f in block["kept"]:
                    f = int(f)
                    if not 0 <= f < layer.in_features:
                        raise MaskError(
                            f"layer {layer.id}: kept feature {f} out of range")
                    if f * n // layer.in_features != i:
                        raise MaskError(
                            f"layer {layer.id}: feature {f} not owned by src node {i}")
                    kept[f, j] = True
            k = np.zeros((layer.in_features, layer.out_features), dtype=bool)
            for j, (olo, ohi) in enumerate(even_ranges(layer.out_features, n)):
                k[:, olo:ohi] = kept[:, j:j + 1]
            keep[layer.id] = k
    except (KeyError, TypeError, IndexError) as exc:
        raise MaskError(f"malformed mask file: {exc}") from exc
    mask = BlockMask(n, keep)
    mask.validate(model)
    return mask


def save_mask(mask: BlockMask, model: ModelSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mask_to_dict(mask, model), indent=2) + "\n",
                          encoding="utf-8")


def load_mask(path: str | Path, model: ModelSpec) -> BlockMask:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MaskError(f"malformed mask file {path}: {exc}") from exc
    return mask_from_dict(data, model)


def plan_to_dict(plan: CommPlan) -> dict:
    layers = []
    for lid in sorted(plan.pairs):
        entries = [{"src": s, "dst": d, "features": list(f)}
                   for (s, d), f in sorted(plan.pairs[lid].items())]
        layers.append({"layer_id": lid, "pairs": entries})
    return {"nodes": plan.nodes, "layers": layers}


def plan_from_dict(data: dict) -> CommPlan:
    try:
        pairs = {
            int(entry["layer_id"]): {
                (int(p["src"]), int(p["dst"])): tuple(int(f) for f in p["features"])
                for p in entry["pairs"]
            }
            for entry in data["layers"]
        }
        return CommPlan(int(data["nodes"]), pairs)
    except (KeyError, TypeError) as exc:
        raise MaskError(f"malformed plan file: {exc}") from exc
