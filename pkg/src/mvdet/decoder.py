"""Query-based refinement decoder over multi-view feature pyramids.

Each decoder layer runs self-attention across object queries, decodes a 3D
reference point per query, gathers image evidence according to the selected
aggregation mode, and applies a residual feed-forward block.  Aggregation
modes:

* ``single-point``: sample the pyramid at the reference point only.
* ``fixed-points``: sample at the reference point plus the corners of a
  nominal box around it, all merged with unit weights.
* ``dynamic-graph``: sample at learned offset neighbors merged with learned
  per-edge weights; with one neighbor, zero offset, and unit weight this
  reproduces ``single-point`` bit-exactly.

All parameters and arithmetic are 64-bit.  Given identical seeds and inputs
the decoder is bit-deterministic.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camgeo import Box3D, CameraRig, DetectionResult, SceneBounds, box_corners
from .featcore import FeaturePyramid, bilinear_grad, sample_multiview_many, write_tensor, read_tensor

__all__ = [
    "DecoderError",
    "Mlp",
    "ObjectQuery",
    "QuerySet",
    "AttentionParams",
    "DynamicGraph",
    "DecoderLayer",
    "PredictionHead",
    "AggregationMode",
    "decode_reference_point",
    "baseline_aggregate",
    "build_graph",
    "node_features",
    "propagate",
    "self_attention",
    "decoder_forward",
    "decode_predictions",
    "init_queries",
    "init_decoder",
    "save_params",
    "load_params",
    "grad_check",
    "GradCheckReport",
    "ComponentReport",
]


class DecoderError(ValueError):
    """Decoder configuration or numeric state is invalid."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# MLPs


@dataclass(frozen=True)
class Mlp:
    """Fully connected layers with ReLU or identity activations.

    ``weights[i]`` has shape (out_i, in_i); activations name one of
    ``relu``/``identity`` per layer.  Inputs broadcast over leading axes.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        acts = tuple(self.activations)
        if not (len(ws) == len(bs) == len(acts)) or not ws:
            raise DecoderError("weights, biases, activations must align and be nonempty")
        for i, (w, b, act) in enumerate(zip(ws, bs, acts)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DecoderError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if act not in ("relu", "identity"):
                raise DecoderError(f"layer {i}: unknown activation {act!r}")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise DecoderError(f"layer {i}: input dim {w.shape[1]} != previous out")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DecoderError(f"layer {i}: non-finite parameters")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activations", acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = h @ w.T + b
            if act == "relu":
                h = np.maximum(h, 0.0)
        if not np.all(np.isfinite(h)):
            raise DecoderError("MLP produced non-finite output")
        return h

    def preactivations(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-layer preactivation values (before the nonlinearity)."""
        h = np.asarray(x, dtype=np.float64)
        pres = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            pres.append(z)
            h = np.maximum(z, 0.0) if act == "relu" else z
        return pres

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """d output / d input at a single input point; shape (out_dim, in_dim)."""
        x = np.asarray(x, dtype=np.float64).reshape(self.in_dim)
        jac = None
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            layer_jac = w if jac is None else w @ jac
            if act == "relu":
                mask = (z > 0).astype(np.float64)
                layer_jac = layer_jac * mask[:, None]
                h = np.maximum(z, 0.0)
            else:
                h = z
            jac = layer_jac
        return jac

    @classmethod
    def seeded(cls, sizes: Sequence[int], rng: np.random.Generator, final_identity: bool = True) -> "Mlp":
        """Uniform(+-1/sqrt(fan_in)) init; ReLU on hidden layers."""
        ws, bs, acts = [], [], []
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            bound = 1.0 / math.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(sizes[i + 1], fan_in)))
            bs.append(rng.uniform(-bound, bound, size=sizes[i + 1]))
            last = i == len(sizes) - 2
            acts.append("identity" if (last and final_identity) else "relu")
        return cls(weights=tuple(ws), biases=tuple(bs), activations=tuple(acts))

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "Mlp":
        ws = [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)]
        bs = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        acts = ["relu"] * (len(sizes) - 2) + ["identity"]
        return cls(weights=tuple(ws), biases=tuple(bs), activations=tuple(acts))


# ---------------------------------------------------------------------------
# Queries


@dataclass(frozen=True)
class ObjectQuery:
    """Latent vector that gathers image evidence and decodes into one box."""

    embedding: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(emb)):
            raise DecoderError("query embedding must be finite")
        emb = emb.copy()
        emb.flags.writeable = False
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class QuerySet:
    """M object queries stored row-wise plus the scene box used to
    denormalize reference points."""

    embeddings: np.ndarray
    scene_bounds: SceneBounds

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise DecoderError(f"embeddings must be (M, C) with M >= 1, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise DecoderError("query embeddings must be finite")
        emb = emb.copy()
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def query(self, i: int) -> ObjectQuery:
        return ObjectQuery(embedding=self.embeddings[i])


def init_queries(seed: int, count: int, dim: int, bounds: SceneBounds) -> QuerySet:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(10,))))
    bound = 1.0 / math.sqrt(dim)
    return QuerySet(embeddings=rng.uniform(-bound, bound, size=(count, dim)), scene_bounds=bounds)


def _embedding(q) -> np.ndarray:
    if isinstance(q, ObjectQuery):
        return q.embedding
    return np.asarray(q, dtype=np.float64).reshape(-1)


# ---------------------------------------------------------------------------
# Reference points and single-point aggregation


def decode_reference_point(q, ref_net: Mlp, bounds: SceneBounds) -> np.ndarray:
    """Map a query to a 3D point strictly inside ``bounds`` via a sigmoid."""
    if ref_net.out_dim != 3:
        raise DecoderError(f"reference net must output 3 values, got {ref_net.out_dim}")
    emb = _embedding(q)
    return bounds.lo + sigmoid(ref_net(emb)) * bounds.extent


def baseline_aggregate(q, c, pyr: FeaturePyramid, rig: CameraRig, image_scale=None) -> ObjectQuery:
    """Residual update from the visibility-normalized sample at the reference
    point; the query is unchanged when the point is nowhere visible."""
    emb = _embedding(q)
    feats, _ = sample_multiview_many(pyr, rig, np.asarray(c, dtype=np.float64).reshape(1, 3), image_scale)
    return ObjectQuery(embedding=emb + feats[0])


# ---------------------------------------------------------------------------
# Dynamic graphs


@dataclass(frozen=True)
class DynamicGraph:
    """Learned neighborhood of one query: K offset nodes with edge weights.

    ``nodes`` always equals ``reference + offsets``; ``features`` is filled
    by :func:`node_features` before propagation.
    """

    reference: np.ndarray
    offsets: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.float64).reshape(3)
        offs = np.asarray(self.offsets, dtype=np.float64)
        nodes = np.asarray(self.nodes, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if offs.ndim != 2 or offs.shape[1] != 3 or offs.shape[0] < 1:
            raise DecoderError(f"offsets must be (K, 3) with K >= 1, got {offs.shape}")
        if nodes.shape != offs.shape or w.shape != (offs.shape[0],):
            raise DecoderError("nodes/weights shapes inconsistent with offsets")
        if not np.array_equal(nodes, ref + offs):
            raise DecoderError("nodes must equal reference + offsets")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.offsets.shape[0]


def build_graph(q, c, offset_net: Mlp, weight_net: Mlp, k: int, offset_scale: float = 2.0) -> DynamicGraph:
    """Predict K neighbor nodes and edge weights from one query.

    Offsets are ``offset_scale * tanh(offset_net(q))`` so neighbors stay
    within a bounded walk of the reference point; weights pass through a
    per-edge sigmoid.
    """
    if k < 1:
        raise DecoderError(f"k must be >= 1, got {k}")
    if offset_net.out_dim != 3 * k:
        raise DecoderError(f"offset net must output {3 * k} values, got {offset_net.out_dim}")
    if weight_net.out_dim != k:
        raise DecoderError(f"weight net must output {k} values, got {weight_net.out_dim}")
    emb = _embedding(q)
    reference = np.asarray(c, dtype=np.float64).reshape(3)
    offsets = offset_scale * np.tanh(offset_net(emb)).reshape(k, 3)
    weights = sigmoid(weight_net(emb))
    return DynamicGraph(reference=reference, offsets=offsets, nodes=reference + offsets, weights=weights)


def node_features(g: DynamicGraph, pyr: FeaturePyramid, rig: CameraRig, image_scale=None) -> np.ndarray:
    """Visibility-normalized multi-view sample per node; (K, C), zero rows
    for nodes not visible anywhere."""
    feats, _ = sample_multiview_many(pyr, rig, g.nodes, image_scale)
    return feats


def propagate(q, g: DynamicGraph) -> ObjectQuery:
    """Residual graph update: q + sum_j features_j * weight_j in node order."""
    if g.features is None:
        raise DecoderError("node features must be computed before propagation")
    feats = np.asarray(g.features, dtype=np.float64)
    if feats.shape[0] != g.k:
        raise DecoderError(f"expected {g.k} feature rows, got {feats.shape[0]}")
    emb = _embedding(q)
    update = np.zeros_like(emb)
    for j in range(g.k):
        update = update + feats[j] * g.weights[j]
    return ObjectQuery(embedding=emb + update)


# ---------------------------------------------------------------------------
# Self-attention


@dataclass(frozen=True)
class AttentionParams:
    """Multi-head self-attention projections (all (C, C) with biases)."""

    heads: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        dim = np.asarray(self.w_q).shape[0]
        if dim % self.heads != 0:
            raise DecoderError(f"dim {dim} not divisible by heads {self.heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (dim, dim):
                raise DecoderError(f"{name} must be ({dim}, {dim}), got {arr.shape}")
            object.__setattr__(self, name, arr)
        for name in ("b_q", "b_k", "b_v", "b_o"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (dim,):
                raise DecoderError(f"{name} must be ({dim},), got {arr.shape}")
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def seeded(cls, dim: int, heads: int, rng: np.random.Generator) -> "AttentionParams":
        bound = 1.0 / math.sqrt(dim)
        mats = {n: rng.uniform(-bound, bound, size=(dim, dim)) for n in ("w_q", "w_k", "w_v", "w_o")}
        vecs = {n: rng.uniform(-bound, bound, size=dim) for n in ("b_q", "b_k", "b_v", "b_o")}
        return cls(heads=heads, **mats, **vecs)


def self_attention(qs: QuerySet, params: AttentionParams) -> QuerySet:
    """Scaled dot-product multi-head self-attention with a residual connection."""
    emb = qs.embeddings
    m, dim = emb.shape
    if dim != params.dim:
        raise DecoderError(f"query dim {dim} does not match attention dim {params.dim}")
    h = params.heads
    dh = dim // h
    q = (emb @ params.w_q.T + params.b_q).reshape(m, h, dh)
    k = (emb @ params.w_k.T + params.b_k).reshape(m, h, dh)
    v = (emb @ params.w_v.T + params.b_v).reshape(m, h, dh)
    out = np.empty((m, h, dh))
    scale = 1.0 / math.sqrt(dh)
    for head in range(h):
        logits = (q[:, head] @ k[:, head].T) * scale
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, head] = weights @ v[:, head]
    merged = out.reshape(m, dim) @ params.w_o.T + params.b_o
    return QuerySet(embeddings=emb + merged, scene_bounds=qs.scene_bounds)


# ---------------------------------------------------------------------------
# Full decoder


class AggregationMode(enum.Enum):
    SINGLE_POINT = "single-point"
    FIXED_POINTS = "fixed-points"
    DYNAMIC_GRAPH = "dynamic-graph"


@dataclass(frozen=True)
class DecoderLayer:
    """One refinement layer; nets sized for queries of dim C and K neighbors."""

    ref_net: Mlp
    offset_net: Mlp
    weight_net: Mlp
    attention: AttentionParams
    ffn: Mlp

    def __post_init__(self):
        if self.ref_net.out_dim != 3:
            raise DecoderError("ref_net must output 3 values")
        if self.offset_net.out_dim % 3 != 0:
            raise DecoderError("offset_net must output 3K values")
        if self.weight_net.out_dim * 3 != self.offset_net.out_dim:
            raise DecoderError("weight_net must output K values matching offset_net")
        if self.ffn.out_dim != self.ffn.in_dim:
            raise DecoderError("feed-forward net must preserve the query dim")

    @property
    def neighbors(self) -> int:
        return self.weight_net.out_dim


# Nominal box (w, l, h) whose corners form the fixed-points subgraph.
FIXED_POINTS_BOX_SIZE = (2.0, 4.0, 1.5)


def init_decoder(
    seed: int,
    layers: int = 6,
    dim: int = 256,
    neighbors: int = 16,
    heads: int = 8,
    ffn_multiplier: int = 4,
) -> list[DecoderLayer]:
    """Deterministic seeded decoder stack."""
    built = []
    for li in range(layers):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(20, li))))
        built.append(
            DecoderLayer(
                ref_net=Mlp.seeded([dim, dim, 3], rng),
                offset_net=Mlp.seeded([dim, dim, 3 * neighbors], rng),
                weight_net=Mlp.seeded([dim, neighbors], rng),
                attention=AttentionParams.seeded(dim, heads, rng),
                ffn=Mlp.seeded([dim, ffn_multiplier * dim, dim], rng),
            )
        )
    return built


def _aggregate(
    emb: np.ndarray,
    refs: np.ndarray,
    layer: DecoderLayer,
    pyr: FeaturePyramid,
    rig: CameraRig,
    mode: AggregationMode,
    offset_scale: float,
    image_scale,
) -> np.ndarray:
    m = emb.shape[0]
    if mode is AggregationMode.SINGLE_POINT:
        feats, _ = sample_multiview_many(pyr, rig, refs, image_scale)
        return emb + feats
    if mode is AggregationMode.FIXED_POINTS:
        nodes = np.empty((m, 9, 3))
        for i in range(m):
            box = Box3D(center=refs[i], size=FIXED_POINTS_BOX_SIZE, yaw=0.0)
            nodes[i, 0] = refs[i]
            nodes[i, 1:] = box_corners(box)
        feats, _ = sample_multiview_many(pyr, rig, nodes.reshape(-1, 3), image_scale)
        return emb + feats.reshape(m, 9, -1).sum(axis=1)
    if mode is AggregationMode.DYNAMIC_GRAPH:
        k = layer.neighbors
        offsets = offset_scale * np.tanh(layer.offset_net(emb)).reshape(m, k, 3)
        weights = sigmoid(layer.weight_net(emb))
        nodes = refs[:, None, :] + offsets
        feats, _ = sample_multiview_many(pyr, rig, nodes.reshape(-1, 3), image_scale)
        feats = feats.reshape(m, k, -1)
        update = np.zeros_like(emb)
        for j in range(k):
            update = update + feats[:, j, :] * weights[:, j : j + 1]
        return emb + update
    raise DecoderError(f"unknown aggregation mode {mode!r}")


def decoder_forward(
    qs: QuerySet,
    layers: Sequence[DecoderLayer],
    pyr: FeaturePyramid,
    rig: CameraRig,
    mode: AggregationMode = AggregationMode.DYNAMIC_GRAPH,
    offset_scale: float = 2.0,
    image_scale=None,
) -> tuple[QuerySet, np.ndarray]:
    """Run the full layer stack.

    Returns the refined query set and the per-layer reference points with
    shape (num_layers, M, 3).  Reference points are re-decoded from the
    updated queries at every layer.
    """
    if pyr.channels != qs.dim:
        raise DecoderError(
            f"pyramid channels ({pyr.channels}) must match query dim ({qs.dim})"
        )
    current = qs
    all_refs = np.empty((len(layers), len(qs), 3))
    for li, layer in enumerate(layers):
        current = self_attention(current, layer.attention)
        emb = current.embeddings
        bounds = current.scene_bounds
        refs = bounds.lo + sigmoid(layer.ref_net(emb)) * bounds.extent
        all_refs[li] = refs
        emb = _aggregate(emb, refs, layer, pyr, rig, mode, offset_scale, image_scale)
        emb = emb + layer.ffn(emb)
        current = QuerySet(embeddings=emb, scene_bounds=bounds)
    return current, all_refs


# ---------------------------------------------------------------------------
# Prediction head


@dataclass(frozen=True)
class PredictionHead:
    """Regression and classification nets applied to refined queries.

    The regression net outputs (dx, dy, dz, log w, log l, log h, sin yaw,
    cos yaw, vx, vy) relative to the final reference point; class
    probabilities are a softmax over the classification logits.
    """

    reg_net: Mlp
    cls_net: Mlp

    def __post_init__(self):
        if self.reg_net.out_dim != 10:
            raise DecoderError("regression net must output 10 values")
        if self.cls_net.out_dim < 1:
            raise DecoderError("classification net must output at least one class")

    @property
    def num_classes(self) -> int:
        return self.cls_net.out_dim

    @classmethod
    def seeded(cls, seed: int, dim: int, num_classes: int = 10) -> "PredictionHead":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(30,))))
        return cls(reg_net=Mlp.seeded([dim, dim, 10], rng), cls_net=Mlp.seeded([dim, num_classes], rng))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_predictions(qs: QuerySet, refs: np.ndarray, head: PredictionHead) -> list[DetectionResult]:
    """Turn refined queries plus final reference points into scored boxes."""
    emb = qs.embeddings
    reg = head.reg_net(emb)
    probs = softmax(head.cls_net(emb))
    refs = np.asarray(refs, dtype=np.float64).reshape(len(qs), 3)
    results = []
    for i in range(len(qs)):
        center = refs[i] + reg[i, 0:3]
        size = np.exp(reg[i, 3:6])
        yaw = math.atan2(reg[i, 6], reg[i, 7])
        velocity = reg[i, 8:10]
        class_id = int(np.argmax(probs[i]))
        results.append(
            DetectionResult(
                box=Box3D(center=center, size=size, yaw=yaw, velocity=velocity, class_id=class_id),
                score=float(probs[i, class_id]),
            )
        )
    return results


# ---------------------------------------------------------------------------
# Parameter bundles (one tensor file per matrix + JSON manifest)


def _named_params(layers: Sequence[DecoderLayer], head: PredictionHead | None):
    def mlp_items(prefix: str, mlp: Mlp):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b

    for li, layer in enumerate(layers):
        base = f"layer{li:02d}"
        yield from mlp_items(f"{base}.ref_net", layer.ref_net)
        yield from mlp_items(f"{base}.offset_net", layer.offset_net)
        yield from mlp_items(f"{base}.weight_net", layer.weight_net)
        att = layer.attention
        for name in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o"):
            yield f"{base}.attention.{name}", getattr(att, name)
        yield from mlp_items(f"{base}.ffn", layer.ffn)
    if head is not None:
        yield from mlp_items("head.reg_net", head.reg_net)
        yield from mlp_items("head.cls_net", head.cls_net)


def save_params(
    directory,
    layers: Sequence[DecoderLayer],
    head: PredictionHead | None = None,
    manifest_name: str = "params.json",
) -> str:
    """Write the parameter bundle; tensors are stored as 32-bit floats, so a
    load returns the stored (truncated) values rather than the in-memory
    64-bit originals.  Returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    meta = {
        "dim": layers[0].ffn.in_dim,
        "heads": layers[0].attention.heads,
        "layers": len(layers),
        "neighbors": layers[0].neighbors,
        "num_classes": head.num_classes if head is not None else None,
        "activations": {},
    }
    for name, arr in _named_params(layers, head):
        fname = name.replace(".", "_") + ".gdt3"
        write_tensor(os.path.join(directory, fname), arr)
        entries.append({"file": fname, "name": name, "shape": list(arr.shape)})
    for li, layer in enumerate(layers):
        base = f"layer{li:02d}"
        for net_name in ("ref_net", "offset_net", "weight_net", "ffn"):
            meta["activations"][f"{base}.{net_name}"] = list(getattr(layer, net_name).activations)
    if head is not None:
        meta["activations"]["head.reg_net"] = list(head.reg_net.activations)
        meta["activations"]["head.cls_net"] = list(head.cls_net.activations)
    manifest_path = os.path.join(directory, manifest_name)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump({"version": 1, "meta": meta, "entries": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_params(manifest_path) -> tuple[list[DecoderLayer], PredictionHead | None]:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        bundle = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    arrays = {}
    for entry in bundle["entries"]:
        arr = read_tensor(os.path.join(base, entry["file"])).astype(np.float64)
        if list(arr.shape) != entry["shape"]:
            raise DecoderError(f"parameter {entry['name']}: shape mismatch")
        arrays[entry["name"]] = arr
    meta = bundle["meta"]

    def load_mlp(prefix: str) -> Mlp:
        ws, bs = [], []
        i = 0
        while f"{prefix}.w{i}" in arrays:
            ws.append(arrays[f"{prefix}.w{i}"])
            bs.append(arrays[f"{prefix}.b{i}"])
            i += 1
        acts = meta["activations"][prefix]
        return Mlp(weights=tuple(ws), biases=tuple(bs), activations=tuple(acts))

    layers = []
    for li in range(meta["layers"]):
        basename = f"layer{li:02d}"
        att = AttentionParams(
            heads=meta["heads"],
            **{n: arrays[f"{basename}.attention.{n}"] for n in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")},
        )
        layers.append(
            DecoderLayer(
                ref_net=load_mlp(f"{basename}.ref_net"),
                offset_net=load_mlp(f"{basename}.offset_net"),
                weight_net=load_mlp(f"{basename}.weight_net"),
                attention=att,
                ffn=load_mlp(f"{basename}.ffn"),
            )
        )
    head = None
    if meta.get("num_classes"):
        head = PredictionHead(reg_net=load_mlp("head.reg_net"), cls_net=load_mlp("head.cls_net"))
    return layers, head


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass(frozen=True)
class ComponentReport:
    component: str
    n_checked: int
    n_jittered: int
    max_abs_dev: float
    max_rel_dev: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_dev <= self.tol


@dataclass(frozen=True)
class GradCheckReport:
    components: tuple[ComponentReport, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.components)

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "components": [
                {
                    "component": c.component,
                    "n_checked": int(c.n_checked),
                    "n_jittered": int(c.n_jittered),
                    "max_abs_dev": float(c.max_abs_dev),
                    "max_rel_dev": float(c.max_rel_dev),
                    "tol": float(c.tol),
                    "passed": bool(c.passed),
                }
                for c in self.components
            ],
        }


class _GradProbe:
    """One propagation pipeline with analytic gradients of loss = sum(q_new).

    The pipeline mirrors the dynamic-graph aggregation of a single query:
    reference decode, offset/weight prediction, multi-view node sampling,
    and the weighted residual update.
    """

    def __init__(self, pyr, rig, ref_net, offset_net, weight_net, bounds, offset_scale, k):
        self.pyr = pyr
        self.rig = rig
        self.ref_net = ref_net
        self.offset_net = offset_net
        self.weight_net = weight_net
        self.bounds = bounds
        self.offset_scale = offset_scale
        self.k = k

    # -- forward pieces ----------------------------------------------------

    def derive(self, q: np.ndarray):
        c = decode_reference_point(q, self.ref_net, self.bounds)
        offsets = self.offset_scale * np.tanh(self.offset_net(q)).reshape(self.k, 3)
        weights = sigmoid(self.weight_net(q))
        return c, offsets, weights

    def loss_free(self, q: np.ndarray, c: np.ndarray, offsets: np.ndarray, weights: np.ndarray) -> float:
        nodes = c + offsets
        feats, _ = sample_multiview_many(self.pyr, self.rig, nodes)
        return float(np.sum(q) + np.sum(weights @ feats))

    def loss_query(self, q: np.ndarray) -> float:
        c, offsets, weights = self.derive(q)
        return self.loss_free(q, c, offsets, weights)

    # -- analytic gradients -------------------------------------------------

    def node_grads(self, nodes: np.ndarray):
        """Per-node S_j (channel-summed feature) and dS_j/dnode (K, 3)."""
        k = nodes.shape[0]
        sums = np.zeros((k, 3))
        for ci, cam in enumerate(self.rig):
            rot = cam.extrinsics.rotation
            trans = cam.extrinsics.translation
            intr = cam.intrinsics
            cam_pts = nodes @ rot.T + trans
            depths = cam_pts[:, 2]
            for level in self.pyr.levels(ci):
                for j in range(k):
                    if depths[j] <= 0:
                        continue
                    x_c, y_c, z_c = cam_pts[j]
                    u = intr.fx * x_c / z_c + intr.cx
                    v = intr.fy * y_c / z_c + intr.cy
                    pos = np.array([u, v]) / level.stride
                    if not (0 <= pos[0] <= level.width - 1 and 0 <= pos[1] <= level.height - 1):
                        continue
                    grad, _ = bilinear_grad(level, pos)
                    g = grad.sum(axis=0)  # (2,) summed over channels
                    du_dnode = intr.fx * (rot[0] - (x_c / z_c) * rot[2]) / z_c
                    dv_dnode = intr.fy * (rot[1] - (y_c / z_c) * rot[2]) / z_c
                    jac = np.stack([du_dnode / level.stride, dv_dnode / level.stride])
                    sums[j] += g @ jac
        feats, mask_counts = sample_multiview_many(self.pyr, self.rig, nodes)
        s = feats.sum(axis=1)
        ds = np.zeros((k, 3))
        for j in range(k):
            if mask_counts[j] > 0:
                ds[j] = sums[j] / mask_counts[j]
        return s, ds

    def analytic(self, q: np.ndarray):
        """Gradients of the loss w.r.t. offsets (K,3), weights (K,), query (C,)."""
        c, offsets, weights = self.derive(q)
        nodes = c + offsets
        s, ds = self.node_grads(nodes)
        grad_offsets = weights[:, None] * ds
        grad_weights = s
        # Query gradient: residual + weight path + offset path + reference path.
        z_ref = self.ref_net(q)
        sig_ref = sigmoid(z_ref)
        dc_dq = (self.bounds.extent * sig_ref * (1 - sig_ref))[:, None] * self.ref_net.jacobian(q)
        z_off = self.offset_net(q)
        doff_dq = (self.offset_scale * (1 - np.tanh(z_off) ** 2))[:, None] * self.offset_net.jacobian(q)
        z_w = self.weight_net(q)
        sig_w = sigmoid(z_w)
        dw_dq = (sig_w * (1 - sig_w))[:, None] * self.weight_net.jacobian(q)
        grad_q = np.ones_like(q)
        for j in range(self.k):
            grad_q = grad_q + s[j] * dw_dq[j]
            dnode_dq = dc_dq + doff_dq[3 * j : 3 * j + 3]
            grad_q = grad_q + weights[j] * (ds[j] @ dnode_dq)
        return grad_offsets, grad_weights, grad_q

    # -- kink detection ------------------------------------------------------

    def min_level_margin(self, nodes: np.ndarray) -> float:
        """Smallest distance of any visible sample position to an integer
        coordinate line or a level border, in level pixels."""
        margin = np.inf
        for ci, cam in enumerate(self.rig):
            rot, trans, intr = cam.extrinsics.rotation, cam.extrinsics.translation, cam.intrinsics
            cam_pts = nodes @ rot.T + trans
            for j in range(nodes.shape[0]):
                if cam_pts[j, 2] <= 1e-3:
                    if cam_pts[j, 2] > 0:
                        margin = min(margin, 0.0)
                    continue
                u = intr.fx * cam_pts[j, 0] / cam_pts[j, 2] + intr.cx
                v = intr.fy * cam_pts[j, 1] / cam_pts[j, 2] + intr.cy
                for level in self.pyr.levels(ci):
                    pos = np.array([u, v]) / level.stride
                    inside = 0 <= pos[0] <= level.width - 1 and 0 <= pos[1] <= level.height - 1
                    border = min(
                        abs(pos[0]), abs(level.width - 1 - pos[0]),
                        abs(pos[1]), abs(level.height - 1 - pos[1]),
                    )
                    if not inside:
                        margin = min(margin, border)
                        continue
                    frac = np.abs(pos - np.round(pos))
                    margin = min(margin, float(frac.min()), border)
        return float(margin)


def grad_check(
    seed: int = 0,
    eps: float = 1e-4,
    tol: float = 1e-6,
    probes: int = 32,
    dim: int = 16,
    k: int = 4,
    components: Sequence[str] = ("offset", "weight", "query"),
) -> GradCheckReport:
    """Compare analytic gradients of the propagation loss against central
    finite differences.

    Positions that land on (or too close to) a bilinear kink are jittered by
    a small deterministic amount and retried; jitters are counted in the
    report.  Relative deviation is |analytic - fd| / (1 + |analytic|).
    """
    if eps <= 0:
        raise DecoderError(f"eps must be positive, got {eps}")
    from .synth import AnalyticField, gen_rig, render_pyramid

    rig = gen_rig("nuscenes-like")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(40,))))
    channels = 4
    fld = AnalyticField(
        a=rng.uniform(-1, 1, channels),
        b=rng.uniform(-1, 1, channels) * 0.01,
        c=rng.uniform(-1, 1, channels) * 0.01,
        d=rng.uniform(-1, 1, channels) * 1e-5,
    )
    pyr = render_pyramid(fld, rig, strides=(8, 16))
    bounds = SceneBounds(lo=(5.0, -6.0, 0.5), hi=(25.0, 6.0, 2.5))
    net_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(41,))))
    probe = _GradProbe(
        pyr=pyr,
        rig=rig,
        ref_net=Mlp.seeded([dim, dim, 3], net_rng),
        offset_net=Mlp.seeded([dim, dim, 3 * k], net_rng),
        weight_net=Mlp.seeded([dim, k], net_rng),
        bounds=bounds,
        offset_scale=1.0,
        k=k,
    )
    stats = {name: [0, 0, 0.0, 0.0] for name in components}  # checked, jittered, abs, rel
    kink_margin = 1e-3

    for _ in range(probes):
        q = rng.uniform(-1.0, 1.0, size=dim)
        jittered = 0
        for _attempt in range(8):
            c, offsets, weights = probe.derive(q)
            if probe.min_level_margin(c + offsets) > kink_margin:
                break
            q = q + rng.uniform(-0.05, 0.05, size=dim)
            jittered += 1
        for slot in stats.values():
            slot[1] += jittered
        grad_offsets, grad_weights, grad_q = probe.analytic(q)
        c, offsets, weights = probe.derive(q)

        if "offset" in stats:
            for j in range(k):
                for axis in range(3):
                    step = np.zeros((k, 3))
                    step[j, axis] = eps
                    lp = probe.loss_free(q, c, offsets + step, weights)
                    lm = probe.loss_free(q, c, offsets - step, weights)
                    fd = (lp - lm) / (2 * eps)
                    _record(stats["offset"], grad_offsets[j, axis], fd)
        if "weight" in stats:
            for j in range(k):
                step = np.zeros(k)
                step[j] = eps
                lp = probe.loss_free(q, c, offsets, weights + step)
                lm = probe.loss_free(q, c, offsets, weights - step)
                fd = (lp - lm) / (2 * eps)
                _record(stats["weight"], grad_weights[j], fd)
        if "query" in stats:
            for idx in range(dim):
                step = np.zeros(dim)
                step[idx] = eps
                fd = (probe.loss_query(q + step) - probe.loss_query(q - step)) / (2 * eps)
                _record(stats["query"], grad_q[idx], fd)

    reports = tuple(
        ComponentReport(
            component=name,
            n_checked=vals[0],
            n_jittered=vals[1],
            max_abs_dev=vals[2],
            max_rel_dev=vals[3],
            tol=tol,
        )
        for name, vals in stats.items()
    )
    return GradCheckReport(components=reports)


def _record(slot: list, analytic: float, fd: float) -> None:
    dev = abs(analytic - fd)
    slot[0] += 1
    slot[2] = max(slot[2], dev)
    slot[3] = max(slot[3], dev / (1.0 + abs(analytic)))
