"""Edge convolution with attentional aggregation over a dynamic graph.

Per edge (i, j) the message is a two-layer MLP of concat(f_i, f_j - f_i),
leaky-ReLU 0.2 throughout. Aggregation is a learned softmax over the
neighborhood: the logit of edge (i, j) scores concat(self-context of i,
message m_ij) against a learned vector, where the self-context reuses the
message MLP applied to (f_i, 0). Points without neighbors emit zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pcu4d import autodiff as ad
from pcu4d import geometry


@dataclass
class EdgeConvAttnParams:
    """Weights of one attentional edge convolution layer."""

    w1: np.ndarray    # (2*C_in, C_hidden)
    b1: np.ndarray    # (C_hidden,)
    w2: np.ndarray    # (C_hidden, C_out)
    b2: np.ndarray    # (C_out,)
    attn: np.ndarray  # (2*C_out,)
    k: int            # graph degree

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.shape[0]:
            raise ValueError("w1/b1 shape mismatch")
        if self.w2.shape != (self.w1.shape[1], self.b2.shape[0]):
            raise ValueError("w2/b2 shape mismatch")
        if self.attn.shape != (2 * self.c_out,):
            raise ValueError("attn must have length 2*C_out")
        for arr in (self.w1, self.b1, self.w2, self.b2, self.attn):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite parameter")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def c_in(self) -> int:
        return self.w1.shape[0] // 2

    @property
    def c_out(self) -> int:
        return self.w2.shape[1]

    def named_tensors(self, prefix: str = "") -> dict:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
                f"{prefix}w2": self.w2, f"{prefix}b2": self.b2,
                f"{prefix}attn": self.attn}

    def load_tensors(self, tensors: dict, prefix: str = "") -> None:
        self.w1 = tensors[f"{prefix}w1"]
        self.b1 = tensors[f"{prefix}b1"]
        self.w2 = tensors[f"{prefix}w2"]
        self.b2 = tensors[f"{prefix}b2"]
        self.attn = tensors[f"{prefix}attn"]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).

    Draws are quantized to float32 granularity so freshly initialized
    parameters survive the float32 checkpoint format bit-exactly.
    """
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=shape)
    return w.astype(np.float32).astype(np.float64)


def layer_init(c_in: int, c_hidden: int, c_out: int, k: int,
               rng: np.random.Generator) -> EdgeConvAttnParams:
    """Glorot-uniform weights, zero biases, deterministic given the rng."""
    return EdgeConvAttnParams(
        w1=glorot(rng, 2 * c_in, c_hidden, (2 * c_in, c_hidden)),
        b1=np.zeros(c_hidden),
        w2=glorot(rng, c_hidden, c_out, (c_hidden, c_out)),
        b2=np.zeros(c_out),
        attn=glorot(rng, 2 * c_out, 1, (2 * c_out,)),
        k=k,
    )


def build_dynamic_graph(features: np.ndarray, k: int) -> geometry.NeighborList:
    """k-NN graph in the current feature space (all columns, ties by index)."""
    return geometry.knn(np.asarray(features, dtype=np.float64), k=k,
                        metric_dims="xyzt")


def edge_messages_node(feats: ad.Node, centers, neighbors,
                       w1, b1, w2, b2, slope: float = 0.2) -> ad.Node:
    """Per-edge MLP messages m_ij for flat edge arrays (centers, neighbors)."""
    f_i = ad.gather_rows(feats, centers)
    f_j = ad.gather_rows(feats, neighbors)
    x = ad.concat_cols([f_i, ad.sub(f_j, f_i)])
    h = ad.leaky_relu(ad.add(ad.matmul(x, w1), b1), slope)
    return ad.leaky_relu(ad.add(ad.matmul(h, w2), b2), slope)


def _attention_alpha(feats: ad.Node, msgs: ad.Node, centers, leaves: dict,
                     n: int, slope: float) -> ad.Node:
    """Softmax attention weights per edge (self-context scored with messages)."""
    zero = np.zeros_like(feats.value)
    ctx_in = ad.concat_cols([feats, zero])
    ctx_h = ad.leaky_relu(ad.add(ad.matmul(ctx_in, leaves["w1"]), leaves["b1"]),
                          slope)
    ctx = ad.leaky_relu(ad.add(ad.matmul(ctx_h, leaves["w2"]), leaves["b2"]),
                        slope)
    scored = ad.concat_cols([ad.gather_rows(ctx, centers), msgs])
    attn_col = ad.reshape(leaves["attn"], (-1, 1))
    logits = ad.reshape(ad.leaky_relu(ad.matmul(scored, attn_col), slope), (-1,))
    return ad.segment_softmax(logits, centers, n)


def edge_conv_attention_node(feats: ad.Node, graph: geometry.NeighborList,
                             leaves: dict, use_attention: bool = True,
                             slope: float = 0.2) -> ad.Node:
    """Tape forward of one layer; leaves maps w1/b1/w2/b2/attn to Nodes."""
    n = feats.value.shape[0]
    centers, neighbors = graph.edges()
    msgs = edge_messages_node(feats, centers, neighbors,
                              leaves["w1"], leaves["b1"],
                              leaves["w2"], leaves["b2"], slope)
    if not use_attention:
        return ad.segment_mean(msgs, centers, n)
    alpha = _attention_alpha(feats, msgs, centers, leaves, n, slope)
    weighted = ad.mul(msgs, ad.reshape(alpha, (-1, 1)))
    return ad.segment_sum(weighted, centers, n)


def param_leaves(tape: ad.Tape, params, prefix: str = "") -> dict:
    """Create one named tape leaf per parameter tensor."""
    return {name.removeprefix(prefix): tape.leaf(value, name=name)
            for name, value in params.named_tensors(prefix).items()}


def edge_conv_attention_forward(features: np.ndarray,
                                params: EdgeConvAttnParams,
                                graph: geometry.NeighborList | None = None,
                                use_attention: bool = True) -> np.ndarray:
    """Numeric forward pass; builds the graph with params.k when not given."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[1] != params.c_in:
        raise ValueError(f"feature width {feats.shape[1]} != C_in {params.c_in}")
    if graph is None:
        graph = build_dynamic_graph(feats, params.k)
    tape = ad.Tape()
    leaf = tape.leaf(feats)
    leaves = param_leaves(tape, params)
    return edge_conv_attention_node(leaf, graph, leaves,
                                    use_attention=use_attention).value


def attention_weights(features: np.ndarray, params: EdgeConvAttnParams,
                      graph: geometry.NeighborList | None = None) -> tuple:
    """Edge list and softmax weights, for inspection and tests."""
    feats = np.asarray(features, dtype=np.float64)
    if graph is None:
        graph = build_dynamic_graph(feats, params.k)
    centers, neighbors = graph.edges()
    tape = ad.Tape()
    leaf = tape.leaf(feats)
    leaves = param_leaves(tape, params)
    msgs = edge_messages_node(leaf, centers, neighbors,
                              leaves["w1"], leaves["b1"],
                              leaves["w2"], leaves["b2"])
    alpha = _attention_alpha(leaf, msgs, centers, leaves, feats.shape[0], 0.2)
    return centers, neighbors, alpha.value
