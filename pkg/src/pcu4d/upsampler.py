"""The generator: attentional edge convolutions, parallel double sampling,
and residual vertex synthesis.

The parallel double sampling (PDS) head runs two mean-aggregated graph
convolutions side by side: branch A over ball neighborhoods (radius
r_small) thinned by farthest point sampling, branch B over k nearest
neighbors. Their outputs are concatenated and fused by a linear map, after
which a linear offset head emits S coordinate offsets per input point;
each output vertex is input_xyz + offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from pcu4d import autodiff as ad
from pcu4d import geometry, layers
from pcu4d.geometry import FusedCloud
from pcu4d.layers import EdgeConvAttnParams, glorot, layer_init


@dataclass(frozen=True)
class PdsConfig:
    """Geometry and widths of the parallel double sampling head."""

    r_small: float = 0.06
    r_large: float = 0.1
    s: float = 0.25            # FPS keep fraction inside each ball
    k: int = 9
    c_in: int = 64
    c_out: int = 64
    scale: int = 4             # S, the upscale factor
    max_ball: int = 64         # worst-case cap on ball neighbors

    def __post_init__(self):
        if not (0 < self.s <= 1):
            raise ValueError("s must be in (0, 1]")
        if self.r_small <= 0:
            raise ValueError("r_small must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.scale < 1 or int(self.scale) != self.scale:
            raise ValueError("scale must be a positive integer")


@dataclass(frozen=True)
class UpscaleSpec:
    """Input shape (L points, n frames) and scale S; H = S * L * n."""

    L: int
    n: int
    S: int

    @property
    def H(self) -> int:
        return self.S * self.L * self.n


@dataclass(frozen=True)
class GeneratorConfig:
    """Default architecture: 4 -> 32 -> 64 -> 64, PDS 64 -> 64, head S*3."""

    layer_widths: tuple = ((4, 32, 32), (32, 64, 64), (64, 64, 64))
    k: int = 9
    pds: PdsConfig = field(default_factory=PdsConfig)
    rebuild_graphs: bool = True   # recompute k-NN in feature space per layer

    def with_scale(self, scale: int) -> "GeneratorConfig":
        return replace(self, pds=replace(self.pds, scale=scale))


@dataclass
class EdgeMlpParams:
    """Two-layer message MLP of one PDS branch."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def named_tensors(self, prefix: str = "") -> dict:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
                f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}

    def load_tensors(self, tensors: dict, prefix: str = "") -> None:
        self.w1 = tensors[f"{prefix}w1"]
        self.b1 = tensors[f"{prefix}b1"]
        self.w2 = tensors[f"{prefix}w2"]
        self.b2 = tensors[f"{prefix}b2"]


@dataclass
class PdsParams:
    branch_a: EdgeMlpParams
    branch_b: EdgeMlpParams
    fuse_w: np.ndarray   # (2*C, C_out)
    fuse_b: np.ndarray   # (C_out,)

    def named_tensors(self, prefix: str = "") -> dict:
        out = self.branch_a.named_tensors(f"{prefix}a.")
        out.update(self.branch_b.named_tensors(f"{prefix}b."))
        out[f"{prefix}fuse_w"] = self.fuse_w
        out[f"{prefix}fuse_b"] = self.fuse_b
        return out

    def load_tensors(self, tensors: dict, prefix: str = "") -> None:
        self.branch_a.load_tensors(tensors, f"{prefix}a.")
        self.branch_b.load_tensors(tensors, f"{prefix}b.")
        self.fuse_w = tensors[f"{prefix}fuse_w"]
        self.fuse_b = tensors[f"{prefix}fuse_b"]


@dataclass
class GeneratorParams:
    layers: list            # of EdgeConvAttnParams
    pds: PdsParams
    head_w: np.ndarray      # (C_out, S*3)
    head_b: np.ndarray      # (S*3,)
    config: GeneratorConfig

    def named_tensors(self, prefix: str = "") -> dict:
        out: dict = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_tensors(f"{prefix}layers.{i}."))
        out.update(self.pds.named_tensors(f"{prefix}pds."))
        out[f"{prefix}head_w"] = self.head_w
        out[f"{prefix}head_b"] = self.head_b
        return out

    def load_tensors(self, tensors: dict, prefix: str = "") -> None:
        for i, layer in enumerate(self.layers):
            layer.load_tensors(tensors, f"{prefix}layers.{i}.")
        self.pds.load_tensors(tensors, f"{prefix}pds.")
        self.head_w = tensors[f"{prefix}head_w"]
        self.head_b = tensors[f"{prefix}head_b"]

    @property
    def scale(self) -> int:
        return self.head_w.shape[1] // 3


def _init_edge_mlp(c_in: int, c_hidden: int, c_out: int,
                   rng: np.random.Generator) -> EdgeMlpParams:
    return EdgeMlpParams(
        w1=glorot(rng, 2 * c_in, c_hidden, (2 * c_in, c_hidden)),
        b1=np.zeros(c_hidden),
        w2=glorot(rng, c_hidden, c_out, (c_hidden, c_out)),
        b2=np.zeros(c_out),
    )


def init_generator(config: GeneratorConfig, seed: int) -> GeneratorParams:
    rng = np.random.default_rng(seed)
    stack = [layer_init(ci, ch, co, config.k, rng)
             for ci, ch, co in config.layer_widths]
    pds_cfg = config.pds
    if config.layer_widths[-1][2] != pds_cfg.c_in:
        raise ValueError("last layer width must match PDS C_in")
    c = pds_cfg.c_in
    pds = PdsParams(
        branch_a=_init_edge_mlp(c, c, c, rng),
        branch_b=_init_edge_mlp(c, c, c, rng),
        fuse_w=glorot(rng, 2 * c, pds_cfg.c_out, (2 * c, pds_cfg.c_out)),
        fuse_b=np.zeros(pds_cfg.c_out),
    )
    head_w = glorot(rng, pds_cfg.c_out, 3 * pds_cfg.scale,
                    (pds_cfg.c_out, 3 * pds_cfg.scale))
    head_b = np.zeros(3 * pds_cfg.scale)
    return GeneratorParams(layers=stack, pds=pds, head_w=head_w,
                           head_b=head_b, config=config)


def _mean_branch_node(feats, leaves, prefix, centers, neighbors, n):
    msgs = layers.edge_messages_node(
        feats, centers, neighbors,
        leaves[f"{prefix}w1"], leaves[f"{prefix}b1"],
        leaves[f"{prefix}w2"], leaves[f"{prefix}b2"])
    return ad.segment_mean(msgs, centers, n)


def pds_edges(fused_points: np.ndarray, config: PdsConfig) -> tuple:
    """Neighbor structure of both branches, fixed at forward time.

    Branch A: ball neighbors (xyz, radius r_small) thinned per center by
    farthest point sampling at fraction s. Branch B: k nearest neighbors in
    (x, y, z, t).
    """
    balls = geometry.ball_query(fused_points, radius=config.r_small,
                                max_neighbors=config.max_ball)
    a_centers, a_neighbors = [], []
    for center, members in zip(balls.center_indices, balls.neighbors):
        if len(members) == 0:
            continue
        kept = geometry.fps(fused_points, fraction=config.s,
                            candidate_indices=members,
                            seed_rule="lexmin").center_indices
        a_centers.append(np.full(len(kept), center, dtype=np.intp))
        a_neighbors.append(kept)
    if a_centers:
        a_edges = (np.concatenate(a_centers), np.concatenate(a_neighbors))
    else:
        a_edges = (np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp))
    b_graph = geometry.knn(fused_points, k=config.k, metric_dims="xyzt")
    return a_edges, b_graph.edges()


def pds_node(feats: ad.Node, fused_points: np.ndarray, leaves: dict,
             config: PdsConfig) -> ad.Node:
    """Tape forward of the PDS head; leaves keyed a.w1 ... fuse_w/fuse_b."""
    n = feats.value.shape[0]
    (a_c, a_n), (b_c, b_n) = pds_edges(fused_points, config)
    branch_a = _mean_branch_node(feats, leaves, "a.", a_c, a_n, n)
    branch_b = _mean_branch_node(feats, leaves, "b.", b_c, b_n, n)
    cat = ad.concat_cols([branch_a, branch_b])
    return ad.add(ad.matmul(cat, leaves["fuse_w"]), leaves["fuse_b"])


def pds_forward(fused_points: np.ndarray, features: np.ndarray,
                params: PdsParams, config: PdsConfig) -> np.ndarray:
    """Numeric PDS evaluation on a fused (x, y, z, t) cloud."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[1] != config.c_in:
        raise ValueError(f"feature width {feats.shape[1]} != C_in {config.c_in}")
    tape = ad.Tape()
    leaf = tape.leaf(feats)
    leaves = layers.param_leaves(tape, params)
    return pds_node(leaf, np.asarray(fused_points, np.float64), leaves,
                    config).value


def generator_leaves(tape: ad.Tape, params: GeneratorParams) -> dict:
    return layers.param_leaves(tape, params)


def generator_node(tape: ad.Tape, fused: FusedCloud, params: GeneratorParams,
                   leaves: dict, use_attention: bool = True,
                   collect_features: list | None = None) -> ad.Node:
    """Tape forward pass: fused (x, y, z, t) cloud to (H, 3) vertices."""
    coords = fused.points
    n = coords.shape[0]
    cfg = params.config
    feats = tape.leaf(coords)  # input leaf: differentiable for tests
    graph = None
    for i, layer in enumerate(params.layers):
        if graph is None or cfg.rebuild_graphs:
            graph = layers.build_dynamic_graph(feats.value, layer.k)
        sub = {k.removeprefix(f"layers.{i}."): v for k, v in leaves.items()
               if k.startswith(f"layers.{i}.")}
        feats = layers.edge_conv_attention_node(feats, graph, sub,
                                                use_attention=use_attention)
        if collect_features is not None:
            collect_features.append(feats.value)
    pds_leaves = {k.removeprefix("pds."): v for k, v in leaves.items()
                  if k.startswith("pds.")}
    pds_out = pds_node(feats, coords, leaves=pds_leaves, config=cfg.pds)
    offsets = ad.add(ad.matmul(pds_out, leaves["head_w"]), leaves["head_b"])
    s = params.scale
    off3 = ad.reshape(offsets, (n * s, 3))
    base = np.repeat(coords[:, :3], s, axis=0)
    return ad.add(off3, base)


def generator_forward(fused: FusedCloud, params: GeneratorParams,
                      use_attention: bool = True,
                      collect_features: list | None = None) -> np.ndarray:
    """Upscale a fused cloud to S * L * n output vertices (numeric)."""
    tape = ad.Tape()
    leaves = generator_leaves(tape, params)
    node = generator_node(tape, fused, params, leaves,
                          use_attention=use_attention,
                          collect_features=collect_features)
    return node.value


def param_count(params) -> tuple[int, int]:
    """Scalar parameter count and its size at 4 bytes per parameter."""
    total = sum(int(np.size(t)) for t in params.named_tensors().values())
    return total, 4 * total


# ---------------------------------------------------------------------------
# checkpoint packing

_GEN_CONFIG_KEY = "gen.meta"


def generator_to_tensors(params: GeneratorParams) -> dict:
    out = params.named_tensors("gen.")
    cfg = params.config
    out[_GEN_CONFIG_KEY] = np.array(
        [cfg.pds.scale, cfg.k, cfg.pds.r_small, cfg.pds.r_large,
         cfg.pds.s, cfg.pds.max_ball, 1.0 if cfg.rebuild_graphs else 0.0],
        dtype=np.float64)
    return out


def generator_from_tensors(tensors: dict) -> GeneratorParams:
    meta = tensors[_GEN_CONFIG_KEY]
    scale, k = int(meta[0]), int(meta[1])
    n_layers = 0
    while f"gen.layers.{n_layers}.w1" in tensors:
        n_layers += 1
    if n_layers == 0:
        raise ValueError("checkpoint holds no generator layers")
    widths = []
    stack = []
    for i in range(n_layers):
        w1 = tensors[f"gen.layers.{i}.w1"]
        w2 = tensors[f"gen.layers.{i}.w2"]
        widths.append((w1.shape[0] // 2, w1.shape[1], w2.shape[1]))
        stack.append(EdgeConvAttnParams(
            w1=w1, b1=tensors[f"gen.layers.{i}.b1"], w2=w2,
            b2=tensors[f"gen.layers.{i}.b2"],
            attn=tensors[f"gen.layers.{i}.attn"], k=k))
    head_w = tensors["gen.head_w"]
    pds_cfg = PdsConfig(r_small=float(meta[2]), r_large=float(meta[3]),
                        s=float(meta[4]), k=k, c_in=widths[-1][2],
                        c_out=head_w.shape[0], scale=scale,
                        max_ball=int(meta[5]))
    config = GeneratorConfig(layer_widths=tuple(widths), k=k, pds=pds_cfg,
                             rebuild_graphs=bool(meta[6]))
    pds = PdsParams(
        branch_a=EdgeMlpParams(
            w1=tensors["gen.pds.a.w1"], b1=tensors["gen.pds.a.b1"],
            w2=tensors["gen.pds.a.w2"], b2=tensors["gen.pds.a.b2"]),
        branch_b=EdgeMlpParams(
            w1=tensors["gen.pds.b.w1"], b1=tensors["gen.pds.b.b1"],
            w2=tensors["gen.pds.b.w2"], b2=tensors["gen.pds.b.b2"]),
        fuse_w=tensors["gen.pds.fuse_w"], fuse_b=tensors["gen.pds.fuse_b"])
    return GeneratorParams(layers=stack, pds=pds, head_w=head_w,
                           head_b=tensors["gen.head_b"], config=config)
