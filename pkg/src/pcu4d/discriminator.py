"""Set-abstraction critic: hierarchical max-pooling to one realness score.

Each level keeps a farthest-point-sampled subset of centroids and
max-pools a per-point MLP over every centroid's ball neighborhood (the
centroid itself included, so the pool is never empty). Level 0 consumes
coordinates relative to the centroid; deeper levels consume the previous
features. A global max pool and a small linear head produce one raw score
per cloud; no squashing, as the least-squares objective uses raw outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcu4d import autodiff as ad
from pcu4d import geometry, layers
from pcu4d.layers import glorot


@dataclass(frozen=True)
class SetAbstractionConfig:
    keep_fraction: float
    radius: float
    widths: tuple  # per-point MLP widths, e.g. (3, 32, 64)
    max_ball: int = 64

    def __post_init__(self):
        if not (0 < self.keep_fraction <= 1):
            raise ValueError("keep_fraction must be in (0, 1]")
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if self.max_ball < 1:
            raise ValueError("max_ball must be >= 1")


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Two levels, then a 128 -> 64 -> 1 head; sized for desk-scale speed."""

    levels: tuple = (
        SetAbstractionConfig(keep_fraction=0.5, radius=0.1, widths=(3, 32, 64)),
        SetAbstractionConfig(keep_fraction=0.25, radius=0.2, widths=(64, 128)),
    )
    final_widths: tuple = (128, 64, 1)


@dataclass
class SetAbstractionParams:
    config: SetAbstractionConfig
    mlp: list  # of (w, b) pairs

    def named_tensors(self, prefix: str = "") -> dict:
        out = {}
        for i, (w, b) in enumerate(self.mlp):
            out[f"{prefix}mlp.{i}.w"] = w
            out[f"{prefix}mlp.{i}.b"] = b
        return out

    def load_tensors(self, tensors: dict, prefix: str = "") -> None:
        self.mlp = [(tensors[f"{prefix}mlp.{i}.w"], tensors[f"{prefix}mlp.{i}.b"])
                    for i in range(len(self.mlp))]


@dataclass
class DiscriminatorParams:
    levels: list  # of SetAbstractionParams
    final: list   # of (w, b) pairs

    def named_tensors(self, prefix: str = "") -> dict:
        out: dict = {}
        for i, level in enumerate(self.levels):
            out.update(level.named_tensors(f"{prefix}levels.{i}."))
        for i, (w, b) in enumerate(self.final):
            out[f"{prefix}final.{i}.w"] = w
            out[f"{prefix}final.{i}.b"] = b
        return out

    def load_tensors(self, tensors: dict, prefix: str = "") -> None:
        for i, level in enumerate(self.levels):
            level.load_tensors(tensors, f"{prefix}levels.{i}.")
        self.final = [(tensors[f"{prefix}final.{i}.w"],
                       tensors[f"{prefix}final.{i}.b"])
                      for i in range(len(self.final))]


def _init_mlp(widths, rng):
    return [(glorot(rng, a, b, (a, b)), np.zeros(b))
            for a, b in zip(widths[:-1], widths[1:])]


def init_discriminator(config: DiscriminatorConfig, seed: int) -> DiscriminatorParams:
    rng = np.random.default_rng(seed)
    levels = [SetAbstractionParams(config=lv, mlp=_init_mlp(lv.widths, rng))
              for lv in config.levels]
    final = _init_mlp(config.final_widths, rng)
    return DiscriminatorParams(levels=levels, final=final)


def _ball_members_with_self(xyz: np.ndarray, centroid_ids: np.ndarray,
                            radius: float, cap: int) -> tuple:
    """Flat (pool id, member index) arrays; each centroid joins its own ball."""
    if cap > 1 and len(xyz) > 1:
        balls = geometry.ball_query(xyz, radius=radius, max_neighbors=cap - 1,
                                    query_indices=centroid_ids)
        neighbor_lists = balls.neighbors
    else:
        neighbor_lists = [np.empty(0, dtype=np.intp) for _ in centroid_ids]
    pool_ids, members = [], []
    for pool, (center, nbrs) in enumerate(zip(centroid_ids, neighbor_lists)):
        group = np.concatenate([[center], nbrs]).astype(np.intp)
        pool_ids.append(np.full(len(group), pool, dtype=np.intp))
        members.append(group)
    return np.concatenate(pool_ids), np.concatenate(members)


def set_abstraction_node(pts: ad.Node, xyz: np.ndarray, feats: ad.Node | None,
                         level: SetAbstractionParams, leaves: dict) -> tuple:
    """One level on the tape.

    pts carries the original points (gradient path for the adversarial
    term); xyz holds the current centroid coordinates as plain values for
    the spatial queries. Returns (new pts node, new xyz, pooled features).
    """
    cfg = level.config
    # lexmin seed: centroid choice must not depend on point labels, or the
    # score would not be permutation invariant
    centroids = np.sort(geometry.fps(xyz, fraction=cfg.keep_fraction,
                                     seed_rule="lexmin").center_indices)
    pool_ids, members = _ball_members_with_self(xyz, centroids, cfg.radius,
                                                cfg.max_ball)
    if feats is None:
        h = ad.sub(ad.gather_rows(pts, members),
                   ad.gather_rows(pts, centroids[pool_ids]))
    else:
        h = ad.gather_rows(feats, members)
    for i in range(len(level.mlp)):
        w, b = leaves[f"mlp.{i}.w"], leaves[f"mlp.{i}.b"]
        h = ad.leaky_relu(ad.add(ad.matmul(h, w), b), 0.2)
    pooled = ad.segment_max(h, pool_ids, len(centroids))
    return ad.gather_rows(pts, centroids), xyz[centroids], pooled


def set_abstraction_level(points: np.ndarray, features: np.ndarray | None,
                          level: SetAbstractionParams) -> tuple:
    """Numeric single-level evaluation: (centroid cloud, pooled features)."""
    pts = np.asarray(points, dtype=np.float64)
    tape = ad.Tape()
    leaf = tape.leaf(pts)
    leaves = layers.param_leaves(tape, level)
    feat_node = tape.leaf(np.asarray(features, np.float64)) \
        if features is not None else None
    _, new_xyz, pooled = set_abstraction_node(leaf, pts, feat_node, level, leaves)
    return new_xyz, pooled.value


def discriminator_node(pts: ad.Node, params: DiscriminatorParams,
                       leaves: dict) -> ad.Node:
    """Tape forward: (N, 3) points node to one scalar score."""
    xyz = pts.value
    node: ad.Node = pts
    feats: ad.Node | None = None
    for i, level in enumerate(params.levels):
        sub = {k.removeprefix(f"levels.{i}."): v for k, v in leaves.items()
               if k.startswith(f"levels.{i}.")}
        node, xyz, feats = set_abstraction_node(node, xyz, feats, level, sub)
    pooled = ad.segment_max(feats, np.zeros(feats.value.shape[0], dtype=np.intp), 1)
    h = pooled
    last = len(params.final) - 1
    for i in range(len(params.final)):
        w, b = leaves[f"final.{i}.w"], leaves[f"final.{i}.b"]
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.leaky_relu(h, 0.2)
    return ad.reshape(h, ())


def discriminator_forward(points: np.ndarray,
                          params: DiscriminatorParams) -> float:
    """Numeric realness score of one xyz cloud."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a nonempty (N, 3) cloud")
    tape = ad.Tape()
    leaf = tape.leaf(pts)
    leaves = layers.param_leaves(tape, params)
    return float(discriminator_node(leaf, params, leaves).value)


# ---------------------------------------------------------------------------
# checkpoint packing

_DISC_META = "disc.meta"


def discriminator_to_tensors(params: DiscriminatorParams) -> dict:
    out = params.named_tensors("disc.")
    rows = [[lv.config.keep_fraction, lv.config.radius, lv.config.max_ball]
            for lv in params.levels]
    out[_DISC_META] = np.asarray(rows, dtype=np.float64)
    return out


def discriminator_from_tensors(tensors: dict) -> DiscriminatorParams:
    meta = np.atleast_2d(tensors[_DISC_META])
    levels = []
    for i in range(meta.shape[0]):
        mlp = []
        j = 0
        while f"disc.levels.{i}.mlp.{j}.w" in tensors:
            mlp.append((tensors[f"disc.levels.{i}.mlp.{j}.w"],
                        tensors[f"disc.levels.{i}.mlp.{j}.b"]))
            j += 1
        widths = (mlp[0][0].shape[0],) + tuple(w.shape[1] for w, _ in mlp)
        cfg = SetAbstractionConfig(keep_fraction=float(meta[i, 0]),
                                   radius=float(meta[i, 1]), widths=widths,
                                   max_ball=int(meta[i, 2]))
        levels.append(SetAbstractionParams(config=cfg, mlp=mlp))
    final = []
    j = 0
    while f"disc.final.{j}.w" in tensors:
        final.append((tensors[f"disc.final.{j}.w"], tensors[f"disc.final.{j}.b"]))
        j += 1
    if not levels or not final:
        raise ValueError("checkpoint holds no discriminator tensors")
    return DiscriminatorParams(levels=levels, final=final)
