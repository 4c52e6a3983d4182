"""Chamfer distance, neighborhood density, and least-squares GAN losses.

Numeric entry points (chamfer, density, density_loss, lsgan_*) operate on
plain arrays; the *_node variants build the same quantities on a tape for
training. Nearest-neighbor assignments are fixed at forward time, so the
Chamfer gradient flows through the forward-time argmin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcu4d import autodiff as ad
from pcu4d import geometry

_CHUNK = 512


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three generator loss terms."""

    chamfer: float = 1.0
    density: float = 0.5
    adversarial: float = 0.1

    def __post_init__(self):
        if min(self.chamfer, self.density, self.adversarial) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LsganConstants:
    """Least-squares GAN targets: a for fakes, b for reals, c for the generator."""

    a: float = 0.0
    b: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("fake and real targets must differ")


@dataclass(frozen=True)
class DensityConfig:
    radius: float = 0.1
    n_max: int = 32

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


def nearest_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index in b of the nearest row per row of a, ties by lower index."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a), dtype=np.intp)
    for lo in range(0, len(a), _CHUNK):
        chunk = a[lo:lo + _CHUNK]
        diff = chunk[:, None, :] - b[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out[lo:lo + len(chunk)] = np.argmin(d2, axis=1)  # first min: lowest index
    return out


def chamfer(p_r, p_t, normalized: bool = False) -> float:
    """Bidirectional sum of squared nearest-neighbor distances.

    With normalized=True each directional sum is divided by its set size
    (the cross-size-comparable metric variant used for reporting).
    """
    p_r = np.asarray(p_r, dtype=np.float64)
    p_t = np.asarray(p_t, dtype=np.float64)
    if len(p_r) == 0 or len(p_t) == 0:
        raise ValueError("chamfer requires nonempty point sets")
    fwd_idx = nearest_indices(p_r, p_t)
    bwd_idx = nearest_indices(p_t, p_r)
    fwd = float(np.sum((p_r - p_t[fwd_idx]) ** 2))
    bwd = float(np.sum((p_t - p_r[bwd_idx]) ** 2))
    if normalized:
        return fwd / len(p_r) + bwd / len(p_t)
    return fwd + bwd


def chamfer_node(p_r: ad.Node, p_t: np.ndarray, normalized: bool = False) -> ad.Node:
    """Tape version of chamfer; p_t is a constant target."""
    p_t = np.asarray(p_t, dtype=np.float64)
    fwd_idx = nearest_indices(p_r.value, p_t)
    bwd_idx = nearest_indices(p_t, p_r.value)
    fwd = ad.sum_all(ad.square(ad.sub(p_r, p_t[fwd_idx])))
    bwd = ad.sum_all(ad.square(ad.sub(ad.gather_rows(p_r, bwd_idx), p_t)))
    if normalized:
        return fwd * (1.0 / len(p_r.value)) + bwd * (1.0 / len(p_t))
    return fwd + bwd


def density(points, config: DensityConfig) -> np.ndarray:
    """Per-point neighbor count within config.radius, divided by n_max.

    The point itself is excluded, consistent with the neighbor queries.
    """
    pts = np.asarray(points, dtype=np.float64)
    nl = geometry.ball_query(pts, radius=config.radius, max_neighbors=len(pts))
    counts = np.array([len(nb) for nb in nl.neighbors], dtype=np.float64)
    return counts / config.n_max


def density_loss(p_r, p_t, config: DensityConfig) -> float:
    """Squared density mismatch accumulated over spatial nearest matches.

    For each point the partner is its spatially nearest point in the other
    set (ties by index); both directions are summed. The neighbor count is
    a step function of the coordinates, so this loss is flat almost
    everywhere; it is logged and weighted but contributes no gradient.
    """
    p_r = np.asarray(p_r, dtype=np.float64)
    p_t = np.asarray(p_t, dtype=np.float64)
    if len(p_r) == 0 or len(p_t) == 0:
        raise ValueError("density_loss requires nonempty point sets")
    d_r = density(p_r, config)
    d_t = density(p_t, config)
    fwd = float(np.sum((d_r - d_t[nearest_indices(p_r, p_t)]) ** 2))
    bwd = float(np.sum((d_t - d_r[nearest_indices(p_t, p_r)]) ** 2))
    return fwd + bwd


def lsgan_generator_loss(scores_fake, constants: LsganConstants) -> float:
    """0.5 * mean((score - c)^2) over the fake scores."""
    s = np.atleast_1d(np.asarray(scores_fake, dtype=np.float64))
    if s.size == 0:
        raise ValueError("need at least one score")
    return 0.5 * float(np.mean((s - constants.c) ** 2))


def lsgan_generator_node(scores_fake: ad.Node, constants: LsganConstants) -> ad.Node:
    return ad.mean_all(ad.square(ad.sub(scores_fake, constants.c))) * 0.5


def lsgan_discriminator_loss(scores_real, scores_fake,
                             constants: LsganConstants) -> float:
    """0.5 * mean((real - b)^2) + 0.5 * mean((fake - a)^2)."""
    real = np.atleast_1d(np.asarray(scores_real, dtype=np.float64))
    fake = np.atleast_1d(np.asarray(scores_fake, dtype=np.float64))
    if real.size == 0 or fake.size == 0:
        raise ValueError("need at least one real and one fake score")
    return (0.5 * float(np.mean((real - constants.b) ** 2))
            + 0.5 * float(np.mean((fake - constants.a) ** 2)))


def lsgan_discriminator_node(scores_real: ad.Node, scores_fake: ad.Node,
                             constants: LsganConstants) -> ad.Node:
    real = ad.mean_all(ad.square(ad.sub(scores_real, constants.b))) * 0.5
    fake = ad.mean_all(ad.square(ad.sub(scores_fake, constants.a))) * 0.5
    return real + fake


def total_generator_loss(p_r, p_t, scores_fake, weights: LossWeights,
                         constants: LsganConstants,
                         density_cfg: DensityConfig) -> tuple[float, dict]:
    """Weighted generator objective plus a per-component breakdown."""
    l_cd = chamfer(p_r, p_t)
    l_den = density_loss(p_r, p_t, density_cfg)
    l_adv = lsgan_generator_loss(scores_fake, constants)
    total = (weights.chamfer * l_cd + weights.density * l_den
             + weights.adversarial * l_adv)
    return total, {"l_cd": l_cd, "l_density": l_den, "l_adv_g": l_adv}
