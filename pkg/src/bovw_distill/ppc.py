"""Pixel-to-propagation consistency (PPC) pretraining.

Two augmented views of an image go through a regular encoder (backbone +
projection) and a momentum copy. Every pixel of the regular projection is
smoothed by attending to the other pixels of its view (``propagate``) and
pulled towards the momentum feature of the matching pixel in the other view.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .backbone import ConvBackbone
from .numerics import (
    BatchNorm,
    Conv2d,
    Module,
    ReLU,
    Sequential,
    ShapeError,
    Tensor,
    crop_and_resize,
    ensure_tensor,
    l2_normalize,
    no_grad,
    where,
)


# -- networks ---------------------------------------------------------------


def projection_head(in_channels: int, dim: int, rng: np.random.Generator) -> Sequential:
    return Sequential(
        Conv2d(in_channels, dim, 1, rng, bias=False),
        BatchNorm(dim),
        ReLU(),
        Conv2d(dim, dim, 1, rng),
    )


class PixelPropagation(Module):
    """Feature transform applied to the attended pixels: conv1x1 -> BN -> ReLU -> conv1x1."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.transform = Sequential(
            Conv2d(dim, dim, 1, rng, bias=False),
            BatchNorm(dim),
            ReLU(),
            Conv2d(dim, dim, 1, rng),
        )

    @property
    def dim(self) -> int:
        return self.transform[0].in_channels

    def forward(self, features: Tensor) -> Tensor:
        return propagate(features, self)


def propagate(features: Tensor, module: PixelPropagation) -> Tensor:
    """q(x_i) = sum_j max(cos(x_i, x_j), 0)**2 * transform(x_j), over the cells of each view.

    features: (N, D, H, W) or (D, H, W); returns the same shape.
    """
    features = ensure_tensor(features)
    squeeze = features.ndim == 3
    if squeeze:
        features = features.reshape(1, *features.shape)
    n, d, h, w = features.shape
    if d != module.dim:
        raise ShapeError(f"propagate: features {features.shape} do not match module dimension {module.dim}")
    flat = features.reshape(n, d, h * w)
    unit = l2_normalize(flat, axis=1)
    sim = unit.transpose(0, 2, 1) @ unit  # (N, L, L)
    weights = sim.relu() ** 2
    transformed = module.transform(features).reshape(n, d, h * w)
    out = (transformed @ weights.transpose(0, 2, 1)).reshape(n, d, h, w)
    return out.reshape(d, h, w) if squeeze else out


class RegularEncoder(Module):
    def __init__(self, backbone: ConvBackbone, dim: int, rng: np.random.Generator):
        super().__init__()
        self.backbone = backbone
        self.projection = projection_head(backbone.out_channels, dim, rng)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        feats = self.backbone(x)
        return feats, self.projection(feats)


class EncoderPair(Module):
    """Regular encoder plus a momentum copy updated only by exponential averaging."""

    def __init__(self, regular: RegularEncoder, momentum: float = 0.99):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum coefficient must lie in [0, 1], got {momentum}")
        self.regular = regular
        self.momentum_encoder = copy.deepcopy(regular)
        self.momentum_encoder.requires_grad_(False)
        self.m = momentum

    def trainable_parameters(self):
        return list(self.regular.named_parameters("regular."))

    def momentum_forward(self, x) -> Tensor:
        with no_grad():
            _, proj = self.momentum_encoder(x)
        return proj


def momentum_update(encoders: EncoderPair) -> None:
    """theta_m <- m * theta_m + (1 - m) * theta_r for every parameter."""
    m = encoders.m
    reg = list(encoders.regular.named_parameters())
    mom = list(encoders.momentum_encoder.named_parameters())
    if len(reg) != len(mom):
        raise ShapeError("momentum_update: encoders have different parameter counts")
    for (name, pr), (_, pm) in zip(reg, mom):
        if pr.shape != pm.shape:
            raise ShapeError(f"momentum_update: {name} shapes {pm.shape} and {pr.shape} differ")
        pm.data *= m
        pm.data += (1.0 - m) * pr.data


# -- views and correspondence --------------------------------------------------


@dataclass
class AugConfig:
    scale_min: float = 0.6
    scale_max: float = 1.0
    ratio_min: float = 3.0 / 4.0
    ratio_max: float = 4.0 / 3.0
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    blur_prob: float = 0.0
    solarize_prob: float = 0.0


@dataclass(frozen=True)
class ViewGeometry:
    """Source-image box (x0, y0, x1, y1) that a view was resampled from."""

    box: tuple
    flipped: bool
    out_size: int


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    geom1: ViewGeometry
    geom2: ViewGeometry
    correspondence: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.intp))

    def swapped(self) -> "ViewPair":
        return ViewPair(self.view2, self.view1, self.geom2, self.geom1, self.correspondence[:, ::-1].copy())


def cell_centers(geom: ViewGeometry, grid: int) -> np.ndarray:
    """Source-image (x, y) of every feature-cell center, row-major, shape (grid*grid, 2)."""
    x0, y0, x1, y1 = geom.box
    t = (np.arange(grid) + 0.5) / grid  # fraction across the view
    tx = 1.0 - t if geom.flipped else t
    xs = x0 + tx * (x1 - x0)
    ys = y0 + t * (y1 - y0)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def bin_diagonal(geom: ViewGeometry, grid: int) -> float:
    x0, y0, x1, y1 = geom.box
    return float(np.hypot((x1 - x0) / grid, (y1 - y0) / grid))


def match_cells(geom1: ViewGeometry, geom2: ViewGeometry, grid: int, tau_ratio: float = 0.7) -> np.ndarray:
    """Pairs (cell in view 1, cell in view 2) whose source centers are within tau.

    tau = tau_ratio * the larger of the two views' bin diagonals.
    """
    c1, c2 = cell_centers(geom1, grid), cell_centers(geom2, grid)
    dist = np.linalg.norm(c1[:, None, :] - c2[None, :, :], axis=-1)
    tau = tau_ratio * max(bin_diagonal(geom1, grid), bin_diagonal(geom2, grid))
    i, j = np.nonzero(dist <= tau)
    return np.stack([i, j], axis=1).astype(np.intp)


def render_view(image: np.ndarray, geom: ViewGeometry) -> np.ndarray:
    with no_grad():
        view = crop_and_resize(Tensor._wrap(image), geom.box, geom.out_size, geom.out_size).data
    return view[..., ::-1].copy() if geom.flipped else view


def _sample_box(rng: np.random.Generator, h: int, w: int, cfg: AugConfig) -> tuple:
    area = h * w * rng.uniform(cfg.scale_min, cfg.scale_max)
    ratio = np.exp(rng.uniform(np.log(cfg.ratio_min), np.log(cfg.ratio_max)))
    cw = min(np.sqrt(area * ratio), w)
    ch = min(np.sqrt(area / ratio), h)
    x0 = rng.uniform(0, w - cw)
    y0 = rng.uniform(0, h - ch)
    return (x0, y0, x0 + cw, y0 + ch)


def _photometric(view: np.ndarray, rng: np.random.Generator, cfg: AugConfig) -> np.ndarray:
    b = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    view = view * b
    mu = view.mean()
    view = (view - mu) * c + mu
    if cfg.blur_prob and rng.random() < cfg.blur_prob:
        view = gaussian_filter(view, sigma=(0, rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)))
    if cfg.solarize_prob and rng.random() < cfg.solarize_prob:
        view = np.where(view >= 0.5, 1.0 - view, view)
    return np.clip(view, 0.0, 1.0)


def generate_views(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: AugConfig | None = None,
    out_size: int | None = None,
    grid: int = 4,
    tau_ratio: float = 0.7,
) -> ViewPair:
    cfg = cfg or AugConfig()
    _, h, w = image.shape
    out_size = out_size or h
    geoms = []
    views = []
    for _ in range(2):
        g = ViewGeometry(_sample_box(rng, h, w, cfg), bool(rng.random() < cfg.flip_prob), out_size)
        geoms.append(g)
        views.append(_photometric(render_view(image, g), rng, cfg))
    return ViewPair(views[0], views[1], geoms[0], geoms[1], match_cells(geoms[0], geoms[1], grid, tau_ratio))


def views_from_geometry(image: np.ndarray, geom1: ViewGeometry, geom2: ViewGeometry, grid: int = 4, tau_ratio: float = 0.7) -> ViewPair:
    """Deterministic views (no photometric change) for explicit geometries."""
    return ViewPair(
        render_view(image, geom1), render_view(image, geom2), geom1, geom2, match_cells(geom1, geom2, grid, tau_ratio)
    )


# -- loss --------------------------------------------------------------------------


def ppc_loss_from_features(
    q: Tensor, target: Tensor, pairs: list[tuple[int, int, np.ndarray]]
) -> tuple[Tensor, int]:
    """Average of 2 - cos(q1_i, k2_j) - cos(q2_j, k1_i) over all matched cells.

    q, target: (N, D, H, W) propagated regular features and momentum features.
    pairs: (view-1 batch index, view-2 batch index, (P, 2) cell correspondence).
    Returns (loss, number of matched pairs); the loss is 0 when nothing matched.
    """
    n, d = q.shape[:2]
    qf = q.reshape(n, d, -1).transpose(0, 2, 1)  # (N, L, D)
    tf = ensure_tensor(target).detach().reshape(n, d, -1).transpose(0, 2, 1)
    a_idx, b_idx, i_idx, j_idx = [], [], [], []
    for a, b, corr in pairs:
        if len(corr) == 0:
            continue
        a_idx.append(np.full(len(corr), a))
        b_idx.append(np.full(len(corr), b))
        i_idx.append(corr[:, 0])
        j_idx.append(corr[:, 1])
    if not a_idx:
        return Tensor(0.0), 0
    a_arr, b_arr = np.concatenate(a_idx), np.concatenate(b_idx)
    i_arr, j_arr = np.concatenate(i_idx), np.concatenate(j_idx)
    q1 = l2_normalize(qf[a_arr, i_arr], axis=-1)
    q2 = l2_normalize(qf[b_arr, j_arr], axis=-1)
    k1 = l2_normalize(tf[a_arr, i_arr], axis=-1)
    k2 = l2_normalize(tf[b_arr, j_arr], axis=-1)
    # for unit vectors 1 - cos(a, b) = |a - b|^2 / 2; the distance form is exactly
    # zero for identical directions, where 2 - cos - cos would cancel
    loss = (_half_sq_dist(q1, k2) + _half_sq_dist(q2, k1)).mean()
    return loss, len(a_arr)


def _half_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    d = (diff * diff).sum(axis=-1) * 0.5
    # rounding in the normalization can overshoot the antipodal value 2 by an ulp
    return where(d.data > 2.0, Tensor(np.full(d.shape, 2.0)), d)


def stack_views(pairs: list[ViewPair]) -> np.ndarray:
    """Batch layout used throughout: all first views, then all second views."""
    return np.concatenate([np.stack([p.view1 for p in pairs]), np.stack([p.view2 for p in pairs])])


def pair_index(pairs: list[ViewPair]) -> list[tuple[int, int, np.ndarray]]:
    b = len(pairs)
    return [(i, b + i, p.correspondence) for i, p in enumerate(pairs)]


def ppc_loss(pairs: list[ViewPair], encoders: EncoderPair, module: PixelPropagation) -> tuple[Tensor, int]:
    """PPC loss over a batch of view pairs.

    Both views pass the regular encoder (with propagation) and the momentum
    encoder, so each serves once as query and once as target. Returns
    (loss, matched pair count); gradients reach only the regular branch.
    """
    x = Tensor._wrap(stack_views(pairs))
    _, proj = encoders.regular(x)
    q = propagate(proj, module)
    target = encoders.momentum_forward(x)
    return ppc_loss_from_features(q, target, pair_index(pairs))
