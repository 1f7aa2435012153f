"""The shared n-argument activation network and its pretraining target."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

HIDDEN = 64
CELLS_PER_AXIS = 5
SUPPORTED_ARITIES = (1, 2, 3)


class InnerNet:
    """MLP ``n -> 64 -> 64 -> 1`` with ReLU hidden layers and a linear output.

    One instance is shared by every unit of the outer network that hosts it;
    there is exactly one storage per parameter.
    """

    param_names = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, arity: int, rng: np.random.Generator | None = None, conv_mode: bool = False):
        if arity not in SUPPORTED_ARITIES:
            raise ValueError(f"unsupported arity {arity}; expected one of {SUPPORTED_ARITIES}")
        self.arity = arity
        self.conv_mode = conv_mode
        rng = rng if rng is not None else ad.make_rng(0)
        self.w1 = ad.init_xavier((arity, HIDDEN), rng)
        self.b1 = Tensor(np.zeros(HIDDEN), requires_grad=True)
        self.w2 = ad.init_xavier((HIDDEN, HIDDEN), rng)
        self.b2 = Tensor(np.zeros(HIDDEN), requires_grad=True)
        self.w3 = ad.init_xavier((HIDDEN, 1), rng)
        self.b3 = Tensor(np.zeros(1), requires_grad=True)

    @staticmethod
    def count_params(arity: int) -> int:
        return (arity * HIDDEN + HIDDEN) + (HIDDEN * HIDDEN + HIDDEN) + (HIDDEN + 1)

    def parameters(self) -> list[Tensor]:
        return [getattr(self, k) for k in self.param_names]

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.param_names}

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def forward(self, x: Tensor) -> Tensor:
        """(N, n) -> (N, 1), recorded on the graph."""
        h = ad.relu(ad.matmul(x, self.w1) + self.b1)
        h = ad.relu(ad.matmul(h, self.w2) + self.b2)
        return ad.matmul(h, self.w3) + self.b3

    def forward_conv(self, x: Tensor) -> Tensor:
        """(N, n, H, W) -> (N, 1, H, W) as a stack of 1x1 convolutions."""
        k1 = ad.reshape(ad.transpose(self.w1, (1, 0)), (HIDDEN, self.arity, 1, 1))
        k2 = ad.reshape(ad.transpose(self.w2, (1, 0)), (HIDDEN, HIDDEN, 1, 1))
        k3 = ad.reshape(ad.transpose(self.w3, (1, 0)), (1, HIDDEN, 1, 1))
        h = ad.relu(ad.conv2d(x, k1, self.b1, padding=0))
        h = ad.relu(ad.conv2d(h, k2, self.b2, padding=0))
        return ad.conv2d(h, k3, self.b3, padding=0)

    def evaluate(self, points) -> np.ndarray:
        """Graph-free evaluation on an (N, n) array; returns shape (N,)."""
        x = np.asarray(points, dtype=np.float64).reshape(-1, self.arity)
        h = np.maximum(x @ self.w1.data + self.b1.data, 0.0)
        h = np.maximum(h @ self.w2.data + self.b2.data, 0.0)
        return (h @ self.w3.data + self.b3.data)[:, 0]

    __call__ = evaluate

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).data.copy() for k in self.param_names}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.param_names:
            p = getattr(self, k)
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"inner-net parameter {k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def apply_activation(net: InnerNet, preact: Tensor) -> Tensor:
    """Apply the shared inner net to contiguous blocks of ``net.arity`` features.

    MLP mode: (B, n*h) -> (B, h). Conv mode: (B, n*h, H, W) -> (B, h, H, W),
    every spatial position handled independently. Block i is features
    ``[n*i, n*i + n)``.
    """
    n = net.arity
    c = preact.shape[1] if preact.ndim >= 2 else 0
    if preact.ndim not in (2, 4) or c % n:
        raise ad.ShapeError(f"apply_activation: feature size {c} of {preact.shape} not divisible by arity {n}")
    h = c // n
    if preact.ndim == 2:
        b = preact.shape[0]
        out = net.forward(ad.reshape(preact, (b * h, n)))
        return ad.reshape(out, (b, h))
    b, _, hh, ww = preact.shape
    grouped = ad.reshape(preact, (b * h, n, hh, ww))
    if net.conv_mode:
        out = net.forward_conv(grouped)
        return ad.reshape(out, (b, h, hh, ww))
    flat = ad.reshape(ad.transpose(grouped, (0, 2, 3, 1)), (b * h * hh * ww, n))
    return ad.reshape(net.forward(flat), (b, h, hh, ww))


def preact_tuples(preact: np.ndarray, arity: int) -> np.ndarray:
    """Rows of activation arguments in site order (example, unit[, y, x])."""
    if preact.ndim == 2:
        return preact.reshape(-1, arity)
    b, c, hh, ww = preact.shape
    g = preact.reshape(b, c // arity, arity, hh, ww).transpose(0, 1, 3, 4, 2)
    return g.reshape(-1, arity)


# ---------------------------------------------------------------------------
# grids


def grid_axes(bounds, resolution) -> list[np.ndarray]:
    """Cell-centre coordinates per axis. ``lo == hi`` collapses that axis to one point."""
    bounds = [tuple(map(float, b)) for b in bounds]
    if np.isscalar(resolution):
        resolution = [int(resolution)] * len(bounds)
    axes = []
    for (lo, hi), res in zip(bounds, resolution):
        if lo == hi:
            axes.append(np.array([lo]))
            continue
        if res < 1:
            raise ValueError(f"grid resolution must be positive, got {res}")
        step = (hi - lo) / res
        axes.append(lo + (np.arange(res) + 0.5) * step)
    return axes


def grid_points(axes: list[np.ndarray]) -> np.ndarray:
    """All grid points, row-major with the last axis varying fastest."""
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def eval_on_grid(net, bounds, resolution) -> np.ndarray:
    """Evaluate ``net`` at the cell centres of a regular grid over ``bounds``.

    Returns an array with one axis per argument (the first argument indexes
    axis 0); flattening it in C order gives the exported row-major layout.
    """
    if len(bounds) > 3:
        raise ValueError("eval_on_grid supports at most 3 arguments")
    axes = grid_axes(bounds, resolution)
    values = np.asarray(net.evaluate(grid_points(axes)), dtype=np.float64)
    return values.reshape([len(a) for a in axes])


# ---------------------------------------------------------------------------
# pretraining target


@dataclass
class TargetMap:
    arity: int
    half_width: float
    resolution: int
    sigma: float
    cells: np.ndarray
    field: np.ndarray

    @property
    def bounds(self) -> list[tuple[float, float]]:
        return [(-self.half_width, self.half_width)] * self.arity

    def axes(self) -> list[np.ndarray]:
        return grid_axes(self.bounds, self.resolution)

    def lookup(self, points) -> np.ndarray:
        """Multilinear interpolation of the blurred field, clamped at the edges."""
        x = np.asarray(points, dtype=np.float64).reshape(-1, self.arity)
        step = 2 * self.half_width / self.resolution
        idx = (x + self.half_width) / step - 0.5
        return ndimage.map_coordinates(self.field, idx.T, order=1, mode="nearest")


def piecewise_field(cells: np.ndarray, resolution: int) -> np.ndarray:
    """Sample a 5^n cell array at the pixel centres of a ``resolution``^n grid."""
    k = cells.shape[0]
    centers = (np.arange(resolution) + 0.5) / resolution
    idx = np.minimum((centers * k).astype(int), k - 1)
    return cells[np.ix_(*([idx] * cells.ndim))]


def gaussian_blur(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur in pixel units with half-sample reflective borders."""
    if sigma <= 0:
        return field.copy()
    return ndimage.gaussian_filter(field, sigma=sigma, mode="reflect")


def make_target_map(arity: int, seed: int, resolution: int = 50, sigma: float = 3.0,
                    half_width: float = CELLS_PER_AXIS / 2) -> TargetMap:
    """Random piecewise-constant map on 5^n unit cells, blurred by ``sigma`` pixels."""
    if arity not in SUPPORTED_ARITIES:
        raise ValueError(f"unsupported arity {arity}; expected one of {SUPPORTED_ARITIES}")
    rng = ad.make_rng(seed)
    cells = rng.uniform(-1.0, 1.0, size=(CELLS_PER_AXIS,) * arity)
    field = gaussian_blur(piecewise_field(cells, resolution), sigma)
    return TargetMap(arity, float(half_width), int(resolution), float(sigma), cells, field)


def grid_rmse(net, tmap: TargetMap) -> float:
    pred = eval_on_grid(net, tmap.bounds, tmap.resolution)
    return float(np.sqrt(np.mean((pred - tmap.field) ** 2)))


class DivergenceError(ArithmeticError):
    pass


def pretrain_inner(net: InnerNet, tmap: TargetMap, steps: int = 20000, batch: int = 256,
                   lr: float = 1e-3, rng: np.random.Generator | None = None,
                   log_every: int = 0) -> float:
    """Fit ``net`` to ``tmap`` by MSE on uniform domain samples; returns grid RMSE."""
    if net.arity != tmap.arity:
        raise ValueError(f"arity mismatch: net {net.arity} vs map {tmap.arity}")
    rng = rng if rng is not None else ad.make_rng(0)
    opt = ad.Adam(net.parameters(), lr=lr)
    hw = tmap.half_width
    for step in range(steps):
        x = rng.uniform(-hw, hw, size=(batch, net.arity))
        y = tmap.lookup(x)[:, None]
        opt.zero_grad()
        try:
            loss = ad.mse(net.forward(Tensor(x)), y)
        except ad.NumericError as exc:
            raise DivergenceError(f"pretraining diverged at step {step}: {exc}") from exc
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.6f", step, loss.item())
    return grid_rmse(net, tmap)
