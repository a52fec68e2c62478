"""Permutation-invariant point-cloud encoder with a learned 3x3 input transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MLP, Linear, Module


@dataclass(frozen=True)
class PointNetConfig:
    point_widths: tuple[int, ...] = (64, 128, 400)
    transform_fc: tuple[int, ...] = (200, 100)
    use_transform: bool = True

    @property
    def global_width(self) -> int:
        return self.point_widths[-1]


def _as_batch(cloud) -> tuple[Tensor, bool]:
    t = ad.as_tensor(cloud)
    if t.ndim == 2:
        t = ad.reshape(t, (1, *t.shape))
        single = True
    elif t.ndim == 3:
        single = False
    else:
        raise ad.ShapeError(f"point cloud must be K x 3 or B x K x 3, got {t.shape}")
    if t.shape[-1] != 3:
        raise ad.ShapeError(f"points must have 3 coordinates, got {t.shape}")
    if t.shape[1] == 0:
        raise ValueError("empty point cloud")
    return t, single


class SharedPointMLP(MLP):
    """The same dense blocks applied to every point of every cloud.

    In train mode batch norm pools its statistics over all points of all
    clouds in the batch.
    """

    def __init__(self, widths, rng, fan_in: int = 3):
        super().__init__(fan_in, widths, rng)


class TransformNet(Module):
    """Predicts a per-cloud 3x3 matrix T = I + residual.

    A vanilla point encoder is pooled to a global vector and mapped through
    dense layers to 9 outputs. The final layer starts at zero so T starts as
    the identity.
    """

    def __init__(self, config: PointNetConfig, rng):
        self.points = SharedPointMLP(config.point_widths, rng)
        self.fc = MLP(config.global_width, config.transform_fc, rng)
        self.head = Linear(config.transform_fc[-1], 9, rng, zero=True)

    def __call__(self, clouds: Tensor) -> Tensor:
        pooled = ad.set_max_pool(self.points(clouds), axis=1)
        residual = self.head(self.fc(pooled))
        t = ad.reshape(residual, (clouds.shape[0], 3, 3))
        return ad.add(t, np.eye(3))


class PointNet(Module):
    def __init__(self, config: PointNetConfig = PointNetConfig(), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.transform = TransformNet(config, rng) if config.use_transform else None
        self.points = SharedPointMLP(config.point_widths, rng)

    def children(self):
        if self.transform is not None:
            yield "transform", self.transform
        yield "points", self.points

    @property
    def out_features(self) -> int:
        return self.config.global_width

    def input_transform(self, cloud) -> Tensor:
        clouds, single = _as_batch(cloud)
        if self.transform is None:
            eye = ad.Tensor(np.broadcast_to(np.eye(3), (clouds.shape[0], 3, 3)))
            return ad.reshape(eye, (3, 3)) if single else eye
        t = self.transform(clouds)
        return ad.reshape(t, (3, 3)) if single else t

    def transformed_points(self, clouds: Tensor) -> Tensor:
        if self.transform is None:
            return clouds
        t = self.transform(clouds)
        # each point p becomes T p, i.e. rows P @ T^T
        return ad.matmul(clouds, ad.transpose(t))

    def shared_point_mlp(self, points) -> Tensor:
        pts, single = _as_batch(points)
        out = self.points(pts)
        return ad.reshape(out, out.shape[1:]) if single else out

    def encode(self, cloud) -> Tensor:
        """Global shape descriptor: max over points of the shared MLP on T p."""
        clouds, single = _as_batch(cloud)
        feats = self.points(self.transformed_points(clouds))
        pooled = ad.set_max_pool(feats, axis=1)
        return ad.reshape(pooled, (pooled.shape[1],)) if single else pooled

    __call__ = encode
