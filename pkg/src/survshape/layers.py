"""Parameter containers shared by the point-cloud and wide-and-deep networks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


class Module:
    """Minimal container: named parameters, batch-norm buffers, train/eval mode."""

    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_weights(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters subject to weight decay: weight matrices and w-vectors."""
        for name, p in self.named_parameters():
            if name.rsplit(".", 1)[-1] in ("weight", "w_wide", "w_deep"):
                yield name, p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        state = getattr(self, "state", None)
        if isinstance(state, BatchNormState):
            yield prefix.rstrip("."), state
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None, zero: bool = False):
        w = np.zeros((fan_in, fan_out)) if zero or rng is None else he_uniform(rng, fan_in, fan_out)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(fan_out))

    def own_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


class BatchNorm(Module):
    def __init__(self, num_features: int):
        self.gamma = ad.parameter(np.ones(num_features))
        self.beta = ad.parameter(np.zeros(num_features))
        self.state = BatchNormState.create(num_features)

    def own_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.state, self.training)


class DenseBlock(Module):
    """Linear -> batch norm -> ReLU."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None):
        self.linear = Linear(fan_in, fan_out, rng)
        self.norm = BatchNorm(fan_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(self.norm(self.linear(x)))


class MLP(Module):
    def __init__(self, fan_in: int, widths, rng: np.random.Generator | None):
        dims = [fan_in, *widths]
        self.blocks = [DenseBlock(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def out_features(self) -> int:
        return self.blocks[-1].linear.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x
