"""Small fully-connected stacks shared by the head and torso fields."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def mlp_init(rng: np.random.Generator, name: str, dims: list[int],
             params: dict[str, Tensor], zero_last: bool = False,
             dtype=np.float32) -> None:
    """He-initialized affine layers named {name}.{i}.w/.b into params."""
    for i in range(len(dims) - 1):
        din, dout = dims[i], dims[i + 1]
        if zero_last and i == len(dims) - 2:
            w = np.zeros((din, dout), dtype=dtype)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout)).astype(dtype)
        params[f"{name}.{i}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.{i}.b"] = Tensor(np.zeros(dout, dtype=dtype),
                                         requires_grad=True)


def mlp_apply(params: dict[str, Tensor], name: str, x: Tensor,
              num_layers: int) -> Tensor:
    """Affine/relu stack; the last layer stays linear for the caller to squash."""
    h = x
    for i in range(num_layers):
        h = ad.matmul(h, params[f"{name}.{i}.w"]) + params[f"{name}.{i}.b"]
        if i < num_layers - 1:
            h = ad.relu(h)
    return h
