"""Small learned-layer building blocks on top of the autodiff core."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, matmul

__all__ = ["Linear", "MLP", "init_weight", "collect_params", "load_params", "param_fingerprint"]


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    """N(0, 1/fan_in) init, suitable for tanh stacks."""
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
        self.w = Tensor(init_weight(rng, fan_in, fan_out, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class MLP:
    """Stack of affine layers with tanh between them (not after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.tanh()
        return x

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"l{i}.{k}"] = v
        return out


def collect_params(modules: dict[str, object]) -> dict[str, Tensor]:
    """Flatten {prefix: module-with-.parameters()} into one named dict."""
    flat: dict[str, Tensor] = {}
    for prefix, module in modules.items():
        for k, v in module.parameters().items():
            flat[f"{prefix}.{k}"] = v
    return flat


def load_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy saved arrays into live parameter tensors, checking names and shapes."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise KeyError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for k, p in params.items():
        a = arrays[k]
        if a.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {k}: {a.shape} vs {p.data.shape}")
        p.data = a.astype(p.data.dtype, copy=True)


def param_fingerprint(params: dict[str, Tensor]) -> bytes:
    """Order-stable byte digest of all parameter values (for freeze checks)."""
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.digest()
