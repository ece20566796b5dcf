"""Adam with bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class Adam:
    """Adam over a fixed, named set of trainable tensors.

    Tensors with ``requires_grad=False`` are refused at construction, so a
    frozen teacher can never be handed to the optimizer by accident.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        frozen = [name for name, p in params.items() if not p.requires_grad]
        if frozen:
            raise ValueError(f"refusing to optimize frozen tensors: {frozen}")
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in self.params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in grads:
                raise KeyError(f"missing gradient for {name}")
            if np.shape(grads[name]) != p.shape:
                raise ShapeError(f"gradient for {name} has shape {np.shape(grads[name])}, parameter {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.assign(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        out["adam.t"] = np.array(float(self.t))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            for kind, store in (("m", self.m), ("v", self.v)):
                arr = np.asarray(arrays[f"adam.{kind}.{name}"], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ShapeError(f"adam.{kind}.{name}: shape {arr.shape} != parameter shape {p.shape}")
                store[name] = arr.copy()
        self.t = int(np.asarray(arrays["adam.t"]).reshape(()))

