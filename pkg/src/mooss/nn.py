"""Small parameter containers shared by the encoder and decoder."""

from __future__ import annotations

import numpy as np

from mooss.autodiff import Parameter, layer_norm, linear


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


class Module:
    """Holds named parameters and child modules; ``parameters()`` walks them in insertion order."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name=name)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = [(prefix + n, p) for n, p in self._params.items()]
        for cname, child in self._children.items():
            out.extend(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if n not in state:
                raise KeyError(f"missing parameter {n!r}")
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", uniform_init(rng, (d_in, d_out), d_in))
        self.bias = self.add_param("bias", uniform_init(rng, (d_out,), d_in)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(d))
        self.beta = self.add_param("beta", np.zeros(d))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)
