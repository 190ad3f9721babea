"""Parameter stores, MLPs and the Adam optimizer.

Gradients come from torch autograd. A ParameterStore is a flat, named set of
leaf tensors so checkpoints and freezing work on plain names.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

ACTIVATIONS = {
    "relu": torch.relu,
    "softplus": F.softplus,
    "sigmoid": torch.sigmoid,
    "identity": lambda x: x,
    "none": lambda x: x,
}


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient entries in: {', '.join(self.names)}")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "identity"
    skips: tuple[int, ...] = ()
    init: str = "fan_in"
    zero_final: bool = False

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"bad widths {self.widths}")
        if any(s <= 0 or s >= self.n_layers for s in self.skips):
            raise ValueError(f"skip indices must lie in [1, {self.n_layers - 1}]")
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer_shapes(self):
        shapes = []
        for i in range(self.n_layers):
            fan_in = self.widths[i] + (self.widths[0] if i in self.skips else 0)
            shapes.append((fan_in, self.widths[i + 1]))
        return shapes

    def to_dict(self):
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "output_activation": self.output_activation,
            "skips": list(self.skips),
            "init": self.init,
            "zero_final": self.zero_final,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            widths=tuple(d["widths"]),
            activation=d["activation"],
            output_activation=d["output_activation"],
            skips=tuple(d["skips"]),
            init=d["init"],
            zero_final=d["zero_final"],
        )


class ParameterStore:
    """Named dense parameter arrays with fixed shapes."""

    def __init__(self, dtype=torch.float32):
        self.dtype = dtype
        self._tensors: dict[str, torch.Tensor] = {}

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already exists")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone().requires_grad_(True)
        if not torch.isfinite(t).all():
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def tensors(self, prefix: str = "") -> list[torch.Tensor]:
        return [t for n, t in self._tensors.items() if n.startswith(prefix)]

    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {
            n: (t.grad if t.grad is not None else torch.zeros_like(t))
            for n, t in self._tensors.items()
        }

    def set_trainable(self, prefix: str, flag: bool):
        for n, t in self._tensors.items():
            if n.startswith(prefix):
                t.requires_grad_(flag)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy().copy() for n, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._tensors) - set(state)
        extra = set(state) - set(self._tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, t in self._tensors.items():
            v = np.asarray(state[n])
            if tuple(v.shape) != tuple(t.shape):
                raise ValueError(f"shape mismatch for {n}: {v.shape} vs {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.as_tensor(v, dtype=self.dtype))

    def to(self, dtype) -> "ParameterStore":
        out = ParameterStore(dtype)
        for n, t in self._tensors.items():
            out.add(n, t.detach().cpu().numpy())
            out[n].requires_grad_(t.requires_grad)
        return out


def init_mlp(spec: MlpSpec, store: ParameterStore, prefix: str, generator: torch.Generator):
    """Variance-preserving fan-in init; final layer optionally zeroed."""
    for i, (fan_in, fan_out) in enumerate(spec.layer_shapes()):
        last = i == spec.n_layers - 1
        if last and spec.zero_final:
            W = torch.zeros(fan_in, fan_out, dtype=torch.float64)
        else:
            gain = math.sqrt(2.0) if spec.activation == "relu" and not last else 1.0
            W = torch.randn(fan_in, fan_out, generator=generator, dtype=torch.float64)
            W = W * (gain / math.sqrt(fan_in))
        store.add(f"{prefix}.{i}.weight", W.numpy())
        store.add(f"{prefix}.{i}.bias", np.zeros(fan_out))


@dataclass
class Tape:
    """Autograd record of one forward pass."""

    spec: MlpSpec
    store: ParameterStore
    prefix: str
    input: torch.Tensor
    output: torch.Tensor
    hidden: list = field(default_factory=list)


def mlp_forward(spec: MlpSpec, store: ParameterStore, x, prefix: str = "mlp"):
    x = torch.as_tensor(x, dtype=store.dtype)
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match spec {spec.widths[0]}")
    act = ACTIVATIONS[spec.activation]
    h = x
    hidden = []
    for i in range(spec.n_layers):
        if i in spec.skips:
            h = torch.cat([h, x], dim=-1)
        try:
            W = store[f"{prefix}.{i}.weight"]
            b = store[f"{prefix}.{i}.bias"]
        except KeyError as exc:
            raise KeyError(f"store has no parameters for layer {prefix}.{i}") from exc
        if W.shape[0] != h.shape[-1]:
            raise ValueError(f"layer {prefix}.{i} expects {W.shape[0]} inputs, got {h.shape[-1]}")
        h = h @ W + b
        if i < spec.n_layers - 1:
            h = act(h)
            hidden.append(h)
        else:
            h = ACTIVATIONS[spec.output_activation](h)
    return h, Tape(spec, store, prefix, x, h, hidden)


def backward(tape: Tape, upstream):
    """Accumulate d(upstream . output)/d(param) into each parameter's .grad."""
    up = torch.as_tensor(upstream, dtype=tape.output.dtype)
    if up.shape != tape.output.shape:
        raise ValueError(f"upstream shape {tuple(up.shape)} != output {tuple(tape.output.shape)}")
    for i in range(tape.spec.n_layers):
        if f"{tape.prefix}.{i}.weight" not in tape.store:
            raise KeyError(f"tape refers to missing layer {tape.prefix}.{i}")
    tape.output.backward(up, retain_graph=True)


class Mlp:
    """An MlpSpec bound to its parameters inside a store."""

    def __init__(self, spec: MlpSpec, store: ParameterStore, prefix: str):
        self.spec = spec
        self.store = store
        self.prefix = prefix

    def __call__(self, x) -> torch.Tensor:
        return mlp_forward(self.spec, self.store, x, self.prefix)[0]


@dataclass
class StepConfig:
    lr: float = 5e-4
    lr_final: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1

    def lr_at(self, step: int) -> float:
        if self.lr == 0.0:
            return 0.0
        frac = min(step / max(self.total_steps, 1), 1.0)
        return self.lr * (self.lr_final / self.lr) ** frac


class Optimizer:
    """Adam over the tensors of one or more stores, with exponential lr decay."""

    def __init__(self, store, config: StepConfig, prefixes: tuple[str, ...] = ("",)):
        stores = [store] if isinstance(store, ParameterStore) else list(store)
        self.store = stores[0]
        self.stores = stores
        self.config = config
        self.names, self.params = [], []
        for st in stores:
            for n in st:
                if any(n.startswith(p) for p in prefixes):
                    self.names.append(n)
                    self.params.append(st[n])
        if not self.params:
            raise ValueError("optimizer has no parameters to update")
        self.step_count = 0
        self._adam = torch.optim.Adam(
            self.params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps
        )

    def check_finite(self):
        bad = [
            n for n, p in zip(self.names, self.params)
            if p.grad is not None and not torch.isfinite(p.grad).all()
        ]
        if bad:
            raise NonFiniteGradientError(bad)

    def step(self):
        self.check_finite()
        lr = self.config.lr_at(self.step_count)
        for group in self._adam.param_groups:
            group["lr"] = lr
        if lr > 0.0:
            self._adam.step()
        self.step_count += 1

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def optimizer_step(store: ParameterStore, grads: dict, config: StepConfig, optimizer: Optimizer | None = None):
    """Functional form: load ``grads`` into the store and take one Adam step."""
    opt = optimizer or Optimizer(store, config)
    for n, g in grads.items():
        store[n].grad = torch.as_tensor(g, dtype=store.dtype).clone()
    opt.step()
    return opt
