"""Cascade-learning network structure: atoms, modules with auxiliary heads, backbones.

A backbone is a sequence of atoms split into contiguous modules.  Every
module carries a single affine auxiliary head; the head of the last module is
the backbone classifier, so the joint loss and the last early-exit loss share
it.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import grad_core as gc
from .grad_core import Tensor

PRESETS = ("mlp-4x64", "cnn-6")


def _prod(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Atom:
    """Indivisible network unit.

    ``kind`` is one of ``"linear"`` (affine, ReLU if ``relu``),
    ``"conv_relu_pool"`` (3x3 same-padded conv, ReLU, 2x2 max-pool) or
    ``"conv_relu"`` (conv and ReLU, no pooling).
    """

    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: dict[str, Tensor]
    relu: bool = True

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "linear":
            if x.data.ndim > 2:
                x = gc.flatten(x)
            h = gc.add(gc.matmul(x, self.params["weight"]), self.params["bias"])
            return gc.relu(h) if self.relu else h
        h = gc.conv2d(x, self.params["weight"], self.params["bias"], stride=1, padding=1)
        h = gc.relu(h)
        if self.kind == "conv_relu_pool":
            h = gc.max_pool2d(h, 2)
        return h

    @property
    def in_size(self) -> int:
        return _prod(self.in_shape)

    @property
    def out_size(self) -> int:
        return _prod(self.out_shape)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward_flops(self, batch: int) -> int:
        """Multiply-add count x2 of the affine/conv part for one batch."""
        if self.kind == "linear":
            return 2 * batch * self.in_size * self.out_shape[-1]
        cout, cin, kh, kw = self.params["weight"].shape
        conv_hw = self.in_shape[1] * self.in_shape[2]  # same padding, stride 1
        return 2 * batch * cout * conv_hw * cin * kh * kw

    def describe(self) -> str:
        return f"{self.kind}{'' if self.relu or self.kind != 'linear' else '(no relu)'} {self.in_shape}->{self.out_shape}"


def linear_atom(rng: np.random.Generator, d_in: int, d_out: int, relu: bool = True, in_shape=None) -> Atom:
    params = {
        "weight": Tensor(kaiming_uniform(rng, (d_in, d_out), d_in), requires_grad=True),
        "bias": Tensor(np.zeros(d_out), requires_grad=True),
    }
    return Atom("linear", tuple(in_shape or (d_in,)), (d_out,), params, relu)


def conv_atom(rng: np.random.Generator, in_shape: tuple[int, int, int], c_out: int, pool: bool) -> Atom:
    c_in, h, w = in_shape
    fan_in = c_in * 9
    params = {
        "weight": Tensor(kaiming_uniform(rng, (c_out, c_in, 3, 3), fan_in), requires_grad=True),
        "bias": Tensor(np.zeros(c_out), requires_grad=True),
    }
    out = (c_out, h // 2, w // 2) if pool else (c_out, h, w)
    return Atom("conv_relu_pool" if pool else "conv_relu", tuple(in_shape), out, params)


@dataclass
class Head:
    """Single affine layer producing early-exit logits."""

    weight: Tensor  # (in_dim, classes)
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, classes: int) -> Head:
        return cls(
            Tensor(kaiming_uniform(rng, (in_dim, classes), in_dim), requires_grad=True),
            Tensor(np.zeros(classes), requires_grad=True),
        )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def forward(self, z: Tensor) -> Tensor:
        if z.data.ndim > 2:
            z = gc.flatten(z)
        return gc.add(gc.matmul(z, self.weight), self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class ModuleSpec:
    index: int  # 1-based
    atoms: list[Atom]
    head: Head
    frozen: bool = False

    def __post_init__(self):
        if self.head.in_dim != self.atoms[-1].out_size:
            raise ValueError(
                f"module {self.index}: head input {self.head.in_dim} != atom output {self.atoms[-1].out_size}"
            )

    @property
    def in_shape(self) -> tuple[int, ...]:
        return self.atoms[0].in_shape

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.atoms[-1].out_shape

    def forward(self, z: Tensor) -> Tensor:
        for atom in self.atoms:
            z = atom.forward(z)
        return z

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, atom in enumerate(self.atoms):
            for k, p in atom.params.items():
                out[f"a{i}.{k}"] = p
        return out

    def backbone_state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_params().items()}

    def head_state(self) -> dict[str, np.ndarray]:
        return {"weight": self.head.weight.data.copy(), "bias": self.head.bias.data.copy()}

    def load_backbone_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_params().items():
            if state[k].shape != p.shape:
                raise gc.ShapeError(f"module {self.index} {k}: {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def load_head_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.head.params().items():
            if state[k].shape != p.shape:
                raise gc.ShapeError(f"head {self.index} {k}: {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


@dataclass
class Backbone:
    modules: list[ModuleSpec]
    preset: str = "custom"
    num_classes: int = 0
    input_shape: tuple[int, ...] = field(default_factory=tuple)

    @property
    def M(self) -> int:
        return len(self.modules)

    def module(self, m: int) -> ModuleSpec:
        """1-based lookup."""
        return self.modules[m - 1]

    @property
    def atoms(self) -> list[Atom]:
        return [a for mod in self.modules for a in mod.atoms]

    def boundaries(self) -> list[int]:
        """Atom offsets: module m spans atoms ``b[m-1]:b[m]``."""
        out = [0]
        for mod in self.modules:
            out.append(out[-1] + len(mod.atoms))
        return out

    def clone(self) -> Backbone:
        return copy.deepcopy(self)

    def architecture(self) -> list[str]:
        lines = [f"preset {self.preset}, input {self.input_shape}, classes {self.num_classes}, M={self.M}"]
        for mod in self.modules:
            for atom in mod.atoms:
                lines.append(f"  module {mod.index}: {atom.describe()}  params={atom.param_count()}")
            lines.append(f"  module {mod.index}: head {mod.head.in_dim}->{mod.head.classes}  params={mod.head.param_count()}")
        return lines


def build_preset_atoms(name: str, input_shape: Sequence[int], num_classes: int, seed: int) -> tuple[list[Atom], Head]:
    """Atom list and classifier head of a built-in preset."""
    rng = np.random.default_rng([seed, 0xA70])
    input_shape = tuple(int(d) for d in input_shape)
    if name == "mlp-4x64":
        d = _prod(input_shape)
        atoms = []
        for i in range(4):
            atoms.append(linear_atom(rng, d if i == 0 else 64, 64, in_shape=input_shape if i == 0 else None))
        return atoms, Head.init(rng, 64, num_classes)
    if name == "cnn-6":
        if len(input_shape) != 3:
            raise ValueError(f"cnn-6 needs a (C, H, W) input, got {input_shape}")
        widths = [(8, False), (8, True), (16, False), (16, True), (32, False), (32, True)]
        atoms, shape = [], input_shape
        for c_out, pool in widths:
            atom = conv_atom(rng, shape, c_out, pool)
            atoms.append(atom)
            shape = atom.out_shape
        atoms.append(linear_atom(rng, _prod(shape), 64, in_shape=shape))
        return atoms, Head.init(rng, 64, num_classes)
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")


def assemble(
    atoms: Sequence[Atom],
    final_head: Head,
    boundaries: Sequence[int],
    num_classes: int,
    seed: int,
    preset: str = "custom",
) -> Backbone:
    """Group atoms into modules; intermediate modules get fresh auxiliary heads."""
    if boundaries[0] != 0 or boundaries[-1] != len(atoms) or any(
        a >= b for a, b in zip(boundaries, boundaries[1:])
    ):
        raise ValueError(f"boundaries {list(boundaries)} do not cover {len(atoms)} atoms contiguously")
    rng = np.random.default_rng([seed, 0xE1D])
    modules = []
    n_mod = len(boundaries) - 1
    for m in range(n_mod):
        group = list(atoms[boundaries[m] : boundaries[m + 1]])
        head = final_head if m == n_mod - 1 else Head.init(rng, group[-1].out_size, num_classes)
        modules.append(ModuleSpec(m + 1, group, head))
    return Backbone(modules, preset, num_classes, tuple(atoms[0].in_shape))


def build_backbone(name: str, input_shape, num_classes: int, boundaries: Sequence[int] | None, seed: int) -> Backbone:
    atoms, head = build_preset_atoms(name, input_shape, num_classes, seed)
    return assemble(atoms, head, boundaries or [0, len(atoms)], num_classes, seed, preset=name)


# ---------------------------------------------------------------------------
# forward paths and losses


def forward_frozen_prefix(backbone: Backbone, x, m: int) -> Tensor:
    """Features z_{m-1} through frozen modules 1..m-1; nothing is recorded."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    for mod in backbone.modules[: m - 1]:
        if not mod.frozen:
            raise ValueError(f"module {mod.index} in the prefix of module {m} is not frozen")
    if m == 1:
        return x
    with gc.no_grad():
        z = x
        for mod in backbone.modules[: m - 1]:
            z = mod.forward(z)
    return Tensor(z.data)


def forward_range(backbone: Backbone, z: Tensor, start: int, stop: int) -> Tensor:
    """z_stop from z_{start-1} through modules start..stop (recorded if anything requires grad)."""
    for mod in backbone.modules[start - 1 : stop]:
        z = mod.forward(z)
    return z


def _regularized_ce(logits: Tensor, z: Tensor, y, mu: float, reduction: str) -> Tensor:
    ce = gc.softmax_cross_entropy(logits, y, reduction="none" if reduction == "none" else "sum")
    if mu:
        reg = gc.scale(gc.sum_squares(z, per_sample=reduction == "none"), 0.5 * mu)
        ce = gc.add(ce, reg)
    if reduction == "mean":
        ce = gc.scale(ce, 1.0 / logits.shape[0])
    return ce


def early_exit_loss(module: ModuleSpec, z_prev: Tensor, y, mu: float, reduction: str = "mean") -> Tensor:
    """Cross-entropy through the module's head plus (mu/2)||z_m||^2, averaged over the batch."""
    return prophet_loss([module], z_prev, y, mu, reduction)


def prophet_loss(modules: Sequence[ModuleSpec], z_prev: Tensor, y, mu: float, reduction: str = "mean") -> Tensor:
    """Joint loss of contiguous modules m..M_k, exiting through the last head only."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    for a, b in zip(modules, modules[1:]):
        if b.index != a.index + 1:
            raise ValueError(f"assigned modules {[mod.index for mod in modules]} are not contiguous")
    z = z_prev
    for mod in modules:
        z = mod.forward(z)
    logits = modules[-1].head.forward(z)
    return _regularized_ce(logits, z, y, mu, reduction)


def joint_loss(backbone: Backbone, x: Tensor, y, reduction: str = "mean") -> Tensor:
    return prophet_loss(backbone.modules, x, y, 0.0, reduction)


def head_loss(head: Head, z: Tensor, y, mu: float, reduction: str = "mean") -> Tensor:
    """l_m as a function of the module output z_m alone."""
    return _regularized_ce(head.forward(z), z, y, mu, reduction)


def predict(backbone: Backbone, x, upto: int | None = None) -> np.ndarray:
    upto = upto or backbone.M
    with gc.no_grad():
        z = forward_range(backbone, x if isinstance(x, Tensor) else Tensor(x), 1, upto)
        logits = backbone.module(upto).head.forward(z)
    return logits.data.argmax(axis=1)


def strong_convexity_check(head: Head, mu: float, z_samples, h: float = 1e-5, label: int = 0) -> float:
    """Smallest Hessian eigenvalue of l_m in z_m over the sample points.

    The Hessian is built by central differences of the reverse-mode gradient.
    """
    z_samples = np.atleast_2d(np.asarray(z_samples, dtype=np.float64))
    d = z_samples.shape[1]

    def grad_at(z: np.ndarray) -> np.ndarray:
        zt = Tensor(z[None, :], requires_grad=True)
        with gc.Tape():
            loss = head_loss(head, zt, [label], mu, reduction="sum")
            return gc.grad_wrt_input(loss, zt)[0]

    worst = math.inf
    for z in z_samples:
        hess = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            hess[:, j] = (grad_at(z + e) - grad_at(z - e)) / (2 * h)
        hess = 0.5 * (hess + hess.T)
        worst = min(worst, float(np.linalg.eigvalsh(hess)[0]))
    return worst
