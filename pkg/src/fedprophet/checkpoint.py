"""Checkpoint directory: ``manifest.txt`` plus one little-endian float64 file per tensor."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .netlib import Backbone, assemble, build_preset_atoms

MAGIC = "fedprophet-checkpoint v1"


def _tensor_items(backbone: Backbone):
    for mod in backbone.modules:
        for name, p in mod.named_params().items():
            yield f"m{mod.index}.{name}", p
        for name, p in mod.head.params().items():
            yield f"m{mod.index}.head.{name}", p


def write_tensor(path: Path, data: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_tensor(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {raw.size} values, manifest shape {shape}")
    return raw.astype(np.float64).reshape(shape)


def save_checkpoint(directory: str | Path, backbone: Backbone, round_: int, module: int, extra: dict | None = None) -> None:
    """Write atomically enough for our purposes: tensors first, manifest last."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [
        MAGIC,
        f"preset: {backbone.preset}",
        f"input_shape: {' '.join(map(str, backbone.input_shape))}",
        f"num_classes: {backbone.num_classes}",
        f"boundaries: {' '.join(map(str, backbone.boundaries()))}",
        f"frozen: {' '.join('1' if mod.frozen else '0' for mod in backbone.modules)}",
        f"round: {round_}",
        f"module: {module}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value}")
    for name, p in _tensor_items(backbone):
        fname = f"{name}.bin"
        write_tensor(d / fname, p.data)
        lines.append(f"tensor: {name} {fname}")
        lines.append(f"shape: {' '.join(map(str, p.shape))}")
    tmp = d / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, d / "manifest.txt")


def read_manifest(directory: str | Path) -> tuple[dict[str, str], list[tuple[str, str, tuple[int, ...]]]]:
    d = Path(directory)
    text = (d / "manifest.txt").read_text().splitlines()
    if not text or text[0] != MAGIC:
        raise ValueError(f"{d}: not a checkpoint manifest")
    header: dict[str, str] = {}
    tensors = []
    pending = None
    for line in text[1:]:
        key, _, value = line.partition(": ")
        if key == "tensor":
            name, fname = value.split()
            pending = (name, fname)
        elif key == "shape":
            if pending is None:
                raise ValueError(f"{d}: shape line without tensor")
            shape = tuple(int(v) for v in value.split()) if value.strip() else ()
            tensors.append((pending[0], pending[1], shape))
            pending = None
        elif key:
            header[key] = value
    return header, tensors


def load_checkpoint(directory: str | Path) -> tuple[Backbone, dict[str, str]]:
    d = Path(directory)
    header, tensors = read_manifest(d)
    input_shape = tuple(int(v) for v in header["input_shape"].split())
    classes = int(header["num_classes"])
    bounds = [int(v) for v in header["boundaries"].split()]
    atoms, head = build_preset_atoms(header["preset"], input_shape, classes, seed=0)
    backbone = assemble(atoms, head, bounds, classes, seed=0, preset=header["preset"])
    lookup = dict(_tensor_items(backbone))
    for name, fname, shape in tensors:
        if name not in lookup:
            raise ValueError(f"{d}: unexpected tensor {name}")
        if tuple(lookup[name].shape) != shape:
            raise ValueError(f"{d}: tensor {name} has shape {shape}, architecture expects {lookup[name].shape}")
        lookup[name].data = read_tensor(d / fname, shape)
    for mod, flag in zip(backbone.modules, header["frozen"].split()):
        mod.frozen = flag == "1"
    return backbone, header
