"""Training memory / FLOPs cost model and the greedy memory-constrained partition.

Memory follows ZeRO-style accounting: every parameter costs its value, its
gradient and ``optimizer_states_per_param`` optimizer slots; every atom keeps
its input and its output activation for the backward pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .netlib import Atom, Head


class PartitionError(ValueError):
    def __init__(self, atom_index: int, cost: float, r_min: float):
        self.atom_index = atom_index
        super().__init__(f"atom {atom_index} alone needs {cost:g} bytes, not below R_min={r_min:g}")


@dataclass(frozen=True)
class CostModel:
    batch_size: int = 32
    bytes_per_scalar: int = 8
    optimizer_states_per_param: int = 1  # SGD momentum

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


def atom_mem_req(atom: Atom, cost: CostModel) -> int:
    b = cost.bytes_per_scalar
    params = atom.param_count() * b * (2 + cost.optimizer_states_per_param)
    acts = cost.batch_size * (atom.in_size + atom.out_size) * b
    return params + acts


def head_mem_req(head: Head, cost: CostModel) -> int:
    b = cost.bytes_per_scalar
    return head.param_count() * b * (2 + cost.optimizer_states_per_param) + cost.batch_size * head.classes * b


def mem_req(atoms: Sequence[Atom], cost: CostModel, head: Head | int | None = None) -> int:
    """Bytes to train ``atoms`` (plus an auxiliary head, if given).

    ``head`` may be a :class:`Head` or a class count, in which case a head on
    the last atom's output is assumed.
    """
    if not atoms:
        raise ValueError("mem_req of an empty atom group")
    total = sum(atom_mem_req(a, cost) for a in atoms)
    if head is not None:
        total += head_mem_req(_as_head(head, atoms[-1]), cost)
    return total


def train_flops(atoms: Sequence[Atom], cost: CostModel, pgd_steps: int, head: Head | int | None = None) -> int:
    """(n+1) forward+backward passes per batch, backward counted as twice the forward."""
    if not atoms:
        raise ValueError("train_flops of an empty atom group")
    fwd = sum(a.forward_flops(cost.batch_size) for a in atoms)
    if head is not None:
        h = _as_head(head, atoms[-1])
        fwd += 2 * cost.batch_size * h.in_dim * h.classes
    return (pgd_steps + 1) * 3 * fwd


@dataclass
class _HeadShape:
    in_dim: int
    classes: int

    def param_count(self) -> int:
        return self.in_dim * self.classes + self.classes


def _as_head(head, last: Atom):
    if isinstance(head, int):
        return _HeadShape(last.out_size, head)
    return head


# ---------------------------------------------------------------------------


@dataclass
class PartitionPlan:
    boundaries: list[int]  # module m spans atoms boundaries[m-1]:boundaries[m]
    r_min: float
    mem: list[float] = field(default_factory=list)
    flops: list[float] = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.boundaries) - 1

    def atom_range(self, m: int) -> tuple[int, int]:
        return self.boundaries[m - 1], self.boundaries[m]

    def rows(self) -> list[tuple[int, str, float, float]]:
        out = []
        for m in range(1, self.M + 1):
            a, b = self.atom_range(m)
            out.append((m, f"{a + 1}-{b}", self.mem[m - 1] if self.mem else float("nan"),
                        self.flops[m - 1] if self.flops else float("nan")))
        return out

    def table(self) -> str:
        lines = [f"R_min = {self.r_min:.0f} bytes, M = {self.M}",
                 f"{'module':>6}  {'atoms':>7}  {'mem_bytes':>12}  {'train_flops':>14}"]
        for m, rng, mem, fl in self.rows():
            lines.append(f"{m:>6}  {rng:>7}  {mem:>12.0f}  {fl:>14.0f}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["module", "first_atom", "last_atom", "mem_bytes", "train_flops"])
            for m in range(1, self.M + 1):
                a, b = self.atom_range(m)
                w.writerow([m, a + 1, b, int(self.mem[m - 1]), int(self.flops[m - 1])])


def greedy_partition(items: Sequence, r_min: float, group_cost: Callable[[Sequence], float]) -> list[int]:
    """Greedy contiguous grouping: keep appending while the group cost stays strictly below ``r_min``.

    Returns the boundary list. If the whole sequence fits within ``r_min``
    (cost <= r_min) a single group is returned.
    """
    n = len(items)
    if n == 0:
        raise ValueError("nothing to partition")
    if group_cost(items) <= r_min:
        return [0, n]
    bounds = [0]
    start = 0
    for i in range(n):
        single = group_cost(items[i : i + 1])
        if not single < r_min:
            raise PartitionError(i + 1, single, r_min)
        if i > start and not group_cost(items[start : i + 1]) < r_min:
            bounds.append(i)
            start = i
    bounds.append(n)
    return bounds


def partition_atoms(
    atoms: Sequence[Atom],
    r_min: float,
    cost: CostModel,
    num_classes: int,
    pgd_steps: int,
) -> PartitionPlan:
    """Partition a backbone atom list; every module is costed with its own auxiliary head."""

    def group_cost(group):
        return mem_req(group, cost, num_classes)

    bounds = greedy_partition(list(atoms), r_min, group_cost)
    plan = PartitionPlan(bounds, r_min)
    for m in range(1, plan.M + 1):
        a, b = plan.atom_range(m)
        plan.mem.append(mem_req(atoms[a:b], cost, num_classes))
        plan.flops.append(train_flops(atoms[a:b], cost, pgd_steps, num_classes))
    return plan


class RangeCosts:
    """Cost lookups for a joined run of modules a..b exiting through head b."""

    def __init__(self, atoms: Sequence[Atom], boundaries: Sequence[int], cost: CostModel, num_classes: int, pgd_steps: int):
        self.atoms = list(atoms)
        self.boundaries = list(boundaries)
        self.cost = cost
        self.num_classes = num_classes
        self.pgd_steps = pgd_steps
        self._mem: dict[tuple[int, int], int] = {}
        self._flops: dict[tuple[int, int], int] = {}

    @property
    def M(self) -> int:
        return len(self.boundaries) - 1

    def _span(self, a: int, b: int):
        return self.atoms[self.boundaries[a - 1] : self.boundaries[b]]

    def mem(self, a: int, b: int) -> int:
        key = (a, b)
        if key not in self._mem:
            self._mem[key] = mem_req(self._span(a, b), self.cost, self.num_classes)
        return self._mem[key]

    def flops(self, a: int, b: int) -> int:
        key = (a, b)
        if key not in self._flops:
            self._flops[key] = train_flops(self._span(a, b), self.cost, self.pgd_steps, self.num_classes)
        return self._flops[key]


def whole_model_mem(atoms: Sequence[Atom], cost: CostModel, num_classes: int) -> int:
    return mem_req(atoms, cost, num_classes)
