"""Behavior-tree representation and tick engine.

Trees are immutable :class:`BtNode` values.  Leaves name a *behavior* from a
fixed vocabulary (see :data:`BEHAVIORS`) and carry :class:`ParamSlot` entries
that are either bound to an index of the flat parameter vector or fixed.

Two executors share the same semantics:

* :func:`tick` walks the node objects directly (reference executor, used for
  inspection, tests and the pure-Python episode runner).
* :func:`compile_tree` flattens a tree into integer/float arrays that the
  numba episode kernel ticks (:mod:`btms.kernel`).
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .skills import AttractorCommand, SpiralOverlay


class BtError(ValueError):
    """Base class for behavior-tree errors."""


class StructuralError(BtError):
    pass


class ConfigurationError(BtError):
    pass


class BindingError(BtError):
    pass


class SpliceError(BtError):
    pass


class TickStatus(enum.IntEnum):
    SUCCESS = 0
    FAILURE = 1
    RUNNING = 2


class NodeKind(str, enum.Enum):
    SEQUENCE = "Sequence"
    SELECTOR = "Selector"
    PARALLEL = "Parallel"
    DECORATOR = "Decorator"
    ACTION = "Action"
    CONDITION = "Condition"

    @property
    def is_leaf(self) -> bool:
        return self in (NodeKind.ACTION, NodeKind.CONDITION)


class SlotRole(str, enum.Enum):
    THRESHOLD = "threshold"
    GOAL_COORDINATE = "goal_coordinate"
    SKILL_PARAM = "skill_param"


# integer codes shared with the numba kernel
KIND_CODES = {
    NodeKind.SEQUENCE: 0,
    NodeKind.SELECTOR: 1,
    NodeKind.PARALLEL: 2,
    NodeKind.DECORATOR: 3,
    NodeKind.ACTION: 4,
    NodeKind.CONDITION: 5,
}


@dataclass(frozen=True)
class Behavior:
    name: str
    kind: NodeKind
    code: int
    args: tuple[str, ...] = ()


BEHAVIORS: dict[str, Behavior] = {
    b.name: b
    for b in (
        Behavior("always_success", NodeKind.CONDITION, 0),
        Behavior("always_failure", NodeKind.CONDITION, 1),
        Behavior("z_above", NodeKind.CONDITION, 2, ("threshold",)),
        Behavior("z_below", NodeKind.CONDITION, 3, ("threshold",)),
        Behavior("x_above", NodeKind.CONDITION, 4, ("threshold",)),
        Behavior("near_goal", NodeKind.CONDITION, 5, ("x", "y", "z", "radius")),
        Behavior("in_contact", NodeKind.CONDITION, 6),
        Behavior("move_to", NodeKind.ACTION, 10, ("x", "y", "z", "v_p")),
        Behavior(
            "spiral_search",
            NodeKind.ACTION,
            11,
            ("x", "y", "z", "v_p", "v_s", "pitch"),
        ),
        Behavior("descend", NodeKind.ACTION, 12, ("z", "v_p")),
        Behavior("succeed", NodeKind.ACTION, 13),
        Behavior("fail", NodeKind.ACTION, 14),
        Behavior("run", NodeKind.ACTION, 15),
        Behavior("pass", NodeKind.DECORATOR, 20),
        Behavior("invert", NodeKind.DECORATOR, 21),
    )
}


@dataclass(frozen=True)
class ParamSlot:
    """One argument of a leaf behavior.

    Exactly one of ``bound_index`` / ``fixed_value`` must be set; slots bound
    to the same index share a name (e.g. ``g3.z`` used by two actions).
    """

    name: str
    role: SlotRole
    arg: str
    bound_index: int | None = None
    fixed_value: float | None = None
    unit: str = ""

    def resolve(self, theta: Sequence[float]) -> float:
        if (self.bound_index is None) == (self.fixed_value is None):
            raise ConfigurationError(
                f"slot {self.name!r} must have exactly one of bound_index/fixed_value"
            )
        if self.fixed_value is not None:
            return float(self.fixed_value)
        if not 0 <= self.bound_index < len(theta):
            raise BindingError(
                f"slot {self.name!r} bound to index {self.bound_index}, "
                f"parameter vector has length {len(theta)}"
            )
        return float(theta[self.bound_index])


@dataclass(frozen=True)
class BtNode:
    kind: NodeKind
    label: str
    children: tuple["BtNode", ...] = ()
    params: tuple[ParamSlot, ...] = ()
    behavior: str | None = None

    def walk(self) -> Iterable["BtNode"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def size(self) -> int:
        return sum(1 for _ in self.walk())


@dataclass
class Blackboard:
    """Per-episode state read by conditions and written by actions.

    ``attractor_position`` is the current virtual equilibrium; the ``descend``
    action keeps its horizontal coordinates.
    """

    end_effector_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    end_effector_orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    peg_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    contact_force_proxy: float = 0.0
    elapsed_time: float = 0.0
    attractor_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    skill_command_out: AttractorCommand | None = None
    _writes: int = 0

    def write_command(self, cmd: AttractorCommand) -> None:
        if self._writes:
            raise ConfigurationError("more than one action wrote a command in one tick")
        self._writes += 1
        self.skill_command_out = cmd

    def begin_tick(self) -> None:
        self._writes = 0
        self.skill_command_out = None


# ---------------------------------------------------------------------------
# validation / binding
# ---------------------------------------------------------------------------


def validate(root: BtNode) -> None:
    """Raise :class:`StructuralError` / :class:`ConfigurationError` on a malformed tree."""
    for node in root.walk():
        if node.kind.is_leaf:
            if node.children:
                raise StructuralError(f"leaf {node.label!r} has children")
        elif not node.children:
            raise StructuralError(f"control-flow node {node.label!r} has no children")
        if node.kind is NodeKind.DECORATOR and len(node.children) != 1:
            raise StructuralError(f"decorator {node.label!r} needs exactly one child")
        if node.kind.is_leaf or node.kind is NodeKind.DECORATOR:
            beh = BEHAVIORS.get(node.behavior or "")
            if beh is None or beh.kind is not node.kind:
                raise ConfigurationError(
                    f"node {node.label!r}: unknown {node.kind.value} behavior {node.behavior!r}"
                )
            given = [s.arg for s in node.params]
            if sorted(given) != sorted(beh.args) or len(set(given)) != len(given):
                raise ConfigurationError(
                    f"node {node.label!r}: behavior {beh.name} expects args {beh.args}, got {tuple(given)}"
                )
            for slot in node.params:
                if (slot.bound_index is None) == (slot.fixed_value is None):
                    raise ConfigurationError(
                        f"slot {slot.name!r} in {node.label!r} is unbound or doubly bound"
                    )
        elif node.params:
            raise ConfigurationError(f"control-flow node {node.label!r} cannot carry params")


def slots(root: BtNode) -> list[ParamSlot]:
    return [s for node in root.walk() for s in node.params]


def max_bound_index(root: BtNode) -> int:
    idx = [s.bound_index for s in slots(root) if s.bound_index is not None]
    return max(idx) if idx else -1


def bind_params(root: BtNode, theta: Sequence[float]) -> list[tuple[str, float]]:
    """Resolve every slot against ``theta``.

    Returns ``(name, value)`` pairs in tree order, one entry per distinct name.
    """
    need = max_bound_index(root) + 1
    if len(theta) < need:
        raise BindingError(f"tree needs {need} parameters, got {len(theta)}")
    report: dict[str, float] = {}
    for slot in slots(root):
        value = slot.resolve(theta)
        if slot.name in report and report[slot.name] != value:
            raise ConfigurationError(f"slot name {slot.name!r} resolves to two values")
        report.setdefault(slot.name, value)
    return list(report.items())


def _args(node: BtNode, theta: Sequence[float]) -> dict[str, float]:
    return {s.arg: s.resolve(theta) for s in node.params}


# ---------------------------------------------------------------------------
# leaf behaviors (reference implementations; mirrored in btms.kernel)
# ---------------------------------------------------------------------------


def _near_goal(bb: Blackboard, a: dict[str, float]) -> bool:
    p = bb.peg_position
    horizontal = math.hypot(p[0] - a["x"], p[1] - a["y"])
    return horizontal < a["radius"] and p[2] < a["z"] + a["radius"]


_CONDITIONS: dict[str, Callable[[Blackboard, dict[str, float]], bool]] = {
    "always_success": lambda bb, a: True,
    "always_failure": lambda bb, a: False,
    "z_above": lambda bb, a: bb.peg_position[2] > a["threshold"],
    "z_below": lambda bb, a: bb.peg_position[2] < a["threshold"],
    "x_above": lambda bb, a: bb.peg_position[0] > a["threshold"],
    "near_goal": _near_goal,
    "in_contact": lambda bb, a: bb.contact_force_proxy > 0.0,
}


def _action(node: BtNode, bb: Blackboard, a: dict[str, float]) -> TickStatus:
    name = node.behavior
    if name == "move_to":
        bb.write_command(AttractorCommand(np.array([a["x"], a["y"], a["z"]]), a["v_p"]))
    elif name == "spiral_search":
        goal = np.array([a["x"], a["y"], a["z"]])
        overlay = None
        if a["v_s"] > 0.0:
            overlay = SpiralOverlay.start(a["v_s"], a["pitch"], goal[:2])
        bb.write_command(AttractorCommand(goal, a["v_p"], overlay))
    elif name == "descend":
        xd = bb.attractor_position
        bb.write_command(AttractorCommand(np.array([xd[0], xd[1], a["z"]]), a["v_p"]))
    elif name == "succeed":
        return TickStatus.SUCCESS
    elif name == "fail":
        return TickStatus.FAILURE
    return TickStatus.RUNNING


# ---------------------------------------------------------------------------
# tick
# ---------------------------------------------------------------------------


def tick(
    root: BtNode,
    bb: Blackboard,
    theta: Sequence[float] = (),
    trace: list[BtNode] | None = None,
) -> TickStatus:
    """Route one tick from ``root``; returns the root status.

    ``trace``, when given, receives every node ticked, in order.
    """
    bb.begin_tick()
    return _tick(root, bb, theta, trace)


def _tick(node: BtNode, bb: Blackboard, theta, trace) -> TickStatus:
    if trace is not None:
        trace.append(node)
    kind = node.kind
    if kind is NodeKind.CONDITION:
        fn = _CONDITIONS.get(node.behavior or "")
        if fn is None:
            raise ConfigurationError(f"unknown condition {node.behavior!r}")
        return TickStatus.SUCCESS if fn(bb, _args(node, theta)) else TickStatus.FAILURE
    if kind is NodeKind.ACTION:
        if node.behavior not in BEHAVIORS:
            raise ConfigurationError(f"unknown action {node.behavior!r}")
        return _action(node, bb, _args(node, theta))
    if not node.children:
        raise StructuralError(f"control-flow node {node.label!r} has no children")

    if kind is NodeKind.SEQUENCE:
        for child in node.children:
            status = _tick(child, bb, theta, trace)
            if status is not TickStatus.SUCCESS:
                return status
        return TickStatus.SUCCESS
    if kind is NodeKind.SELECTOR:
        for child in node.children:
            status = _tick(child, bb, theta, trace)
            if status is not TickStatus.FAILURE:
                return status
        return TickStatus.FAILURE
    if kind is NodeKind.PARALLEL:
        results = [_tick(child, bb, theta, trace) for child in node.children]
        if TickStatus.FAILURE in results:
            return TickStatus.FAILURE
        if all(r is TickStatus.SUCCESS for r in results):
            return TickStatus.SUCCESS
        return TickStatus.RUNNING
    # decorator
    status = _tick(node.children[0], bb, theta, trace)
    if node.behavior == "invert" and status is not TickStatus.RUNNING:
        return TickStatus.FAILURE if status is TickStatus.SUCCESS else TickStatus.SUCCESS
    return status


# ---------------------------------------------------------------------------
# structural edits
# ---------------------------------------------------------------------------


def splice(host: BtNode, slot_label: str, subtree: BtNode) -> BtNode:
    """Return a copy of ``host`` with the unique node labeled ``slot_label`` replaced."""
    matches = sum(1 for n in host.walk() if n.label == slot_label)
    if matches != 1:
        raise SpliceError(f"expected exactly one node labeled {slot_label!r}, found {matches}")

    def rebuild(node: BtNode) -> BtNode:
        if node.label == slot_label:
            return subtree
        if not node.children:
            return node
        return replace(node, children=tuple(rebuild(c) for c in node.children))

    return rebuild(host)


def find(root: BtNode, label: str) -> BtNode:
    for node in root.walk():
        if node.label == label:
            return node
    raise KeyError(label)


def offset_bindings(root: BtNode, offset: int) -> BtNode:
    """Shift every bound index by ``offset`` (used when concatenating parameter vectors)."""

    def shift(slot: ParamSlot) -> ParamSlot:
        if slot.bound_index is None:
            return slot
        return replace(slot, bound_index=slot.bound_index + offset)

    def rebuild(node: BtNode) -> BtNode:
        return replace(
            node,
            params=tuple(shift(s) for s in node.params),
            children=tuple(rebuild(c) for c in node.children),
        )

    return rebuild(root)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------


def to_dict(node: BtNode) -> dict:
    out: dict = {"kind": node.kind.value, "label": node.label}
    if node.behavior is not None:
        out["behavior"] = node.behavior
    if node.params:
        out["params"] = []
        for s in node.params:
            entry = {"arg": s.arg, "name": s.name, "role": s.role.value}
            if s.bound_index is not None:
                entry["index"] = s.bound_index
            if s.fixed_value is not None:
                entry["value"] = s.fixed_value
            if s.unit:
                entry["unit"] = s.unit
            out["params"].append(entry)
    if node.children:
        out["children"] = [to_dict(c) for c in node.children]
    return out


def from_dict(data: dict) -> BtNode:
    try:
        kind = NodeKind(data["kind"])
        label = str(data["label"])
    except (KeyError, ValueError) as exc:
        raise StructuralError(f"bad node entry {data!r}: {exc}") from None
    params = []
    for entry in data.get("params", []):
        try:
            params.append(
                ParamSlot(
                    name=entry["name"],
                    role=SlotRole(entry.get("role", "skill_param")),
                    arg=entry["arg"],
                    bound_index=entry.get("index"),
                    fixed_value=entry.get("value"),
                    unit=entry.get("unit", ""),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad param slot in {label!r}: {exc}") from None
    children = tuple(from_dict(c) for c in data.get("children", []))
    return BtNode(kind, label, children, tuple(params), data.get("behavior"))


def load_tree(path: str | Path) -> BtNode:
    with open(path) as fh:
        root = from_dict(json.load(fh))
    validate(root)
    return root


def tree_hash(root: BtNode) -> str:
    blob = json.dumps(to_dict(root), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def render(root: BtNode, theta: Sequence[float] | None = None) -> str:
    """Human-readable tree; with ``theta`` every slot shows its resolved value."""
    lines: list[str] = []

    def fmt_slot(s: ParamSlot) -> str:
        unit = f" {s.unit}" if s.unit else ""
        if s.fixed_value is not None:
            return f"{s.arg}={s.fixed_value!r}{unit}"
        if theta is None:
            return f"{s.arg}=<{s.name}: theta[{s.bound_index}]>"
        return f"{s.arg}=<{s.name}>{float(theta[s.bound_index])!r}{unit}"

    def visit(node: BtNode, depth: int) -> None:
        head = {"Selector": "?", "Sequence": "->", "Parallel": "=>"}.get(node.kind.value, "")
        desc = f"{node.kind.value}"
        if node.behavior:
            desc += f"[{node.behavior}]"
        args = ", ".join(fmt_slot(s) for s in node.params)
        line = f"{'  ' * depth}{head + ' ' if head else ''}{desc} {node.label!r}"
        if args:
            line += f" ({args})"
        lines.append(line)
        for child in node.children:
            visit(child, depth + 1)

    visit(root, 0)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# flattening for the kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompiledTree:
    """Preorder arrays; children of node ``i`` are ``children[child_start[i]:child_start[i]+child_count[i]]``."""

    kind: np.ndarray
    behavior: np.ndarray
    child_start: np.ndarray
    child_count: np.ndarray
    children: np.ndarray
    param_start: np.ndarray
    values: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (
            self.kind,
            self.behavior,
            self.child_start,
            self.child_count,
            self.children,
            self.param_start,
            self.values,
        )


def compile_tree(root: BtNode, theta: Sequence[float]) -> CompiledTree:
    validate(root)
    nodes: list[BtNode] = []
    kids: list[list[int]] = []

    # shared subtrees are legal, so indices come from traversal order, not identity
    def number(node: BtNode) -> int:
        i = len(nodes)
        nodes.append(node)
        kids.append([])
        kids[i] = [number(c) for c in node.children]
        return i

    number(root)
    n = len(nodes)
    kind = np.empty(n, np.int64)
    behavior = np.full(n, -1, np.int64)
    child_start = np.zeros(n, np.int64)
    child_count = np.zeros(n, np.int64)
    param_start = np.zeros(n, np.int64)
    children: list[int] = []
    values: list[float] = []
    for i, node in enumerate(nodes):
        kind[i] = KIND_CODES[node.kind]
        if node.behavior is not None:
            beh = BEHAVIORS[node.behavior]
            behavior[i] = beh.code
            a = _args(node, theta)
            param_start[i] = len(values)
            values.extend(a[name] for name in beh.args)
        child_start[i] = len(children)
        child_count[i] = len(kids[i])
        children.extend(kids[i])
    return CompiledTree(
        kind,
        behavior,
        child_start,
        child_count,
        np.asarray(children if children else [0], np.int64),
        param_start,
        np.asarray(values if values else [0.0], np.float64),
    )
