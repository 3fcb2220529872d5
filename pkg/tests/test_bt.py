import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btms import bt
from btms.bt import (
    BindingError,
    Blackboard,
    BtNode,
    ConfigurationError,
    NodeKind,
    ParamSlot,
    SlotRole,
    SpliceError,
    StructuralError,
    TickStatus,
)
from btms.scenarios import load_packaged_tree

FIXED = {
    "always_success": (NodeKind.CONDITION, TickStatus.SUCCESS),
    "always_failure": (NodeKind.CONDITION, TickStatus.FAILURE),
    "succeed": (NodeKind.ACTION, TickStatus.SUCCESS),
    "fail": (NodeKind.ACTION, TickStatus.FAILURE),
    "run": (NodeKind.ACTION, TickStatus.RUNNING),
}

_labels = iter(range(10**9))


def _leaf(name):
    kind, _ = FIXED[name]
    return BtNode(kind, f"leaf{next(_labels)}", behavior=name)


leaves = st.sampled_from(sorted(FIXED)).map(_leaf)


def _compose(children):
    return st.one_of(
        st.lists(children, min_size=1, max_size=4).map(
            lambda cs: BtNode(NodeKind.SEQUENCE, f"seq{next(_labels)}", tuple(cs))
        ),
        st.lists(children, min_size=1, max_size=4).map(
            lambda cs: BtNode(NodeKind.SELECTOR, f"sel{next(_labels)}", tuple(cs))
        ),
        children.map(lambda c: BtNode(NodeKind.DECORATOR, f"inv{next(_labels)}", (c,), behavior="invert")),
    )


trees = st.recursive(leaves, _compose, max_leaves=12)


def _outcome(node):
    return FIXED[node.behavior][1]


@given(trees)
def test_sequence_stops_at_first_non_success(tree):
    for node in tree.walk():
        if node.kind is NodeKind.SEQUENCE:
            trace = []
            status = bt.tick(node, Blackboard(), (), trace)
            ticked = [c for c in node.children if c in trace]
            statuses = [bt.tick(c, Blackboard()) for c in ticked]
            assert all(s is TickStatus.SUCCESS for s in statuses[:-1])
            if status is TickStatus.SUCCESS:
                assert len(ticked) == len(node.children)
            else:
                assert statuses[-1] is status


@given(trees)
def test_selector_stops_at_first_non_failure(tree):
    for node in tree.walk():
        if node.kind is NodeKind.SELECTOR:
            status = bt.tick(node, Blackboard())
            results = [bt.tick(c, Blackboard()) for c in node.children]
            first = next((s for s in results if s is not TickStatus.FAILURE), TickStatus.FAILURE)
            assert status is first


@given(trees)
def test_ticks_are_deterministic(tree):
    a, b = [], []
    assert bt.tick(tree, Blackboard(), (), a) == bt.tick(tree, Blackboard(), (), b)
    assert a == b


@given(trees)
def test_json_round_trip(tree):
    assert bt.from_dict(json.loads(json.dumps(bt.to_dict(tree)))) == tree
    assert bt.tree_hash(bt.from_dict(bt.to_dict(tree))) == bt.tree_hash(tree)


@given(trees, st.data())
def test_splice_replaces_exactly_one_node(tree, data):
    nodes = list(tree.walk())
    target = data.draw(st.sampled_from(nodes))
    new = BtNode(NodeKind.ACTION, target.label, behavior="run")
    out = bt.splice(tree, target.label, new)
    assert bt.find(out, target.label) == new
    assert out.size() == tree.size() - target.size() + 1
    assert bt.splice(out, target.label, target) == tree


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_threshold_conditions_never_run(z, threshold):
    slot = ParamSlot("t", SlotRole.THRESHOLD, "threshold", bound_index=0)
    bb = Blackboard(peg_position=np.array([z, 0.0, z]))
    for name in ("z_above", "z_below", "x_above"):
        node = BtNode(NodeKind.CONDITION, name, params=(slot,), behavior=name)
        assert bt.tick(node, bb, (threshold,)) in (TickStatus.SUCCESS, TickStatus.FAILURE)


def test_splice_requires_a_unique_label():
    tree = BtNode(NodeKind.SEQUENCE, "root", (_leaf("run"), _leaf("run")))
    with pytest.raises(SpliceError):
        bt.splice(tree, "missing", _leaf("run"))
    dup = BtNode(NodeKind.SEQUENCE, "root", (BtNode(NodeKind.ACTION, "x", behavior="run"),) * 2)
    with pytest.raises(SpliceError):
        bt.splice(dup, "x", _leaf("run"))


def test_only_one_action_may_write_per_tick():
    move = BtNode(
        NodeKind.ACTION,
        "m",
        params=tuple(ParamSlot(a, SlotRole.SKILL_PARAM, a, fixed_value=0.1) for a in ("x", "y", "z", "v_p")),
        behavior="move_to",
    )
    par = BtNode(NodeKind.PARALLEL, "p", (move, replace(move, label="m2")))
    with pytest.raises(ConfigurationError):
        bt.tick(par, Blackboard())


@pytest.mark.parametrize(
    "node,error",
    [
        (BtNode(NodeKind.SEQUENCE, "empty"), StructuralError),
        (BtNode(NodeKind.CONDITION, "c", (_leaf("run"),), behavior="always_success"), StructuralError),
        (BtNode(NodeKind.CONDITION, "c", behavior="teleport"), ConfigurationError),
        (BtNode(NodeKind.CONDITION, "c", behavior="z_above"), ConfigurationError),
        (
            BtNode(
                NodeKind.CONDITION,
                "c",
                params=(ParamSlot("t", SlotRole.THRESHOLD, "threshold"),),
                behavior="z_above",
            ),
            ConfigurationError,
        ),
        (BtNode(NodeKind.DECORATOR, "d", (_leaf("run"), _leaf("run")), behavior="invert"), StructuralError),
    ],
)
def test_validation_errors(node, error):
    with pytest.raises(error):
        bt.validate(node)


def test_binding_reports_each_name_once_in_tree_order():
    tree = load_packaged_tree("peg")
    report = bt.bind_params(tree, [0.04, 0.003])
    names = [n for n, _ in report]
    assert len(names) == len(set(names))
    assert dict(report)["g3.z"] == 0.04 and dict(report)["v_s"] == 0.003


def test_binding_rejects_short_vectors():
    with pytest.raises(BindingError):
        bt.bind_params(load_packaged_tree("obstacle"), [0.1, 0.2])


def test_offset_bindings_shifts_every_bound_slot():
    tree = load_packaged_tree("peg")
    shifted = bt.offset_bindings(tree, 6)
    assert bt.max_bound_index(shifted) == bt.max_bound_index(tree) + 6
    fixed = [s.fixed_value for s in bt.slots(tree)]
    assert [s.fixed_value for s in bt.slots(shifted)] == fixed


def test_render_shows_bound_values():
    tree = load_packaged_tree("obstacle")
    text = bt.render(tree, [0.3, 0.08, -0.2, 0.35, 0.15, 0.35])
    assert "threshold=<p1>0.3 m" in text
    assert bt.render(tree).count("theta[") == 6


def test_compiled_tree_arrays_are_consistent():
    tree = load_packaged_tree("obstacle")
    c = bt.compile_tree(tree, np.arange(6) / 10)
    assert len(c.kind) == tree.size()
    assert int(c.child_count.sum()) == tree.size() - 1
    assert 0.5 in c.values  # g2.z resolved into the value table


def test_load_tree_rejects_bad_files(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(json.dumps({"kind": "Sequence", "label": "root", "children": []}))
    with pytest.raises(StructuralError):
        bt.load_tree(path)
    path.write_text(json.dumps({"label": "root"}))
    with pytest.raises(StructuralError):
        bt.load_tree(path)
