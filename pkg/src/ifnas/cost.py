"""Multiply-add and parameter accounting for architectures.

Costs are counted per output element: a 3x3 separable convolution on a
``(C, H, W)`` map costs ``H*W*C*9`` for the depthwise part plus ``H*W*C*C``
for the pointwise part; ReLU and Skip are free. The fixed parts of the
network (stem, inter-stage reduction units, classifier head) always count.
"""

from __future__ import annotations

import math

from ifnas.space import DiscreteArchitecture, OperatorKind, SupernetSpec


def op_madds(spec: SupernetSpec, stage: int, op: OperatorKind) -> int:
    st = spec.stages[stage]
    c, hw = st.channels, st.spatial_size * st.spatial_size
    if op is OperatorKind.SKIP:
        return 0
    if op is OperatorKind.SEP_CONV_3X3:
        return hw * c * (9 + c)
    if op is OperatorKind.TOY_LINEAR:
        f = c * hw
        return f * f
    raise ValueError(f"unknown operator {op!r}")


def op_params(spec: SupernetSpec, stage: int, op: OperatorKind) -> int:
    st = spec.stages[stage]
    c = st.channels
    if op is OperatorKind.SKIP:
        return 0
    if op is OperatorKind.SEP_CONV_3X3:
        return 9 * c + c * c
    if op is OperatorKind.TOY_LINEAR:
        f = c * st.spatial_size * st.spatial_size
        return f * f + f
    raise ValueError(f"unknown operator {op!r}")


def reduction_shape(spec: SupernetSpec, stage: int) -> tuple[int, int, int]:
    """(in_channels, out_channels, out_spatial) of the unit after ``stage``."""
    st, nxt = spec.stages[stage], spec.stages[stage + 1]
    return st.channels, nxt.channels, nxt.spatial_size


def fixed_madds(spec: SupernetSpec) -> int:
    first = spec.stages[0]
    total = first.spatial_size ** 2 * spec.in_channels * first.channels  # stem
    for s in range(len(spec.stages) - 1):
        cin, cout, sp = reduction_shape(spec, s)
        total += sp * sp * cin * cout
    total += spec.stages[-1].channels * spec.num_classes  # head
    return total


def fixed_params(spec: SupernetSpec) -> int:
    total = spec.in_channels * spec.stages[0].channels
    for s in range(len(spec.stages) - 1):
        cin, cout, _ = reduction_shape(spec, s)
        total += cin * cout
    total += spec.stages[-1].channels * spec.num_classes + spec.num_classes
    return total


def madds(arch: DiscreteArchitecture) -> int:
    """Deterministic integer multiply-add count of ``arch``."""
    spec = arch.spec
    return fixed_madds(spec) + sum(op_madds(spec, c.stage, o) for c, o in arch.alive)


def param_count(arch: DiscreteArchitecture) -> int:
    spec = arch.spec
    return fixed_params(spec) + sum(op_params(spec, c.stage, o) for c, o in arch.alive)


def minimal_madds(spec: SupernetSpec) -> int:
    """Cost of the cheapest valid architecture (cheapest-operator shortest path per stage)."""
    total = fixed_madds(spec)
    for s, st in enumerate(spec.stages):
        unit = min(op_madds(spec, s, o) for o in spec.operator_set)
        if unit:
            total += unit * math.ceil(st.node_count / spec.L)
    return total
