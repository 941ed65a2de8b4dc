"""Weight-sharing supernet: parameters, candidate operators and the mixed forward pass.

A node's value is a gated sum over its active incoming connections::

    x_j = sum_(i,j) g(beta_ij) * sum_o g(alpha_ij^o) * o(x_i)

with ``g`` the logistic sigmoid. A searched node with no active input is
absent for that pass: its outgoing connections contribute nothing, and an
absent stage output is replaced by zeros.

A 1x1 stem maps the input to the first stage's channels. Each stage output
passes through a fixed reduction unit (ReLU, stride-2 subsampling when the
stage reduces, 1x1 convolution to the next channel count); the classifier is
global average pooling plus an affine map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ifnas import autodiff as ad
from ifnas.autodiff import Tensor
from ifnas.space import Connection, OperatorKind, Supernet, SupernetSpec, sorted_pairs

CHECKPOINT_VERSION = 1


def gate(v):
    """Logistic sigmoid on a float, array or :class:`Tensor`."""
    if isinstance(v, Tensor):
        return ad.sigmoid(v)
    return 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=np.float64)))


def gate_grad(v):
    g = gate(v)
    return g * (1.0 - g)


def _pname(c: Connection, o: OperatorKind | None = None, part: str | None = None) -> str:
    name = f"s{c.stage}_{c.source}_{c.target}"
    if o is not None:
        name += f"/{o.value}"
    if part is not None:
        name += f"/{part}"
    return name


@dataclass
class ParamStore:
    """All learnable state: ``beta`` per connection, ``alpha`` and ``omega`` per pair.

    ``fixed`` holds the non-searched stem, reduction units and classifier head.
    """

    spec: SupernetSpec
    beta: dict = field(default_factory=dict)
    alpha: dict = field(default_factory=dict)
    omega: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)

    @classmethod
    def init(cls, supernet: Supernet, rng: np.random.Generator, beta0: float = 0.0,
             alpha0: float = 0.0, weight_scale: float = 1.0) -> "ParamStore":
        spec = supernet.spec
        ps = cls(spec)
        for c in supernet.connections:
            ps.beta[c] = Tensor(np.float64(beta0), name=_pname(c, part="beta"))
        for c in supernet.connections:
            st = spec.stages[c.stage]
            C, hw = st.channels, st.spatial_size ** 2
            for o in spec.operator_set:
                ps.alpha[(c, o)] = Tensor(np.float64(alpha0), name=_pname(c, o, "alpha"))
                if o is OperatorKind.SEP_CONV_3X3:
                    ps.omega[(c, o)] = {
                        "dw": Tensor(rng.normal(0, weight_scale / 3.0, (C, 3, 3)),
                                     name=_pname(c, o, "dw")),
                        "pw": Tensor(rng.normal(0, weight_scale / np.sqrt(C), (C, C)),
                                     name=_pname(c, o, "pw")),
                    }
                elif o is OperatorKind.TOY_LINEAR:
                    f = C * hw
                    ps.omega[(c, o)] = {
                        "w": Tensor(rng.normal(0, weight_scale * np.sqrt(2.0 / f), (f, f)),
                                    name=_pname(c, o, "w")),
                        "b": Tensor(np.zeros(f), name=_pname(c, o, "b")),
                    }
                else:
                    ps.omega[(c, o)] = {}
        c0 = spec.stages[0].channels
        ps.fixed["stem"] = Tensor(rng.normal(0, 1.0 / np.sqrt(spec.in_channels),
                                             (c0, spec.in_channels)), name="stem")
        for s in range(len(spec.stages) - 1):
            cin, cout = spec.stages[s].channels, spec.stages[s + 1].channels
            ps.fixed[f"reduce{s}"] = Tensor(rng.normal(0, np.sqrt(2.0 / cin), (cout, cin)),
                                            name=f"reduce{s}")
        clast = spec.stages[-1].channels
        ps.fixed["head_w"] = Tensor(rng.normal(0, 1.0 / np.sqrt(clast),
                                               (spec.num_classes, clast)), name="head_w")
        ps.fixed["head_b"] = Tensor(np.zeros(spec.num_classes), name="head_b")
        return ps

    def arch_leaves(self) -> Iterable[Tensor]:
        yield from self.beta.values()
        yield from self.alpha.values()

    def weight_leaves(self) -> Iterable[Tensor]:
        for block in self.omega.values():
            yield from block.values()
        yield from self.fixed.values()

    def leaves(self) -> Iterable[Tensor]:
        yield from self.arch_leaves()
        yield from self.weight_leaves()

    def named_leaves(self) -> dict[str, Tensor]:
        """Leaves keyed by stable names in canonical connection order."""
        out = {}
        for c in sorted(self.beta):
            out[f"beta/{_pname(c)}"] = self.beta[c]
        for c, o in sorted_pairs(self.alpha):
            out[f"alpha/{_pname(c, o)}"] = self.alpha[(c, o)]
        for c, o in sorted_pairs(self.omega):
            for part in sorted(self.omega[(c, o)]):
                out[f"omega/{_pname(c, o, part)}"] = self.omega[(c, o)][part]
        for k in sorted(self.fixed):
            out[f"fixed/{k}"] = self.fixed[k]
        return out

    def zero_grad(self):
        for t in self.leaves():
            t.grad = None

    def set_requires_grad(self, flag: bool):
        for t in self.leaves():
            t.requires_grad = flag

    def save(self, path):
        arrays = {k: t.data for k, t in self.named_leaves().items()}
        arrays["__meta__"] = np.frombuffer(json.dumps(
            {"version": CHECKPOINT_VERSION, "spec": self.spec.to_dict()}).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    def load_arrays(self, arrays) -> None:
        named = self.named_leaves()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]}")
        for k, t in named.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.data.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
            t.bump_version()

    @classmethod
    def load(cls, path, supernet: Supernet) -> "ParamStore":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            ps = cls.init(supernet, np.random.default_rng(0))
            ps.load_arrays({k: z[k] for k in z.files if k != "__meta__"})
        return ps


def apply_operator(kind: OperatorKind, x: Tensor, block: dict) -> Tensor:
    if kind is OperatorKind.SKIP:
        return x
    if kind is OperatorKind.SEP_CONV_3X3:
        h = ad.relu(x)
        h = ad.depthwise_conv3x3(h, block["dw"])
        return ad.pointwise_conv(h, block["pw"])
    if kind is OperatorKind.TOY_LINEAR:
        b = x.shape[0]
        h = ad.relu(ad.reshape(x, (b, -1)))
        w = block["w"]
        if w.shape[1] != h.shape[1]:
            raise ad.ShapeError(f"ToyLinear: input {x.shape} with weight {w.shape}")
        return ad.reshape(ad.dense(h, w, block["b"]), x.shape)
    raise ValueError(f"unknown operator {kind!r}")


@dataclass
class ForwardResult:
    logits: Tensor
    loss: Tensor
    ce: Tensor


def stage_nodes(supernet: Supernet, stage: int, active, params: ParamStore, h: Tensor,
                pruned_edges=frozenset(), pruned_ops=frozenset()) -> list:
    """Values of nodes ``0..N`` of one stage; absent nodes are ``None``."""
    spec = supernet.spec
    nodes = [h]
    for j in range(1, spec.stages[stage].node_count + 1):
        terms = []
        for c in supernet.incoming[(stage, j)]:
            if c not in active or c in pruned_edges:
                continue
            xi = nodes[c.source]
            if xi is None:
                continue
            inner = []
            for o in spec.operator_set:
                if (c, o) in pruned_ops:
                    continue
                out = apply_operator(o, xi, params.omega[(c, o)])
                inner.append(ad.scale(out, ad.sigmoid(params.alpha[(c, o)])))
            if not inner:
                continue
            mixed = inner[0] if len(inner) == 1 else ad.accumulate(inner)
            terms.append(ad.scale(mixed, ad.sigmoid(params.beta[c])))
        if not terms:
            nodes.append(None)
        else:
            nodes.append(terms[0] if len(terms) == 1 else ad.accumulate(terms))
    return nodes


def forward_mixed(supernet: Supernet, mask, params: ParamStore, batch,
                  pruned_edges=frozenset(), pruned_ops=frozenset(),
                  penalty: Callable[[], Tensor] | None = None) -> ForwardResult:
    """Run the masked supernet on ``batch = (x, y)``; returns logits and loss.

    ``mask`` is a :class:`~ifnas.interleave.SampleMask` or any collection of
    connections. Pruned connections and pruned (connection, operator) pairs
    never contribute. ``penalty`` adds an extra scalar term to the loss.
    """
    spec = supernet.spec
    active = getattr(mask, "active", mask)
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != spec.in_channels or x.shape[2] != spec.stages[0].spatial_size:
        raise ad.ShapeError(f"input batch {x.shape} does not match the supernet input shape")
    h = ad.pointwise_conv(Tensor(x), params.fixed["stem"])
    for s, st in enumerate(spec.stages):
        out = stage_nodes(supernet, s, active, params, h, pruned_edges, pruned_ops)[-1]
        if out is None:
            out = Tensor(np.zeros(h.shape))
        if s + 1 < len(spec.stages):
            h = ad.relu(out)
            if st.reduction_after:
                h = ad.subsample2(h)
            h = ad.pointwise_conv(h, params.fixed[f"reduce{s}"])
        else:
            h = out
    logits = ad.dense(ad.global_avg_pool(h), params.fixed["head_w"], params.fixed["head_b"])
    ce = ad.cross_entropy(logits, np.asarray(y))
    loss = ce if penalty is None else ad.add(ce, penalty())
    return ForwardResult(logits, loss, ce)
