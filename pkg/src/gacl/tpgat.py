"""Target-prompt graph attention: invocation-specific user and service features per slice.

For a target invocation (u, s) each snapshot in the window is expanded
``l_g`` hops around both endpoints. At every layer a node aggregates its
neighbours with attention

    attn  = sigmoid(W_attn . (x_center + x_nb))
    x_hat = [norm(x_prompt + x_nb) || norm(W_w * w + b_w)]
    attn' = tanh(W_alpha . x_hat + b_alpha) * attn + tanh(W_beta . x_hat + b_beta)

where the prompt is the target endpoint of the neighbour's type (the target
service when aggregating a user's services, and vice versa), followed by a
softmax over the neighbour set and a residual PReLU update.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .diffcore import ParameterStore, Tensor, ops
from .diffcore.params import normal, uniform_fan_in
from .dyngraph import DynamicInvocationGraph

SIDES = ("user", "service")


class Ablation(str, Enum):
    FULL = "full"
    NO_TARGET = "no_target"        # GACL-t
    NO_WEIGHT = "no_weight"        # GACL-w
    SEMANTIC_ONLY = "semantic_only"  # GACL-tw

    @classmethod
    def parse(cls, value) -> "Ablation":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "full": cls.FULL, "gacl": cls.FULL,
            "t": cls.NO_TARGET, "gacl-t": cls.NO_TARGET, "no_target": cls.NO_TARGET,
            "w": cls.NO_WEIGHT, "gacl-w": cls.NO_WEIGHT, "no_weight": cls.NO_WEIGHT,
            "tw": cls.SEMANTIC_ONLY, "gacl-tw": cls.SEMANTIC_ONLY, "semantic_only": cls.SEMANTIC_ONLY,
        }
        if key not in aliases:
            raise ValueError(f"unknown ablation {value!r}; expected one of full, t, w, tw")
        return aliases[key]

    @property
    def label(self) -> str:
        return {"full": "full", "no_target": "gacl-t", "no_weight": "gacl-w",
                "semantic_only": "gacl-tw"}[self.value]

    @property
    def uses_target(self) -> bool:
        return self in (Ablation.FULL, Ablation.NO_WEIGHT)

    @property
    def uses_weight(self) -> bool:
        return self in (Ablation.FULL, Ablation.NO_TARGET)

    @property
    def prompt_width_factor(self) -> int:
        return int(self.uses_target) + int(self.uses_weight)


@dataclass
class SideParams:
    """One layer's parameters for one aggregation side; unused ones are None."""

    W_attn: Tensor
    W_msg: Tensor
    prelu_slope: Tensor
    W_w: Tensor | None = None
    b_w: Tensor | None = None
    W_alpha: Tensor | None = None
    b_alpha: Tensor | None = None
    W_beta: Tensor | None = None
    b_beta: Tensor | None = None


@dataclass(frozen=True)
class InvocationContext:
    target_user: int      # global node id
    target_service: int   # global node id
    slice: int
    ablation: Ablation = Ablation.FULL


def param_name(layer: int, side: str, name: str) -> str:
    return f"tpgat.layer{layer}.{side}.{name}"


def init_params(ps: ParameterStore, rng: np.random.Generator, n_nodes: int, d: int, l_g: int,
                ablation: Ablation) -> None:
    ablation = Ablation.parse(ablation)
    ps.add("tpgat.embedding", normal(rng, (n_nodes, d), 0.1))
    width = ablation.prompt_width_factor * d
    for layer in range(1, l_g + 1):
        for side in SIDES:
            ps.add(param_name(layer, side, "W_attn"), uniform_fan_in(rng, (d,), d))
            if ablation.uses_weight:
                ps.add(param_name(layer, side, "W_w"), uniform_fan_in(rng, (d,), 1))
                # a zero bias would put the minimum-QoS edge (w = 0) at the l2-norm singularity
                ps.add(param_name(layer, side, "b_w"), uniform_fan_in(rng, (), 1), decay=False)
            if width:
                ps.add(param_name(layer, side, "W_alpha"), uniform_fan_in(rng, (width,), width))
                ps.add(param_name(layer, side, "b_alpha"), np.zeros(()), decay=False)
                ps.add(param_name(layer, side, "W_beta"), uniform_fan_in(rng, (width,), width))
                ps.add(param_name(layer, side, "b_beta"), np.zeros(()), decay=False)
            ps.add(param_name(layer, side, "W_msg"), uniform_fan_in(rng, (d, d), d))
            ps.add(param_name(layer, side, "prelu_slope"), np.full((), 0.25), decay=False)


def side_params(params: Mapping[str, Tensor], layer: int, side: str) -> SideParams:
    def get(name):
        return params.get(param_name(layer, side, name))

    return SideParams(W_attn=get("W_attn"), W_msg=get("W_msg"), prelu_slope=get("prelu_slope"),
                      W_w=get("W_w"), b_w=get("b_w"), W_alpha=get("W_alpha"), b_alpha=get("b_alpha"),
                      W_beta=get("W_beta"), b_beta=get("b_beta"))


# -- per-edge operations (work on single vectors or batches of edges) ------

def semantic_attention(x_center, x_neighbor, layer: SideParams) -> Tensor:
    """sigmoid(W_attn . (x_center + x_neighbor)); batched over leading axes."""
    return ops.sigmoid(ops.matmul(ops.add(x_center, x_neighbor), layer.W_attn))


def target_prompt_adjust(attn, x_target, x_neighbor, w_hist, layer: SideParams,
                         ablation: Ablation) -> Tensor:
    """alpha * attn + beta with alpha, beta from the target prompt.

    ``w_hist`` is the normalised QoS of the (center, neighbour) edge, a
    scalar or one value per edge.
    """
    ablation = Ablation.parse(ablation)
    if ablation is Ablation.SEMANTIC_ONLY:
        return attn
    parts = []
    if ablation.uses_target:
        parts.append(ops.l2_normalize(ops.add(x_target, x_neighbor)))
    if ablation.uses_weight:
        w = np.asarray(w_hist, dtype=np.float64)[..., None]
        parts.append(ops.l2_normalize(ops.add(ops.mul(w, layer.W_w), layer.b_w)))
    x_hat = parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)
    alpha = ops.tanh(ops.add(ops.matmul(x_hat, layer.W_alpha), layer.b_alpha))
    beta = ops.tanh(ops.add(ops.matmul(x_hat, layer.W_beta), layer.b_beta))
    return ops.add(ops.mul(alpha, attn), beta)


def propagate_layer(center: int, neighbors: Sequence[tuple[int, float]], features: Mapping[int, Tensor],
                    ctx: InvocationContext, layer: SideParams, center_is_user: bool) -> Tensor:
    """New feature of one ``center`` from its (neighbour id, edge weight) list."""
    x_c = features[center]
    if not neighbors:
        return ops.prelu(x_c, layer.prelu_slope)
    prompt = features[ctx.target_service if center_is_user else ctx.target_user]
    ids = [n for n, _ in neighbors]
    w = np.array([wt for _, wt in neighbors], dtype=np.float64)
    x_n = ops.concat([ops.reshape(features[i], (1, -1)) for i in ids], axis=0)
    attn = semantic_attention(ops.reshape(x_c, (1, -1)), x_n, layer)
    attn = target_prompt_adjust(attn, ops.reshape(prompt, (1, -1)), x_n, w, layer, ctx.ablation)
    weights = ops.softmax(attn, axis=-1)
    messages = ops.matmul(x_n, ops.transpose(layer.W_msg))
    agg = ops.matmul(weights, messages)
    return ops.prelu(ops.add(x_c, agg), layer.prelu_slope)


# -- batched extraction ----------------------------------------------------

@dataclass(frozen=True)
class _Instance:
    """Local subgraph of one (user, service, slice); nodes[0] is the user, nodes[1] the service."""

    nodes: np.ndarray
    center: np.ndarray
    neighbor: np.ndarray
    weight: np.ndarray
    hop: np.ndarray
    center_is_user: np.ndarray


def _expand(g: DynamicInvocationGraph, u_node: int, s_node: int, t: int, l_g: int,
            cap: int | None, seed: int) -> _Instance:
    local = {u_node: 0, s_node: 1}
    nodes = [u_node, s_node]
    hop_of = [0, 0]
    center, neighbor, weight, hop, is_user = [], [], [], [], []
    i = 0
    while i < len(nodes):
        v, h = nodes[i], hop_of[i]
        if h < l_g:
            for nb, w in g.neighbors(v, t, cap, seed):
                j = local.get(nb)
                if j is None:
                    j = len(nodes)
                    local[nb] = j
                    nodes.append(nb)
                    hop_of.append(h + 1)
                center.append(i)
                neighbor.append(j)
                weight.append(w)
                hop.append(h)
                is_user.append(g.is_user(v))
        i += 1
    return _Instance(np.array(nodes, dtype=np.int64), np.array(center, dtype=np.int64),
                     np.array(neighbor, dtype=np.int64), np.array(weight, dtype=np.float64),
                     np.array(hop, dtype=np.int64), np.array(is_user, dtype=bool))


@dataclass(frozen=True)
class WindowBatch:
    """Disjoint union of the expanded subgraphs of ``B`` targets over ``ws`` slices."""

    n_targets: int
    ws: int
    nodes: np.ndarray          # global node id per local row
    node_is_user: np.ndarray
    user_rows: np.ndarray      # (B*ws,) local row of the target user, oldest slice first
    service_rows: np.ndarray
    center: np.ndarray
    neighbor: np.ndarray
    weight: np.ndarray
    hop: np.ndarray
    center_is_user: np.ndarray
    prompt: np.ndarray         # local row of the prompting target endpoint per edge
    edge_slice: np.ndarray

    def edge_triples(self, n_users: int) -> set[tuple[int, int, int]]:
        """(user, service, slice) of every snapshot edge the batch reads."""
        c = self.nodes[self.center]
        n = self.nodes[self.neighbor]
        u = np.where(self.center_is_user, c, n)
        s = np.where(self.center_is_user, n, c) - n_users
        return set(zip(u.tolist(), s.tolist(), self.edge_slice.tolist()))


class WindowBuilder:
    """Builds :class:`WindowBatch` objects, caching per-(user, service, slice) expansions."""

    def __init__(self, g: DynamicInvocationGraph, ws: int, l_g: int, cap: int | None, seed: int):
        self.g, self.ws, self.l_g, self.cap, self.seed = g, ws, l_g, cap, seed
        self._cache: dict[tuple[int, int, int], _Instance] = {}

    def instance(self, u: int, s: int, t: int) -> _Instance:
        key = (u, s, t)
        inst = self._cache.get(key)
        if inst is None:
            inst = _expand(self.g, self.g.user_node(u), self.g.service_node(s), t, self.l_g, self.cap, self.seed)
            self._cache[key] = inst
        return inst

    def build(self, targets: Sequence[tuple[int, int, int]]) -> WindowBatch:
        """``targets`` are (user, service, target_slice) with target_slice >= ws."""
        ws = self.ws
        parts = []
        offset = 0
        user_rows, service_rows = [], []
        for u, s, T in targets:
            if T < ws:
                raise ValueError(f"target slice {T} has fewer than ws={ws} preceding slices")
            if T > self.g.n_slices:
                raise ValueError(f"target slice {T} lies beyond the next unseen slice {self.g.n_slices}")
            for t in range(T - ws, T):
                inst = self.instance(u, s, t)
                parts.append((inst, offset, t))
                user_rows.append(offset)
                service_rows.append(offset + 1)
                offset += inst.nodes.size

        nodes = np.concatenate([p[0].nodes for p in parts])
        center = np.concatenate([p[0].center + p[1] for p in parts])
        neighbor = np.concatenate([p[0].neighbor + p[1] for p in parts])
        cis = np.concatenate([p[0].center_is_user for p in parts])
        prompt = np.concatenate([np.where(p[0].center_is_user, p[1] + 1, p[1]) for p in parts])
        edge_slice = np.concatenate([np.full(p[0].center.size, p[2], dtype=np.int64) for p in parts])
        return WindowBatch(
            n_targets=len(targets), ws=ws, nodes=nodes, node_is_user=nodes < self.g.n_users,
            user_rows=np.array(user_rows, dtype=np.int64), service_rows=np.array(service_rows, dtype=np.int64),
            center=center, neighbor=neighbor,
            weight=np.concatenate([p[0].weight for p in parts]),
            hop=np.concatenate([p[0].hop for p in parts]),
            center_is_user=cis, prompt=prompt, edge_slice=edge_slice,
        )


def message_pass(X: Tensor, wb: WindowBatch, layer: int, l_g: int, params: Mapping[str, Tensor],
                 ablation: Ablation, weights_out: list | None = None) -> Tensor:
    """One propagation layer over every local subgraph in the batch.

    Only centers within ``l_g - layer`` hops of a target are updated; rows
    further out are never read again.
    """
    n = wb.nodes.size
    active = wb.hop <= l_g - layer
    pre = X
    slopes = []
    for side, side_mask in (("user", wb.center_is_user), ("service", ~wb.center_is_user)):
        p = side_params(params, layer, side)
        slopes.append(p.prelu_slope)
        idx = np.nonzero(active & side_mask)[0]
        if idx.size == 0:
            continue
        c, nb = wb.center[idx], wb.neighbor[idx]
        x_c = ops.take(X, c)
        x_n = ops.take(X, nb)
        attn = semantic_attention(x_c, x_n, p)
        if ablation is not Ablation.SEMANTIC_ONLY:
            x_t = ops.take(X, wb.prompt[idx]) if ablation.uses_target else None
            attn = target_prompt_adjust(attn, x_t, x_n, wb.weight[idx], p, ablation)
        soft = ops.segment_softmax(attn, c, n)
        if weights_out is not None:
            weights_out.append((c, soft.data.copy()))
        msg = ops.mul(ops.matmul(x_n, ops.transpose(p.W_msg)), ops.reshape(soft, (-1, 1)))
        pre = ops.add(pre, ops.segment_sum(msg, c, n))
    is_user = wb.node_is_user[:, None].astype(np.float64)
    slope_rows = ops.add(ops.mul(is_user, slopes[0]), ops.mul(1.0 - is_user, slopes[1]))
    return ops.prelu(pre, slope_rows)


def extract_batch(params: Mapping[str, Tensor], wb: WindowBatch, l_g: int, ablation: Ablation,
                  weights_out: list | None = None) -> tuple[Tensor, Tensor]:
    """User and service feature sequences, each of shape (B, ws, d), oldest slice first."""
    ablation = Ablation.parse(ablation)
    X = ops.embedding_lookup(params["tpgat.embedding"], wb.nodes)
    for layer in range(1, l_g + 1):
        X = message_pass(X, wb, layer, l_g, params, ablation, weights_out)
    d = X.shape[-1]
    users = ops.reshape(ops.take(X, wb.user_rows), (wb.n_targets, wb.ws, d))
    services = ops.reshape(ops.take(X, wb.service_rows), (wb.n_targets, wb.ws, d))
    return users, services


def extract_features(g: DynamicInvocationGraph, ctx: InvocationContext, ws: int, l_g: int,
                     cap: int | None, seed: int, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """(ws, d) user and service feature matrices for one target invocation.

    ``ctx.slice`` is the slice being predicted; features come from the ``ws``
    slices before it.
    """
    if ctx.slice < ws:
        raise ValueError(f"target slice {ctx.slice} needs ws={ws} preceding slices")
    u = ctx.target_user
    s = ctx.target_service - g.n_users
    wb = WindowBuilder(g, ws, l_g, cap, seed).build([(u, s, ctx.slice)])
    users, services = extract_batch(params, wb, l_g, ctx.ablation)
    d = users.shape[-1]
    return ops.reshape(users, (ws, d)), ops.reshape(services, (ws, d))
