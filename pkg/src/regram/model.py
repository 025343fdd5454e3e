"""The appraisal network: transaction encoder, neighbor aggregator,
community aggregator and dynamic kernel adaptor.

Everything runs batched. A :class:`Batch` holds the feature rows of every
transaction touched by a group of targets (the targets themselves, their
transaction-level neighbors and the usable members of their neighbor
communities) plus index arrays wiring them together, so one forward pass
encodes each row once and the aggregators reduce over edges with segment ops.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.ops import BatchNormState
from .autodiff.tensor import Tensor, as_tensor
from .encoding import FeaturePair
from .errors import ContractError, ShapeError, UnknownTargetError
from .graph import NeighborContext


@dataclass
class ModelConfig:
    d_env: int
    d_obj: int
    d_m: int = 256
    n_kernels: int = 8
    n_heads: int = 8
    tau: float = 30.0
    use_price: bool = True
    use_relation: bool = True
    use_community: bool = True

    @property
    def use_neighbors(self) -> bool:
        return self.use_price or self.use_relation

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Name -> (shape, fan_in) for every learnable tensor, in registration order."""
    dm, dx, dxt, K, H = cfg.d_m, 2 * cfg.d_m + 1, cfg.d_m + 1, cfg.n_kernels, cfg.n_heads
    dh = 4 * dm + 1
    return {
        "W_e1": ((2 * dm, cfg.d_env), cfg.d_env),
        "W_e2": ((dm, 2 * dm), 2 * dm),
        "W_o1": ((dm, cfg.d_obj), cfg.d_obj),
        "W_o2": ((dm, dm), dm),
        "W_x": ((dm, 2 * dm), 2 * dm),
        "W_r": ((dm, 2 * dx), 2 * dx),
        "w_a": ((H, dm), dm),
        "w_d": ((1, dm), dm),
        "W_u1": ((dm, dxt), dxt),
        "v_u": ((1, dm), dm),
        "W_u2": ((dm, dxt), dxt),
        "W_c1": ((dm, 2 * dm), 2 * dm),
        "v_c": ((1, dm), dm),
        "W_c2": ((dm, dm), dm),
        "W_r1": ((dm, 4 * dm), 4 * dm),
        "w_k": ((K, dm), dm),
        "W_kernel": ((K, dh), dh),
        "b_kernel": ((K, 1), dh),
        "bn_nbr.scale": ((H,), 0),
        "bn_nbr.shift": ((H,), 0),
        "bn_kernel.scale": ((K,), 0),
        "bn_kernel.shift": ((K,), 0),
    }


class ModelParams:
    """Named learnable tensors plus the two batch-norm running-stat buffers."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.config = config
        self.tensors = tensors
        self.bn = bn

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        # one generator per tensor name: shared tensors initialize identically
        # across ablation variants and kernel counts
        tensors = {}
        for name, (shape, fan_in) in param_shapes(config).items():
            if name.endswith(".scale"):
                data = np.ones(shape)
            elif name.endswith(".shift"):
                data = np.zeros(shape)
            else:
                bound = np.sqrt(1.0 / fan_in)
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        bn = {"bn_nbr": BatchNormState.fresh(config.n_heads), "bn_kernel": BatchNormState.fresh(config.n_kernels)}
        return cls(config, tensors, bn)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every tensor and buffer in a stable order, as float64 arrays."""
        out = {k: t.data for k, t in self.tensors.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            if tuple(np.shape(v)) != own[k].shape:
                raise ShapeError(f"tensor {k!r}: stored shape {tuple(np.shape(v))}, model expects {own[k].shape}")
        for k, t in self.tensors.items():
            t.data = np.array(state[k], dtype=np.float64)
        for k, s in self.bn.items():
            s.running_mean = np.array(state[f"{k}.running_mean"], dtype=np.float64)
            s.running_var = np.array(state[f"{k}.running_var"], dtype=np.float64)

    def copy(self) -> "ModelParams":
        p = ModelParams.init(self.config)
        p.load_state_dict({k: v.copy() for k, v in self.state_dict().items()})
        for k, s in self.bn.items():
            p.bn[k].num_batches = s.num_batches
        return p


@dataclass
class Batch:
    target_ids: list[str]
    env: np.ndarray  # (U, d_env) rows for every touched transaction
    obj: np.ndarray  # (U, d_obj)
    price: np.ndarray  # (U,) normalized prices; only history rows are read
    target_rows: np.ndarray  # (B,)
    edge_target: np.ndarray  # (E,) index into targets
    edge_rows: np.ndarray  # (E,) neighbor row
    edge_ids: list[str]
    group_target: np.ndarray  # (G,) one group per (target, neighbor community)
    group_ids: list[str]
    member_group: np.ndarray  # (M,)
    member_rows: np.ndarray  # (M,)
    member_ids: list[str]
    truth: np.ndarray  # (B,) normalized target prices, nan when unknown

    @property
    def size(self) -> int:
        return len(self.target_ids)


def build_batch(
    target_ids: Sequence[str],
    contexts: Mapping[str, NeighborContext],
    features: Mapping[str, FeaturePair],
    use_neighbors: bool = True,
    use_community: bool = True,
) -> Batch:
    rows: dict[str, int] = {}

    def row(i: str) -> int:
        if i not in rows:
            if i not in features:
                raise UnknownTargetError(f"transaction {i!r} is not in the feature store")
            rows[i] = len(rows)
        return rows[i]

    target_rows = [row(t) for t in target_ids]
    e_t, e_r, e_ids = [], [], []
    g_t, g_ids, m_g, m_r, m_ids = [], [], [], [], []
    for b, t in enumerate(target_ids):
        ctx = contexts[t]
        if use_neighbors:
            for n in ctx.txn_neighbors:
                e_t.append(b)
                e_r.append(row(n))
                e_ids.append(n)
        if use_community:
            for cid in ctx.community_neighbor_ids:
                g = len(g_ids)
                g_t.append(b)
                g_ids.append(cid)
                for m in ctx.community_members[cid]:
                    m_g.append(g)
                    m_r.append(row(m))
                    m_ids.append(m)
    order = list(rows)
    fp0 = features[order[0]] if order else None
    d_env = fp0.s_env.shape[0] if fp0 else 0
    d_obj = fp0.s_obj.shape[0] if fp0 else 0
    env = np.array([features[i].s_env for i in order]).reshape(len(order), d_env)
    obj = np.array([features[i].s_obj for i in order]).reshape(len(order), d_obj)
    price = np.array([features[i].p_norm for i in order], dtype=np.float64)
    ia = lambda x: np.asarray(x, dtype=np.intp)  # noqa: E731
    return Batch(
        target_ids=list(target_ids),
        env=env,
        obj=obj,
        price=price,
        target_rows=ia(target_rows),
        edge_target=ia(e_t),
        edge_rows=ia(e_r),
        edge_ids=e_ids,
        group_target=ia(g_t),
        group_ids=g_ids,
        member_group=ia(m_g),
        member_rows=ia(m_r),
        member_ids=m_ids,
        truth=price[ia(target_rows)] if target_rows else np.zeros(0),
    )


def encode_transaction(params: ModelParams, s_env, s_obj) -> tuple[Tensor, Tensor]:
    """Environment and object embeddings for a block of feature rows.

    The transaction embedding ``x = e ++ o ++ price`` is assembled by the
    callers, which know whether a row is a target (price slot zero) or history.
    """
    p = params
    e = ops.linear(ops.mish(ops.linear(s_env, p["W_e1"])), p["W_e2"])
    o_prime = ops.linear(ops.mish(ops.linear(s_obj, p["W_o1"])), p["W_o2"])
    o = ops.linear(ops.mish(ops.concat([o_prime, e], axis=1)), p["W_x"])
    return e, o


def transaction_embedding(e: Tensor, o: Tensor, price) -> Tensor:
    """``e ++ o ++ price`` per row; ``price`` may be a Tensor to differentiate through it."""
    price = as_tensor(price)
    return ops.concat([e, o, ops.reshape(price, (price.data.size, 1))], axis=1)


def _bn_scores(params: ModelParams, key: str, scores: Tensor, mode: str, update_stats: bool) -> Tensor:
    # a train-mode batch of one has no batch statistics; fall back to running ones
    m = mode if scores.shape[0] >= 2 else "eval"
    return ops.batchnorm_1d(scores, params[f"{key}.scale"], params[f"{key}.shift"], params.bn[key], m,
                            update_stats=update_stats)


@dataclass
class NeighborOutput:
    r_emb: Tensor  # (B, d_m)
    p_tilde: Tensor  # (B,)
    alpha: np.ndarray  # (E,) head-averaged attention
    delta: np.ndarray  # (E,)


def neighbor_aggregate(
    params: ModelParams,
    x_target: Tensor,
    x_nbr: Tensor,
    p_nbr: np.ndarray,
    edge_target: np.ndarray,
    n_targets: int,
    tau: float,
    mode: str = "train",
    update_stats: bool = True,
) -> NeighborOutput:
    p = params
    dm = p.config.d_m
    if edge_target.size == 0:
        return NeighborOutput(Tensor(np.zeros((n_targets, dm))), Tensor(np.zeros(n_targets)), np.zeros(0), np.zeros(0))
    r = ops.linear(ops.concat([ops.gather(x_target, edge_target), x_nbr], axis=1), p["W_r"])
    sr = ops.mish(r)
    beta = ops.leaky_relu(ops.linear(sr, p["w_a"]))  # (E, H)
    beta = _bn_scores(p, "bn_nbr", beta, mode, update_stats)
    alpha_heads = ops.segment_softmax(beta, edge_target, n_targets, tau)
    alpha = ops.mean(alpha_heads, axis=1)
    delta = ops.reshape(ops.linear(sr, p["w_d"]), (edge_target.size,))
    p_tilde = ops.segment_sum(ops.mul(alpha, ops.add(as_tensor(p_nbr), delta)), edge_target, n_targets)
    r_emb = ops.weighted_sum(alpha, r, edge_target, n_targets)
    return NeighborOutput(r_emb, p_tilde, alpha.data, delta.data)


@dataclass
class CommunityOutput:
    c: Tensor  # (B, d_m)
    alpha_member: np.ndarray  # (M,)
    alpha_comm: np.ndarray  # (G,)


def community_aggregate(
    params: ModelParams,
    o_target: Tensor,
    e_member: Tensor,
    p_member: np.ndarray,
    member_group: np.ndarray,
    group_target: np.ndarray,
    n_targets: int,
) -> CommunityOutput:
    p = params
    dm = p.config.d_m
    if group_target.size == 0:
        return CommunityOutput(Tensor(np.zeros((n_targets, dm))), np.zeros(0), np.zeros(0))
    n_groups = group_target.size
    x_env = ops.concat([e_member, Tensor(np.asarray(p_member, dtype=np.float64).reshape(-1, 1))], axis=1)
    beta = ops.reshape(ops.linear(ops.tanh(ops.linear(x_env, p["W_u1"])), p["v_u"]), (member_group.size,))
    a_m = ops.segment_softmax(beta, member_group, n_groups)
    u = ops.relu(ops.linear(ops.weighted_sum(a_m, x_env, member_group, n_groups), p["W_u2"]))
    pair = ops.concat([ops.gather(o_target, group_target), u], axis=1)
    gamma = ops.reshape(ops.linear(ops.tanh(ops.linear(pair, p["W_c1"])), p["v_c"]), (n_groups,))
    a_c = ops.segment_softmax(gamma, group_target, n_targets)
    c = ops.relu(ops.linear(ops.weighted_sum(a_c, u, group_target, n_targets), p["W_c2"]))
    return CommunityOutput(c, a_m.data, a_c.data)


def dynamic_adapt(
    params: ModelParams,
    o: Tensor,
    e: Tensor,
    r_emb: Tensor,
    c: Tensor,
    p_tilde: Tensor,
    tau: float,
    mode: str = "train",
    update_stats: bool = True,
) -> tuple[Tensor, Tensor]:
    """Kernel-mixture regression head; returns (p_hat (B,), kernel attention (B, K))."""
    p = params
    n = o.shape[0]
    h_prime = ops.concat([o, e, r_emb, c], axis=1)
    z = ops.linear(ops.mish(ops.linear(h_prime, p["W_r1"])), p["w_k"])  # (B, K)
    z = _bn_scores(p, "bn_kernel", z, mode, update_stats)
    pi = ops.softmax(z, tau)
    w_hat = ops.matmul(pi, p["W_kernel"])
    b_hat = ops.reshape(ops.matmul(pi, p["b_kernel"]), (n,))
    h = ops.concat([h_prime, ops.reshape(p_tilde, (n, 1))], axis=1)
    p_hat = ops.add(ops.sum(ops.mul(h, w_hat), axis=1), b_hat)
    return p_hat, pi


@dataclass
class Prediction:
    target: str
    p_hat: float
    p_tilde: float
    neighbor_attention: dict[str, float] = field(default_factory=dict)
    kernel_attention: np.ndarray = field(default_factory=lambda: np.zeros(0))
    community_attention: dict[str, float] = field(default_factory=dict)
    neighbor_delta: dict[str, float] = field(default_factory=dict)


@dataclass
class BatchOutput:
    p_hat: Tensor
    p_tilde: Tensor
    pi: Tensor
    neighbors: NeighborOutput | None
    community: CommunityOutput | None

    def predictions(self, batch: Batch) -> list[Prediction]:
        out = [
            Prediction(t, float(self.p_hat.data[b]), float(self.p_tilde.data[b]), kernel_attention=self.pi.data[b].copy())
            for b, t in enumerate(batch.target_ids)
        ]
        if self.neighbors is not None and self.neighbors.alpha.size:
            for k, b in enumerate(batch.edge_target):
                out[b].neighbor_attention[batch.edge_ids[k]] = float(self.neighbors.alpha[k])
                out[b].neighbor_delta[batch.edge_ids[k]] = float(self.neighbors.delta[k])
        if self.community is not None and self.community.alpha_comm.size:
            for g, b in enumerate(batch.group_target):
                out[b].community_attention[batch.group_ids[g]] = float(self.community.alpha_comm[g])
        return out


def forward_batch(params: ModelParams, batch: Batch, mode: str = "eval", update_stats: bool = True) -> BatchOutput:
    cfg = params.config
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    if batch.env.shape[1] != cfg.d_env or batch.obj.shape[1] != cfg.d_obj:
        raise ShapeError(
            f"feature widths ({batch.env.shape[1]}, {batch.obj.shape[1]}) do not match model ({cfg.d_env}, {cfg.d_obj})"
        )
    n = batch.size
    e_all, o_all = encode_transaction(params, batch.env, batch.obj)
    e_t = ops.gather(e_all, batch.target_rows)
    o_t = ops.gather(o_all, batch.target_rows)
    zeros_dm = Tensor(np.zeros((n, cfg.d_m)))

    nb = None
    r_emb, p_tilde = zeros_dm, Tensor(np.zeros(n))
    if cfg.use_neighbors and batch.edge_target.size:
        x_t = transaction_embedding(e_t, o_t, np.zeros(n))
        x_n = transaction_embedding(
            ops.gather(e_all, batch.edge_rows), ops.gather(o_all, batch.edge_rows), batch.price[batch.edge_rows]
        )
        nb = neighbor_aggregate(params, x_t, x_n, batch.price[batch.edge_rows], batch.edge_target, n, cfg.tau,
                                mode, update_stats)
        if cfg.use_relation:
            r_emb = nb.r_emb
        if cfg.use_price:
            p_tilde = nb.p_tilde

    cm = None
    c = zeros_dm
    if cfg.use_community and batch.group_target.size:
        cm = community_aggregate(
            params, o_t, ops.gather(e_all, batch.member_rows), batch.price[batch.member_rows],
            batch.member_group, batch.group_target, n,
        )
        c = cm.c

    p_hat, pi = dynamic_adapt(params, o_t, e_t, r_emb, c, p_tilde, cfg.tau, mode, update_stats)
    return BatchOutput(p_hat, p_tilde, pi, nb, cm)


def forward(
    target: FeaturePair,
    ctx: NeighborContext,
    store: Mapping[str, FeaturePair],
    params: ModelParams,
    mode: str = "eval",
) -> Prediction:
    """Appraise one target given its context and the encoded history store."""
    feats = dict(store)
    feats[ctx.target] = target
    batch = build_batch([ctx.target], {ctx.target: ctx}, feats, params.config.use_neighbors, params.config.use_community)
    out = forward_batch(params, batch, mode, update_stats=False)
    return out.predictions(batch)[0]
