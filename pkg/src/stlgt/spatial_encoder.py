"""Structure-aware encoder: linear global mixing, GCN branch, fused readout.

All forward functions accept a single scene (N, d_in) or a batch of scenes
(batch, N, d_in); parameters live in a flat name -> Tensor dict so the
optimizer and checkpoint code can stay generic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import numeric_core as nc
from .config import ModelConfig
from .numeric_core import NumericalFault, Tensor
from .span_graph import SpanGraph

FROBENIUS_EPS = 1e-8


@dataclass
class GraphOperators:
    """Precomputed propagation operators for one frozen span graph.

    p_op: row-stochastic D^-1 (A+I); s_op: symmetric D^-1/2 (A+I) D^-1/2.
    Time-invariant per graph, so built once and shared read-only.
    """
    n: int
    p_op: sp.csr_matrix
    s_op: sp.csr_matrix


def build_operators(graph: SpanGraph) -> GraphOperators:
    n = graph.n
    edges = sorted(graph.edges)
    rows = np.array([i for i, _ in edges] + list(range(n)), dtype=np.int64)
    cols = np.array([j for _, j in edges] + list(range(n)), dtype=np.int64)
    data = np.ones(len(rows))
    a_hat = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).reshape(-1)
    p_op = sp.diags(1.0 / deg) @ a_hat
    half = sp.diags(1.0 / np.sqrt(deg))
    s_op = half @ a_hat @ half
    return GraphOperators(n, p_op.tocsr(), s_op.tocsr())


def _glorot(rng, fan_in: int, fan_out: int, shape) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_encoder_params(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    d, d_in, d_c = cfg.d, cfg.d_in, cfg.d_c
    params: dict[str, Tensor] = {
        "enc.in.w": _glorot(rng, d_in, d, (d_in, d)),
        "enc.in.b": _zeros_param(d),
    }
    for i in range(cfg.encoder_blocks):
        pre = f"enc{i}"
        params[f"{pre}.q.w"] = _glorot(rng, d, d, (d, d))
        params[f"{pre}.k.w"] = _glorot(rng, d, d, (d, d))
        params[f"{pre}.v.w"] = _glorot(rng, d, d, (d, d))
        params[f"{pre}.gcn.w"] = _glorot(rng, d, d, (d, d))
        params[f"{pre}.fuse.w1"] = _glorot(rng, 2 * d, d, (2 * d, d))
        params[f"{pre}.fuse.b1"] = _zeros_param(d)
        params[f"{pre}.fuse.w2"] = _glorot(rng, d, d, (d, d))
        params[f"{pre}.fuse.b2"] = _zeros_param(d)
        params[f"{pre}.ln.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{pre}.ln.b"] = _zeros_param(d)
    params["enc.read.wr"] = _glorot(rng, d, 1, (d, 1))
    params["enc.read.wc"] = _glorot(rng, d_c, d, (d_c, d))
    params["enc.read.bc"] = _zeros_param(d)
    params["enc.read.wg"] = _glorot(rng, 2 * d, d, (2 * d, d))
    params["enc.read.bg"] = _zeros_param(d)
    return params


def clamp_rho(rho: float) -> float:
    if 0.0 <= rho <= 1.0:
        return rho
    clamped = min(max(rho, 0.0), 1.0)
    warnings.warn(f"rho={rho} outside [0, 1]; clamped to {clamped}", RuntimeWarning)
    return clamped


def input_mlp(params, x) -> Tensor:
    return nc.relu(nc.add(nc.matmul(x, params["enc.in.w"]), params["enc.in.b"]))


def qkv(params, prefix: str, h) -> tuple[Tensor, Tensor, Tensor]:
    """ReLU'd queries/keys (Frobenius-normalized per scene), raw values."""
    q = nc.relu(nc.matmul(h, params[f"{prefix}.q.w"]))
    k = nc.relu(nc.matmul(h, params[f"{prefix}.k.w"]))
    v = nc.matmul(h, params[f"{prefix}.v.w"])
    q_n = nc.div(q, nc.add(nc.frobenius_norm(q, axis=(-2, -1), keepdims=True), FROBENIUS_EPS))
    k_n = nc.div(k, nc.add(nc.frobenius_norm(k, axis=(-2, -1), keepdims=True), FROBENIUS_EPS))
    return q_n, k_n, v


def premix(k_n, v, ops: GraphOperators, rho: float) -> tuple[Tensor, Tensor]:
    """One-shot neighborhood blend of keys and values, applied exactly once."""
    rho = clamp_rho(rho)
    if rho == 0.0:
        return k_n, v
    k_bar = nc.add(nc.mul(k_n, 1.0 - rho), nc.mul(nc.spmm(ops.p_op, k_n), rho))
    v_bar = nc.add(nc.mul(v, 1.0 - rho), nc.mul(nc.spmm(ops.p_op, v), rho))
    return k_bar, v_bar


def linear_global_mix(q_n, k_bar, v_bar) -> Tensor:
    """All-pair mixing through d x d summaries; never forms an N x N matrix.

    Row scaling D = 1 + (1/N) Q (K^T 1) stays >= 1 because Q and K are ReLU
    outputs; that positivity is asserted, not assumed.
    """
    n = q_n.shape[-2]
    k_sum = nc.sum_(k_bar, axis=-2, keepdims=True)
    kv = nc.matmul(nc.transpose(k_bar), v_bar)
    qkv_term = nc.matmul(q_n, kv)
    qk = nc.matmul(q_n, nc.transpose(k_sum))
    num = nc.add(v_bar, nc.mul(qkv_term, 1.0 / n))
    den = nc.add(nc.mul(qk, 1.0 / n), 1.0)
    if den.data.min() < 1.0 - 1e-9:
        raise NumericalFault(f"mixing denominator dropped below 1: {den.data.min()}")
    return nc.div(num, den)


def dense_global_mix(q_n, k_bar, v_bar) -> Tensor:
    """Reference quadratic operator: row-softmax(Q K^T / sqrt(d)) V."""
    d = q_n.shape[-1]
    scores = nc.matmul(q_n, nc.transpose(k_bar))
    attn = nc.softmax(nc.mul(scores, 1.0 / math.sqrt(d)))
    return nc.matmul(attn, v_bar)


def gcn_branch(params, prefix: str, h, ops: GraphOperators) -> Tensor:
    return nc.matmul(nc.spmm(ops.s_op, h), params[f"{prefix}.gcn.w"])


def fuse(params, prefix: str, h, z_g, z_l) -> Tensor:
    z = nc.concat([z_g, z_l], axis=-1)
    hidden = nc.relu(nc.add(nc.matmul(z, params[f"{prefix}.fuse.w1"]),
                            params[f"{prefix}.fuse.b1"]))
    delta = nc.add(nc.matmul(hidden, params[f"{prefix}.fuse.w2"]),
                   params[f"{prefix}.fuse.b2"])
    return nc.layer_norm(nc.add(h, delta), params[f"{prefix}.ln.g"],
                         params[f"{prefix}.ln.b"])


def encoder_block(params, prefix: str, cfg: ModelConfig, ops: GraphOperators,
                  h, rho: float) -> Tensor:
    q_n, k_n, v = qkv(params, prefix, h)
    k_bar, v_bar = premix(k_n, v, ops, rho)
    if cfg.mixing == "linear":
        z_g = linear_global_mix(q_n, k_bar, v_bar)
    elif cfg.mixing == "dense":
        z_g = dense_global_mix(q_n, k_bar, v_bar)
    else:
        raise ValueError(f"unknown mixing '{cfg.mixing}' (expected linear|dense)")
    z_l = gcn_branch(params, prefix, h, ops)
    return fuse(params, prefix, h, z_g, z_l)


def readout(params, h, c) -> Tensor:
    """Attention-pool node rows, then fuse the trace-common context."""
    scores = nc.matmul(h, params["enc.read.wr"])
    alpha = nc.softmax(nc.reshape(scores, scores.shape[:-1]))
    pooled = nc.matmul(nc.reshape(alpha, alpha.shape[:-1] + (1, alpha.shape[-1])), h)
    g_node = nc.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))
    c_bar = nc.relu(nc.add(nc.matmul(c, params["enc.read.wc"]), params["enc.read.bc"]))
    joint = nc.concat([g_node, c_bar], axis=-1)
    return nc.relu(nc.add(nc.matmul(joint, params["enc.read.wg"]), params["enc.read.bg"]))


def encode(params, cfg: ModelConfig, ops: GraphOperators, x, c) -> Tensor:
    """(N, d_in) + (d_c,) -> (d,), or batched (S, N, d_in) + (S, d_c) -> (S, d)."""
    x = nc.as_tensor(x)
    c = nc.as_tensor(c)
    single = x.ndim == 2
    if single:
        x = nc.reshape(x, (1,) + x.shape)
        c = nc.reshape(c, (1,) + c.shape)
    rho = clamp_rho(cfg.rho)
    h = input_mlp(params, x)
    for i in range(cfg.encoder_blocks):
        h = encoder_block(params, f"enc{i}", cfg, ops, h, rho)
    g = readout(params, h, c)
    return nc.reshape(g, (g.shape[-1],)) if single else g
