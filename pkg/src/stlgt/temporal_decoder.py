"""Multi-period temporal decoder over the window-embedding series.

The history embeddings are extended with zero placeholder slots, embedded
row-wise, passed through residual blocks that reshape the series by its
dominant spectral periods and convolve in 2D, and finally mapped to the H
forecast slots by a row-wise affine head. A plain affine map over the
flattened history is available as the `linear` decoder variant.

Inside a block the K period choices are discrete (detached); the softmax
combination weights stay differentiable through the spectrum amplitudes.
"""

from __future__ import annotations

import numpy as np

from . import numeric_core as nc
from .config import ModelConfig
from .numeric_core import Tensor
from .spatial_encoder import _glorot, _zeros_param

# Amplitudes this far below the strongest non-DC bin are numerical dust from
# the direct DFT (an exactly-constant series never sums to exactly zero in
# floats); treat them as zero when ranking so the lower-frequency tie-break
# is reachable in practice.
RANK_SNAP_REL = 1e-9


def init_decoder_params(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    d = cfg.d
    if cfg.decoder == "linear":
        flat = cfg.L * d
        return {
            "dec.lin.w": _glorot(rng, flat, cfg.H, (flat, cfg.H)),
            "dec.lin.b": _zeros_param(cfg.H),
        }
    if cfg.decoder != "timesnet":
        raise ValueError(f"unknown decoder '{cfg.decoder}' (expected timesnet|linear)")
    params: dict[str, Tensor] = {
        "dec.ts.w": _glorot(rng, d, d, (d, d)),
        "dec.ts.b": _zeros_param(d),
    }
    for b in range(cfg.B):
        pre = f"dec{b}"
        params[f"{pre}.conv1.w"] = _glorot(rng, 9 * d, d, (3, 3, d, d))
        params[f"{pre}.conv1.b"] = _zeros_param(d)
        # zero output path: every residual block starts as the identity
        params[f"{pre}.conv2.w"] = _zeros_param((3, 3, d, d))
        params[f"{pre}.conv2.b"] = _zeros_param(d)
    params["dec.out.w"] = _glorot(rng, d, 1, (d, 1))
    params["dec.out.b"] = _zeros_param(1)
    return params


def _check_k(k: int, t_len: int):
    if not 1 <= k <= t_len // 2:
        raise ValueError(f"K={k} must lie in [1, floor(T/2)] for T={t_len}")


def _rank_bins(amps: np.ndarray, k: int) -> np.ndarray:
    """Top-k non-DC bins by amplitude, ties broken toward lower frequency.

    The zero snap is relative to the whole spectrum (DC included) so that a
    constant series, whose non-DC bins are pure numerical dust, degrades to
    an exact tie and the lowest frequency wins.
    """
    non_dc = amps[1:]
    snapped = np.where(non_dc <= RANK_SNAP_REL * amps.max(), 0.0, non_dc)
    freqs = np.arange(1, len(amps))
    order = np.lexsort((freqs, -snapped))
    return order[:k] + 1


def detect_periods(u, k: int) -> list[tuple[int, float]]:
    """K dominant (period, amplitude) pairs of a (T, d) series.

    Amplitude is the channel-mean DFT magnitude; DC is excluded; the period
    for frequency bin f is ceil(T / f), so periods lie in [2, T].
    """
    data = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    t_len = data.shape[0]
    _check_k(k, t_len)
    amps = nc.rdft_mag(Tensor(data)).data.mean(axis=-1)
    bins = _rank_bins(amps, k)
    return [(-(-t_len // int(f)), float(amps[f])) for f in bins]


def extend_and_embed(params, cfg: ModelConfig, g_hist) -> Tensor:
    """Append H zero slots and apply the row-wise identity-activation embed."""
    g = nc.as_tensor(g_hist)
    single = g.ndim == 2
    if single:
        g = nc.reshape(g, (1,) + g.shape)
    s = g.shape[0]
    ext = nc.concat([g, nc.zeros((s, cfg.H, g.shape[-1]))], axis=1)
    u0 = nc.add(nc.matmul(ext, params["dec.ts.w"]), params["dec.ts.b"])
    return nc.reshape(u0, u0.shape[1:]) if single else u0


def times_block(params, prefix: str, cfg: ModelConfig, u) -> Tensor:
    """Amplitude-softmax blend of per-period conv passes; residual added by caller.

    Samples in a batch may pick different periods, so they are grouped by
    period value and each group runs the shared conv stack on its own grid.
    """
    u = nc.as_tensor(u)
    single = u.ndim == 2
    if single:
        u = nc.reshape(u, (1,) + u.shape)
    s, t_len, d = u.shape
    _check_k(cfg.K, t_len)

    mags = nc.rdft_mag(u)
    amps = nc.mean(mags, axis=-1)
    bins = np.stack([_rank_bins(amps.data[i], cfg.K) for i in range(s)])
    periods = -(-t_len // bins)
    weights = nc.softmax(nc.gather_last(amps, bins))

    acc = nc.zeros((s, t_len, d))
    for k in range(cfg.K):
        column = periods[:, k]
        for p in sorted(set(column.tolist())):
            idx = np.nonzero(column == p)[0]
            sub = nc.take(u, idx)
            rows = -(-t_len // p)
            padded = rows * p
            if padded > t_len:
                sub = nc.pad_axis(sub, 1, 0, padded - t_len)
            grid = nc.reshape(sub, (len(idx), rows, p, d))
            hidden = nc.gelu(nc.conv3x3(grid, params[f"{prefix}.conv1.w"],
                                        params[f"{prefix}.conv1.b"]))
            out = nc.conv3x3(hidden, params[f"{prefix}.conv2.w"],
                             params[f"{prefix}.conv2.b"])
            seq = nc.reshape(out, (len(idx), padded, d))
            if padded > t_len:
                seq = seq[:, :t_len, :]
            w_col = nc.reshape(nc.take(weights, idx)[:, k:k + 1], (len(idx), 1, 1))
            acc = nc.index_add(acc, idx, nc.mul(seq, w_col))
    return nc.reshape(acc, (t_len, d)) if single else acc


def decode(params, cfg: ModelConfig, u0) -> Tensor:
    """B residual block applications."""
    u = nc.as_tensor(u0)
    for b in range(cfg.B):
        u = nc.add(u, times_block(params, f"dec{b}", cfg, u))
    return u


def predict_head(params, cfg: ModelConfig, u_bar) -> Tensor:
    """Row-wise affine map of the last H slots to the forecasts."""
    u = nc.as_tensor(u_bar)
    single = u.ndim == 2
    if single:
        u = nc.reshape(u, (1,) + u.shape)
    tail = u[:, u.shape[1] - cfg.H:, :]
    y = nc.add(nc.matmul(tail, params["dec.out.w"]), params["dec.out.b"])
    y = nc.reshape(y, y.shape[:-1])
    return nc.reshape(y, (cfg.H,)) if single else y


def decode_series(params, cfg: ModelConfig, g_hist) -> Tensor:
    """(S, L, d) history embeddings -> (S, H) normalized forecasts."""
    g = nc.as_tensor(g_hist)
    single = g.ndim == 2
    if single:
        g = nc.reshape(g, (1,) + g.shape)
    if cfg.decoder == "linear":
        flat = nc.reshape(g, (g.shape[0], cfg.L * g.shape[-1]))
        y = nc.add(nc.matmul(flat, params["dec.lin.w"]), params["dec.lin.b"])
    else:
        u0 = extend_and_embed(params, cfg, g)
        u_bar = decode(params, cfg, u0)
        y = predict_head(params, cfg, u_bar)
    return nc.reshape(y, (cfg.H,)) if single else y
