"""Central-unit positioning network.

Dequantized per-BS latents are projected to tokens, fused by gain-masked
attention with a learnable fusion token, accumulated across subcarriers by an
LSTM, and regressed to a 3D position after every subcarrier.

Shapes (batch first): latents (B, L, D), gains (B, L), tokens (B, L+1, F)
with F = N_sc * d_f, fused sequence (B, N_sc, d_f), estimates (B, N_sc, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .fronthaul import FronthaulMessage, QuantizerConfig, decode_message


@dataclass(frozen=True)
class FusionConfig:
    token_dim: int = 4         # d_f per subcarrier
    lstm_hidden: int = 32
    head_hidden: int = 64
    beta: float = 1.0          # mask temperature


@dataclass
class CuModel:
    params: ParamSet
    cfg: FusionConfig
    n_subcarriers: int
    centre: np.ndarray         # output affine map: p = centre + scale * head(s)
    scale: np.ndarray

    @property
    def width(self) -> int:
        return self.n_subcarriers * self.cfg.token_dim


def init_cu(rng: np.random.Generator, n_subcarriers: int, latent_len: int,
            cfg: FusionConfig, region_low, region_high, n_bs: int,
            prefix: str = "cu/") -> CuModel:
    """Random CU parameters; each BS gets its own token projection."""
    F = n_subcarriers * cfg.token_dim
    H, d = cfg.lstm_hidden, cfg.token_dim
    g = ad.glorot_uniform
    ps = ParamSet()
    ps.add(prefix + "fusion_token", rng.normal(0.0, 1.0 / np.sqrt(F), F))
    ps.add(prefix + "proj.w", np.stack([g(rng, latent_len, F) for _ in range(n_bs)]))
    ps.add(prefix + "proj.b", np.zeros((n_bs, F)))
    for name in ("wq", "wk", "wv"):
        ps.add(prefix + name, g(rng, F, F))
    ps.add(prefix + "lstm.w", g(rng, d + H, 4 * H))
    lstm_b = np.zeros(4 * H)
    lstm_b[H:2 * H] = 1.0
    ps.add(prefix + "lstm.b", lstm_b)
    ps.add(prefix + "head.w1", g(rng, H, cfg.head_hidden))
    ps.add(prefix + "head.b1", np.zeros(cfg.head_hidden))
    ps.add(prefix + "head.w2", g(rng, cfg.head_hidden, 3))
    ps.add(prefix + "head.b2", np.zeros(3))
    lo, hi = np.asarray(region_low, float), np.asarray(region_high, float)
    scale = np.maximum(0.5 * (hi - lo), 1e-6)
    return CuModel(ps, cfg, n_subcarriers, 0.5 * (lo + hi), scale)


def compute_mask(gains, beta: float) -> np.ndarray:
    """Softmax of ``beta * gains`` over the last axis."""
    x = beta * np.asarray(gains, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def tokenize(latents, params: ParamSet, prefix: str = "cu/") -> Tensor:
    """Token matrix: fusion token on row 0, projected BS latents on rows 1..L."""
    z = ad.constant(latents)
    w = params[prefix + "proj.w"]
    if z.ndim != 3 or z.shape[1:] != (w.shape[0], w.shape[1]):
        raise ad.ShapeError(f"latents must be (B, {w.shape[0]}, {w.shape[1]}), got {z.shape}")
    B, L, D = z.shape
    F = params[prefix + "fusion_token"].shape[0]
    rows = ad.reshape(ad.reshape(z, (B, L, 1, D)) @ w, (B, L, F)) + params[prefix + "proj.b"]
    head = ad.constant(np.zeros((B, 1, F))) + params[prefix + "fusion_token"]
    return ad.concat([head, rows], axis=1)


@dataclass
class FusionOutput:
    fused: Tensor              # (B, N_sc, d_f)
    attention: Tensor          # (B, L+1, L+1)
    output: Tensor             # (B, L+1, F)


def cma_fuse(tokens: Tensor, mask, params: ParamSet, n_subcarriers: int,
             prefix: str = "cu/") -> FusionOutput:
    """Gain-gated attention; the fusion-token row is the fused representation."""
    B, rows, F = tokens.shape
    gate = np.concatenate([np.ones((B, 1)), np.asarray(mask, float)], axis=1)[..., None]
    q = tokens @ params[prefix + "wq"]
    k = tokens @ params[prefix + "wk"]
    v = ad.constant(gate) * (tokens @ params[prefix + "wv"])
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(F))
    attn = ad.softmax(scores, axis=-1)
    out = attn @ v
    fused = ad.reshape(out[:, 0, :], (B, n_subcarriers, F // n_subcarriers))
    return FusionOutput(fused, attn, out)


def freq_accumulate(seq: Tensor, params: ParamSet, prefix: str = "cu/") -> Tensor:
    """LSTM over subcarriers from zero state; returns hidden states (B, N_sc, H)."""
    w, b = params[prefix + "lstm.w"], params[prefix + "lstm.b"]
    B, N, _ = seq.shape
    H = b.shape[0] // 4
    s = ad.constant(np.zeros((B, H)))
    c = ad.constant(np.zeros((B, H)))
    states = []
    for n in range(N):
        s, c = ad.lstm_cell(seq[:, n, :], s, c, w, b)
        states.append(ad.reshape(s, (B, 1, H)))
    return ad.concat(states, axis=1)


def regress(states: Tensor, model: CuModel, prefix: str = "cu/") -> Tensor:
    """Shared head applied to every hidden state; (B, N_sc, 3) in metres."""
    p = model.params
    h = ad.relu(states @ p[prefix + "head.w1"] + p[prefix + "head.b1"])
    out = h @ p[prefix + "head.w2"] + p[prefix + "head.b2"]
    return out * model.scale + model.centre


def wmse_weights(n: int) -> np.ndarray:
    i = np.arange(1, n + 1, dtype=np.float64)
    return 2.0 * i / (n * (n + 1))


def wmse_loss(positions, estimates: Tensor) -> Tensor:
    """Batch mean of ``sum_i w_i ||p - p_i||^2`` with linearly increasing weights."""
    p = np.asarray(positions, float)
    B, N, _ = estimates.shape
    diff = estimates - p[:, None, :]
    sq = ad.tensor_sum(diff * diff, axis=2)
    return ad.tensor_sum(sq * wmse_weights(N)) * (1.0 / B)


def cu_forward(latents, gains, model: CuModel, prefix: str = "cu/") -> Tensor:
    """Intermediate position estimates (B, N_sc, 3) from latents and gains."""
    mask = compute_mask(gains, model.cfg.beta)
    tokens = tokenize(latents, model.params, prefix)
    fused = cma_fuse(tokens, mask, model.params, model.n_subcarriers, prefix).fused
    return regress(freq_accumulate(fused, model.params, prefix), model, prefix)


@dataclass
class PositionEstimate:
    position: np.ndarray       # (3,)
    intermediate: np.ndarray   # (N_sc, 3)


def infer(messages: list[FronthaulMessage], model: CuModel,
          quantizers: list[QuantizerConfig]) -> PositionEstimate:
    """Decode one snapshot's L messages (ordered by BS id) and estimate the position."""
    if len(messages) != len(quantizers):
        raise ValueError(f"got {len(messages)} messages for {len(quantizers)} BSs")
    shapes = {(m.n_bits, m.length) for m in messages}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent message shapes {sorted(shapes)}")
    msgs = sorted(messages, key=lambda m: m.bs_id)
    decoded = [decode_message(m, q) for m, q in zip(msgs, quantizers)]
    z = np.stack([d[0] for d in decoded])[None]
    g = np.array([[d[1] for d in decoded]])
    est = cu_forward(z, g, model).data[0]
    return PositionEstimate(est[-1].copy(), est)
