"""Residual convolutional autoencoder run at each base station.

Input ``X`` has shape (T*N_r, N_sc, 2). Each subcarrier becomes one position
of a 1-D sequence whose features are the 2*T*N_r real values of that
subcarrier (interleaved real/imag per row). Convolutions run along frequency,
so output row ``n`` of the latent stays tied to subcarrier ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

EPS_COS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = 4        # d_z
    width: int = 32
    n_blocks: int = 3
    kernel: int = 3


def _conv_params(ps: ParamSet, rng, name: str, c_in: int, c_out: int, k: int):
    ps.add(f"{name}.w", ad.glorot_uniform(rng, k * c_in, c_out))
    ps.add(f"{name}.b", np.zeros(c_out))


def init_autoencoder(rng: np.random.Generator, n_features: int, cfg: EncoderConfig,
                     prefix: str = "") -> ParamSet:
    """Encoder (``{prefix}enc/``) and mirrored decoder (``{prefix}dec/``) parameters.

    ``n_features`` is ``T * N_r``.
    """
    ps = ParamSet()
    c, w, k = 2 * n_features, cfg.width, cfg.kernel
    for part, c_in, c_out in (("enc", c, cfg.latent_dim), ("dec", cfg.latent_dim, c)):
        base = f"{prefix}{part}/"
        _conv_params(ps, rng, base + "in", c_in, w, 1)
        for b in range(cfg.n_blocks):
            _conv_params(ps, rng, f"{base}block{b}.0", w, w, k)
            _conv_params(ps, rng, f"{base}block{b}.1", w, w, k)
        _conv_params(ps, rng, base + "out", w, c_out, 1)
    return ps


def conv1d(x: Tensor, w: Tensor, b: Tensor, kernel: int) -> Tensor:
    """Same-padded convolution of x (B, N, C) along N; w is (kernel*C, C_out)."""
    if kernel == 1:
        return x @ w + b
    B, N, C = x.shape
    pad = kernel // 2
    zeros = ad.constant(np.zeros((B, pad, C)))
    xp = ad.concat([zeros, x, zeros], axis=1)
    cols = ad.concat([xp[:, j:j + N, :] for j in range(kernel)], axis=2)
    return cols @ w + b


def _trunk(h: Tensor, ps: ParamSet, base: str, n_blocks: int, kernel: int) -> Tensor:
    h = ad.relu(conv1d(h, ps[base + "in.w"], ps[base + "in.b"], 1))
    for b in range(n_blocks):
        blk = f"{base}block{b}"
        r = ad.relu(conv1d(h, ps[blk + ".0.w"], ps[blk + ".0.b"], kernel))
        r = conv1d(r, ps[blk + ".1.w"], ps[blk + ".1.b"], kernel)
        h = ad.relu(h + r)
    return conv1d(h, ps[base + "out.w"], ps[base + "out.b"], 1)


def _n_blocks(ps: ParamSet, base: str) -> int:
    return sum(1 for n in ps if n.startswith(base + "block") and n.endswith(".0.w"))


def _kernel(ps: ParamSet, base: str) -> int:
    w = ps[base + "block0.0.w"] if base + "block0.0.w" in ps else None
    return 1 if w is None else w.shape[0] // ps[base + "in.w"].shape[1]


def encode(X, ps: ParamSet, prefix: str = "") -> Tensor:
    """Latent matrix Z (B, N_sc, d_z) from inputs X (B, T*N_r, N_sc, 2).

    An unbatched X of rank 3 gives an unbatched Z.
    """
    X = ad.constant(X)
    single = X.ndim == 3
    if single:
        X = ad.reshape(X, (1,) + X.shape)
    base = f"{prefix}enc/"
    B, F, N, _ = X.shape
    if ps[base + "in.w"].shape[0] != 2 * F:
        raise ad.ShapeError(f"encoder {base!r} expects {ps[base + 'in.w'].shape[0] // 2} "
                            f"input rows, got {F}")
    h = ad.reshape(ad.transpose(X, (0, 2, 1, 3)), (B, N, 2 * F))
    Z = _trunk(h, ps, base, _n_blocks(ps, base), _kernel(ps, base))
    return ad.reshape(Z, Z.shape[1:]) if single else Z


def decode(Z, ps: ParamSet, prefix: str = "") -> Tensor:
    """Reconstructed inputs X_hat (B, T*N_r, N_sc, 2) from Z (B, N_sc, d_z)."""
    Z = ad.constant(Z)
    single = Z.ndim == 2
    if single:
        Z = ad.reshape(Z, (1,) + Z.shape)
    base = f"{prefix}dec/"
    B, N, _ = Z.shape
    out = _trunk(Z, ps, base, _n_blocks(ps, base), _kernel(ps, base))
    F = out.shape[-1] // 2
    Xh = ad.transpose(ad.reshape(out, (B, N, F, 2)), (0, 2, 1, 3))
    return ad.reshape(Xh, Xh.shape[1:]) if single else Xh


def vectorize_tokens(Z: np.ndarray) -> np.ndarray:
    """Row tokens concatenated in subcarrier order; works on (..., N_sc, d_z)."""
    Z = np.asarray(Z)
    return Z.reshape(Z.shape[:-2] + (Z.shape[-2] * Z.shape[-1],))


def unvectorize_tokens(z: np.ndarray, n_subcarriers: int) -> np.ndarray:
    z = np.asarray(z)
    return z.reshape(z.shape[:-1] + (n_subcarriers, z.shape[-1] // n_subcarriers))


def cosine_loss(h: np.ndarray, h_rec: np.ndarray, eps: float = EPS_COS) -> float:
    """Negative normalized correlation magnitude of two complex tensors."""
    a, b = np.ravel(h), np.ravel(h_rec)
    num = abs(np.vdot(a, b))
    return -num / (np.linalg.norm(a) * np.linalg.norm(b) + eps)


def cosine_loss_tensor(X, X_hat: Tensor, eps: float = EPS_COS) -> Tensor:
    """Batch mean of :func:`cosine_loss` on stacked-real inputs (B, F, N, 2)."""
    X = ad.constant(X)
    axes = tuple(range(1, X.ndim - 1))
    a, b = X[..., 0], X[..., 1]
    c, d = X_hat[..., 0], X_hat[..., 1]
    re = ad.tensor_sum(a * c + b * d, axis=axes)
    im = ad.tensor_sum(a * d - b * c, axis=axes)
    num = ad.sqrt(re * re + im * im + 1e-300)
    n_ref = ad.sqrt(ad.tensor_sum(a * a + b * b, axis=axes))
    n_rec = ad.sqrt(ad.tensor_sum(c * c + d * d, axis=axes) + 1e-300)
    return ad.tensor_mean(-num / (n_ref * n_rec + eps))


def encoder_values(ps: ParamSet, prefix: str = "") -> dict[str, np.ndarray]:
    return {n: v for n, v in ps.values().items() if n.startswith(f"{prefix}enc/")}


def encoder_from_values(values: dict[str, np.ndarray]) -> ParamSet:
    return ParamSet(values)


def stage1_train(batches, params: ParamSet, optimizer: ad.Adam, prefix: str = "",
                 step_offset: int = 0) -> list[float]:
    """Minimize the cosine reconstruction loss over ``batches`` of X (B, F, N, 2).

    Labels never enter: ``batches`` yields CSI inputs only. Returns the per-step
    training losses. Raises ``FloatingPointError`` on a non-finite loss.
    """
    losses = []
    for i, X in enumerate(batches):
        def loss_fn():
            return cosine_loss_tensor(X, decode(encode(X, params, prefix), params, prefix))

        (loss,), grads = ad.forward_backward(loss_fn, (), params)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"stage I loss diverged at step {step_offset + i}")
        optimizer.step(params, grads)
        losses.append(value)
    return losses


def reconstruction_loss(X: np.ndarray, params: ParamSet, prefix: str = "") -> float:
    return float(cosine_loss_tensor(X, decode(encode(X, params, prefix), params, prefix)).data)
