"""State-space sequence kernel: discretization, scans, and Mamba blocks.

The linear time-invariant pieces (SsmParams, discretize, ssm_scan) are the
reference semantics used by tests and oracles. The selective scan and the
(bi-)Mamba blocks are the trainable path and run on autodiff Vars so
gradients come from the tape.

Discretization uses the bilinear map A_bar = (I - d/2 A)^-1 (I + d/2 A),
B_bar = (I - d/2 A)^-1 dB. With every diagonal entry of A negative the
scalar denominators in the selective scan are >= 1, so that path can never
hit a singular system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Var

Arrayish = Union[Var, np.ndarray]


# --- LTI reference path -----------------------------------------------------


@dataclass(frozen=True)
class SsmParams:
    """Continuous-time system: h' = A h + B x, y = C h + D x."""

    A: np.ndarray  # (N, N)
    B: np.ndarray  # (N, 1)
    C: np.ndarray  # (1, N)
    D: float
    delta: float

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, 1) or self.C.shape != (1, n):
            raise ValueError("inconsistent system shapes")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    D_bar: float


def discretize(params: SsmParams) -> DiscreteSsm:
    """Bilinear discretization with time scale delta.

    Raises numpy.linalg.LinAlgError when (I - delta/2 A) is singular.
    """
    n = params.A.shape[0]
    eye = np.eye(n)
    half = 0.5 * params.delta * params.A
    lhs = eye - half
    a_bar = np.linalg.solve(lhs, eye + half)
    b_bar = np.linalg.solve(lhs, params.delta * params.B)
    return DiscreteSsm(a_bar, b_bar, params.C.copy(), params.D)


def ssm_scan(disc: DiscreteSsm, x: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Run the discrete recurrence h_k = A_bar h_{k-1} + B_bar x_k left to right."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h0, dtype=np.float64).copy()
    y = np.empty_like(x)
    for k, xk in enumerate(x):
        h = disc.A_bar @ h + disc.B_bar[:, 0] * xk
        y[k] = disc.C_bar @ h + disc.D_bar * xk
    return y


# --- selective (input-dependent) path ---------------------------------------


def _selective_scan_batch(
    a: Arrayish,
    u: Arrayish,
    delta: Arrayish,
    b_t: Arrayish,
    c_t: Arrayish,
    d_skip: Arrayish,
) -> Var:
    """Batched selective scan.

    a: (d, N) negative diagonal entries; u, delta: (B, T, d);
    b_t, c_t: (B, T, N); d_skip: (d,). Returns (B, T, d).

    Each channel/state pair is a scalar system rediscretized at every step
    with that step's delta, input projection, and readout.
    """
    a = ad.as_var(a)
    u = ad.as_var(u)
    delta = ad.as_var(delta)
    b_t = ad.as_var(b_t)
    c_t = ad.as_var(c_t)
    batch, t_len, d_inner = u.value.shape
    n_state = a.value.shape[1]

    h = Var(np.zeros((batch, d_inner, n_state)))
    ys = []
    for t in range(t_len):
        u_k = ad.reshape(ad.narrow(u, 1, t, 1), (batch, d_inner))
        dt_k = ad.reshape(ad.narrow(delta, 1, t, 1), (batch, d_inner))
        b_k = ad.reshape(ad.narrow(b_t, 1, t, 1), (batch, 1, n_state))
        c_k = ad.reshape(ad.narrow(c_t, 1, t, 1), (batch, 1, n_state))

        half_da = ad.mul(ad.mul(ad.reshape(dt_k, (batch, d_inner, 1)), a), 0.5)
        denom = ad.sub(1.0, half_da)
        a_bar = ad.div(ad.add(1.0, half_da), denom)
        drive = ad.mul(ad.reshape(ad.mul(dt_k, u_k), (batch, d_inner, 1)), b_k)
        h = ad.add(ad.mul(a_bar, h), ad.div(drive, denom))
        ys.append(ad.reduce_sum(ad.mul(h, c_k), axis=2))
    y = ad.stack(ys, axis=1)
    return ad.add(y, ad.mul(u, d_skip))


def selective_ssm_scan(
    a: np.ndarray,
    u: np.ndarray,
    delta_t: np.ndarray,
    b_t: np.ndarray,
    c_t: np.ndarray,
    d_skip: np.ndarray,
) -> np.ndarray:
    """Input-dependent scan over one sequence.

    a: (d, N), u and delta_t: (T, d), b_t and c_t: (T, N), d_skip: (d,).
    Falls back to the LTI scan result when delta_t, b_t, c_t are constant.
    """
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if np.any(delta_t <= 0):
        raise ValueError("delta_t must be positive everywhere")
    out = _selective_scan_batch(
        a, u[None, :, :], delta_t[None, :, :], b_t[None, :, :], c_t[None, :, :], d_skip
    )
    return out.value[0]


# --- Mamba block parameters --------------------------------------------------


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Var:
    limit = 1.0 / math.sqrt(fan_in)
    return Var(rng.uniform(-limit, limit, size=shape))


@dataclass
class MambaBlockParams:
    """One gated selective-SSM block (single direction)."""

    in_proj: Var  # (d_m, 2*d_inner)
    conv_weight: Var  # (d_inner, K)
    conv_bias: Var  # (d_inner,)
    dt_down: Var  # (d_inner, rank)
    dt_up: Var  # (rank, d_inner)
    dt_bias: Var  # (d_inner,)
    b_proj: Var  # (d_inner, N)
    c_proj: Var  # (d_inner, N)
    a_log: Var  # (d_inner, N); A = -exp(a_log)
    d_skip: Var  # (d_inner,)
    out_proj: Var  # (d_inner, d_m)

    def named(self, prefix: str) -> Iterator[tuple[str, Var]]:
        for field_name in (
            "in_proj", "conv_weight", "conv_bias", "dt_down", "dt_up",
            "dt_bias", "b_proj", "c_proj", "a_log", "d_skip", "out_proj",
        ):
            yield f"{prefix}.{field_name}", getattr(self, field_name)


@dataclass
class BiMambaParams:
    """Forward and backward blocks plus the per-step MLP/LN tail."""

    forward: MambaBlockParams
    backward: MambaBlockParams
    mlp_w1: Var  # (d_m, d_mlp)
    mlp_b1: Var  # (d_mlp,)
    mlp_w2: Var  # (d_mlp, d_m)
    mlp_b2: Var  # (d_m,)
    ln_gain: Var  # (d_m,)
    ln_bias: Var  # (d_m,)

    def named(self, prefix: str) -> Iterator[tuple[str, Var]]:
        yield from self.forward.named(f"{prefix}.fwd")
        yield from self.backward.named(f"{prefix}.bwd")
        for field_name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_gain", "ln_bias"):
            yield f"{prefix}.{field_name}", getattr(self, field_name)


@dataclass(frozen=True)
class EncoderActivations:
    """Branch activations of one bi-directional block, for inspection."""

    x_forward: np.ndarray
    x_backward: np.ndarray
    y_hat: np.ndarray
    x_l: np.ndarray


def dt_rank(d_inner: int) -> int:
    return max(1, math.ceil(d_inner / 16))


def init_mamba_block(
    token_dim: int,
    state_dim: int,
    expand: int,
    conv_width: int,
    rng: np.random.Generator,
) -> MambaBlockParams:
    d_inner = expand * token_dim
    rank = dt_rank(d_inner)
    # a_log makes the n-th state decay like -(n+1); d_skip starts as identity.
    a_log = np.tile(np.log(np.arange(1, state_dim + 1)), (d_inner, 1))
    return MambaBlockParams(
        in_proj=uniform_init(rng, token_dim, (token_dim, 2 * d_inner)),
        conv_weight=uniform_init(rng, conv_width, (d_inner, conv_width)),
        conv_bias=Var(np.zeros(d_inner)),
        dt_down=uniform_init(rng, d_inner, (d_inner, rank)),
        dt_up=uniform_init(rng, rank, (rank, d_inner)),
        dt_bias=Var(np.zeros(d_inner)),
        b_proj=uniform_init(rng, d_inner, (d_inner, state_dim)),
        c_proj=uniform_init(rng, d_inner, (d_inner, state_dim)),
        a_log=Var(a_log),
        d_skip=Var(np.ones(d_inner)),
        out_proj=uniform_init(rng, d_inner, (d_inner, token_dim)),
    )


def init_bi_mamba(
    token_dim: int,
    state_dim: int,
    expand: int,
    conv_width: int,
    mlp_dim: int,
    rng: np.random.Generator,
) -> BiMambaParams:
    return BiMambaParams(
        forward=init_mamba_block(token_dim, state_dim, expand, conv_width, rng),
        backward=init_mamba_block(token_dim, state_dim, expand, conv_width, rng),
        mlp_w1=uniform_init(rng, token_dim, (token_dim, mlp_dim)),
        mlp_b1=Var(np.zeros(mlp_dim)),
        mlp_w2=uniform_init(rng, mlp_dim, (mlp_dim, token_dim)),
        mlp_b2=Var(np.zeros(token_dim)),
        ln_gain=Var(np.ones(token_dim)),
        ln_bias=Var(np.zeros(token_dim)),
    )


# --- block forward passes -----------------------------------------------------


def mamba_block_batch(params: MambaBlockParams, x: Arrayish) -> Var:
    """Gated selective-SSM transform of (B, T, d_m) token sequences.

    Causal: output at step t depends only on inputs at steps <= t.
    """
    x = ad.as_var(x)
    d_inner = params.conv_weight.value.shape[0]
    if x.value.ndim != 3 or x.value.shape[2] != params.in_proj.value.shape[0]:
        raise ValueError(f"expected (B, T, {params.in_proj.value.shape[0]}), got {x.value.shape}")

    xz = ad.matmul(x, params.in_proj)
    x_path = ad.narrow(xz, 2, 0, d_inner)
    gate = ad.narrow(xz, 2, d_inner, d_inner)

    u = ad.silu(ad.depthwise_causal_conv(x_path, params.conv_weight, params.conv_bias))
    dt = ad.softplus(
        ad.affine(ad.matmul(u, params.dt_down), params.dt_up, params.dt_bias)
    )
    b_t = ad.matmul(u, params.b_proj)
    c_t = ad.matmul(u, params.c_proj)
    a = ad.neg(ad.exp(params.a_log))

    y = _selective_scan_batch(a, u, dt, b_t, c_t, params.d_skip)
    y = ad.mul(y, ad.silu(gate))
    return ad.matmul(y, params.out_proj)


def bi_mamba_block_batch(params: BiMambaParams, x: Arrayish) -> tuple[Var, tuple]:
    """One bi-directional block over (B, T, d_m); returns output and branches."""
    x = ad.as_var(x)
    x_fwd = mamba_block_batch(params.forward, x)
    x_bwd = ad.flip(mamba_block_batch(params.backward, ad.flip(x, 1)), 1)
    y_hat = ad.add(x_fwd, x_bwd)
    hidden = ad.silu(ad.affine(y_hat, params.mlp_w1, params.mlp_b1))
    mlp = ad.affine(hidden, params.mlp_w2, params.mlp_b2)
    x_l = ad.add(y_hat, ad.layer_norm(mlp, params.ln_gain, params.ln_bias))
    return x_l, (x_fwd, x_bwd, y_hat)


def mamba_block(params: MambaBlockParams, x: Arrayish) -> np.ndarray:
    """Single-sequence (T, d_m) wrapper around the batched block."""
    x = ad.as_var(x)
    out = mamba_block_batch(params, ad.reshape(x, (1,) + x.value.shape))
    return out.value[0]


def bi_mamba_block(
    params: BiMambaParams, x: Arrayish
) -> tuple[np.ndarray, EncoderActivations]:
    x = ad.as_var(x)
    out, (x_fwd, x_bwd, y_hat) = bi_mamba_block_batch(
        params, ad.reshape(x, (1,) + x.value.shape)
    )
    acts = EncoderActivations(
        x_forward=x_fwd.value[0],
        x_backward=x_bwd.value[0],
        y_hat=y_hat.value[0],
        x_l=out.value[0],
    )
    return out.value[0], acts
