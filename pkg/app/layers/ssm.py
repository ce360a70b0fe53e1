"""Selective state-space primitive and the M-Mamba block.

Shapes follow the forecaster: tokens are patches, so scan inputs are
(B, V, N, E) and every (batch, channel) pair is an independent scan lane.
"""
from typing import List, Optional

import numpy as np

from app.engine.module import Linear, Module, parameter
from app.engine.rng import Rng
from app.engine.tensor import Tensor, as_tensor, getitem, make_op, pad, unbroadcast
from app.errors import DomainError, NumericalError, ShapeError
from app.models.schemas import AMode, DMode, MambaBlockConfig

# below this |dt*A| the zero-order-hold input gain switches to its Taylor series
SERIES_THRESHOLD = 1e-4
_GRAD_SERIES_THRESHOLD = 1e-3


def expm1_ratio_series(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return 1.0 + u / 2.0 + u * u / 6.0


def expm1_ratio(u: np.ndarray) -> np.ndarray:
    """(exp(u) - 1) / u, with the series 1 + u/2 + u^2/6 near zero"""
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, u)
    return np.where(small, expm1_ratio_series(u), np.expm1(safe) / safe)


def _expm1_ratio_grad(u: np.ndarray) -> np.ndarray:
    small = np.abs(u) < _GRAD_SERIES_THRESHOLD
    safe = np.where(small, 1.0, u)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + u / 3.0 + u * u / 8.0 + u ** 3 / 30.0
    return np.where(small, series, exact)


def discretize(A: np.ndarray, B: np.ndarray, dt: np.ndarray):
    """Zero-order hold: A_bar = exp(dt A), B_bar = (dt A)^-1 (exp(dt A) - 1) dt B.

    A is (S,) or (E, S); B is (..., S); dt is (..., E). Returns two (..., E, S) arrays.
    """
    A, B, dt = (np.asarray(v, dtype=np.float64) for v in (A, B, dt))
    if np.any(dt <= 0):
        raise DomainError(f"step size must be positive, min dt = {dt.min()}")
    dA = dt[..., None] * A
    A_bar = np.exp(dA)
    B_bar = expm1_ratio(dA) * dt[..., None] * B[..., None, :]
    return A_bar, B_bar


def _check_scan_shapes(u, delta, A, B, C, D) -> None:
    if u.ndim < 2 or delta.shape != u.shape:
        raise ShapeError(f"scan input {u.shape} and step sizes {delta.shape} must match and be (..., N, E)")
    lead_n, E = u.shape[:-1], u.shape[-1]
    S = A.shape[-1]
    if A.shape not in ((S,), (E, S)):
        raise ShapeError(f"A must be (S,) or (E, S) with E={E}, got {A.shape}")
    for label, arr in (("B", B), ("C", C)):
        if arr.shape != lead_n + (S,):
            raise ShapeError(f"{label} must be {lead_n + (S,)}, got {arr.shape}")
    if D.shape not in ((E,), u.shape):
        raise ShapeError(f"D must be ({E},) or {u.shape}, got {D.shape}")


def selective_scan_core(u, delta, A, B, C, D) -> Tensor:
    """h_t = A_bar_t h_{t-1} + B_bar_t u_t,  y_t = C_t h_t + D_t * u_t, with h_0 = 0.

    u, delta: (..., N, E); A: (S,) or (E, S); B, C: (..., N, S); D: (E,) or (..., N, E).
    The scan runs along N. The backward pass is the reverse-time adjoint recurrence.
    """
    tu, tdelta, tA, tB, tC, tD = (as_tensor(v) for v in (u, delta, A, B, C, D))
    u_, dt_, A_, B_, C_, D_ = (t.data for t in (tu, tdelta, tA, tB, tC, tD))
    _check_scan_shapes(u_, dt_, A_, B_, C_, D_)
    if np.any(dt_ <= 0):
        raise DomainError(f"step size must be positive, min dt = {dt_.min()}")

    N = u_.shape[-2]
    dA = dt_[..., None] * A_
    A_bar = np.exp(dA)
    phi = expm1_ratio(dA)
    B_bar = phi * dt_[..., None] * B_[..., None, :]
    drive = B_bar * u_[..., None]

    states = np.empty_like(drive)
    h = np.zeros(drive.shape[:-3] + drive.shape[-2:])
    for t in range(N):
        h = A_bar[..., t, :, :] * h + drive[..., t, :, :]
        if not np.isfinite(h).all():
            raise NumericalError(f"non-finite scan state at token {t}")
        states[..., t, :, :] = h
    y = np.einsum("...nes,...ns->...ne", states, C_) + D_ * u_

    def _backward(gy: np.ndarray):
        gC = np.einsum("...ne,...nes->...ns", gy, states)
        g_states = gy[..., None] * C_[..., None, :]
        gh = np.empty_like(states)
        carry = np.zeros_like(h)
        for t in range(N - 1, -1, -1):
            carry = carry + g_states[..., t, :, :]
            gh[..., t, :, :] = carry
            carry = carry * A_bar[..., t, :, :]
        prev = np.concatenate([np.zeros_like(states[..., :1, :, :]), states[..., :-1, :, :]], axis=-3)

        g_u = (gh * B_bar).sum(axis=-1) + gy * D_
        g_B_bar = gh * u_[..., None]
        g_dA = gh * prev * A_bar + g_B_bar * _expm1_ratio_grad(dA) * dt_[..., None] * B_[..., None, :]
        g_dt = (g_B_bar * phi * B_[..., None, :]).sum(axis=-1) + (g_dA * A_).sum(axis=-1)
        g_B = (g_B_bar * phi * dt_[..., None]).sum(axis=-2)
        g_A = unbroadcast(g_dA * dt_[..., None], A_.shape)
        g_D = unbroadcast(gy * u_, D_.shape)
        return g_u, g_dt, g_A, g_B, gC, g_D

    return make_op("selective_scan", y, (tu, tdelta, tA, tB, tC, tD), _backward)


def lti_convolution_reference(x, A_bar, B_bar, C, D) -> np.ndarray:
    """Time-invariant special case as a causal convolution: y = x * K + D x.

    x: (N, E); A_bar, B_bar: (E, S); C: (S,); D: (E,). K_k = C A_bar^k B_bar per feature.
    Only used to check the scan.
    """
    x, A_bar, B_bar, C, D = (np.asarray(v, dtype=np.float64) for v in (x, A_bar, B_bar, C, D))
    N, E = x.shape
    if A_bar.shape != B_bar.shape or A_bar.shape[0] != E or C.shape != A_bar.shape[-1:]:
        raise ShapeError(f"incompatible LTI parameters {A_bar.shape}, {B_bar.shape}, {C.shape} for x {x.shape}")
    powers = A_bar[None, :, :] ** np.arange(N)[:, None, None]
    kernel = (powers * B_bar[None] * C[None, None, :]).sum(axis=-1)
    y = np.zeros_like(x)
    for t in range(N):
        y[t] = (kernel[: t + 1][::-1] * x[: t + 1]).sum(axis=0)
    return y + D * x


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """Learnable parameters of the selective scan (A, B, C, dt and D projections)"""

    def __init__(
        self,
        d_inner: int,
        d_state: int,
        dt_rank: int,
        a_mode: AMode,
        d_mode: DMode,
        rng: Rng,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        self.d_inner = d_inner
        self.d_state = d_state
        self.a_mode = AMode(a_mode)
        self.d_mode = DMode(d_mode)

        a_log = np.log(np.arange(1, d_state + 1, dtype=np.float64))
        if self.a_mode == AMode.FEATURE_SPECIFIC:
            a_log = np.tile(a_log, (d_inner, 1))
        self.a_log = parameter(a_log)
        self.proj_B = Linear(d_inner, d_state, rng, bias=False)
        self.proj_C = Linear(d_inner, d_state, rng, bias=False)
        self.proj_dt_down = Linear(d_inner, dt_rank, rng, bias=False)
        self.proj_dt_up = Linear(dt_rank, d_inner, rng)
        bound = dt_rank ** -0.5
        self.proj_dt_up.weight.data = rng.uniform((dt_rank, d_inner), -bound, bound)
        dt_init = np.exp(rng.uniform((d_inner,), np.log(dt_min), np.log(dt_max)))
        self.proj_dt_up.bias.data = _inverse_softplus(dt_init)
        if self.d_mode == DMode.FREE:
            self.d_param = parameter(np.ones(d_inner))
            self.proj_D = None
        else:
            self.d_param = None
            self.proj_D = Linear(d_inner, d_inner, rng)

    @property
    def A(self) -> Tensor:
        return -(self.a_log.exp())

    def step_sizes(self, u: Tensor) -> Tensor:
        return self.proj_dt_up(self.proj_dt_down(u)).softplus()

    def skip(self, u: Tensor) -> Tensor:
        return self.d_param if self.d_mode == DMode.FREE else self.proj_D(u)

    def forward(self, u: Tensor) -> Tensor:
        return selective_scan_core(u, self.step_sizes(u), self.A, self.proj_B(u), self.proj_C(u), self.skip(u))


def selective_scan(x: Tensor, params: SelectiveSSM) -> Tensor:
    """Scan (B, V, N, E) tokens with B, C, dt (and D) derived from each token"""
    if x.shape[-1] != params.d_inner:
        raise ShapeError(f"scan expects feature size {params.d_inner}, got input {x.shape}")
    return params(x)


def causal_depthwise_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Left-padded per-feature convolution along the token axis; weight is (K, E)"""
    K = weight.shape[0]
    N = x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-2] = (K - 1, 0)
    padded = pad(x, widths)
    out = None
    for k in range(K):
        window = getitem(padded, (Ellipsis, slice(k, k + N), slice(None)))
        term = window * getitem(weight, k)
        out = term if out is None else out + term
    return out + bias if bias is not None else out


class MambaBlock(Module):
    """Vanilla Mamba or M-Mamba depending on the config flags"""

    def __init__(self, config: MambaBlockConfig, rng: Rng):
        self.config = config
        E, Ei = config.d_model, config.d_inner
        self.in_proj_x = Linear(E, Ei, rng, bias=False)
        self.in_proj_z = Linear(E, Ei, rng, bias=False) if config.use_z_branch else None
        if config.use_conv:
            bound = 1.0 / np.sqrt(config.conv_kernel)
            self.conv_weight = parameter(rng.uniform((config.conv_kernel, Ei), -bound, bound))
            self.conv_bias = parameter(rng.uniform((Ei,), -bound, bound))
        else:
            self.conv_weight = None
            self.conv_bias = None
        self.ssm = SelectiveSSM(Ei, config.d_state, config.resolved_dt_rank, config.a_mode, config.d_mode, rng)
        self.out_proj = Linear(Ei, E, rng, bias=False)

    def trace(self) -> List[str]:
        """Stage names in execution order"""
        stages = ["in_proj_x"]
        if self.config.use_conv:
            stages.append("causal_conv")
        stages += ["silu", "selective_scan"]
        if self.config.use_z_branch:
            stages += ["in_proj_z", "silu_gate"]
        stages.append("out_proj")
        return stages

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[-1] != self.config.d_model:
            raise ShapeError(f"MambaBlock expects (B, V, N, {self.config.d_model}), got {z.shape}")
        x = self.in_proj_x(z)
        if self.config.use_conv:
            x = causal_depthwise_conv(x, self.conv_weight, self.conv_bias)
        x = x.silu()
        y = selective_scan(x, self.ssm)
        if self.config.use_z_branch:
            y = y * self.in_proj_z(z).silu()
        return self.out_proj(y)
