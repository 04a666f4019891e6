"""State-space layer: zero-order-hold discretization, the sequential
selective scan, and the gated Mamba block.

The state matrix is diagonal per channel, so every discretized quantity
is elementwise::

    A_bar = exp(delta * a)
    B_bar = (exp(delta * a) - 1) / a * b        (-> delta * b as a -> 0)
    h_t   = A_bar_t * h_{t-1} + B_bar_t * x_t,   h_0 = 0
    y_t   = <C_t, h_t> + D * x_t
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import ShapeError, Tensor, as_tensor, make_op
from .nn import Linear, Module, Parameter, uniform_init

# below this |delta * a| the first-order series replaces expm1(z)/z
SERIES_THRESHOLD = 1e-6


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, continuous through z = 0."""
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(z) / safe)


def _dphi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    exact = (z * np.exp(z) - np.expm1(z)) / (safe * safe)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, exact)


def discretize(a, b, delta):
    """Zero-order-hold discretization of a diagonal SSM.

    All arguments broadcast elementwise. Returns ``(A_bar, B_bar)``.
    """
    a, b, delta = np.asarray(a, float), np.asarray(b, float), np.asarray(delta, float)
    if np.any(delta <= 0):
        raise ValueError("discretize: delta must be strictly positive")
    z = delta * a
    return np.exp(z), delta * b * _phi(z)


def selective_scan(x, delta, A, B, C, D=None) -> Tensor:
    """Run the discretized recurrence over the sequence axis.

    Shapes: x, delta (N, L, Dc); A (Dc, S); B, C (N, L, S); D (Dc,).
    Differentiable in every argument.
    """
    x, delta, A, B, C = (as_tensor(t) for t in (x, delta, A, B, C))
    if x.ndim != 3:
        raise ShapeError(f"selective_scan: expected N x L x C input, got {x.shape}")
    n, length, dc = x.shape
    if length == 0:
        raise ShapeError("selective_scan: empty sequence")
    s = A.shape[1] if A.ndim == 2 else -1
    if (delta.shape != x.shape or A.shape != (dc, s)
            or B.shape != (n, length, s) or C.shape != (n, length, s)):
        raise ShapeError(f"selective_scan: x {x.shape}, delta {delta.shape}, A {A.shape}, "
                         f"B {B.shape}, C {C.shape} do not conform")
    if np.any(delta.data <= 0):
        raise ValueError("selective_scan: delta must be strictly positive")
    inputs = [x, delta, A, B, C]
    if D is not None:
        D = as_tensor(D)
        if D.shape != (dc,):
            raise ShapeError(f"selective_scan: skip term {D.shape} does not match {dc} channels")
        inputs.append(D)

    xd, dd, Bd, Cd = x.data, delta.data, B.data, C.data
    z = dd[..., None] * A.data                      # N L Dc S
    a_bar = np.exp(z)
    phi = _phi(z)
    bx = dd[..., None] * phi * Bd[:, :, None, :] * xd[..., None]
    h = np.empty_like(bx)
    state = np.zeros((n, dc, s), dtype=xd.dtype)
    for t in range(length):
        state = a_bar[:, t] * state + bx[:, t]
        h[:, t] = state
    y = np.einsum("nlds,nls->nld", h, Cd)
    if D is not None:
        y = y + D.data * xd

    def backward(gy):
        g_c = np.einsum("nld,nlds->nls", gy, h)
        gh_out = gy[..., None] * Cd[:, :, None, :]
        gh = np.empty_like(h)
        acc = np.zeros((n, dc, s), dtype=h.dtype)
        for t in range(length - 1, -1, -1):
            acc = gh_out[:, t] + (a_bar[:, t + 1] * acc if t + 1 < length else 0.0)
            gh[:, t] = acc
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        gz = gh * h_prev * a_bar                    # through A_bar = exp(z)
        gbxb = gh * Bd[:, :, None, :] * xd[..., None]
        g_delta = (gz * A.data).sum(-1) + (gbxb * a_bar).sum(-1)
        g_a = (gz * dd[..., None]).sum((0, 1)) + (gbxb * dd[..., None] ** 2 * _dphi(z)).sum((0, 1))
        scaled = gh * dd[..., None] * phi
        g_b = np.einsum("nlds,nld->nls", scaled, xd)
        g_x = np.einsum("nlds,nls->nld", scaled, Bd)
        grads = [g_x, g_delta, g_a, g_b, g_c]
        if D is not None:
            grads[0] = g_x + gy * D.data
            grads.append((gy * xd).sum((0, 1)))
        return grads

    return make_op("selective_scan", y, inputs, backward)


class SelectiveSSM(Module):
    """Diagonal SSM over ``channels`` with state size ``state_size``.

    With ``selective=True`` the step size, input projection and output
    projection are computed per token from the input; otherwise they are
    learned constants shared across the sequence.
    """

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator, selective: bool = True):
        self.selective = selective
        self.A_log = Parameter(np.log(np.tile(np.arange(1, state_size + 1, dtype=float), (channels, 1))))
        self.D = Parameter(np.ones(channels))
        if selective:
            self.B_proj = Linear(channels, state_size, rng, bias=False)
            self.C_proj = Linear(channels, state_size, rng, bias=False)
            self.dt_proj = Linear(channels, channels, rng)
        else:
            self.B = uniform_init(rng, (state_size,), state_size)
            self.C = uniform_init(rng, (state_size,), state_size)
            self.dt = Parameter(np.zeros(channels))

    def state_matrix(self) -> Tensor:
        return ops.neg(ops.exp(self.A_log))

    def forward(self, u):
        n, length, _ = u.shape
        s = self.A_log.shape[1]
        if self.selective:
            delta = ops.softplus(self.dt_proj(u))
            B, C = self.B_proj(u), self.C_proj(u)
        else:
            delta = ops.expand(ops.softplus(self.dt), u.shape)
            B = ops.expand(self.B, (n, length, s))
            C = ops.expand(self.C, (n, length, s))
        return selective_scan(u, delta, self.state_matrix(), B, C, self.D)


class MambaBlock(Module):
    """down( SSM(SiLU(causal_conv(up_scan x))) * SiLU(up_gate x) )."""

    def __init__(self, dim: int, rng: np.random.Generator, expand: int = 2, state_size: int = 16,
                 conv_width: int = 4, selective: bool = True):
        if expand < 1:
            raise ValueError("expansion ratio must be >= 1")
        inner = expand * dim
        self.up_scan = Linear(dim, inner, rng)
        self.up_gate = Linear(dim, inner, rng)
        self.conv_weight = uniform_init(rng, (inner, conv_width), conv_width)
        self.conv_bias = Parameter(np.zeros(inner))
        self.ssm = SelectiveSSM(inner, state_size, rng, selective=selective)
        self.down = Linear(inner, dim, rng)

    def forward(self, x):
        scan = ops.silu(ops.depthwise_conv1d(self.up_scan(x), self.conv_weight, self.conv_bias))
        scan = self.ssm(scan)
        gate = ops.silu(self.up_gate(x))
        return self.down(ops.mul(scan, gate))
