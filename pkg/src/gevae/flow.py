"""Permutation-equivariant normalizing flow over node embedding channels.

The flow alternates rational-quadratic spline couplings, whose spline
parameters come from an ISAB stack reading the passive channels of every
node, with invertible channel-mixing (1x1) layers stored in LU form.
Both act row-wise on an ``(B, n, P)`` tensor, so relabelling nodes permutes
the output rows and leaves the log-determinant unchanged.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .attention import ISABStack

DEFAULT_MIN_BIN_WIDTH = 1e-3
DEFAULT_MIN_BIN_HEIGHT = 1e-3
DEFAULT_MIN_DERIVATIVE = 1e-3
SINGULAR_DET = 1e-12


class FlowNumericalError(ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        prefix = f"flow layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)
        self.layer = layer


class FlowResult(NamedTuple):
    output: torch.Tensor
    log_det: torch.Tensor


def identity_derivative_logit(min_derivative: float = DEFAULT_MIN_DERIVATIVE) -> float:
    """Unconstrained value that maps to a knot derivative of exactly 1."""
    return math.log(math.expm1(1.0 - min_derivative))


def _knots(unnormalized, bound, min_size):
    k = unnormalized.shape[-1]
    sizes = torch.softmax(unnormalized, dim=-1)
    sizes = min_size + (1.0 - min_size * k) * sizes
    cum = torch.cumsum(sizes, dim=-1)
    cum = F.pad(cum, (1, 0), value=0.0)
    cum = 2.0 * bound * cum - bound
    cum = torch.cat([torch.full_like(cum[..., :1], -bound), cum[..., 1:-1],
                     torch.full_like(cum[..., :1], bound)], dim=-1)
    return cum, cum[..., 1:] - cum[..., :-1]


def _gather(t, idx):
    return t.gather(-1, idx[..., None])[..., 0]


def rational_quadratic_spline(inputs, unnormalized_widths, unnormalized_heights,
                              unnormalized_derivatives, inverse=False, tail_bound=3.0,
                              min_bin_width=DEFAULT_MIN_BIN_WIDTH,
                              min_bin_height=DEFAULT_MIN_BIN_HEIGHT,
                              min_derivative=DEFAULT_MIN_DERIVATIVE):
    """Monotone rational-quadratic spline on ``[-B, B]`` with identity tails.

    Parameters
    ----------
    inputs : Tensor, shape (...)
    unnormalized_widths, unnormalized_heights : Tensor, shape (..., K)
    unnormalized_derivatives : Tensor, shape (..., K - 1)
        Interior knot derivatives; the two boundary derivatives are 1 so the
        spline joins the linear tails smoothly.

    Returns
    -------
    outputs, logabsdet : Tensor, shape (...)
        ``logabsdet`` is ``log |dy/dx|`` of the map being applied (the inverse
        map when ``inverse=True``).
    """
    b = float(tail_bound)
    inside = (inputs >= -b) & (inputs <= b)
    x = inputs.clamp(-b, b)

    cumwidths, widths = _knots(unnormalized_widths, b, min_bin_width)
    cumheights, heights = _knots(unnormalized_heights, b, min_bin_height)
    interior = min_derivative + F.softplus(unnormalized_derivatives)
    one = torch.ones_like(interior[..., :1])
    derivs = torch.cat([one, interior, one], dim=-1)

    edges = cumheights if inverse else cumwidths
    idx = torch.searchsorted(edges[..., 1:-1].contiguous(), x[..., None].contiguous(),
                             right=True)[..., 0]

    x_k = _gather(cumwidths, idx)
    w_k = _gather(widths, idx)
    y_k = _gather(cumheights, idx)
    h_k = _gather(heights, idx)
    d_k = _gather(derivs, idx)
    d_k1 = _gather(derivs, idx + 1)
    s_k = h_k / w_k

    if inverse:
        dy = x - y_k
        c0 = d_k1 + d_k - 2.0 * s_k
        a = h_k * (s_k - d_k) + dy * c0
        bq = h_k * d_k - dy * c0
        c = -s_k * dy
        disc = (bq.pow(2) - 4.0 * a * c).clamp_min(0.0)
        theta = (2.0 * c) / (-bq - torch.sqrt(disc))
        out = theta * w_k + x_k
    else:
        theta = (x - x_k) / w_k
        tt = theta * (1.0 - theta)
        num = h_k * (s_k * theta.pow(2) + d_k * tt)
        den = s_k + (d_k1 + d_k - 2.0 * s_k) * tt
        out = y_k + num / den

    tt = theta * (1.0 - theta)
    den = s_k + (d_k1 + d_k - 2.0 * s_k) * tt
    dnum = s_k.pow(2) * (d_k1 * theta.pow(2) + 2.0 * s_k * tt + d_k * (1.0 - theta).pow(2))
    lad = torch.log(dnum) - 2.0 * torch.log(den)
    if inverse:
        lad = -lad

    out = torch.where(inside, out, inputs)
    lad = torch.where(inside, lad, torch.zeros_like(lad))
    return out, lad


def channel_split(P: int, parity: int) -> tuple[list[int], list[int]]:
    """(passive, active) channel indices; ``parity`` 0 keeps even channels passive."""
    even = list(range(0, P, 2))
    odd = list(range(1, P, 2))
    return (even, odd) if parity % 2 == 0 else (odd, even)


class SplineCoupling(nn.Module):
    """Coupling layer transforming the active channels with per-node splines.

    The conditioner reads the passive channels of all valid nodes, so a node's
    spline can depend on the whole set. Its last layer starts at zero with a
    bias that yields the identity spline.
    """

    def __init__(self, P: int, parity: int, num_bins: int = 8, tail_bound: float = 3.0,
                 dim: int = 64, num_heads: int = 4, num_inducing: int = 32, depth: int = 2,
                 index: int = 0):
        super().__init__()
        self.P = P
        self.num_bins = num_bins
        self.tail_bound = float(tail_bound)
        self.index = index
        passive, active = channel_split(P, parity)
        self.register_buffer("passive", torch.tensor(passive, dtype=torch.long))
        self.register_buffer("active", torch.tensor(active, dtype=torch.long))
        per_channel = 3 * num_bins - 1
        self.conditioner = ISABStack(len(passive), len(active) * per_channel, dim, num_heads,
                                     num_inducing, depth)
        self.reset_identity()

    def reset_identity(self):
        out = self.conditioner.output
        nn.init.zeros_(out.weight)
        bias = torch.zeros(len(self.active), 3 * self.num_bins - 1, dtype=out.bias.dtype)
        bias[:, 2 * self.num_bins:] = identity_derivative_logit()
        with torch.no_grad():
            out.bias.copy_(bias.reshape(-1))

    def _spline_params(self, x, mask):
        k = self.num_bins
        raw = self.conditioner(x[..., self.passive], mask)
        if not torch.isfinite(raw).all():
            raise FlowNumericalError("conditioner produced non-finite spline parameters", self.index)
        raw = raw.view(*x.shape[:2], len(self.active), 3 * k - 1)
        return raw[..., :k], raw[..., k:2 * k], raw[..., 2 * k:]

    def _transform(self, x, mask, inverse):
        if len(self.active) == 0:
            return FlowResult(x, x.new_zeros(x.shape[0]))
        uw, uh, ud = self._spline_params(x, mask)
        xa = x[..., self.active]
        ya, lad = rational_quadratic_spline(xa, uw, uh, ud, inverse=inverse,
                                            tail_bound=self.tail_bound)
        valid = mask[..., None]
        ya = torch.where(valid, ya, xa)
        lad = (lad * valid.to(lad.dtype)).sum(dim=(1, 2))
        y = x.clone()
        y[..., self.active] = ya
        return FlowResult(y, lad)

    def forward(self, x, mask):
        return self._transform(x, mask, inverse=False)

    def inverse(self, y, mask):
        return self._transform(y, mask, inverse=True)


class ChannelMixing(nn.Module):
    """Invertible ``P x P`` channel mixing applied to every node row.

    ``W = Perm @ L @ (U + diag(sign * exp(log_scale)))`` with a fixed
    permutation, unit lower-triangular ``L`` and strictly upper ``U``; so
    ``log |det W| = sum(log_scale)``.
    """

    def __init__(self, P: int, index: int = 0, init: str = "orthogonal"):
        super().__init__()
        self.P = P
        self.index = index
        if init == "identity":
            w = torch.eye(P, dtype=torch.float64)
        else:
            w, _ = torch.linalg.qr(torch.randn(P, P, dtype=torch.float64))
        self._set_matrix(w)

    def _set_matrix(self, w: torch.Tensor):
        perm, lower, upper = torch.linalg.lu(w.to(torch.float64))
        diag = torch.diagonal(upper)
        if torch.any(diag.abs() < SINGULAR_DET):
            raise FlowNumericalError("mixing matrix is singular", self.index)
        eye = torch.eye(self.P, dtype=torch.float64)
        for name, value in (("perm", perm), ("sign", torch.sign(diag)),
                            ("lower_mask", torch.tril(torch.ones_like(eye), -1)),
                            ("eye", eye)):
            if name in self._buffers:
                self._buffers[name] = value
            else:
                self.register_buffer(name, value)
        self.lower = nn.Parameter(torch.tril(lower, -1))
        self.upper = nn.Parameter(torch.triu(upper, 1))
        self.log_scale = nn.Parameter(torch.log(diag.abs()))

    @classmethod
    def from_matrix(cls, w, index: int = 0) -> "ChannelMixing":
        w = torch.as_tensor(w, dtype=torch.float64)
        layer = cls(w.shape[0], index=index, init="identity")
        layer._set_matrix(w)
        return layer

    def _factors(self):
        lower = self.lower * self.lower_mask + self.eye
        upper = torch.triu(self.upper, 1) + torch.diag(self.sign * torch.exp(self.log_scale))
        return lower, upper

    def log_abs_det(self) -> torch.Tensor:
        lad = self.log_scale.sum()
        if lad.item() < math.log(SINGULAR_DET):
            raise FlowNumericalError("mixing matrix is numerically singular", self.index)
        return lad

    def matrix(self) -> torch.Tensor:
        lower, upper = self._factors()
        return self.perm @ lower @ upper

    def forward(self, x, mask):
        lad = self.log_abs_det()
        y = x @ self.matrix().to(x.dtype).T
        valid = mask[..., None]
        y = torch.where(valid, y, x)
        return FlowResult(y, lad * mask.sum(dim=1).to(x.dtype))

    def inverse(self, y, mask):
        lad = self.log_abs_det()
        lower, upper = self._factors()
        flat = y.reshape(-1, self.P).to(lower.dtype) @ self.perm
        a = torch.linalg.solve_triangular(lower, flat.T, upper=False, unitriangular=True)
        x = torch.linalg.solve_triangular(upper, a, upper=True).T.reshape(y.shape).to(y.dtype)
        valid = mask[..., None]
        x = torch.where(valid, x, y)
        return FlowResult(x, -lad * mask.sum(dim=1).to(y.dtype))


class Flow(nn.Module):
    """Coupling, mixing, coupling, ... with ``num_couplings`` spline couplings.

    Parameters
    ----------
    P : int
        Number of embedding channels.
    num_couplings : int
        Spline coupling layers; one mixing layer sits between consecutive ones.
        Zero gives the identity map.
    """

    def __init__(self, P: int, num_couplings: int = 6, num_bins: int = 8,
                 tail_bound: float = 3.0, dim: int = 64, num_heads: int = 4,
                 num_inducing: int = 32, depth: int = 2, mixing_init: str = "orthogonal"):
        super().__init__()
        self.P = P
        layers: list[nn.Module] = []
        for k in range(num_couplings):
            if k > 0:
                layers.append(ChannelMixing(P, index=len(layers), init=mixing_init))
            layers.append(SplineCoupling(P, parity=k, num_bins=num_bins, tail_bound=tail_bound,
                                         dim=dim, num_heads=num_heads, num_inducing=num_inducing,
                                         depth=depth, index=len(layers)))
        self.layers = nn.ModuleList(layers)

    @staticmethod
    def _mask(x, mask):
        if mask is None:
            return torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        return mask.to(torch.bool)

    def forward(self, z0: torch.Tensor, mask: torch.Tensor | None = None) -> FlowResult:
        mask = self._mask(z0, mask)
        z = z0
        total = z0.new_zeros(z0.shape[0])
        for layer in self.layers:
            z, lad = layer(z, mask)
            total = total + lad
        return FlowResult(z, total)

    def inverse(self, z: torch.Tensor, mask: torch.Tensor | None = None) -> FlowResult:
        mask = self._mask(z, mask)
        x = z
        total = z.new_zeros(z.shape[0])
        for layer in reversed(self.layers):
            x, lad = layer.inverse(x, mask)
            total = total + lad
        return FlowResult(x, total)
