"""Planar normalizing flows over the multiplicative auxiliary variable z.

A :class:`FlowStack` maps a standard-normal base sample ``z0`` through an
optional elementwise affine layer (``shift + softplus(raw_scale) * z0``)
followed by planar layers ``z + u_hat * tanh(w.z + b)``.

Planar layers have no closed-form inverse.  :meth:`FlowStack.log_density_at`
inverts them numerically: each layer reduces to a monotone scalar equation in
``a = w.z``, solved with a bracketed Newton iteration.  The inverse is
recorded as a differentiable op (implicit-function Jacobian), so the density
of a frozen flow can be evaluated at a point produced by a trainable one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import inverse_softplus
from .errors import ContractError, DimensionError

LOG_2PI = math.log(2.0 * math.pi)
INVERSION_TOL = 1e-10


def nf_enforce_invertible(u, w) -> Tensor:
    """Adjust ``u`` so that ``u_hat . w >= -1``.

    u_hat = u + (m(u.w) - u.w) * w / |w|^2 with m(a) = -1 + softplus(a).
    A zero ``w`` leaves ``u`` untouched (the layer is then a constant shift);
    so does a ``w`` whose squared norm underflows.
    """
    u, w = ad.as_tensor(u), ad.as_tensor(w)
    wn = ad.dot(w, w)
    if wn.item() < np.finfo(np.float64).tiny:
        return u
    uw = ad.dot(u, w)
    m = ad.softplus(uw) - 1.0
    return u + ((m - uw) / wn) * w


@dataclass
class PlanarLayer:
    u: Tensor
    w: Tensor
    b: Tensor

    def u_hat(self) -> Tensor:
        return nf_enforce_invertible(self.u, self.w)

    def parameters(self) -> list[Tensor]:
        return [self.u, self.w, self.b]


def _column(v: Tensor, d: int) -> Tensor:
    return ad.reshape(v, (d, 1))


def _planar_apply(z: Tensor, u_hat: Tensor, layer: PlanarLayer) -> Tensor:
    d = z.shape[1]
    h = ad.tanh(ad.matmul(z, _column(layer.w, d)) + layer.b)
    return z + ad.matmul(h, ad.reshape(u_hat, (1, d)))


def _planar_logdet(z: Tensor, u_hat: Tensor, layer: PlanarLayer) -> Tensor:
    n, d = z.shape
    h = ad.tanh(ad.matmul(z, _column(layer.w, d)) + layer.b)
    psi_u = (1.0 - ad.square(h)) * ad.dot(u_hat, layer.w)
    return ad.reshape(ad.log(ad.tabs(1.0 + psi_u)), (n,))


def _scale_columns(z: Tensor, s: Tensor) -> Tensor:
    return ad.transpose(ad.scale_rows(ad.transpose(z), s))


def log_std_normal(z0: Tensor) -> Tensor:
    """Row-wise log N(z0 | 0, I) for z0 of shape (n, d)."""
    n, d = z0.shape
    quad = ad.reshape(ad.matmul(ad.square(z0), Tensor(np.ones((d, 1)))), (n,))
    return -0.5 * quad - 0.5 * d * LOG_2PI


def _solve_planar(t: np.ndarray, c: float, b: float) -> np.ndarray:
    """Solve a + c * tanh(a + b) = t elementwise; requires c > -1."""
    lo = t - abs(c)
    hi = t + abs(c)
    a = t.copy()
    for _ in range(200):
        th = np.tanh(a + b)
        f = a + c * th - t
        lo = np.where(f < 0, a, lo)
        hi = np.where(f > 0, a, hi)
        step = f / (1.0 + c * (1.0 - th * th))
        nxt = a - step
        outside = (nxt <= lo) | (nxt >= hi)
        nxt = np.where(outside, 0.5 * (lo + hi), nxt)
        if np.all(np.abs(nxt - a) <= 1e-15 * (1.0 + np.abs(a))):
            a = nxt
            break
        a = nxt
    resid = np.abs(a + c * np.tanh(a + b) - t)
    if not np.all(resid <= INVERSION_TOL * (1.0 + np.abs(t))):
        raise ContractError(f"planar flow inversion did not converge (residual {resid.max():.3g})")
    return a


def _planar_inverse(y: Tensor, u_hat: np.ndarray, w: np.ndarray, b: float, hint=None) -> Tensor:
    if hint is not None:
        z = np.asarray(hint, dtype=np.float64).reshape(y.shape)
        h = np.tanh(z @ w + b)
    else:
        c = float(u_hat @ w)
        a = _solve_planar(y.data @ w, c, b)
        h = np.tanh(a + b)
        z = y.data - h[:, None] * u_hat[None, :]
    sech2 = 1.0 - h * h
    slope = 1.0 + float(u_hat @ w) * sech2

    def backward(g):
        coef = sech2 * (g @ u_hat) / slope
        return (g - coef[:, None] * w[None, :],)

    return ad.custom_op(z, (y,), backward, "planar_inverse")


def _affine_inverse(y: Tensor, shift: np.ndarray, scale: np.ndarray, hint=None) -> Tensor:
    z = (y.data - shift) / scale if hint is None else np.asarray(hint, dtype=np.float64).reshape(y.shape)
    return ad.custom_op(z, (y,), lambda g: (g / scale,), "affine_inverse")


class FlowStack:
    """Affine (optional) followed by planar layers, all of dimension ``dim``."""

    def __init__(self, dim: int, planar=(), shift: Tensor | None = None, raw_scale: Tensor | None = None):
        if (shift is None) != (raw_scale is None):
            raise ValueError("shift and raw_scale must be given together")
        self.dim = int(dim)
        self.planar = list(planar)
        self.shift = shift
        self.raw_scale = raw_scale
        for p in self.parameters():
            if p.shape not in ((self.dim,), ()):
                raise DimensionError(f"flow parameter of shape {p.shape} in a flow of dim {self.dim}")

    @classmethod
    def init(
        cls,
        dim: int,
        rng: np.random.Generator,
        depth: int = 2,
        affine: bool = True,
        shift: float = 1.0,
        scale: float = 0.1,
        std: float = 0.01,
    ) -> "FlowStack":
        layers = [
            PlanarLayer(
                Tensor(rng.normal(0.0, std, dim), True),
                Tensor(rng.normal(0.0, std, dim), True),
                Tensor(0.0, True),
            )
            for _ in range(depth)
        ]
        if affine:
            return cls(dim, layers, Tensor(np.full(dim, shift), True), Tensor(inverse_softplus(np.full(dim, scale)), True))
        return cls(dim, layers)

    @classmethod
    def from_arrays(cls, dim: int, arrays: dict, requires_grad: bool = False) -> "FlowStack":
        depth = sum(1 for k in arrays if k.startswith("planar") and k.endswith(".u"))
        layers = [
            PlanarLayer(*(Tensor(arrays[f"planar{k}.{n}"], requires_grad) for n in ("u", "w", "b")))
            for k in range(depth)
        ]
        if "shift" in arrays:
            return cls(dim, layers, Tensor(arrays["shift"], requires_grad), Tensor(arrays["raw_scale"], requires_grad))
        return cls(dim, layers)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.shift is not None:
            out["shift"] = self.shift
            out["raw_scale"] = self.raw_scale
        for k, layer in enumerate(self.planar):
            out[f"planar{k}.u"] = layer.u
            out[f"planar{k}.w"] = layer.w
            out[f"planar{k}.b"] = layer.b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def frozen(self) -> "FlowStack":
        """Constant deep copy, used as the old flow inside a prior snapshot."""
        flow = FlowStack.from_arrays(self.dim, self.arrays(), requires_grad=False)
        for p in flow.parameters():
            p.data.setflags(write=False)
        return flow

    def same_parameters(self, other: "FlowStack") -> bool:
        a, b = self.named_parameters(), other.named_parameters()
        return a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)

    def __len__(self) -> int:
        return len(self.planar) + (self.shift is not None)

    def _as_batch(self, z0) -> tuple[Tensor, bool]:
        z0 = ad.as_tensor(z0)
        if z0.ndim == 1:
            z0 = ad.reshape(z0, (1, z0.shape[0]))
            single = True
        else:
            single = False
        if z0.ndim != 2 or z0.shape[1] != self.dim:
            raise DimensionError(f"flow of dim {self.dim} got input of shape {z0.shape}")
        return z0, single

    def _scale(self) -> Tensor:
        return ad.softplus(self.raw_scale)

    def run(self, z0):
        """Push ``z0`` (d,) or (n, d) forward.

        Returns ``(z, per-layer log-dets, layer inputs)``; log-dets have shape
        (n,) and are listed in application order.
        """
        z, single = self._as_batch(z0)
        logdets, path = [], []
        if self.shift is not None:
            scale = self._scale()
            path.append(z.data)
            logdets.append(ad.tsum(ad.log(scale)))
            z = ad.add_bias(_scale_columns(z, scale), self.shift)
        for layer in self.planar:
            u_hat = layer.u_hat()
            path.append(z.data)
            logdets.append(_planar_logdet(z, u_hat, layer))
            z = _planar_apply(z, u_hat, layer)
        return z, logdets, path, single

    def log_density_at(self, y: Tensor, path=None) -> Tensor:
        """log q(y) row-wise for y of shape (n, d), differentiable in ``y``.

        ``path`` may supply the exact layer inputs (as returned by
        :meth:`run` on a flow with identical parameters), skipping the
        numeric inversion.
        """
        y = ad.as_tensor(y)
        n_aff = int(self.shift is not None)
        logdets = [None] * len(self)
        cur = y
        for k in range(len(self.planar) - 1, -1, -1):
            layer = self.planar[k]
            u_hat = layer.u_hat()
            hint = None if path is None else path[k + n_aff]
            cur = _planar_inverse(cur, u_hat.data, layer.w.data, float(layer.b.data), hint)
            logdets[k + n_aff] = _planar_logdet(cur, u_hat, layer)
        if n_aff:
            scale = self._scale()
            hint = None if path is None else path[0]
            cur = _affine_inverse(cur, self.shift.data, scale.data, hint)
            logdets[0] = ad.tsum(ad.log(scale))
        return _combine(cur, logdets)


def _combine(z0: Tensor, logdets) -> Tensor:
    out = log_std_normal(z0)
    total = None
    for ld in logdets:
        total = ld if total is None else total + ld
    return out if total is None else out - total


def _sum_logdets(logdets, n: int) -> Tensor:
    total = Tensor(np.zeros(n))
    for ld in logdets:
        total = total + ld
    return total


def nf_forward(flow: FlowStack, z0):
    """``(z, log_det_sum)``; shapes follow ``z0`` ((d,) -> (d,) and scalar)."""
    z, logdets, _, single = flow.run(z0)
    lds = _sum_logdets(logdets, z.shape[0])
    if single:
        return ad.reshape(z, (flow.dim,)), ad.reshape(lds, ())
    return z, lds


def nf_log_density(flow: FlowStack, z0):
    """``(z, log q(z))`` with log q(z) = log q0(z0) - sum of log-dets."""
    z0t, single = flow._as_batch(z0)
    z, logdets, _, _ = flow.run(z0t)
    logq = _combine(z0t, logdets)
    if single:
        return ad.reshape(z, (flow.dim,)), ad.reshape(logq, ())
    return z, logq


def nf_inverse(flow: FlowStack, y) -> np.ndarray:
    """Base-space preimage of ``y`` (no gradient)."""
    y, single = flow._as_batch(y)
    cur = y
    with ad.no_grad():
        for layer in reversed(flow.planar):
            cur = _planar_inverse(cur, layer.u_hat().data, layer.w.data, float(layer.b.data))
        if flow.shift is not None:
            cur = _affine_inverse(cur, flow.shift.data, flow._scale().data)
    return cur.data[0] if single else cur.data
