"""Bayesian dense / convolutional layers and the network that chains them.

Each weight layer carries one posterior family:

``ft``   point weights (fine-tuning baseline, no KL)
``ffg``  fully factorized Gaussian over every weight
``cfg``  one full-covariance Gaussian per (filter, channel) kernel block,
         Cholesky-parameterized; conv layers only
``mnf``  Gaussian weights whose means are scaled by a flow-distributed z,
         one z per dense input unit or per (filter, channel) pair

Biases are always fully factorized Gaussians (point values for ``ft``).
Noise is supplied by the caller as a dict per layer (see
:meth:`BayesNet.draw_noise`), never drawn inside a forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    CholGaussian,
    DiagGaussian,
    DEFAULT_INIT_SIGMA,
    cross_entropy_scaled,
    entropy_diag,
    fan_in_uniform,
    kl_chol_chol,
    kl_diag_diag,
    sample_reparam_chol,
    sample_reparam_diag,
    triangular_inverse,
)
from .errors import ConfigurationError, ContractError, DimensionError, StructureError
from .flows import FlowStack, _combine

FAMILIES = ("ft", "ffg", "cfg", "mnf")
PRIOR_KIND = {"ft": "point", "ffg": "gauss", "cfg": "chol", "mnf": "mnf"}


# ----------------------------------------------------------------------------- priors


@dataclass(frozen=True)
class LayerPrior:
    """Frozen parameters of one layer's prior (a previous posterior or an analytic prior)."""

    kind: str
    arrays: Mapping[str, np.ndarray]
    flow_dim: int = 0
    flow: FlowStack | None = field(default=None, compare=False, repr=False)
    chol_inv: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        frozen = {}
        for k, v in self.arrays.items():
            a = np.array(v, dtype=np.float64)
            a.setflags(write=False)
            frozen[k] = a
        object.__setattr__(self, "arrays", MappingProxyType(frozen))
        if self.kind == "mnf":
            flow_arrays = {k[5:]: v for k, v in frozen.items() if k.startswith("flow.")}
            object.__setattr__(self, "flow", FlowStack.from_arrays(self.flow_dim, flow_arrays).frozen())
        if self.kind == "chol":
            inv = triangular_inverse(frozen["w_L"])
            inv.setflags(write=False)
            object.__setattr__(self, "chol_inv", inv)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]


@dataclass(frozen=True)
class PriorSnapshot:
    """Per-layer priors; ``None`` for layers without parameters."""

    layers: tuple
    fixed_analytic: bool = False

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lp in enumerate(self.layers):
            if lp is not None:
                for k, v in lp.arrays.items():
                    out[f"{i}.{k}"] = v
        return out

    def describe(self) -> list:
        return [None if lp is None else {"kind": lp.kind, "flow_dim": lp.flow_dim} for lp in self.layers]

    @classmethod
    def from_arrays(cls, description: list, arrays: Mapping[str, np.ndarray], fixed_analytic: bool) -> "PriorSnapshot":
        layers = []
        for i, desc in enumerate(description):
            if desc is None:
                layers.append(None)
                continue
            prefix = f"{i}."
            own = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            layers.append(LayerPrior(desc["kind"], own, desc.get("flow_dim", 0)))
        return cls(tuple(layers), fixed_analytic)


def gaussian_layer_prior(family: str, w_mu, w_sigma, b_mu, b_sigma, flow_dim: int = 0, flow: FlowStack | None = None, block_shape=None) -> LayerPrior:
    """Prior N(w_mu, w_sigma^2) expressed in the parameterization ``family`` expects."""
    w_mu = np.asarray(w_mu, dtype=np.float64)
    w_sigma = np.broadcast_to(np.asarray(w_sigma, dtype=np.float64), w_mu.shape)
    b_mu = np.asarray(b_mu, dtype=np.float64)
    b_sigma = np.broadcast_to(np.asarray(b_sigma, dtype=np.float64), b_mu.shape)
    bias = {"b_mu": b_mu, "b_sigma": b_sigma}
    if family == "ffg":
        return LayerPrior("gauss", {"w_mu": w_mu, "w_sigma": w_sigma, **bias})
    if family == "cfg":
        blocks, d = block_shape
        mu = w_mu.reshape(blocks, d)
        sig = w_sigma.reshape(blocks, d)
        L = np.zeros((blocks, d, d))
        idx = np.arange(d)
        L[:, idx, idx] = sig
        return LayerPrior("chol", {"w_mu": mu, "w_L": L, **bias})
    if family == "mnf":
        flow = flow if flow is not None else FlowStack(flow_dim)
        arrays = {"w_mu": w_mu, "w_sigma": w_sigma, **bias}
        arrays.update({f"flow.{k}": v for k, v in flow.arrays().items()})
        return LayerPrior("mnf", arrays, flow_dim)
    if family == "ft":
        return LayerPrior("point", {"weight": w_mu, "bias": b_mu})
    raise ConfigurationError(f"unknown family {family!r}")


# ----------------------------------------------------------------------------- layers


class Layer:
    """Parameter-free layer."""

    family = None

    def noise_shapes(self, batch_size: int) -> dict:
        return {}

    def named_parameters(self) -> dict[str, Tensor]:
        return {}

    def snapshot(self):
        return None

    def default_prior(self, **kw):
        return None

    def output_shape(self, shape: tuple) -> tuple:
        return shape


class ReLU(Layer):
    def forward(self, x, noise=None):
        return ad.relu(x)

    def config(self):
        return {"type": "relu"}


class Flatten(Layer):
    def forward(self, x, noise=None):
        return ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def config(self):
        return {"type": "flatten"}


class MaxPool(Layer):
    def __init__(self, size: int, stride: int, padding: int = 0):
        self.size, self.stride, self.padding = size, stride, padding

    def forward(self, x, noise=None):
        return ad.max_pool2d(x, self.size, self.stride, self.padding)

    def output_shape(self, shape):
        M, C, H, W = shape
        f = ad.conv_output_size
        return (M, C, f(H, self.size, self.stride, self.padding), f(W, self.size, self.stride, self.padding))

    def config(self):
        return {"type": "pool", "size": self.size, "stride": self.stride, "pad": self.padding}


class BayesLayer(Layer):
    """Shared machinery of :class:`Dense` and :class:`Conv2d`."""

    weight_shape: tuple
    fan_in: int
    rows: int  # number of z values / kernel blocks

    def _init_params(self, family: str, rng: np.random.Generator, init_sigma: float, flow_depth: int, local_reparam: bool):
        if family not in FAMILIES:
            raise ConfigurationError(f"unknown family {family!r}; expected one of {FAMILIES}")
        self.family = family
        self.local_reparam = bool(local_reparam) and family in ("ffg", "mnf") and isinstance(self, Dense)
        out = self.weight_shape[-1] if isinstance(self, Dense) else self.weight_shape[0]
        self.out_features = out
        if family == "ft":
            self.weight = Tensor(fan_in_uniform(self.weight_shape, self.fan_in, rng), True)
            self.bias = Tensor(np.zeros(out), True)
            return
        self.b = DiagGaussian.create(np.zeros(out), init_sigma)
        if family == "cfg":
            self.w = CholGaussian.init(self.rows, self.block_dim, self.fan_in, rng, init_sigma)
        else:
            self.w = DiagGaussian.init(self.weight_shape, self.fan_in, rng, init_sigma)
        if family == "mnf":
            self.flow = FlowStack.init(self.rows, rng, depth=flow_depth)

    # parameters -----------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        if self.family == "ft":
            return {"weight": self.weight, "bias": self.bias}
        if self.family == "cfg":
            out = {"w_mu": self.w.mu, "w_lraw": self.w.l_raw}
        else:
            out = {"w_mu": self.w.mu, "w_rho": self.w.rho}
        out["b_mu"] = self.b.mu
        out["b_rho"] = self.b.rho
        if self.family == "mnf":
            out.update({f"flow.{k}": v for k, v in self.flow.named_parameters().items()})
        return out

    def noise_shapes(self, batch_size: int) -> dict:
        if self.family == "ft":
            return {}
        shapes = {}
        if self.family == "mnf":
            shapes["z0"] = (self.rows,)
        if self.local_reparam:
            shapes["out"] = (batch_size, self.out_features)
            return shapes
        shapes["w"] = (self.rows, self.block_dim) if self.family == "cfg" else self.weight_shape
        shapes["b"] = (self.out_features,)
        return shapes

    # sampling -------------------------------------------------------------
    def _rows(self, t: Tensor) -> Tensor:
        """View a weight-shaped tensor as (rows, per-row entries)."""
        return ad.reshape(t, (self.rows, -1)) if t.shape != (self.rows, self.block_dim) else t

    def _z(self, noise) -> Tensor:
        z, _, _, _ = self.flow.run(_need(noise, "z0"))
        return ad.reshape(z, (self.rows,))

    def sample_weights(self, noise) -> tuple[Tensor, Tensor]:
        if self.family == "ft":
            return self.weight, self.bias
        b = sample_reparam_diag(self.b, _need(noise, "b"))
        if self.family == "ffg":
            return sample_reparam_diag(self.w, _need(noise, "w")), b
        if self.family == "cfg":
            w = sample_reparam_chol(self.w, _need(noise, "w"))
            return ad.reshape(w, self.weight_shape), b
        # mnf: w = z_row * mu + sigma * eps
        eps = np.asarray(_need(noise, "w"), dtype=np.float64)
        if eps.shape != self.weight_shape:
            raise DimensionError(f"noise shape {eps.shape} does not match weights {self.weight_shape}")
        mean = ad.reshape(ad.scale_rows(self._rows(self.w.mu), self._z(noise)), self.weight_shape)
        return mean + self.w.sigma() * Tensor(eps), b

    def forward(self, x, noise=None) -> Tensor:
        x = ad.as_tensor(x)
        self._check_input(x)
        if self.family != "ft" and noise is None:
            raise ContractError(f"{self.family} layer needs a noise bundle")
        if self.local_reparam:
            return self._forward_local(x, noise)
        w, b = self.sample_weights(noise)
        return self._apply(x, w, b)

    def _forward_local(self, x: Tensor, noise) -> Tensor:
        eps = np.asarray(_need(noise, "out"), dtype=np.float64)
        if eps.shape != (x.shape[0], self.out_features):
            raise DimensionError(f"output noise {eps.shape} for batch {x.shape[0]}")
        xin = x
        if self.family == "mnf":
            xin = ad.transpose(ad.scale_rows(ad.transpose(x), self._z(noise)))
        mean = ad.add_bias(ad.matmul(xin, self.w.mu), self.b.mu)
        var = ad.add_bias(ad.matmul(ad.square(x), ad.square(self.w.sigma())), ad.square(self.b.sigma()))
        return mean + ad.sqrt(var) * Tensor(eps)

    # priors -----------------------------------------------------------------
    def snapshot(self) -> LayerPrior:
        if self.family == "ft":
            return LayerPrior("point", {"weight": self.weight.data, "bias": self.bias.data})
        bias = {"b_mu": self.b.mu.data, "b_sigma": ad.softplus_array(self.b.rho.data)}
        if self.family == "cfg":
            return LayerPrior("chol", {"w_mu": self.w.mu.data, "w_L": self.w.factor().data, **bias})
        arrays = {"w_mu": self.w.mu.data, "w_sigma": ad.softplus_array(self.w.rho.data), **bias}
        if self.family == "ffg":
            return LayerPrior("gauss", arrays)
        arrays.update({f"flow.{k}": v for k, v in self.flow.arrays().items()})
        return LayerPrior("mnf", arrays, self.rows)

    def default_prior(self, sigma: float = 1.0) -> LayerPrior:
        """N(0, sigma^2) over weights and biases; for MNF, z ~ N(0, 1)."""
        return gaussian_layer_prior(
            self.family,
            np.zeros(self.weight_shape),
            sigma,
            np.zeros(self.out_features),
            sigma,
            flow_dim=self.rows,
            block_shape=(self.rows, self.block_dim),
        )

    def check_prior(self, prior: LayerPrior) -> None:
        if prior is None or prior.kind != PRIOR_KIND[self.family]:
            got = None if prior is None else prior.kind
            raise StructureError(f"{self.family} layer needs a {PRIOR_KIND[self.family]!r} prior, got {got!r}")
        expected = {k: tuple(v) for k, v in self.snapshot_shapes().items()}
        for k, shape in expected.items():
            if k not in prior.arrays or prior.arrays[k].shape != shape:
                got = prior.arrays[k].shape if k in prior.arrays else "missing"
                raise StructureError(f"prior entry {k!r}: expected shape {shape}, got {got}")
        if self.family == "mnf" and prior.flow_dim != self.rows:
            raise StructureError(f"prior flow dim {prior.flow_dim} != layer z dim {self.rows}")

    def snapshot_shapes(self) -> dict:
        if self.family == "ft":
            return {"weight": self.weight_shape, "bias": (self.out_features,)}
        bias = {"b_mu": (self.out_features,), "b_sigma": (self.out_features,)}
        if self.family == "cfg":
            return {"w_mu": (self.rows, self.block_dim), "w_L": (self.rows, self.block_dim, self.block_dim), **bias}
        return {"w_mu": self.weight_shape, "w_sigma": self.weight_shape, **bias}

    def kl(self, prior: LayerPrior, noise=None) -> Tensor:
        return layer_kl(self, prior, noise)


def _need(noise, key):
    if noise is None or key not in noise:
        raise ContractError(f"noise bundle lacks {key!r}")
    return noise[key]


class Dense(BayesLayer):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        family: str = "ffg",
        rng: np.random.Generator | None = None,
        init_sigma: float = DEFAULT_INIT_SIGMA,
        flow_depth: int = 2,
        local_reparam: bool = False,
    ):
        if family == "cfg":
            raise ConfigurationError("CFG requires convolutional layers (it is defined per filter-channel kernel block)")
        self.in_features = in_features
        self.weight_shape = (in_features, out_features)
        self.fan_in = in_features
        self.rows = in_features
        self.block_dim = out_features
        self._init_params(family, rng if rng is not None else np.random.default_rng(0), init_sigma, flow_depth, local_reparam)

    def _check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"dense layer expects (M, {self.in_features}), got {x.shape}")

    def _apply(self, x, w, b):
        return ad.add_bias(ad.matmul(x, w), b)

    def output_shape(self, shape):
        return (shape[0], self.out_features)

    def config(self):
        return {"type": "dense", "in": self.in_features, "out": self.out_features}


class Conv2d(BayesLayer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        family: str = "ffg",
        rng: np.random.Generator | None = None,
        init_sigma: float = DEFAULT_INIT_SIGMA,
        flow_depth: int = 2,
        local_reparam: bool = False,
    ):
        self.in_channels, self.kernel_size = in_channels, kernel_size
        self.stride, self.padding = stride, padding
        self.weight_shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.fan_in = in_channels * kernel_size * kernel_size
        self.rows = out_channels * in_channels
        self.block_dim = kernel_size * kernel_size
        self._init_params(family, rng if rng is not None else np.random.default_rng(0), init_sigma, flow_depth, False)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"conv layer expects (M, {self.in_channels}, H, W), got {x.shape}")

    def _apply(self, x, w, b):
        return ad.add_bias(ad.conv2d(x, w, self.stride, self.padding), b)

    def output_shape(self, shape):
        M, C, H, W = shape
        f = ad.conv_output_size
        k, s, p = self.kernel_size, self.stride, self.padding
        return (M, self.out_features, f(H, k, s, p), f(W, k, s, p))

    def config(self):
        return {
            "type": "conv",
            "in": self.in_channels,
            "out": self.out_features,
            "k": self.kernel_size,
            "stride": self.stride,
            "pad": self.padding,
        }


# ----------------------------------------------------------------------------- KL terms


def layer_kl(layer: BayesLayer, prior: LayerPrior, noise=None) -> Tensor:
    """KL(q || prior) for one layer; a single-sample estimate for MNF."""
    layer.check_prior(prior)
    fam = layer.family
    if fam == "ft":
        return Tensor(0.0)
    kl_b = kl_diag_diag(layer.b.mu, layer.b.sigma(), prior["b_mu"], prior["b_sigma"])
    if fam == "ffg":
        return kl_diag_diag(layer.w.mu, layer.w.sigma(), prior["w_mu"], prior["w_sigma"]) + kl_b
    if fam == "cfg":
        return kl_chol_chol(layer.w.mu, layer.w.factor(), prior["w_mu"], prior["w_L"], prior.chol_inv) + kl_b
    return mnf_joint_kl_estimate(layer, prior, _need(noise, "z0"))


def mnf_joint_kl_estimate(layer: BayesLayer, prior: LayerPrior, z0) -> Tensor:
    """Single-sample estimate of KL(q(w, z) || q_old(w, z)).

    sum_ij [CE(q(w_ij|z_i), q_old(w_ij|z_i)) - H(q(w_ij|z_i))] + log q(z) - log q_old(z)
    at z = NF(z0); the weight terms are exact given z.
    """
    if prior is None or prior.kind != "mnf" or prior.flow is None:
        raise StructureError("MNF KL needs a prior holding Gaussian parameters and a flow")
    layer.check_prior(prior)
    flow = layer.flow
    z0t = flow._as_batch(z0)[0]
    z, logdets, path, _ = flow.run(z0t)
    log_q = _combine(z0t, logdets)
    old = prior.flow
    log_q_old = old.log_density_at(z, path=path if old.same_parameters(flow) else None)
    zhat = ad.reshape(z, (layer.rows,))
    sigma = layer._rows(layer.w.sigma())
    mu = layer._rows(layer.w.mu)
    ce = cross_entropy_scaled(mu, sigma, prior["w_mu"].reshape(mu.shape), prior["w_sigma"].reshape(mu.shape), zhat)
    weights = ce - entropy_diag(sigma)
    flow_term = ad.reshape(log_q - log_q_old, ())
    kl_b = kl_diag_diag(layer.b.mu, layer.b.sigma(), prior["b_mu"], prior["b_sigma"])
    return weights + flow_term + kl_b


def mnf_kl_draws(layer: BayesLayer, prior: LayerPrior, z0s) -> np.ndarray:
    """:func:`mnf_joint_kl_estimate` for each row of ``z0s`` (n, rows), without gradients."""
    if prior is None or prior.kind != "mnf" or prior.flow is None:
        raise StructureError("MNF KL needs a prior holding Gaussian parameters and a flow")
    layer.check_prior(prior)
    with ad.no_grad():
        z0t = layer.flow._as_batch(z0s)[0]
        z, logdets, path, _ = layer.flow.run(z0t)
        log_q = _combine(z0t, logdets).data
        same = prior.flow.same_parameters(layer.flow)
        log_q_old = prior.flow.log_density_at(z, path=path if same else None).data
        sigma = layer._rows(layer.w.sigma()).data
        mu = layer._rows(layer.w.mu).data
        mu_t = prior["w_mu"].reshape(mu.shape)
        sigma_t = prior["w_sigma"].reshape(mu.shape)
        kl_b = kl_diag_diag(layer.b.mu, layer.b.sigma(), prior["b_mu"], prior["b_sigma"]).item()
    # with z fixed, each weight's cross-entropy minus entropy is a Gaussian KL
    # whose mean gap z_i * (mu - mu_t) enters squared
    gap2 = np.sum(((mu - mu_t) / sigma_t) ** 2, axis=1)
    base = np.sum(np.log(sigma_t / sigma) + sigma**2 / (2 * sigma_t**2) - 0.5)
    weights = base + 0.5 * (z.data**2) @ gap2
    return weights + (log_q - log_q_old) + kl_b


# ----------------------------------------------------------------------------- network


class BayesNet:
    """A feed-forward stack of layers sharing one posterior family."""

    def __init__(self, layers, family: str, input_shape: tuple, arch: list | None = None, options: dict | None = None):
        self.layers = list(layers)
        self.family = family
        self.input_shape = tuple(input_shape)
        self.arch = arch if arch is not None else [l.config() for l in self.layers]
        self.options = dict(options or {})

    # structure ----------------------------------------------------------------
    def weight_layers(self) -> list[tuple[int, BayesLayer]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, BayesLayer)]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named_parameters().items():
                out[f"{i}.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(arrays):
            missing = sorted(set(params) ^ set(arrays))
            raise StructureError(f"parameter names differ: {missing[:5]}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise StructureError(f"{k}: expected shape {p.shape}, got {a.shape}")
            p.data[...] = a

    def shape_trace(self, batch_size: int = 1) -> list[tuple]:
        shape = (batch_size,) + self.input_shape
        trace = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            trace.append(shape)
        return trace

    # evaluation ----------------------------------------------------------------
    def prepare_input(self, x) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            x = x.reshape((x.shape[0],) + self.input_shape)
        return Tensor(x)

    def draw_noise(self, rng: np.random.Generator, batch_size: int) -> list[dict]:
        return [{k: rng.standard_normal(s) for k, s in layer.noise_shapes(batch_size).items()} for layer in self.layers]

    def zero_noise(self, batch_size: int) -> list[dict]:
        return [{k: np.zeros(s) for k, s in layer.noise_shapes(batch_size).items()} for layer in self.layers]

    def forward(self, x, noise=None) -> Tensor:
        h = self.prepare_input(x)
        if noise is None:
            if self.family != "ft":
                raise ContractError(f"{self.family} network needs a noise bundle")
            noise = [None] * len(self.layers)
        if len(noise) != len(self.layers):
            raise ContractError(f"noise bundle has {len(noise)} entries for {len(self.layers)} layers")
        for layer, nz in zip(self.layers, noise):
            h = layer.forward(h, nz)
        return h

    def log_likelihood(self, x, y, noise=None) -> Tensor:
        """Sum over the batch of log p(y | x, w) at the sampled weights."""
        logits = self.forward(x, noise)
        return -float(logits.shape[0]) * ad.log_softmax_nll(logits, y)

    def kl(self, prior: PriorSnapshot, noise=None) -> Tensor:
        self.check_prior(prior)
        total = Tensor(0.0)
        for i, layer in self.weight_layers():
            total = total + layer_kl(layer, prior.layers[i], None if noise is None else noise[i])
        return total

    # priors --------------------------------------------------------------------
    def check_prior(self, prior: PriorSnapshot) -> None:
        if len(prior.layers) != len(self.layers):
            raise StructureError(f"prior has {len(prior.layers)} layers, model has {len(self.layers)}")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BayesLayer):
                try:
                    layer.check_prior(prior.layers[i])
                except StructureError as e:
                    raise StructureError(f"layer {i}: {e}") from None
            elif prior.layers[i] is not None:
                raise StructureError(f"layer {i} has no parameters but the prior has an entry")

    def snapshot(self) -> PriorSnapshot:
        return PriorSnapshot(tuple(layer.snapshot() for layer in self.layers), fixed_analytic=False)

    def default_prior(self, sigma: float = 1.0) -> PriorSnapshot:
        return PriorSnapshot(
            tuple(l.default_prior(sigma) if isinstance(l, BayesLayer) else None for l in self.layers),
            fixed_analytic=True,
        )

    def describe(self) -> dict:
        return {"arch": self.arch, "family": self.family, "input_shape": list(self.input_shape), "options": self.options}


def softmax_array(logits: np.ndarray) -> np.ndarray:
    return np.exp(ad.log_softmax_array(logits))


def param_count(model: BayesNet) -> int:
    return int(sum(math.prod(p.shape) for p in model.parameters()))
