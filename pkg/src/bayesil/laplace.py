"""Turning a point-estimate network into a Gaussian prior.

The prior is N(w*, sigma^2) around pretrained weights w*.  sigma comes either
from a diagonal Laplace fit (curvature from the empirical Fisher) or from a
grid search scored by a short incremental run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .data import Dataset, ShardedDataset
from .distributions import inverse_softplus
from .errors import ConfigurationError, ContractError, StructureError
from .flows import FlowStack
from .layers import BayesLayer, BayesNet, PriorSnapshot, gaussian_layer_prior
from .training import Adam, TrainConfig, evaluate, incremental_fit

Z_PRIOR_SCALE = 0.1


@dataclass
class LaplaceConfig:
    """``damping=None`` means 1e-4 * n_data."""

    n_data: int
    damping: float | None = None
    sigma_floor: float = 1e-3
    sigma_ceil: float = 1.0

    def __post_init__(self):
        if self.n_data < 1:
            raise ConfigurationError("n_data must be positive")
        if self.damping is None:
            self.damping = 1e-4 * self.n_data
        if self.damping < 0:
            raise ConfigurationError("damping must be >= 0")
        if not 0 < self.sigma_floor < self.sigma_ceil:
            raise ConfigurationError(f"need 0 < sigma_floor < sigma_ceil, got {self.sigma_floor}, {self.sigma_ceil}")


def _require_ft(model: BayesNet) -> None:
    if model.family != "ft":
        raise ContractError(f"expected a point-estimate (ft) model, got family {model.family!r}")


def train_map(
    model: BayesNet,
    data: Dataset,
    epochs: int = 10,
    weight_decay: float = 0.0,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Fit point weights by Adam on mean NLL + weight_decay/2 * |w|^2; returns w*."""
    _require_ft(model)
    params = model.parameters()
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    n = len(data)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad()
            loss = ad.log_softmax_nll(model.forward(data.X[idx]), data.y[idx])
            if weight_decay:
                for p in params:
                    loss = loss + 0.5 * weight_decay * ad.tsum(ad.square(p))
            loss.backward()
            opt.step()
    return model.state_arrays()


def diagonal_fisher(params, example_loglik: Callable[[int], ad.Tensor], n: int) -> list[np.ndarray]:
    """Mean over examples of squared per-example gradients of the log-likelihood."""
    acc = [np.zeros(p.shape) for p in params]
    for i in range(n):
        ad.zero_grad(params)
        example_loglik(i).backward()
        for a, p in zip(acc, params):
            if p.grad is not None:
                a += np.square(p.grad)
    return [a / n for a in acc]


def sigma_from_fisher(fisher: np.ndarray, cfg: LaplaceConfig) -> np.ndarray:
    """sigma^2 = 1 / (N F + damping), clamped to [floor^2, ceil^2]."""
    prec = cfg.n_data * np.asarray(fisher, dtype=np.float64) + cfg.damping
    # zero or denormal precision gives inf, which the ceiling then catches
    with np.errstate(divide="ignore", over="ignore"):
        var = 1.0 / prec
    return np.clip(var, cfg.sigma_floor**2, cfg.sigma_ceil**2)


def laplace_fit_sigma(model: BayesNet, data: Dataset, cfg: LaplaceConfig | None = None) -> dict[str, np.ndarray]:
    """Per-parameter variance of the diagonal Laplace fit at the model's current weights."""
    _require_ft(model)
    cfg = cfg if cfg is not None else LaplaceConfig(len(data))
    named = model.named_parameters()
    params = list(named.values())
    X = model.prepare_input(data.X).data

    def loglik(i):
        return model.log_likelihood(X[i : i + 1], data.y[i : i + 1])

    fisher = diagonal_fisher(params, loglik, len(data))
    ad.zero_grad(params)
    return {k: sigma_from_fisher(f, cfg) for k, f in zip(named, fisher)}


def _z_prior_flow(dim: int) -> FlowStack:
    # z concentrated near 1 so the prior's weight means stay at w*
    arrays = {"shift": np.ones(dim), "raw_scale": inverse_softplus(np.full(dim, Z_PRIOR_SCALE))}
    return FlowStack.from_arrays(dim, arrays)


def default_transfer_mask(model: BayesNet) -> list[int]:
    """Every weight layer except the classifier head."""
    return [i for i, _ in model.weight_layers()[:-1]]


def build_pretrained_prior(
    model: BayesNet,
    pretrained: Mapping[str, np.ndarray],
    sigma: float | Mapping[str, np.ndarray],
    transfer_mask=None,
    fresh_sigma: float = 1.0,
) -> PriorSnapshot:
    """Prior for ``model``: N(w*, sigma^2) on masked layers, N(0, fresh_sigma^2) elsewhere.

    ``pretrained`` holds point weights named ``"{layer}.weight"`` /
    ``"{layer}.bias"`` (as from :func:`train_map`).  ``sigma`` is a scalar
    standard deviation or a mapping with the same keys holding per-entry
    standard deviations.  ``transfer_mask`` lists layer indices and defaults
    to all weight layers but the last.
    """
    mask = set(default_transfer_mask(model) if transfer_mask is None else transfer_mask)
    fresh = model.default_prior(fresh_sigma)
    layers = list(fresh.layers)
    for i in sorted(mask):
        layer = model.layers[i] if 0 <= i < len(model.layers) else None
        if not isinstance(layer, BayesLayer):
            raise StructureError(f"transfer mask entry {i} is not a weight layer")
        w, b = f"{i}.weight", f"{i}.bias"
        if w not in pretrained or b not in pretrained:
            raise StructureError(f"pretrained weights lack layer {i}")
        w_star, b_star = np.asarray(pretrained[w]), np.asarray(pretrained[b])
        if w_star.shape != layer.weight_shape or b_star.shape != (layer.out_features,):
            raise StructureError(
                f"layer {i}: pretrained shapes {w_star.shape}, {b_star.shape} do not match "
                f"{layer.weight_shape}, {(layer.out_features,)}"
            )
        if isinstance(sigma, Mapping):
            ws, bs = np.asarray(sigma[w]), np.asarray(sigma[b])
        else:
            if not sigma > 0:
                raise ConfigurationError("sigma must be positive")
            ws = bs = float(sigma)
        flow = _z_prior_flow(layer.rows) if model.family == "mnf" else None
        layers[i] = gaussian_layer_prior(
            model.family, w_star, ws, b_star, bs, flow_dim=layer.rows, flow=flow, block_shape=(layer.rows, layer.block_dim)
        )
    prior = PriorSnapshot(tuple(layers), fixed_analytic=True)
    model.check_prior(prior)
    return prior


def init_from_prior_means(model: BayesNet, prior: PriorSnapshot, layers) -> None:
    """Copy prior means into the posterior means of the given layers."""
    for i in layers:
        layer, lp = model.layers[i], prior.layers[i]
        if model.family == "ft":
            layer.weight.data[...] = lp["weight"]
            layer.bias.data[...] = lp["bias"]
            continue
        layer.w.mu.data[...] = lp["w_mu"].reshape(layer.w.mu.shape)
        layer.b.mu.data[...] = lp["b_mu"]


def grid_search_sigma(
    candidates,
    score: Callable[[float], float] | None = None,
    *,
    make_model: Callable[[], BayesNet] | None = None,
    pretrained: Mapping[str, np.ndarray] | None = None,
    shards: ShardedDataset | None = None,
    eval_data: Dataset | None = None,
    config: TrainConfig | None = None,
    transfer_mask=None,
) -> tuple[float, dict]:
    """Pick the sigma with the best validation accuracy; ties go to the smaller sigma.

    Either pass ``score`` directly, or the pieces of the default scorer: a
    fresh model factory, pretrained weights, the incremental shards, the
    validation set and the (short) training config.
    """
    candidates = [float(c) for c in candidates]
    if not candidates:
        raise ConfigurationError("grid search needs at least one candidate")
    if any(not c > 0 for c in candidates):
        raise ConfigurationError("sigma candidates must be positive")
    if score is None:
        if None in (make_model, pretrained, shards, eval_data, config):
            raise ConfigurationError("grid search needs a scorer or model/pretrained/shards/eval_data/config")

        def score(sigma):
            model = make_model()
            prior = build_pretrained_prior(model, pretrained, sigma, transfer_mask)
            mask = default_transfer_mask(model) if transfer_mask is None else transfer_mask
            init_from_prior_means(model, prior, mask)
            incremental_fit(model, shards, config, initial_prior=prior)
            return evaluate(model, eval_data, config.eval_samples, np.random.default_rng(config.seed))[0]

    scores = {}
    best, best_score = None, -np.inf
    for c in sorted(set(candidates)):
        s = float(score(c))
        scores[c] = s
        if s > best_score:
            best, best_score = c, s
    return best, scores
