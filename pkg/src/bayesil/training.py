"""ELBO objective, Adam, and the stage-by-stage incremental driver.

At stage t the model is trained on shard D_t alone against a prior that is
the frozen posterior from stage t-1 (or the configured initial prior at
t = 1).  Adam moments are zeroed at the start of every stage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, ShardedDataset
from .errors import ConfigurationError
from .layers import BayesNet, PriorSnapshot, softmax_array

# KL downscaling for the larger conv nets, and posterior draws averaged at evaluation
LARGE_NET_KL_SCALE = 0.05
PREDICTIVE_SAMPLES = 100


@dataclass
class ElboConfig:
    dataset_size: int
    batch_size: int
    kl_scale: float = 1.0
    mc_samples: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.dataset_size < 1 or self.batch_size > self.dataset_size:
            raise ConfigurationError(f"need 1 <= batch_size <= dataset_size, got {self.batch_size}, {self.dataset_size}")
        if not self.kl_scale > 0:
            raise ConfigurationError(f"kl_scale must be positive, got {self.kl_scale}")
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be >= 1")


def elbo_minibatch(model: BayesNet, x, y, prior: PriorSnapshot, cfg: ElboConfig, rng=None, noise=None):
    """Negative minibatch ELBO and its two parts.

    loss = -[(N/M) * sum_batch log p(y|x,w) - kl_scale * KL], averaged over
    ``cfg.mc_samples`` weight draws.  ``noise`` (one bundle per draw) freezes
    the randomness; otherwise bundles are drawn from ``rng``.

    Returns ``(loss, data_term, kl_term)`` with the last two as floats.
    """
    model.check_prior(prior)
    M = len(y)
    if noise is None:
        if model.family == "ft":
            noise = [None] * cfg.mc_samples
        else:
            noise = [model.draw_noise(rng, M) for _ in range(cfg.mc_samples)]
    scale = cfg.dataset_size / M
    loss = None
    data_sum = kl_sum = 0.0
    for nz in noise:
        data = scale * model.log_likelihood(x, y, nz)
        kl = model.kl(prior, nz)
        term = -(data - cfg.kl_scale * kl)
        loss = term if loss is None else loss + term
        data_sum += data.item()
        kl_sum += kl.item()
    S = len(noise)
    return loss / float(S), data_sum / S, kl_sum / S


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; ``None`` grads count as zero."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros(self.params)

    def reset(self) -> None:
        self.state = AdamState.zeros(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


# --------------------------------------------------------------------------- metrics


@dataclass
class StageMetrics:
    stage: int
    kl_scale: float = 1.0
    elbo: list = field(default_factory=list)
    data_term: list = field(default_factory=list)
    kl_term: list = field(default_factory=list)
    test_accuracy: float | None = None
    test_nll: float | None = None

    @property
    def epochs(self) -> int:
        return len(self.elbo)

    def records(self) -> list[dict]:
        """One row per epoch; test metrics sit on the stage's last row."""
        rows = []
        for e in range(self.epochs):
            last = e == self.epochs - 1
            rows.append(
                {
                    "stage": self.stage,
                    "epoch": e + 1,
                    "elbo": self.elbo[e],
                    "data_term": self.data_term[e],
                    "kl_term": self.kl_term[e],
                    "test_accuracy": self.test_accuracy if last else None,
                    "test_nll": self.test_nll if last else None,
                }
            )
        return rows

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- evaluation


def predict_avg(model: BayesNet, inputs, samples: int = PREDICTIVE_SAMPLES, rng=None, noise=None) -> np.ndarray:
    """Class probabilities averaged over ``samples`` posterior draws.

    Point-weight (``ft``) models make a single deterministic pass.  ``noise``
    may give the draws explicitly (a list of bundles).
    """
    if samples < 1:
        raise ConfigurationError("samples must be >= 1")
    x = model.prepare_input(inputs)
    M = x.shape[0]
    with ad.no_grad():
        if model.family == "ft":
            return softmax_array(model.forward(x).data)
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            noise = (model.draw_noise(rng, M) for _ in range(samples))
        total = None
        count = 0
        for nz in noise:
            p = softmax_array(model.forward(x, nz).data)
            total = p if total is None else total + p
            count += 1
    return total / count


def evaluate(model: BayesNet, data: Dataset, samples: int, rng) -> tuple[float, float]:
    """Accuracy and mean negative log predictive probability."""
    probs = predict_avg(model, data.X, samples, rng)
    acc = float(np.mean(probs.argmax(axis=1) == data.y))
    nll = float(-np.mean(np.log(np.maximum(probs[np.arange(len(data.y)), data.y], 1e-300))))
    return acc, nll


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    """Settings shared by every stage.  ``epochs`` is the per-stage budget."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    kl_scale: float = 1.0
    mc_samples: int = 1
    eval_samples: int = PREDICTIVE_SAMPLES
    seed: int = 0
    early_stop: bool = False
    plateau_tol: float = 1e-4
    plateau_window: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.kl_scale > 0:
            raise ConfigurationError("kl_scale must be positive")


def _eval_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, 0x5EED])


def run_epoch(model, data: Dataset, prior, config: TrainConfig, optimizer: Adam, rng) -> tuple[float, float, float]:
    """One shuffled pass over ``data``; returns mean (elbo, data_term, kl_term)."""
    n = len(data)
    perm = rng.permutation(n)
    elbos, datas, kls = [], [], []
    for start in range(0, n, config.batch_size):
        idx = perm[start : start + config.batch_size]
        cfg = ElboConfig(n, len(idx), config.kl_scale, config.mc_samples)
        optimizer.zero_grad()
        loss, data_term, kl_term = elbo_minibatch(model, data.X[idx], data.y[idx], prior, cfg, rng)
        loss.backward()
        optimizer.step()
        elbos.append(-loss.item())
        datas.append(data_term)
        kls.append(kl_term)
    return float(np.mean(elbos)), float(np.mean(datas)), float(np.mean(kls))


def _plateaued(history: list, config: TrainConfig) -> bool:
    w = config.plateau_window
    if not config.early_stop or len(history) <= w:
        return False
    ref = history[-1 - w]
    return abs(history[-1] - ref) <= config.plateau_tol * max(abs(ref), 1e-12)


@dataclass
class TrainState:
    """Resumable position of an incremental run."""

    rng: np.random.Generator
    stage: int = 0  # 0-based index of the stage in progress
    epoch: int = 0  # epochs finished within that stage
    step: int = 0
    current: StageMetrics | None = None


class IncrementalLearner:
    """Runs the stage loop; holds everything needed to checkpoint and resume."""

    def __init__(self, model: BayesNet, config: TrainConfig, initial_prior: PriorSnapshot | None = None):
        self.model = model
        self.config = config
        self.prior = initial_prior if initial_prior is not None else model.default_prior()
        model.check_prior(self.prior)
        self.optimizer = Adam(model.parameters(), lr=config.lr)
        self.state = TrainState(np.random.default_rng(config.seed))
        self.metrics: list[StageMetrics] = []

    def fit(self, shards: ShardedDataset, eval_data: Dataset | None = None, stop_after: tuple | None = None):
        """Train on shards from the current position.

        ``stop_after=(stage, epoch)`` (1-based) pauses after that epoch so the
        learner can be checkpointed; calling ``fit`` again resumes.
        """
        if len(shards) == 0:
            raise ConfigurationError("no shards to train on")
        while self.state.stage < len(shards):
            t = self.state.stage
            data = shards.shard(t)
            if len(data) == 0:
                raise ConfigurationError(f"shard {t + 1} is empty")
            if self.state.current is None:
                self.optimizer.reset()
                self.state.current = StageMetrics(t + 1, self.config.kl_scale)
            if self._train_stage(data, stop_after):
                return self.metrics
            if eval_data is not None:
                acc, nll = evaluate(self.model, eval_data, self.config.eval_samples, _eval_rng(self.config.seed, t + 1))
                self.state.current.test_accuracy, self.state.current.test_nll = acc, nll
            self.metrics.append(self.state.current)
            self.prior = self.model.snapshot()
            self.state.stage += 1
            self.state.epoch = 0
            self.state.current = None
        return self.metrics

    def _train_stage(self, data: Dataset, stop_after) -> bool:
        """Train on one shard; True if paused by ``stop_after``."""
        cur = self.state.current
        while self.state.epoch < self.config.epochs:
            if _plateaued(cur.elbo, self.config):
                break
            elbo, data_term, kl_term = run_epoch(self.model, data, self.prior, self.config, self.optimizer, self.state.rng)
            cur.elbo.append(elbo)
            cur.data_term.append(data_term)
            cur.kl_term.append(kl_term)
            self.state.epoch += 1
            self.state.step = self.optimizer.state.t
            if stop_after is not None and (cur.stage, self.state.epoch) == tuple(stop_after):
                return True
        return False


def incremental_fit(
    model: BayesNet,
    shards: ShardedDataset,
    config: TrainConfig,
    eval_data: Dataset | None = None,
    initial_prior: PriorSnapshot | None = None,
):
    """Bayesian incremental learning over ``shards``; returns ``(model, metrics)``."""
    learner = IncrementalLearner(model, config, initial_prior)
    learner.fit(shards, eval_data)
    return model, learner.metrics


def fit(model: BayesNet, data: Dataset, config: TrainConfig, eval_data: Dataset | None = None, prior=None):
    """Ordinary single-dataset variational (or point-estimate) training."""
    if len(data) == 0:
        raise ConfigurationError("empty training set")
    prior = prior if prior is not None else model.default_prior()
    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    metrics = StageMetrics(1, config.kl_scale)
    for _ in range(config.epochs):
        if _plateaued(metrics.elbo, config):
            break
        elbo, d, k = run_epoch(model, data, prior, config, optimizer, rng)
        metrics.elbo.append(elbo)
        metrics.data_term.append(d)
        metrics.kl_term.append(k)
    if eval_data is not None:
        metrics.test_accuracy, metrics.test_nll = evaluate(model, eval_data, config.eval_samples, _eval_rng(config.seed, 1))
    return model, metrics


def snapshot_posterior(model: BayesNet) -> PriorSnapshot:
    """Frozen copy of every variational (and flow) parameter of ``model``."""
    return model.snapshot()


def accuracy(model: BayesNet, data: Dataset, samples: int = 1, seed: int = 0) -> float:
    return evaluate(model, data, samples, np.random.default_rng(seed))[0]

