"""Reproducible comparison runs used by the acceptance suite and the notebooks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .architectures import build_model
from .data import Dataset, gen_synthetic, label_split, mnist_subset, split_shards, train_test_split
from .laplace import (
    LaplaceConfig,
    build_pretrained_prior,
    default_transfer_mask,
    init_from_prior_means,
    laplace_fit_sigma,
    train_map,
)
from .training import LARGE_NET_KL_SCALE, TrainConfig, incremental_fit

BLOBS_NOISE = 0.8


@dataclass
class Comparison:
    """Final test accuracy per (label, seed)."""

    scores: dict = field(default_factory=dict)
    seconds: float = 0.0

    def add(self, label: str, value: float) -> None:
        self.scores.setdefault(label, []).append(value)

    def mean(self, label: str) -> float:
        return float(np.mean(self.scores[label]))

    def summary(self) -> str:
        return "\n".join(f"{k:<14} mean {self.mean(k):.4f}  runs {np.round(v, 4).tolist()}" for k, v in self.scores.items())


def final_accuracy(arch, family, train: Dataset, test: Dataset, T: int, seed: int, epochs: int, **train_kw) -> float:
    model = build_model(arch, family, seed)
    config = TrainConfig(epochs=epochs, seed=seed, **train_kw)
    _, metrics = incremental_fit(model, split_shards(train, T, seed), config, test)
    return metrics[-1].test_accuracy


def blobs_ordering(seeds=range(5), noise: float = BLOBS_NOISE, epochs: int = 50, n: int = 3000) -> Comparison:
    """FFG at T=1 and T=10 against fine-tuning at T=10 on 3-class blobs with a 2-32-32-3 MLP."""
    out = Comparison()
    start = time.perf_counter()
    for seed in seeds:
        train, test = train_test_split(gen_synthetic("blobs", n, 3, noise, seed), 0.2, seed)
        for family, T in (("ffg", 1), ("ffg", 10), ("ft", 10)):
            out.add(f"{family} T={T}", final_accuracy("mlp:2-32-32-3", family, train, test, T, seed, epochs))
    out.seconds = time.perf_counter() - start
    return out


def mnist_ordering(seeds=range(3), T: int = 5, epochs: int = 50, data: Dataset | None = None) -> Comparison:
    """FFG against fine-tuning at the same T on the bundled MNIST subset with a 784-100-10 MLP."""
    data = data if data is not None else mnist_subset()
    out = Comparison()
    start = time.perf_counter()
    for seed in seeds:
        train, test = train_test_split(data, 0.2, seed)
        for family in ("ffg", "ft"):
            out.add(f"{family} T={T}", final_accuracy("mlp:784-100-10", family, train, test, T, seed, epochs))
    out.seconds = time.perf_counter() - start
    return out


def pretraining_protocol(
    seeds=range(5),
    T: int = 5,
    epochs: int = 20,
    pretrain_epochs: int = 10,
    arch: str = "mlp:784-100-5",
    data: Dataset | None = None,
    kl_scale: float = LARGE_NET_KL_SCALE,
) -> Comparison:
    """Pretrain on label-split half A, then learn half B incrementally three ways.

    ``laplace ffg`` starts from a Laplace prior around the pretrained hidden
    layers, ``fresh ffg`` from N(0, 1), and ``ft`` fine-tunes a copy whose
    hidden layers start at the pretrained weights.
    """
    data = data if data is not None else mnist_subset()
    out = Comparison()
    start = time.perf_counter()
    for seed in seeds:
        halves = label_split(data, seed)
        a_train, _ = train_test_split(halves.part_a, 0.2, seed)
        b_train, b_test = train_test_split(halves.part_b, 0.2, seed)
        shards = split_shards(b_train, T, seed)
        config = TrainConfig(epochs=epochs, seed=seed, kl_scale=kl_scale)

        ft = build_model(arch, "ft", seed)
        w_star = train_map(ft, a_train, pretrain_epochs, weight_decay=1e-4, seed=seed)
        sigma = {k: np.sqrt(v) for k, v in laplace_fit_sigma(ft, a_train, LaplaceConfig(len(a_train))).items()}

        model = build_model(arch, "ffg", seed)
        mask = default_transfer_mask(model)
        prior = build_pretrained_prior(model, w_star, sigma, mask)
        init_from_prior_means(model, prior, mask)
        _, m = incremental_fit(model, shards, config, b_test, prior)
        out.add("laplace ffg", m[-1].test_accuracy)

        _, m = incremental_fit(build_model(arch, "ffg", seed), shards, config, b_test)
        out.add("fresh ffg", m[-1].test_accuracy)

        baseline = build_model(arch, "ft", seed)
        init_from_prior_means(baseline, build_pretrained_prior(baseline, w_star, 1.0, mask), mask)
        _, m = incremental_fit(baseline, shards, config, b_test)
        out.add("ft", m[-1].test_accuracy)
    out.seconds = time.perf_counter() - start
    return out
