"""Named network configurations and the builder that instantiates them.

``lenet5`` is LeNet-5-Caffe for 1x28x28 inputs and ``conv3fc3`` the small
3Conv3FC network for 3x32x32 inputs.  Pooling strides and the third
convolution's padding are set so the spatial sizes run 24 -> 12 -> 8 -> 4
for LeNet and 32 -> 15 -> 7 -> 3 (a 1152-wide flatten) for 3Conv3FC.

``mlp`` takes a dash-separated width string such as ``"784-100-10"``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .layers import FAMILIES, BayesNet, Conv2d, Dense, Flatten, MaxPool, ReLU

LENET5 = [
    {"type": "conv", "in": 1, "out": 20, "k": 5, "stride": 1, "pad": 0},
    {"type": "relu"},
    {"type": "pool", "size": 2, "stride": 2, "pad": 0},
    {"type": "conv", "in": 20, "out": 50, "k": 5, "stride": 1, "pad": 0},
    {"type": "relu"},
    {"type": "pool", "size": 2, "stride": 2, "pad": 0},
    {"type": "flatten"},
    {"type": "dense", "in": 800, "out": 500},
    {"type": "relu"},
    {"type": "dense", "in": 500, "out": 10},
]

CONV3FC3 = [
    {"type": "conv", "in": 3, "out": 32, "k": 5, "stride": 1, "pad": 2},
    {"type": "relu"},
    {"type": "pool", "size": 3, "stride": 2, "pad": 0},
    {"type": "conv", "in": 32, "out": 64, "k": 5, "stride": 1, "pad": 2},
    {"type": "relu"},
    {"type": "pool", "size": 3, "stride": 2, "pad": 0},
    {"type": "conv", "in": 64, "out": 128, "k": 5, "stride": 1, "pad": 2},
    {"type": "relu"},
    {"type": "pool", "size": 3, "stride": 2, "pad": 0},
    {"type": "flatten"},
    {"type": "dense", "in": 1152, "out": 1000},
    {"type": "relu"},
    {"type": "dense", "in": 1000, "out": 1000},
    {"type": "relu"},
    {"type": "dense", "in": 1000, "out": 10},
]

INPUT_SHAPES = {"lenet5": (1, 28, 28), "conv3fc3": (3, 32, 32)}
DEFAULT_MLP = "mlp:784-100-10"


def mlp_spec(widths: str | list[int]) -> list[dict]:
    if isinstance(widths, str):
        try:
            widths = [int(w) for w in widths.split("-")]
        except ValueError:
            raise ConfigurationError(f"bad mlp spec {widths!r}; expected e.g. '784-100-10'") from None
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ConfigurationError(f"mlp needs at least two positive widths, got {widths}")
    arch = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if i:
            arch.append({"type": "relu"})
        arch.append({"type": "dense", "in": a, "out": b})
    return arch


def resolve(name: str) -> tuple[list[dict], tuple]:
    """Architecture list and per-example input shape for a name.

    Accepts ``lenet5``, ``conv3fc3``, ``mlp:784-100-10``, a bare width string,
    or plain ``mlp`` for 784-100-10.
    """
    if name == "lenet5":
        return [dict(d) for d in LENET5], INPUT_SHAPES["lenet5"]
    if name == "conv3fc3":
        return [dict(d) for d in CONV3FC3], INPUT_SHAPES["conv3fc3"]
    if name == "mlp":
        name = DEFAULT_MLP
    spec = name[4:] if name.startswith("mlp:") else name
    arch = mlp_spec(spec)
    return arch, (arch[0]["in"],)


def build_model(
    arch: str | list[dict],
    family: str,
    seed: int | np.random.Generator = 0,
    input_shape: tuple | None = None,
    init_sigma: float = 0.05,
    flow_depth: int = 2,
    local_reparam: bool = False,
) -> BayesNet:
    """Instantiate ``arch`` with every weight layer in ``family``.

    With ``family="cfg"`` the convolutions get channel-factorized posteriors
    and dense layers fall back to fully factorized ones; an architecture with
    no convolution is rejected.
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}; expected one of {FAMILIES}")
    name = arch if isinstance(arch, str) else None
    if isinstance(arch, str):
        arch, default_shape = resolve(arch)
        input_shape = input_shape or default_shape
    arch = [dict(d) for d in arch]
    if input_shape is None:
        first = arch[0]
        input_shape = (first["in"],) if first["type"] == "dense" else None
        if input_shape is None:
            raise ConfigurationError("input_shape is required for a convolutional architecture")
    if family == "cfg" and not any(d["type"] == "conv" for d in arch):
        raise ConfigurationError("CFG requires convolutional layers")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    common = {"rng": rng, "init_sigma": init_sigma, "flow_depth": flow_depth}
    layers = []
    for d in arch:
        t = d["type"]
        if t == "dense":
            fam = "ffg" if family == "cfg" else family
            layers.append(Dense(d["in"], d["out"], fam, local_reparam=local_reparam, **common))
        elif t == "conv":
            layers.append(Conv2d(d["in"], d["out"], d["k"], d.get("stride", 1), d.get("pad", 0), family, **common))
        elif t == "relu":
            layers.append(ReLU())
        elif t == "pool":
            layers.append(MaxPool(d["size"], d["stride"], d.get("pad", 0)))
        elif t == "flatten":
            layers.append(Flatten())
        else:
            raise ConfigurationError(f"unknown layer type {t!r}")
    options = {"init_sigma": init_sigma, "flow_depth": flow_depth, "local_reparam": local_reparam}
    if name is not None:
        options["name"] = name
    return BayesNet(layers, family, input_shape, arch, options)


def rebuild(description: dict) -> BayesNet:
    """Model skeleton from :meth:`BayesNet.describe` output (parameters re-initialized)."""
    opts = {k: v for k, v in description.get("options", {}).items() if k != "name"}
    model = build_model(description["arch"], description["family"], 0, tuple(description["input_shape"]), **opts)
    model.options = dict(description.get("options", {}))
    return model
