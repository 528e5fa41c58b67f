import math

import numpy as np
import pytest
from scipy import integrate, stats

from bayesil import autodiff as ad
from bayesil.architectures import build_model
from bayesil.autodiff import Tensor
from bayesil.distributions import inverse_softplus, kl_diag_diag
from bayesil.errors import ConfigurationError, ContractError, DimensionError, StructureError
from bayesil.flows import FlowStack, PlanarLayer
from bayesil.layers import (
    Conv2d,
    Dense,
    LayerPrior,
    PriorSnapshot,
    gaussian_layer_prior,
    layer_kl,
    mnf_joint_kl_estimate,
    mnf_kl_draws,
    param_count,
)


def set_identity_flow(layer, shift=1.0, scale=1.0):
    """Affine part z = shift + scale * z0 and planar layers that do nothing."""
    flow = layer.flow
    flow.shift.data[...] = shift
    flow.raw_scale.data[...] = inverse_softplus(np.full(flow.dim, scale))
    for p in flow.planar:
        p.u.data[...] = 0.0
        p.w.data[...] = 0.0
        p.b.data[...] = 0.0


def randomize(layer, rng, flow_scale=0.7):
    for name, p in layer.named_parameters().items():
        if name.startswith("flow.planar") or name.endswith("rho") or name.endswith("lraw"):
            p.data[...] = rng.normal(-1.0 if name.endswith("rho") else 0.0, flow_scale, p.shape)
        elif name.startswith("flow."):
            p.data[...] = rng.normal(0.5, 0.3, p.shape)
        else:
            p.data[...] = rng.normal(0, 0.5, p.shape)
    return layer


def point_copy(model):
    """FT network whose weights are the posterior means of ``model``."""
    ft = build_model(model.arch, "ft", 0, model.input_shape)
    for (_, src), (_, dst) in zip(model.weight_layers(), ft.weight_layers()):
        dst.weight.data[...] = src.w.mu.data.reshape(dst.weight_shape)
        dst.bias.data[...] = src.b.mu.data
    return ft


SMALL_CONV = [
    {"type": "conv", "in": 2, "out": 3, "k": 3, "stride": 1, "pad": 1},
    {"type": "relu"},
    {"type": "pool", "size": 2, "stride": 2, "pad": 0},
    {"type": "flatten"},
    {"type": "dense", "in": 3 * 3 * 3, "out": 4},
]


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("family", ["ffg", "cfg", "mnf"])
def test_zero_noise_matches_point_network_bitwise(family):
    model = build_model(SMALL_CONV, family, 1, (2, 6, 6))
    if family == "mnf":
        for _, layer in model.weight_layers():
            set_identity_flow(layer)
    x = np.random.default_rng(0).standard_normal((5, 2, 6, 6))
    out = model.forward(x, model.zero_noise(5)).data
    assert np.array_equal(out, point_copy(model).forward(x).data)


@pytest.mark.parametrize("family", ["ffg", "mnf"])
def test_local_reparam_zero_noise_matches_point_network(family):
    model = build_model("mlp:4-5-3", family, 2, local_reparam=True)
    if family == "mnf":
        for _, layer in model.weight_layers():
            set_identity_flow(layer)
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(model.forward(x, model.zero_noise(3)).data, point_copy(model).forward(x).data)


def test_dense_output_shape():
    layer = Dense(800, 500, "ffg")
    x = np.zeros((7, 800))
    noise = {k: np.zeros(s) for k, s in layer.noise_shapes(7).items()}
    assert layer.forward(x, noise).shape == (7, 500)


def test_output_mean_over_weight_draws():
    rng = np.random.default_rng(0)
    layer = randomize(Dense(2, 3, "ffg"), rng)
    x = np.array([[0.8, -1.3]])
    draws = np.array([
        layer.forward(x, {k: rng.standard_normal(s) for k, s in layer.noise_shapes(1).items()}).data[0]
        for _ in range(10**4)
    ])
    expected = x @ layer.w.mu.data + layer.b.mu.data
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - expected[0]) < 3 * se)


def test_local_reparam_agrees_with_weight_sampling_in_distribution():
    rng = np.random.default_rng(1)
    a = randomize(Dense(3, 2, "ffg"), rng)
    b = Dense(3, 2, "ffg", local_reparam=True)
    for k, p in a.named_parameters().items():
        b.named_parameters()[k].data[...] = p.data
    x = rng.standard_normal((1, 3))
    n = 20000
    draw = lambda layer: np.array([
        layer.forward(x, {k: rng.standard_normal(s) for k, s in layer.noise_shapes(1).items()}).data[0] for _ in range(n)
    ])
    wa, wb = draw(a), draw(b)
    mean = x @ a.w.mu.data + a.b.mu.data
    var = (x**2) @ a.w.sigma().data ** 2 + a.b.sigma().data ** 2
    for w in (wa, wb):
        assert np.all(np.abs(w.mean(axis=0) - mean[0]) < 3 * np.sqrt(var[0] / n))
        assert np.allclose(w.var(axis=0, ddof=1), var[0], rtol=0.05)


def test_missing_noise_is_contract_error():
    layer = Dense(2, 2, "ffg")
    with pytest.raises(ContractError):
        layer.forward(np.zeros((1, 2)))
    with pytest.raises(ContractError):
        layer.forward(np.zeros((1, 2)), {"w": np.zeros((2, 2))})


def test_input_shape_mismatch():
    with pytest.raises(DimensionError):
        Dense(3, 2, "ft").forward(np.zeros((1, 4)))
    with pytest.raises(DimensionError):
        Conv2d(2, 1, 3, family="ft").forward(np.zeros((1, 3, 5, 5)))


def test_noise_shape_mismatch():
    layer = Dense(2, 2, "mnf")
    noise = {"z0": np.zeros(2), "w": np.zeros((3, 2)), "b": np.zeros(2)}
    with pytest.raises(DimensionError):
        layer.forward(np.zeros((1, 2)), noise)


def test_cfg_rejected_on_dense_layers():
    with pytest.raises(ConfigurationError):
        Dense(4, 2, "cfg")
    with pytest.raises(ConfigurationError):
        build_model("mlp:4-3-2", "cfg")


def test_cfg_network_keeps_dense_layers_factorized():
    model = build_model(SMALL_CONV, "cfg", 0, (2, 6, 6))
    assert [l.family for _, l in model.weight_layers()] == ["cfg", "ffg"]


def test_parameter_counts_match_shapes():
    conv = Conv2d(3, 4, 5, family="cfg")
    assert conv.w.mu.shape == (12, 25)
    assert conv.w.l_raw.shape == (12, 25 * 26 // 2)
    dense = Dense(6, 2, "mnf")
    assert dense.flow.dim == 6
    assert Conv2d(3, 4, 5, family="mnf").flow.dim == 12
    assert param_count(build_model("mlp:784-100-10", "ft")) == 784 * 100 + 100 + 100 * 10 + 10
    assert param_count(build_model("mlp:784-100-10", "ffg")) == 2 * (784 * 100 + 100 + 100 * 10 + 10)


# ---------------------------------------------------------------- KL


@pytest.mark.parametrize("family", ["ft", "ffg", "cfg", "mnf"])
def test_self_kl_is_exactly_zero(family):
    arch = SMALL_CONV if family == "cfg" else [{"type": "conv", "in": 2, "out": 3, "k": 3}, {"type": "flatten"}, {"type": "dense", "in": 48, "out": 2}]
    model = build_model(arch, family, 3, (2, 6, 6))
    rng = np.random.default_rng(4)
    for _, layer in model.weight_layers():
        randomize(layer, rng)
    prior = model.snapshot()
    for _ in range(5):
        assert model.kl(prior, model.draw_noise(rng, 1)).item() == 0.0


def test_ffg_two_weights_against_shifted_prior():
    layer = Dense(1, 2, "ffg")
    layer.w.mu.data[...] = 0.0
    layer.w.rho.data[...] = inverse_softplus(np.ones((1, 2)))
    snap = layer.snapshot()
    prior = gaussian_layer_prior("ffg", np.ones((1, 2)), 1.0, snap["b_mu"], snap["b_sigma"])
    assert layer_kl(layer, prior).item() == pytest.approx(1.0, abs=1e-12)


def test_cfg_single_entry_blocks_match_ffg():
    rng = np.random.default_rng(5)
    cfg, ffg = Conv2d(2, 3, 1, family="cfg"), Conv2d(2, 3, 1, family="ffg")
    mu, sigma = rng.standard_normal((3, 2, 1, 1)), 0.2 + rng.random((3, 2, 1, 1))
    cfg.w.mu.data[...] = mu.reshape(6, 1)
    cfg.w.l_raw.data[...] = inverse_softplus(sigma.reshape(6, 1))
    ffg.w.mu.data[...] = mu
    ffg.w.rho.data[...] = inverse_softplus(sigma)
    pm, ps = rng.standard_normal((3, 2, 1, 1)), 0.2 + rng.random((3, 2, 1, 1))
    b = (np.zeros(3), np.full(3, 0.5))
    kc = layer_kl(cfg, gaussian_layer_prior("cfg", pm, ps, *b, block_shape=(6, 1))).item()
    kf = layer_kl(ffg, gaussian_layer_prior("ffg", pm, ps, *b)).item()
    assert kc == pytest.approx(kf, rel=1e-12)


def test_ffg_kl_is_nonnegative_for_random_pairs():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a, b = randomize(Dense(3, 2, "ffg"), rng), randomize(Dense(3, 2, "ffg"), rng)
        assert layer_kl(a, b.snapshot()).item() >= 0


def test_cfg_kl_is_nonnegative_for_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = randomize(Conv2d(1, 2, 2, family="cfg"), rng), randomize(Conv2d(1, 2, 2, family="cfg"), rng)
        assert layer_kl(a, b.snapshot()).item() >= -1e-12


def test_mnf_estimate_is_zero_per_draw_against_itself():
    rng = np.random.default_rng(8)
    layer = randomize(Dense(3, 2, "mnf"), rng)
    prior = layer.snapshot()
    for _ in range(10):
        assert mnf_joint_kl_estimate(layer, prior, rng.standard_normal(3)).item() == 0.0
    assert np.all(mnf_kl_draws(layer, prior, rng.standard_normal((100, 3))) == 0.0)


@pytest.mark.parametrize("conv", [False, True])
def test_batched_estimator_matches_single_draws(conv):
    rng = np.random.default_rng(9)
    make = (lambda: Conv2d(2, 2, 2, family="mnf")) if conv else (lambda: Dense(3, 2, "mnf"))
    layer, other = randomize(make(), rng), randomize(make(), rng)
    prior = other.snapshot()
    z0 = rng.standard_normal((6, layer.rows))
    batch = mnf_kl_draws(layer, prior, z0)
    single = [mnf_joint_kl_estimate(layer, prior, z).item() for z in z0]
    assert np.allclose(batch, single, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_mnf_estimate_nonnegative_in_expectation(seed):
    rng = np.random.default_rng(seed)
    layer, other = randomize(Dense(3, 2, "mnf"), rng), randomize(Dense(3, 2, "mnf"), rng)
    draws = mnf_kl_draws(layer, other.snapshot(), rng.standard_normal((10**5, 3)))
    assert draws.mean() + 3 * draws.std(ddof=1) / math.sqrt(len(draws)) >= 0


def test_mnf_single_weight_matches_joint_quadrature():
    mu, sigma, mu_t, sigma_t = 0.8, 0.6, -0.3, 0.9
    layer = Dense(1, 1, "mnf")
    set_identity_flow(layer, shift=0.0, scale=1.0)
    layer.w.mu.data[...] = mu
    layer.w.rho.data[...] = inverse_softplus(sigma)
    snap = layer.snapshot()
    prior = LayerPrior("mnf", {**snap.arrays, "w_mu": [[mu_t]], "w_sigma": [[sigma_t]]}, 1)

    def integrand(w, z):
        q = stats.norm.logpdf(z) + stats.norm.logpdf(w, z * mu, sigma)
        p = stats.norm.logpdf(z) + stats.norm.logpdf(w, z * mu_t, sigma_t)
        return math.exp(q) * (q - p)

    exact = integrate.dblquad(integrand, -9, 9, lambda z: z * mu - 12 * sigma, lambda z: z * mu + 12 * sigma, epsabs=1e-10)[0]
    draws = mnf_kl_draws(layer, prior, np.random.default_rng(0).standard_normal((10**5, 1)))
    assert draws.mean() == pytest.approx(exact, abs=1e-2)
    # given z the weight part is the closed-form Gaussian KL
    z = 0.7
    expected = kl_diag_diag([z * mu], [sigma], [z * mu_t], [sigma_t]).item()
    assert mnf_joint_kl_estimate(layer, prior, [z]).item() == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------- structure errors


def test_prior_of_wrong_shape_is_rejected():
    with pytest.raises(StructureError):
        layer_kl(Dense(3, 2, "ffg"), Dense(2, 2, "ffg").snapshot())


def test_prior_of_wrong_kind_is_rejected():
    with pytest.raises(StructureError):
        layer_kl(Dense(3, 2, "mnf"), Dense(3, 2, "ffg").snapshot())
    with pytest.raises(StructureError):
        mnf_joint_kl_estimate(Dense(3, 2, "mnf"), Dense(3, 2, "ffg").snapshot(), np.zeros(3))


def test_network_prior_must_line_up():
    model = build_model("mlp:3-4-2", "ffg")
    other = build_model("mlp:3-5-2", "ffg")
    with pytest.raises(StructureError):
        model.kl(other.snapshot())
    with pytest.raises(StructureError):
        model.kl(PriorSnapshot(model.snapshot().layers[:2]))


def test_snapshot_is_immutable_copy():
    layer = Dense(2, 2, "mnf")
    snap = layer.snapshot()
    before = snap["w_mu"].copy()
    layer.w.mu.data[...] += 1.0
    assert np.array_equal(snap["w_mu"], before)
    with pytest.raises(ValueError):
        snap["w_mu"][0, 0] = 3.0
    with pytest.raises(TypeError):
        snap.arrays["w_mu"] = before


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("family", ["ft", "ffg", "cfg", "mnf"])
def test_forward_and_kl_gradients_with_frozen_noise(family):
    rng = np.random.default_rng(10)
    conv = Conv2d(2, 2, 2, 1, 1, family=family, rng=rng)
    randomize(conv, rng)
    prior = randomize(Conv2d(2, 2, 2, 1, 1, family=family, rng=rng), rng).snapshot()
    x = rng.standard_normal((2, 2, 3, 3))
    noise = {k: rng.standard_normal(s) for k, s in conv.noise_shapes(2).items()}
    proj = rng.standard_normal(conv.output_shape(x.shape))

    def loss():
        return ad.tsum(conv.forward(x, noise) * proj) + layer_kl(conv, prior, noise)

    assert ad.grad_check(loss, list(conv.named_parameters().values())) < 1e-4


@pytest.mark.parametrize("family,local", [("ffg", False), ("ffg", True), ("mnf", False), ("mnf", True)])
def test_dense_gradients_with_frozen_noise(family, local):
    rng = np.random.default_rng(11)
    dense = randomize(Dense(3, 2, family, rng=rng, local_reparam=local), rng)
    prior = randomize(Dense(3, 2, family, rng=rng), rng).snapshot()
    x = rng.standard_normal((4, 3))
    noise = {k: rng.standard_normal(s) for k, s in dense.noise_shapes(4).items()}
    proj = rng.standard_normal((4, 2))
    loss = lambda: ad.tsum(dense.forward(x, noise) * proj) + layer_kl(dense, prior, noise)
    assert ad.grad_check(loss, list(dense.named_parameters().values())) < 1e-4


# ---------------------------------------------------------------- named architectures


def block_inputs(model, batch):
    """Input shape seen by every conv / pool / dense block, in order."""
    trace = model.shape_trace(batch)
    return [(type(l).__name__, trace[i]) for i, l in enumerate(model.layers) if type(l).__name__ in ("Conv2d", "MaxPool", "Dense")]


def test_lenet5_shapes():
    M = 3
    model = build_model("lenet5", "ft")
    assert block_inputs(model, M) == [
        ("Conv2d", (M, 1, 28, 28)),
        ("MaxPool", (M, 20, 24, 24)),
        ("Conv2d", (M, 20, 12, 12)),
        ("MaxPool", (M, 50, 8, 8)),
        ("Dense", (M, 800)),
        ("Dense", (M, 500)),
    ]
    widths = [l.out_features for _, l in model.weight_layers()]
    assert widths == [20, 50, 500, 10]
    assert model.shape_trace(M)[-1] == (M, 10)


def test_conv3fc3_shapes():
    M = 2
    model = build_model("conv3fc3", "ft")
    assert block_inputs(model, M) == [
        ("Conv2d", (M, 3, 32, 32)),
        ("MaxPool", (M, 32, 32, 32)),
        ("Conv2d", (M, 32, 15, 15)),
        ("MaxPool", (M, 64, 15, 15)),
        ("Conv2d", (M, 64, 7, 7)),
        ("MaxPool", (M, 128, 7, 7)),
        ("Dense", (M, 1152)),
        ("Dense", (M, 1000)),
        ("Dense", (M, 1000)),
    ]
    assert [l.out_features for _, l in model.weight_layers()] == [32, 64, 128, 1000, 1000, 10]


@pytest.mark.parametrize("name", ["lenet5", "conv3fc3"])
def test_actual_forward_follows_the_trace(name):
    model = build_model(name, "ft")
    trace = model.shape_trace(2)
    h = model.prepare_input(np.zeros((2,) + model.input_shape))
    for layer, expected in zip(model.layers, trace[1:]):
        h = layer.forward(h, None)
        assert h.shape == expected


@pytest.mark.parametrize("family", ["ffg", "cfg", "mnf"])
def test_lenet5_runs_for_every_family(family):
    model = build_model("lenet5", family)
    assert model.forward(np.zeros((2, 784)), model.draw_noise(np.random.default_rng(0), 2)).shape == (2, 10)


def test_mlp_spec_errors():
    with pytest.raises(ConfigurationError):
        build_model("mlp:784-x", "ffg")
    with pytest.raises(ConfigurationError):
        build_model("mlp:784", "ffg")
    with pytest.raises(ConfigurationError):
        build_model("mlp:4-2", "bayes")
