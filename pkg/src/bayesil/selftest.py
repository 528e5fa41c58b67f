"""Built-in verification suites: gradient checks, KL oracles, flow normalization.

Ops are looked up on the ``autodiff`` module at call time, so a patched op
is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import autodiff as ad
from . import distributions as dist
from . import flows
from .architectures import build_model
from .autodiff import Tensor
from .layers import BayesNet
from .training import ElboConfig, elbo_minibatch

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""


def _param(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = low + np.abs(data)
    return Tensor(data, requires_grad=True)


def _project(out: Tensor, rng) -> Tensor:
    return ad.tsum(ad.mul(out, Tensor(rng.standard_normal(out.shape))))


def op_cases(seed: int = 0) -> dict:
    """name -> (loss closure, params) for every differentiable op."""
    rng = np.random.default_rng(seed)
    cases = {}

    def unary(name, fn, low=None, shape=(3, 4)):
        x = _param(rng, *shape, low=low)
        w = Tensor(rng.standard_normal(fn(x).shape))
        cases[name] = (lambda: ad.tsum(ad.mul(fn(x), w)), [x])

    def binary(name, fn, shape_a=(3, 4), shape_b=(3, 4), low_b=None):
        a, b = _param(rng, *shape_a), _param(rng, *shape_b, low=low_b)
        out_shape = fn(a, b).shape
        w = Tensor(rng.standard_normal(out_shape))
        cases[name] = (lambda: ad.tsum(ad.mul(fn(a, b), w)), [a, b])

    binary("add", lambda a, b: ad.add(a, b))
    binary("add_scalar", lambda a, b: ad.add(a, b), shape_b=())
    binary("sub", lambda a, b: ad.sub(a, b))
    binary("mul", lambda a, b: ad.mul(a, b))
    binary("div", lambda a, b: ad.div(a, b), low_b=0.5)
    unary("neg", lambda x: ad.neg(x))
    unary("square", lambda x: ad.square(x))
    unary("sqrt", lambda x: ad.sqrt(x), low=0.5)
    unary("tabs", lambda x: ad.tabs(x), low=0.1)
    unary("relu", lambda x: ad.relu(x), low=0.1)
    unary("tanh", lambda x: ad.tanh(x))
    unary("softplus", lambda x: ad.softplus(x))
    unary("exp", lambda x: ad.exp(x))
    unary("log", lambda x: ad.log(x), low=0.5)
    unary("tsum", lambda x: ad.tsum(x))
    unary("mean", lambda x: ad.mean(x))
    unary("reshape", lambda x: ad.reshape(x, (4, 3)))
    unary("transpose", lambda x: ad.transpose(x))
    binary("dot", lambda a, b: ad.dot(a, b), (5,), (5,))
    binary("add_bias", lambda a, b: ad.add_bias(a, b), (3, 4), (4,))
    binary("scale_rows", lambda a, b: ad.scale_rows(a, b), (3, 4), (3,))
    binary("matmul", lambda a, b: ad.matmul(a, b), (3, 4), (4, 2))
    binary("batched_matvec", lambda a, b: ad.batched_matvec(a, b), (3, 4, 4), (3, 4))
    binary("conv2d", lambda a, b: ad.conv2d(a, b), (2, 2, 6, 6), (3, 2, 3, 3))
    binary("conv2d_stride_pad", lambda a, b: ad.conv2d(a, b, stride=2, padding=1), (2, 2, 6, 6), (3, 2, 3, 3))

    x = Tensor(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1, requires_grad=True)
    wp = Tensor(rng.standard_normal((2, 2, 3, 3)))
    cases["max_pool2d"] = (lambda: ad.tsum(ad.mul(ad.max_pool2d(x, 2, 2), wp)), [x])

    logits = _param(rng, 5, 4)
    labels = rng.integers(0, 4, 5)
    cases["log_softmax_nll"] = (lambda: ad.log_softmax_nll(logits, labels), [logits])

    packed = _param(rng, 2, dist.packed_size(3))
    cases["tril_from_packed"] = (lambda: _project(dist.tril_from_packed(packed), np.random.default_rng(1)), [packed])

    mu_q, s_q = _param(rng, 6), _param(rng, 6, low=0.3)
    mu_p, s_p = rng.standard_normal(6), 0.5 + rng.random(6)
    cases["kl_diag_diag"] = (lambda: dist.kl_diag_diag(mu_q, s_q, mu_p, s_p), [mu_q, s_q])

    cq = dist.CholGaussian.init(2, 3, 3, rng, 0.5)
    cq.mu.data += rng.standard_normal(cq.mu.shape)
    cp = dist.CholGaussian.init(2, 3, 3, rng, 0.8)
    Lp = cp.factor().data
    cases["kl_chol_chol"] = (lambda: dist.kl_chol_chol(cq.mu, cq.factor(), cp.mu.data, Lp), cq.parameters())

    sig = _param(rng, 5, low=0.3)
    cases["entropy_diag"] = (lambda: dist.entropy_diag(sig), [sig])

    mu, sg, zz = _param(rng, 3, 4), _param(rng, 3, 4, low=0.3), _param(rng, 3, low=0.5)
    mt, st = rng.standard_normal((3, 4)), 0.5 + rng.random((3, 4))
    cases["cross_entropy_scaled"] = (lambda: dist.cross_entropy_scaled(mu, sg, mt, st, zz), [mu, sg, zz])

    flow = flows.FlowStack.init(3, rng, depth=2, std=0.7)
    y = _param(rng, 4, 3)
    cases["flow_log_density_at"] = (lambda: ad.tsum(flow.log_density_at(y)), [y])
    z0 = Tensor(rng.standard_normal((4, 3)))
    cases["flow_log_density"] = (lambda: ad.tsum(flows.nf_log_density(flow, z0)[1]), flow.parameters())
    return cases


def _tiny_net(family: str, seed: int) -> BayesNet:
    arch = [
        {"type": "conv", "in": 1, "out": 2, "k": 3, "stride": 1, "pad": 1},
        {"type": "relu"},
        {"type": "pool", "size": 2, "stride": 2, "pad": 0},
        {"type": "flatten"},
        {"type": "dense", "in": 8, "out": 3},
    ]
    return build_model(arch, family, seed, input_shape=(1, 4, 4), init_sigma=0.3)


def elbo_case(family: str, seed: int = 0):
    """Full minibatch ELBO of a tiny conv+dense net against a perturbed prior, noise frozen."""
    model = _tiny_net(family, seed)
    prior = _tiny_net(family, seed + 1).snapshot()
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((3, 1, 4, 4)), rng.integers(0, 3, 3)
    noise = None if family == "ft" else [model.draw_noise(rng, 3)]
    cfg = ElboConfig(30, 3, kl_scale=0.5)

    def loss():
        return elbo_minibatch(model, x, y, prior, cfg, noise=noise)[0]

    return loss, model.parameters()


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (f, params) in op_cases(seed).items():
        out.append(_grad_result("gradient", name, f, params))
    for family in ("ft", "ffg", "cfg", "mnf"):
        f, params = elbo_case(family, seed)
        out.append(_grad_result("gradient", f"elbo[{family}]", f, params, max_entries=6))
    return out


def _grad_result(suite, name, f, params, max_entries=None) -> CheckResult:
    try:
        err = ad.grad_check(f, params, max_entries=max_entries)
    except Exception as e:  # a broken op must show up as a failed row, not a crash
        return CheckResult(suite, name, float("nan"), GRAD_TOL, False, f"{type(e).__name__}: {e}")
    return CheckResult(suite, name, err, GRAD_TOL, bool(err < GRAD_TOL))


def kl_suite(seed: int = 0, samples: int = 200_000, pairs: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(pairs):
        d = 3
        mq, mp = rng.standard_normal(d), rng.standard_normal(d)
        sq, sp = 0.5 + rng.random(d), 0.5 + rng.random(d)
        exact = dist.kl_diag_diag(mq, sq, mp, sp).item()
        est, se = mc_kl_diag(mq, sq, mp, sp, samples, rng)
        z = abs(exact - est) / se
        out.append(CheckResult("kl", f"diag_vs_mc[{k}]", z, 3.0, bool(z < 3.0), "in standard errors"))

        Lq, Lp = random_chol(rng, 1, d), random_chol(rng, 1, d)
        mq2, mp2 = rng.standard_normal((1, d)), rng.standard_normal((1, d))
        exact = dist.kl_chol_chol(mq2, Lq, mp2, Lp).item()
        est, se = mc_kl_chol(mq2[0], Lq[0], mp2[0], Lp[0], samples, rng)
        z = abs(exact - est) / se
        out.append(CheckResult("kl", f"chol_vs_mc[{k}]", z, 3.0, bool(z < 3.0), "in standard errors"))
    L = random_chol(rng, 2, 3)
    m = rng.standard_normal((2, 3))
    self_chol = dist.kl_chol_chol(m, L, m, L).item()
    s = 0.5 + rng.random(4)
    mu = rng.standard_normal(4)
    self_diag = dist.kl_diag_diag(mu, s, mu, s).item()
    out.append(CheckResult("kl", "self_kl_diag", abs(self_diag), 0.0, self_diag == 0.0))
    out.append(CheckResult("kl", "self_kl_chol", abs(self_chol), 0.0, self_chol == 0.0))
    return out


def random_chol(rng, blocks: int, d: int) -> np.ndarray:
    L = np.tril(rng.standard_normal((blocks, d, d)) * 0.3, -1)
    idx = np.arange(d)
    L[:, idx, idx] = 0.5 + rng.random((blocks, d))
    return L


def mc_kl_diag(mq, sq, mp, sp, n, rng):
    x = mq + sq * rng.standard_normal((n, len(mq)))
    lq = -0.5 * np.sum(((x - mq) / sq) ** 2 + 2 * np.log(sq), axis=1)
    lp = -0.5 * np.sum(((x - mp) / sp) ** 2 + 2 * np.log(sp), axis=1)
    r = lq - lp
    return r.mean(), r.std(ddof=1) / np.sqrt(n)


def _mvn_logpdf_chol(x, m, L):
    sol = np.linalg.solve(L, (x - m).T)
    return -0.5 * np.sum(sol**2, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * len(m) * dist.LOG_2PI


def mc_kl_chol(mq, Lq, mp, Lp, n, rng):
    x = mq + rng.standard_normal((n, len(mq))) @ Lq.T
    r = _mvn_logpdf_chol(x, mq, Lq) - _mvn_logpdf_chol(x, mp, Lp)
    return r.mean(), r.std(ddof=1) / np.sqrt(n)


def numeric_jacobian_logdet(flow: flows.FlowStack, z0: np.ndarray, h: float = 1e-6) -> float:
    d = len(z0)
    J = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        up = flows.nf_forward(flow, z0 + e)[0].data
        down = flows.nf_forward(flow, z0 - e)[0].data
        J[:, j] = (up - down) / (2 * h)
    return float(np.linalg.slogdet(J)[1])


def pushforward_mass(flow: flows.FlowStack, lo: float = -30.0, hi: float = 30.0) -> float:
    """Integral over the line of the density a 1-D flow pushes forward."""

    def dens(y):
        with ad.no_grad():
            return float(np.exp(flow.log_density_at(Tensor(np.array([[y]]))).data[0]))

    # the mass concentrates where the base density lands, so split there
    centre = float(flows.nf_forward(flow, np.zeros(1))[0].data[0])
    pts = sorted({lo, centre, hi})
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        total += integrate.quad(dens, a, b, limit=200, epsabs=1e-12, epsrel=1e-10)[0]
    return total


def flow_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for d in (1, 2, 3, 4):
        flow = flows.FlowStack.init(d, rng, depth=3, std=0.8, scale=0.7)
        worst = 0.0
        for _ in range(3):
            z0 = rng.standard_normal(d)
            ld = flows.nf_forward(flow, z0)[1].item()
            worst = max(worst, abs(ld - numeric_jacobian_logdet(flow, z0)))
        out.append(CheckResult("flow", f"logdet_vs_jacobian[d={d}]", worst, 1e-5, bool(worst < 1e-5)))
    for k in range(2):
        flow = flows.FlowStack.init(1, rng, depth=2, std=1.0, scale=0.8)
        mass = pushforward_mass(flow)
        out.append(CheckResult("flow", f"density_integrates_to_1[{k}]", abs(mass - 1), 1e-3, bool(abs(mass - 1) < 1e-3)))
    return out


SUITES = {"gradient": gradient_suite, "kl": kl_suite, "flow": flow_suite}


def run_all(seed: int = 0, suites=None) -> list[CheckResult]:
    results = []
    for name in suites or SUITES:
        results.extend(SUITES[name](seed))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'suite':<9} {'check':<34} {'value':>11} {'tol':>9}  result"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{r.suite:<9} {r.name:<34} {r.value:>11.3g} {r.tol:>9.1g}  {status}"
        if r.detail and not r.passed:
            line += f"  ({r.detail})"
        lines.append(line)
    return "\n".join(lines)


def main(seed: int = 0, suites=None, out=print) -> int:
    start = time.perf_counter()
    results = run_all(seed, suites)
    out(format_table(results))
    failed = [r for r in results if not r.passed]
    out(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    if failed:
        out("failing: " + ", ".join(f"{r.suite}/{r.name}" for r in failed))
        return 1
    return 0
