"""Finite-difference verification of analytic gradients.

Everything runs in float64: the input and any module weights are promoted
before the check so the central differences are not swamped by float32
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import nn
from .models import CascadeNet, CascadeNetConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .rng import Rng
from .tensor import (Tensor, abs_, add, backward, clamp, concat, leaky_relu, log, mean, mul, no_grad, pad2d,
                     relu, reshape, sigmoid, sub, sum_, tanh)

# entries whose gradients are both below this are compared absolutely
REL_FLOOR = 1e-6
# finite-difference step for the full G and D cases
NETWORK_EPS = 1e-5


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.name:<22} max rel err {self.max_rel_err:.2e} over {self.checked} entries"
                f" (worst at {self.worst_index}: analytic {self.analytic:.6g}, numeric {self.numeric:.6g})")


def _scalar(name: str, out: Tensor) -> float:
    if out.data.size != 1:
        raise ValueError(f"{name}: grad_check needs a scalar-valued function, got shape {out.shape}")
    v = float(out.data.reshape(()))
    if not np.isfinite(v):
        raise FloatingPointError(f"{name}: function value is not finite ({v})")
    return v


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3, tol: float = 1e-3, name: str = "f",
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, REL_FLOOR). With
    ``max_entries`` only a seeded random subset of entries is probed.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    _scalar(name, out)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort(Rng(seed).permutation(flat.size)[:max_entries])
    worst = (0.0, 0, 0.0, 0.0)
    with no_grad():
        for i in idx:
            xp = flat.copy()
            xp[i] += eps
            hi = _scalar(name, f(Tensor(xp.reshape(base.shape))))
            xp[i] -= 2 * eps
            lo = _scalar(name, f(Tensor(xp.reshape(base.shape))))
            num = (hi - lo) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), REL_FLOOR)
            if err >= worst[0]:
                worst = (err, int(i), ana, num)
    err, i, ana, num = worst
    return GradCheckReport(name, err, tuple(int(v) for v in np.unravel_index(i, base.shape)), ana, num,
                           len(idx), tol)


# -- shipped op list ----------------------------------------------------------
def _uniform(rng: Rng, shape, lo=-1.0, hi=1.0, margin=0.0) -> np.ndarray:
    """Uniform draws, pushed away from zero by ``margin`` (kink avoidance)."""
    v = rng.uniform(int(np.prod(shape)), lo, hi).reshape(shape)
    if margin:
        v = np.where(v >= 0, v + margin, v - margin)
    return v


def _project(y: Tensor, r: Tensor) -> Tensor:
    return sum_(mul(y, r))


def _f64(module):
    module.astype(np.float64)
    return module


def _cases(seed: int):
    rng = Rng(seed)
    x46 = _uniform(rng, (1, 4, 6, 6))
    xk = _uniform(rng, (2, 3, 4, 4), margin=0.05)
    r346 = Tensor(_uniform(rng, (2, 3, 4, 4)))
    b3 = Tensor(_uniform(rng, (1, 3, 1, 1)), dtype=np.float64)

    r_mean = Tensor(_uniform(rng, (2, 4, 4)))
    r_flat = Tensor(_uniform(rng, (6, 16)))
    r_cat = Tensor(_uniform(rng, (2, 6, 4, 4)))
    r_pad = Tensor(_uniform(rng, (2, 3, 7, 7)))
    r_pool = Tensor(_uniform(rng, (2, 3, 2, 2)))
    r_conv = Tensor(_uniform(rng, (1, 3, 3, 3)))
    r_narrow = Tensor(_uniform(rng, (1, 2, 6, 6)))
    r_up = Tensor(_uniform(rng, (1, 3, 12, 12)))

    cases = {
        "add": (lambda x: _project(add(x, b3), r346), xk),
        "sub": (lambda x: _project(sub(b3, x), r346), xk),
        "mul": (lambda x: _project(mul(x, x), r346), xk),
        "abs": (lambda x: _project(abs_(x), r346), xk),
        "log": (lambda x: _project(log(x), r346), _uniform(rng, (2, 3, 4, 4), 0.1, 1.0)),
        "clamp": (lambda x: _project(clamp(x, -0.3, 0.3), r346),
                  np.where(np.abs(np.abs(xk) - 0.3) < 0.05, 0.5 * xk, xk)),
        "relu": (lambda x: _project(relu(x), r346), xk),
        "leaky_relu": (lambda x: _project(leaky_relu(x), r346), xk),
        "tanh": (lambda x: _project(tanh(x), r346), xk),
        "sigmoid": (lambda x: _project(sigmoid(x), r346), xk),
        "sum": (lambda x: sum_(mul(sum_(x, axis=1), sum_(x, axis=1))), xk),
        "mean": (lambda x: _project(mean(x, axis=1), r_mean), xk),
        "reshape": (lambda x: _project(reshape(x, (6, 16)), r_flat), xk),
        "concat": (lambda x: _project(concat([x, mul(x, x)]), r_cat), xk),
        "pad2d": (lambda x: _project(pad2d(x, (1, 2, 1, 2)), r_pad), xk),
        "max_pool2x2": (lambda x: _project(nn.max_pool2x2(x), r_pool), xk),
    }

    w46 = Tensor(_uniform(rng, (3, 4, 3, 3)) * 0.3, dtype=np.float64)
    bias3 = Tensor(_uniform(rng, (3,)), dtype=np.float64)
    cases["conv2d"] = (lambda x: _project(nn.conv2d(x, w46, bias3, 2, 1), r_conv), x46)
    w_s1 = Tensor(_uniform(rng, (2, 4, 3, 3)) * 0.3, dtype=np.float64)
    cases["conv2d_narrow"] = (lambda x: _project(nn.conv2d(x, w_s1, None, 1, 1), r_narrow),
                              x46)
    wt = Tensor(_uniform(rng, (4, 3, 4, 4)) * 0.3, dtype=np.float64)
    cases["conv2d_transpose"] = (
        lambda x: _project(nn.conv2d_transpose(x, wt, bias3, 2, 1), r_up), x46)

    bn = _f64(nn.BatchNormParams(4, rng))
    bn.update_stats = False
    r_bn = Tensor(_uniform(rng, (1, 4, 6, 6)))
    cases["batchnorm_train"] = (lambda x: _project(bn(x), r_bn), x46)
    bn_eval = _f64(nn.BatchNormParams(4, rng))
    bn_eval.training = False
    bn_eval.running_mean.data = _uniform(rng, (4,)) * 0.1
    bn_eval.running_var.data = _uniform(rng, (4,), 0.5, 1.5)
    cases["batchnorm_eval"] = (lambda x: _project(bn_eval(x), r_bn), x46)

    res = _f64(nn.ResidualBlockParams(4, rng))
    for conv in (res.conv1, res.conv2):
        conv.weight.data = conv.weight.data * 10  # lift the branch above the skip path
    nn.set_update_stats(res, False)
    cases["residual_block"] = (lambda x: _project(res(x), r_bn), x46)

    real_score = Tensor(_uniform(rng, (3,), 0.2, 0.8))
    scores = _uniform(rng, (3,), 0.2, 0.8)
    cases["adv_d"] = (lambda s: L.adversarial_losses(real_score, s)[0], scores)
    cases["adv_g"] = (lambda s: L.adversarial_losses(real_score, s)[1], scores)
    cases["adv_g_saturating"] = (lambda s: L.adversarial_losses(real_score, s, saturating=True)[1], scores)
    cases["perturbed"] = (lambda s: L.perturbed_from_score(s), scores)
    target = Tensor(_uniform(rng, (1, 3, 8, 8)))
    cases["l1"] = (lambda y: L.l1_loss(y, target), _uniform(rng, (1, 3, 8, 8)))
    phi = _f64(CascadeNet(CascadeNetConfig(3, [4, 4, 8], pool_after=(2,))))
    for conv in phi.convs:
        # non-negative weights with a positive output and a negative target
        # keep the probe away from every ReLU and L1 kink; relu and
        # max_pool2x2 are checked on their own above
        conv.weight.data = np.abs(conv.weight.data)
    dark = Tensor(_uniform(rng, (1, 3, 8, 8), -1.0, -0.2))
    cases["cascade"] = (lambda y: L.cascade_loss(phi, y, dark, [0.5, 0.3, 0.2]),
                        _uniform(rng, (1, 3, 8, 8), 0.2, 1.0))

    gen = _f64(Generator(GeneratorConfig(5, base_width=4, num_res_blocks=2, image_size=8), Rng(seed + 1)))
    nn.set_update_stats(gen, False)
    r_g = Tensor(_uniform(rng, (1, 3, 8, 8)))
    # whole networks stack many ReLU/BN kinks, so one of them usually sits
    # within 1e-3 of any probe point; a smaller float64 step stays clear
    cases["generator"] = (lambda x: _project(gen(x), r_g), _uniform(rng, (1, 5, 8, 8)), NETWORK_EPS)
    disc = _f64(Discriminator(DiscriminatorConfig(5, layers=2, base_width=4), Rng(seed + 2)))
    nn.set_update_stats(disc, False)
    cond = Tensor(_uniform(rng, (1, 5, 8, 8)))
    cases["discriminator"] = (lambda img: sum_(disc(cond, img)), _uniform(rng, (1, 3, 8, 8)), NETWORK_EPS)
    return cases


OP_NAMES = ["add", "sub", "mul", "abs", "log", "clamp", "relu", "leaky_relu", "tanh", "sigmoid", "sum", "mean",
            "reshape", "concat", "pad2d", "max_pool2x2", "conv2d", "conv2d_narrow", "conv2d_transpose",
            "batchnorm_train", "batchnorm_eval", "residual_block", "adv_d", "adv_g", "adv_g_saturating",
            "perturbed", "l1", "cascade", "generator", "discriminator"]


def run_checks(names: list[str] | None = None, eps: float = 1e-3, tol: float = 1e-3,
               seed: int = 7) -> list[GradCheckReport]:
    cases = _cases(seed)
    names = names or OP_NAMES
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise KeyError(f"unknown op(s) {unknown}; known: {', '.join(OP_NAMES)}")
    reports = []
    for n in names:
        f, x, *step = cases[n]
        reports.append(grad_check(f, x, min(eps, *step) if step else eps, tol, name=n))
    return reports
