"""Fast invariant suite behind ``calvsign verify``.

Every check is cheap enough that the whole suite finishes well under a minute
on one core. ``gradient_fault`` perturbs the analytic gradients handed to the
finite-difference checks; it exists so the failure path can be exercised.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import features as F
from . import fusion as FU
from . import metrics as M
from . import nn
from .nn import Network, NetworkSpec
from .streams import HLO_DIM, STREAMS, StreamOutput

GRAD_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


class FaultyGradients:
    """Delegating wrapper whose analytic gradients are deliberately wrong."""

    def __init__(self, model, scale: float):
        self.model = model
        self.scale = scale

    @property
    def params(self):
        return self.model.params

    def loss(self, *args, **kwargs):
        return self.model.loss(*args, **kwargs)

    def loss_and_gradients(self, inputs, labels):
        loss, grads = self.model.loss_and_gradients(inputs, labels)
        key = sorted(grads)[0]
        bad = dict(grads)
        bad[key] = grads[key] + self.scale * (1.0 + np.abs(grads[key]))
        return loss, bad


# ---------------------------------------------------------------------------
# random gradient-check cases


def _generic(net: Network, rng) -> Network:
    """Random weights and biases: zero biases put ReLU inputs exactly on the kink
    whenever a sample's upstream units are all inactive."""
    return net.with_params({k: rng.normal(0.0, 0.5, size=v.shape) for k, v in net.params.items()})


def _dense_case(rng):
    sizes = [int(rng.integers(2, 7)) for _ in range(3)]
    spec = NetworkSpec((nn.dense(sizes[0], sizes[1]), nn.relu(), nn.dense(sizes[1], sizes[2]), nn.relu(),
                        nn.dense(sizes[2], 2), nn.softmax()), hlo_tap=3)
    x = rng.normal(size=(int(rng.integers(2, 6)), sizes[0]))
    return _generic(Network.init(spec, rng), rng), x


def _conv_case(rng):
    c_in, c_mid, c_out = (int(rng.integers(1, 4)) for _ in range(3))
    k1, k2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    s1 = int(rng.integers(1, 3))
    length = int(rng.integers(k1 + s1 * (k2 + 1), 16))
    spec = NetworkSpec((nn.conv1d(c_in, c_mid, k1, s1), nn.relu(), nn.conv1d(c_mid, c_out, k2), nn.relu(),
                        nn.gap(), nn.dense(c_out, 3), nn.relu(), nn.dense(3, 2), nn.softmax()), hlo_tap=6)
    x = rng.normal(size=(int(rng.integers(2, 5)), c_in, length))
    return _generic(Network.init(spec, rng), rng), x


def _hlo_mixer_case(rng):
    n_in, hid, d = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    mixer = _generic(Network.init(NetworkSpec((nn.dense(n_in, hid), nn.relu(), nn.dense(hid, 3), nn.softmax())),
                                  rng), rng)
    head = _generic(Network.init(NetworkSpec((nn.dense(d, 3), nn.relu(), nn.dense(3, 2), nn.softmax())), rng), rng)
    b = int(rng.integers(2, 5))
    inputs = (rng.normal(size=(b, n_in)), rng.normal(size=(b, 3, d)))
    return FU.HLOMixerModel(mixer, head), inputs


CASES = {"dense": _dense_case, "conv1d+gap": _conv_case, "hlo_mixer": _hlo_mixer_case}


def gradient_case(kind: str, rng):
    """A random small model of ``kind`` with a batch and labels drawn from ``rng``."""
    model, inputs = CASES[kind](rng)
    labels = rng.integers(0, 2, size=nn.n_samples(inputs))
    return model, inputs, labels


def gradient_draws(n: int, seed: int = 0, gradient_fault: float = 0.0) -> list[tuple[str, float]]:
    """Relative finite-difference error for ``n`` draws cycling through :data:`CASES`."""
    rng = np.random.default_rng(seed)
    kinds = list(CASES)
    out = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        model, inputs, labels = gradient_case(kind, rng)
        if gradient_fault:
            model = FaultyGradients(model, gradient_fault)
        out.append((kind, nn.finite_difference_check(model, inputs, labels)))
    return out


# ---------------------------------------------------------------------------
# checks


def check_gradients(gradient_fault: float = 0.0, n: int = 30) -> tuple[bool, str]:
    errors = gradient_draws(n, seed=1, gradient_fault=gradient_fault)
    worst = max(e for _, e in errors)
    return worst < GRAD_TOL, f"{n} draws, worst relative error {worst:.2e}"


def check_m_measure() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(9))
    q = rng.dirichlet(np.ones(9))
    zero = F.m_measure(np.tile(p, (64, 1)))
    alt = F.m_measure(np.array([p if t % 2 == 0 else q for t in range(64)]))
    d = F.symmetric_kl(p, q)
    odd = np.abs(alt[0::2] - d).max()
    even = np.abs(alt[1::2]).max()
    ok = np.all(zero == 0.0) and odd < 1e-12 and even == 0.0
    return bool(ok), f"constant max {zero.max():.1e}, odd-lag error {odd:.1e}"


def check_symmetric_kl() -> tuple[bool, str]:
    d = F.symmetric_kl([0.8, 0.2], [0.2, 0.8])
    err = abs(d - 1.2 * math.log(4))
    rng = np.random.default_rng(3)
    p, q = rng.dirichlet(np.ones(4), size=1000), rng.dirichlet(np.ones(4), size=1000)
    fwd, back = F.symmetric_kl(p, q), F.symmetric_kl(q, p)
    ok = err < 1e-12 and np.all(fwd == back) and np.all(fwd >= 0)
    return bool(ok), f"|D - 1.2 ln 4| = {err:.1e}"


def _random_outputs(rng) -> list[StreamOutput]:
    return [StreamOutput(rng.dirichlet([1, 1]), rng.normal(size=HLO_DIM), k) for k in STREAMS]


def check_fusion_algebra() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    head = Network.init(FU.build_head("hlo_mixer"), rng)
    worst = 0.0
    exact = True
    for _ in range(50):
        outs = _random_outputs(rng)
        avg = FU.fuse_posterior_average(outs)
        worst = max(worst, np.abs(FU.fuse_posterior_mixer(outs, np.full(3, 1 / 3)) - avg).max())
        for k in range(3):
            onehot = np.eye(3)[k]
            exact &= np.array_equal(FU.fuse_posterior_mixer(outs, onehot), outs[k].posterior)
            exact &= np.array_equal(FU.fuse_hlo_mixer(outs, onehot, head), head.predict(outs[k].hlo)[0])
    return bool(worst < 1e-12 and exact), f"uniform-vs-average max diff {worst:.1e}, one-hot exact {exact}"


def check_interpolation() -> tuple[bool, str]:
    mean = F.interpolate_mean(np.array([2.0, 0.0, 4.0]), np.array([True, False, True]))
    lin = F.interpolate_linear(np.arange(5.0) * np.r_[1, 0, 0, 0, 1], np.array([1, 0, 0, 0, 1], bool))
    ok = np.array_equal(mean, [2.0, 3.0, 4.0]) and np.allclose(lin, [0, 1, 2, 3, 4], atol=1e-15)
    return bool(ok), "mean and linear fill examples"


def check_auc() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    scores = np.round(rng.random(300), 2)
    labels = rng.integers(0, 2, 300)
    auc, roc = M.roc_auc(scores, labels)
    mw = M.mann_whitney_auc(scores, labels)
    ok = abs(auc - mw) < 1e-12 and roc[0] == (0.0, 0.0) and roc[-1] == (1.0, 1.0)
    return bool(ok), f"trapezoid {auc:.6f} vs pair count {mw:.6f}"


def check_upper_limit() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    posts = rng.dirichlet([1, 1], size=(200, 3))
    labels = rng.integers(0, 2, 200)
    upper = M.roc_auc(FU.batch_select(posts, "upper", labels), labels)[0]
    others = [M.roc_auc(posts[:, k, 1], labels)[0] for k in range(3)]
    others.append(M.roc_auc(posts[:, :, 1].mean(axis=1), labels)[0])
    return bool(all(upper >= o for o in others)), f"upper {upper:.3f} vs best other {max(others):.3f}"


CHECKS = {
    "gradients": check_gradients,
    "m_measure": check_m_measure,
    "symmetric_kl": check_symmetric_kl,
    "fusion_algebra": check_fusion_algebra,
    "interpolation": check_interpolation,
    "roc_auc": check_auc,
    "upper_limit": check_upper_limit,
}


def run_checks(gradient_fault: float = 0.0) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            passed, detail = fn(gradient_fault) if name == "gradients" else fn()
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, passed, detail, time.perf_counter() - t0))
    return results
