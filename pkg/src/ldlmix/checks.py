"""Self-checks run by ``ldlmix check``: gradients, metric oracles, degeneracy."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .augment import FrozenNoise, NoiseSource, gaussian_augment, tile_sample
from .metrics import METRICS
from .numerics import Tensor, grad_check
from .tabmixer import AUGMENTED, BLOCK_FORMS, TILED, LmResidualParams, TabMixerModel, lm_residual, predict
from .train import LossConfig, combined_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


# ---------------------------------------------------------------------------
# primitive gradient cases: builder(rng) -> (f, params)
# ---------------------------------------------------------------------------

def _case_matmul(rng):
    a, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    return lambda: nx.sum_all(nx.matmul(a, b) * w), [a, b]


def _case_batched_matmul(rng):
    a, b = Tensor(rng.standard_normal((2, 3, 4))), Tensor(rng.standard_normal((4, 2)))
    w = rng.standard_normal((2, 3, 2))
    return lambda: nx.sum_all(nx.matmul(a, b) * w), [a, b]


def _case_linear(rng):
    x, wt, b = (Tensor(rng.standard_normal(s)) for s in ((2, 3, 4), (4, 5), (5,)))
    w = rng.standard_normal((2, 3, 5))
    return lambda: nx.sum_all(nx.linear(x, wt, b) * w), [x, wt, b]


def _case_linear_vector(rng):
    x, wt, b = (Tensor(rng.standard_normal(s)) for s in ((4,), (4, 3), (3,)))
    w = rng.standard_normal(3)
    return lambda: nx.sum_all(nx.linear(x, wt, b) * w), [x, wt, b]


def _case_add(rng):
    a, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(4))
    w = rng.standard_normal((3, 4))
    return lambda: nx.sum_all((a + b) * w), [a, b]


def _case_sub(rng):
    a, b = Tensor(rng.standard_normal((3, 1))), Tensor(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    return lambda: nx.sum_all(nx.sub(a, b) * w), [a, b]


def _case_mul(rng):
    a, b = Tensor(rng.standard_normal((2, 1, 4))), Tensor(rng.standard_normal((3, 4)))
    w = rng.standard_normal((2, 3, 4))
    return lambda: nx.sum_all(a * b * w), [a, b]


def _case_relu(rng):
    x = Tensor(rng.standard_normal((4, 5)))
    w = rng.standard_normal((4, 5))
    return lambda: nx.sum_all(nx.relu(x) * w), [x]


def _case_sigmoid(rng):
    x = Tensor(2.0 * rng.standard_normal((4, 5)))
    w = rng.standard_normal((4, 5))
    return lambda: nx.sum_all(nx.sigmoid(x) * w), [x]


def _case_log(rng):
    x = Tensor(rng.uniform(0.2, 3.0, 6))
    w = rng.standard_normal(6)
    return lambda: nx.sum_all(nx.log(x) * w), [x]


def _case_abs(rng):
    x = Tensor(rng.standard_normal(6))
    w = rng.standard_normal(6)
    return lambda: nx.sum_all(nx.absolute(x) * w), [x]


def _case_softmax(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    w = rng.standard_normal((3, 5))
    return lambda: nx.sum_all(nx.softmax_rows(x) * w), [x]


def _case_layer_norm(rng):
    x = Tensor(rng.standard_normal((2, 3, 6)))
    g, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    w = rng.standard_normal((2, 3, 6))
    return lambda: nx.sum_all(nx.layer_norm(x, g, b) * w), [x, g, b]


def _case_conv2d_3x3(rng):
    x, k, b = Tensor(rng.standard_normal((2, 5, 6))), Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal(1))
    w = rng.standard_normal((2, 5, 6))
    return lambda: nx.sum_all(nx.conv2d_3x3(x, k, b) * w), [x, k, b]


def _case_mean_columns(rng):
    x = Tensor(rng.standard_normal((2, 4, 3)))
    w = rng.standard_normal((2, 3))
    return lambda: nx.sum_all(nx.mean_columns(x) * w), [x]


def _case_transpose(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((2, 4, 3))
    return lambda: nx.sum_all(nx.transpose(x) * w), [x]


def _case_broadcast(rng):
    x = Tensor(rng.standard_normal((2, 1, 4)))
    w = rng.standard_normal((2, 4, 4))
    return lambda: nx.sum_all(nx.broadcast_to(x, (2, 4, 4)) * w), [x]


def _case_reductions(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    w = rng.standard_normal((2, 6))
    return lambda: nx.mean_all(nx.reshape(x, (2, 6)) * w) + nx.sum_all(nx.sum_last(x * x)), [x]


def _case_combined_loss(rng):
    pred = Tensor(rng.dirichlet(np.ones(5), size=3))
    target = rng.dirichlet(np.ones(5), size=3)
    target[0, 1] = 0.0
    target[0] /= target[0].sum()

    return lambda: combined_loss(pred, target, LossConfig(1.0, 0.5)), [pred]


PRIMITIVE_CASES = {name[6:]: fn for name, fn in globals().items() if name.startswith("_case_")}


def check_primitive(name: str, instances: int = 20, seed: int = 0,
                    h: float = 1e-5, tol: float = 1e-4) -> nx.GradCheckReport:
    """Worst report over ``instances`` random instances of one primitive."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = None
    for _ in range(instances):
        f, params = PRIMITIVE_CASES[name](rng)
        rep = grad_check(f, params, h=h, tol=tol)
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    return worst


# ---------------------------------------------------------------------------
# composite checks
# ---------------------------------------------------------------------------

def check_lm_residual(n: int = 8, seed: int = 0, tol: float = 1e-4) -> nx.GradCheckReport:
    """Every parameter and the input of one LMResidual block on an n x n map.

    Both block forms and both mixing axes; the worst report is returned.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for form in BLOCK_FORMS:
        for axis in ("columns", "rows"):
            p = LmResidualParams.init(n, rng, axis=axis)
            p.conv_bias.data[:] = 0.1
            p.b1.data[:] = rng.uniform(-0.1, 0.1, p.b1.shape)
            x = Tensor(rng.standard_normal((n, n)))
            w = rng.standard_normal((n, n))
            f = lambda p=p, x=x, form=form: nx.sum_all(nx.mul(lm_residual(x, p, form), w))  # noqa: E731
            reports.append(grad_check(f, [x] + p.tensors(), h=1e-5, tol=tol))
    return max(reports, key=lambda r: r.max_rel_error)


def toy_model(n: int = 8, c: int = 4, seed: int = 0, blocks: int = 12, hidden: int = 512) -> TabMixerModel:
    return TabMixerModel.init(n, c, seed=seed, blocks=blocks, hidden=hidden)


def check_pipeline(n: int = 8, c: int = 4, seed: int = 0, tol: float = 1e-3,
                   max_coords: int = 12) -> nx.GradCheckReport:
    """predict (augmented mode, frozen noise) -> combined loss, every parameter tensor.

    Twelve blocks of 512 ReLU units leave kinks within a finite-difference
    step of some probes, so the check is kink-aware.
    """
    rng = np.random.default_rng(seed)
    model = toy_model(n, c, seed)
    v = Tensor(rng.standard_normal((2, n)))
    target = rng.dirichlet(np.ones(c), size=2)
    noise = FrozenNoise(rng.standard_normal((2, n, n)))
    f = lambda: combined_loss(predict(model, v, noise, AUGMENTED), target)  # noqa: E731
    return grad_check(f, [v] + model.parameters(), h=1e-6, tol=tol,
                      max_coords=max_coords, seed=seed, kink_aware=True)


def check_metric_oracles(pairs: int = 10_000, seed: int = 0) -> tuple[bool, str]:
    p, q = np.array([1.0, 0.0]), np.array([0.5, 0.5])
    expected = {
        "chebyshev": 0.5,
        "clark": math.sqrt(1.0 / 9.0 + 1.0),
        "canberra": 1.0 / 3.0 + 1.0,
        "kl": math.log(2.0),
        "cosine": 1.0 / math.sqrt(2.0),
        "intersection": 0.5,
    }
    worst_pair = max(abs(float(METRICS[k](p, q)) - v) for k, v in expected.items())
    rng = np.random.default_rng(seed)
    c = rng.integers(2, 20, size=pairs)
    worst_id = 0.0
    for ci in np.unique(c):
        k = int(np.sum(c == ci))
        a = rng.dirichlet(np.ones(ci), size=k)
        b = rng.dirichlet(np.ones(ci), size=k)
        inter = METRICS["intersection"](a, b)
        l1 = np.abs(a - b).sum(axis=1)
        worst_id = max(worst_id, float(np.max(np.abs(inter + l1 / 2.0 - 1.0))))
    ok = worst_pair < 1e-5 and worst_id < 1e-12
    return ok, f"hand values max err {worst_pair:.2e}, identity max err {worst_id:.2e} over {pairs} pairs"


def check_degeneracy(vectors: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    noise = NoiseSource(seed)
    exact = True
    for _ in range(vectors):
        n = int(rng.integers(1, 30))
        v = rng.standard_normal(n) * rng.choice([1e-3, 1.0, 1e3])
        g = gaussian_augment(v, np.zeros(n), noise).data
        exact &= np.array_equal(g, tile_sample(v).data)
    model = toy_model(seed=seed)
    model.learner.b3.data[:] = -1e4   # sigmoid underflows to exactly 0
    v = rng.standard_normal((5, 8))
    pa = predict(model, v, NoiseSource(seed), AUGMENTED).data
    pt = predict(model, v, None, TILED).data
    diff = float(np.max(np.abs(pa - pt)))
    return exact and diff <= 1e-12, f"{vectors} vectors exact={exact}, predict diff {diff:.1e}"


def run_all(verbose_print=None) -> list[CheckResult]:
    results = []

    def record(name, fn):
        t = time.perf_counter()
        out = fn()
        dt = time.perf_counter() - t
        if isinstance(out, nx.GradCheckReport):
            kinks = f", {out.kinks} at kinks" if out.kinks else ""
            res = CheckResult(name, out.passed, f"max rel err {out.max_rel_error:.2e} "
                              f"< {out.tol:g} over {out.checked} coords{kinks}", dt)
        else:
            res = CheckResult(name, out[0], out[1], dt)
        results.append(res)
        if verbose_print is not None:
            verbose_print(res.line())

    for name in sorted(PRIMITIVE_CASES):
        record(f"grad/{name}", lambda name=name: check_primitive(name))
    record("grad/lm_residual", check_lm_residual)
    record("grad/pipeline", check_pipeline)
    record("metrics/oracles", check_metric_oracles)
    record("augment/degeneracy", check_degeneracy)
    return results
