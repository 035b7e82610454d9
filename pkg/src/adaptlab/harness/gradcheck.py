"""Finite-difference verification battery for every loss and the VAT objective."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import nn
from ..vat import VatConfig, detached_objective, vat_augmented_objective, vat_direction

THRESHOLD = 1e-4
INSTANCES = 20
STEP = 1e-5
ARCHS = {
    "linear": ([6, 3], "identity"),
    "mlp-relu": ([6, 8, 3], "relu"),
    "mlp-tanh": ([6, 8, 3], "tanh"),
}
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    loss: str
    arch: str
    max_rel_err: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < THRESHOLD

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.loss:<20} {self.arch:<9} max_rel_err={self.max_rel_err:.3e} instances={self.instances}"


def _targets(loss, rng, n, C):
    if loss == "cross_entropy":
        return rng.integers(0, C, size=n)
    return rng.dirichlet(np.ones(C), size=n)


def _instance(arch, seed):
    """Random model and inputs; ReLU instances avoid pre-activations within a step of the kink."""
    widths, act = ARCHS[arch]
    rng = np.random.default_rng(seed)
    for attempt in range(100):
        model = nn.init_params(widths, act, "uniform", [*seed, attempt])
        # scale up so gradients are not dominated by the relative-error floor
        model = nn.MLP([(2 * W, b) for W, b in model.layers], act)
        x = rng.standard_normal((8, widths[0]))
        _, (_, pres) = nn.forward_cache(model, x)
        if act != "relu" or all(np.abs(p).min() > KINK_MARGIN for p in pres[:-1]):
            return model, x, rng
    raise RuntimeError("could not draw a kink-free instance")


def _compare(analytic, numeric, perturb):
    errs = []
    for a, n in zip(analytic, numeric):
        errs.append(nn.relative_error(a * (1.0 + perturb), n).max())
    return float(max(errs))


def check_loss(loss: str, arch: str, instances: int = INSTANCES, seed: int = 0, perturb: float = 0.0) -> CheckResult:
    worst = 0.0
    for i in range(instances):
        model, x, rng = _instance(arch, [seed, i])
        targets = _targets(loss, rng, x.shape[0], model.out_dim)
        grads, _ = nn.backward(model, x, loss, targets)
        params = [arr for layer in model.layers for arr in layer]
        numeric = nn.numeric_gradient(lambda: nn.loss_value(model, x, loss, targets), params, STEP)
        analytic = [arr for layer in grads.layers for arr in layer]
        worst = max(worst, _compare(analytic, numeric, perturb))
    return CheckResult(loss, arch, worst, instances)


def check_vat(instances: int = INSTANCES, seed: int = 0, perturb: float = 0.0) -> CheckResult:
    config = VatConfig(epsilon_rel=0.3, alpha=1.0)
    worst = 0.0
    for i in range(instances):
        head, z, rng = _instance("linear", [seed, 100 + i])
        labels = rng.integers(0, head.out_dim, size=z.shape[0])
        directions = vat_direction(head, z, config, [seed, 200 + i])
        _, grads = vat_augmented_objective(head, z, labels, config, directions=directions)
        params = [arr for layer in head.layers for arr in layer]
        clean = nn.softmax(nn.forward(head, z)[1])

        def objective():
            return detached_objective(head, z, labels, config, directions, clean)

        numeric = nn.numeric_gradient(objective, params, STEP)
        analytic = [arr for layer in grads.layers for arr in layer]
        worst = max(worst, _compare(analytic, numeric, perturb))
    return CheckResult("vat_objective", "linear", worst, instances)


def run_battery(instances: int = INSTANCES, seed: int = 0, perturb: float = 0.0) -> list[CheckResult]:
    """All (loss, architecture) checks. ``perturb`` scales the analytic
    gradients by ``1 + perturb``; it exists to confirm failures are detected."""
    results = []
    for loss in nn.LOSS_KINDS:
        for arch in ARCHS:
            results.append(check_loss(loss, arch, instances, seed, perturb))
    results.append(check_vat(instances, seed, perturb))
    return results


def cmd_gradcheck(instances: int = INSTANCES, seed: int = 0, perturb: float = 0.0, log=print) -> bool:
    start = time.perf_counter()
    results = run_battery(instances, seed, perturb)
    for r in results:
        log(r.line())
    ok = all(r.passed for r in results)
    passed = sum(r.passed for r in results)
    log(f"gradcheck: {passed}/{len(results)} checks passed in {time.perf_counter() - start:.2f}s (threshold {THRESHOLD:g})")
    return ok
