"""Finite-difference validation of the analytic gradients.

Runs the full pipeline in wide precision on a seeded synthetic scene,
takes the squared-error reconstruction loss, and compares the tape's
gradients against central differences on a random sample of coordinates
of every parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .dmff import DmffConfig, dmff_fuse, init_dmff_weights, replace_parameters
from .synth import SyntheticPairSpec, gen_synthetic_pair
from .tensor_core import Tensor
from .train import squared_error_loss

REL_ERR_FLOOR = 1e-6


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    coords_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


@dataclass
class GradCheckReport:
    checks: list
    eps: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.passed(self.tol) for c in self.checks)

    def worst(self) -> TensorCheck:
        return max(self.checks, key=lambda c: c.max_rel_err)

    def format(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"gradient check: eps={self.eps:g} tol={self.tol:g}"]
        for c in sorted(self.checks, key=lambda c: c.name):
            status = "ok" if c.passed(self.tol) else "FAIL"
            lines.append(
                f"  {c.name:<{width}}  max_rel_err={c.max_rel_err:.3e}  "
                f"coords={c.coords_checked}  {status}"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_ERR_FLOOR)


def grad_check(cfg: DmffConfig, synth: SyntheticPairSpec | None = None,
               seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
               min_samples: int = 20, weights=None, _grad_hook=None) -> GradCheckReport:
    """Compare analytic and numeric gradients tensor by tensor.

    `weights` overrides the freshly initialized parameter set (they must be
    wide precision).  ``_grad_hook`` is a fault-injection point for the
    checker's own tests: it receives and may replace the analytic record.
    """
    if synth is None:
        synth = SyntheticPairSpec(seed=seed)
    rng = np.random.default_rng(seed)
    if weights is None:
        wts = init_dmff_weights(cfg, synth.h, synth.w, synth.c, rng, dtype=tc.WIDE)
    else:
        wts = weights
        for name, t in wts.named_tensors():
            if t.dtype != np.dtype(tc.WIDE):
                raise tc.ConfigurationError(
                    f"gradient checking needs wide precision, {name} is {t.dtype}"
                )
    f_r, f_t, target = gen_synthetic_pair(synth, dtype=tc.WIDE)

    def loss_of(weights) -> float:
        out = dmff_fuse(f_r, f_t, cfg, weights)
        d = out.primary.data - target.data
        return float((d * d).mean())

    params = dict(wts.named_tensors())
    tape = tc.Tape()
    tape.watch_all(params.items())
    with tc.record_on(tape):
        out = dmff_fuse(f_r, f_t, cfg, wts)
        loss = squared_error_loss(out.primary, target)
    record = tc.backward(tc.scalar(1.0, dtype=tc.WIDE), tape, loss)
    if _grad_hook is not None:
        record = _grad_hook(record)

    coord_rng = np.random.default_rng(seed + 1)
    checks = []
    for name, tensor in params.items():
        analytic_t = record.get(name)
        analytic = (np.zeros(tensor.shape) if analytic_t is None
                    else np.asarray(analytic_t.data))
        size = tensor.size
        n_coords = min(min_samples, size)
        coords = coord_rng.choice(size, size=n_coords, replace=False)
        worst = 0.0
        flat = tensor.data.reshape(-1)
        for idx in coords:
            bumped = flat.copy()
            bumped[idx] = flat[idx] + eps
            plus = loss_of(replace_parameters(
                wts, {name: Tensor._wrap(bumped.reshape(tensor.shape))}))
            bumped = flat.copy()
            bumped[idx] = flat[idx] - eps
            minus = loss_of(replace_parameters(
                wts, {name: Tensor._wrap(bumped.reshape(tensor.shape))}))
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, _rel_err(float(analytic.reshape(-1)[idx]), numeric))
        checks.append(TensorCheck(name=name, max_rel_err=worst, coords_checked=n_coords))
    return GradCheckReport(checks=checks, eps=eps, tol=tol)
