"""Finite-difference gradient oracle.

Independent of the tape: it only calls the function forward and compares the
central difference (f(x+h) - f(x-h)) / 2h against whatever the tape produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    finite: bool = True


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        errs = [e.max_rel_err for e in self.entries if e.finite]
        return max(errs) if errs else float("nan")

    @property
    def all_finite(self) -> bool:
        return all(e.finite for e in self.entries)

    def passed(self, tol: float) -> bool:
        return self.all_finite and bool(self.entries) and self.max_rel_err < tol

    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: (not e.finite, e.max_rel_err))


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # floor keeps finite-difference noise on near-zero gradients from
    # registering as huge relative errors
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-2)
    return np.abs(a - b) / scale


def grad_check(f: Callable[[], Tensor],
               params: Mapping[str, Tensor] | Sequence[tuple[str, Tensor]],
               h: float = 1e-5,
               tol: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``params`` maps names to the leaf tensors perturbed; ``f`` must read the
    current ``.data`` of those leaves on every call.  Non-finite values are
    reported per entry rather than raised.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    for _, p in items:
        p.zero_grad()
    with np.errstate(all="ignore"):
        loss = f()
        loss.backward()
    tape_grads = {name: (None if p.grad is None else p.grad.copy())
                  for name, p in items}

    report = GradCheckReport()
    for name, p in items:
        tg = tape_grads[name]
        if tg is None:
            tg = np.zeros_like(p.data)
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fdflat = fd.reshape(-1)
        finite = True
        for i in range(flat.size):
            orig = flat[i]
            with np.errstate(all="ignore"):
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            d = (fp - fm) / (2.0 * h)
            if not np.isfinite(d):
                finite = False
            fdflat[i] = d
        if not (np.all(np.isfinite(tg)) and finite):
            report.entries.append(GradCheckEntry(name, float("nan"), float("nan"),
                                                 finite=False))
            continue
        rel = _rel_err(tg, fd)
        report.entries.append(GradCheckEntry(name, float(rel.max()),
                                             float(np.abs(tg - fd).max())))
    return report
