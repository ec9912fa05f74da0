"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    rows: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def failures(self):
        return [r.name for r in self.rows if not r.passed]

    def table(self):
        width = max([len(r.name) for r in self.rows] + [9])
        lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  {'entries':>7}  status"]
        for r in self.rows:
            status = "ok" if r.passed else "FAIL"
            lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.checked:7d}  {status}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f, params, h=1e-5, tol=1e-4, names=None, max_entries=None, seed=0, floor=1e-6):
    """Compare backward() against central differences for every named parameter.

    ``f(params)`` must return a scalar Tensor and be deterministic.  When
    ``max_entries`` is set, that many entries per parameter are sampled.
    Failures are reported, never raised.
    """
    params.zero_grad()
    loss = f(params)
    loss.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name in names or params.names():
        p = params[name]
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params).item()
            flat[i] = orig - h
            down = f(params).item()
            flat[i] = orig
            numeric[n] = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[idx]
        rel = relative_error(a, numeric, floor)
        max_rel = float(rel.max()) if rel.size else 0.0
        max_abs = float(np.abs(a - numeric).max()) if rel.size else 0.0
        report.rows.append(ParamCheck(name, max_rel, max_abs, int(idx.size), max_rel < tol))
    params.zero_grad()
    return report
