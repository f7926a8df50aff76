"""Central finite-difference validation of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    n_checked: int = 0
    tol: float = 1e-4
    skipped_frozen: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def worst(self, n=5):
        return sorted(self.per_param.items(), key=lambda kv: -kv[1])[:n]


def relative_error(analytic, numeric, floor=1e-7):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries meaningful."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_diff_check(f, params, h=1e-5, tol=1e-4, max_entries=None, rng=None, floor=1e-7):
    """Compare each parameter's ``.grad`` with central differences of ``f``.

    ``f`` is a zero-argument callable returning the scalar loss computed from
    the current parameter values; gradients must already be populated by the
    caller's backward pass at the same point. Frozen parameters are left out.
    ``max_entries`` caps how many entries per parameter are probed (all by
    default). Failures are reported, never raised.
    """
    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    rng = np.random.default_rng(0) if rng is None else rng
    for name, p in params.items():
        if p.frozen:
            report.skipped_frozen.append(name)
            continue
        if p.value.dtype != np.float64:
            raise TypeError(f"gradient check needs float64 parameters ({name} is {p.value.dtype})")
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1).copy()
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * h)
        err = float(relative_error(analytic[idx], numeric, floor).max()) if len(idx) else 0.0
        report.per_param[name] = err
        report.n_checked += len(idx)
        report.max_rel_err = max(report.max_rel_err, err)
    return report
