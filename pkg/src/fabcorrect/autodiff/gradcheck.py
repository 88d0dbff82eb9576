"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import NumericError
from .ops import trace_kinks
from .tensor import Tensor, default_dtype, precision

GraphBuilder = Callable[[], tuple[Mapping[str, Tensor], Callable[[Tensor], Tensor]]]


@dataclass
class ParamReport:
    name: str
    status: str  # "ok", "fail" or "skipped (frozen)"
    max_rel_error: float = 0.0
    n_checked: int = 0
    n_refined: int = 0
    n_kink_skipped: int = 0


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    params: list[ParamReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.status != "fail" for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for p in self.params:
            if p.status.startswith("skipped"):
                out.append(f"{p.name:40s} {p.status}")
            else:
                out.append(
                    f"{p.name:40s} {p.status:4s} max_rel={p.max_rel_error:.3e} n={p.n_checked}"
                    f" refined={p.n_refined} kink_skipped={p.n_kink_skipped}"
                )
        return out


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    graph_builder: GraphBuilder,
    input_shape: tuple[int, ...],
    epsilon: float = 1e-3,
    tolerance: float = 1e-2,
    seed: int = 0,
    check_input: bool = True,
    max_entries: int | None = None,
    oracle_dtype=np.float64,
    max_refinements: int = 3,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``graph_builder`` returns ``(params, loss_fn)``: the named parameters to
    check and a function mapping an input tensor to a scalar loss. The input
    is drawn from a standard normal under ``seed``. Parameters with
    ``requires_grad=False`` are reported as frozen and skipped. With
    ``max_entries`` only that many entries per tensor (chosen by the seed)
    are perturbed.

    A difference quotient is only meaningful when the stencil stays inside
    one smooth piece of the loss. Each evaluation records the branch
    decisions of ReLU and max-pool; when either side of the stencil changes
    them, the step is shrunk tenfold (at most ``max_refinements`` times)
    until both sides stay on the unperturbed piece. Such entries are
    counted in ``n_refined``; entries that never settle are counted in
    ``n_kink_skipped`` rather than compared.

    The analytic gradients come from the engine at its storage precision.
    The difference quotients are evaluated on ``oracle_dtype`` copies of the
    same parameter values (float64 by default); pass ``None`` to evaluate
    them at storage precision as well.
    """
    params, loss_fn = graph_builder()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(input_shape), requires_grad=check_input, name="<input>")

    for p in params.values():
        p.zero_grad()
    loss = loss_fn(x)
    loss.backward()

    report = GradCheckReport(epsilon, tolerance)
    targets: list[tuple[str, Tensor]] = list(params.items())
    if check_input:
        targets.append(("<input>", x))

    storage = {id(t): t.data for _, t in targets}
    dtype = oracle_dtype or default_dtype()
    for _, t in targets:
        t.data = t.data.astype(dtype)
    try:
        with precision(dtype):
            with trace_kinks() as base_trace:
                loss_fn(x)
            _perturb_all(
                report, targets, loss_fn, x, base_trace, epsilon, rng, max_entries, max_refinements
            )
    finally:
        for _, t in targets:
            t.data = storage[id(t)]
    for entry in report.params:
        if entry.max_rel_error > tolerance:
            entry.status = "fail"
    return report


def _perturb_all(
    report, targets, loss_fn, x, base_trace, epsilon, rng, max_entries, max_refinements
) -> None:
    def evaluate(name: str) -> tuple[float, bool]:
        with trace_kinks() as trace:
            value = float(loss_fn(x).data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss while perturbing {name}")
        same = len(trace) == len(base_trace) and all(
            np.array_equal(a, b) for a, b in zip(trace, base_trace)
        )
        return value, same

    for name, t in targets:
        if not t.requires_grad:
            report.params.append(ParamReport(name, "skipped (frozen)"))
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        if not np.isfinite(analytic).all():
            raise NumericError(f"non-finite analytic gradient for {name}")
        analytic = analytic.reshape(-1)
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        entry = ParamReport(name, "ok")
        for i in indices:
            orig = flat[i]
            numeric = None
            for refine in range(max_refinements + 1):
                eps = epsilon * 10.0**-refine
                flat[i] = orig + eps
                up_step = float(flat[i]) - float(orig)
                up, up_smooth = evaluate(name)
                flat[i] = orig - eps
                down_step = float(orig) - float(flat[i])
                down, down_smooth = evaluate(name)
                flat[i] = orig
                if up_smooth and down_smooth:
                    numeric = (up - down) / (up_step + down_step)
                    entry.n_refined += refine > 0
                    break
            if numeric is None:
                entry.n_kink_skipped += 1
                continue
            entry.n_checked += 1
            entry.max_rel_error = max(entry.max_rel_error, float(relative_error(analytic[i], numeric)))
        report.params.append(entry)
