"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from cdnrec.numerics.tape import Node, ParamStore, Tape


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    tolerance: float
    worst: tuple[str, tuple[int, ...]] | None = None
    skipped: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tolerance


def _masks_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    closure: Callable[[Tape], Node],
    store: ParamStore,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``closure`` with central differences.

    Coordinates are spread over every slot; within a slot, coordinates with a
    nonzero analytic gradient are preferred so the check is not dominated by
    untouched embedding rows.  A coordinate is skipped when either probe
    flips any relu activation, since the loss is not differentiable there.

    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    store.zero_grad()
    tape = Tape(store)
    loss = closure(tape)
    tape.backward(loss)
    analytic = {k: g.copy() for k, g in store.grads.items()}
    base_masks = tape.relu_masks
    store.zero_grad()

    names = store.names()
    per_slot = max(1, -(-n_coords // max(len(names), 1)))
    coords: list[tuple[str, int]] = []
    for name in names:
        flat = analytic[name].reshape(-1)
        nz = np.flatnonzero(flat)
        pool = nz if nz.size else np.arange(flat.size)
        take = min(per_slot, pool.size)
        coords.extend((name, int(i)) for i in rng.choice(pool, size=take, replace=False))

    def evaluate() -> tuple[float, list[np.ndarray]]:
        t = Tape(store)
        value = closure(t).value.item()
        return value, t.relu_masks

    max_err = 0.0
    worst = None
    skipped = []
    checked = 0
    for name, flat_idx in coords:
        p = store.params[name]
        idx = np.unravel_index(flat_idx, p.shape)
        orig = p[idx]
        p[idx] = orig + epsilon
        f_plus, m_plus = evaluate()
        p[idx] = orig - epsilon
        f_minus, m_minus = evaluate()
        p[idx] = orig
        if not (_masks_equal(m_plus, base_masks) and _masks_equal(m_minus, base_masks)):
            skipped.append((name, tuple(int(i) for i in idx)))
            continue
        numeric = (f_plus - f_minus) / (2 * epsilon)
        a = analytic[name][idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        checked += 1
        if err > max_err or worst is None:
            max_err = max(max_err, err)
            worst = (name, tuple(int(i) for i in idx))
    return GradCheckReport(max_err, checked, len(skipped), tolerance, worst, skipped)
