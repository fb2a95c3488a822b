"""Central finite-difference checks for scalar losses of Tensor parameters."""
import numpy as np

from gct import numerics as nx


def analytic_grads(loss_fn, params: dict) -> dict:
    for p in params.values():
        p.zero_grad()
    nx.backward(loss_fn())
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}


def max_rel_error(loss_fn, params: dict, n_probe: int = 6, eps: float = 1e-6, seed: int = 0,
                  floor: float = 1e-6) -> tuple[float, str]:
    """Worst |numeric - analytic| / max(|numeric| + |analytic|, floor) over probed entries."""
    grads = analytic_grads(loss_fn, params)
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for name, p in params.items():
        flat = p.value.reshape(-1)
        g = grads[name].reshape(-1)
        nonzero = np.flatnonzero(g)
        picks = set(rng.choice(flat.size, size=min(n_probe, flat.size), replace=False).tolist())
        if nonzero.size:
            picks |= set(rng.choice(nonzero, size=min(n_probe, nonzero.size), replace=False).tolist())
        for i in sorted(picks):
            old = flat[i]
            flat[i] = old + eps
            up = float(loss_fn().value)
            flat[i] = old - eps
            down = float(loss_fn().value)
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            err = abs(numeric - g[i]) / max(abs(numeric) + abs(g[i]), floor)
            if err > worst:
                worst, where = err, f"{name}[{i}]: numeric {numeric!r} analytic {g[i]!r}"
    return worst, where
