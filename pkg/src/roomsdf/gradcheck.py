"""Central finite-difference gradient checking.

Used by the test suite and by the ``gradcheck`` CLI command. The checks run on
miniature instances whose seeds were picked so no evaluation point sits within
the step size of a nondifferentiable switch (argmin changes, hinge boundaries).
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest |a-n| / max(|a|,|n|,floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_scalar_graph(build, leaves, h: float = 1e-4) -> float:
    """Compare reverse-mode grads of build(leaves)->scalar Tensor against FD.

    ``build`` must be a pure function of the leaf values. Returns the worst
    relative error across all leaf entries.
    """
    out = build(leaves)
    _, grads = ad.eval_and_grad(out, leaves)
    worst = 0.0
    for leaf, g in zip(leaves, grads):

        def f_of(x, leaf=leaf):
            saved = leaf.data
            leaf.data = x
            try:
                return float(build(leaves).data)
            finally:
                leaf.data = saved

        num = numeric_grad(f_of, leaf.data.copy(), h=h)
        worst = max(worst, max_rel_err(g, num))
    return worst


def _random_graph_check(seed: int) -> float:
    """Randomized op-soup graph of depth <= 8 vs central differences."""
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.uniform(0.3, 1.2, size=(4, 3)), requires_grad=True)
    y = ad.Tensor(rng.uniform(0.3, 1.2, size=(4, 3)), requires_grad=True)
    w = ad.Tensor(rng.normal(0, 0.7, size=(3, 5)), requires_grad=True)

    def build(leaves):
        x, y, w = leaves
        a = ad.mul(x, y) + ad.sin(x)
        b = ad.softplus(a - 0.5) * ad.sigmoid(y)
        c = ad.matmul(b, w)
        d = ad.minimum(c, ad.exp(-c))
        e = ad.absolute(d) + ad.sqrt(ad.square(c) + 1.0)
        f = ad.concat([e, ad.relu(c)], axis=-1)
        return ad.reduce_mean(ad.log(f + 2.0)) + ad.reduce_sum(ad.maximum(d, 0.1))

    return check_scalar_graph(build, [x, y, w])


def _mlp_check(seed: int, hidden: int = 16) -> float:
    """3-layer softplus MLP, scalar L2 output head, grads vs FD."""
    rng = np.random.default_rng(seed)
    dims = [(3, hidden), (hidden, hidden), (hidden, 1)]
    leaves = []
    for din, dout in dims:
        leaves.append(ad.Tensor(rng.normal(0, 1.0 / np.sqrt(din), (din, dout)),
                                requires_grad=True))
        leaves.append(ad.Tensor(rng.normal(0, 0.1, (dout,)), requires_grad=True))
    xin = rng.normal(0, 1, size=(5, 3))

    def build(leaves):
        h = ad.constant(xin)
        for i in range(0, len(leaves), 2):
            h = ad.matmul(h, leaves[i]) + leaves[i + 1]
            if i < len(leaves) - 2:
                h = ad.softplus(h)
        return ad.reduce_sum(ad.square(h))

    return check_scalar_graph(build, leaves)


def run_autodiff_suite(seed: int = 0):
    """The raw-graph part of the gradient suite (1e-4 relative tolerance)."""
    results = []
    for i in range(3):
        results.append((f"random_graph_{i}", _random_graph_check(seed + i), 1e-4))
    results.append(("mlp_16", _mlp_check(seed + 7), 1e-4))
    return results


def run_full_suite(seed: int = 0, verbose: bool = True) -> bool:
    """Autodiff graphs at 1e-4 plus every loss and a full train step at 1e-3.

    Returns True when everything is within tolerance; prints one line per
    check when verbose.
    """
    from .trainer import loss_gradient_checks

    t0 = time.time()
    results = list(run_autodiff_suite(seed))
    results += loss_gradient_checks(seed)
    ok = True
    for name, err, tol in results:
        good = err < tol
        ok = ok and good
        if verbose:
            print(f"{'PASS' if good else 'FAIL'} {name}: max rel err {err:.3e} (tol {tol:.0e})")
    if verbose:
        print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return ok
