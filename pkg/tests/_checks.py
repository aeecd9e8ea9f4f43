"""Shared gradient-check helper for the test suite."""
import numpy as np

from occflow import numgrad as ng


def gradcheck(fn, *arrays, rtol=1e-4, atol=1e-6, step=1e-5):
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences.

    Returns the largest violation ratio (<= 1 means within tolerance).
    """
    leaves = [ng.Tensor(a, requires_grad=True) for a in arrays]
    with ng.Tape() as tape:
        root = fn(*leaves)
    grads = ng.backward(tape, root)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def partial(x, k=k):
            args = [ng.Tensor(a) for a in arrays]
            args[k] = x
            return fn(*args)
        fd = ng.finite_diff(partial, ng.Tensor(arrays[k]), step=step).data
        an = grads[leaf.id].data
        assert an.shape == fd.shape
        err = np.abs(an - fd) / (atol + rtol * np.maximum(np.abs(an), np.abs(fd)))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def assert_grads(fn, *arrays, **kw):
    worst = gradcheck(fn, *arrays, **kw)
    assert worst <= 1.0, f"gradient mismatch, worst ratio {worst:.3g}"


def march_first_hit(labels, grid, origin, direction, step_frac=1e-3, refine=60):
    """Brute-force first hit by fine point sampling along the ray.

    Samples every ``cell * step_frac`` metres (``direction`` is unit), then
    bisects the entry between the last empty and first occupied sample.
    Returns ``(t, voxel, label)`` or ``(inf, None, 255)``.
    """
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    dims = np.asarray(grid.dims)
    span = np.linalg.norm(grid.origin - origin) + np.linalg.norm(dims * grid.cell) + grid.cell
    h = grid.cell * step_frac

    def voxel_at(t):
        q = np.floor((origin + t * direction - grid.origin) / grid.cell).astype(np.int64)
        if np.all(q >= 0) and np.all(q < dims) and labels[tuple(q)] != 255:
            return tuple(int(x) for x in q)
        return None

    ts = np.arange(0.0, span, h)
    pts = origin + ts[:, None] * direction
    q = np.floor((pts - grid.origin) / grid.cell).astype(np.int64)
    inside = np.all((q >= 0) & (q < dims), axis=1)
    occ = np.zeros(ts.size, bool)
    occ[inside] = labels[tuple(q[inside].T)] != 255
    hits = np.nonzero(occ)[0]
    if hits.size == 0:
        return np.inf, None, 255
    k = hits[0]
    if k == 0:
        v = voxel_at(0.0)
        return 0.0, v, int(labels[v])
    lo, hi = ts[k - 1], ts[k]
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        if voxel_at(mid) is None:
            lo = mid
        else:
            hi = mid
    v = voxel_at(hi)
    return hi, v, int(labels[v])
