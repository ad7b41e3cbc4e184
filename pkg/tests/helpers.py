"""Independent oracles shared by the unit and acceptance suites."""
import math

import numpy as np

from deformwarp.layers import Sequential, layer_backward, layer_forward


def numeric_grad(f, x, step=1e-6):
    """Central differences of scalar f w.r.t. every entry of x (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def numeric_grad_at(f, x, indices, step=1e-6):
    """Central differences at selected multi-indices only."""
    out = []
    for i in indices:
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def rel_error(analytic, numeric, scale=None):
    """Max abs difference, relative to the largest gradient magnitude (or ``scale``)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = max(np.abs(numeric).max(), np.abs(analytic).max())
    return float(np.abs(analytic - numeric).max() / max(scale, 1e-12))


def joint_rel_error(pairs):
    """Relative error over several (analytic, numeric) tensors sharing one scale.

    Some parameters have an exactly zero gradient (a bias followed by instance
    norm); scaling each tensor by its own magnitude would measure pure
    finite-difference noise there.
    """
    scale = max(max(np.abs(a).max(), np.abs(n).max()) for a, n in pairs)
    return max(rel_error(a, n, scale) for a, n in pairs)


# -- geometry -------------------------------------------------------------------

def random_rectangle(rng, width, height):
    """Rotated rectangle with consecutive corners, centred somewhere near the image."""
    c = rng.uniform([-2, -2], [width + 2, height + 2])
    theta = rng.uniform(0, 2 * math.pi)
    a, b = rng.uniform(0.5, max(width, height) / 2, 2)
    u = np.array([math.cos(theta), math.sin(theta)])
    n = np.array([-u[1], u[0]])
    return np.array([c - a * u - b * n, c + a * u - b * n, c + a * u + b * n, c - a * u + b * n])


def halfplane_mask(corners, width, height):
    """Pixel (i, j) at (x=j, y=i) is inside when it lies on the inner side of all four edges."""
    corners = np.asarray(corners, dtype=np.float64)
    area2 = sum(corners[k, 0] * corners[(k + 1) % 4, 1] - corners[(k + 1) % 4, 0] * corners[k, 1]
                for k in range(4))
    orient = 1.0 if area2 > 0 else -1.0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    inside = np.ones((height, width), dtype=bool)
    for k in range(4):
        p, q = corners[k], corners[(k + 1) % 4]
        cross = (q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])
        inside &= orient * cross >= 0
    return inside.astype(np.uint8)


def shift_oracle(F, dx, dy):
    """out(x, y) = F(x - dx, y - dy), zero where the source is off the grid."""
    h, w = F.shape[:2]
    out = np.zeros_like(F)
    for y in range(h):
        for x in range(w):
            sy, sx = y - dy, x - dx
            if 0 <= sy < h and 0 <= sx < w:
                out[y, x] = F[sy, sx]
    return out


def random_affine(rng):
    """Well-conditioned affine parameters (a11, a12, tx, a21, a22, ty)."""
    while True:
        A = rng.uniform(-3, 3, (2, 2))
        if abs(np.linalg.det(A)) > 0.2:
            t = rng.uniform(-50, 50, 2)
            return np.array([A[0, 0], A[0, 1], t[0], A[1, 0], A[1, 1], t[1]])


def random_quad(rng):
    """Four corners of a random non-degenerate parallelogram."""
    while True:
        o = rng.uniform(-20, 20, 2)
        e1, e2 = rng.uniform(-15, 15, (2, 2))
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) > 1.0:
            return np.array([o, o + e1, o + e1 + e2, o + e2])


# -- nearest-neighbour loss -----------------------------------------------------

def tie_free_volumes(rng, shape, n, gap=1e-6):
    """Volume pair where each position's best window match beats the runner-up by > gap
    and no feature difference at that match is within gap of zero."""
    h, w, c = shape
    r = (n - 1) // 2
    while True:
        a = rng.normal(size=shape)
        b = rng.normal(size=shape)
        ok = True
        for y in range(h):
            for x in range(w):
                ds = []
                for i in range(-r, r + 1):
                    for j in range(-r, r + 1):
                        qy, qx = y + i, x + j
                        if 0 <= qy < h and 0 <= qx < w:
                            diff = a[y, x] - b[qy, qx]
                            ds.append((np.abs(diff).sum(), np.abs(diff).min()))
                ds.sort()
                if (len(ds) > 1 and ds[1][0] - ds[0][0] < gap) or ds[0][1] < gap:
                    ok = False
        if ok:
            return a, b


# -- layers ---------------------------------------------------------------------

def check_layer_grads(spec, params, x, rng_seed=0, mode="train", step=1e-6):
    """Max relative error over the input and every parameter for loss = sum(R * layer(x))."""
    inputs = x if isinstance(x, list) else [x]
    y, _ = layer_forward(spec, params, x, mode, np.random.default_rng(rng_seed))
    R = np.random.default_rng(99).normal(size=y.shape)

    def loss():
        out, _ = layer_forward(spec, params, x, mode, np.random.default_rng(rng_seed))
        return float((out * R).sum())

    _, ctx = layer_forward(spec, params, x, mode, np.random.default_rng(rng_seed))
    gx, gp = layer_backward(ctx, R)
    gxs = gx if isinstance(gx, list) else [gx]
    pairs = [(g, numeric_grad(loss, a, step)) for g, a in zip(gxs, inputs)]
    pairs += [(gp[k], numeric_grad(loss, params[k], step)) for k in params]
    return joint_rel_error(pairs)


def check_sequential_grads(seq: Sequential, params, x, rng_seed=0, step=1e-6):
    y, _ = seq.forward(params, x, "train", np.random.default_rng(rng_seed))
    R = np.random.default_rng(98).normal(size=y.shape)

    def loss():
        out, _ = seq.forward(params, x, "train", np.random.default_rng(rng_seed))
        return float((out * R).sum())

    _, ctxs = seq.forward(params, x, "train", np.random.default_rng(rng_seed))
    grads = {}
    gx = seq.backward(ctxs, R, grads)
    pairs = [(gx, numeric_grad(loss, x, step))]
    pairs += [(grads[k], numeric_grad(loss, params[k], step)) for k in params]
    return joint_rel_error(pairs)
