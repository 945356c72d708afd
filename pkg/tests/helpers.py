"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from scenedm import tensor as tn


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b))
    return float(num / den) if den > 0 else float(num)


def check_op_grad(build, inputs: list[np.ndarray], rng: np.random.Generator, h: float = 1e-6) -> float:
    """Worst relative error over inputs between backward and central differences.

    ``build(*tensors)`` returns a tensor; the scalar probed is its dot product
    with a fixed random weight, which exercises every output element.
    """
    leaves = [tn.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(*leaves)
    w = rng.standard_normal(out.shape)

    def value() -> float:
        with tn.no_grad():
            return float(np.sum(build(*leaves).data * w))

    loss = tn.sum_all(tn.mul(out, tn.Tensor(w)))
    tn.backward(loss)
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(value, leaf.data, h)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


# --------------------------------------------------------------------------
# random op instances for gradient checks


def _shape(rng, ndim_lo=1, ndim_hi=3, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=int(rng.integers(ndim_lo, ndim_hi + 1))))


def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_case(kind: str, rng: np.random.Generator):
    """(build, inputs) for one random instance of an op kind."""
    if kind in ("add", "sub", "mul"):
        s = _shape(rng)
        fn = {"add": tn.add, "sub": tn.sub, "mul": tn.mul}[kind]
        return fn, [rng.standard_normal(s), rng.standard_normal(s)]
    if kind == "scalar_mul":
        c = float(rng.uniform(-3, 3))
        return (lambda a: tn.scalar_mul(a, c)), [rng.standard_normal(_shape(rng))]
    if kind == "matmul":
        m, k, n = rng.integers(1, 5, size=3)
        if rng.random() < 0.5:
            lead = _shape(rng, 0, 2)
            return tn.matmul, [rng.standard_normal(lead + (m, k)), rng.standard_normal((k, n))]
        lead = _shape(rng, 1, 2)
        return tn.matmul, [rng.standard_normal(lead + (m, k)), rng.standard_normal(lead + (k, n))]
    if kind == "transpose":
        s = _shape(rng, 2, 4)
        axes = tuple(int(a) for a in rng.permutation(len(s)))
        return (lambda a: tn.transpose(a, axes)), [rng.standard_normal(s)]
    if kind == "reshape":
        s = _shape(rng, 2, 3)
        return (lambda a: tn.reshape(a, (int(np.prod(s)),))), [rng.standard_normal(s)]
    if kind == "concat_last_axis":
        lead = _shape(rng, 0, 2)
        parts = [rng.standard_normal(lead + (int(rng.integers(1, 4)),)) for _ in range(int(rng.integers(2, 4)))]
        return (lambda *ts: tn.concat_last_axis(ts)), parts
    if kind == "slice_last_axis":
        s = _shape(rng, 1, 3, 2, 5)
        a = int(rng.integers(0, s[-1] - 1))
        b = int(rng.integers(a + 1, s[-1] + 1))
        return (lambda t: tn.slice_last_axis(t, a, b)), [rng.standard_normal(s)]
    if kind == "softmax_last_axis":
        return tn.softmax_last_axis, [rng.standard_normal(_shape(rng, 1, 3, 2, 5))]
    if kind == "layer_norm":
        return tn.layer_norm, [rng.standard_normal(_shape(rng, 1, 3, 2, 6))]
    if kind == "relu":
        return tn.relu, [_away_from_zero(rng, _shape(rng))]
    if kind == "abs_mean":
        return tn.abs_mean, [_away_from_zero(rng, _shape(rng))]
    if kind in ("gelu", "sin", "cos", "mean_all", "sum_all"):
        return getattr(tn, kind), [rng.standard_normal(_shape(rng))]
    if kind == "mse":
        s = _shape(rng)
        return tn.mse, [rng.standard_normal(s), rng.standard_normal(s)]
    if kind == "embedding_lookup":
        v, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        idx = rng.integers(0, v, size=_shape(rng, 1, 2))
        return (lambda t: tn.embedding_lookup(t, idx)), [rng.standard_normal((v, d))]
    if kind == "masked_fill":
        s = _shape(rng)
        mask = rng.random(s) < 0.4
        return (lambda t: tn.masked_fill(t, mask, -7.0)), [rng.standard_normal(s)]
    if kind == "broadcast_to":
        s = _shape(rng, 1, 3)
        src = tuple(1 if rng.random() < 0.5 else n for n in s)
        lead = _shape(rng, 0, 1)
        return (lambda t: tn.broadcast_to(t, lead + s)), [rng.standard_normal(src)]
    if kind == "max_axis":
        s = _shape(rng, 1, 3, 2, 4)
        ax = int(rng.integers(0, len(s)))
        # distinct values keep the arg-max away from ties
        x = rng.permutation(int(np.prod(s))).reshape(s) * 0.1 + rng.uniform(0, 0.01, size=s)
        return (lambda t: tn.max_axis(t, ax)), [x]
    raise KeyError(kind)


def model_grad_error(n_params: int = 30, seed: int = 0, h: float = 1e-6) -> float:
    """Relative error between backward and central differences of the hybrid
    loss on ``n_params`` random parameter scalars of an untrained tiny model."""
    from scenedm.data import GenSpec, gen_data
    from scenedm.model import DenoiserConfig, SceneDM
    from scenedm.schedule import make_schedule
    from scenedm.training import TrainConfig, build_training_set, compute_losses

    cfg = DenoiserConfig(D=8, blocks=1, heads=2, K=10, T=5, H=3, n_max=3, t_hist=2, n_polylines=2, poly_points=3)
    scenes = gen_data(GenSpec(n_scenes=3, n_agents_range=(2, 3), t_hist=cfg.t_hist, t_fut=cfg.T, seed=1))
    feats, z = build_training_set(scenes, cfg).batch(np.arange(3))
    sched = make_schedule("linear", cfg.K)
    model = SceneDM(cfg, seed=11)
    tcfg = TrainConfig(lam=1.0)

    def loss() -> tn.Tensor:
        return compute_losses(model, feats, z, np.random.default_rng(5), sched, tcfg)[0]

    model.zero_grad()
    loss().backward()
    params = model.named_parameters()
    names = sorted(params)
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for i in rng.integers(len(names), size=n_params):
        p = params[names[i]]
        j = int(rng.integers(p.data.size))
        flat = p.data.reshape(-1)
        old = flat[j]
        with tn.no_grad():
            flat[j] = old + h
            up = loss().item()
            flat[j] = old - h
            dn = loss().item()
        flat[j] = old
        numeric.append((up - dn) / (2 * h))
        analytic.append(p.grad.reshape(-1)[j])
    return rel_err(np.array(analytic), np.array(numeric))


# --------------------------------------------------------------------------
# box geometry oracles, independent of the separating-axis code


def _frame(h: float) -> tuple[np.ndarray, np.ndarray]:
    return np.array([np.cos(h), np.sin(h)]), np.array([-np.sin(h), np.cos(h)])


def box_grid(c, h, l, w, n: int = 200) -> np.ndarray:
    """n x n points covering a box, boundary included."""
    u, v = _frame(h)
    s, t = np.meshgrid(np.linspace(-l / 2, l / 2, n), np.linspace(-w / 2, w / 2, n))
    return np.asarray(c) + s.reshape(-1, 1) * u + t.reshape(-1, 1) * v


def inside(points: np.ndarray, c, h, l, w) -> np.ndarray:
    u, v = _frame(h)
    d = points - np.asarray(c)
    return (np.abs(d @ u) < l / 2) & (np.abs(d @ v) < w / 2)


def grid_overlap(a: tuple, b: tuple, n: int = 200) -> bool:
    """Overlap by sampling: any grid point of one box strictly inside the other."""
    return bool(inside(box_grid(*a, n=n), *b).any() or inside(box_grid(*b, n=n), *a).any())


def grid_resolution(a: tuple, b: tuple, n: int = 200) -> float:
    return max(a[2], a[3], b[2], b[3]) / (n - 1)


def corners(c, h, l, w) -> np.ndarray:
    u, v = _frame(h)
    return np.array([np.asarray(c) + sx * l / 2 * u + sy * w / 2 * v for sx in (1, -1) for sy in (1, -1)])


def minkowski_depth(a: tuple, b: tuple) -> float:
    """Minimum translation separating two overlapping boxes: distance from the
    origin to the boundary of the hull of all corner differences."""
    from scipy.spatial import ConvexHull

    pts = (corners(*a)[:, None, :] - corners(*b)[None, :, :]).reshape(-1, 2)
    hull = ConvexHull(pts)
    # facet equations n.x + d <= 0 inside; origin distance to facet is -d
    return float(np.min(-hull.equations[:, 2]))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line
