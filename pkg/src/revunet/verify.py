"""Verification suites: round-trips, naive-oracle comparisons, finite
differences, and store-all vs reversible gradient equivalence.

Relative errors are |a - b| / max(|a|, |b|, floor) per coordinate; the
floor keeps coordinates whose true gradient is below measurement noise
from dominating. Every suite is deterministic given its seed.
"""

import contextlib

import numpy as np

from . import ops, reference
from .engine import Tape
from .rng import rng_for
from .training import soft_dice_loss
from .unet import PRESETS, TOY_ANALOG, UNetConfig, build, resolve_config

TOY_PRESETS = tuple(name for name in sorted(PRESETS) if name.endswith("-toy"))

# the 2-level instance used for network-scale gradient checks
TOY2 = UNetConfig(widths=(4, 8), image_size=(8, 8, 8), block_kind="mbconv", expand_ratio=2)

FD_STEP = 1e-5
FD_FLOOR = 1e-3


def _entry(name, err, tol):
    return {"check": name, "max_err": float(err), "tol": float(tol), "pass": bool(err <= tol)}


def _rel(a, b, floor=1e-30):
    """Max-norm relative error; immune to cancellation at single coordinates."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()), floor)
    return float(np.abs(a - b).max()) / scale


def roundtrip_suite(config_spec, seeds, precision="double", tol=1e-10):
    """Invert every reversible block of the model on random data, worst case."""
    config = resolve_config(config_spec)
    worst = 0.0
    for seed in seeds:
        model = build(config, seed, precision)
        gen = rng_for(seed, "roundtrip-input")
        h = gen.standard_normal((1, config.in_ch) + tuple(config.image_size),
                                dtype=model.dtype)
        for i, lvl in enumerate(model.enc):
            a = lvl.raise_.forward(h, None)
            y = lvl.rev.forward(a, None)
            worst = max(worst, float(np.abs(lvl.rev.inverse(y) - a).max()))
            h = lvl.pool.forward(y, None) if lvl.pool is not None else y
    name = config_spec if isinstance(config_spec, str) else "custom"
    return _entry("roundtrip.%s" % name, worst, tol)


def oracle_suite(seed, tol=1e-12):
    """Compare every vectorized forward against its naive reference."""
    gen = rng_for(seed, "oracle")
    checks = []

    x = gen.standard_normal((1, 2, 4, 4, 4))
    w = gen.standard_normal((3, 2, 3, 3, 3))
    b = gen.standard_normal(3)
    checks.append(_entry("oracle.conv3d",
                         _rel(ops.conv3d(x, w, b), reference.conv3d_loops(x, w, b)), tol))

    wp = gen.standard_normal((3, 2, 1, 1, 1))
    fast = ops.pointwise_conv3d(x, wp, b)
    checks.append(_entry("oracle.pointwise",
                         _rel(fast, reference.conv3d_loops(x, wp, b)), tol))
    bitwise = np.array_equal(fast, ops.conv3d(x, wp, b))
    checks.append(_entry("oracle.pointwise_equals_conv3d_bitwise",
                         0.0 if bitwise else 1.0, 0.0))

    xd = gen.standard_normal((1, 3, 4, 4, 4))
    wd = gen.standard_normal((3, 1, 3, 3, 3))
    checks.append(_entry("oracle.depthwise",
                         _rel(ops.depthwise_conv3d(xd, wd),
                              reference.depthwise_conv3d_loops(xd, wd)), tol))

    xm = gen.standard_normal((1, 2, 4, 4, 4))
    pooled, _ = ops.maxpool3d(xm)
    exact = np.array_equal(pooled, reference.maxpool3d_loops(xm))
    checks.append(_entry("oracle.maxpool", 0.0 if exact else 1.0, 0.0))

    xg = gen.standard_normal((1, 4, 3, 3, 3))
    gamma = gen.standard_normal(4)
    beta = gen.standard_normal(4)
    out, xhat, _ = ops.group_norm(xg, gamma, beta, group_size=2)
    means, variances = reference.group_norm_stats(xhat, group_size=2)
    checks.append(_entry("oracle.groupnorm_mean", np.abs(means).max(), 1e-6))
    checks.append(_entry("oracle.groupnorm_var", np.abs(variances - 1.0).max(), 1e-4))
    m0, v0 = reference.group_norm_stats(xg, group_size=2)
    direct = ((xg.reshape(1, 2, 2, 3, 3, 3)
               - m0.reshape(1, 2, 1, 1, 1, 1))
              / np.sqrt(v0.reshape(1, 2, 1, 1, 1, 1) + 1e-5)).reshape(xg.shape)
    direct = gamma.reshape(1, 4, 1, 1, 1) * direct + beta.reshape(1, 4, 1, 1, 1)
    checks.append(_entry("oracle.groupnorm_out", _rel(out, direct), tol))

    xu = gen.standard_normal((1, 2, 2, 3, 4))
    checks.append(_entry("oracle.upsample",
                         _rel(ops.trilinear_upsample(xu),
                              reference.trilinear_upsample_points(xu)), tol))

    sep_p = gen.standard_normal((3, 2, 1, 1, 1))
    sep_d = gen.standard_normal((2, 1, 3, 3, 3))
    composed = ops.pointwise_conv3d(ops.depthwise_conv3d(x, sep_d), sep_p)
    fused = sep_p[:, :, 0, 0, 0][:, :, None, None, None] * sep_d[None, :, 0]
    checks.append(_entry("oracle.separability",
                         _rel(composed, ops.conv3d(x, fused)), tol))
    return checks


def _fd_scalar(f, arrays, coords, analytic, tol, floor=FD_FLOOR):
    """Worst relative error of central differences vs analytic over coords."""
    worst = 0.0
    for arr_i, flat_j in coords:
        arr = arrays[arr_i]
        orig = arr.flat[flat_j]
        arr.flat[flat_j] = orig + FD_STEP
        hi = f()
        arr.flat[flat_j] = orig - FD_STEP
        lo = f()
        arr.flat[flat_j] = orig
        fd = (hi - lo) / (2.0 * FD_STEP)
        worst = max(worst, float(reference.relative_error(
            analytic[arr_i].flat[flat_j], fd, floor=floor)))
    return worst


def _sample_coords(gen, arrays, count):
    all_coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    take = min(count, len(all_coords))
    picked = gen.choice(len(all_coords), size=take, replace=False)
    return [all_coords[int(k)] for k in picked]


def fd_primitive_suite(seed, tol=1e-6, coords_per_op=120):
    """Central-difference check of every primitive VJP in isolation (double)."""
    gen = rng_for(seed, "fd")
    checks = []

    def run(name, arrays, forward, backward):
        r = gen.standard_normal(forward().shape)

        def scalar():
            return float((forward() * r).sum())

        analytic = backward(r)
        if not isinstance(analytic, (list, tuple)):
            analytic = [analytic]
        coords = _sample_coords(gen, arrays, coords_per_op)
        checks.append(_entry("fd." + name,
                             _fd_scalar(scalar, arrays, coords, analytic, tol), tol))

    x = gen.standard_normal((1, 2, 5, 5, 5))
    w = gen.standard_normal((3, 2, 3, 3, 3)) * 0.5
    b = gen.standard_normal(3)
    run("conv3d", [x, w, b],
        lambda: ops.conv3d(x, w, b),
        lambda r: ops.conv3d_bwd(x, w, r, True))

    wp = gen.standard_normal((3, 2, 1, 1, 1))
    run("pointwise", [x, wp, b],
        lambda: ops.pointwise_conv3d(x, wp, b),
        lambda r: ops.pointwise_conv3d_bwd(x, wp, r, True))

    xd = gen.standard_normal((1, 3, 4, 4, 4))
    wd = gen.standard_normal((3, 1, 3, 3, 3)) * 0.5
    run("depthwise", [xd, wd],
        lambda: ops.depthwise_conv3d(xd, wd),
        lambda r: ops.depthwise_conv3d_bwd(xd, wd, r))

    xg = gen.standard_normal((1, 4, 4, 4, 4))
    gamma = gen.standard_normal(4) + 1.5
    beta = gen.standard_normal(4)
    run("groupnorm", [xg, gamma, beta],
        lambda: ops.group_norm(xg, gamma, beta, group_size=2)[0],
        lambda r: ops.group_norm_bwd(ops.group_norm(xg, gamma, beta, 2)[1],
                                     ops.group_norm(xg, gamma, beta, 2)[2],
                                     gamma, r, 2))

    # keep inputs away from the kink so central differences are valid
    xr = (gen.uniform(0.2, 1.0, (1, 2, 5, 5, 5))
          * np.where(gen.uniform(size=(1, 2, 5, 5, 5)) < 0.5, -1.0, 1.0))
    run("relu", [xr], lambda: ops.relu(xr), lambda r: ops.relu_bwd(xr, r))

    # distinct values with a wide margin: a 1e-5 nudge can never flip an argmax
    xm = (0.1 * gen.permutation(np.arange(128, dtype=np.float64))).reshape(1, 2, 4, 4, 4)
    run("maxpool", [xm],
        lambda: ops.maxpool3d(xm)[0],
        lambda r: ops.maxpool3d_bwd(ops.maxpool3d(xm)[1], xm.shape, r))

    xu = gen.standard_normal((1, 2, 4, 4, 4))
    run("upsample", [xu],
        lambda: ops.trilinear_upsample(xu),
        lambda r: ops.trilinear_upsample_bwd(r, xu.shape))

    logits = gen.standard_normal((1, 3, 4, 4, 4))
    labels = gen.integers(0, 3, size=(1, 4, 4, 4))
    coords = _sample_coords(gen, [logits], coords_per_op)
    analytic = [soft_dice_loss(logits, labels)[1]]
    worst = _fd_scalar(lambda: soft_dice_loss(logits, labels)[0],
                       [logits], coords, analytic, tol)
    checks.append(_entry("fd.soft_dice_loss", worst, tol))
    return checks


def fd_network_suite(seed, config=TOY2, samples=220, tol=1e-5):
    """Central differences over randomly sampled parameters of a toy model."""
    config = resolve_config(config)
    model = build(config, seed, "double")
    gen = rng_for(seed, "fd-net")
    x = gen.standard_normal((1, config.in_ch) + tuple(config.image_size))
    probe = gen.standard_normal((1, config.num_classes) + tuple(config.image_size))

    tape = Tape(None)
    model.forward(x, tape)
    model.zero_grads()
    model.backward(probe, tape)
    params = [(leaf, attr, arr) for _, leaf, attr, arr in model.parameters()]
    analytic = [leaf.grads[attr].copy() for leaf, attr, _ in params]
    arrays = [arr for _, _, arr in params]

    def scalar():
        return float((model.forward(x, None) * probe).sum())

    coords = _sample_coords(gen, arrays, samples)
    worst = _fd_scalar(scalar, arrays, coords, analytic, tol)
    entry = _entry("fd.network", worst, tol)
    entry["coords"] = len(coords)
    return entry


def strategy_equivalence_suite(seed, config=TOY2, precision="double", tol=1e-10):
    """Store-all vs reversible: identical forwards, matching gradients."""
    config = resolve_config(config)
    model = build(config, seed, precision)
    gen = rng_for(seed, "equiv")
    x = gen.standard_normal((1, config.in_ch) + tuple(config.image_size),
                            dtype=model.dtype)
    dlogits = gen.standard_normal((1, config.num_classes) + tuple(config.image_size),
                                  dtype=model.dtype)

    def run(strategy):
        model.set_strategy(strategy)
        tape = Tape(None)
        logits = model.forward(x, tape)
        model.zero_grads()
        model.backward(dlogits, tape)
        grads = {name: leaf.grads[attr].copy()
                 for name, leaf, attr, _ in model.parameters()}
        return logits, grads

    logits_store, grads_store = run("store-all")
    logits_rev, grads_rev = run("reversible")
    forward_same = np.array_equal(logits_store, logits_rev)
    worst = max(_rel(grads_store[name], grads_rev[name], floor=1e-12)
                for name in grads_store)
    return [
        _entry("equiv.forward_bitwise", 0.0 if forward_same else 1.0, 0.0),
        _entry("equiv.gradients", worst, tol),
    ]


_CORRUPT_TARGETS = {
    "conv3d": "conv3d_bwd",
    "pointwise": "pointwise_conv3d_bwd",
    "depthwise": "depthwise_conv3d_bwd",
    "groupnorm": "group_norm_bwd",
    "relu": "relu_bwd",
    "maxpool": "maxpool3d_bwd",
    "upsample": "trilinear_upsample_bwd",
}


@contextlib.contextmanager
def corrupted_vjp(op_name):
    """Fault-injection hook: perturb one op's input-gradient during the suites."""
    if op_name not in _CORRUPT_TARGETS:
        raise ValueError("unknown op %r; choose from %s"
                         % (op_name, sorted(_CORRUPT_TARGETS)))
    attr = _CORRUPT_TARGETS[op_name]
    original = getattr(ops, attr)

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        if isinstance(out, tuple):
            return (out[0] + 1e-3,) + out[1:]
        return out + 1e-3

    setattr(ops, attr, wrapped)
    try:
        yield
    finally:
        setattr(ops, attr, original)


def gradcheck_report(config_spec, seed, corrupt=None, roundtrip_seeds=5,
                     network_samples=60):
    """Round-trip + oracle + finite-difference suites on a toy instance."""
    name = config_spec if isinstance(config_spec, str) else "custom"
    toy = TOY_ANALOG.get(name, config_spec)
    ctx = corrupted_vjp(corrupt) if corrupt else contextlib.nullcontext()
    with ctx:
        checks = [roundtrip_suite(toy, seeds=[seed + k for k in range(roundtrip_seeds)])]
        checks.extend(oracle_suite(seed))
        checks.extend(fd_primitive_suite(seed))
        checks.append(fd_network_suite(seed, samples=network_samples))
        checks.extend(strategy_equivalence_suite(seed))
    worst = max(checks, key=lambda c: c["max_err"] / max(c["tol"], 1e-30))
    return {
        "schema_version": 1,
        "config": name,
        "resolved": toy if isinstance(toy, str) else "custom",
        "seed": seed,
        "corrupt": corrupt,
        "checks": checks,
        "worst": worst["check"],
        "pass": all(c["pass"] for c in checks),
    }
