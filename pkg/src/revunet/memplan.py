"""Closed-form activation-memory model and the budget search.

estimate() recomputes, from the config alone, exactly what the runtime
MemoryLedger will register under the engine's saved-context rules (see
engine.py's table); for any executable config the two agree element for
element. budget_search() answers "how far can one axis grow before the
estimate exceeds a byte budget"; claims_report() runs the reversible
vs store-all comparison the headline claims are about.

Accounting scope: tensors saved for the backward pass only. Parameters
and optimizer moments are excluded from "activation memory" and reported
separately. Batch size is 1 throughout.
"""

import dataclasses

from .ops import group_size_for
from .unet import resolve_config

SCALAR_BYTES = {"single": 4, "double": 8}
STRATEGIES = ("store-all", "reversible")

ACCOUNTING_RULES = [
    "convolutions (standard, pointwise, depthwise) save their input",
    "group norm saves the normalized tensor and one inverse-std scalar per group",
    "relu saves its input",
    "maxpool saves argmax indices, one integer (at scalar width) per output voxel",
    "trilinear upsample, add, split, and concat save nothing (linear / index ops)",
    "store-all mode: reversible blocks save nothing beyond their sub-blocks' contexts",
    "reversible mode: sub-blocks save nothing; each reversible block saves only its output",
    "the loss is terminal and saves nothing; parameters are never activations",
]


def _spatial_sizes(config):
    d, h, w = config.image_size
    return [(d >> i) * (h >> i) * (w >> i) for i in range(config.levels)]


def _entries(config, strategy):
    """(node, reason, op, elements) in execution order, batch size 1."""
    widths = config.widths
    levels = config.levels
    t = config.expand_ratio
    s = _spatial_sizes(config)
    out = []
    for i, c in enumerate(widths):
        prev = config.in_ch if i == 0 else widths[i - 1]
        out.append(("enc%d.raise" % i, "input", "pointwise", prev * s[i]))
        half = c // 2
        if strategy == "store-all":
            for fg in ("f", "g"):
                p = "enc%d.rev.%s" % (i, fg)
                if config.block_kind == "mbconv":
                    tc = t * half
                    out.extend([
                        (p + ".expand", "input", "pointwise", half * s[i]),
                        (p + ".gn1", "xhat", "groupnorm", tc * s[i]),
                        (p + ".gn1", "rstd", "groupnorm", tc // group_size_for(tc)),
                        (p + ".relu1", "input", "relu", tc * s[i]),
                        (p + ".dw", "input", "depthwise", tc * s[i]),
                        (p + ".gn2", "xhat", "groupnorm", tc * s[i]),
                        (p + ".gn2", "rstd", "groupnorm", tc // group_size_for(tc)),
                        (p + ".relu2", "input", "relu", tc * s[i]),
                        (p + ".project", "input", "pointwise", tc * s[i]),
                        (p + ".gn3", "xhat", "groupnorm", half * s[i]),
                        (p + ".gn3", "rstd", "groupnorm", half // group_size_for(half)),
                    ])
                else:
                    out.extend([
                        (p + ".conv", "input", "conv", half * s[i]),
                        (p + ".gn", "xhat", "groupnorm", half * s[i]),
                        (p + ".gn", "rstd", "groupnorm", half // group_size_for(half)),
                        (p + ".relu", "input", "relu", half * s[i]),
                    ])
        else:
            out.append(("enc%d.rev" % i, "out", "rev", c * s[i]))
        if i < levels - 1:
            out.append(("pool%d" % i, "idx", "maxpool", c * s[i + 1]))
    for i in reversed(range(levels - 1)):
        out.extend([
            ("dec%d.reduce" % i, "input", "pointwise", widths[i + 1] * s[i]),
            ("dec%d.conv" % i, "input", "conv", widths[i] * s[i]),
            ("dec%d.gn" % i, "xhat", "groupnorm", widths[i] * s[i]),
            ("dec%d.gn" % i, "rstd", "groupnorm", widths[i] // group_size_for(widths[i])),
            ("dec%d.relu" % i, "input", "relu", widths[i] * s[i]),
        ])
    out.append(("head", "input", "pointwise", widths[0] * s[0]))
    return out


def param_elements(config):
    """Closed-form scalar-parameter count of the full model."""
    widths = config.widths
    t = config.expand_ratio
    total = 0
    for i, c in enumerate(widths):
        prev = config.in_ch if i == 0 else widths[i - 1]
        total += c * prev + c
        half = c // 2
        if config.block_kind == "mbconv":
            total += 2 * (2 * t * half * half + 27 * t * half + 4 * t * half + 2 * half)
        else:
            total += 2 * (27 * half * half + 2 * half)
    for i in range(config.levels - 1):
        total += widths[i] * widths[i + 1] + widths[i]
        total += 27 * widths[i] * widths[i] + 2 * widths[i]
    total += config.num_classes * widths[0] + config.num_classes
    return total


def estimate(config, strategy, precision="single"):
    config = resolve_config(config)
    config.validate()
    if strategy not in STRATEGIES:
        raise ValueError("unknown strategy %r" % (strategy,))
    width = SCALAR_BYTES[precision]
    rows = _entries(config, strategy)
    entries = [{"node": n, "reason": r, "op": op,
                "elements": e, "bytes": e * width} for n, r, op, e in rows]
    total = sum(e["elements"] for e in entries)
    by_stage = {}
    for e in entries:
        stage = e["node"].split(".")[0]
        by_stage[stage] = by_stage.get(stage, 0) + e["elements"]
    params = param_elements(config)
    return {
        "schema_version": 1,
        "strategy": strategy,
        "precision": precision,
        "entries": entries,
        "retained_elements": total,
        "retained_bytes": total * width,
        # registration is monotone during the forward pass, so the peak
        # equals the end-of-forward retention
        "peak_elements": total,
        "peak_bytes": total * width,
        "by_stage": by_stage,
        "param_elements": params,
        "param_bytes": params * width,
        "activations_plus_params_bytes": (total + params) * width,
    }


def element_map(est):
    """{(node, reason): elements} — comparison form shared with the ledger."""
    return {(e["node"], e["reason"]): e["elements"] for e in est["entries"]}


def _with_image(config, dims):
    return dataclasses.replace(config, image_size=tuple(dims))


def _feasible(config, budget_bytes, strategy, precision):
    return estimate(config, strategy, precision)["retained_bytes"] <= budget_bytes


def _search_volume(config, budget_bytes, strategy, precision):
    g = config.grid
    base = config.image_size
    base_voxels = base[0] * base[1] * base[2]
    base_bytes = estimate(config, strategy, precision)["retained_bytes"]
    # bytes grow ~linearly in voxels, so this bounds the per-side multiplier
    m_hi = (budget_bytes / base_bytes) ** (1.0 / 3.0) * 1.5 + 1.0
    candidates = {1.0}
    for side in base:
        k = side // g
        while k * g <= side * m_hi:
            candidates.add(k * g / side)
            k += 1
    best = None
    for m in sorted(candidates):
        if m < 1.0:
            continue
        dims = tuple((int(m * side) // g) * g for side in base)
        if any(x < g for x in dims):
            continue
        if _feasible(_with_image(config, dims), budget_bytes, strategy, precision):
            cand = (dims[0] * dims[1] * dims[2], dims, m)
            if best is None or cand[0] >= best[0]:
                best = cand
    voxels, dims, m = best
    return {
        "axis": "volume",
        "base_image_size": list(base),
        "image_size": list(dims),
        "per_side_multiplier": m,
        "voxel_multiplier": voxels / base_voxels,
        "estimate_bytes": estimate(_with_image(config, dims), strategy, precision)["retained_bytes"],
    }


def _search_channels(config, budget_bytes, strategy, precision):
    k = 1
    while True:
        widths = tuple(w * (k + 1) for w in config.widths)
        wider = dataclasses.replace(config, widths=widths)
        if not _feasible(wider, budget_bytes, strategy, precision):
            break
        k += 1
    chosen = dataclasses.replace(config, widths=tuple(w * k for w in config.widths))
    return {
        "axis": "channels",
        "base_widths": list(config.widths),
        "widths": list(chosen.widths),
        "width_multiplier": k,
        "estimate_bytes": estimate(chosen, strategy, precision)["retained_bytes"],
    }


def _search_depth(config, budget_bytes, strategy, precision):
    widths = list(config.widths)
    while True:
        extended = widths + [widths[-1] * 2]
        deeper = dataclasses.replace(config, widths=tuple(extended))
        if any(s % deeper.grid for s in config.image_size):
            break
        if not _feasible(deeper, budget_bytes, strategy, precision):
            break
        widths = extended
    chosen = dataclasses.replace(config, widths=tuple(widths))
    return {
        "axis": "depth",
        "base_levels": config.levels,
        "levels": chosen.levels,
        "widths": list(chosen.widths),
        "added_levels": chosen.levels - config.levels,
        "estimate_bytes": estimate(chosen, strategy, precision)["retained_bytes"],
    }


def budget_search(config, budget_bytes, axis, strategy="reversible", precision="single"):
    """Largest scale on one axis whose estimate fits the byte budget."""
    config = resolve_config(config)
    if budget_bytes < estimate(config, strategy, precision)["retained_bytes"]:
        raise ValueError("base config already exceeds the budget")
    if axis == "volume":
        result = _search_volume(config, budget_bytes, strategy, precision)
    elif axis == "channels":
        result = _search_channels(config, budget_bytes, strategy, precision)
    elif axis == "depth":
        result = _search_depth(config, budget_bytes, strategy, precision)
    else:
        raise ValueError("axis must be volume, channels, or depth")
    result["budget_bytes"] = int(budget_bytes)
    result["strategy"] = strategy
    result["precision"] = precision
    return result


CLAIM_PRESETS = ("mbconv-base", "mbconv-deeper", "mbconv-wider")
# the published channel claim is about the shipped expand-ratio-2 models;
# the wider preset is itself the widened demonstration, so it is excluded
# from the channels aggregate
CHANNEL_CLAIM_PRESETS = ("mbconv-base", "mbconv-deeper")

FOURTEEN_GB = 14 * 10 ** 9


def claims_report(precision="single"):
    """Reversible vs store-all feasibility ratios vs the headline claims.

    The budget yardstick for each preset is its own store-all activation
    footprint; the search then asks how far the reversible strategy can
    push each axis inside that same footprint.
    """
    per_preset = {}
    for name in CLAIM_PRESETS:
        config = resolve_config(name)
        store = estimate(config, "store-all", precision)
        rev = estimate(config, "reversible", precision)
        budget = store["retained_bytes"]
        per_preset[name] = {
            "store_all_bytes": store["retained_bytes"],
            "reversible_bytes": rev["retained_bytes"],
            "store_over_reversible": store["retained_bytes"] / rev["retained_bytes"],
            "volume": budget_search(config, budget, "volume", "reversible", precision),
            "volume_ratio_continuous": budget / rev["retained_bytes"],
            "channels": budget_search(config, budget, "channels", "reversible", precision),
            "depth": budget_search(config, budget, "depth", "reversible", precision),
        }
    base = resolve_config("mbconv-base")
    deeper = resolve_config("mbconv-deeper")
    base_at_deeper_size = _with_image(base, deeper.image_size)
    mb_base_rev = estimate("mbconv-base", "reversible", precision)
    report = {
        "schema_version": 1,
        "precision": precision,
        "accounting_rules": ACCOUNTING_RULES,
        "headline_targets": {"volume_ratio": 3.0, "channel_ratio": 2.0, "depth_percent": 25.0},
        "presets": per_preset,
        "family": {
            "volume_multiplier_max": max(
                per_preset[p]["volume"]["voxel_multiplier"] for p in CLAIM_PRESETS),
            "volume_ratio_continuous_max": max(
                per_preset[p]["volume_ratio_continuous"] for p in CLAIM_PRESETS),
            "channel_multiplier_min": min(
                per_preset[p]["channels"]["width_multiplier"] for p in CHANNEL_CLAIM_PRESETS),
            "channel_multiplier_max": max(
                per_preset[p]["channels"]["width_multiplier"] for p in CHANNEL_CLAIM_PRESETS),
        },
        "depth_claim": {
            # deeper preset vs base preset, the two published depth points
            "levels": {"base": base.levels, "deeper": deeper.levels,
                       "percent_more": 100.0 * (deeper.levels - base.levels) / base.levels},
            "pool_stages": {"base": base.levels - 1, "deeper": deeper.levels - 1,
                            "percent_more": 100.0 * ((deeper.levels - 1) - (base.levels - 1))
                                            / (base.levels - 1)},
            "deeper_reversible_fits_base_store_all_budget_at_same_volume":
                estimate(deeper, "reversible", precision)["retained_bytes"]
                <= estimate(base_at_deeper_size, "store-all", precision)["retained_bytes"],
        },
        "budget_14gb": {
            "budget_bytes": FOURTEEN_GB,
            "mbconv_base_reversible_activation_bytes": mb_base_rev["retained_bytes"],
            "mbconv_base_reversible_activations_plus_params_bytes":
                mb_base_rev["activations_plus_params_bytes"],
            "activations_fit": mb_base_rev["retained_bytes"] <= FOURTEEN_GB,
            "activations_plus_params_fit":
                mb_base_rev["activations_plus_params_bytes"] <= FOURTEEN_GB,
        },
    }
    return report


_SUFFIXES = {
    "KB": 10 ** 3, "MB": 10 ** 6, "GB": 10 ** 9, "TB": 10 ** 12,
    "KIB": 2 ** 10, "MIB": 2 ** 20, "GIB": 2 ** 30, "TIB": 2 ** 40,
}


def parse_budget(text):
    """'14GB' -> 14e9 bytes; decimal KB/MB/GB/TB, binary KiB/MiB/GiB/TiB, or raw bytes."""
    s = str(text).strip().upper()
    for suffix, mult in sorted(_SUFFIXES.items(), key=lambda kv: -len(kv[0])):
        if s.endswith(suffix):
            try:
                value = float(s[:-len(suffix)])
            except ValueError:
                raise ValueError("bad budget value %r" % (text,))
            if value <= 0:
                raise ValueError("budget must be positive")
            return int(value * mult)
    try:
        value = int(s)
    except ValueError:
        raise ValueError("bad budget value %r" % (text,))
    if value <= 0:
        raise ValueError("budget must be positive")
    return value
