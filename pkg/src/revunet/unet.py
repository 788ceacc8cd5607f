"""Full architecture assembly, presets, and model serialization.

Encoder level i: pointwise channel-raise to widths[i], then a reversible
block whose F and G halves are blocks of width widths[i]/2; 2x2x2 max
pool between levels. Decoder level i: trilinear upsample, pointwise
reduce widths[i+1] -> widths[i], additive skip from encoder level i,
then a standard conv block. Head: pointwise to num_classes. Batch size
is fixed at 1 (group norm makes this viable).

A model serializes to a directory: config.json, manifest.json, and one
RVT1 file per parameter (natural shapes padded to rank 5 with trailing
ones).
"""

import dataclasses
import json
import os

import numpy as np

from .blocks import make_block, standard_block
from .engine import MaxPool2, Pointwise, RevBlock, Sequential, Upsample2, walk
from .rng import rng_for
from .tensor import ShapeError, check_tensor5, ew_add, precision_of, tensor_read, tensor_write

_NP_DTYPE = {"single": np.float32, "double": np.float64}


@dataclasses.dataclass(frozen=True)
class UNetConfig:
    widths: tuple
    image_size: tuple
    block_kind: str = "mbconv"
    expand_ratio: int = None
    in_ch: int = 4
    num_classes: int = 4

    @property
    def levels(self):
        return len(self.widths)

    @property
    def grid(self):
        return 2 ** (self.levels - 1)

    def validate(self):
        if self.block_kind not in ("standard", "mbconv"):
            raise ValueError("block_kind must be 'standard' or 'mbconv'")
        if self.block_kind == "mbconv":
            if not isinstance(self.expand_ratio, int) or self.expand_ratio < 1:
                raise ValueError("mbconv config needs a positive integer expand_ratio")
        elif self.expand_ratio is not None:
            raise ValueError("standard config must not set expand_ratio")
        if len(self.widths) < 2:
            raise ValueError("need at least two levels")
        for w in self.widths:
            if w % 2:
                raise ValueError("widths must be even (reversible blocks split channels)")
        if any(a >= b for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be strictly increasing")
        if len(self.image_size) != 3:
            raise ValueError("image_size must be (d, h, w)")
        for s in self.image_size:
            if s % self.grid:
                raise ValueError("image size %r not divisible by the pooling grid %d"
                                 % (tuple(self.image_size), self.grid))
        if self.in_ch < 1 or self.num_classes < 1:
            raise ValueError("in_ch and num_classes must be positive")

    def to_dict(self):
        return {
            "widths": list(self.widths),
            "image_size": list(self.image_size),
            "block_kind": self.block_kind,
            "expand_ratio": self.expand_ratio,
            "in_ch": self.in_ch,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            widths=tuple(d["widths"]),
            image_size=tuple(d["image_size"]),
            block_kind=d.get("block_kind", "mbconv"),
            expand_ratio=d.get("expand_ratio"),
            in_ch=d.get("in_ch", 4),
            num_classes=d.get("num_classes", 4),
        )


PRESETS = {
    "baseline": UNetConfig(widths=(60, 120, 180, 240, 480),
                           image_size=(256, 256, 160), block_kind="standard"),
    "mbconv-base": UNetConfig(widths=(30, 60, 120, 180, 240),
                              image_size=(256, 256, 160), block_kind="mbconv", expand_ratio=2),
    "mbconv-deeper": UNetConfig(widths=(30, 60, 120, 180, 240, 480),
                                image_size=(128, 128, 128), block_kind="mbconv", expand_ratio=2),
    "mbconv-wider": UNetConfig(widths=(30, 60, 120, 180, 240),
                               image_size=(128, 128, 128), block_kind="mbconv", expand_ratio=8),
    # desk-scale analogs; the deeper analog keeps 5 levels because a 6-level
    # grid needs 32-divisible inputs, beyond the <=16^3 toy budget
    "baseline-toy": UNetConfig(widths=(2, 4, 6, 8, 16),
                               image_size=(16, 16, 16), block_kind="standard"),
    "mbconv-base-toy": UNetConfig(widths=(2, 4, 8, 12, 16),
                                  image_size=(16, 16, 16), block_kind="mbconv", expand_ratio=2),
    "mbconv-deeper-toy": UNetConfig(widths=(2, 4, 8, 12, 16),
                                    image_size=(16, 16, 16), block_kind="mbconv", expand_ratio=2),
    "mbconv-wider-toy": UNetConfig(widths=(2, 4, 8, 12, 16),
                                   image_size=(16, 16, 16), block_kind="mbconv", expand_ratio=8),
}

TOY_ANALOG = {
    "baseline": "baseline-toy",
    "mbconv-base": "mbconv-base-toy",
    "mbconv-deeper": "mbconv-deeper-toy",
    "mbconv-wider": "mbconv-wider-toy",
}


def resolve_config(source):
    """Accept a preset name, a JSON file path, or a ready UNetConfig."""
    if isinstance(source, UNetConfig):
        return source
    if source in PRESETS:
        return PRESETS[source]
    if os.path.exists(source):
        with open(source) as f:
            return UNetConfig.from_dict(json.load(f))
    raise ValueError("unknown preset or missing config file: %r" % (source,))


class _EncLevel:
    def __init__(self, raise_, rev, pool):
        self.raise_ = raise_
        self.rev = rev
        self.pool = pool


class _DecLevel:
    def __init__(self, up, reduce, block):
        self.up = up
        self.reduce = reduce
        self.block = block


class Model:
    def __init__(self, config, precision="double", strategy="reversible"):
        config.validate()
        if precision not in _NP_DTYPE:
            raise ValueError("precision must be 'single' or 'double'")
        self.config = config
        self.precision = precision
        self.strategy = strategy
        self.param_version = 0
        dtype = _NP_DTYPE[precision]
        widths = config.widths
        levels = config.levels

        self.enc = []
        for i, c in enumerate(widths):
            prev = config.in_ch if i == 0 else widths[i - 1]
            raise_ = Pointwise("enc%d.raise" % i, prev, c, dtype, bias=True)
            half = c // 2
            rev = RevBlock(
                "enc%d.rev" % i,
                make_block(config.block_kind, "enc%d.rev.f" % i, half, config.expand_ratio, dtype),
                make_block(config.block_kind, "enc%d.rev.g" % i, half, config.expand_ratio, dtype),
                strategy=strategy)
            rev._version_fn = lambda: self.param_version
            pool = MaxPool2("pool%d" % i) if i < levels - 1 else None
            self.enc.append(_EncLevel(raise_, rev, pool))

        self.dec = []
        for i in range(levels - 1):
            up = Upsample2("dec%d.up" % i)
            reduce = Pointwise("dec%d.reduce" % i, widths[i + 1], widths[i], dtype, bias=True)
            block = standard_block("dec%d" % i, widths[i], dtype)
            self.dec.append(_DecLevel(up, reduce, block))

        self.head = Pointwise("head", widths[0], config.num_classes, dtype, bias=True)

    @property
    def dtype(self):
        return _NP_DTYPE[self.precision]

    def set_strategy(self, strategy):
        for lvl in self.enc:
            lvl.rev.strategy = strategy
        self.strategy = strategy

    def bump_version(self):
        self.param_version += 1

    def _toplevel(self):
        """Top-level nodes in execution order."""
        nodes = []
        for lvl in self.enc:
            nodes.append(lvl.raise_)
            nodes.append(lvl.rev)
            if lvl.pool is not None:
                nodes.append(lvl.pool)
        for i in reversed(range(len(self.dec))):
            nodes.extend([self.dec[i].up, self.dec[i].reduce, self.dec[i].block])
        nodes.append(self.head)
        return nodes

    def leaves(self):
        for top in self._toplevel():
            yield from walk(top)

    def parameters(self):
        for leaf in self.leaves():
            for attr, arr in leaf.param_items():
                yield leaf.name + "." + attr, leaf, attr, arr

    def init_params(self, seed):
        gen = rng_for(seed, "init")
        for leaf in self.leaves():
            leaf.init_params(gen)
        return self

    def zero_grads(self):
        for leaf in self.leaves():
            leaf.zero_grads()

    def _check_input(self, x):
        check_tensor5(x)
        if x.shape[0] != 1:
            raise ShapeError("batch size is fixed at 1, got %d" % x.shape[0])
        if x.shape[1] != self.config.in_ch:
            raise ShapeError("expected %d input channels, got %d"
                             % (self.config.in_ch, x.shape[1]))
        for s in x.shape[2:]:
            if s % self.config.grid:
                raise ShapeError("spatial size %r not divisible by pooling grid %d"
                                 % (x.shape[2:], self.config.grid))
        if x.dtype != self.dtype:
            raise ValueError("input dtype %s does not match model precision %s"
                             % (x.dtype, self.precision))

    def forward(self, x, tape=None):
        self._check_input(x)
        levels = self.config.levels
        skips = []
        h = x
        for i, lvl in enumerate(self.enc):
            h = lvl.raise_.forward(h, tape)
            h = lvl.rev.forward(h, tape)
            if i < levels - 1:
                skips.append(h)
                h = lvl.pool.forward(h, tape)
        for i in reversed(range(levels - 1)):
            h = self.dec[i].up.forward(h, tape)
            h = self.dec[i].reduce.forward(h, tape)
            h = ew_add(h, skips[i])
            h = self.dec[i].block.forward(h, tape)
        return self.head.forward(h, tape)

    def backward(self, dlogits, tape):
        levels = self.config.levels
        dh = self.head.backward(dlogits, tape)
        dskips = [None] * (levels - 1)
        for i in range(levels - 1):
            dh = self.dec[i].block.backward(dh, tape)
            dskips[i] = dh                        # additive skip: grad fans out unchanged
            dh = self.dec[i].reduce.backward(dh, tape)
            dh = self.dec[i].up.backward(dh, tape)
        for i in reversed(range(levels)):
            if i < levels - 1:
                dh = self.enc[i].pool.backward(dh, tape)
                dh = ew_add(dh, dskips[i])
            dh = self.enc[i].rev.backward(dh, tape)
            dh = self.enc[i].raise_.backward(dh, tape)
        return dh

    def save(self, path):
        os.makedirs(os.path.join(path, "params"), exist_ok=True)
        with open(os.path.join(path, "config.json"), "w") as f:
            json.dump({"schema_version": 1, "precision": self.precision,
                       "config": self.config.to_dict()}, f, indent=2)
        manifest = []
        for name, _, _, arr in self.parameters():
            padded = arr.reshape(arr.shape + (1,) * (5 - arr.ndim))
            tensor_write(np.ascontiguousarray(padded), os.path.join(path, "params", name + ".rvt"))
            manifest.append({"name": name, "shape": list(arr.shape), "file": "params/" + name + ".rvt"})
        with open(os.path.join(path, "manifest.json"), "w") as f:
            json.dump({"schema_version": 1, "precision": self.precision,
                       "params": manifest}, f, indent=2)

    @classmethod
    def load(cls, path, strategy="reversible"):
        with open(os.path.join(path, "config.json")) as f:
            doc = json.load(f)
        model = cls(UNetConfig.from_dict(doc["config"]), doc["precision"], strategy)
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        by_name = {entry["name"]: entry for entry in manifest["params"]}
        for name, leaf, attr, arr in model.parameters():
            entry = by_name.pop(name, None)
            if entry is None:
                raise ValueError("parameter %s missing from manifest" % name)
            stored = tensor_read(os.path.join(path, entry["file"]))
            if precision_of(stored) != model.precision:
                raise ValueError("parameter %s precision %s does not match model %s"
                                 % (name, precision_of(stored), model.precision))
            if int(stored.size) != int(arr.size):
                raise ShapeError("parameter %s has %d elements, expected %d"
                                 % (name, stored.size, arr.size))
            arr[...] = stored.reshape(arr.shape)
        if by_name:
            raise ValueError("manifest lists unknown parameters: %s" % sorted(by_name))
        return model


def build(config, seed, precision="double", strategy="reversible"):
    """Construct and deterministically initialize a model."""
    return Model(resolve_config(config), precision, strategy).init_params(seed)


def pad_to_grid(volume, levels):
    """Zero-pad spatial dims up to the pooling grid; extra voxel goes high on ties.

    Returns (padded, crop_record); crop_to_record inverts the padding exactly.
    """
    g = 2 ** (levels - 1)
    pads = []
    for size in volume.shape[2:]:
        target = -(-size // g) * g
        extra = target - size
        lo = extra // 2
        pads.append([lo, extra - lo])
    padded = np.pad(volume, ((0, 0), (0, 0)) + tuple((p[0], p[1]) for p in pads))
    return padded, {"pad": pads}


def crop_to_record(volume, record):
    slices = [slice(None), slice(None)]
    for (lo, hi), size in zip(record["pad"], volume.shape[2:]):
        slices.append(slice(lo, size - hi))
    return np.ascontiguousarray(volume[tuple(slices)])
