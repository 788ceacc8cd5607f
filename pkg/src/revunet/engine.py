"""Static-graph execution engine with two backward storage strategies.

Every node saves a fixed, documented context for its backward pass:

  ============  =========================================
  node          saved context (ledger reason)
  ============  =========================================
  conv kinds    input
  group norm    xhat, rstd
  relu          input
  maxpool       idx (argmax indices, one per output voxel)
  upsample      nothing (linear; VJP is the transpose)
  rev block     nothing in store-all mode beyond what its
                sub-blocks save; only its output ("out")
                in reversible mode
  add/split/..  nothing
  ============  =========================================

The MemoryLedger counts exactly the arrays registered under these rules,
deduplicated by array identity. Parameters are never counted. Scratch
contexts materialized during the reversible backward (to re-run F and G)
are deliberately unregistered: they exist one block at a time and are
what the reversible strategy trades compute for.
"""

import numpy as np

from . import ops
from .tensor import ShapeError, channel_split, channel_concat, ew_add, ew_sub

STRATEGIES = ("store-all", "reversible")


class EngineError(RuntimeError):
    pass


class MemoryLedger:
    """Exact element/byte accounting of tensors retained for backward."""

    def __init__(self):
        self.entries = {}      # (node, reason) -> {"op", "elements", "bytes"}
        self._order = []
        self._ids = set()
        self.retained_elements = 0
        self.retained_bytes = 0
        self.peak_elements = 0
        self.peak_bytes = 0

    def register(self, node, reason, op, arr):
        if id(arr) in self._ids:
            return  # identity dedup: each stored tensor is counted once
        key = (node, reason)
        if key in self.entries:
            raise EngineError("duplicate ledger entry %s/%s" % key)
        self._ids.add(id(arr))
        # the array reference keeps id() valid for the dedup set
        self.entries[key] = {"op": op, "elements": int(arr.size),
                             "bytes": int(arr.nbytes), "array": arr}
        self._order.append(key)
        self.retained_elements += arr.size
        self.retained_bytes += arr.nbytes
        self.peak_elements = max(self.peak_elements, self.retained_elements)
        self.peak_bytes = max(self.peak_bytes, self.retained_bytes)

    def release(self, node, reason, arr=None):
        key = (node, reason)
        entry = self.entries.pop(key, None)
        if entry is None:
            return
        self._order.remove(key)
        self._ids.discard(id(entry["array"]))
        self.retained_elements -= entry["elements"]
        self.retained_bytes -= entry["bytes"]

    def element_map(self):
        """{(node, reason): elements} for exact comparison against the estimate."""
        return {k: v["elements"] for k, v in self.entries.items()}

    def report(self, strategy=None, precision=None):
        entries = [
            {"node": node, "reason": reason,
             "op": self.entries[(node, reason)]["op"],
             "elements": self.entries[(node, reason)]["elements"],
             "bytes": self.entries[(node, reason)]["bytes"]}
            for node, reason in self._order
        ]
        return {
            "schema_version": 1,
            "strategy": strategy,
            "precision": precision,
            "entries": entries,
            "retained_elements": int(self.retained_elements),
            "retained_bytes": int(self.retained_bytes),
            "peak_elements": int(self.peak_elements),
            "peak_bytes": int(self.peak_bytes),
        }


class Tape:
    """Per-execution store of saved contexts, in topological order."""

    def __init__(self, ledger=None):
        self.ctx = {}
        self.meta = {}
        self.nodes = []        # (name, op) in execution order
        self.ledger = ledger

    def record(self, name, op):
        self.nodes.append((name, op))

    def save(self, name, reason, op, arr):
        self.ctx[(name, reason)] = arr
        if self.ledger is not None:
            self.ledger.register(name, reason, op, arr)

    def take(self, name, reason):
        arr = self.ctx.pop((name, reason))
        if self.ledger is not None:
            self.ledger.release(name, reason, arr)
        return arr


class Node:
    """One named operation; subclasses implement forward/backward."""

    op = "node"

    def __init__(self, name):
        self.name = name
        self.grads = {}

    def param_items(self):
        return []

    def children(self):
        return []

    def init_params(self, gen):
        pass

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0

    def forward(self, x, tape):
        raise NotImplementedError

    def backward(self, dy, tape):
        raise NotImplementedError


class Pointwise(Node):
    op = "pointwise"

    def __init__(self, name, cin, cout, dtype, bias=True):
        super().__init__(name)
        self.cin, self.cout = cin, cout
        self.w = np.zeros((cout, cin, 1, 1, 1), dtype=dtype)
        self.b = np.zeros(cout, dtype=dtype) if bias else None
        self.grads = {"w": np.zeros_like(self.w)}
        if bias:
            self.grads["b"] = np.zeros_like(self.b)

    def param_items(self):
        items = [("w", self.w)]
        if self.b is not None:
            items.append(("b", self.b))
        return items

    def init_params(self, gen):
        std = np.sqrt(2.0 / self.cin)
        self.w[...] = gen.standard_normal(self.w.shape, dtype=self.w.dtype) * self.w.dtype.type(std)

    def forward(self, x, tape):
        y = ops.pointwise_conv3d(x, self.w, self.b)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.save(self.name, "input", self.op, x)
        return y

    def backward(self, dy, tape):
        x = tape.take(self.name, "input")
        dx, dw, db = ops.pointwise_conv3d_bwd(x, self.w, dy, self.b is not None)
        self.grads["w"] += dw
        if db is not None:
            self.grads["b"] += db
        return dx


class Conv3(Node):
    op = "conv"

    def __init__(self, name, cin, cout, dtype, bias=False):
        super().__init__(name)
        self.cin, self.cout = cin, cout
        self.w = np.zeros((cout, cin, 3, 3, 3), dtype=dtype)
        self.b = np.zeros(cout, dtype=dtype) if bias else None
        self.grads = {"w": np.zeros_like(self.w)}
        if bias:
            self.grads["b"] = np.zeros_like(self.b)

    def param_items(self):
        items = [("w", self.w)]
        if self.b is not None:
            items.append(("b", self.b))
        return items

    def init_params(self, gen):
        std = np.sqrt(2.0 / (27.0 * self.cin))
        self.w[...] = gen.standard_normal(self.w.shape, dtype=self.w.dtype) * self.w.dtype.type(std)

    def forward(self, x, tape):
        y = ops.conv3d(x, self.w, self.b)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.save(self.name, "input", self.op, x)
        return y

    def backward(self, dy, tape):
        x = tape.take(self.name, "input")
        dx, dw, db = ops.conv3d_bwd(x, self.w, dy, self.b is not None)
        self.grads["w"] += dw
        if db is not None:
            self.grads["b"] += db
        return dx


class Depthwise3(Node):
    op = "depthwise"

    def __init__(self, name, c, dtype):
        super().__init__(name)
        self.c = c
        self.w = np.zeros((c, 1, 3, 3, 3), dtype=dtype)
        self.grads = {"w": np.zeros_like(self.w)}

    def param_items(self):
        return [("w", self.w)]

    def init_params(self, gen):
        std = np.sqrt(2.0 / 27.0)
        self.w[...] = gen.standard_normal(self.w.shape, dtype=self.w.dtype) * self.w.dtype.type(std)

    def forward(self, x, tape):
        y = ops.depthwise_conv3d(x, self.w)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.save(self.name, "input", self.op, x)
        return y

    def backward(self, dy, tape):
        x = tape.take(self.name, "input")
        dx, dw = ops.depthwise_conv3d_bwd(x, self.w, dy)
        self.grads["w"] += dw
        return dx


class GroupNorm(Node):
    op = "groupnorm"

    def __init__(self, name, c, dtype, eps=1e-5):
        super().__init__(name)
        self.c = c
        self.eps = eps
        self.group_size = ops.group_size_for(c)
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.grads = {"gamma": np.zeros_like(self.gamma), "beta": np.zeros_like(self.beta)}

    def param_items(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x, tape):
        if x.shape[1] != self.c:
            raise ShapeError("%s expects %d channels, got %d" % (self.name, self.c, x.shape[1]))
        y, xhat, rstd = ops.group_norm(x, self.gamma, self.beta, self.group_size, self.eps)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.save(self.name, "xhat", self.op, xhat)
            tape.save(self.name, "rstd", self.op, rstd)
        return y

    def backward(self, dy, tape):
        xhat = tape.take(self.name, "xhat")
        rstd = tape.take(self.name, "rstd")
        dx, dgamma, dbeta = ops.group_norm_bwd(xhat, rstd, self.gamma, dy, self.group_size)
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        return dx


class ReLU(Node):
    op = "relu"

    def forward(self, x, tape):
        y = ops.relu(x)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.save(self.name, "input", self.op, x)
        return y

    def backward(self, dy, tape):
        x = tape.take(self.name, "input")
        return ops.relu_bwd(x, dy)


class MaxPool2(Node):
    op = "maxpool"

    def forward(self, x, tape):
        y, idx = ops.maxpool3d(x)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.save(self.name, "idx", self.op, idx)
            tape.meta[(self.name, "in_shape")] = x.shape
        return y

    def backward(self, dy, tape):
        idx = tape.take(self.name, "idx")
        return ops.maxpool3d_bwd(idx, tape.meta[(self.name, "in_shape")], dy)


class Upsample2(Node):
    op = "upsample"

    def forward(self, x, tape):
        y = ops.trilinear_upsample(x)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.meta[(self.name, "in_shape")] = x.shape
        return y

    def backward(self, dy, tape):
        return ops.trilinear_upsample_bwd(dy, tape.meta[(self.name, "in_shape")])


class Sequential(Node):
    op = "sequential"

    def __init__(self, name, nodes):
        super().__init__(name)
        self.nodes = list(nodes)

    def children(self):
        return self.nodes

    def forward(self, x, tape):
        for node in self.nodes:
            x = node.forward(x, tape)
        return x

    def backward(self, dy, tape):
        for node in reversed(self.nodes):
            dy = node.backward(dy, tape)
        return dy


class RevBlock(Node):
    """Additive-coupling reversible block: y1 = x1 + F(x2), y2 = x2 + G(y1).

    In store-all mode F and G save their contexts on the main tape. In
    reversible mode they save nothing; backward reconstructs x2 = y2 - G(y1)
    from the stored output and re-runs G then F exactly once each on
    unregistered scratch tapes.
    """

    op = "rev"

    def __init__(self, name, f, g, strategy="reversible"):
        super().__init__(name)
        if strategy not in STRATEGIES:
            raise ValueError("unknown strategy %r" % (strategy,))
        self.f = f
        self.g = g
        self.strategy = strategy
        self._version_fn = None    # wired by the owning model

    def children(self):
        return [self.f, self.g]

    def _version(self):
        return self._version_fn() if self._version_fn is not None else 0

    def forward(self, x, tape):
        x1, x2 = channel_split(x)
        inner = tape if self.strategy == "store-all" else None
        y1 = ew_add(x1, self.f.forward(x2, inner))
        y2 = ew_add(x2, self.g.forward(y1, inner))
        y = channel_concat(y1, y2)
        if tape is not None:
            tape.record(self.name, self.op)
            tape.meta[(self.name, "version")] = self._version()
            if self.strategy == "reversible":
                tape.save(self.name, "out", self.op, y)
        return y

    def inverse(self, y):
        y1, y2 = channel_split(y)
        x2 = ew_sub(y2, self.g.forward(y1, None))
        x1 = ew_sub(y1, self.f.forward(x2, None))
        return channel_concat(x1, x2)

    def backward(self, dy, tape):
        dy1, dy2 = channel_split(dy)
        if self.strategy == "store-all":
            dy1_total = ew_add(dy1, self.g.backward(dy2, tape))
            dx2 = ew_add(dy2, self.f.backward(dy1_total, tape))
        else:
            if tape.meta[(self.name, "version")] != self._version():
                raise EngineError(
                    "%s: parameters changed between forward and reversible "
                    "backward; reconstruction would be wrong" % self.name)
            y = tape.take(self.name, "out")
            y1, y2 = channel_split(y)
            scratch_g = Tape(ledger=None)
            x2 = ew_sub(y2, self.g.forward(y1, scratch_g))
            dy1_total = ew_add(dy1, self.g.backward(dy2, scratch_g))
            scratch_f = Tape(ledger=None)
            self.f.forward(x2, scratch_f)
            dx2 = ew_add(dy2, self.f.backward(dy1_total, scratch_f))
        return channel_concat(dy1_total, dx2)


def walk(node):
    """Yield leaf nodes (parameter holders and primitives) in execution order."""
    kids = node.children()
    if not kids:
        yield node
        return
    for child in kids:
        yield from walk(child)
