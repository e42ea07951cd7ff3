"""Dense tensors with reverse-mode automatic differentiation on a recorded tape.

A ``Tensor`` wraps a numpy array (canonical network layout is
(batch, channel, depth, height, width), ranks 0-5 are accepted).  A ``Graph``
is an append-only tape of recorded operations; calling ``Graph.backward`` on a
scalar walks the tape once in reverse and accumulates gradients for every
leaf that requires them.

Recording is opt-in: operations only record when at least one input requires
a gradient and is (or becomes) attached to a graph.  Forward passes built from
free tensors are plain numpy computations with no tape overhead.
"""

from __future__ import annotations

import threading

import numpy as np

# When enabled, every recorded/forward op asserts its output is finite.
DEBUG_CHECK_FINITE = False

_ACTIVE = threading.local()

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """Raised when a precondition other than a shape constraint is violated."""


class Tensor:
    """N-dimensional value, optionally tracked on a graph.

    ``node_id`` is a handle into the graph that produced this tensor; it is
    ``None`` for free tensors and for leaves (leaves are looked up through the
    graph's watch table instead, so one parameter tensor can participate in
    several graphs over its lifetime).
    """

    __slots__ = ("data", "requires_grad", "graph", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype == np.float64 and dtype is None and \
                not isinstance(data, (np.ndarray, np.generic)):
            # python floats / lists default to the 32-bit element type
            arr = arr.astype(np.float32)
        if arr.ndim > 5:
            raise ShapeError(f"rank {arr.ndim} > 5 not supported (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.graph = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A free tensor sharing this tensor's storage."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = " grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}{tag})"


class Node:
    """One recorded operation: op label, grad-relevant input ids, backward closure."""

    __slots__ = ("op", "input_ids", "backward")

    def __init__(self, op, input_ids, backward):
        self.op = op
        self.input_ids = input_ids  # tuple of node ids (None where no grad is needed)
        self.backward = backward    # None for leaves


class Graph:
    """Append-only operation tape, used as a recording context.

    Operations record onto the innermost active graph::

        with Graph() as g:
            scores = generator_forward(gen, x, ...)
            loss = ops.l2_loss(scores, target)
        g.backward(loss)
        g.grad(some_parameter)

    Invariants: every node's inputs precede it in the tape, and ``backward``
    visits each node exactly once, in reverse recorded order.  A graph is
    single-threaded; build separate graphs for concurrent forwards (the
    active-graph stack is thread-local).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._watched: dict[int, int] = {}   # id(tensor) -> node id
        self._watched_tensors: list[Tensor] = []
        self._ran_backward = False

    # -- recording context ---------------------------------------------------

    def __enter__(self) -> "Graph":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.stack.pop()
        return False

    # -- leaf management ---------------------------------------------------

    def watch(self, t: Tensor) -> int:
        """Attach an existing tensor as a leaf; returns its node id."""
        if t.node_id is not None:
            raise ContractError(
                "cannot watch an intermediate produced by a graph")
        nid = self._watched.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), None))
            self._watched[id(t)] = nid
            self._watched_tensors.append(t)
        return nid

    def tensor(self, data, requires_grad: bool = False, dtype=None) -> Tensor:
        """Create a tensor attached to this graph as a leaf."""
        t = Tensor(data, requires_grad=requires_grad, dtype=dtype)
        self.watch(t)
        return t

    def node_of(self, t: Tensor):
        """Node id for a tensor on this graph, or None."""
        if t.graph is self and t.node_id is not None:
            return t.node_id
        return self._watched.get(id(t))

    # -- recording ---------------------------------------------------------

    def record(self, op: str, input_ids, backward, out_data: np.ndarray) -> Tensor:
        """Append an operation node and return its output tensor.

        ``backward`` maps the output gradient array to a tuple of input
        gradient arrays aligned with ``input_ids`` (``None`` entries are
        skipped on both sides).
        """
        nid = len(self.nodes)
        self.nodes.append(Node(op, tuple(input_ids), backward))
        out = Tensor(out_data)
        out.requires_grad = True
        out.graph = self
        out.node_id = nid
        return out

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every watched leaf.

        ``loss`` must be a scalar (size 1) produced on this graph.  Returns
        the node-id -> gradient map, also kept on ``self.gradients``.
        """
        if self._ran_backward:
            raise ContractError("backward already ran on this graph")
        if loss.graph is not self or loss.node_id is None:
            raise ContractError("loss tensor was not produced by this graph")
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._ran_backward = True

        pending: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.data)
        }
        for nid in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[nid]
            grad = pending.pop(nid, None)
            if grad is None:
                continue
            if node.backward is None:  # leaf
                self.gradients[nid] = grad
                continue
            in_grads = node.backward(grad)
            for iid, ig in zip(node.input_ids, in_grads):
                if iid is None or ig is None:
                    continue
                acc = pending.get(iid)
                # never accumulate in place: backward closures may alias one
                # array across several inputs (e.g. add returns (g, g))
                pending[iid] = ig if acc is None else acc + ig
        return self.gradients

    def grad(self, t: Tensor) -> Tensor:
        """Gradient for a leaf tensor; zeros if the leaf was never touched."""
        nid = self.node_of(t)
        if nid is None:
            if not t.requires_grad:
                raise ContractError("tensor does not require a gradient")
            return Tensor(np.zeros_like(t.data))
        g = self.gradients.get(nid)
        if g is None:
            return Tensor(np.zeros_like(t.data))
        return Tensor(g)


def active_graph() -> Graph | None:
    """The innermost recording graph on this thread, if any."""
    stack = getattr(_ACTIVE, "stack", None)
    return stack[-1] if stack else None


class Rng:
    """Seeded deterministic random stream (PCG64).

    Identical seed and call sequence yield identical outputs on every
    platform; the stream position travels with ``state`` for checkpointing.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=(), std=1.0, dtype=np.float32):
        return self._gen.standard_normal(size=shape, dtype=dtype) * dtype(std)

    def uniform(self, shape=(), dtype=np.float32):
        return self._gen.random(size=shape, dtype=dtype)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, offset: int) -> "Rng":
        """Derived stream for e.g. per-case generation (seed + offset)."""
        return Rng(self.seed + int(offset))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict):
        self._gen.bit_generator.state = value


def check_finite(arr: np.ndarray, op: str):
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")
