"""Reverse-mode automatic differentiation on a flat tape of float64 arrays.

The trajectory model is trained by backpropagating through its unrolled SDE
solver (discretize-then-optimize), so the tape is rebuilt from scratch on
every optimization step and recording has to stay cheap: nodes are plain list
entries, backward is one reverse sweep that visits each node once.

Every operation below is written twice over, in effect: handed ``Var``
operands it records onto the tape, handed bare ndarrays it just computes.
That lets the network and solver code be written once and run either under
the tape (training) or as plain numpy (inference, Monte Carlo sampling).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


def as_tensor(x, what: str = "tensor") -> np.ndarray:
    """Coerce to a float64 array, rejecting NaN/Inf entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise AutodiffError(f"{what} contains non-finite entries")
    return arr


class Var:
    """Handle to one tape node: an index plus the tape that owns it."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.idx]

    @property
    def shape(self) -> tuple:
        return self.tape._values[self.idx].shape

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


class Tape:
    """Record of a forward computation, replayable in reverse for gradients.

    Leaves are created with :meth:`leaf`; operations from this module push
    interior nodes.  :meth:`backward` runs the reverse sweep and returns the
    gradient for every leaf registered with ``param=True`` — zeros for
    parameters the loss never touched, so an optimizer can treat the result
    as a total gradient.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._backs: list[Callable | None] = []
        self._params: list[int] = []

    def __len__(self):
        return len(self._values)

    def leaf(self, value, param: bool = False) -> Var:
        """Register an input tensor; ``param=True`` marks it for backward()."""
        v = self._push(as_tensor(value, "leaf"), (), None)
        if param:
            self._params.append(v.idx)
        return v

    def _push(self, value: np.ndarray, parents: tuple[int, ...],
              back: Callable | None) -> Var:
        self._values.append(value)
        self._parents.append(parents)
        self._backs.append(back)
        return Var(self, len(self._values) - 1)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss node.

        Parameters
        ----------
        loss : Var
            Scalar node on this tape.

        Returns
        -------
        dict
            Maps each ``param=True`` leaf index to its gradient array
            (zeros where the loss does not depend on the parameter).
        """
        if loss.tape is not self:
            raise AutodiffError("loss lives on a different tape")
        if loss.value.shape != ():
            raise AutodiffError(
                f"backward needs a scalar loss, got shape {loss.value.shape}")
        n = loss.idx + 1
        adj: list[np.ndarray | None] = [None] * n
        owned = [False] * n  # may we accumulate in place?
        adj[loss.idx] = np.ones(())
        for i in range(loss.idx, -1, -1):
            g = adj[i]
            back = self._backs[i]
            if g is None or back is None:
                continue
            for j, contrib in zip(self._parents[i], back(g)):
                if contrib is None:
                    continue
                if adj[j] is None:
                    adj[j] = contrib
                    owned[j] = False
                elif owned[j]:
                    adj[j] += contrib
                else:
                    adj[j] = adj[j] + contrib
                    owned[j] = True
        out = {}
        for p in self._params:
            if p < n and adj[p] is not None:
                out[p] = np.asarray(adj[p])
            else:
                out[p] = np.zeros_like(self._values[p])
        return out


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    """2-D matrix product; inner dimensions must agree."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise AutodiffError(f"matmul: expects 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise AutodiffError(f"matmul: inner dimensions disagree: {av.shape} @ {bv.shape}")
    tape = _tape_of(a, b)
    out = av @ bv
    if tape is None:
        return out
    parents, backs = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
    if isinstance(b, Var):
        parents.append(b.idx)

    def back(g):
        gs = []
        if isinstance(a, Var):
            gs.append(g @ bv.T)
        if isinstance(b, Var):
            gs.append(av.T @ g)
        return gs

    return tape._push(out, tuple(parents), back)


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise AutodiffError(f"add: shapes differ: {av.shape} vs {bv.shape}")
    tape = _tape_of(a, b)
    out = av + bv
    if tape is None:
        return out
    parents = tuple(x.idx for x in (a, b) if isinstance(x, Var))

    def back(g):
        return [g for x in (a, b) if isinstance(x, Var)]

    return tape._push(out, parents, back)


def add_bias(x, b):
    """Add a length-h bias row to every row of an (n, h) matrix."""
    xv, bv = _val(x), _val(b)
    if xv.ndim != 2 or bv.shape != (xv.shape[1],):
        raise AutodiffError(f"add_bias: got {xv.shape} + {bv.shape}")
    tape = _tape_of(x, b)
    out = xv + bv
    if tape is None:
        return out
    parents, pick = [], []
    if isinstance(x, Var):
        parents.append(x.idx)
        pick.append("x")
    if isinstance(b, Var):
        parents.append(b.idx)
        pick.append("b")

    def back(g):
        return [g if w == "x" else g.sum(axis=0) for w in pick]

    return tape._push(out, tuple(parents), back)


def scale(x, c):
    """Multiply by a constant — a python number or a same-shape array.

    The constant is data, not a differentiable input: gradients flow
    through ``x`` only (this is how Brownian increments enter the solver).
    """
    xv = _val(x)
    if isinstance(c, (int, float)) or np.ndim(c) == 0:
        c = float(c)
    else:
        c = np.asarray(c, dtype=np.float64)
        if c.shape != xv.shape:
            raise AutodiffError(
                f"scale: constant shape {c.shape} must match input {xv.shape}")
        if not np.all(np.isfinite(c)):
            raise AutodiffError("scale: non-finite constant")
    if not isinstance(x, Var):
        return xv * c
    return x.tape._push(xv * c, (x.idx,), lambda g: [g * c])


def concat(xs: Sequence, axis: int = 0):
    """Concatenate along ``axis``; all other dimensions must match."""
    vals = [_val(x) for x in xs]
    if not vals:
        raise AutodiffError("concat: empty input list")
    ref = vals[0].shape
    for v in vals[1:]:
        if v.ndim != len(ref) or any(
                v.shape[d] != ref[d] for d in range(v.ndim) if d != axis % max(v.ndim, 1)):
            raise AutodiffError(
                f"concat: shapes {[v.shape for v in vals]} disagree off axis {axis}")
    tape = _tape_of(*xs)
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum(sizes)[:-1]
    parents = tuple(x.idx for x in xs if isinstance(x, Var))

    def back(g):
        pieces = np.split(g, offsets, axis=axis)
        return [p for p, x in zip(pieces, xs) if isinstance(x, Var)]

    return tape._push(out, parents, back)


def elu(x):
    """Exponential linear unit, alpha = 1."""
    xv = _val(x)
    neg = np.exp(np.minimum(xv, 0.0)) - 1.0
    out = np.where(xv > 0.0, xv, neg)
    if not isinstance(x, Var):
        return out
    return x.tape._push(out, (x.idx,),
                        lambda g: [g * np.where(xv > 0.0, 1.0, neg + 1.0)])


def softplus(x):
    """log(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    xv = _val(x)
    out = np.log1p(np.exp(-np.abs(xv))) + np.maximum(xv, 0.0)
    if not isinstance(x, Var):
        return out
    t = np.exp(-np.abs(xv))
    sig = np.where(xv >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))
    return x.tape._push(out, (x.idx,), lambda g: [g * sig])


def take(x, idx):
    """Gather entries of a 1-D tensor by integer index array (any shape)."""
    xv = _val(x)
    if xv.ndim != 1:
        raise AutodiffError(f"slice: expects a 1-D source, got shape {xv.shape}")
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise AutodiffError("slice: index array must be integer-typed")
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[0]):
        raise AutodiffError(
            f"slice: index out of range for length-{xv.shape[0]} source")
    out = xv[idx]
    if not isinstance(x, Var):
        return out
    n = xv.shape[0]

    def back(g):
        # bincount is much faster than add.at for the large gathers im2col makes
        return [np.bincount(idx.ravel(), weights=g.ravel(), minlength=n)]

    return x.tape._push(out, (x.idx,), back)


def reshape(x, shape):
    xv = _val(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    orig = xv.shape
    return x.tape._push(out, (x.idx,), lambda g: [g.reshape(orig)])


def reduce_sum(x, axis: int | None = None):
    xv = _val(x)
    out = xv.sum(axis=axis)
    if not isinstance(x, Var):
        return out

    def back(g):
        if axis is None:
            return [np.broadcast_to(g, xv.shape).copy()]
        return [np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()]

    return x.tape._push(out, (x.idx,), back)


def reduce_mean(x, axis: int | None = None):
    xv = _val(x)
    n = xv.size if axis is None else xv.shape[axis]
    out = xv.mean(axis=axis)
    if not isinstance(x, Var):
        return out

    def back(g):
        if axis is None:
            return [np.broadcast_to(g / n, xv.shape).copy()]
        return [np.broadcast_to(np.expand_dims(g, axis) / n, xv.shape).copy()]

    return x.tape._push(out, (x.idx,), back)


def square(x):
    xv = _val(x)
    out = xv * xv
    if not isinstance(x, Var):
        return out
    return x.tape._push(out, (x.idx,), lambda g: [g * (2.0 * xv)])


def exp(x):
    xv = _val(x)
    out = np.exp(xv)
    if not np.all(np.isfinite(out)):
        raise AutodiffError("exp: overflow to non-finite values")
    if not isinstance(x, Var):
        return out
    return x.tape._push(out, (x.idx,), lambda g: [g * out])


def log_sum_exp(x, axis: int = -1):
    """Stable log-sum-exp reduction along one axis."""
    xv = _val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    w = np.exp(xv - m)
    s = w.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis=axis)
    if not isinstance(x, Var):
        return out
    soft = w / s

    def back(g):
        return [np.expand_dims(g, axis) * soft]

    return x.tape._push(out, (x.idx,), back)


# ---------------------------------------------------------------------------
# validating dispatch surface
# ---------------------------------------------------------------------------

KINDS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "add_bias": add_bias,
    "scale": scale,
    "concat": concat,
    "elu": elu,
    "softplus": softplus,
    "slice": take,
    "reshape": reshape,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "square": square,
    "exp": exp,
    "log_sum_exp": log_sum_exp,
}


def forward_op(kind: str, *inputs, **kwargs) -> Var | np.ndarray:
    """Apply a primitive by name, validating inputs first.

    Checks the op kind is known and that every tensor operand is finite,
    then defers to the primitive (which enforces its own shape rule).
    Diagnostics name the op and the offending shapes.

    Parameters
    ----------
    kind : str
        One of ``sorted(KINDS)``.
    *inputs
        ``Var`` or array-like operands; ``concat`` takes a single sequence.
    **kwargs
        Op-specific extras (``axis``, ``shape``, index arrays, constants).
    """
    if kind not in KINDS:
        raise AutodiffError(f"unknown op kind {kind!r}; known: {sorted(KINDS)}")
    flat = list(inputs[0]) if kind == "concat" else inputs
    for x in flat:
        if isinstance(x, Var):
            continue
        if isinstance(x, (int, float, slice)) or x is None:
            continue
        arr = np.asarray(x)
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise AutodiffError(f"{kind}: non-finite input tensor")
    return KINDS[kind](*inputs, **kwargs)


def grad_check(build, params: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Worst-case relative disagreement between tape and finite differences.

    Parameters
    ----------
    build : callable
        ``build(tape, param_vars) -> Var``; must return a scalar loss node
        built from the given parameter leaves.  It is re-invoked on fresh
        tapes for every probe, so it must be deterministic.
    params : sequence of ndarray
        Parameter values; every entry of every array is probed.
    eps : float
        Central-difference step.

    Returns
    -------
    float
        ``max |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8)`` over all
        parameter entries.

    Raises
    ------
    AutodiffError
        If a probe produces a non-finite loss (reports which parameter).
    """
    params = [as_tensor(p, f"param {k}") for k, p in enumerate(params)]
    tape = Tape()
    pvars = [tape.leaf(p, param=True) for p in params]
    loss = build(tape, pvars)
    grads = tape.backward(loss)

    def value_at(ps):
        t = Tape()
        out = build(t, [t.leaf(p, param=True) for p in ps])
        return float(out.value)

    worst = 0.0
    for k, p in enumerate(params):
        g = grads[pvars[k].idx]
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            bumped = [q.copy() for q in params]
            bumped[k][ix] += eps
            hi = value_at(bumped)
            bumped[k][ix] -= 2 * eps
            lo = value_at(bumped)
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise AutodiffError(
                    f"non-finite loss while probing parameter {k} at index {ix}")
            fd = (hi - lo) / (2.0 * eps)
            gt = float(g[ix]) if g.shape else float(g)
            rel = abs(gt - fd) / max(abs(gt), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
