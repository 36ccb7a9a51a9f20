"""Dense float64 arithmetic with a small reverse-mode tape.

Only the operations the GCT forward pass needs are provided. Values are plain
numpy arrays; a leading batch axis is allowed everywhere so a whole minibatch
of visits flows through one tape.
"""
from __future__ import annotations

import itertools
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

MASK_VALUE = -1e9
KL_EPS = 1e-12

_ids = itertools.count()


class NumericsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pure primitives
# ---------------------------------------------------------------------------

def masked_softmax(logits, mask):
    """Row-wise softmax of ``logits + mask`` along the last axis.

    ``mask`` holds 0 for allowed positions and ``MASK_VALUE`` for forbidden
    ones. Raises if shapes differ or a row has no allowed position.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != mask.shape:
        raise NumericsError(f"shape mismatch: logits {logits.shape} vs mask {mask.shape}")
    allowed = mask > MASK_VALUE / 2
    if not np.all(allowed.any(axis=-1)):
        raise NumericsError("mask forbids every position of at least one row")
    z = logits + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e = np.where(allowed, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _clamp_renorm(x):
    c = np.clip(x, KL_EPS, 1.0)
    return c / c.sum(axis=-1, keepdims=True)


def row_kl_per_matrix(p, q, valid):
    """KL(p_i || q_i) averaged over valid rows, one value per leading index.

    ``p`` and ``q`` have shape (..., T, T) and ``valid`` shape (..., T).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if p.shape != q.shape:
        raise NumericsError(f"shape mismatch: {p.shape} vs {q.shape}")
    if valid.shape != p.shape[:-1]:
        raise NumericsError(f"valid flags shape {valid.shape} does not match rows {p.shape[:-1]}")
    n_valid = valid.sum(axis=-1)
    if np.any(n_valid == 0):
        raise NumericsError("KL divergence needs at least one valid row")
    pc, qc = _clamp_renorm(p), _clamp_renorm(q)
    rows = np.sum(pc * (np.log(pc) - np.log(qc)), axis=-1)
    return np.sum(np.where(valid, rows, 0.0), axis=-1) / n_valid


def row_kl_divergence(p, q, valid_rows: Sequence[bool]) -> float:
    """Mean over valid rows of sum_k p_k ln(p_k / q_k) for a single matrix."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    return float(row_kl_per_matrix(p, q, valid_rows))


def sigmoid_cross_entropy(logits, labels) -> float:
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if z.size == 0:
        raise NumericsError("sigmoid cross-entropy of an empty batch")
    if z.shape != y.shape:
        raise NumericsError(f"length mismatch: {z.size} logits vs {y.size} labels")
    # max(z,0) - z*y + log(1 + exp(-|z|))
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Var:
    """A tape-tracked array. ``name`` is set for trainable leaves."""

    __slots__ = ("value", "id", "name")

    def __init__(self, value, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"


class GradTape:
    """Records primitive ops in order; ``backward`` replays them reversed."""

    def __init__(self):
        self.ops: List[tuple] = []
        self.leaves: Dict[int, Var] = {}

    def watch(self, value, name: Optional[str] = None) -> Var:
        v = Var(value, name)
        self.leaves[v.id] = v
        return v

    def constant(self, value) -> Var:
        return Var(value)

    def _record(self, out: Var, inputs: Sequence[Var], backward: Callable) -> Var:
        if not np.all(np.isfinite(out.value)):
            raise NumericsError(f"non-finite value produced by op #{len(self.ops)}")
        self.ops.append((out, tuple(inputs), backward))
        return out

    # -- arithmetic ---------------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        out = Var(a.value @ b.value)

        def back(g):
            ga = g @ np.swapaxes(b.value, -1, -2)
            gb = np.swapaxes(a.value, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        return self._record(out, (a, b), back)

    def add(self, a: Var, b: Var) -> Var:
        out = Var(a.value + b.value)
        return self._record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a: Var, b: Var) -> Var:
        out = Var(a.value - b.value)
        return self._record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def scale(self, a: Var, c: float) -> Var:
        out = Var(a.value * c)
        return self._record(out, (a,), lambda g: (g * c,))

    def transpose(self, a: Var) -> Var:
        out = Var(np.swapaxes(a.value, -1, -2))
        return self._record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))

    def relu(self, a: Var) -> Var:
        on = a.value > 0
        out = Var(np.where(on, a.value, 0.0))
        return self._record(out, (a,), lambda g: (np.where(on, g, 0.0),))

    def sum(self, a: Var) -> Var:
        out = Var(np.sum(a.value))
        return self._record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))

    def mean(self, a: Var) -> Var:
        n = a.value.size
        out = Var(np.mean(a.value))
        return self._record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))

    def square_norm_half(self, a: Var) -> Var:
        out = Var(0.5 * np.sum(a.value ** 2))
        return self._record(out, (a,), lambda g: (g * a.value,))

    def gather_rows(self, table: Var, index) -> Var:
        """``table[index]`` for an integer index array of any shape."""
        index = np.asarray(index)
        out = Var(table.value[index])

        def back(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, index, g)
            return (gt,)
        return self._record(out, (table,), back)

    # -- GCT-specific ---------------------------------------------------------

    def masked_softmax(self, logits: Var, mask) -> Var:
        s = masked_softmax(logits.value, mask)
        out = Var(s)

        def back(g):
            return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)
        return self._record(out, (logits,), back)

    def masked_mean_rows(self, x: Var, valid) -> Var:
        """Mean of x[..., t, :] over valid t; shape (..., T, d) -> (..., d)."""
        w = np.asarray(valid, dtype=np.float64)
        n = w.sum(axis=-1, keepdims=True)
        if np.any(n == 0):
            raise NumericsError("pooling over a visit with no valid tokens")
        w = w / n
        out = Var(np.einsum("...t,...td->...d", w, x.value))
        return self._record(out, (x,), lambda g: (w[..., :, None] * g[..., None, :],))

    def row_kl(self, p: Var, q: Var, valid) -> Var:
        """Per-matrix mean-over-valid-rows KL; shape (..., T, T) -> (...)."""
        valid = np.asarray(valid, dtype=bool)
        out = Var(row_kl_per_matrix(p.value, q.value, valid))
        n_valid = valid.sum(axis=-1)

        def back(g):
            w = np.where(valid, 1.0, 0.0) / n_valid[..., None]
            w = (np.asarray(g)[..., None] * w)[..., None]
            gp = _kl_arg_grad(p.value, q.value, w, first=True)
            gq = _kl_arg_grad(p.value, q.value, w, first=False)
            return gp, gq
        return self._record(out, (p, q), back)

    def sigmoid_ce(self, logits: Var, labels) -> Var:
        y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
        out = Var(sigmoid_cross_entropy(logits.value, y))
        n = logits.value.size
        return self._record(out, (logits,), lambda g: (g * (sigmoid(logits.value) - y) / n,))

    # -----------------------------------------------------------------------

    def backward(self, loss: Var) -> Dict[int, np.ndarray]:
        return backward(self, loss)


def _kl_arg_grad(p, q, w, first: bool):
    """Gradient of sum_rows w * KL(cr(p) || cr(q)) w.r.t. p (first) or q.

    cr() clamps to [eps, 1] then renormalises the row.
    """
    x = p if first else q
    c = np.clip(x, KL_EPS, 1.0)
    s = c.sum(axis=-1, keepdims=True)
    pn, qn = _clamp_renorm(p), _clamp_renorm(q)
    if first:
        d_norm = w * (np.log(pn) - np.log(qn) + 1.0)
    else:
        d_norm = -w * pn / qn
    # through row normalisation n = c / s
    d_c = (d_norm - np.sum(d_norm * c, axis=-1, keepdims=True) / s) / s
    inside = (x >= KL_EPS) & (x <= 1.0)
    return np.where(inside, d_c, 0.0)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: GradTape, loss: Var) -> Dict[int, np.ndarray]:
    """Reverse-mode sweep. Returns d(loss)/d(leaf) keyed by leaf id."""
    if loss.value.size != 1:
        raise NumericsError(f"loss must be scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for out, inputs, back in reversed(tape.ops):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        for v, gv in zip(inputs, back(g)):
            if v.id in grads:
                grads[v.id] = grads[v.id] + gv
            else:
                grads[v.id] = np.asarray(gv, dtype=np.float64)
    return {i: grads.get(i, np.zeros_like(v.value)) for i, v in tape.leaves.items()}


def finite_difference_grad(f: Callable[[Dict[str, np.ndarray]], float],
                           weights: Dict[str, np.ndarray], h: float = 1e-5,
                           keys: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    """Central differences of a scalar ``f`` w.r.t. every weight coordinate.

    ``f`` receives a dict shaped like ``weights``; arrays are perturbed in
    place and restored afterwards.
    """
    if h <= 0:
        raise NumericsError("step h must be positive")
    out = {}
    for k in (weights if keys is None else keys):
        w = weights[k]
        g = np.zeros_like(w, dtype=np.float64)
        flat, gflat = w.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(weights)
            flat[i] = orig - h
            fm = f(weights)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericsError(f"non-finite evaluation at {k}[{i}]")
            gflat[i] = (fp - fm) / (2 * h)
        out[k] = g
    return out
