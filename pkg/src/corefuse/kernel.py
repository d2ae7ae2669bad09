"""Dense float64 matrix ops with a recording tape for reverse-mode gradients.

Everything runs on 2-D C-contiguous float64 numpy arrays. The Tape records a
small fixed set of primitives during one forward pass and sweeps the record
in reverse to accumulate adjoints; it is single-owner while recording and is
meant to be rebuilt per training step. Replaying a tape reproduces the
recorded values bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input lies outside an operation's domain (empty, non-finite, non-scalar loss)."""


def as_matrix(x) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, rejecting non-finite entries."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.size and not np.isfinite(a).all():
        raise DomainError("matrix contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector (max-subtracted)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"softmax expects a 1-D vector, got shape {v.shape}")
    if v.size == 0:
        raise DomainError("softmax of an empty vector is undefined")
    if not np.isfinite(v).all():
        raise DomainError("softmax input contains non-finite entries")
    e = np.exp(v - v.max())
    return e / e.sum()


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    """Scale a 1-D vector to unit norm; vectors with norm <= eps map to zero."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"l2_normalize expects a 1-D vector, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if n <= eps:
        return np.zeros_like(v)
    return v / n


def logsumexp(v) -> float:
    """Stable log(sum(exp(v))) of a 1-D vector."""
    v = np.asarray(v, dtype=np.float64)
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def _rows_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class Tape:
    """Wengert list of matrix primitives.

    Node ids are ints in creation order (already topological). ``leaf`` inserts
    an input; every other method records an op and returns the new node id.
    ``backward`` runs one reverse sweep from a scalar loss and returns the
    adjoint of every leaf.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._aux: list = []
        self._values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._ops)

    def value(self, nid: int) -> np.ndarray:
        return self._values[nid]

    def _record(self, op: str, inputs: tuple[int, ...], value: np.ndarray, aux=None) -> int:
        self._ops.append(op)
        self._inputs.append(inputs)
        self._aux.append(aux)
        self._values.append(value)
        return len(self._ops) - 1

    # ---- inputs ----

    def leaf(self, value) -> int:
        """Insert an input matrix (parameter or constant)."""
        return self._record("leaf", (), as_matrix(value))

    # ---- primitives ----

    def matmul(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        if va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {va.shape} @ {vb.shape}")
        return self._record("matmul", (a, b), va @ vb)

    def _broadcast_kind(self, va: np.ndarray, vb: np.ndarray, op: str) -> str:
        if va.shape == vb.shape:
            return "same"
        if vb.shape == (1, va.shape[1]):
            return "row"
        if vb.shape == (va.shape[0], 1):
            return "col"
        raise ShapeError(f"{op} shape mismatch: {va.shape} vs {vb.shape}")

    def add(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        kind = self._broadcast_kind(va, vb, "add")
        return self._record("add", (a, b), va + vb, kind)

    def mul(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        kind = self._broadcast_kind(va, vb, "mul")
        return self._record("mul", (a, b), va * vb, kind)

    def scale(self, a: int, c: float) -> int:
        """Multiply by a Python scalar constant (no gradient for c)."""
        return self._record("scale", (a,), self._values[a] * c, float(c))

    def concat(self, ids: list[int], axis: int) -> int:
        if axis not in (0, 1):
            raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
        vals = [self._values[i] for i in ids]
        sizes = [v.shape[axis] for v in vals]
        return self._record("concat", tuple(ids), np.concatenate(vals, axis=axis), (axis, sizes))

    def mean_of(self, ids: list[int]) -> int:
        """Elementwise mean of equally-shaped nodes."""
        vals = [self._values[i] for i in ids]
        shape = vals[0].shape
        for v in vals[1:]:
            if v.shape != shape:
                raise ShapeError(f"mean_of shape mismatch: {shape} vs {v.shape}")
        out = vals[0].copy()
        for v in vals[1:]:
            out += v
        out /= len(vals)
        return self._record("mean_of", tuple(ids), out)

    def softmax(self, a: int) -> int:
        """Row-wise softmax."""
        va = self._values[a]
        if va.shape[1] == 0:
            raise DomainError("softmax over zero columns is undefined")
        return self._record("softmax", (a,), _rows_softmax(va))

    def tanh(self, a: int) -> int:
        return self._record("tanh", (a,), np.tanh(self._values[a]))

    def relu(self, a: int) -> int:
        return self._record("relu", (a,), np.maximum(self._values[a], 0.0))

    def l2norm_rows(self, a: int, eps: float = 1e-12) -> int:
        va = self._values[a]
        norms = np.linalg.norm(va, axis=1, keepdims=True)
        safe = np.where(norms > eps, norms, 1.0)
        out = np.where(norms > eps, va / safe, 0.0)
        return self._record("l2norm_rows", (a,), out, float(eps))

    def gather_rows(self, a: int, idx) -> int:
        idx = np.asarray(idx, dtype=np.intp)
        va = self._values[a]
        if idx.size and (idx.min() < 0 or idx.max() >= va.shape[0]):
            raise ShapeError(f"gather_rows index out of range for {va.shape[0]} rows")
        return self._record("gather_rows", (a,), va[idx], idx)

    def logsumexp(self, a: int) -> int:
        """Row-wise log-sum-exp, returning a column vector."""
        va = self._values[a]
        m = va.max(axis=1, keepdims=True)
        out = m + np.log(np.exp(va - m).sum(axis=1, keepdims=True))
        return self._record("logsumexp", (a,), out)

    def reshape(self, a: int, shape: tuple[int, int]) -> int:
        va = self._values[a]
        if int(np.prod(shape)) != va.size:
            raise ShapeError(f"cannot reshape {va.shape} to {shape}")
        return self._record("reshape", (a,), np.ascontiguousarray(va.reshape(shape)), va.shape)

    # ---- composites (recorded in terms of the primitives above) ----

    def sum_all(self, a: int) -> int:
        """Total of all entries as a (1,1) node, via ones-vector matmuls."""
        va = self._values[a]
        left = self.leaf(np.ones((1, va.shape[0])))
        out = self.matmul(left, a)
        if va.shape[1] != 1:
            right = self.leaf(np.ones((va.shape[1], 1)))
            out = self.matmul(out, right)
        return out

    # ---- reverse sweep ----

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Adjoints of every leaf with respect to a scalar loss node."""
        lv = self._values[loss]
        if lv.shape != (1, 1):
            raise DomainError(f"loss node must be scalar (1,1), got shape {lv.shape}")
        adj: list[np.ndarray | None] = [None] * len(self._ops)
        adj[loss] = np.ones((1, 1))

        def acc(i: int, g: np.ndarray) -> None:
            if adj[i] is None:
                adj[i] = g.copy()
            else:
                adj[i] += g

        for nid in range(loss, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            op = self._ops[nid]
            ins = self._inputs[nid]
            aux = self._aux[nid]
            out = self._values[nid]
            if op == "leaf":
                continue
            elif op == "matmul":
                a, b = ins
                acc(a, g @ self._values[b].T)
                acc(b, self._values[a].T @ g)
            elif op == "add":
                a, b = ins
                acc(a, g)
                if aux == "same":
                    acc(b, g)
                elif aux == "row":
                    acc(b, g.sum(axis=0, keepdims=True))
                else:
                    acc(b, g.sum(axis=1, keepdims=True))
            elif op == "mul":
                a, b = ins
                va, vb = self._values[a], self._values[b]
                acc(a, g * vb)
                if aux == "same":
                    acc(b, g * va)
                elif aux == "row":
                    acc(b, (g * va).sum(axis=0, keepdims=True))
                else:
                    acc(b, (g * va).sum(axis=1, keepdims=True))
            elif op == "scale":
                acc(ins[0], g * aux)
            elif op == "concat":
                axis, sizes = aux
                off = 0
                for i, s in zip(ins, sizes):
                    if axis == 0:
                        acc(i, g[off:off + s, :])
                    else:
                        acc(i, g[:, off:off + s])
                    off += s
            elif op == "mean_of":
                share = g / len(ins)
                for i in ins:
                    acc(i, share)
            elif op == "softmax":
                dot = (g * out).sum(axis=1, keepdims=True)
                acc(ins[0], out * (g - dot))
            elif op == "tanh":
                acc(ins[0], g * (1.0 - out * out))
            elif op == "relu":
                acc(ins[0], g * (self._values[ins[0]] > 0.0))
            elif op == "l2norm_rows":
                va = self._values[ins[0]]
                norms = np.linalg.norm(va, axis=1, keepdims=True)
                live = norms > aux
                safe = np.where(live, norms, 1.0)
                dot = (g * out).sum(axis=1, keepdims=True)
                acc(ins[0], np.where(live, (g - out * dot) / safe, 0.0))
            elif op == "gather_rows":
                ga = np.zeros_like(self._values[ins[0]])
                np.add.at(ga, aux, g)
                acc(ins[0], ga)
            elif op == "logsumexp":
                acc(ins[0], g * _rows_softmax(self._values[ins[0]]))
            elif op == "reshape":
                acc(ins[0], np.ascontiguousarray(g.reshape(aux)))
            else:  # pragma: no cover
                raise AssertionError(f"unknown op {op!r}")

        return {
            nid: (adj[nid] if adj[nid] is not None else np.zeros_like(self._values[nid]))
            for nid in range(len(self._ops))
            if self._ops[nid] == "leaf"
        }

    def replay(self) -> list[np.ndarray]:
        """Re-execute the recorded ops from the leaves; used to audit determinism."""
        vals: list[np.ndarray] = []
        for nid, op in enumerate(self._ops):
            ins = self._inputs[nid]
            aux = self._aux[nid]
            if op == "leaf":
                vals.append(self._values[nid])
            elif op == "matmul":
                vals.append(vals[ins[0]] @ vals[ins[1]])
            elif op == "add":
                vals.append(vals[ins[0]] + vals[ins[1]])
            elif op == "mul":
                vals.append(vals[ins[0]] * vals[ins[1]])
            elif op == "scale":
                vals.append(vals[ins[0]] * aux)
            elif op == "concat":
                vals.append(np.concatenate([vals[i] for i in ins], axis=aux[0]))
            elif op == "mean_of":
                out = vals[ins[0]].copy()
                for i in ins[1:]:
                    out += vals[i]
                out /= len(ins)
                vals.append(out)
            elif op == "softmax":
                vals.append(_rows_softmax(vals[ins[0]]))
            elif op == "tanh":
                vals.append(np.tanh(vals[ins[0]]))
            elif op == "relu":
                vals.append(np.maximum(vals[ins[0]], 0.0))
            elif op == "l2norm_rows":
                va = vals[ins[0]]
                norms = np.linalg.norm(va, axis=1, keepdims=True)
                safe = np.where(norms > aux, norms, 1.0)
                vals.append(np.where(norms > aux, va / safe, 0.0))
            elif op == "gather_rows":
                vals.append(vals[ins[0]][aux])
            elif op == "logsumexp":
                va = vals[ins[0]]
                m = va.max(axis=1, keepdims=True)
                vals.append(m + np.log(np.exp(va - m).sum(axis=1, keepdims=True)))
            elif op == "reshape":
                n, c = self._values[nid].shape
                vals.append(np.ascontiguousarray(vals[ins[0]].reshape((n, c))))
            else:  # pragma: no cover
                raise AssertionError(f"unknown op {op!r}")
        return vals


# ---- optimizer ----


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {k!r} shape {p.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = total ** 0.5
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm
