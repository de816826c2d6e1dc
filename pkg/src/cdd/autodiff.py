"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records a small closed set of primitives (add, mul, matmul, affine,
pointwise nonlinearities, reductions, concat, scalar-gate blend) as they are
evaluated eagerly.  The recorded program can be re-run with fresh input
bindings and differentiated exactly in reverse topological order with a fixed
accumulation order, so two runs with the same inputs are bit-identical.
Sufficient for small MLPs and their training losses; nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Tape", "Var", "TapeError", "GradCheckReport", "grad_check"]


class TapeError(Exception):
    """Structural error in a tape (bad shape, unknown name, non-scalar output)."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise TapeError("non-finite value entering the tape")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("op", "parents", "aux", "value")

    def __init__(self, op: str, parents: tuple[int, ...], aux, value: np.ndarray):
        self.op = op
        self.parents = parents
        self.aux = aux
        self.value = value


class Var:
    """Handle to one node of a Tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        node = self.tape._nodes[self.idx]
        return f"Var(#{self.idx} {node.op} shape={node.value.shape})"


class Tape:
    """Eagerly evaluated, re-runnable, reverse-differentiable program."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._inputs: dict[str, int] = {}
        self._outputs: dict[str, int] = {}

    # -- leaves ------------------------------------------------------------

    def input(self, name: str, value) -> Var:
        """Bind a named, differentiable input."""
        if name in self._inputs:
            raise TapeError(f"duplicate input name {name!r}")
        var = self._record("input", (), name, _as_f64(value))
        self._inputs[name] = var.idx
        return var

    def const(self, value) -> Var:
        """A constant leaf; gradients are never reported for it."""
        return self._record("const", (), None, _as_f64(value))

    def output(self, name: str, var: Var) -> Var:
        """Name a node as a program output."""
        self._check_var(var)
        self._outputs[name] = var.idx
        return var

    # -- primitives --------------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        return self._binary("add", a, b)

    def mul(self, a: Var, b: Var) -> Var:
        return self._binary("mul", a, b)

    def matmul(self, a: Var, b: Var) -> Var:
        self._check_var(a, b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise TapeError(
                f"matmul node {len(self._nodes)}: incompatible shapes {av.shape} @ {bv.shape}"
            )
        return self._record("matmul", (a.idx, b.idx), None, av @ bv)

    def affine(self, x: Var, w: Var, b: Var) -> Var:
        """x @ w + b with b broadcast over rows."""
        self._check_var(x, w, b)
        xv, wv, bv = x.value, w.value, b.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
            raise TapeError(
                f"affine node {len(self._nodes)}: incompatible shapes "
                f"{xv.shape} @ {wv.shape} + {bv.shape}"
            )
        return self._record("affine", (x.idx, w.idx, b.idx), None, xv @ wv + bv)

    def tanh(self, a: Var) -> Var:
        self._check_var(a)
        return self._record("tanh", (a.idx,), None, np.tanh(a.value))

    def huber(self, a: Var, delta: float = 1.0) -> Var:
        """Pointwise Huber penalty: quadratic inside |a| <= delta, linear outside."""
        self._check_var(a)
        return self._record("huber", (a.idx,), float(delta), _huber(a.value, delta))

    def sum(self, a: Var) -> Var:
        self._check_var(a)
        return self._record("sum", (a.idx,), None, np.asarray(a.value.sum()))

    def mean(self, a: Var) -> Var:
        self._check_var(a)
        return self._record("mean", (a.idx,), None, np.asarray(a.value.mean()))

    def concat(self, vars: list[Var], axis: int = 1) -> Var:
        for v in vars:
            self._check_var(v)
        values = [v.value for v in vars]
        try:
            out = np.concatenate(values, axis=axis)
        except ValueError as exc:
            raise TapeError(f"concat node {len(self._nodes)}: {exc}") from None
        return self._record("concat", tuple(v.idx for v in vars), axis, out)

    def blend(self, a: Var, b: Var, gate: Var) -> Var:
        """(1 - gate) * a + gate * b with a scalar gate."""
        self._check_var(a, b, gate)
        if gate.value.size != 1:
            raise TapeError(f"blend node {len(self._nodes)}: gate must be scalar")
        if a.shape != b.shape:
            raise TapeError(
                f"blend node {len(self._nodes)}: branch shapes differ {a.shape} vs {b.shape}"
            )
        mu = float(gate.value)
        return self._record(
            "blend", (a.idx, b.idx, gate.idx), None, (1.0 - mu) * a.value + mu * b.value
        )

    # -- conveniences built from the primitives ----------------------------

    def scale(self, a: Var, c: float) -> Var:
        return self.mul(a, self.const(float(c)))

    def sub(self, a: Var, b: Var) -> Var:
        return self.add(a, self.scale(b, -1.0))

    def square(self, a: Var) -> Var:
        return self.mul(a, a)

    def mse(self, a: Var, b: Var) -> Var:
        return self.mean(self.square(self.sub(a, b)))

    # -- execution ---------------------------------------------------------

    def forward(self, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Re-run the recorded program with fresh input bindings."""
        unknown = set(inputs) - set(self._inputs)
        if unknown:
            raise TapeError(f"unknown input name(s): {sorted(unknown)}")
        missing = set(self._inputs) - set(inputs)
        if missing:
            raise TapeError(f"unbound input(s): {sorted(missing)}")
        for name, idx in self._inputs.items():
            value = _as_f64(inputs[name])
            node = self._nodes[idx]
            if value.shape != node.value.shape:
                raise TapeError(
                    f"input node {idx} ({name!r}): shape {value.shape} "
                    f"!= recorded {node.value.shape}"
                )
            node.value = value
        for idx, node in enumerate(self._nodes):
            if node.op in ("input", "const"):
                continue
            node.value = self._eval(node)
        return {name: self._nodes[idx].value for name, idx in self._outputs.items()}

    def backward(self, output: str | Var, wrt: list[str]) -> dict[str, np.ndarray]:
        """Exact reverse-mode gradients of a scalar output w.r.t. named inputs."""
        out_idx = self._resolve_output(output)
        out_node = self._nodes[out_idx]
        if out_node.value.size != 1:
            raise TapeError(
                f"backward needs a scalar output; node {out_idx} has shape {out_node.value.shape}"
            )
        for name in wrt:
            if name not in self._inputs:
                raise TapeError(f"unknown input name {name!r}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[out_idx] = np.ones_like(out_node.value)
        for idx in range(out_idx, -1, -1):
            g = grads[idx]
            node = self._nodes[idx]
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, self._partials(node, g)):
                if grads[parent] is None:
                    grads[parent] = pg.copy()
                else:
                    grads[parent] += pg
        result = {}
        for name in wrt:
            idx = self._inputs[name]
            g = grads[idx]
            result[name] = np.zeros_like(self._nodes[idx].value) if g is None else g
        return result

    # -- internals ---------------------------------------------------------

    def _record(self, op: str, parents: tuple[int, ...], aux, value: np.ndarray) -> Var:
        self._nodes.append(_Node(op, parents, aux, value))
        return Var(self, len(self._nodes) - 1)

    def _check_var(self, *vars: Var) -> None:
        for v in vars:
            if v.tape is not self:
                raise TapeError("mixing variables from different tapes")

    def _binary(self, op: str, a: Var, b: Var) -> Var:
        self._check_var(a, b)
        try:
            out = np.add(a.value, b.value) if op == "add" else np.multiply(a.value, b.value)
        except ValueError:
            raise TapeError(
                f"{op} node {len(self._nodes)}: shapes {a.shape} and {b.shape} "
                "do not broadcast"
            ) from None
        return self._record(op, (a.idx, b.idx), None, out)

    def _resolve_output(self, output: str | Var) -> int:
        if isinstance(output, Var):
            self._check_var(output)
            return output.idx
        if output not in self._outputs:
            raise TapeError(f"unknown output name {output!r}")
        return self._outputs[output]

    def _eval(self, node: _Node) -> np.ndarray:
        p = [self._nodes[i].value for i in node.parents]
        op = node.op
        if op == "add":
            return p[0] + p[1]
        if op == "mul":
            return p[0] * p[1]
        if op == "matmul":
            return p[0] @ p[1]
        if op == "affine":
            return p[0] @ p[1] + p[2]
        if op == "tanh":
            return np.tanh(p[0])
        if op == "huber":
            return _huber(p[0], node.aux)
        if op == "sum":
            return np.asarray(p[0].sum())
        if op == "mean":
            return np.asarray(p[0].mean())
        if op == "concat":
            return np.concatenate(p, axis=node.aux)
        if op == "blend":
            mu = float(p[2])
            return (1.0 - mu) * p[0] + mu * p[1]
        raise TapeError(f"unknown op {op!r}")

    def _partials(self, node: _Node, g: np.ndarray) -> list[np.ndarray]:
        p = [self._nodes[i].value for i in node.parents]
        op = node.op
        if op == "add":
            return [_unbroadcast(g, p[0].shape), _unbroadcast(g, p[1].shape)]
        if op == "mul":
            return [_unbroadcast(g * p[1], p[0].shape), _unbroadcast(g * p[0], p[1].shape)]
        if op == "matmul":
            return [g @ p[1].T, p[0].T @ g]
        if op == "affine":
            return [g @ p[1].T, p[0].T @ g, g.sum(axis=0)]
        if op == "tanh":
            return [g * (1.0 - node.value**2)]
        if op == "huber":
            return [g * np.clip(p[0], -node.aux, node.aux)]
        if op == "sum":
            return [np.broadcast_to(g, p[0].shape)]
        if op == "mean":
            return [np.broadcast_to(g / p[0].size, p[0].shape)]
        if op == "concat":
            axis = node.aux
            sizes = [v.shape[axis] for v in p]
            cuts = np.cumsum(sizes)[:-1]
            return list(np.split(g, cuts, axis=axis))
        if op == "blend":
            mu = float(p[2])
            gmu = np.asarray((g * (p[1] - p[0])).sum()).reshape(p[2].shape)
            return [(1.0 - mu) * g, mu * g, gmu]
        raise TapeError(f"unknown op {op!r}")


def _huber(a: np.ndarray, delta: float) -> np.ndarray:
    absa = np.abs(a)
    return np.where(absa <= delta, 0.5 * a * a, delta * (absa - 0.5 * delta))


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    step: float
    tol: float


def grad_check(
    tape: Tape,
    output: str | Var,
    wrt: str,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Relative error uses max(1, |a|, |b|) in the denominator so near-zero
    gradients are compared absolutely.
    """
    if step <= 0:
        raise TapeError("grad_check step must be positive")
    out_name = _output_name(tape, output)  # register before any forward pass
    analytic = tape.backward(output, [wrt])[wrt]
    bindings = {name: tape._nodes[idx].value.copy() for name, idx in tape._inputs.items()}
    base = bindings[wrt]
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = float(tape.forward(bindings)[out_name])
        flat[i] = saved - step
        lo = float(tape.forward(bindings)[out_name])
        flat[i] = saved
        num_flat[i] = (hi - lo) / (2.0 * step)
    tape.forward(bindings)  # restore recorded values
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= tol, step=step, tol=tol)


def _output_name(tape: Tape, output: str | Var) -> str:
    if isinstance(output, str):
        return output
    for name, idx in tape._outputs.items():
        if idx == output.idx:
            return name
    tape.output("_grad_check", output)
    return "_grad_check"
