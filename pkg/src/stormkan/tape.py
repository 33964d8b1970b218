"""Reverse-mode automatic differentiation on an explicit tape.

Every forward op appends a TapeNode holding the op id, the indices of
its parent nodes, the output array, and a backward rule (a closure over
whatever forward context the rule needs).  ``Tape.backprop`` walks the
nodes in reverse, accumulating output-gradients and handing each node's
contribution to its parents.

A tape is confined to one logical thread while it is being built and
differentiated; independent tapes may run concurrently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .errors import NumericsError, ShapeError
from .tensor import Parameter, Tensor


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward", "requires_grad")

    def __init__(self, op, inputs, output, backward, requires_grad):
        self.op = op
        self.inputs = inputs          # indices of parent nodes
        self.output = output          # np.ndarray
        self.backward = backward      # grad_out -> tuple of parent grads
        self.requires_grad = requires_grad


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.idx].output

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.idx].requires_grad

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


class Gradients:
    """Backprop result: per-node gradients for retained (leaf) nodes."""

    def __init__(self, tape: "Tape", by_idx: dict[int, np.ndarray]):
        self._tape = tape
        self._by_idx = by_idx

    def wrt(self, var: Var) -> np.ndarray:
        node = self._tape.nodes[var.idx]
        grad = self._by_idx.get(var.idx)
        if grad is None:
            return np.zeros_like(node.output)
        return grad

    def wrt_param(self, param: Parameter) -> np.ndarray:
        idx = self._tape._param_idx.get(id(param))
        if idx is None:
            # parameter never touched this tape: disconnected, zero grad
            return np.zeros_like(param.data)
        grad = self._by_idx.get(idx)
        if grad is None:
            return np.zeros_like(param.data)
        return grad


class Tape:
    """Records ops for one forward pass and replays them backward.

    checked=True validates that every op output is finite, raising
    NumericsError otherwise (off by default; gradient/acceptance tests
    turn it on, benchmarks leave it off).
    """

    def __init__(self, checked: bool = False):
        self.nodes: list[TapeNode] = []
        self.checked = checked
        self._param_idx: dict[int, int] = {}

    # -- node creation -----------------------------------------------------

    def _append(self, op, inputs, output, backward, requires_grad) -> Var:
        if self.checked and not np.all(np.isfinite(output)):
            raise NumericsError(f"non-finite values in output of op '{op}'")
        self.nodes.append(TapeNode(op, inputs, output, backward, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, array, requires_grad: bool = False) -> Var:
        if isinstance(array, Tensor):
            array = array.data
        arr = np.asarray(array)
        return self._append("leaf", (), arr, None, requires_grad)

    def constant(self, array) -> Var:
        return self.leaf(array, requires_grad=False)

    def param(self, parameter: Parameter) -> Var:
        """Bind a Parameter as a differentiable leaf (cached per tape)."""
        idx = self._param_idx.get(id(parameter))
        if idx is not None:
            return Var(self, idx)
        var = self.leaf(parameter.data, requires_grad=True)
        self._param_idx[id(parameter)] = var.idx
        return var

    def release(self) -> None:
        """Drop all recorded nodes (frees activations and closures)."""
        self.nodes.clear()
        self._param_idx.clear()

    def record(
        self,
        op: str,
        inputs: Iterable[Var],
        output: np.ndarray,
        backward: Optional[Callable],
    ) -> Var:
        input_vars = tuple(inputs)
        for v in input_vars:
            if v.tape is not self:
                raise ShapeError("inputs belong to a different tape")
        requires = any(v.requires_grad for v in input_vars)
        idxs = tuple(v.idx for v in input_vars)
        return self._append(op, idxs, output, backward if requires else None,
                            requires)

    # -- reverse pass ------------------------------------------------------

    def backprop(self, loss: Var) -> Gradients:
        """Accumulate d(loss)/d(node) for every grad-requiring leaf.

        The loss must be scalar.  Intermediate gradient buffers are
        released as soon as their node has been processed, so peak
        memory stays near one forward pass.
        """
        if loss.tape is not self:
            raise ShapeError("loss belongs to a different tape")
        loss_node = self.nodes[loss.idx]
        if loss_node.output.size != 1:
            raise ShapeError(
                f"loss must be scalar, got shape {loss_node.output.shape}"
            )

        grads: dict[int, np.ndarray] = {
            loss.idx: np.ones_like(loss_node.output)
        }
        owned: set[int] = {loss.idx}
        retained: dict[int, np.ndarray] = {}
        for i in range(loss.idx, -1, -1):
            node = self.nodes[i]
            grad_out = grads.pop(i, None)
            owned.discard(i)
            if grad_out is None or not node.requires_grad:
                continue
            if node.backward is None:  # leaf
                retained[i] = grad_out
                continue
            parent_grads = node.backward(grad_out)
            for j, g in zip(node.inputs, parent_grads):
                if g is None or not self.nodes[j].requires_grad:
                    continue
                acc = grads.get(j)
                if acc is None:
                    # backward rules may hand out aliased arrays; only
                    # mutate buffers this loop has allocated itself
                    grads[j] = g
                elif j in owned:
                    acc += g
                else:
                    grads[j] = acc + g
                    owned.add(j)
            node.backward = None  # free saved forward context
        return Gradients(self, retained)
