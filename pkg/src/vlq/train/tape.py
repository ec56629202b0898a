"""A small reverse-mode tape over numpy arrays.

Every recorded node keeps its value, its parents and a closure mapping the
upstream gradient to one gradient per parent. Nodes are appended in creation
order, which is a topological order, so walking the list backwards visits
each node only after all of its consumers.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents", "backward", "needs_grad", "index", "name")

    def __init__(self, value, parents, backward, needs_grad, index, name=None):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.needs_grad = needs_grad
        self.index = index
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var({self.name or self.index}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def _push(self, value, parents=(), backward=None, needs_grad=False, name=None) -> Var:
        v = Var(value, parents, backward, needs_grad, len(self.nodes), name)
        self.nodes.append(v)
        return v

    def leaf(self, value, name=None) -> Var:
        """A differentiable input."""
        return self._push(np.asarray(value, dtype=np.float64), needs_grad=True, name=name)

    def const(self, value, name=None) -> Var:
        return self._push(value, name=name)

    def record(self, value, parents, backward, name=None) -> Var:
        """Add an op node; ``backward(g)`` returns one gradient (or None) per parent."""
        parents = tuple(parents)
        if not any(p.needs_grad for p in parents):
            return self._push(value, name=name)
        return self._push(value, parents, backward, True, name)

    def backward(self, root: Var, seed=None) -> dict:
        """Gradients of ``root`` with respect to every leaf it depends on.

        Returns a mapping from leaf ``Var`` to gradient array. Intermediate
        gradients are dropped as soon as they have been propagated.
        """
        if not root.needs_grad:
            return {}
        grads = {root.index: np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)}
        leaves = {}
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.backward is None:
                leaves[node] = g
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.needs_grad:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        return leaves
