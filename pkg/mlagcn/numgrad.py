"""Dense-matrix reverse-mode differentiation.

A ``Tape`` records every node in creation order, which is a valid topological
order because a node can only consume nodes that already exist. ``backward``
walks the tape once in reverse and accumulates gradients into every node that
depends on a leaf.

The primitive set is closed: every operation the model needs is an ``Op``
member with an exact forward formula and an analytic backward rule, and each
of them is covered by the finite-difference suite in ``mlagcn.gradcheck``.
"""
import enum

import numpy as np
import singer

from mlagcn.exceptions import ContractError, NonFiniteError, ShapeError, StateError

LOGGER = singer.get_logger()

# Rows of cosine_row_pairs with a smaller L2 norm produce all-zero rows.
EPS_NORM = 1e-12

# log() clamps its argument here.
LOG_FLOOR = 1e-12


class Op(enum.Enum):
    LEAF = "leaf"
    CONSTANT = "constant"
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    SCALE = "scale"
    HADAMARD = "hadamard"
    CONCAT_COLS = "concat_cols"
    ROW_SUM = "row_sum"
    TOTAL_SUM = "total_sum"
    MEAN = "mean"
    LOG = "log"
    POWER = "power"
    TRANSPOSE = "transpose"
    ADD_ROW = "add_row"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    ROW_SOFTMAX = "row_softmax"
    COSINE_ROW_PAIRS = "cosine_row_pairs"
    ROW_MAX = "row_max"
    CLAMP_MIN = "clamp_min"
    REVERSE_GRADIENT = "reverse_gradient"
    ABSOLUTE = "absolute"
    LOG_SIGMOID = "log_sigmoid"


def shape_str(shape):
    return "{}x{}".format(*shape)


def as_matrix(data, name="matrix"):
    """Copy ``data`` into a finite, non-empty 2-D float64 array."""
    array = np.array(data, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    if array.ndim != 2:
        raise ShapeError("{} must be 2-D, got {} dimension(s)".format(name, array.ndim))
    if array.shape[0] < 1 or array.shape[1] < 1:
        raise ShapeError("{} must have positive rows and cols, got {}".format(name, shape_str(array.shape)))
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("{} contains NaN or Inf entries".format(name))
    return array


class ExprNode:
    __slots__ = ("tape", "op", "inputs", "value", "grad", "attrs", "name", "requires_grad")

    def __init__(self, tape, op, inputs, value, attrs=None, name=None):
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = np.zeros_like(value)
        self.attrs = attrs or {}
        self.name = name
        if op == Op.LEAF:
            self.requires_grad = True
        elif op == Op.CONSTANT:
            self.requires_grad = False
        else:
            self.requires_grad = any(node.requires_grad for node in inputs)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op.value
        return "ExprNode({}, {})".format(label, shape_str(self.shape))


class Tape:
    """Records nodes in creation order and runs one backward pass per reset."""

    def __init__(self):
        self.nodes = []
        self.leaf_index = {}
        self._backward_done = False

    def leaf(self, name, data):
        """Learnable input. Asking for the same ``name`` twice returns the same node."""
        if name in self.leaf_index:
            return self.leaf_index[name]
        node = ExprNode(self, Op.LEAF, (), as_matrix(data, name), name=name)
        self.nodes.append(node)
        self.leaf_index[name] = node
        return node

    def constant(self, data, name=None):
        node = ExprNode(self, Op.CONSTANT, (), as_matrix(data, name or "constant"), name=name)
        self.nodes.append(node)
        return node

    def record(self, op, inputs, value, **attrs):
        for node in inputs:
            if node.tape is not self:
                raise ContractError("{} belongs to a different tape".format(node))
        node = ExprNode(self, op, tuple(inputs), value, attrs=attrs)
        self.nodes.append(node)
        return node

    def backward(self, root):
        if root.tape is not self:
            raise ContractError("backward root {} is not on this tape".format(root))
        if root.shape != (1, 1):
            raise ContractError("backward needs a 1x1 root, got {}".format(shape_str(root.shape)))
        if self._backward_done:
            raise StateError("backward already ran on this tape; call reset() first")
        self._backward_done = True

        root.grad[0, 0] = 1.0
        for node in reversed(self.nodes):
            if not node.inputs or not node.requires_grad:
                continue
            input_grads = _BACKWARD[node.op](node, node.grad)
            for parent, grad in zip(node.inputs, input_grads):
                if parent.requires_grad and grad is not None:
                    parent.grad += grad
        return self.gradients()

    def gradients(self):
        return {name: node.grad.copy() for name, node in self.leaf_index.items()}

    def reset(self):
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        self._backward_done = False


def backward(tape, root):
    """Gradient of the scalar ``root`` with respect to every leaf, keyed by leaf name."""
    return tape.backward(root)


def detach(node):
    """Same value, no gradient flow."""
    return node.tape.constant(node.value)


# Forward rules

def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: cannot multiply {} by {}".format(shape_str(a.shape), shape_str(b.shape)))
    return a.tape.record(Op.MATMUL, (a, b), a.value @ b.value)


def _same_shape(op_name, a, b):
    if a.shape != b.shape:
        raise ShapeError("{}: shapes {} and {} differ".format(op_name, shape_str(a.shape), shape_str(b.shape)))


def add(a, b):
    _same_shape("add", a, b)
    return a.tape.record(Op.ADD, (a, b), a.value + b.value)


def sub(a, b):
    _same_shape("sub", a, b)
    return a.tape.record(Op.SUB, (a, b), a.value - b.value)


def scale(x, factor):
    factor = float(factor)
    return x.tape.record(Op.SCALE, (x,), x.value * factor, factor=factor)


def hadamard(a, b):
    _same_shape("hadamard", a, b)
    return a.tape.record(Op.HADAMARD, (a, b), a.value * b.value)


def concat_cols(a, b):
    if a.shape[0] != b.shape[0]:
        raise ShapeError("concat_cols: row counts of {} and {} differ".format(shape_str(a.shape), shape_str(b.shape)))
    return a.tape.record(Op.CONCAT_COLS, (a, b), np.concatenate([a.value, b.value], axis=1))


def row_sum(x):
    return x.tape.record(Op.ROW_SUM, (x,), x.value.sum(axis=1, keepdims=True))


def total_sum(x):
    return x.tape.record(Op.TOTAL_SUM, (x,), np.array([[x.value.sum()]]))


def mean(x):
    return x.tape.record(Op.MEAN, (x,), np.array([[x.value.mean()]]))


def log(x, floor=LOG_FLOOR):
    return x.tape.record(Op.LOG, (x,), np.log(np.maximum(x.value, floor)), floor=floor)


def power(x, exponent):
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.power(x.value, exponent)
    return x.tape.record(Op.POWER, (x,), value, exponent=exponent)


def transpose(x):
    return x.tape.record(Op.TRANSPOSE, (x,), x.value.T.copy())


def add_row(x, row):
    """Add the 1 x c ``row`` to every row of ``x``."""
    if row.shape != (1, x.shape[1]):
        raise ShapeError("add_row: row {} does not broadcast over {}".format(shape_str(row.shape), shape_str(x.shape)))
    return x.tape.record(Op.ADD_ROW, (x, row), x.value + row.value)


def leaky_relu(x, slope):
    slope = float(slope)
    if not np.isfinite(slope) or not 0.0 < slope < 1.0:
        raise ContractError("leaky_relu slope must lie in (0, 1), got {}".format(slope))
    value = np.where(x.value >= 0.0, x.value, slope * x.value)
    return x.tape.record(Op.LEAKY_RELU, (x,), value, slope=slope)


def _stable_sigmoid(values):
    out = np.empty_like(values)
    positive = values >= 0.0
    out[positive] = 1.0 / (1.0 + np.exp(-values[positive]))
    exp_neg = np.exp(values[~positive])
    out[~positive] = exp_neg / (1.0 + exp_neg)
    return out


def sigmoid(x):
    return x.tape.record(Op.SIGMOID, (x,), _stable_sigmoid(x.value))


def log_sigmoid(x):
    """log(sigmoid(x)) straight from the logits; the gradient is sigmoid(-x) and never vanishes for x << 0."""
    return x.tape.record(Op.LOG_SIGMOID, (x,), -np.logaddexp(0.0, -x.value))


def absolute(x):
    return x.tape.record(Op.ABSOLUTE, (x,), np.abs(x.value))


def row_softmax(x):
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return x.tape.record(Op.ROW_SOFTMAX, (x,), exps / exps.sum(axis=1, keepdims=True))


def _unit_rows(values):
    norms = np.sqrt((values * values).sum(axis=1))
    keep = norms >= EPS_NORM
    safe = np.where(keep, norms, 1.0)
    units = values / safe[:, None] * keep[:, None]
    return units, safe, keep


def cosine_row_pairs(f):
    units, _, _ = _unit_rows(f.value)
    sims = units @ units.T
    sims = 0.5 * (sims + sims.T)
    return f.tape.record(Op.COSINE_ROW_PAIRS, (f,), sims)


def row_max(x):
    """Per-row maximum as an r x 1 column; gradient goes to the first argmax."""
    argmax = np.argmax(x.value, axis=1)
    value = x.value[np.arange(x.shape[0]), argmax][:, None]
    return x.tape.record(Op.ROW_MAX, (x,), value, argmax=argmax)


def clamp_min(x, floor):
    floor = float(floor)
    return x.tape.record(Op.CLAMP_MIN, (x,), np.maximum(x.value, floor), floor=floor)


def reverse_gradient(x, factor):
    """Identity forward; backward multiplies the incoming gradient by ``-factor``."""
    factor = float(factor)
    if not np.isfinite(factor) or factor < 0.0:
        raise ContractError("gradient reversal factor must be finite and >= 0, got {}".format(factor))
    return x.tape.record(Op.REVERSE_GRADIENT, (x,), x.value.copy(), factor=factor)


# Compositions of primitives

def concat_rows(a, b):
    return transpose(concat_cols(transpose(a), transpose(b)))


def one_minus(x):
    ones = x.tape.constant(np.ones(x.shape))
    return sub(ones, x)


# Backward rules: (node, upstream gradient) -> one gradient per input

def _matmul_backward(node, grad):
    a, b = node.inputs
    return grad @ b.value.T, a.value.T @ grad


def _add_backward(node, grad):
    return grad, grad


def _sub_backward(node, grad):
    return grad, -grad


def _scale_backward(node, grad):
    return (grad * node.attrs["factor"],)


def _hadamard_backward(node, grad):
    a, b = node.inputs
    return grad * b.value, grad * a.value


def _concat_cols_backward(node, grad):
    split = node.inputs[0].shape[1]
    return grad[:, :split], grad[:, split:]


def _row_sum_backward(node, grad):
    return (np.broadcast_to(grad, node.inputs[0].shape).copy(),)


def _total_sum_backward(node, grad):
    return (np.full(node.inputs[0].shape, grad[0, 0]),)


def _mean_backward(node, grad):
    x = node.inputs[0]
    return (np.full(x.shape, grad[0, 0] / x.value.size),)


def _log_backward(node, grad):
    x = node.inputs[0].value
    floor = node.attrs["floor"]
    return (np.where(x > floor, grad / np.maximum(x, floor), 0.0),)


def _power_backward(node, grad):
    x = node.inputs[0].value
    exponent = node.attrs["exponent"]
    if exponent == 0.0:
        return (np.zeros_like(x),)
    with np.errstate(divide="ignore", invalid="ignore"):
        local = exponent * np.power(x, exponent - 1.0)
    # at a zero base only exponent 1 has a finite nonzero slope
    local = np.where(x == 0.0, 1.0 if exponent == 1.0 else 0.0, local)
    return (grad * local,)


def _transpose_backward(node, grad):
    return (grad.T.copy(),)


def _add_row_backward(node, grad):
    return grad, grad.sum(axis=0, keepdims=True)


def _leaky_relu_backward(node, grad):
    x = node.inputs[0].value
    return (np.where(x >= 0.0, grad, node.attrs["slope"] * grad),)


def _sigmoid_backward(node, grad):
    s = node.value
    return (grad * s * (1.0 - s),)


def _log_sigmoid_backward(node, grad):
    return (grad * _stable_sigmoid(-node.inputs[0].value),)


def _absolute_backward(node, grad):
    return (grad * np.sign(node.inputs[0].value),)


def _row_softmax_backward(node, grad):
    s = node.value
    return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


def _cosine_row_pairs_backward(node, grad):
    units, safe, keep = _unit_rows(node.inputs[0].value)
    d_units = (grad + grad.T) @ units
    radial = (d_units * units).sum(axis=1, keepdims=True)
    return ((d_units - radial * units) / safe[:, None] * keep[:, None],)


def _row_max_backward(node, grad):
    x = node.inputs[0]
    out = np.zeros(x.shape)
    out[np.arange(x.shape[0]), node.attrs["argmax"]] = grad[:, 0]
    return (out,)


def _clamp_min_backward(node, grad):
    x = node.inputs[0].value
    return (np.where(x > node.attrs["floor"], grad, 0.0),)


def _reverse_gradient_backward(node, grad):
    return (-node.attrs["factor"] * grad,)


_BACKWARD = {
    Op.MATMUL: _matmul_backward,
    Op.ADD: _add_backward,
    Op.SUB: _sub_backward,
    Op.SCALE: _scale_backward,
    Op.HADAMARD: _hadamard_backward,
    Op.CONCAT_COLS: _concat_cols_backward,
    Op.ROW_SUM: _row_sum_backward,
    Op.TOTAL_SUM: _total_sum_backward,
    Op.MEAN: _mean_backward,
    Op.LOG: _log_backward,
    Op.POWER: _power_backward,
    Op.TRANSPOSE: _transpose_backward,
    Op.ADD_ROW: _add_row_backward,
    Op.LEAKY_RELU: _leaky_relu_backward,
    Op.SIGMOID: _sigmoid_backward,
    Op.ROW_SOFTMAX: _row_softmax_backward,
    Op.COSINE_ROW_PAIRS: _cosine_row_pairs_backward,
    Op.ROW_MAX: _row_max_backward,
    Op.CLAMP_MIN: _clamp_min_backward,
    Op.REVERSE_GRADIENT: _reverse_gradient_backward,
    Op.ABSOLUTE: _absolute_backward,
    Op.LOG_SIGMOID: _log_sigmoid_backward,
}


def finite_diff_grad(f, p, h=1e-6):
    """Central-difference gradient of the scalar function ``f`` at matrix ``p``."""
    if not h > 0.0:
        raise ContractError("finite difference step must be > 0, got {}".format(h))
    p = as_matrix(p, "p")
    grad = np.zeros_like(p)
    for index in np.ndindex(*p.shape):
        plus = p.copy()
        plus[index] += h
        minus = p.copy()
        minus[index] -= h
        grad[index] = (float(f(plus)) - float(f(minus))) / (2.0 * h)
    return grad
