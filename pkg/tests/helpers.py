"""Independent oracles shared by the test modules.

Nothing here calls into the code paths being checked except to build inputs.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from partialfl.nn_core import DenseLayer, Network


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def random_net(rng: np.random.Generator, dims, activations) -> Network:
    layers = [
        DenseLayer(rng.normal(0, 0.7, size=(a, b)), rng.normal(0, 0.3, size=b), act)
        for (a, b), act in zip(zip(dims, dims[1:]), activations)
    ]
    return Network(layers)


def straight_line_forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Row-by-row, element-by-element forward pass in pure Python."""
    out = []
    for row in np.asarray(x, dtype=float):
        h = [float(v) for v in row]
        for layer in net.layers:
            w, b = layer.weights, layer.bias
            z = [sum(h[i] * w[i, j] for i in range(len(h))) + b[j] for j in range(w.shape[1])]
            if layer.activation == "relu":
                h = [max(v, 0.0) for v in z]
            elif layer.activation == "tanh":
                h = [math.tanh(v) for v in z]
            else:
                h = z
        out.append(h)
    return np.array(out)


def naive_contrastive(anchors: np.ndarray, positives: np.ndarray, tau: float, inter_modal: bool = False) -> float:
    """Mean of -log(exp(pos) / (sum of exp over the negatives + exp(pos))), written out term by term."""
    b = len(anchors)
    total = 0.0
    for i in range(b):
        pos = math.exp(float(np.dot(anchors[i], positives[i])) / tau)
        denom = pos
        for j in range(b):
            if j == i:
                continue
            denom += math.exp(float(np.dot(anchors[i], anchors[j])) / tau)
            if inter_modal:
                denom += math.exp(float(np.dot(anchors[i], positives[j])) / tau)
        total += -math.log(pos / denom)
    return total / b


def naive_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for row, y in zip(logits, labels):
        exps = [math.exp(float(v)) for v in row]
        total += -math.log(exps[int(y)] / sum(exps))
    return total / len(labels)


def reference_adam(x0: float, grad_fn, steps: int, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8) -> list[float]:
    """Scalar Adam written from the textbook recurrences."""
    x, m, v = x0, 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(x)
    return path


def loop_uar(preds, labels) -> float:
    """Per-class recall loop; the mean is exact and rounded once at the end."""
    total, classes = Fraction(0), 0
    for c in sorted(set(int(l) for l in labels)):
        idx = [i for i, l in enumerate(labels) if int(l) == c]
        total += Fraction(sum(1 for i in idx if int(preds[i]) == c), len(idx))
        classes += 1
    return float(total / classes)


def sort_top_k(logits, labels, k) -> float:
    hits = 0
    for row, y in zip(logits, labels):
        ranked = sorted(range(len(row)), key=lambda c: (-float(row[c]), c))
        hits += int(int(y) in ranked[:k])
    return hits / len(labels)


def fd_array(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return grad


# One line per acceptance criterion, echoed by conftest at the end of the session.
CRITERIA_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'} | {detail}"
    CRITERIA_LINES.append(line)
    print(line)
