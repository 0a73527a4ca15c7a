"""Independent, deliberately naive reference implementations.

Everything in this module is written for obviousness, not speed: explicit
loops, no shared code with the production kernels.  Tests use these as
ground truth, and the golden fixtures under ``tests/fixtures`` are emitted
by these functions.

Fixture files are plain text: a first line with the shape, then the values
with 17 significant digits, whitespace-separated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor

__all__ = [
    "conv2d_naive",
    "grad_check",
    "GradCheckReport",
    "rma_scalar_oracle",
    "mgfb_scalar_oracle",
    "save_fixture",
    "load_fixture",
]


def conv2d_naive(x, weight, bias=None, stride=1, padding=None, groups=1):
    """Direct sextuple-loop cross-correlation with zero padding."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    cin, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    if cin != cin_g * groups:
        raise ValueError(f"{cin} input channels incompatible with groups={groups}")
    pad = k // 2 if padding is None else padding
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    cout_g = cout // groups
    for o in range(cout):
        g = o // cout_g
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin_g):
                    for u in range(k):
                        for v in range(k):
                            yy = i * stride + u - pad
                            xx = j * stride + v - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += weight[o, ci, u, v] * x[g * cin_g + ci, yy, xx]
                out[o, i, j] = acc
        if bias is not None:
            out[o] += bias[o]
    return out


@dataclass
class GradCheckReport:
    """Per-input maximum relative error of tape vs finite differences."""

    max_rel_errors: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_errors)

    @property
    def worst(self) -> float:
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(f, inputs, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Central-difference check of the tape gradient of ``f(inputs)``.

    ``f`` maps a list of tensors to a scalar tensor.  Every coordinate of
    every input is perturbed by +-eps, so keep the total size small.
    """
    leaves = [Tensor(np.array(t.data, copy=True), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = f(leaves)
        if out.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
        tape.backward(out)
    analytic = [leaf.grad_or_zeros() for leaf in leaves]

    def value_at(datas) -> float:
        ts = [Tensor(d) for d in datas]
        return f(ts).item()

    errors = []
    for idx, leaf in enumerate(leaves):
        worst = 0.0
        flat = leaf.data.reshape(-1)
        aflat = analytic[idx].reshape(-1)
        for pos in range(flat.size):
            orig = flat[pos]
            datas = [np.array(l.data, copy=True) for l in leaves]
            datas[idx].reshape(-1)[pos] = orig + eps
            plus = value_at(datas)
            datas[idx].reshape(-1)[pos] = orig - eps
            minus = value_at(datas)
            fd = (plus - minus) / (2.0 * eps)
            worst = max(worst, _rel_err(aflat[pos], fd))
        errors.append(worst)
    return GradCheckReport(errors, tol)


# -- scalar transcriptions of the two attention-path blocks -----------------
#
# These walk the block pipelines value by value with plain loops under the
# same conventions as the production code (mask applied to q and k before
# row normalization, softmax over rows, activation on the first branch).


def _conv1x1_loops(x, w, b):
    cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = 0.0 if b is None else b[o]
                for c in range(cin):
                    acc += w[o, c, 0, 0] * x[c, i, j]
                out[o, i, j] = acc
    return out


def _dwconv_loops(x, w, b):
    c, h, wd = x.shape
    k = w.shape[2]
    pad = k // 2
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(h):
            for j in range(wd):
                acc = 0.0 if b is None else b[ch]
                for u in range(k):
                    for v in range(k):
                        yy, xx = i + u - pad, j + v - pad
                        if 0 <= yy < h and 0 <= xx < wd:
                            acc += w[ch, 0, u, v] * x[ch, yy, xx]
                out[ch, i, j] = acc
    return out


def rma_scalar_oracle(x, weights, mask_binary=None, mask_gain=None, eps=1e-12):
    """Single-head masked channel attention, written out longhand.

    ``weights`` holds qkv_w, dw_w, dw_b, temperature (scalar), proj_w,
    proj_b.  Limits: C <= 4 channels, spatial <= 4x4.
    """
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    if c > 4 or h > 4 or w > 4:
        raise ValueError("scalar oracle is limited to C<=4 and 4x4 spatial")
    qkv = _conv1x1_loops(x, weights["qkv_w"], None)
    qkv = _dwconv_loops(qkv, weights["dw_w"], weights["dw_b"])
    q, k, v = qkv[:c], qkv[c : 2 * c], qkv[2 * c :]
    if mask_binary is not None:
        q = q.copy()
        k = k.copy()
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    q[ch, i, j] = q[ch, i, j] * mask_binary[0, i, j] * mask_gain[ch]
                    k[ch, i, j] = k[ch, i, j] * mask_binary[0, i, j] * mask_gain[ch]
    s = h * w
    qf, kf, vf = q.reshape(c, s), k.reshape(c, s), v.reshape(c, s)

    def normalize_rows(mat):
        out = np.zeros_like(mat)
        for r in range(mat.shape[0]):
            norm = math.sqrt(sum(mat[r, t] * mat[r, t] for t in range(s)))
            denom = norm if norm > eps else eps
            for t in range(s):
                out[r, t] = mat[r, t] / denom
        return out

    qn, kn = normalize_rows(qf), normalize_rows(kf)
    scores = np.zeros((c, c))
    for a in range(c):
        for b in range(c):
            scores[a, b] = weights["temperature"] * sum(
                qn[a, t] * kn[b, t] for t in range(s)
            )
    attn = np.zeros((c, c))
    for a in range(c):
        mx = max(scores[a])
        exps = [math.exp(scores[a, b] - mx) for b in range(c)]
        tot = sum(exps)
        for b in range(c):
            attn[a, b] = exps[b] / tot
    out = np.zeros((c, s))
    for a in range(c):
        for t in range(s):
            out[a, t] = sum(attn[a, b] * vf[b, t] for b in range(c))
    return _conv1x1_loops(out.reshape(c, h, w), weights["proj_w"], weights["proj_b"])


def mgfb_scalar_oracle(x, weights, n, kernels, expansion, activation="gelu"):
    """Mixed-scale gated feed-forward, written out longhand.

    ``weights`` holds expand_w/b, dw_w/b, branch{i}_w/b, proj_w/b.
    """
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[0]
    if c > 4 or x.shape[1] > 4 or x.shape[2] > 4:
        raise ValueError("scalar oracle is limited to C<=4 and 4x4 spatial")
    m = _conv1x1_loops(x, weights["expand_w"], weights["expand_b"])
    m = _dwconv_loops(m, weights["dw_w"], weights["dw_b"])
    group = (c * expansion) // n
    branches = []
    for i in range(n):
        part = m[i * group : (i + 1) * group]
        conv = _dwconv_loops(part, weights[f"branch{i}_w"], weights[f"branch{i}_b"])
        branches.append(conv + part)
    gate = np.zeros_like(branches[0])
    flat = branches[0].reshape(-1)
    gflat = gate.reshape(-1)
    for t in range(flat.size):
        if activation == "gelu":
            gflat[t] = flat[t] * 0.5 * (1.0 + math.erf(flat[t] / math.sqrt(2.0)))
        else:
            gflat[t] = flat[t] if flat[t] > 0.0 else 0.0
    for i in range(1, n):
        gate = gate * branches[i]
    return _conv1x1_loops(gate, weights["proj_w"], weights["proj_b"])


# -- golden fixtures ---------------------------------------------------------


def save_fixture(path, array):
    array = np.asarray(array, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(" ".join(str(d) for d in array.shape) + "\n")
        fh.write(" ".join(f"{v:.17g}" for v in array.reshape(-1)) + "\n")


def load_fixture(path) -> np.ndarray:
    with open(path) as fh:
        shape = tuple(int(s) for s in fh.readline().split())
        values = [float(v) for v in fh.readline().split()]
    return np.array(values).reshape(shape)
