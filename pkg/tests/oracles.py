"""Plain-numpy reference implementations shared by several test modules."""

import math

import numpy as np

from clwf.model import ToyEncoderClassifier


def dense_reference(model: ToyEncoderClassifier, x: np.ndarray, task: str) -> np.ndarray:
    """Plain-numpy forward with every task's factors folded into dense weights."""
    route = task if model.tasks[task] else None

    def lin(layer, h):
        return h @ layer.dense_weight(route).T + layer.shared_bias.data

    act = np.tanh if model.cfg.activation == "tanh" else (lambda v: np.maximum(v, 0.0))
    b, seq_len, _ = x.shape
    h = lin(model.input_proj, x.reshape(b * seq_len, -1))
    for i, block in enumerate(model.blocks):
        if model.attention:
            p = model.attention[i]
            q, k, v = (lin(p[r], h).reshape(b, seq_len, -1) for r in ("q", "k", "v"))
            s = np.einsum("bid,bjd->bij", q, k) / math.sqrt(q.shape[2])
            w = np.exp(s - s.max(axis=2, keepdims=True))
            w /= w.sum(axis=2, keepdims=True)
            h = h + lin(p["o"], np.einsum("bij,bjd->bid", w, v).reshape(b * seq_len, -1))
        h = h + act(lin(block, h))
    pooled = h.reshape(b, seq_len, -1).mean(axis=1)
    return pooled @ model.out_w.data.T + model.out_b.data
