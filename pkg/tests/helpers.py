"""Shared test oracles: finite differences and scalar reference math.

Everything here is independent of the library's autodiff path; oracles use
plain Python loops or direct numpy formulas in float64.
"""

from __future__ import annotations

import math

import numpy as np

from promptedit.tensor import Tape, Tensor, backward


def analytic_grads(make_loss, params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape():
        loss = make_loss()
        backward(loss)
    grads = []
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        grads.append(p.grad.copy())
        p.zero_grad()
    return grads


def finite_diff_grads(make_loss, params: list[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences; make_loss() must rebuild the graph each call."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise |a-b| normalized by max(|a|, |b|, 1)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / denom).max())


def grad_check(make_loss, params: list[Tensor], h: float = 1e-3) -> float:
    an = analytic_grads(make_loss, params)
    fd = finite_diff_grads(make_loss, params, h=h)
    return max(max_rel_err(a, f) for a, f in zip(an, fd))


def sampled_grad_check(make_loss, params: list[Tensor], rng: np.random.Generator, per_tensor: int = 4, h: float = 1e-3) -> float:
    """FD on a random subset of coordinates of each parameter tensor."""
    an = analytic_grads(make_loss, params)
    worst = 0.0
    for p, a in zip(params, an):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        count = min(per_tensor, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(fd), 1.0)
            worst = max(worst, abs(aflat[i] - fd) / denom)
    return worst


def softmax_oracle(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def cross_entropy_oracle(logits: np.ndarray, target: int) -> float:
    p = softmax_oracle(logits)
    return float(-math.log(p[target]))


def kl_oracle(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Direct double loop over rows and classes."""
    p2 = np.atleast_2d(np.asarray(p_logits, dtype=np.float64))
    q2 = np.atleast_2d(np.asarray(q_logits, dtype=np.float64))
    total = 0.0
    for pr, qr in zip(p2, q2):
        pp = softmax_oracle(pr)
        qq = softmax_oracle(qr)
        for i in range(pp.size):
            total += pp[i] * (math.log(pp[i]) - math.log(qq[i]))
    return total / p2.shape[0]


def info_nce_oracle(q: np.ndarray, k_plus_idx: int, candidates: list[np.ndarray], tau: float) -> float:
    scores = [float(np.dot(np.asarray(q, dtype=np.float64), np.asarray(c, dtype=np.float64))) / tau for c in candidates]
    m = max(scores)
    denom = sum(math.exp(s - m) for s in scores)
    return float(-(scores[k_plus_idx] - m - math.log(denom)))


def _ref_softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _ref_ln(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = x.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _ref_gelu(x: np.ndarray) -> np.ndarray:
    c = 0.7978845608028654
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _ref_block(P: dict, prefix: str, x: np.ndarray, n_heads: int, causal: bool) -> np.ndarray:
    t, d = x.shape
    hd = d // n_heads
    h = _ref_ln(x, P[f"{prefix}.ln1.gamma"], P[f"{prefix}.ln1.beta"])
    q = h @ P[f"{prefix}.attn.wq.w"] + P[f"{prefix}.attn.wq.b"]
    k = h @ P[f"{prefix}.attn.wk.w"] + P[f"{prefix}.attn.wk.b"]
    v = h @ P[f"{prefix}.attn.wv.w"] + P[f"{prefix}.attn.wv.b"]
    heads = []
    for i in range(n_heads):
        qh, kh, vh = (m[:, i * hd : (i + 1) * hd] for m in (q, k, v))
        scores = qh @ kh.T / math.sqrt(hd)
        if causal:
            scores = scores + np.triu(np.full((t, t), -1e9), k=1)
        heads.append(_ref_softmax_rows(scores) @ vh)
    x = x + np.concatenate(heads, axis=1) @ P[f"{prefix}.attn.wo.w"] + P[f"{prefix}.attn.wo.b"]
    h = _ref_ln(x, P[f"{prefix}.ln2.gamma"], P[f"{prefix}.ln2.beta"])
    h = _ref_gelu(h @ P[f"{prefix}.ffn.fc1.w"] + P[f"{prefix}.ffn.fc1.b"])
    return x + h @ P[f"{prefix}.ffn.fc2.w"] + P[f"{prefix}.ffn.fc2.b"]


def reference_lm_logits(lm, prompt: np.ndarray | None, ids) -> np.ndarray:
    """Plain-numpy float64 forward of the decoder; independent of the op library."""
    P = {name: p.data.astype(np.float64) for name, p in lm.params.items()}
    x = P["tok_emb"][list(ids)]
    if prompt is not None:
        x = np.vstack([prompt.astype(np.float64), x])
    x = x + P["pos_emb"][: x.shape[0]]
    for i in range(lm.config.n_layers):
        x = _ref_block(P, f"layer{i}", x, lm.config.n_heads, causal=True)
    x = _ref_ln(x, P["ln_f.gamma"], P["ln_f.beta"])
    return x @ P["head.w"] + P["head.b"]


def reference_greedy(lm, prompt: np.ndarray | None, ids, max_new: int, stops: tuple[int, ...]) -> list[int]:
    out: list[int] = []
    while len(out) < max_new:
        logits = reference_lm_logits(lm, prompt, list(ids) + out)
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        if nxt in stops:
            break
    return out
