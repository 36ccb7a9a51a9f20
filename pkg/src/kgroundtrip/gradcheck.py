"""Analytic-vs-finite-difference gradient comparison on small random GCTs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import cohort, gct
from .numerics import KL_EPS, finite_difference_grad


@dataclass
class Instance:
    model: gct.GctModel
    batch: cohort.Batch


def random_instance(seed: int, max_tokens: int = 6, embed_dim: int = 8, num_blocks: int = 3,
                    mlp_hidden: int = 8, n_visits: int = 2, spread: float = 2.0) -> Instance:
    """A padded batch of random visits (<= max_tokens each) and a random model."""
    rng = np.random.default_rng(seed)
    diags = [f"D{i}" for i in range(4)]
    procs = [f"P{i}" for i in range(4)]
    visits = []
    for v in range(n_visits):
        n = int(rng.integers(2, max_tokens + 1))
        nd = int(rng.integers(1, n))
        d = sorted(rng.choice(diags, size=min(nd, 4), replace=False).tolist())
        p = sorted(rng.choice(procs, size=min(n - len(d), 4), replace=False).tolist())
        visits.append(cohort.VisitRecord(f"g{v}", d, p, int(rng.integers(0, 2))))
    if len({v.label for v in visits}) == 1:
        visits[0].label = 1 - visits[0].label
    # extra visits only shape the conditional table
    extra = [cohort.VisitRecord(f"x{i}", sorted(rng.choice(diags, 2, replace=False).tolist()),
                                sorted(rng.choice(procs, 2, replace=False).tolist()), 0) for i in range(6)]
    table = cohort.count_cooccurrence(visits + extra)
    vocab = sorted({c for v in visits for c in v.tokens})
    batch = cohort.encode_batch(visits, table, max_tokens, vocab)
    cfg = gct.GctConfig(num_blocks=num_blocks, embed_dim=embed_dim, mlp_hidden=mlp_hidden,
                        lam=float(rng.uniform(0.5, 2.0)), seed=int(rng.integers(2 ** 31)))
    model = gct.init_model(cfg, vocab)
    # widen weights so attentions are far from uniform
    for k in model.params:
        model.params[k] *= spread
    model.params["embed"][0] = 0.0
    return Instance(model, batch)


def compare(inst: Instance, mode: str, h: float = 1e-5) -> Dict[str, np.ndarray]:
    """Return {'analytic': ..., 'numeric': ...} flattened over all weights."""
    cfg = inst.model.cfg
    params = {k: v.copy() for k, v in inst.model.params.items()}
    _, grads = gct.loss_and_grads(params, inst.batch, cfg.num_blocks, cfg.lam, mode)

    num = finite_difference_grad_vectorized(params, inst.batch, cfg.num_blocks, cfg.lam, mode, h)
    keys = sorted(params)
    return {"analytic": np.concatenate([grads[k].ravel() for k in keys]),
            "numeric": np.concatenate([num[k].ravel() for k in keys])}


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|) over coordinates where |a| > floor."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    sel = np.abs(a) > floor
    if not np.any(sel):
        return 0.0
    return float(np.max(np.abs(a[sel] - n[sel]) / np.maximum(np.abs(a[sel]), np.abs(n[sel]))))


# ---------------------------------------------------------------------------
# plain-numpy forward over a leading "copies" axis, for vectorised differences
# ---------------------------------------------------------------------------

def _softmax(z, mask):
    z = z + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask == 0.0, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _kl(p, q, valid):
    p = np.clip(p, KL_EPS, 1.0)
    q = np.clip(q, KL_EPS, 1.0)
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    rows = (p * np.log(p / q)).sum(axis=-1)
    return (rows * valid).sum(axis=-1) / valid.sum(axis=-1)


def reference_losses(params: Dict[str, np.ndarray], batch: cohort.Batch, num_blocks: int,
                     lam: float, mode: str) -> np.ndarray:
    """Loss for K weight copies at once; every array carries a leading K (or 1) axis.

    Written independently of the tape so it can serve as the difference oracle.
    """
    P = lambda k: params[k][:, None]          # (K, 1, ...) broadcasts over the batch
    valid = batch.valid.astype(float)
    d = params["embed"].shape[-1]
    C = params["embed"][:, batch.index]       # (K, B, T, d)
    prev, reg = None, 0.0
    for j in range(1, num_blocks + 1):
        if j == 1:
            A = np.broadcast_to(batch.P, C.shape[:1] + batch.P.shape)
        else:
            Q = C @ P(f"b{j}.W_q")
            K = C @ P(f"b{j}.W_k")
            A = _softmax(Q @ np.swapaxes(K, -1, -2) / np.sqrt(d), batch.M)
            reg = reg + _kl(prev, A, valid).mean(axis=-1)
        H = A @ C @ P(f"b{j}.W_v")
        Z = np.maximum(H @ P(f"b{j}.mlp.W1") + params[f"b{j}.mlp.b1"][:, None, None], 0.0)
        C = Z @ P(f"b{j}.mlp.W2") + params[f"b{j}.mlp.b2"][:, None, None]
        prev = A
    loss = lam * reg
    if mode == "original":
        pooled = (C * valid[..., None]).sum(axis=-2) / valid.sum(axis=-1)[:, None]
        z = (pooled @ params["head.w"])[..., 0] + params["head.b"]
        y = batch.labels
        ce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        loss = loss + ce.mean(axis=-1)
    return loss


def finite_difference_grad_vectorized(params: Dict[str, np.ndarray], batch: cohort.Batch,
                                      num_blocks: int, lam: float, mode: str,
                                      h: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences, evaluating every +h/-h copy of one tensor in one pass."""
    base = {k: v[None] for k, v in params.items()}
    out = {}
    for name, w in params.items():
        n = w.size
        eye = np.eye(n).reshape((n,) + w.shape) * h
        stacked = dict(base)
        stacked[name] = np.concatenate([w[None] + eye, w[None] - eye])
        f = np.broadcast_to(reference_losses(stacked, batch, num_blocks, lam, mode), (2 * n,))
        out[name] = ((f[:n] - f[n:]) / (2 * h)).reshape(w.shape)
    return out
