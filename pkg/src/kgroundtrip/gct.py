"""Graph Convolution Transformer with a fixed first-block prior.

Block 1 mixes token features with the visit prior P; every later block
computes its own attention from the previous block's features. Consecutive
attentions are tied by a row-wise KL penalty.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import evaluation
from .cohort import Batch
from .numerics import GradTape, NumericsError, Var, backward, row_kl_per_matrix, sigmoid_cross_entropy

log = logging.getLogger(__name__)

LOSS_MODES = ("original", "modified")
CHECKPOINT_FORMAT = "kgroundtrip-gct"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, report: "RoundTripReport"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.report = report


@dataclass
class GctConfig:
    num_blocks: int = 3
    embed_dim: int = 16
    mlp_hidden: int = 32
    lam: float = 1.0
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 16
    eval_every: int = 100
    eval_fraction: float = 0.2
    loss_mode: str = "original"
    seed: int = 0

    def __post_init__(self):
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2")
        for name in ("embed_dim", "mlp_hidden", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.learning_rate <= 0 or self.steps < 0:
            raise ValueError("lam must be >= 0, learning_rate > 0, steps >= 0")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must lie in (0, 1)")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class GctModel:
    cfg: GctConfig
    vocabulary: List[str]
    params: Dict[str, np.ndarray]

    def copy(self) -> "GctModel":
        return GctModel(self.cfg, list(self.vocabulary), {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: GctConfig, vocab_size: int) -> Dict[str, tuple]:
    d, h = cfg.embed_dim, cfg.mlp_hidden
    shapes = {"embed": (vocab_size + 1, d)}
    for j in range(1, cfg.num_blocks + 1):
        if j > 1:
            shapes[f"b{j}.W_q"] = (d, d)
            shapes[f"b{j}.W_k"] = (d, d)
        shapes[f"b{j}.W_v"] = (d, d)
        shapes[f"b{j}.mlp.W1"] = (d, h)
        shapes[f"b{j}.mlp.b1"] = (h,)
        shapes[f"b{j}.mlp.W2"] = (h, d)
        shapes[f"b{j}.mlp.b2"] = (d,)
    shapes["head.w"] = (d, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_model(cfg: GctConfig, vocabulary: Sequence[str]) -> GctModel:
    if not vocabulary:
        raise ValueError("empty vocabulary")
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / math.sqrt(cfg.embed_dim)
    params = {name: rng.uniform(-bound, bound, size=shape)
              for name, shape in param_shapes(cfg, len(vocabulary)).items()}
    params["embed"][0] = 0.0  # padding row
    return GctModel(cfg, list(vocabulary), params)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    attentions: List[np.ndarray]      # A^(1..L), each (B, T, T); A^(1) is P
    features: np.ndarray              # C^(L), (B, T, d)
    logits: np.ndarray                # (B,)
    reg: np.ndarray                   # (L, B) per-visit KL terms; row 0 is KL(P || A^(1))
    valid: np.ndarray                 # (B, T)
    prior: Optional[np.ndarray] = None
    hidden: List[np.ndarray] = field(default_factory=list)   # C^(1..L)


@dataclass
class _Graph:
    tape: GradTape
    weights: Dict[str, Var]
    attentions: List[Var]
    features: Var
    logits: Var
    reg: List[Optional[Var]]          # None for block 1
    hidden: List[Var]


def _build(params: Dict[str, np.ndarray], batch: Batch, num_blocks: int) -> _Graph:
    tape = GradTape()
    w = {k: tape.watch(v, k) for k, v in params.items()}
    d = params["embed"].shape[1]
    inv_sqrt_d = 1.0 / math.sqrt(d)
    C = tape.gather_rows(w["embed"], batch.index)
    atts, regs, hidden = [], [], []
    for j in range(1, num_blocks + 1):
        if j == 1:
            A = tape.constant(batch.P)
        else:
            Q = tape.matmul(C, w[f"b{j}.W_q"])
            K = tape.matmul(C, w[f"b{j}.W_k"])
            S = tape.scale(tape.matmul(Q, tape.transpose(K)), inv_sqrt_d)
            A = tape.masked_softmax(S, batch.M)
        H = tape.matmul(tape.matmul(A, C), w[f"b{j}.W_v"])
        Z = tape.relu(tape.add(tape.matmul(H, w[f"b{j}.mlp.W1"]), w[f"b{j}.mlp.b1"]))
        C = tape.add(tape.matmul(Z, w[f"b{j}.mlp.W2"]), w[f"b{j}.mlp.b2"])
        regs.append(None if j == 1 else tape.row_kl(atts[-1], A, batch.valid))
        atts.append(A)
        hidden.append(C)
    pooled = tape.masked_mean_rows(C, batch.valid)
    logits = tape.add(tape.matmul(pooled, w["head.w"]), w["head.b"])
    return _Graph(tape, w, atts, C, logits, regs, hidden)


def forward(model: GctModel, batch: Batch) -> ForwardTrace:
    g = _build(model.params, batch, model.cfg.num_blocks)
    first = row_kl_per_matrix(batch.P, g.attentions[0].value, batch.valid)
    reg = np.stack([first] + [r.value for r in g.reg[1:]])
    return ForwardTrace([a.value for a in g.attentions], g.features.value,
                        g.logits.value.reshape(-1), reg, batch.valid, batch.P,
                        [c.value for c in g.hidden])


def regularization_terms(trace: ForwardTrace) -> np.ndarray:
    """(L, B) KL terms recomputed from the trace's attentions.

    Term 1 compares the prior with A^(1); term j > 1 compares A^(j-1) with A^(j).
    """
    prior = trace.attentions[0] if trace.prior is None else trace.prior
    prev = [prior] + trace.attentions[:-1]
    return np.stack([row_kl_per_matrix(p, q, trace.valid) for p, q in zip(prev, trace.attentions)])


def loss_original(trace: ForwardTrace, labels, lam: float) -> float:
    return sigmoid_cross_entropy(trace.logits, labels) + loss_modified(trace, lam)


def loss_modified(trace: ForwardTrace, lam: float) -> float:
    return lam * float(np.sum(regularization_terms(trace).mean(axis=1)))


def _loss_var(g: _Graph, batch: Batch, lam: float, mode: str) -> Var:
    """Tape loss. Besides the two public modes, ``prediction`` is the bare
    cross-entropy, used to check that lam = 0 leaves gradients untouched."""
    tape = g.tape
    if mode == "prediction":
        return tape.sigmoid_ce(g.logits, batch.labels)
    total = None
    for r in g.reg[1:]:
        term = tape.mean(r)
        total = term if total is None else tape.add(total, term)
    total = tape.scale(total, lam)
    if mode == "original":
        total = tape.add(tape.sigmoid_ce(g.logits, batch.labels), total)
    return total


def loss_and_grads(params: Dict[str, np.ndarray], batch: Batch, num_blocks: int,
                   lam: float, mode: str):
    g = _build(params, batch, num_blocks)
    loss = _loss_var(g, batch, lam, mode)
    by_id = backward(g.tape, loss)
    return float(loss.value), {k: by_id[v.id] for k, v in g.weights.items()}


def loss_value(params: Dict[str, np.ndarray], batch: Batch, num_blocks: int,
               lam: float, mode: str) -> float:
    g = _build(params, batch, num_blocks)
    return float(_loss_var(g, batch, lam, mode).value)


def attention_of_layer(model: GctModel, batch: Batch, b: int, j: int) -> np.ndarray:
    """A^(j) of visit ``b`` restricted to its real tokens (j=1 gives P)."""
    L = model.cfg.num_blocks
    if not 1 <= j <= L:
        raise ValueError(f"layer {j} outside 1..{L}")
    n = int(batch.valid[b].sum())
    if j == 1:
        return batch.P[b, :n, :n].copy()
    trace = forward(model, batch.subset([b]))
    return trace.attentions[j - 1][0, :n, :n]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    step: int
    auc_pr: float
    auc_roc: float
    loss: float
    reg: float = float("nan")   # lambda-free sum of KL terms on the eval split


@dataclass
class RoundTripReport:
    rows: List[ReportRow] = field(default_factory=list)
    meta: Dict[str, object] = field(default_factory=dict)


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def evaluate_split(model: GctModel, batch: Batch) -> ReportRow:
    cfg = model.cfg
    trace = forward(model, batch)
    if cfg.loss_mode == "original":
        loss = loss_original(trace, batch.labels, cfg.lam)
    else:
        loss = loss_modified(trace, cfg.lam)
    return ReportRow(0, evaluation.auc_pr(trace.logits, batch.labels),
                     evaluation.auc_roc(trace.logits, batch.labels), loss,
                     float(np.sum(trace.reg.mean(axis=1))))


def train(model: GctModel, train_batch: Batch, eval_batch: Batch, cfg: Optional[GctConfig] = None,
          callback: Optional[Callable[[int, GctModel], None]] = None):
    """Adam on every weight; one report row per ``eval_every`` steps.

    Returns (trained model, RoundTripReport). The input model is not modified.
    ``callback(step, model)`` runs after each update.
    """
    cfg = cfg or model.cfg
    model = GctModel(cfg, list(model.vocabulary), {k: v.copy() for k, v in model.params.items()})
    if len(train_batch) == 0 or len(eval_batch) == 0:
        raise ValueError("training and evaluation splits must be non-empty")
    if len(set(eval_batch.labels.tolist())) < 2:
        raise ValueError("evaluation split needs both label classes")
    report = RoundTripReport(meta={"loss_mode": cfg.loss_mode, "lam": cfg.lam, "seed": cfg.seed})
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(model.params, cfg.learning_rate)
    n = len(train_batch)
    bs = min(cfg.batch_size, n)
    for step in range(1, cfg.steps + 1):
        rows = np.sort(rng.choice(n, size=bs, replace=False))
        try:
            loss, grads = loss_and_grads(model.params, train_batch.subset(rows),
                                         cfg.num_blocks, cfg.lam, cfg.loss_mode)
        except NumericsError:
            loss = float("nan")
        if not math.isfinite(loss):
            raise TrainingDiverged(step, report)
        opt.step(model.params, grads)
        model.params["embed"][0] = 0.0
        if callback is not None:
            callback(step, model)
        if step % cfg.eval_every == 0:
            row = evaluate_split(model, eval_batch)
            row.step = step
            if not math.isfinite(row.loss):
                raise TrainingDiverged(step, report)
            report.rows.append(row)
            log.info("step %d auc_pr %.3f auc_roc %.3f loss %.4f", step, row.auc_pr, row.auc_roc, row.loss)
    return model, report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: GctModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "vocabulary": model.vocabulary,
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in sorted(model.params.items())},
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> GctModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a GCT checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    cfg = GctConfig(**doc["config"])
    params = {k: np.asarray(w["data"], dtype=np.float64).reshape(w["shape"])
              for k, w in doc["weights"].items()}
    expected = param_shapes(cfg, len(doc["vocabulary"]))
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ValueError(f"{path}: weight shapes do not match config")
    return GctModel(cfg, list(doc["vocabulary"]), params)
