"""Convergence-based early exit, its batched form, and a patience baseline."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import prepare_inputs
from .errors import ContractError
from .tensor import no_grad

STRATEGIES = ("convergence", "pabee", "none")


@dataclass(frozen=True)
class ExitPolicy:
    theta: float = 0.95
    k: int = 1
    l_min: int = 6
    strategy: str = "convergence"
    pabee_patience: int = 2

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ContractError(f"theta must lie in (0, 1], got {self.theta}")
        if self.k < 1 or self.l_min < 1 or self.pabee_patience < 1:
            raise ContractError("k, l_min and pabee_patience must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class ExitResult:
    exit_layer: int
    embedding: np.ndarray
    similarity_trail: list = field(default_factory=list)
    exited_early: bool = False
    layers_computed: int = 0

    def to_record(self, sample_id=None):
        return {"id": sample_id, "exit_layer": int(self.exit_layer),
                "exited_early": bool(self.exited_early),
                "trail": [[int(l), float(s)] for l, s in self.similarity_trail]}


def _normalize_rows(p):
    return p / np.sqrt(np.einsum("ij,ij->i", p, p))[:, None]


class _ExitState:
    """Per-sample exit bookkeeping shared by the single and batched paths."""

    def __init__(self, policy, batch, num_layers):
        self.policy = policy
        self.num_layers = num_layers
        self.lag = 1 if policy.strategy == "pabee" else policy.k
        self.history = []
        self.streak = np.zeros(batch, dtype=int)
        self.exit_layer = np.zeros(batch, dtype=int)
        self.embedding = [None] * batch
        self.sims = []
        # replaced, never mutated, so trail records can share it
        self.active = np.ones(batch, dtype=bool)
        self.remaining = batch

    def step(self, l, pooled):
        pol = self.policy
        # history holds unit rows so each check is a single row-wise dot product
        unit = _normalize_rows(pooled)
        self.history.append(unit)
        if pol.strategy != "none" and l > self.lag:
            s = np.einsum("ij,ij->i", unit, self.history[l - 1 - self.lag])
            self.sims.append((l, s, self.active))
            if l >= pol.l_min:
                ok = s >= pol.theta
                if pol.strategy == "convergence":
                    hit = ok
                else:
                    self.streak = np.where(ok, self.streak + 1, 0)
                    hit = self.streak >= pol.pabee_patience
                self._finish(np.flatnonzero(self.active & hit), l)
        if l == self.num_layers and self.remaining:
            self._finish(np.flatnonzero(self.active), l)

    def _finish(self, idx, l):
        if not idx.size:
            return
        emb = self.history[l - 1]
        self.active = self.active.copy()
        self.active[idx] = False
        self.remaining -= idx.size
        for i in idx:
            self.exit_layer[i] = l
            self.embedding[i] = emb[i]

    def results(self, computed):
        trails = [[] for _ in self.exit_layer]
        for l, s, active in self.sims:
            for i in np.flatnonzero(active):
                trails[i].append((l, float(s[i])))
        return [ExitResult(exit_layer=int(self.exit_layer[i]), embedding=self.embedding[i],
                           similarity_trail=trails[i],
                           exited_early=bool(self.exit_layer[i] < self.num_layers),
                           layers_computed=computed)
                for i in range(len(self.exit_layer))]


def _run(model, tokens, mask, policy):
    tokens, mask = prepare_inputs(model.config, tokens, mask)
    state = _ExitState(policy, tokens.shape[0], model.num_layers)
    m = mask.astype(float)
    w = (m / m.sum(axis=1, keepdims=True))[..., None]
    with no_grad():
        bias = model.attention_bias(mask)
        h = model.embed(tokens)
        computed = 0
        for l in range(1, model.num_layers + 1):
            h = model.block(l, h, bias)
            computed = l
            # same arithmetic as mean_pool without building a graph node
            state.step(l, (h.data * w).sum(axis=1))
            if not state.remaining:
                break
    return state.results(computed), computed


def infer_single(model, tokens, mask=None, policy=ExitPolicy()):
    """Algorithm-1 early exit for one sample; layers past the exit are not run."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 2 and tokens.shape[0] != 1:
        raise ContractError("infer_single takes one sample")
    results, _ = _run(model, tokens, mask, policy)
    return results[0]


def infer_batch(model, tokens, mask=None, policy=ExitPolicy()):
    """Layer-synchronous batch exit.

    All samples keep being computed until the last one exits; each sample's
    embedding is captured at its own exit layer. Returns (results, executed_layers).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ContractError("infer_batch takes a non-empty (B, T) batch")
    return _run(model, tokens, mask, policy)


def infer_pabee(model, tokens, mask=None, patience=2, policy=ExitPolicy()):
    """Patience baseline: s_l >= theta (k=1) must hold on ``patience`` consecutive layers."""
    if patience < 1:
        raise ContractError("patience must be >= 1")
    return infer_single(model, tokens, mask, policy.with_(strategy="pabee", pabee_patience=patience))


def infer_corpus(model, tokens, mask, policy=ExitPolicy(), batch_size=64):
    """Exit results for a whole corpus, processed in fixed-size chunks."""
    out = []
    for start in range(0, len(tokens), batch_size):
        res, _ = infer_batch(model, tokens[start:start + batch_size], mask[start:start + batch_size], policy)
        out.extend(res)
    return out


def plain_forward(model, tokens, mask):
    """Full-depth forward with no monitoring; returns normalized final embeddings."""
    with no_grad():
        bias = model.attention_bias(mask)
        h = model.embed(tokens)
        for l in range(1, model.num_layers + 1):
            h = model.block(l, h, bias)
        return _normalize_rows(model.pool(h, mask).data)


def monitored_forward(model, tokens, mask, policy):
    """Full-depth forward with the convergence check evaluated at every layer."""
    results, _ = _run(model, tokens, mask, policy)
    return results


def monitoring_overhead(model, tokens, mask, iters=20, warmup=5, policy=ExitPolicy()):
    """(t_monitored - t_plain) / t_plain with exits disabled.

    Returns (overhead, details) where details holds the per-iteration timings.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    tokens, mask = prepare_inputs(model.config, tokens, mask)
    # similarity is still computed at every layer; l_min past the last layer blocks exits
    never = policy.with_(strategy="convergence", l_min=model.num_layers + 1)
    for _ in range(warmup):
        plain_forward(model, tokens, mask)
        monitored_forward(model, tokens, mask, never)
    plain, monitored = [], []
    for _ in range(iters):
        t0 = time.perf_counter()
        plain_forward(model, tokens, mask)
        t1 = time.perf_counter()
        monitored_forward(model, tokens, mask, never)
        t2 = time.perf_counter()
        plain.append(t1 - t0)
        monitored.append(t2 - t1)
    tp, tm = float(np.mean(plain)), float(np.mean(monitored))
    return (tm - tp) / tp, {"plain_s": plain, "monitored_s": monitored}


def write_results_jsonl(results, path, ids=None):
    with open(path, "w") as fh:
        for i, r in enumerate(results):
            fh.write(json.dumps(r.to_record(ids[i] if ids is not None else i), sort_keys=True) + "\n")
