"""Teacher training, student distillation, and the ablation / beta sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .data import pad_batch
from .encoder import EncoderConfig, EncoderModel, LayerTrace, Projection, forward_trace, uniform_layer_map
from .errors import ConfigError, ContractError, DivergenceError
from .exits import ExitPolicy
from .losses import ALL_TERMS, BASELINE_TERMS, LeapLossWeights, total_loss
from .metrics import exit_distribution, pair_spearman
from .tensor import no_grad

# cumulative loss masks of the ablation table, in row order
ABLATION_MASKS = (
    ("final", frozenset({"final"})),
    ("final+inter", frozenset({"final", "inter"})),
    ("final+inter+contrast", frozenset({"final", "inter", "contrast"})),
    ("full", ALL_TERMS),
)


@dataclass
class TrainConfig:
    # the full-size recipe uses 5e-5 for a pretrained 12-layer student; from-scratch toys need more
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 3
    warmup_fraction: float = 0.1
    lr_schedule: str = "cosine"
    seed: int = 0
    weights: LeapLossWeights = field(default_factory=LeapLossWeights)
    terms: frozenset = ALL_TERMS
    betas: tuple = (0.1, 0.4, 0.8)
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # optional cap on optimizer steps; the schedule is stretched over the capped run
    max_steps: int = None
    # group similar lengths into batches (less padding); batch order stays random
    length_bucketing: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LeapLossWeights.from_dict(self.weights)
        self.terms = frozenset(self.terms)
        self.betas = tuple(self.betas)
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ContractError("warmup_fraction must lie in [0, 1)")
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if "contrast" in self.terms and self.batch_size < 2:
            raise ContractError("contrastive loss needs batch_size >= 2")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown lr_schedule {self.lr_schedule!r}")
        unknown = self.terms - ALL_TERMS
        if unknown:
            raise ContractError(f"unknown loss terms {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["terms"] = sorted(self.terms)
        d["betas"] = list(self.betas)
        return d

    def with_(self, **kw):
        return replace(self, **kw)


def lr_at(step, total_steps, base_lr, warmup_fraction=0.1, schedule="cosine"):
    """Linear warmup then cosine decay to zero; ``step`` counts from 0."""
    warm = int(round(warmup_fraction * total_steps))
    if step < warm:
        return base_lr * (step + 1) / warm
    if schedule == "constant":
        return base_lr
    rest = max(1, total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - warm) / rest)))


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr, grads=None):
        grads = [p.grad for p in self.params] if grads is None else grads
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr:
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(params, max_norm):
    """Scale gradients in place to a global L2 norm of at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    records: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def add_step(self, step, values):
        if self.steps and step <= self.steps[-1]:
            raise ContractError("training log steps must increase")
        for k, v in values.items():
            if not math.isfinite(v):
                raise DivergenceError(f"non-finite {k}={v} at step {step}; last record: "
                                      f"{self.records[-1] if self.records else None}")
        self.steps.append(step)
        self.records.append(dict(values, step=step))

    def add_epoch(self, epoch, metrics):
        self.epochs.append(dict(metrics, epoch=epoch))

    def column(self, key):
        return np.array([r[key] for r in self.records])

    def epoch_means(self, key="total"):
        """Mean of ``key`` over the steps of each epoch."""
        ep = self.column("epoch")
        vals = self.column(key)
        return [float(vals[ep == e].mean()) for e in np.unique(ep)]

    def to_csv(self, path):
        if not self.records:
            open(path, "w").close()
            return
        keys = ["step"] + [k for k in self.records[0] if k != "step"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.records:
                w.writerow({k: repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in keys})


def _batches(n, batch_size, rng, lengths=None, pool=32):
    order = rng.permutation(n)
    if lengths is not None:
        chunks = [order[s:s + pool * batch_size] for s in range(0, n, pool * batch_size)]
        order = np.concatenate([c[np.argsort(lengths[c], kind="stable")] for c in chunks])
    out = [order[s:s + batch_size] for s in range(0, n, batch_size) if len(order[s:s + batch_size]) >= 2]
    if lengths is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def _plan(n, config):
    per_epoch = len(range(0, n, config.batch_size))
    if n % config.batch_size == 1:
        per_epoch -= 1  # singleton tail batches are dropped
    total = per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    if total < 1:
        raise ContractError("training set too small for one batch")
    return total


def _optimize(params, loss_fn, n, config, log, on_epoch=None, lengths=None):
    """Shared loop: shuffled batches, warmup/cosine lr, clipping, Adam."""
    rng = np.random.default_rng(config.seed)
    lengths = lengths if config.length_bucketing else None
    total = _plan(n, config)
    opt = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    step = 0
    for epoch in range(config.epochs):
        for idx in _batches(n, config.batch_size, rng, lengths):
            if step >= total:
                break
            for p in params:
                p.zero_grad()
            fraction = step / total
            values, loss = loss_fn(idx, fraction)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} at step {step} (epoch {epoch})")
            loss.backward()
            gnorm = clip_grads(params, config.grad_clip)
            lr = lr_at(step, total, config.lr, config.warmup_fraction, config.lr_schedule)
            opt.step(lr)
            log.add_step(step, dict(values, epoch=epoch, lr=lr, grad_norm=gnorm, schedule_fraction=fraction))
            step += 1
        if on_epoch is not None:
            log.add_epoch(epoch, on_epoch(epoch))
        if step >= total:
            break
    return log


def _lengths(corpus):
    return np.array([len(t) for t in corpus.tokens])


# -- teacher ----------------------------------------------------------------------

def _latent_cosines(z):
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    return zn @ zn.T


def teacher_loss(model, tokens, mask, topics):
    """Mean squared error between the batch cosine matrix and the latent-mixture cosines."""
    trace = forward_trace(model, tokens, mask)
    e = trace.final_embedding
    sims = e @ e.swapaxes(0, 1)
    target = _latent_cosines(topics)
    b = len(tokens)
    off = 1.0 - np.eye(b)
    diff = (sims - target) * off
    return (diff * diff).sum() * (1.0 / (b * (b - 1)))


def train_teacher(teacher_config, train_config, train, val=None):
    """Fit an encoder whose final embedding cosine tracks latent topic similarity.

    Returns (model, log). Epoch metrics hold the validation pair Spearman when
    ``val`` is given.
    """
    model = EncoderModel(teacher_config)
    params = model.parameters()
    log = TrainLog()

    def loss_fn(idx, fraction):
        tokens, mask = pad_batch([train.tokens[i] for i in idx])
        loss = teacher_loss(model, tokens, mask, train.topics[idx])
        return {"total": loss.item()}, loss

    def on_epoch(epoch):
        out = {"train_loss": float(np.mean(log.column("total")[log.column("epoch") == epoch]))}
        if val is not None and len(val.pairs) >= 3:
            out["val_spearman"] = pair_spearman(model, val)[0]
        return out

    _optimize(params, loss_fn, len(train), train_config, log, on_epoch, _lengths(train))
    for p in params:
        p.requires_grad = False
        p.grad = None
    return model, log


# -- distillation -------------------------------------------------------------------

class TeacherCache:
    """Pooled teacher vectors of a corpus at the layers distillation reads.

    ``trace(idx)`` returns a compact LayerTrace whose pooled list holds only
    those layers (final last); ``layer_map`` is re-indexed to match.
    """

    def __init__(self, teacher, corpus, layer_map, batch_size=128):
        self.layers = sorted(set(layer_map.values()) | {teacher.num_layers})
        pos = {l: i + 1 for i, l in enumerate(self.layers)}
        self.layer_map = {l: pos[t] for l, t in layer_map.items()}
        n = len(corpus)
        self.pooled = np.empty((n, len(self.layers), teacher.config.hidden_dim))
        order = np.argsort(_lengths(corpus), kind="stable")
        sel = [l - 1 for l in self.layers]
        with no_grad():
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                tokens, mask = pad_batch([corpus.tokens[i] for i in idx])
                self.pooled[idx] = forward_trace(teacher, tokens, mask).pooled_array()[:, sel]

    def trace(self, idx):
        block = self.pooled[idx]
        return LayerTrace([T.Tensor(block[:, j]) for j in range(block.shape[1])], None)


def distill(teacher, student_config, train_config, train, val=None, student=None,
            policy=ExitPolicy()):
    """Distill ``teacher`` into a fresh student under the configured loss mask.

    Returns (student, projection, log). The teacher is never updated. With
    terms == BASELINE_TERMS this is the baseline student; with ALL_TERMS it is
    the full exit-aware student.
    """
    if student_config.num_layers > teacher.num_layers:
        raise ContractError("student deeper than teacher")
    student = EncoderModel(student_config) if student is None else student
    projection = None
    if student_config.hidden_dim != teacher.config.hidden_dim:
        projection = Projection(student_config.hidden_dim, teacher.config.hidden_dim,
                                seed=student_config.seed + 1)
    cache = TeacherCache(teacher, train, uniform_layer_map(student_config.num_layers, teacher.num_layers))
    params = student.parameters() + ([projection.weight] if projection is not None else [])
    cfg = train_config
    log = TrainLog()

    def loss_fn(idx, fraction):
        tokens, mask = pad_batch([train.tokens[i] for i in idx])
        s_trace = forward_trace(student, tokens, mask)
        br = total_loss(s_trace, cache.trace(idx), cfg.weights, cache.layer_map, fraction, projection, cfg.terms)
        return br.as_dict(), br.total_tensor

    def on_epoch(epoch):
        if val is None or len(val.pairs) < 3:
            return {}
        return evaluate_exits(student, val, policy)

    _optimize(params, loss_fn, len(train), cfg, log, on_epoch, _lengths(train))
    return student, projection, log


def evaluate_exits(model, corpus, policy=ExitPolicy()):
    """Exit rate, expected layers and exited-embedding Spearman on the corpus pairs."""
    rho, results = pair_spearman(model, corpus, policy)
    dist = exit_distribution(results, model.num_layers)
    full_rho, _ = pair_spearman(model, corpus, policy.with_(strategy="none"))
    return {"exit_rate": dist.exit_rate(), "expected_layers": dist.expected_layers,
            "layer_reduction": dist.layer_reduction, "spearman": rho, "spearman_full": full_rho}


def ablation_suite(teacher, student_config, train_config, train, val, masks=ABLATION_MASKS,
                   policy=ExitPolicy()):
    """One row per (name, terms) mask: exit statistics and quality of the distilled student."""
    rows = []
    for name, terms in masks:
        student, _, _ = distill(teacher, student_config, train_config.with_(terms=frozenset(terms)),
                                train, val, policy=policy)
        rows.append(dict({"config": name, "terms": "+".join(sorted(terms))},
                         **evaluate_exits(student, val, policy)))
    return rows


def beta_sensitivity(teacher, student_config, train_config, train, val, betas=None,
                     policy=ExitPolicy()):
    """Distil once per exit weight beta; beta = 0 drops every exit-shaping term (baseline mask)."""
    betas = train_config.betas if betas is None else betas
    rows = []
    for beta in betas:
        if beta < 0:
            raise ContractError("beta must be >= 0")
        weights = replace(train_config.weights, beta=float(beta))
        terms = BASELINE_TERMS if beta == 0 else train_config.terms
        student, _, _ = distill(teacher, student_config,
                                train_config.with_(weights=weights, terms=terms), train, val, policy=policy)
        rows.append(dict({"beta": float(beta)}, **evaluate_exits(student, val, policy)))
    return rows


def default_teacher_config(**kw):
    return EncoderConfig(**dict(dict(num_layers=24, hidden_dim=96, num_heads=4, ff_dim=192), **kw))


def default_student_config(**kw):
    return EncoderConfig(**dict(dict(num_layers=12, hidden_dim=64, num_heads=4, ff_dim=128), **kw))
