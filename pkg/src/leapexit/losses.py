"""Exit-aware distillation objective and its refinement terms.

All terms take ``LayerTrace`` objects for a batch and return scalar tensors
averaged over the batch. Teacher traces are treated as constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError

ALL_TERMS = frozenset({"final", "inter", "exit", "contrast", "late", "redund"})
BASELINE_TERMS = frozenset({"final", "inter", "contrast"})
# terms that only exist to shape exit behaviour
EXIT_TERMS = frozenset({"exit", "late", "redund"})


@dataclass
class LeapLossWeights:
    alpha: float = 0.3
    beta: float = 0.4
    beta_student: float = 0.7
    gamma_redund: float = 0.05
    delta_contrast: float = 0.3
    epsilon_late: float = 0.2
    tau_train: float = 0.98
    tau_contrast: float = 0.1
    sharpness: float = 10.0
    # None -> default_layer_weights(L_s)
    layer_weights: list = field(default=None)
    emphasis_start: int = 6
    redund_cap: float = 0.5
    # None -> (L_s - 3, L_s - 1), i.e. layers 9..11 of a 12-layer student
    late_window: tuple = field(default=None)
    ramp_start: float = 0.1
    ramp_end: float = 0.6

    def __post_init__(self):
        for name in ("alpha", "beta", "beta_student", "gamma_redund", "delta_contrast", "epsilon_late"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not 0 < self.tau_train <= 1:
            raise ContractError("tau_train must lie in (0, 1]")
        if self.tau_contrast <= 0 or self.redund_cap <= 0:
            raise ContractError("tau_contrast and redund_cap must be positive")
        if self.layer_weights is not None and min(self.layer_weights) < 0:
            raise ContractError("layer weights must be >= 0")
        if self.late_window is not None:
            self.late_window = tuple(self.late_window)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown loss weight keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def weights_for(self, num_layers):
        if self.layer_weights is None:
            return default_layer_weights(num_layers, self.emphasis_start)
        w = np.asarray(self.layer_weights, dtype=float)
        if len(w) < num_layers:
            raise ContractError(f"need {num_layers} layer weights, got {len(w)}")
        return w[:num_layers]

    def window_for(self, num_layers):
        if self.late_window is None:
            return max(1, num_layers - 3), num_layers - 1
        return self.late_window


def default_layer_weights(num_layers, emphasis_start=6):
    """w_l = l/L, halved below ``emphasis_start``."""
    l = np.arange(1, num_layers + 1, dtype=float)
    w = l / num_layers
    return np.where(l < emphasis_start, 0.5 * w, w)


def progressive_ramp(fraction, start=0.1, end=0.6):
    """0 before ``start``, linear to 1 at ``end``, 1 afterwards."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"schedule fraction {fraction} outside [0, 1]")
    if fraction <= start:
        return 0.0
    if fraction >= end:
        return 1.0
    return (fraction - start) / (end - start)


@dataclass
class LossBreakdown:
    """Component values; ``exit_student`` already includes the progressive ramp."""

    final: float = 0.0
    inter: float = 0.0
    exit_teacher: float = 0.0
    exit_student: float = 0.0
    contrast: float = 0.0
    late: float = 0.0
    redund: float = 0.0
    total: float = 0.0
    ramp: float = 1.0
    total_tensor: object = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "total_tensor"}


def _project(x, projection):
    return x if projection is None else projection(x)


def _teacher_side(student_vec, teacher_vec, projection):
    s = _project(student_vec, projection)
    if s.shape[-1] != teacher_vec.shape[-1]:
        raise ShapeError(f"student dim {s.shape[-1]} != teacher dim {teacher_vec.shape[-1]}; "
                         "a projection is required")
    return s


def loss_final(student, teacher, projection=None):
    """1 - cos(e_s^(L_s), e_t^(L_t)), batch mean."""
    t = T.detach(teacher.pooled[-1])
    s = _teacher_side(student.pooled[-1], t, projection)
    return (1.0 - T.cosine(s, t)).mean()


def loss_inter(student, teacher, layer_map, projection=None):
    """Mean over student layers of 1 - cos(e_s^(l), e_t^(pi(l)))."""
    n = student.num_layers
    terms = []
    for l in range(1, n + 1):
        t = T.detach(teacher.pooled[layer_map[l] - 1])
        s = _teacher_side(student.pooled[l - 1], t, projection)
        terms.append((1.0 - T.cosine(s, t)).mean())
    return T.stack(terms).sum() * (1.0 / n)


def loss_exit(student, teacher, weights, projection=None):
    """Dual-target soft-margin exit loss; returns (teacher term, student term).

    The student-side target is the student's own final embedding behind a
    stop-gradient, so it is pulled on by nothing here.
    """
    n = student.num_layers
    if n < 2:
        raise ContractError("exit loss needs at least 2 student layers")
    w = weights.weights_for(n)
    tau, k = weights.tau_train, weights.sharpness
    t_final = T.detach(teacher.pooled[-1])
    s_final = T.detach(student.pooled[-1])

    t_terms = []
    for l in range(1, n + 1):
        s = _teacher_side(student.pooled[l - 1], t_final, projection)
        t_terms.append(T.sigmoid(k * (tau - T.cosine(s, t_final))).mean() * w[l - 1])
    s_terms = []
    for l in range(1, n):
        s_terms.append(T.sigmoid(k * (tau - T.cosine(student.pooled[l - 1], s_final))).mean() * w[l - 1])
    return T.stack(t_terms).sum() * (1.0 / n), T.stack(s_terms).sum() * (1.0 / (n - 1))


def _cosine_matrix(x):
    e = T.normalize(x)
    return e @ e.swapaxes(0, 1)


def loss_contrast(student, teacher, tau_contrast=0.1):
    """KL(softmax(S_s/tau) || softmax(S_t/tau)) over rows, diagonal excluded."""
    s_final = student.pooled[-1]
    t_final = T.detach(teacher.pooled[-1])
    b = s_final.shape[0]
    if b < 2:
        raise ContractError("contrastive loss needs a batch of at least 2")
    diag = np.eye(b) * -1e9
    log_ps = T.log_softmax(_cosine_matrix(s_final) * (1.0 / tau_contrast) + diag, axis=-1)
    log_pt = T.log_softmax(_cosine_matrix(t_final) * (1.0 / tau_contrast) + diag, axis=-1)
    ps = T.exp(log_ps)
    return (ps * (log_ps - log_pt)).sum() * (1.0 / b)


def loss_late(student, window=None):
    """Mean over the late window of sqrt(max(1 - cos(e^(l), e^(L)), 0))."""
    n = student.num_layers
    lo, hi = window if window is not None else (max(1, n - 3), n - 1)
    if lo < 1 or hi > n - 1 or lo > hi:
        raise ContractError(f"late window {lo}..{hi} not inside 1..{n - 1}")
    final = student.pooled[-1]
    terms = [T.sqrt(T.clamp_min(1.0 - T.cosine(student.pooled[l - 1], final), 0.0)).mean()
             for l in range(lo, hi + 1)]
    return T.stack(terms).sum() * (1.0 / (hi - lo + 1))


def loss_redund(student, cap=0.5):
    """-(1/(L-1)) * sum_l min(||e^(l+1) - e^(l)||, cap), batch mean."""
    n = student.num_layers
    if n < 2:
        raise ContractError("redundancy loss needs at least 2 layers")
    e = [T.normalize(p) for p in student.pooled]
    terms = [T.clamp_max(T.norm(e[l + 1] - e[l]), cap).mean() for l in range(n - 1)]
    return T.stack(terms).sum() * (-1.0 / (n - 1))


def total_loss(student, teacher, weights, layer_map, schedule_fraction=1.0,
               projection=None, terms=ALL_TERMS):
    """Weighted sum of the enabled terms plus a breakdown of each component."""
    ramp = progressive_ramp(schedule_fraction, weights.ramp_start, weights.ramp_end)
    unknown = set(terms) - ALL_TERMS
    if unknown:
        raise ContractError(f"unknown loss terms {sorted(unknown)}")
    out = LossBreakdown(ramp=ramp)
    parts = []

    if "final" in terms:
        v = loss_final(student, teacher, projection)
        out.final = v.item()
        parts.append(v)
    if "inter" in terms:
        v = loss_inter(student, teacher, layer_map, projection)
        out.inter = v.item()
        parts.append(v * weights.alpha)
    if "exit" in terms:
        et, es = loss_exit(student, teacher, weights, projection)
        scale = weights.beta_student * ramp
        out.exit_teacher = et.item()
        out.exit_student = es.item() * ramp
        parts.append(et * weights.beta)
        if scale > 0:
            parts.append(es * (weights.beta * scale))
    if "contrast" in terms:
        v = loss_contrast(student, teacher, weights.tau_contrast)
        out.contrast = v.item()
        parts.append(v * weights.delta_contrast)
    if "late" in terms:
        v = loss_late(student, weights.window_for(student.num_layers))
        out.late = v.item()
        parts.append(v * weights.epsilon_late)
    if "redund" in terms:
        v = loss_redund(student, weights.redund_cap)
        out.redund = v.item()
        parts.append(v * weights.gamma_redund)

    if not parts:
        raise ContractError("no loss terms enabled")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    out.total = total.item()
    out.total_tensor = total
    return out
