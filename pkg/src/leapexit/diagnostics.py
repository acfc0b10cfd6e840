"""Exit-incompatibility diagnostics and the deployment checklist.

Every verdict is a pure function of recorded measurements, so a stored
report can be re-judged without the model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exits import ExitPolicy, infer_corpus, monitoring_overhead
from .metrics import exit_distribution, nn_at_k, pooled_corpus, sim_to_final

INCOMPATIBLE = "incompatible"
COMPATIBLE = "compatible"
INCONCLUSIVE = "inconclusive"
NOT_FLAGGED = "not_flagged"


@dataclass(frozen=True)
class Thresholds:
    flat_sim: float = 0.7  # every pre-final layer below this -> flat curve
    monotone_fraction: float = 0.9
    monotone_last_sim: float = 0.9
    overhead: float = 0.15
    overhead_exit: float = 0.10
    check_sim: float = 0.94
    check_nn: float = 0.80
    check_exit: float = 0.50
    nn_k: int = 10


def monotone_fraction(sims):
    d = np.diff(np.asarray(sims, dtype=float))
    return float(np.mean(d >= 0)) if len(d) else 1.0


# -- verdicts (pure) ------------------------------------------------------------

def flat_curve_verdict(sims, l_min, th=Thresholds()):
    """``sims[l-1]`` is the mean cos(e_l, e_L) for layers 1..L."""
    sims = np.asarray(sims, dtype=float)
    pre = sims[l_min - 1:-1]
    mono = monotone_fraction(sims[l_min - 1:])
    if len(pre) and np.all(pre < th.flat_sim):
        verdict = INCOMPATIBLE
    elif mono >= th.monotone_fraction and (len(pre) == 0 or pre[-1] >= th.monotone_last_sim):
        verdict = COMPATIBLE
    else:
        verdict = INCONCLUSIVE
    return {"layers": list(range(l_min, len(sims) + 1)), "sims": [float(s) for s in sims[l_min - 1:]],
            "monotone_fraction": mono, "verdict": verdict}


def zero_exit_verdict(exit_rate, theta):
    out = {"exit_rate": float(exit_rate), "theta": float(theta),
           "verdict": INCOMPATIBLE if exit_rate == 0 else COMPATIBLE}
    if exit_rate == 0 and theta >= 1.0:
        out["note"] = "theta = 1 is reachable only by layers that leave the embedding direction unchanged"
    return out


def overhead_verdict(overhead, exit_rate, th=Thresholds()):
    flagged = overhead > th.overhead and exit_rate < th.overhead_exit
    return {"overhead": float(overhead), "exit_rate": float(exit_rate),
            "verdict": INCOMPATIBLE if flagged else NOT_FLAGGED}


def checklist_verdict(sim, nn, exit_rate, th=Thresholds()):
    items = {"similarity": {"value": float(sim), "threshold": th.check_sim, "pass": bool(sim >= th.check_sim)},
             "nn_at_k": {"value": float(nn), "threshold": th.check_nn, "pass": bool(nn >= th.check_nn)},
             "exit_rate": {"value": float(exit_rate), "threshold": th.check_exit,
                           "pass": bool(exit_rate > th.check_exit)}}
    return {"items": items, "pass": all(v["pass"] for v in items.values())}


# -- measurements ---------------------------------------------------------------------

@dataclass
class DiagnosticReport:
    measurements: dict
    thresholds: Thresholds = field(default_factory=Thresholds)
    flat_curve: dict = None
    zero_exit: dict = None
    overhead_dominates: dict = None
    checklist: dict = None

    def __post_init__(self):
        self.judge()

    def judge(self):
        m, th = self.measurements, self.thresholds
        self.flat_curve = flat_curve_verdict(m["sims"], m["l_min"], th)
        self.zero_exit = zero_exit_verdict(m["exit_rate"], m["theta"])
        self.overhead_dominates = (overhead_verdict(m["overhead"], m["exit_rate"], th)
                                   if m.get("overhead") is not None else None)
        t = m["target_layer"]
        self.checklist = checklist_verdict(m["sims"][t - 1], m["nn"], m["exit_rate"], th)
        return self

    @property
    def incompatible(self):
        parts = [self.flat_curve, self.zero_exit, self.overhead_dominates]
        return any(p is not None and p["verdict"] == INCOMPATIBLE for p in parts)

    def to_dict(self):
        return {"measurements": self.measurements, "thresholds": asdict(self.thresholds),
                "flat_curve": self.flat_curve, "zero_exit": self.zero_exit,
                "overhead_dominates": self.overhead_dominates, "checklist": self.checklist,
                "incompatible": self.incompatible}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["measurements"], Thresholds(**d["thresholds"]))

    def to_text(self):
        m = self.measurements
        lines = [f"samples: {m['n_samples']}  layers: {len(m['sims'])}  theta: {m['theta']}  l_min: {m['l_min']}"]
        fc = self.flat_curve
        curve = " ".join(f"L{l}={s:.3f}" for l, s in zip(fc["layers"], fc["sims"]))
        lines.append(f"[1] flat similarity curve: {fc['verdict']}  ({curve}; monotone {fc['monotone_fraction']:.2f})")
        lines.append(f"[2] zero exit rate: {self.zero_exit['verdict']}  (exit rate {m['exit_rate']:.1%})")
        od = self.overhead_dominates
        if od is None:
            lines.append("[3] monitoring overhead: skipped")
        else:
            lines.append(f"[3] monitoring overhead: {od['verdict']}  (overhead {od['overhead']:.1%}, "
                         f"exit rate {od['exit_rate']:.1%})")
        lines.append(f"checklist at layer {m['target_layer']}: {'PASS' if self.checklist['pass'] else 'FAIL'}")
        for name, item in self.checklist["items"].items():
            lines.append(f"  {name}: {item['value']:.3f} vs {item['threshold']}  "
                         f"{'pass' if item['pass'] else 'fail'}")
        lines.append("verdict: " + ("EXIT-INCOMPATIBLE" if self.incompatible else "no incompatibility flagged"))
        return "\n".join(lines)


def measure(model, tokens, mask, policy=ExitPolicy(), target_layer=None, th=Thresholds(),
            overhead_iters=0, batch_size=64):
    """Collect every number the diagnostics judge.

    ``target_layer`` defaults to l_min + 1. Overhead timing is skipped when
    ``overhead_iters`` is 0.
    """
    target = policy.l_min + 1 if target_layer is None else target_layer
    target = min(target, model.num_layers)
    pooled = pooled_corpus(model, tokens, mask, batch_size)
    sims = sim_to_final(pooled).mean(axis=0)
    k = min(th.nn_k, len(tokens) - 1)
    nn = nn_at_k(pooled[:, target - 1], pooled[:, -1], k)[1]
    results = infer_corpus(model, tokens, mask, policy, batch_size)
    rate = exit_distribution(results, model.num_layers).exit_rate()
    overhead = None
    if overhead_iters:
        overhead, _ = monitoring_overhead(model, tokens[:1], mask[:1], iters=overhead_iters,
                                          warmup=max(1, overhead_iters // 4), policy=policy)
    return {"n_samples": int(len(tokens)), "sims": [float(s) for s in sims], "nn": float(nn),
            "exit_rate": float(rate), "overhead": overhead, "theta": policy.theta,
            "l_min": policy.l_min, "target_layer": int(target)}


def diagnose(model, tokens, mask, policy=ExitPolicy(), target_layer=None, th=Thresholds(),
             overhead_iters=0, batch_size=64):
    return DiagnosticReport(measure(model, tokens, mask, policy, target_layer, th, overhead_iters, batch_size), th)


def diag_flat_curve(model, tokens, mask, l_min=6, th=Thresholds()):
    sims = sim_to_final(pooled_corpus(model, tokens, mask)).mean(axis=0)
    return flat_curve_verdict(sims, l_min, th)


def diag_zero_exit(model, tokens, mask, policy=ExitPolicy()):
    results = infer_corpus(model, tokens, mask, policy)
    return zero_exit_verdict(exit_distribution(results, model.num_layers).exit_rate(), policy.theta)


def diag_overhead(model, tokens, mask, policy=ExitPolicy(), th=Thresholds(), iters=20):
    rate = diag_zero_exit(model, tokens, mask, policy)["exit_rate"]
    overhead, _ = monitoring_overhead(model, tokens[:1], mask[:1], iters=iters, policy=policy)
    return overhead_verdict(overhead, rate, th)


def deployment_checklist(model, tokens, mask, target_layer, policy=ExitPolicy(), th=Thresholds()):
    m = measure(model, tokens, mask, policy, target_layer, th)
    return checklist_verdict(m["sims"][m["target_layer"] - 1], m["nn"], m["exit_rate"], th)
