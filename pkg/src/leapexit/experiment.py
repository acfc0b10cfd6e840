"""Config handling and the end-to-end teacher -> baseline / exit-aware student pipeline."""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import asdict

import numpy as np

from . import data as data_mod
from .bench import bench, write_bench
from .diagnostics import Thresholds, diagnose
from .encoder import EncoderConfig, load_weights, save_weights
from .errors import ConfigError
from .exits import ExitPolicy, infer_corpus, write_results_jsonl
from .losses import ALL_TERMS, BASELINE_TERMS
from .metrics import (analyze_layers, exit_distribution, layer_nn_scores, pair_spearman,
                      pareto_sweep, pooled_corpus, viable_layers, write_csv)
from .trainer import (ABLATION_MASKS, TrainConfig, ablation_suite, beta_sensitivity, distill,
                      train_teacher)

OUTPUT_ENV = "LEAPEXIT_OUTPUT_DIR"

# Desk-scale defaults. The full-size recipe (1.5M sentences, lr 5e-5, one GPU
# epoch budget) is out of reach on a CPU; weights and exit settings keep their
# recipe values.
DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {"n_sentences": 20000, "n_pairs": 2000, "vocab_size": 256, "num_topics": 8,
             "min_len": 8, "max_len": 32, "concentration": 0.05, "common_frac": 0.1, "noise": 0.25},
    "split": [0.8, 0.1, 0.1],
    "teacher": {"num_layers": 24, "hidden_dim": 96, "num_heads": 4, "ff_dim": 192, "vocab_size": 256,
                "max_seq_len": 32, "norm_style": "post", "residual_init": 1.0},
    "student": {"num_layers": 12, "hidden_dim": 64, "num_heads": 4, "ff_dim": 128, "vocab_size": 256,
                "max_seq_len": 32, "norm_style": "post", "residual_init": 0.6},
    "teacher_train": {"lr": 3e-4, "batch_size": 32, "epochs": 3, "warmup_fraction": 0.1},
    # late-layer loss over layers 6-11 (the library default window is L-3..L-1)
    "train": {"lr": 2e-3, "batch_size": 32, "epochs": 3, "warmup_fraction": 0.1, "grad_clip": 1.0,
              "weights": {"late_window": [6, 11]}, "betas": [0.1, 0.4, 0.8]},
    # reduced budget for the ablation and beta sweeps
    "sweep_train": {"epochs": 1},
    "exit": {"theta": 0.95, "k": 1, "l_min": 6, "strategy": "convergence"},
    "thetas": [0.90, 0.92, 0.93, 0.95, 0.97, 0.99],
    "pareto_ref_layer": 7,
    "viability": {"sim": 0.95, "nn": 0.80, "k": 10},
    "diagnostics": {"n_samples": 512, "overhead_iters": 20, "check_sim": 0.9, "check_nn": 0.7,
                    "check_exit": 0.5},
    "bench": {"batch_sizes": [1, 8, 32], "warmup": 50, "iters": 200, "n_samples": 256},
}


OPEN_TABLES = {"weights"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if key in OPEN_TABLES:
            # keys are checked by the consumer (LeapLossWeights.from_dict)
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = dict(base[key], **copy.deepcopy(value))
            continue
        if isinstance(base[key], dict) and base[key] and not isinstance(value, dict):
            raise ConfigError(f"config key {where!r} must be a table")
        if isinstance(base[key], dict) and base[key]:
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def require(cfg, dotted):
    """Fetch a dotted key, raising ConfigError naming it when absent or null."""
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or node.get(part) is None:
            raise ConfigError(f"missing config key {dotted!r}")
        node = node[part]
    return node


def validate(cfg):
    th = require(cfg, "thetas")
    if list(th) != sorted(th):
        raise ConfigError("config key 'thetas' must be sorted ascending")
    for key in ("data", "teacher", "student", "train", "teacher_train", "exit"):
        require(cfg, key)
    return cfg


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def output_dir(cfg):
    out = os.environ.get(OUTPUT_ENV) or cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def encoder_config(cfg, role):
    return EncoderConfig(**dict(cfg[role], seed=cfg["seed"] + (0 if role == "teacher" else 100)))


def train_config(cfg, section="train", **kw):
    d = dict(cfg[section], seed=cfg["seed"])
    if section == "sweep_train":
        d = dict(cfg["train"], **d)
    return TrainConfig.from_dict(dict(d, **kw))


def policy(cfg):
    return ExitPolicy(**cfg["exit"])


def thresholds(cfg):
    d = cfg["diagnostics"]
    return Thresholds(check_sim=d["check_sim"], check_nn=d["check_nn"], check_exit=d["check_exit"])


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def write_meta(outdir, command, argv=None):
    """Sidecar file holding everything that legitimately varies between reruns."""
    write_json({"command": command, "argv": argv or [], "finished_unix": time.time(),
                "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}, os.path.join(outdir, f"{command}.meta.json"))


# -- stages --------------------------------------------------------------------

def build_data(cfg, outdir=None):
    corpus = data_mod.generate(seed=cfg["seed"], **cfg["data"])
    parts = data_mod.split(corpus, tuple(cfg["split"]), seed=cfg["seed"])
    if outdir is not None:
        for name, part in zip(("train", "val", "test"), parts):
            data_mod.save_corpus(part, os.path.join(outdir, "data", name))
    return parts


def load_data(outdir):
    return tuple(data_mod.load_corpus(os.path.join(outdir, "data", n)) for n in ("train", "val", "test"))


def data_for(cfg, outdir):
    if os.path.exists(os.path.join(outdir, "data", "test", "meta.json")):
        return load_data(outdir)
    return build_data(cfg, outdir)


def teacher_stage(cfg, train, val, outdir, log=print):
    t0 = time.perf_counter()
    model, tlog = train_teacher(encoder_config(cfg, "teacher"), train_config(cfg, "teacher_train"), train, val)
    rho = pair_spearman(model, val)[0]
    save_weights(model, os.path.join(outdir, "teacher.ckpt"), meta={"val_spearman": rho})
    tlog.to_csv(os.path.join(outdir, "teacher_log.csv"))
    log(f"teacher: val spearman {rho:.4f} ({time.perf_counter() - t0:.0f}s)")
    return model


def student_stage(cfg, teacher, train, val, outdir, name, terms, log=print):
    t0 = time.perf_counter()
    tc = train_config(cfg, terms=terms)
    student, _, slog = distill(teacher, encoder_config(cfg, "student"), tc, train, val, policy=policy(cfg))
    save_weights(student, os.path.join(outdir, f"{name}.ckpt"), meta={"terms": sorted(terms)})
    slog.to_csv(os.path.join(outdir, f"{name}_log.csv"))
    log(f"{name}: trained in {time.perf_counter() - t0:.0f}s")
    return student


def first_viable_layer(model, corpus, cfg):
    """First layer in l_min..L-1 meeting the viability predicate on ``corpus``, or None."""
    v, pol = cfg["viability"], policy(cfg)
    tokens, mask = corpus.arrays()
    pooled = pooled_corpus(model, tokens, mask)
    sims = analyze_layers(pooled).sim_to_final
    viable = [l for l in viable_layers(sims, layer_nn_scores(pooled, v["k"]), v["sim"], v["nn"])
              if pol.l_min <= l < model.num_layers]
    return viable[0] if viable else None


def evaluate(model, corpus, cfg):
    """Layer profile, viability, exit distribution and quality of one model on a corpus."""
    pol = policy(cfg)
    v = cfg["viability"]
    tokens, mask = corpus.arrays()
    pooled = pooled_corpus(model, tokens, mask)
    layers = analyze_layers(pooled)
    nn = layer_nn_scores(pooled, v["k"])
    results = infer_corpus(model, tokens, mask, pol)
    dist = exit_distribution(results, model.num_layers)
    rho, _ = pair_spearman(model, corpus, pol)
    rho_full, _ = pair_spearman(model, corpus, pol.with_(strategy="none"))
    viable = [l for l in viable_layers(layers.sim_to_final, nn, v["sim"], v["nn"])
              if pol.l_min <= l < model.num_layers]
    first = viable[0] if viable else None
    pre = layers.sim_to_final[pol.l_min - 1:]
    return {
        "sim_to_final": layers.sim_to_final.tolist(), "stability": layers.stability.tolist(),
        "contraction": layers.contraction.tolist(), "alignment": layers.alignment.tolist(),
        "nn_at_k": nn.tolist(), "exit_probs": dist.probs.tolist(), "exit_cumulative": dist.cumulative.tolist(),
        "exit_rate": dist.exit_rate(), "expected_layers": dist.expected_layers,
        "layer_reduction": dist.layer_reduction, "spearman": rho, "spearman_full": rho_full,
        "viable_layers": viable, "first_viable_layer": first,
        "exit_by_first_viable": dist.exit_rate(first) if first else 0.0,
        "monotone_fraction": layers.monotone_fraction,
        "monotone_fraction_exit_range": float(np.mean(np.diff(pre) >= 0)),
        "results": results,
    }


def _layer_rows(ev_base, ev_leap):
    rows = []
    for l in range(len(ev_base["sim_to_final"])):
        rows.append({"layer": l + 1,
                     "baseline_sim": ev_base["sim_to_final"][l], "baseline_exit": ev_base["exit_cumulative"][l],
                     "leap_sim": ev_leap["sim_to_final"][l], "leap_exit": ev_leap["exit_cumulative"][l],
                     "baseline_stability": ev_base["stability"][l], "leap_stability": ev_leap["stability"][l]})
    return rows


def _viability_rows(ev, cfg):
    v = cfg["viability"]
    return [{"layer": l + 1, "sim_to_final": s, "exit_rate": c, "nn_at_k": n,
             "viable": int(s >= v["sim"] and n >= v["nn"])}
            for l, (s, c, n) in enumerate(zip(ev["sim_to_final"], ev["exit_cumulative"], ev["nn_at_k"]))]


def _strip(ev):
    return {k: v for k, v in ev.items() if k != "results"}


def reproduce(cfg, outdir, with_ablation=False, with_beta=False, with_bench=True, log=print):
    """Run the whole comparison and write every table; returns the summary dict."""
    train, val, test = data_for(cfg, outdir)
    teacher_path = os.path.join(outdir, "teacher.ckpt")
    teacher = load_weights(teacher_path) if os.path.exists(teacher_path) else teacher_stage(cfg, train, val, outdir, log)
    students = {}
    for name, terms in (("baseline", BASELINE_TERMS), ("leap", ALL_TERMS)):
        path = os.path.join(outdir, f"{name}.ckpt")
        students[name] = (load_weights(path) if os.path.exists(path)
                          else student_stage(cfg, teacher, train, val, outdir, name, terms, log))

    pol = policy(cfg)
    evals = {name: evaluate(m, test, cfg) for name, m in students.items()}
    for name, ev in evals.items():
        write_results_jsonl(ev["results"], os.path.join(outdir, f"exits_{name}.jsonl"),
                            [test.ids[i] for i in range(len(test))])
        write_csv(_viability_rows(ev, cfg), os.path.join(outdir, f"viability_{name}.csv"))
    write_csv(_layer_rows(evals["baseline"], evals["leap"]), os.path.join(outdir, "layer_comparison.csv"))
    write_csv([{"layer": l + 1, "baseline": b, "leap": p} for l, (b, p) in
               enumerate(zip(evals["baseline"]["exit_probs"], evals["leap"]["exit_probs"]))],
              os.path.join(outdir, "exit_histogram.csv"))

    pareto = {}
    for name, m in students.items():
        rows = pareto_sweep(m, test, cfg["thetas"], pol, cfg["pareto_ref_layer"])
        write_csv(rows, os.path.join(outdir, f"pareto_{name}.csv"))
        pareto[name] = [asdict(r) for r in rows]

    n_diag = cfg["diagnostics"]["n_samples"]
    tokens, mask = test.arrays(range(min(n_diag, len(test))))
    reports = {}
    for name, m in students.items():
        # the checklist layer is chosen on validation and verified on test
        target = first_viable_layer(m, val, cfg)
        rep = diagnose(m, tokens, mask, pol, target, th=thresholds(cfg),
                       overhead_iters=cfg["diagnostics"]["overhead_iters"] if with_bench else 0)
        with open(os.path.join(outdir, f"diagnostics_{name}.json"), "w") as fh:
            fh.write(rep.to_json() + "\n")
        with open(os.path.join(outdir, f"diagnostics_{name}.txt"), "w") as fh:
            fh.write(rep.to_text() + "\n")
        reports[name] = rep.to_dict()

    summary = {"baseline": _strip(evals["baseline"]), "leap": _strip(evals["leap"]),
               "pareto": pareto, "diagnostics": reports,
               "teacher_test_spearman": pair_spearman(teacher, test)[0]}

    if with_bench:
        b = cfg["bench"]
        bt, bm = test.arrays(range(min(b["n_samples"], len(test))))
        results, rows = bench(students["leap"], bt, bm, pol, b["batch_sizes"], b["warmup"], b["iters"])
        write_bench(results, rows, os.path.join(outdir, "bench_raw.csv"), os.path.join(outdir, "bench.csv"))
        summary["bench"] = {"results": [asdict(r) for r in results], "table": rows}
    if with_ablation:
        rows = ablation_suite(teacher, encoder_config(cfg, "student"), train_config(cfg, "sweep_train"),
                              train, test, ABLATION_MASKS, pol)
        write_csv(rows, os.path.join(outdir, "ablation.csv"))
        summary["ablation"] = rows
    if with_beta:
        rows = beta_sensitivity(teacher, encoder_config(cfg, "student"), train_config(cfg, "sweep_train"),
                                train, test, cfg["train"]["betas"], pol)
        write_csv(rows, os.path.join(outdir, "beta_sweep.csv"))
        summary["beta_sweep"] = rows

    summary["gates"] = check_gates(summary, cfg)
    write_json(summary, os.path.join(outdir, "summary.json"))
    return summary


def check_gates(summary, cfg):
    """Pass/fail of the headline comparison; each entry is (name, passed, detail)."""
    base, leap = summary["baseline"], summary["leap"]
    gates = [
        ("baseline_exit_rate<=0.05", base["exit_rate"] <= 0.05, base["exit_rate"]),
        ("leap_exit_by_first_viable>=0.5", leap["exit_by_first_viable"] >= 0.5,
         [leap["first_viable_layer"], leap["exit_by_first_viable"]]),
        ("leap_layer_reduction>=1.3", leap["layer_reduction"] >= 1.3, leap["layer_reduction"]),
        ("spearman_gap<=0.05", abs(leap["spearman"] - base["spearman"]) <= 0.05,
         [leap["spearman"], base["spearman"]]),
    ]
    first = leap["first_viable_layer"]
    gates.append(("leap_sim_at_first_viable>=0.9",
                  first is not None and leap["sim_to_final"][first - 1] >= 0.9, first))
    gates.append(("leap_monotone>=0.9", leap["monotone_fraction"] >= 0.9, leap["monotone_fraction"]))
    gates.append(("baseline_prefinal_sim<0.8", max(base["sim_to_final"][:-1]) < 0.8,
                  max(base["sim_to_final"][:-1])))
    diag = summary["diagnostics"]
    gates.append(("baseline_flagged_d1_d2",
                  diag["baseline"]["flat_curve"]["verdict"] == "incompatible"
                  and diag["baseline"]["zero_exit"]["verdict"] == "incompatible",
                  [diag["baseline"]["flat_curve"]["verdict"], diag["baseline"]["zero_exit"]["verdict"]]))
    gates.append(("leap_checklist", diag["leap"]["checklist"]["pass"], diag["leap"]["checklist"]["items"]))
    return [{"gate": g, "pass": bool(p), "detail": d} for g, p, d in gates]
