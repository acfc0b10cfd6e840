"""Command-line entry point: ``leapexit <subcommand> [options]``.

Tables are CSV, reports JSON, per-sample records JSON-lines. Run timestamps go
to ``<command>.meta.json`` so the other outputs are byte-stable across reruns.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiment as X
from .bench import bench, write_bench
from .data import load_corpus, pad_batch, read_token_jsonl
from .diagnostics import diagnose
from .encoder import load_weights
from .errors import LeapError
from .exits import infer_corpus, write_results_jsonl
from .losses import ALL_TERMS, BASELINE_TERMS
from .metrics import pareto_sweep, write_csv
from .plot import plot_outputs
from .trainer import ABLATION_MASKS, ablation_suite, beta_sensitivity

RECIPE = "recipe default"
DESK = "desk-scale choice"


def _common(p):
    p.add_argument("--config", help="JSON config; keys mirror the config sections. Flags override it.")
    p.add_argument("--output-dir", help=f"output directory (env {X.OUTPUT_ENV} overrides both).")
    p.add_argument("--seed", type=int, help=f"seed for data, init and shuffling ({DESK}; default 0).")


def _exit_flags(p):
    p.add_argument("--theta", type=float, help=f"exit threshold on cos(p_l, p_(l-k)) ({RECIPE}: 0.95).")
    p.add_argument("--k", type=int, help=f"similarity lag in layers ({RECIPE}: 1).")
    p.add_argument("--l-min", type=int, help=f"earliest layer allowed to exit ({RECIPE}: 6).")
    p.add_argument("--strategy", choices=("convergence", "pabee", "none"),
                   help="exit rule: convergence check, patience streak, or never exit.")


def _ckpt(p, required=True):
    p.add_argument("--checkpoint", required=required, help="student or teacher checkpoint file.")
    p.add_argument("--corpus", help="corpus directory (default <output-dir>/data/test).")


def build_parser():
    ap = argparse.ArgumentParser(prog="leapexit", description="Exit-aware distillation at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and split the synthetic corpus")
    _common(p)
    p.add_argument("--n-sentences", type=int, help=f"unpaired sentences ({DESK}: 20000).")

    p = sub.add_parser("train-teacher", help="train the teacher encoder")
    _common(p)
    p.add_argument("--epochs", type=int, help=f"teacher epochs ({DESK}: 3).")

    p = sub.add_parser("distill", help="distill a student from the teacher")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--leap", action="store_true", help="all loss terms (exit-aware student).")
    g.add_argument("--baseline", action="store_true", help="final + inter + contrast terms only.")
    g.add_argument("--mask", help="comma-separated subset of final,inter,exit,contrast,late,redund.")
    p.add_argument("--name", help="checkpoint stem (default leap / baseline / mask terms).")
    p.add_argument("--teacher", help="teacher checkpoint (default <output-dir>/teacher.ckpt).")
    p.add_argument("--epochs", type=int, help=f"student epochs ({DESK}: 3).")
    p.add_argument("--lr", type=float, help=f"peak learning rate ({DESK}: 2e-3; recipe 5e-5 at full scale).")
    p.add_argument("--beta", type=float, help=f"exit loss weight ({RECIPE}: 0.4).")

    p = sub.add_parser("evaluate", help="per-layer profile, exit statistics and per-sample exits")
    _common(p)
    _ckpt(p)
    _exit_flags(p)
    p.add_argument("--inputs", help="JSON-lines token records to run instead of the corpus.")

    p = sub.add_parser("diagnose", help="exit-incompatibility diagnostics; exit code 1 when flagged")
    _common(p)
    _ckpt(p)
    _exit_flags(p)
    p.add_argument("--target-layer", type=int, help="layer checked by the deployment checklist (default l_min + 1).")
    p.add_argument("--overhead-iters", type=int, help="timing iterations for the overhead check (0 skips it).")

    p = sub.add_parser("pareto", help="threshold sweep of quality vs expected exit layer")
    _common(p)
    _ckpt(p)
    _exit_flags(p)
    p.add_argument("--thetas", help=f"comma-separated ascending thresholds ({RECIPE}: 0.90,...,0.99).")

    for name, text in (("ablate", "cumulative loss-mask ablation"), ("beta-sweep", "exit loss weight sweep")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--teacher", help="teacher checkpoint (default <output-dir>/teacher.ckpt).")
        p.add_argument("--epochs", type=int, help=f"epochs per run ({DESK}: 1).")
        if name == "beta-sweep":
            p.add_argument("--betas", help=f"comma-separated exit weights ({DESK}: 0.1,0.4,0.8).")

    p = sub.add_parser("bench", help="latency of full, early-exit and monitored forward passes")
    _common(p)
    _ckpt(p)
    _exit_flags(p)
    p.add_argument("--batch-sizes", help="comma-separated batch sizes (default 1,8,32).")
    p.add_argument("--warmup", type=int, help="warmup iterations (default 50).")
    p.add_argument("--iters", type=int, help="measured iterations (default 200).")

    p = sub.add_parser("reproduce", help="teacher, baseline and exit-aware students plus every table")
    _common(p)
    p.add_argument("--with-ablation", action="store_true", help="also run the ablation suite.")
    p.add_argument("--with-beta", action="store_true", help="also run the beta sweep.")
    p.add_argument("--no-bench", action="store_true", help="skip latency measurements.")
    p.add_argument("--check", action="store_true", help="exit 1 if any comparison gate fails.")

    p = sub.add_parser("plot", help="SVG charts of the similarity curves and exit histogram")
    _common(p)
    return ap


def _floats(s):
    return [float(x) for x in s.split(",") if x.strip()]


def _overrides(args):
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.output_dir:
        o["output_dir"] = args.output_dir
    ex = {}
    for flag, key in (("theta", "theta"), ("k", "k"), ("l_min", "l_min"), ("strategy", "strategy")):
        if getattr(args, flag, None) is not None:
            ex[key] = getattr(args, flag)
    if ex:
        o["exit"] = ex
    cmd = args.command
    if getattr(args, "n_sentences", None) is not None:
        o["data"] = {"n_sentences": args.n_sentences}
    if getattr(args, "epochs", None) is not None:
        section = {"train-teacher": "teacher_train", "distill": "train"}.get(cmd, "sweep_train")
        o[section] = {"epochs": args.epochs}
    if getattr(args, "lr", None) is not None:
        o.setdefault("train", {})["lr"] = args.lr
    if getattr(args, "beta", None) is not None:
        o.setdefault("train", {})["weights"] = {"beta": args.beta}
    if getattr(args, "betas", None):
        o.setdefault("train", {})["betas"] = _floats(args.betas)
    if getattr(args, "thetas", None):
        o["thetas"] = _floats(args.thetas)
    b = {}
    if getattr(args, "batch_sizes", None):
        b["batch_sizes"] = [int(x) for x in args.batch_sizes.split(",")]
    for key in ("warmup", "iters"):
        if getattr(args, key, None) is not None:
            b[key] = getattr(args, key)
    if b:
        o["bench"] = b
    return o


def _corpus(args, out):
    return load_corpus(args.corpus or os.path.join(out, "data", "test"))


def _teacher(args, out):
    return load_weights(args.teacher or os.path.join(out, "teacher.ckpt"))


def _data(out):
    return X.load_data(out)


def run(args):
    cfg = X.load_config(args.config, _overrides(args))
    out = X.output_dir(cfg)
    cmd = args.command
    pol = X.policy(cfg)
    status = 0

    if cmd == "gen-data":
        parts = X.build_data(cfg, out)
        print("wrote", ", ".join(f"{n}: {len(p)} sentences / {len(p.pairs)} pairs"
                                 for n, p in zip(("train", "val", "test"), parts)))
    elif cmd == "train-teacher":
        train, val, _ = X.data_for(cfg, out)
        X.teacher_stage(cfg, train, val, out)
    elif cmd == "distill":
        train, val, _ = X.data_for(cfg, out)
        if args.leap:
            terms, name = ALL_TERMS, "leap"
        elif args.baseline:
            terms, name = BASELINE_TERMS, "baseline"
        else:
            terms = frozenset(t.strip() for t in args.mask.split(",") if t.strip())
            name = "mask_" + "+".join(sorted(terms))
        X.student_stage(cfg, _teacher(args, out), train, val, out, args.name or name, terms)
    elif cmd == "evaluate":
        model = load_weights(args.checkpoint)
        stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
        if args.inputs:
            ids, toks = read_token_jsonl(args.inputs)
            tokens, mask = pad_batch(toks)
            results = infer_corpus(model, tokens, mask, pol)
            write_results_jsonl(results, os.path.join(out, f"exits_{stem}.jsonl"), ids)
        else:
            corpus = _corpus(args, out)
            ev = X.evaluate(model, corpus, cfg)
            write_results_jsonl(ev.pop("results"), os.path.join(out, f"exits_{stem}.jsonl"), corpus.ids)
            X.write_json(ev, os.path.join(out, f"eval_{stem}.json"))
            print(json.dumps({k: ev[k] for k in ("exit_rate", "expected_layers", "layer_reduction",
                                                 "spearman", "first_viable_layer")}))
    elif cmd == "diagnose":
        model = load_weights(args.checkpoint)
        corpus = _corpus(args, out)
        n = min(cfg["diagnostics"]["n_samples"], len(corpus))
        tokens, mask = corpus.arrays(range(n))
        iters = cfg["diagnostics"]["overhead_iters"] if args.overhead_iters is None else args.overhead_iters
        rep = diagnose(model, tokens, mask, pol, args.target_layer, X.thresholds(cfg), iters)
        stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
        with open(os.path.join(out, f"diagnostics_{stem}.json"), "w") as fh:
            fh.write(rep.to_json() + "\n")
        print(rep.to_text())
        status = 1 if rep.incompatible else 0
    elif cmd == "pareto":
        model = load_weights(args.checkpoint)
        rows = pareto_sweep(model, _corpus(args, out), cfg["thetas"], pol, cfg["pareto_ref_layer"])
        stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
        write_csv(rows, os.path.join(out, f"pareto_{stem}.csv"))
        for r in rows:
            print(f"theta={r.theta:.2f}  E[l]={r.expected_layers:.3f}  reduction={r.layer_reduction:.3f}  "
                  f"spearman={r.quality:.4f}")
    elif cmd == "ablate":
        train, _, test = _data(out)
        rows = ablation_suite(_teacher(args, out), X.encoder_config(cfg, "student"),
                              X.train_config(cfg, "sweep_train"), train, test, ABLATION_MASKS, pol)
        write_csv(rows, os.path.join(out, "ablation.csv"))
        for r in rows:
            print(f"{r['config']:<18} exit={r['exit_rate']:.3f}  spearman={r['spearman']:.4f}")
    elif cmd == "beta-sweep":
        train, _, test = _data(out)
        rows = beta_sensitivity(_teacher(args, out), X.encoder_config(cfg, "student"),
                                X.train_config(cfg, "sweep_train"), train, test, cfg["train"]["betas"], pol)
        write_csv(rows, os.path.join(out, "beta_sweep.csv"))
        for r in rows:
            print(f"beta={r['beta']:.2f}  exit={r['exit_rate']:.3f}  reduction={r['layer_reduction']:.3f}")
    elif cmd == "bench":
        model = load_weights(args.checkpoint)
        b = cfg["bench"]
        corpus = _corpus(args, out)
        tokens, mask = corpus.arrays(range(min(b["n_samples"], len(corpus))))
        results, rows = bench(model, tokens, mask, pol, b["batch_sizes"], b["warmup"], b["iters"])
        write_bench(results, rows, os.path.join(out, "bench_raw.csv"), os.path.join(out, "bench.csv"))
        for r in rows:
            print(f"batch={r['batch_size']:<3} full={r['full_ms']:.3f}ms  ee={r['ee_ms']:.3f}ms  "
                  f"speedup={r['speedup']:.3f}  E[l]={r['expected_layer']:.2f}")
    elif cmd == "reproduce":
        summary = X.reproduce(cfg, out, args.with_ablation, args.with_beta, not args.no_bench)
        for g in summary["gates"]:
            print(f"{'PASS' if g['pass'] else 'FAIL'}  {g['gate']}")
        if args.check and not all(g["pass"] for g in summary["gates"]):
            status = 1
    elif cmd == "plot":
        for path in plot_outputs(out):
            print("wrote", path)
    X.write_meta(out, cmd, sys.argv[1:])
    return status


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (LeapError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
