"""Command-line surface: synth, split, train, benchmark, stress, report.

Exit codes: 0 success, 1 usage error, 2 data/infeasibility error,
3 divergence or search failure. Diagnostics go to standard error, data
to files. Artifact-writing commands refuse to overwrite an existing
non-empty output directory unless --force is given, and every such
command drops a MANIFEST.json recording versions, seeds, and the config
hash needed to reproduce the outputs.

The benchmark config is a JSON file; see configs/demo.json for the
bundled synthetic demo and the README for the schema.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import harness as H
from .algorithms import ALGORITHM_KINDS
from .datamodel import load_dataset, save_dataset
from .errors import DataError, DivergenceError, SearchFailedError
from .metrics import evaluate
from .model import forward, load_checkpoint, save_checkpoint
from .sampler import SplitSpec, make_splits, solve_joint, sweep_from_pool
from .synthgen import GenConfig, generate

USAGE_ERROR, DATA_ERROR, DIVERGENCE_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


class CliUsageError(Exception):
    pass


def parse_sweep(text):
    """'lo:hi:steps' -> list of log-alpha targets, or a single value."""
    parts = text.split(":")
    if len(parts) == 1:
        return [float(parts[0])]
    if len(parts) != 3:
        raise CliUsageError(f"sweep must be lo:hi:steps, got {text!r}")
    lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    if steps < 2 or not lo < hi:
        raise CliUsageError(f"sweep needs lo < hi and steps >= 2, got {text!r}")
    return [float(v) for v in np.linspace(lo, hi, steps)]


def prepare_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise CliUsageError(
            f"output directory {path!r} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def write_manifest(out_dir, config, extra=None):
    path = os.path.join(out_dir, "MANIFEST.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(H.manifest(config, extra), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --------------------------------------------------------------- verbs

def cmd_synth(args):
    config = {
        "n": args.n, "log_alpha": args.log_alpha, "d_core": args.d_core,
        "d_spur": args.d_spur, "d_noise": args.d_noise,
        "core_strength": args.core_strength, "spur_strength": args.spur_strength,
        "subjects": args.subjects, "seed": args.seed,
    }
    prepare_out_dir(args.out, args.force)
    jt = solve_joint(args.log_alpha)
    gen = GenConfig(n=args.n, joint=jt, d_core=args.d_core, d_spur=args.d_spur,
                    d_noise=args.d_noise, core_strength=args.core_strength,
                    spur_strength=args.spur_strength, subjects=args.subjects,
                    seed=args.seed)
    ds = generate(gen)
    save_dataset(ds, os.path.join(args.out, "dataset.tsv"))
    write_manifest(args.out, {"command": "synth", **config},
                   {"n_examples": len(ds), "dim": ds.dim})
    print(f"wrote {len(ds)} examples to {args.out}/dataset.tsv", file=sys.stderr)
    return 0


def cmd_split(args):
    sweep = parse_sweep(args.sweep)
    config = {
        "command": "split", "data": args.data,
        "log_alpha_train": args.log_alpha_train,
        "log_alpha_val": args.log_alpha_val, "sweep": sweep, "seed": args.seed,
    }
    prepare_out_dir(args.out, args.force)
    ds = load_dataset(args.data)
    spec = SplitSpec(log_alpha_train=args.log_alpha_train,
                     log_alpha_val=args.log_alpha_val,
                     sweep=tuple(sweep), seed=args.seed)
    result = make_splits(ds, spec)
    save_dataset(result.train, os.path.join(args.out, "train.tsv"))
    save_dataset(result.val, os.path.join(args.out, "val.tsv"))
    for la, split in result.tests:
        save_dataset(split, os.path.join(args.out, f"test@{la:g}.tsv"))
    write_manifest(args.out, config, {"report": result.report})
    print(f"wrote splits to {args.out} "
          f"(train={len(result.train)}, val={len(result.val)}, "
          f"tests={len(result.tests)})", file=sys.stderr)
    return 0


def _load_splits_dir(path):
    from .sampler import SplitResult
    train = load_dataset(os.path.join(path, "train.tsv"))
    val = load_dataset(os.path.join(path, "val.tsv"))
    tests = []
    for name in sorted(os.listdir(path)):
        if name.startswith("test@") and name.endswith(".tsv"):
            la = float(name[len("test@"):-len(".tsv")])
            tests.append((la, load_dataset(os.path.join(path, name))))
    tests.sort(key=lambda t: t[0])
    return SplitResult(train, val, tests, {}, {})


def cmd_train(args):
    hparams = json.loads(args.hparams) if args.hparams else {}
    config = {
        "command": "train", "data": args.data, "algorithm": args.algorithm,
        "hparams": hparams, "budget_steps": args.budget, "seed": args.seed,
        "hidden": args.hidden,
    }
    prepare_out_dir(args.out, args.force)
    splits = _load_splits_dir(args.data)
    record = H.run_trial(args.algorithm, hparams, splits, args.seed,
                         args.budget, hidden=args.hidden)
    if record.status != "ok":
        raise DivergenceError(f"training {args.algorithm} diverged")
    # retrain to the selected checkpoint is not needed: rerun and stop
    # there to persist the exact selected model
    from .algorithms import make_algorithm
    alg = make_algorithm(args.algorithm, hparams, splits.train, args.seed,
                         args.budget, hidden=args.hidden)
    steps = H.checkpoint_steps(alg.total_steps)[record.selected - 1]
    for _ in range(steps):
        alg.step()
    save_checkpoint(os.path.join(args.out, "checkpoint.npz"),
                    alg._predict_model(), alg.opt, steps)
    with open(os.path.join(args.out, "trial.json"), "w", encoding="utf-8") as fh:
        json.dump(record.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(args.out, config, {"selected_checkpoint": record.selected,
                                      "selected_step": steps})
    print(f"trained {args.algorithm}: selected checkpoint {record.selected} "
          f"(step {steps}), val WGA "
          f"{record.trace[record.selected - 1].val_wga:.4f}", file=sys.stderr)
    return 0


def cmd_stress(args):
    sweep = parse_sweep(args.sweep)
    config = {"command": "stress", "model": args.model, "data": args.data,
              "sweep": sweep, "seed": args.seed}
    prepare_out_dir(args.out, args.force)
    state, _, _ = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    sweep_splits = sweep_from_pool(ds, sweep, args.seed)

    def predict(X):
        return forward(state, X).probs

    reports, (slope, intercept), r2 = H.stress_test(predict, sweep_splits)
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("log_alpha,wga,worst_provenance_accuracy,"
                 "micro_accuracy,macro_accuracy,n\n")
        for la, rep in reports:
            row = rep.to_row()
            n = sum(rep.group_counts.values())
            fh.write(f"{la!r},{row['wga']!r},"
                     f"{row['worst_provenance_accuracy']!r},"
                     f"{row['micro_accuracy']!r},"
                     f"{row['macro_accuracy']!r},{n}\n")
        fh.write(f"# slope={slope!r}\n")
        fh.write(f"# intercept={intercept!r}\n")
        fh.write(f"# r2={r2!r}\n")
    write_manifest(args.out, config,
                   {"slope": slope, "intercept": intercept, "r2": r2})
    print(f"stress fit: slope={slope:.4f} intercept={intercept:.4f} "
          f"r2={r2:.4f}", file=sys.stderr)
    return 0


def _dataset_from_config(cfg):
    src = cfg["dataset"]
    if "file" in src:
        return load_dataset(src["file"])
    s = src["synthetic"]
    jt = solve_joint(s["log_alpha"])
    gen = GenConfig(n=s["n"], joint=jt, d_core=s["d_core"], d_spur=s["d_spur"],
                    d_noise=s["d_noise"], core_strength=s["core_strength"],
                    spur_strength=s["spur_strength"], subjects=s["subjects"],
                    seed=s.get("seed", 0))
    return generate(gen)


def cmd_benchmark(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    prepare_out_dir(args.out, args.force)
    dataset = _dataset_from_config(cfg)
    sp = cfg["split"]
    sweep = sp["sweep"]
    if isinstance(sweep, str):
        sweep = parse_sweep(sweep)
    base_spec = SplitSpec(log_alpha_train=sp["log_alpha_train"],
                          log_alpha_val=sp["log_alpha_val"],
                          sweep=tuple(sweep), seed=0)
    algorithms = cfg.get("algorithms", list(ALGORITHM_KINDS))
    results = H.run_benchmark(
        dataset, base_spec, algorithms, cfg["budget_steps"],
        n_trials=cfg.get("n_trials", H.N_TRIALS),
        n_seeds=cfg.get("n_seeds", H.N_SEEDS),
        workers=args.workers, hidden=cfg.get("hidden", 32),
        batch_per_z=cfg.get("batch_per_z", 16),
    )
    _write_benchmark_outputs(args.out, cfg, algorithms, sweep, results)
    print(f"benchmark complete: {len(algorithms)} algorithms -> {args.out}",
          file=sys.stderr)
    return 0


def _write_benchmark_outputs(out_dir, cfg, algorithms, sweep, results):
    trials_dir = os.path.join(out_dir, "trials")
    os.makedirs(trials_dir, exist_ok=True)
    summary_rows = []
    dynamics_rows = []
    sweep_rows = []
    for kind in algorithms:
        res = results[kind]
        for i, rec in enumerate(res["trials"]):
            path = os.path.join(trials_dir, f"{kind}_search_{i:02d}.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(rec.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        rerun = res["rerun"]
        for rec in rerun["records"]:
            path = os.path.join(trials_dir, f"{kind}_seed_{rec.seed}.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(rec.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            for prog, idw, oodw in H.dynamics_trace(rec):
                dynamics_rows.append((kind, rec.seed, prog, idw, oodw))
            for la, row in rec.sweep_rows:
                sweep_rows.append((kind, rec.seed, la, row["wga"]))
        row = [kind]
        for la in sweep:
            stats = rerun["summary"].get(la, {})
            row.append(stats.get("wga_mean"))
            row.append(stats.get("wga_std"))
        summary_rows.append(row)
    header = ["algorithm"]
    for la in sweep:
        header += [f"wga_mean@{la:g}", f"wga_std@{la:g}"]
    write_csv(os.path.join(out_dir, "summary.csv"), header, summary_rows)
    write_csv(os.path.join(out_dir, "dynamics.csv"),
              ["algorithm", "seed", "progress", "id_wga", "ood_wga"],
              dynamics_rows)
    write_csv(os.path.join(out_dir, "sweep.csv"),
              ["algorithm", "seed", "log_alpha", "wga"], sweep_rows)
    split_hashes = {kind: results[kind]["rerun"]["split_hashes"]
                    for kind in algorithms}
    # manifests double as the reproducibility record: hash of config and
    # of every per-seed split membership
    write_manifest(out_dir, {"command": "benchmark", **cfg},
                   {"split_hashes": {k: {str(s): v for s, v in h.items()}
                                     for k, h in split_hashes.items()},
                    "best_hparams": {k: results[k]["best_hparams"]
                                     for k in algorithms}})


def cmd_report(args):
    trials_dir = os.path.join(args.dir, "trials")
    if not os.path.isdir(trials_dir):
        raise DataError(f"no trials directory under {args.dir!r}")
    summary_path = os.path.join(args.dir, "summary.csv")
    if os.path.exists(summary_path):
        with open(summary_path, "r", encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    best = {}
    for name in sorted(os.listdir(trials_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(trials_dir, name), "r", encoding="utf-8") as fh:
            rec = json.load(fh)
        if rec["status"] != "ok" or rec["selected"] is None:
            continue
        kind = rec["algorithm"]
        wga = rec["trace"][rec["selected"] - 1]["val_wga"]
        if kind not in best or wga > best[kind]:
            best[kind] = wga
    print("\nbest validation WGA per algorithm:")
    for kind in sorted(best):
        print(f"  {kind:12s} {best[kind]:.4f}")
    return 0


# ---------------------------------------------------------------- main

def build_parser():
    p = _Parser(prog="provshift",
                description="provenance-shift simulation and benchmarking")
    sub = p.add_subparsers(dest="verb", required=True)

    def add_common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true",
                        help="overwrite a non-empty output directory")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    add_common(s)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--log-alpha", type=float, required=True)
    s.add_argument("--d-core", type=int, default=3)
    s.add_argument("--d-spur", type=int, default=3)
    s.add_argument("--d-noise", type=int, default=2)
    s.add_argument("--core-strength", type=float, default=2.0)
    s.add_argument("--spur-strength", type=float, default=2.0)
    s.add_argument("--subjects", type=int, default=100)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("split", help="build train/val/sweep test splits")
    add_common(s)
    s.add_argument("--data", required=True, help="dataset .tsv file")
    s.add_argument("--log-alpha-train", type=float, required=True)
    s.add_argument("--log-alpha-val", type=float, required=True)
    s.add_argument("--sweep", required=True, help="lo:hi:steps or one value")
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("train", help="train one algorithm on a split dir")
    add_common(s)
    s.add_argument("--data", required=True, help="split directory")
    s.add_argument("--algorithm", required=True, choices=ALGORITHM_KINDS)
    s.add_argument("--budget", type=int, default=500)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--hparams", default=None,
                   help="JSON object of hyperparameter overrides")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("stress", help="alpha-sweep a trained checkpoint")
    add_common(s)
    s.add_argument("--model", required=True, help="checkpoint .npz")
    s.add_argument("--data", required=True, help="dataset .tsv to sweep from")
    s.add_argument("--sweep", required=True, help="lo:hi:steps")
    s.set_defaults(fn=cmd_stress)

    s = sub.add_parser("benchmark", help="full search + multi-seed benchmark")
    add_common(s)
    s.add_argument("--config", required=True, help="JSON config file")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_benchmark)

    s = sub.add_parser("report", help="print a summary of benchmark outputs")
    s.add_argument("--dir", required=True, help="benchmark output directory")
    s.set_defaults(fn=cmd_report)
    return p


def _join_dash_values(argv):
    """Rewrite `--flag -1:1:11` as `--flag=-1:1:11` so argparse does not
    mistake negative sweep bounds for option names."""
    joined = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if (a in ("--sweep", "--log-alpha", "--log-alpha-train",
                  "--log-alpha-val")
                and i + 1 < len(argv) and argv[i + 1].startswith("-")):
            joined.append(f"{a}={argv[i + 1]}")
            i += 2
        else:
            joined.append(a)
            i += 1
    return joined


def main(argv=None):
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    argv = _join_dash_values(list(argv))
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (DivergenceError, SearchFailedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DIVERGENCE_ERROR


if __name__ == "__main__":
    sys.exit(main())
