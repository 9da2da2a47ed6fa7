"""Command-line pipeline: prep -> graphs/stats -> train -> eval / explain.

Every command writes its outputs plus a run manifest (config snapshot, input
digests, seed, version, wall time) into the output directory. Outputs are
staged in a temporary directory and renamed into place so a failed run leaves
nothing half-written.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__, evaluate, explain as explain_mod, graphs, ingest, kernels, model, stats, trainer

PRESETS = {
    "diginetica": {"learning_rate": 0.001, "l2_penalty": 1e-6, "batch_size": 20, "dim": 110},
    "gowalla": {"learning_rate": 0.001, "l2_penalty": 1e-6, "batch_size": 40, "dim": 60},
    "amazon": {"learning_rate": 0.003, "l2_penalty": 5e-6, "batch_size": 100, "dim": 170},
}


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Runner:
    """Stages outputs in a temp dir, collects manifest fields, renames on
    success."""

    def __init__(self, command: str, out_dir: str, config: dict, seed: int):
        self.command = command
        self.out_dir = out_dir
        self.manifest = {
            "command": command,
            "config": config,
            "inputs": {},
            "seed": seed,
            "version": __version__,
            "backend": kernels.BACKEND,
        }
        self._start = time.time()
        # stage next to the destination so the final renames never cross
        # a filesystem boundary
        parent = os.path.dirname(os.path.abspath(out_dir)) or "."
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=f".cgsr-{command}-", dir=parent)

    def path(self, name: str) -> str:
        return os.path.join(self.tmp, name)

    def add_input(self, name: str, path) -> None:
        self.manifest["inputs"][name] = _digest(path)

    def check_digests(self, expected) -> None:
        for spec in expected or []:
            name, _, want = spec.partition("=")
            have = self.manifest["inputs"].get(name)
            if have is None:
                raise SystemExit(f"error: --expect-digest names unknown input {name!r}")
            if have != want:
                raise SystemExit(f"error: digest mismatch for {name}: expected {want}, got {have}")

    def finish(self) -> None:
        self.manifest["wall_time_s"] = round(time.time() - self._start, 3)
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.makedirs(self.out_dir, exist_ok=True)
        for name in sorted(os.listdir(self.tmp)):
            os.replace(os.path.join(self.tmp, name), os.path.join(self.out_dir, name))
        os.rmdir(self.tmp)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--expect-digest", action="append", metavar="NAME=SHA256",
                   help="fail unless the named input has this digest")


def build_parser():
    ap = argparse.ArgumentParser(prog="cgsr", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="parse a log, filter, split, index")
    p.add_argument("--in", dest="log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="last:0.2", help="last:<frac> | days:<n> | seconds:<n>")
    p.add_argument("--min-item-freq", type=int, default=5)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int)
    p.add_argument("--group-by-day", action="store_true",
                   help="session key = (id column, UTC day) instead of id column")
    _add_common(p)

    p = sub.add_parser("graphs", help="build and export all four graphs")
    p.add_argument("--data", required=True, help="directory produced by prep")
    p.add_argument("--out", required=True)
    p.add_argument("--keep-common-cause", action="store_true")
    p.add_argument("--unit-causal-weights", action="store_true")
    _add_common(p)

    p = sub.add_parser("stats", help="transition-asymmetry decile grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, help="report |p(a|b)-p(b|a)| >= eps fraction")
    _add_common(p)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeat", type=int, default=1, metavar="R",
                   help="run R seeds; report mean/std of final val metrics")
    for f in dataclasses.fields(trainer.TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            if f.default:
                p.add_argument("--no-" + f.name.replace("_", "-"), dest=f.name,
                               action="store_false", default=None)
            else:
                p.add_argument(flag, dest=f.name, action="store_true", default=None)
        else:
            p.add_argument(flag, dest=f.name, type=int if f.type in ("int", int) else float,
                           default=None)
    _add_common(p)

    p = sub.add_parser("eval", help="rank test prefixes with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ks", default="5,10,20")
    _add_common(p)

    p = sub.add_parser("explain", help="explanation reports for (session, item) pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--session-file", required=True, help="session file to explain")
    p.add_argument("--item", required=True, help="recommended item id (raw)")
    p.add_argument("--out", required=True)
    _add_common(p)
    return ap


def _train_config(args) -> trainer.TrainConfig:
    config = trainer.TrainConfig.from_file(args.config) if args.config else trainer.TrainConfig()
    if args.preset:
        config = dataclasses.replace(config, **PRESETS[args.preset])
    overrides = {}
    for f in dataclasses.fields(trainer.TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "seed":
            overrides[f.name] = v
    config = dataclasses.replace(config, seed=args.seed, **overrides)
    config.validate()
    return config


def _load_data(data_dir):
    train = ingest.read_sessions(os.path.join(data_dir, "train.txt"))
    vocab = ingest.Vocabulary.load(os.path.join(data_dir, "vocab.tsv"))
    test_path = os.path.join(data_dir, "test.txt")
    test = ingest.read_sessions(test_path) if os.path.exists(test_path) else []
    return train, test, vocab


def cmd_prep(args) -> int:
    run = Runner("prep", args.out, {
        "split": args.split, "min_item_freq": args.min_item_freq,
        "min_len": args.min_len, "max_len": args.max_len,
        "group_by_day": args.group_by_day}, args.seed)
    try:
        run.add_input("log", args.log)
        run.check_digests(args.expect_digest)
        with open(args.log, encoding="utf-8") as fh:
            interactions = ingest.parse_log(fh)
        sessions = ingest.sessionize(interactions, group_by_day=args.group_by_day)
        train, test, vocab = ingest.preprocess(
            sessions, min_item_freq=args.min_item_freq, min_len=args.min_len,
            max_len=args.max_len, split=ingest.SplitSpec.parse(args.split))
        ingest.write_sessions(train, run.path("train.txt"))
        ingest.write_sessions(test, run.path("test.txt"))
        vocab.save(run.path("vocab.tsv"))
        run.manifest["n_items"] = vocab.n
        run.manifest["n_train"] = len(train)
        run.manifest["n_test"] = len(test)
        run.finish()
        print(f"prep: {len(train)} train / {len(test)} test sessions, {vocab.n} items -> {args.out}")
        return 0
    except Exception:
        run.abort()
        raise


def _session_graph(data_dir):
    train, _, vocab = _load_data(data_dir)
    return train, vocab, graphs.build_session_graph([s.items for s in train], vocab.n)


def cmd_graphs(args) -> int:
    run = Runner("graphs", args.out, {
        "keep_common_cause": args.keep_common_cause,
        "unit_causal_weights": args.unit_causal_weights}, args.seed)
    try:
        run.add_input("train", os.path.join(args.data, "train.txt"))
        run.add_input("vocab", os.path.join(args.data, "vocab.tsv"))
        run.check_digests(args.expect_digest)
        _, _, sg = _session_graph(args.data)
        eff = graphs.effect_graph(sg, subtract_common_cause=not args.keep_common_cause,
                                  unit_weights=args.unit_causal_weights)
        graphs.write_session_graph_csv(sg, run.path("session.csv"))
        graphs.write_digraph_csv(eff, run.path("effect.csv"))
        graphs.write_digraph_csv(graphs.cause_graph(eff), run.path("cause.csv"))
        graphs.write_correlation_csv(graphs.correlation_graph(sg), run.path("correlation.csv"))
        run.finish()
        print(f"graphs: {len(sg.pair_count)} transition edges -> {args.out}")
        return 0
    except Exception:
        run.abort()
        raise


def cmd_stats(args) -> int:
    run = Runner("stats", args.out, {"eps": args.eps}, args.seed)
    try:
        run.add_input("train", os.path.join(args.data, "train.txt"))
        run.check_digests(args.expect_digest)
        _, _, sg = _session_graph(args.data)
        grid = stats.build_grid(sg, eps=args.eps)
        grid.save(run.path("grid.csv"), run.path("boundaries.csv"))
        run.manifest["n_pairs"] = grid.n_pairs
        run.finish()
        print(f"stats: {grid.n_pairs} pairs gridded -> {args.out}")
        return 0
    except Exception:
        run.abort()
        raise


def cmd_train(args) -> int:
    config = _train_config(args)
    run = Runner("train", args.out, dataclasses.asdict(config), args.seed)
    try:
        run.add_input("train", os.path.join(args.data, "train.txt"))
        run.add_input("vocab", os.path.join(args.data, "vocab.tsv"))
        run.check_digests(args.expect_digest)
        train_sessions, vocab, sg = _session_graph(args.data)
        finals = []
        result = None
        for r in range(args.repeat):
            cfg = dataclasses.replace(config, seed=config.seed + r)
            res = trainer.train(train_sessions, sg, cfg)
            if r == 0:
                result = res
                res.params.save(run.path("checkpoint.cgsr"), meta=res.checkpoint_meta)
                trainer.write_history_csv(res.history, run.path("history.csv"))
            if res.history:
                finals.append((res.history[-1].val_hr20, res.history[-1].val_mrr20,
                               res.history[-1].val_ndcg20))
        if args.repeat > 1:
            arr = np.array(finals)
            run.manifest["repeat"] = {
                "runs": args.repeat,
                "val_hr20_mean": float(np.nanmean(arr[:, 0])),
                "val_hr20_std": float(np.nanstd(arr[:, 0])),
                "val_mrr20_mean": float(np.nanmean(arr[:, 1])),
                "val_mrr20_std": float(np.nanstd(arr[:, 1])),
                "val_ndcg20_mean": float(np.nanmean(arr[:, 2])),
                "val_ndcg20_std": float(np.nanstd(arr[:, 2])),
            }
        run.manifest["best_epoch"] = result.best_epoch
        run.finish()
        last = result.history[-1]
        print(f"train: {len(result.history)} epochs, best epoch {result.best_epoch}, "
              f"final loss {last.train_loss:.6f} -> {args.out}")
        return 0
    except Exception:
        run.abort()
        raise


def _rebuild_for_checkpoint(data_dir, checkpoint):
    params, meta = model.Parameters.load(checkpoint)
    config = trainer.TrainConfig(
        heads=int(meta.get("heads", 4)),
        wgat_layers=int(meta.get("wgat_layers", 1)),
        self_loops=bool(int(meta.get("self_loops", 1))),
        normalize_session_attention=bool(int(meta.get("normalize_session_attention", 0))),
        disable_causality=bool(int(meta.get("disable_causality", 0))),
        disable_correlation=bool(int(meta.get("disable_correlation", 0))),
        disable_preference=bool(int(meta.get("disable_preference", 0))),
        dim=params.d)
    train_sessions, test, vocab = _load_data(data_dir)
    sg = graphs.build_session_graph([s.items for s in train_sessions], vocab.n)
    if params.n_items != vocab.n:
        raise SystemExit(f"error: checkpoint has {params.n_items} items, data has {vocab.n}")
    return params, config, trainer.build_model_inputs(sg, config), test, vocab


def cmd_eval(args) -> int:
    run = Runner("eval", args.out, {"ks": args.ks}, args.seed)
    try:
        run.add_input("train", os.path.join(args.data, "train.txt"))
        run.add_input("test", os.path.join(args.data, "test.txt"))
        run.add_input("checkpoint", args.checkpoint)
        run.check_digests(args.expect_digest)
        params, config, ginputs, test, _ = _rebuild_for_checkpoint(args.data, args.checkpoint)
        if not test:
            raise SystemExit("error: empty test split")
        ks = tuple(int(k) for k in args.ks.split(","))
        result = evaluate.evaluate_model(params, ginputs, config, test, ks=ks,
                                         threads=args.threads)
        with open(run.path("metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.csv_rows()) + "\n")
        summary = {f"{name}@{k}": v for (name, k), v in sorted(result.aggregates.items())}
        summary["n_samples"] = len(result.ranks)
        with open(run.path("summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        run.finish()
        for line in result.csv_rows()[1:]:
            print(line)
        return 0
    except Exception:
        run.abort()
        raise


def cmd_explain(args) -> int:
    run = Runner("explain", args.out, {"item": args.item}, args.seed)
    try:
        run.add_input("checkpoint", args.checkpoint)
        run.add_input("sessions", args.session_file)
        run.check_digests(args.expect_digest)
        params, config, ginputs, _, vocab = _rebuild_for_checkpoint(args.data, args.checkpoint)
        if args.item not in vocab.index_of:
            raise SystemExit(f"error: item {args.item!r} not in vocabulary")
        item_index = vocab.index_of[args.item]
        sessions = ingest.read_sessions(args.session_file)
        enc = model.encode_items(ginputs, params.to_values(), config.heads, config.wgat_layers)
        reports = [explain_mod.explain(s, item_index, params, enc, config) for s in sessions]
        explain_mod.write_reports(reports, run.tmp, vocab=vocab)
        run.finish()
        print(f"explain: {len(reports)} reports -> {args.out}")
        return 0
    except Exception:
        run.abort()
        raise


COMMANDS = {
    "prep": cmd_prep,
    "graphs": cmd_graphs,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
