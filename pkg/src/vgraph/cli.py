"""Command-line entry point: ``vgraph {train,detect,eval,embed,synth,verify}``.

Exit codes: 0 success, 1 failed verification, 2 bad input or config,
3 training produced NaN/inf.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .graph import CommunitySet, Graph, ParseError, generate_hierarchical_sbm, generate_sbm, load_communities, load_edge_list, write_communities, write_edge_list
from .hierarchy import CommunityTree, assign_hierarchical, leaf_memberships, train_hierarchical
from .metrics import classify_nodes, format_table, load_labels, metrics_report, modularity_report, nmi, overlapping_f1, overlapping_jaccard
from .model import assign_nonoverlapping, assign_overlapping, node_memberships
from .storage import Checkpoint, CheckpointError, file_sha256, level_path, load_checkpoint, read_matrix_tsv, save_checkpoint, write_embeddings, write_json, write_loss_csv, write_memberships
from .training import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("vgraph")

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_NAN = 0, 1, 2, 3
MODES = ("nonoverlapping", "overlapping", "hierarchical")


class UsageError(Exception):
    """Bad arguments, config or input files (exit 2)."""


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = {
    "k": int, "d": int, "lr0": float, "decay": float, "decay_every": int,
    "iters": int, "batch_edges": int, "lam": float, "m_neg": int, "tau": float,
    "tau_end": float, "seed": int, "eval_every": int, "decoder": str,
    "reg_target": str, "dtype": str, "tree_decoder": str, "negative_pool": int,
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override the config file)")
    for name, typ in _TRAIN_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=argparse.SUPPRESS)
    g.add_argument("--shared-negatives", dest="shared_negatives", action="store_true", default=argparse.SUPPRESS,
                   help="draw negatives from one pool of noise nodes per batch")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def run_config(args: argparse.Namespace) -> dict:
    """Config file values overlaid with every flag given on the command line."""
    cfg = _load_config_file(getattr(args, "config", None))
    known = {f.name for f in fields(TrainConfig)} | {"mode", "tree"}
    unknown = set(cfg) - known
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key in known:
        if key in vars(args) and getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    tc = {k: v for k, v in cfg.items() if k not in ("mode", "tree")}
    if "k" not in tc:
        if cfg.get("tree"):
            tc["k"] = CommunityTree.from_spec(cfg["tree"]).n_leaves
        else:
            raise UsageError("the number of communities k is required")
    try:
        return TrainConfig(**tc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _mode(cfg: dict) -> str:
    mode = cfg.get("mode", "hierarchical" if cfg.get("tree") else "nonoverlapping")
    if mode not in MODES:
        raise UsageError(f"mode must be one of {', '.join(MODES)}")
    if mode == "hierarchical" and not cfg.get("tree"):
        raise UsageError("hierarchical mode needs a tree spec such as --tree 3,2")
    return mode


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _read_graph(path: str) -> Graph:
    try:
        with open(path) as fh:
            g = load_edge_list(fh)
    except FileNotFoundError:
        raise UsageError(f"edge file not found: {path}") from None
    except ParseError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if g.edge_count == 0:
        raise UsageError(f"{path}: no edges")
    return g


def _read_communities(path: str, g: Graph, named: bool) -> CommunitySet:
    try:
        with open(path) as fh:
            cs, missing = load_communities(fh, g, named=named)
    except FileNotFoundError:
        raise UsageError(f"community file not found: {path}") from None
    if missing:
        logger.warning("%s: %d label(s) not in the graph were ignored", path, missing)
    if cs.nonempty().k == 0:
        raise UsageError(f"{path}: no communities over the graph's nodes")
    return cs


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _score(mode: str, g: Graph, pred: CommunitySet, truth: CommunitySet | None) -> dict:
    values: dict = {}
    if mode == "overlapping":
        if truth is not None:
            values["f1"] = overlapping_f1(pred, truth)
            values["jaccard"] = overlapping_jaccard(pred, truth)
        return values
    if not pred.is_partition():
        raise UsageError("non-overlapping scoring needs a partition, got overlapping predictions")
    q, excluded = modularity_report(g, pred)
    values["modularity"] = q
    values["modularity_excluded_nodes"] = excluded
    if truth is not None:
        if not truth.is_partition():
            raise UsageError("ground truth is overlapping; use --mode overlapping")
        values["nmi"] = nmi(pred, truth)
    return values


def _manifest(command: str, cfg: dict, started: float, outputs: dict[str, Path], extra: dict | None = None) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": cfg,
        "seed": cfg.get("seed", TrainConfig.__dataclass_fields__["seed"].default),
        "started_unix": started,
        "wall_seconds": time.time() - started,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": {k: {"path": p.name, "sha256": file_sha256(p)} for k, p in outputs.items()},
        **(extra or {}),
    }


def _detect(ck: Checkpoint, g: Graph, mode: str) -> tuple[list[CommunitySet], np.ndarray]:
    """Communities (one set per level, finest last) and the membership matrix."""
    params = ck.best
    if mode == "hierarchical":
        tree = CommunityTree.from_spec(ck.tree)
        return assign_hierarchical(params, tree, g), leaf_memberships(params, tree, g)
    memb = node_memberships(params, g)
    if mode == "overlapping":
        return [assign_overlapping(params, g)], memb
    return [assign_nonoverlapping(params, g)], memb


def _write_detection(out: Path, labels, levels: list[CommunitySet], memb: np.ndarray) -> dict[str, Path]:
    written = {}
    cmty = out / "communities.cmty"
    if len(levels) > 1:
        for level, cs in enumerate(levels, 1):
            path = level_path(cmty, level)
            with open(path, "w") as fh:
                write_communities(cs, labels, fh)
            written[f"communities_level{level}"] = path
    with open(cmty, "w") as fh:
        write_communities(levels[-1], labels, fh)
    written["communities"] = cmty
    mpath = out / "memberships.tsv"
    with open(mpath, "w") as fh:
        write_memberships(labels, memb, fh)
    written["memberships"] = mpath
    return written


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = run_config(args)
    mode = _mode(cfg)
    config = _train_config(cfg)
    g = _read_graph(args.edges)
    truth = _read_communities(args.communities, g, args.named) if args.communities else None
    out = _outdir(args.out)

    def progress(it, rec):
        logger.info("iter %d  total %.6f  recon %.6f  kl %.6f  reg %.6f", it, rec.total, rec.recon, rec.kl, rec.reg)

    tree = None
    if mode == "hierarchical":
        tree = CommunityTree.from_spec(cfg["tree"])
        result = train_hierarchical(g, config, tree, callback=progress)
    else:
        result = train(g, config, callback=progress)
    ck = Checkpoint(config, g.labels, result.best, result.final, result.best_iteration, mode,
                    tree.spec() if tree else None)
    resolved = {**config.to_dict(), "mode": mode, "tree": ck.tree}
    ck_path = out / "checkpoint.vgz"
    save_checkpoint(ck, ck_path)
    loss_path = out / "loss.csv"
    with open(loss_path, "w") as fh:
        write_loss_csv(result.history, fh)
    outputs = {"checkpoint": ck_path, "loss": loss_path}

    metrics = {}
    if truth is not None:
        levels, _ = _detect(ck, g, mode)
        score_mode = "nonoverlapping" if mode == "hierarchical" else mode
        metrics = _score(score_mode, g, levels[-1], truth)
        mpath = out / "metrics.json"
        write_json(metrics_report(metrics, resolved), mpath)
        outputs["metrics"] = mpath
        print(format_table(metrics))
    write_json(
        _manifest("train", resolved, started, outputs,
                  {"best_iteration": result.best_iteration, "best_loss": result.best_loss,
                   "edges": args.edges, "node_count": g.node_count, "edge_count": g.edge_count}),
        out / "manifest.json",
    )
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    started = time.time()
    ck = _load_ck(args.checkpoint)
    g = _read_graph(args.edges)
    try:
        ck.check_labels(g.labels)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    mode = args.mode or ck.mode
    if mode == "hierarchical" and not ck.tree:
        raise UsageError("checkpoint has no tree; hierarchical mode unavailable")
    if mode != "hierarchical" and ck.tree:
        raise UsageError("checkpoint holds a hierarchical model; use --mode hierarchical")
    out = _outdir(args.out)
    levels, memb = _detect(ck, g, mode)
    written = _write_detection(out, g.labels, levels, memb)
    write_json(_manifest("detect", {"mode": mode, "checkpoint": args.checkpoint}, started, written),
               out / "manifest.json")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    g = _read_graph(args.edges)
    values: dict = {}
    if args.pred:
        pred = _read_communities(args.pred, g, False)
        truth = _read_communities(args.truth, g, args.named) if args.truth else None
        if args.mode == "overlapping" and truth is None:
            raise UsageError("overlapping scores need --truth")
        values.update(_score(args.mode, g, pred, truth))
    if args.labels:
        if not args.embeddings:
            raise UsageError("--labels needs --embeddings")
        with open(args.embeddings) as fh:
            names, emb = read_matrix_tsv(fh)
        if tuple(names) != g.labels:
            raise UsageError("embedding rows do not match the graph's nodes")
        with open(args.labels) as fh:
            labels, _ = load_labels(fh, g)
        try:
            values["micro_f1"], values["macro_f1"] = classify_nodes(emb, labels, seed=args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if not values:
        raise UsageError("nothing to evaluate: give --pred and/or --labels")
    report = metrics_report(values, {"mode": args.mode, "pred": args.pred, "truth": args.truth})
    if args.out:
        write_json(report, args.out)
    print(format_table(values))
    return EXIT_OK


def cmd_embed(args: argparse.Namespace) -> int:
    ck = _load_ck(args.checkpoint)
    params = ck.final if args.final else ck.best
    mat = getattr(params, args.which)
    names = ck.labels if args.which != "psi" else [f"c{j}" for j in range(params.k)]
    if args.out == "-":
        write_embeddings(names, mat, sys.stdout)
    else:
        with open(args.out, "w") as fh:
            write_embeddings(names, mat, fh)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        if args.tree:
            tree = CommunityTree.from_spec(args.tree)
            if len(args.probs) != tree.depth + 1:
                raise UsageError(f"--probs needs {tree.depth + 1} values for tree {args.tree}")
            g, levels = generate_hierarchical_sbm(args.n, tree.branching, args.probs, args.seed)
        else:
            g, truth = generate_sbm(args.n, args.k, args.p_in, args.p_out, args.seed)
            levels = [truth]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args.out)
    with open(out / "edges.txt", "w") as fh:
        write_edge_list(g, fh)
    _write_levels(out / "communities.cmty", g.labels, levels)
    print(f"{g.node_count} nodes, {g.edge_count} edges -> {out}")
    return EXIT_OK


def _write_levels(path: Path, labels, levels: list[CommunitySet]) -> None:
    if len(levels) > 1:
        for level, cs in enumerate(levels, 1):
            with open(level_path(path, level), "w") as fh:
                write_communities(cs, labels, fh)
    with open(path, "w") as fh:
        write_communities(levels[-1], labels, fh)


def cmd_verify(args: argparse.Namespace) -> int:
    from .verify import run_checks

    results = run_checks(args.instances, args.seed)
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name.ljust(width)}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAILED


def _load_ck(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _probs(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated probabilities, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vgraph", description="Joint community detection and node embedding.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model and write a checkpoint")
    t.add_argument("--edges", required=True)
    t.add_argument("--communities", help="ground truth to score the result against")
    t.add_argument("--named", action="store_true", help="community lines start with a name (.circles)")
    t.add_argument("--config", help="JSON file of settings; flags win")
    t.add_argument("--mode", choices=MODES, default=argparse.SUPPRESS)
    t.add_argument("--tree", default=argparse.SUPPRESS, help="branching factors, e.g. 3,2")
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="write communities and memberships from a checkpoint")
    d.add_argument("--edges", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--mode", choices=MODES)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score predicted communities and/or embeddings")
    e.add_argument("--edges", required=True)
    e.add_argument("--pred")
    e.add_argument("--truth")
    e.add_argument("--named", action="store_true", help="truth lines start with a name (.circles)")
    e.add_argument("--mode", choices=("nonoverlapping", "overlapping"), default="nonoverlapping")
    e.add_argument("--labels", help="node<TAB>class file for classification")
    e.add_argument("--embeddings", help="TSV written by 'vgraph embed'")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="metrics JSON path")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="export embeddings as TSV")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--which", choices=("phi", "varphi", "psi"), default="phi")
    m.add_argument("--final", action="store_true", help="use the last iterate instead of the best")
    m.add_argument("--out", default="-")
    m.set_defaults(func=cmd_embed)

    s = sub.add_parser("synth", help="generate a planted-partition graph")
    s.add_argument("--n", type=int, default=300)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--p-in", type=float, default=0.1)
    s.add_argument("--p-out", type=float, default=0.005)
    s.add_argument("--tree", help="nested blocks, e.g. 3,2 (uses --probs)")
    s.add_argument("--probs", type=_probs, default=[0.005, 0.05, 0.2],
                   help="edge probability by number of shared ancestors")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify", help="check fast code against the reference oracles")
    v.add_argument("--instances", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        print(f"vgraph: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"vgraph: training diverged: {exc}", file=sys.stderr)
        return EXIT_NAN
    except BrokenPipeError:
        # reader went away (e.g. piped into head); not an error
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
