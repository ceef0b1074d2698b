"""``hetrolat`` command-line entry point.

Every subcommand writes a run manifest next to what it produced: the command
line, the effective configuration, the dataset checksum, the seed, sha256
hashes of each produced file and per-stage wall-clock timings.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import evaluate
from .filters import cached_pre_filter, read_matrix, write_matrix
from .graph import HeteroGraph, load_graph, load_splits
from .homophily import homophily_report
from .latent import (
    LatentGraphPair,
    build_latent_graphs_full,
    build_latent_graphs_scalable,
    diffusion_matrix,
    load_latent,
    save_latent,
)
from .model import TrainConfig, train_full, train_scalable
from .synthetic import SyntheticSpec, write_synthetic

log = logging.getLogger("hetrolat.cli")

MANIFEST_NAME = "run_manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects timings and artifacts for one invocation."""

    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = list(argv)
        self.config: dict = {}
        self.dataset_checksum: str | None = None
        self.seed: int | None = None
        self.timings: dict[str, float] = {}
        self.paths: list[Path] = []

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def produced(self, *paths) -> None:
        self.paths.extend(Path(p) for p in paths)

    def artifacts(self, base: Path) -> dict[str, str]:
        out = {}
        for p in self.paths:
            files = sorted(f for f in p.rglob("*") if f.is_file() and f.name != MANIFEST_NAME) if p.is_dir() else [p]
            for f in files:
                try:
                    key = f.resolve().relative_to(base.resolve()).as_posix()
                except ValueError:
                    key = str(f.resolve())
                out[key] = sha256_file(f)
        return out

    def write(self, path: Path) -> dict:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "dataset_checksum": self.dataset_checksum,
            "seed": self.seed,
            "artifacts": self.artifacts(path.parent),
            "timings_s": self.timings,
            "version": __version__,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        return manifest


def _beside(out: Path) -> Path:
    """Manifest location for a file output: ``<out>.manifest.json``."""
    return out.with_name(out.name + ".manifest.json")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return vals


def _load(run: Run, dataset_dir) -> HeteroGraph:
    with run.stage("load"):
        g = load_graph(dataset_dir)
    run.dataset_checksum = g.digest()
    return g


def _load_config(path) -> TrainConfig:
    return TrainConfig.from_json(path) if path else TrainConfig()


# ---------------------------------------------------------------------------
# stages shared by the single-stage commands and ``pipeline``


def _build_latent(run: Run, g: HeteroGraph, k: int, k_pos: int, scalable: bool, anchors: int, seed: int,
                  out: Path) -> LatentGraphPair:
    with run.stage("build-latent"):
        if scalable:
            if anchors > g.n:
                log.warning("anchor count %d exceeds N=%d, using all nodes as anchors", anchors, g.n)
                anchors = g.n
            pair = build_latent_graphs_scalable(g.subgraphs(), g.features, k, k_pos, m=anchors, seed=seed)
        else:
            pair = build_latent_graphs_full(diffusion_matrix(g.subgraphs()), g.features, k, k_pos)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_latent(pair, out)
    run.produced(out)
    return pair


def _prefilter(run: Run, g: HeteroGraph, r: int, out: Path, latent: LatentGraphPair | None):
    with run.stage("prefilter"):
        ff = cached_pre_filter(g, r, out, latent)
    run.produced(*(out / f for f in sorted(p.name for p in out.iterdir() if p.is_file() and p.name != MANIFEST_NAME)))
    return ff


def _train(run: Run, g: HeteroGraph, latent: LatentGraphPair, cfg: TrainConfig, scalable: bool,
           filtered_dir: Path | None, model_out: Path, emb_out: Path) -> np.ndarray:
    with run.stage("train"):
        if latent.n != g.n:
            raise ValueError(f"latent graphs cover {latent.n} nodes, dataset has {g.n}")
        if scalable:
            if filtered_dir is None:
                raise ValueError("--scalable training needs --filtered")
            ff = cached_pre_filter(g, cfg.r, filtered_dir, latent)
            res = train_scalable(g, latent, ff, cfg)
        else:
            res = train_full(g, latent, cfg)
        for p in (model_out, emb_out):
            p.parent.mkdir(parents=True, exist_ok=True)
        res.state.save(model_out)
        write_matrix(emb_out, res.z)
    run.produced(model_out, emb_out)
    return res.z


def _eval(run: Run, g: HeteroGraph, emb: np.ndarray, splits_path: Path | None, out: Path) -> dict:
    with run.stage("eval"):
        if emb.shape[0] != g.n:
            raise ValueError(f"embeddings have {emb.shape[0]} rows, dataset has {g.n} nodes")
        splits = load_splits(splits_path) if splits_path is not None and splits_path.is_file() else None
        if splits_path is not None and splits is None:
            raise FileNotFoundError(f"splits file {splits_path} not found")
        report = evaluate(emb, g, splits).to_json()
        _write_json(out, report)
    run.produced(out)
    return report


def _default_splits(dataset_dir: Path, given: str | None) -> Path | None:
    if given:
        return Path(given)
    cand = dataset_dir / "splits.tsv"
    return cand if cand.is_file() else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_analyze(args, run: Run) -> None:
    g = _load(run, args.dataset_dir)
    out = Path(args.out)
    run.config = {"knn": args.knn}
    with run.stage("analyze"):
        rep = homophily_report(g, args.knn)
        _write_json(out, rep.to_json())
        if args.nhr:
            rep.write_nhr_tsv(args.nhr)
    run.produced(out, *([Path(args.nhr)] if args.nhr else []))
    run.write(_beside(out))


def cmd_build_latent(args, run: Run) -> None:
    g = _load(run, args.dataset_dir)
    out = Path(args.out)
    run.config = {"k": args.k, "k_pos": args.kpos, "scalable": args.scalable, "anchors": args.anchors}
    run.seed = args.seed
    _build_latent(run, g, args.k, args.kpos, args.scalable, args.anchors, args.seed, out)
    run.write(_beside(out))


def cmd_prefilter(args, run: Run) -> None:
    g = _load(run, args.dataset_dir)
    out = Path(args.out)
    latent = None
    if args.latent:
        with run.stage("load-latent"):
            latent = load_latent(args.latent)
    run.config = {"r": args.r, "latent": args.latent}
    _prefilter(run, g, args.r, out, latent)
    run.write(out / MANIFEST_NAME)


def cmd_train(args, run: Run) -> None:
    g = _load(run, args.dataset_dir)
    with run.stage("config"):
        cfg = _load_config(args.config)
        if args.batch is not None:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "batch_size": args.batch})
    with run.stage("load-latent"):
        latent = load_latent(args.latent)
    run.config = {**cfg.to_dict(), "scalable": args.scalable}
    run.seed = cfg.seed
    out = Path(args.out)
    _train(run, g, latent, cfg, args.scalable, Path(args.filtered) if args.filtered else None, out, Path(args.emb))
    run.write(_beside(out))


def cmd_eval(args, run: Run) -> None:
    g = _load(run, args.dataset_dir)
    with run.stage("load-embeddings"):
        emb = read_matrix(args.emb)
    out = Path(args.out)
    splits = _default_splits(Path(args.dataset_dir), args.splits)
    run.config = {"splits": str(splits) if splits else None}
    _eval(run, g, emb, splits, out)
    run.write(_beside(out))


def cmd_synth(args, run: Run) -> None:
    out = Path(args.out)
    with run.stage("synth"):
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        g = write_synthetic(spec, out)
    run.config = spec.to_dict()
    run.seed = spec.seed
    run.dataset_checksum = g.digest()
    run.produced(out)
    run.write(out / MANIFEST_NAME)


def cmd_pipeline(args, run: Run) -> None:
    dataset_dir = Path(args.dataset_dir)
    out_dir = Path(args.out_dir) if args.out_dir else dataset_dir
    g = _load(run, dataset_dir)
    with run.stage("config"):
        cfg = _load_config(args.config)
    run.config = {**cfg.to_dict(), "scalable": args.scalable}
    run.seed = cfg.seed
    latent = _build_latent(run, g, cfg.k, cfg.k_pos, args.scalable, cfg.anchors, cfg.seed, out_dir / "latent.bin")
    _prefilter(run, g, cfg.r, out_dir / "filtered", latent)
    emb = _train(run, g, latent, cfg, args.scalable, out_dir / "filtered", out_dir / "model.bin",
                 out_dir / "embeddings.f64")
    _eval(run, g, emb, _default_splits(dataset_dir, args.splits), out_dir / "eval.json")
    run.write(out_dir / MANIFEST_NAME)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    d = TrainConfig()
    p = argparse.ArgumentParser(prog="hetrolat", description="Latent-graph guided heterogeneous graph embedding.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a top-level -q from being reset by the subcommand default
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    a = sub.add_parser("analyze", parents=[common], help="homophily report for every meta-path")
    a.add_argument("dataset_dir")
    a.add_argument("--knn", type=_int_list, default=[], help="comma-separated K values for KNN-graph HR")
    a.add_argument("--out", required=True)
    a.add_argument("--nhr", help="also dump per-node homophily to this TSV")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("build-latent", parents=[common], help="construct the homophilic/heterophilic latent graphs")
    b.add_argument("dataset_dir")
    b.add_argument("--k", type=int, default=d.k)
    b.add_argument("--kpos", type=int, default=d.k_pos)
    b.add_argument("--scalable", action="store_true", help="meta-path candidates and random anchors")
    b.add_argument("--anchors", type=int, default=d.anchors)
    b.add_argument("--seed", type=int, default=d.seed)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_latent)

    f = sub.add_parser("prefilter", parents=[common], help="cache low/high-pass filtered features")
    f.add_argument("dataset_dir")
    f.add_argument("--r", type=int, default=d.r)
    f.add_argument("--latent", help="latent.bin; adds the latent-graph channels needed for mini-batch training")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_prefilter)

    t = sub.add_parser("train", parents=[common], help="train and export embeddings")
    t.add_argument("dataset_dir")
    t.add_argument("--latent", required=True)
    t.add_argument("--config", help="flat JSON mirroring TrainConfig (defaults apply to missing keys)")
    t.add_argument("--scalable", action="store_true")
    t.add_argument("--filtered", help="pre-filtered feature directory (rebuilt if stale)")
    t.add_argument("--batch", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--emb", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="linear probe, clustering and similarity search")
    e.add_argument("dataset_dir")
    e.add_argument("--emb", required=True)
    e.add_argument("--splits", help="defaults to <dataset_dir>/splits.tsv when present")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="write a planted-partition dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    pl = sub.add_parser("pipeline", parents=[common], help="build-latent, prefilter, train and eval in one go")
    pl.add_argument("dataset_dir")
    pl.add_argument("--config")
    pl.add_argument("--scalable", action="store_true")
    pl.add_argument("--splits")
    pl.add_argument("--out-dir", help="defaults to the dataset directory")
    pl.set_defaults(func=cmd_pipeline)
    return p


def _setup_logging(quiet: bool) -> None:
    root = logging.getLogger("hetrolat")
    if not root.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))
        root.addHandler(h)
    root.setLevel(logging.WARNING if quiet else logging.INFO)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.quiet)
    run = Run(args.command, argv)
    try:
        args.func(args, run)
    except StageError as exc:
        print(f"hetrolat {args.command}: stage {exc.stage!r} failed: {exc.__cause__}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"hetrolat {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
