"""Command-line entry point: ``sketchgan <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, invariance, nn, render, retrieval, train

log = logging.getLogger("sketchgan")


class UsageError(Exception):
    """Bad invocation or missing input; exit code 2."""


def _load_store(path) -> data.SampleStore:
    p = Path(path)
    manifest_path = p / data.MANIFEST_NAME if p.is_dir() else p
    if not manifest_path.is_file():
        raise UsageError(f"no dataset manifest at {manifest_path}")
    try:
        return data.SampleStore.from_manifest(data.DatasetManifest.read(manifest_path))
    except data.ManifestError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(path) -> nn.Model:
    if not Path(path).is_file():
        raise UsageError(f"no checkpoint at {path}")
    return nn.load_checkpoint(path)


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    m = data.generate_dataset(args.count, args.seed, args.out, args.duplicate_fraction)
    print(f"wrote {len(m.records)} images to {args.out}")
    print(f"hash={m.content_hash}")
    return 0


# -- train -------------------------------------------------------------------

_TRAIN_FIELDS = [f for f in dataclasses.fields(train.TrainConfig)]


def train_config(args) -> train.TrainConfig:
    """Field defaults, overridden by ``--config`` file values, overridden by explicit flags."""
    values = {}
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"no config file at {args.config}")
        values.update(train.read_config_file(args.config))
    for f in _TRAIN_FIELDS:
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = str(v)
    try:
        return train.TrainConfig.from_mapping(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = train_config(args)
    store = _load_store(args.data)
    g, d = train.build_pair(args.arch, cfg)
    out = Path(args.out)
    sink = train.DirectorySink(out)
    (out / "config.txt").write_text("\n".join([f"arch={args.arch}"] + cfg.to_lines()) + "\n")
    try:
        train.train(store, g, d, cfg, sink)
    except train.NonFiniteLossError as exc:
        print(f"error: {exc}; diagnostic checkpoints in {out}", file=sys.stderr)
        return 1
    print(f"generator={out / 'generator.ckpt'}")
    print(f"discriminator={out / 'discriminator.ckpt'}")
    print(f"losses={out / 'losses.csv'}")
    return 0


# -- encode ------------------------------------------------------------------

def cmd_encode(args) -> int:
    d = _load_model(args.checkpoint)
    enc = retrieval.make_encoder(d)
    store = _load_store(args.data)
    index = retrieval.build_index(enc, store)
    retrieval.save_index(index, args.out)
    print(f"indexed {len(index)} images, dim {index.dim}")
    print(f"checkpoint_hash={index.checkpoint_hash}")
    print(f"manifest_hash={index.manifest_hash}")
    return 0


# -- query -------------------------------------------------------------------

def _check_provenance(ckpt_path, index: retrieval.EmbeddingIndex) -> None:
    h = nn.file_hash(ckpt_path)
    if h != index.checkpoint_hash:
        raise RuntimeError(f"index was built with checkpoint {index.checkpoint_hash[:16]}..., "
                           f"not {Path(ckpt_path).name} ({h[:16]}...); rebuild it with `encode`")


def _query_image(spec: str, store):
    """A query given as a dataset identifier or an image path -> (label, (1,1,64,64) array)."""
    if store is not None and spec in store.ids:
        return spec, store.images[store.index_of(spec)][None]
    p = Path(spec)
    if not p.is_file():
        raise UsageError(f"{spec!r} is neither a dataset identifier nor an image file")
    return p.stem, data.load_image(p).values


def cmd_query(args) -> int:
    if not args.image and not args.batch:
        raise UsageError("give --image or --batch")
    if args.batch and args.data is None:
        raise UsageError("--batch needs --data to look up identifiers and draw the montage")
    if not Path(args.index).is_file():
        raise UsageError(f"no index at {args.index}")
    d = _load_model(args.checkpoint)
    index = retrieval.load_index(args.index)
    _check_provenance(args.checkpoint, index)
    if not 1 <= args.k <= len(index):
        raise UsageError(f"--k must be between 1 and {len(index)}")
    enc = retrieval.make_encoder(d)
    store = _load_store(args.data) if args.data else None

    if args.batch:
        specs = [ln.strip() for ln in Path(args.batch).read_text().splitlines() if ln.strip()]
    else:
        specs = [args.image]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for spec in specs:
        label, img = _query_image(spec, store)
        results = retrieval.top_k(index, retrieval.encode(enc, img, label), args.k)
        retrieval.write_results_csv(results, out / f"{label}.csv")
        if store is not None:
            rows.append((img[0, 0], [store.images[store.index_of(i)][0] for i, _ in results]))
        for rank, (ident, sim) in enumerate(results, start=1):
            print(f"{label}\t{rank}\t{ident}\t{sim:.6f}")
    if rows:
        name = "montage.pgm"
        render.save_pgm(render.montage(rows), out / name)
        print(f"montage={out / name}")
    return 0


# -- bench -------------------------------------------------------------------

def _bench_one(enc, store, kinds, args, label: str, out: Path) -> dict:
    reports = {}
    for kind in kinds:
        spec = invariance.SweepSpec(kind, args.probes, args.seed)
        rep = invariance.run_sweep(enc, store, spec, label=label)
        reports[kind] = rep
        rep.write_csv(out / f"{label}_{kind}.csv")
        rep.write_raw_csv(out / f"{label}_{kind}_raw.csv")
        if kind == "shift":
            rep.write_grid_csv(out / f"{label}_shift_grid.csv")
            render.save_pgm(render.heatmap(rep.shift_grid()), out / f"{label}_shift_heatmap.pgm")
        else:
            xs = np.array([p[0] for p in rep.points])
            render.save_pgm(render.line_plot(xs, {label: rep.mean}), out / f"{label}_{kind}.pgm")
        print(f"{label} {kind}: {len(rep.points)} points, mean similarity {rep.mean.mean():.4f}")
    return reports


def cmd_bench(args) -> int:
    kinds = [k.strip() for k in args.sweeps.split(",") if k.strip()]
    bad = [k for k in kinds if k not in invariance.SWEEP_KINDS]
    if bad or not kinds:
        raise UsageError(f"unknown sweep(s) {bad}; choose from {','.join(invariance.SWEEP_KINDS)}")
    if args.labels and len(args.labels) != len(args.checkpoint):
        raise UsageError("--label must be given once per --checkpoint")
    store = _load_store(args.data)
    if len(store) < args.probes:
        raise UsageError(f"dataset has {len(store)} samples but {args.probes} probes were requested; "
                         f"lower --probes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_label = {}
    for i, ckpt in enumerate(args.checkpoint):
        if ckpt == "raw":
            enc, label = retrieval.RawPixelEncoder(), "raw"
        else:
            d = _load_model(ckpt)
            enc = retrieval.make_encoder(d)
            label = d.spec.name.split("-")[0]
        if args.labels:
            label = args.labels[i]
        if label in per_label:
            raise UsageError(f"duplicate label {label!r}; pass --label per checkpoint")
        per_label[label] = _bench_one(enc, store, kinds, args, label, out)

    if len(per_label) > 1:
        per_kind = {k: {lab: reps[k] for lab, reps in per_label.items()} for k in kinds}
        invariance.write_comparison_csv(per_kind, out / "comparison.csv")
        for kind in kinds:
            if kind != "shift":
                xs = np.array([p[0] for p in per_kind[kind][next(iter(per_label))].points])
                curves = {lab: per_kind[kind][lab].mean for lab in per_label}
                render.save_pgm(render.line_plot(xs, curves), out / f"comparison_{kind}.pgm")
        print(f"comparison={out / 'comparison.csv'}")
        if {"sketch", "thin"} <= set(per_label):
            lines = []
            for kind, diff in invariance.ordering_summary(per_kind, "sketch", "thin").items():
                verdict = "holds" if diff > 0 else "does not hold"
                lines.append(f"{kind}: mean(sketch - thin) = {diff:+.4f}; sketch more invariant {verdict}")
            (out / "ordering.txt").write_text("\n".join(lines) + "\n")
            print("\n".join(lines))
    return 0


# -- inspect -----------------------------------------------------------------

def cmd_inspect(args) -> int:
    p = Path(args.path)
    if p.is_dir() or p.suffix == ".tsv":
        store_manifest = data.DatasetManifest.read(p)
        print("kind=manifest")
        print(f"count={len(store_manifest.records)}")
        print(f"seed={store_manifest.seed}")
        print(f"hash={store_manifest.content_hash}")
        if args.verify:
            print(f"hash_verified={store_manifest.compute_hash() == store_manifest.content_hash}")
        return 0
    if not p.is_file():
        raise UsageError(f"no such file {p}")
    head = p.read_bytes()[:6]
    if head == retrieval.INDEX_MAGIC:
        index = retrieval.load_index(p)
        print("kind=index")
        print(f"count={len(index)}")
        print(f"dim={index.dim}")
        print(f"checkpoint_hash={index.checkpoint_hash}")
        print(f"file_hash={nn.file_hash(p)}")
        return 0
    if head == nn.CHECKPOINT_MAGIC:
        model = nn.load_checkpoint(p)
        print("kind=checkpoint")
        print(f"architecture={model.spec.name}")
        print(f"seed={model.seed}")
        for key, value in nn.param_breakdown(model).items():
            print(f"params.{key}={value}")
        print(f"file_hash={nn.file_hash(p)}")
        return 0
    raise UsageError(f"{p}: not a checkpoint, index or manifest")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="sketchgan", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, seed_default=0, seed_help="random seed"):
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--seed", type=int, default=seed_default, help=seed_help)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic mark dataset and its manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=2000, help="number of images")
    p.add_argument("--duplicate-fraction", type=float, default=0.1, help="share of near-duplicate marks")

    p = add("train", cmd_train, "train a GAN on a dataset", None, "random seed (0 unless set in --config)")
    p.add_argument("--arch", choices=sorted(nn.ARCHITECTURES), default="sketch", help="network pair")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="output directory for checkpoints and losses.csv")
    p.add_argument("--config", help="key=value file; explicit flags take precedence")
    defaults = train.TrainConfig()
    for f in _TRAIN_FIELDS:
        if f.name == "seed":
            continue
        kind = {"int": int, "float": float}.get(f.type, str)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                       help=f"(default {getattr(defaults, f.name)})")

    p = add("encode", cmd_encode, "embed a dataset with a discriminator and write an index")
    p.add_argument("--checkpoint", required=True, help="discriminator checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="index file to write")

    p = add("query", cmd_query, "retrieve the top-k matches for one or more queries")
    p.add_argument("--checkpoint", required=True, help="discriminator checkpoint the index was built with")
    p.add_argument("--index", required=True, help="index file")
    p.add_argument("--image", help="query image path or dataset identifier")
    p.add_argument("--batch", help="file with one identifier or image path per line")
    p.add_argument("--data", help="dataset for identifier lookup and the montage")
    p.add_argument("--k", type=int, default=9, help="results per query")
    p.add_argument("--out", default="query_out", help="output directory")

    p = add("bench", cmd_bench, "run rotation/scale/shift invariance sweeps")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="discriminator checkpoint, repeatable; 'raw' uses raw pixels")
    p.add_argument("--label", dest="labels", action="append", help="report label per checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--sweeps", default="rotation,scale,shift", help="comma-separated sweep kinds")
    p.add_argument("--probes", type=int, default=100, help="number of probe images")
    p.add_argument("--out", default="bench_out", help="output directory")

    p = add("inspect", cmd_inspect, "print metadata of a checkpoint, index or manifest")
    p.add_argument("path", help="checkpoint, index file, manifest or dataset directory")
    p.add_argument("--verify", action="store_true", help="recompute the manifest hash")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sketchgan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"sketchgan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
