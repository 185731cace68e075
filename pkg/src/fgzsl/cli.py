"""Command-line entry point: ``fgzsl <command> --out DIR [--seed N] [--config FILE]``.

Every command writes ``config.json`` (the resolved settings) into ``--out``.
Failures exit non-zero and print a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import PAData, PATrainConfig, PATrainer, ablation_variant
from .bench import BENCH_PA, BaselineConfig, derive_seed, synth_bench
from .contrastive import CEConfig, class_descriptor, export_descriptors, train_contrastive
from .data import ILLUSTRATION, PHOTO, SyntheticSpec, VectorLoader, generate_synthetic, load_manifest, write_synthetic
from .errors import InvalidConfig, ZSLError
from .evaluation import DEFAULT_KS, PredictionSet, evaluate
from .taxonomy import HOPS, Split, make_split, read_taxonomy, split_stats


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_config(args) -> dict:
    if not args.config:
        return {}
    return json.loads(Path(args.config).read_text(encoding="utf-8"))


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _echo(out: Path, args, resolved: dict) -> None:
    cli = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    _write_json(out / "config.json", {"version": __version__, "command": args.command,
                                      "args": cli, "resolved": resolved})


def _pa_config(args, user: dict, default: PATrainConfig) -> PATrainConfig:
    overrides = {**user, **_parse_sets(args.set)}
    row = overrides.pop("row", args.row)
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    overrides["seed"] = derive_seed(args.seed, "train")
    if row:
        return ablation_variant(row, default, **overrides)
    known = {f.name for f in dataclasses.fields(PATrainConfig)}
    if set(overrides) - known:
        raise InvalidConfig(f"unknown config keys {sorted(set(overrides) - known)}")
    return dataclasses.replace(default, **overrides).validate()


# --- commands -------------------------------------------------------------------


def cmd_split(args) -> dict:
    tax = read_taxonomy(args.taxonomy)
    split = make_split(tax, args.seen_count, derive_seed(args.seed, "split"))
    counts = None
    if args.manifest:
        manifest = load_manifest(args.manifest, classes=tax.species, check_paths=False)
        counts = {}
        for r in manifest.select(domain=PHOTO):
            counts[r.class_id] = counts.get(r.class_id, 0) + 1
    stats = split_stats(split, counts)
    split.save(args.out / "split.json")
    _write_json(args.out / "split_stats.json", stats)
    (args.out / "split_stats.md").write_text(_stats_table(stats), encoding="utf-8")
    _echo(args.out, args, {"split_seed": split.seed, "num_species": len(tax)})
    return stats


def _stats_table(stats) -> str:
    names = ["seen", *(f"{i}-hop" for i in HOPS), "unseen"]
    has_n = "N" in stats["seen"]
    lines = ["| set | K |" + (" N |" if has_n else ""), "|---|---|" + ("---|" if has_n else "")]
    for n in names:
        lines.append(f"| {n} | {stats[n]['K']} |" + (f" {stats[n]['N']} |" if has_n else ""))
    return "\n".join(lines) + "\n"


def cmd_encode(args) -> dict:
    manifest = load_manifest(args.manifest)
    loader = VectorLoader(manifest, args.image_size)
    records = manifest.select(domain=ILLUSTRATION)
    classes = sorted({r.class_id for r in records})
    pos = {c: i for i, c in enumerate(classes)}
    x = loader.stack(records)
    y = np.array([pos[r.class_id] for r in records])
    user = {**_read_config(args), **_parse_sets(args.set)}
    cfg = dataclasses.replace(CEConfig(), **user, seed=derive_seed(args.seed, "encode")).validate()
    with open(args.out / "train_log.jsonl", "w", encoding="utf-8") as log:
        model, _ = train_contrastive(
            x, y, len(classes), cfg, log=lambda rec: log.write(json.dumps(rec, sort_keys=True) + "\n"))
    by_class = {c: x[y == pos[c]] for c in classes}
    descriptors = class_descriptor(model.encoder, by_class)
    export_descriptors(descriptors, args.out / "descriptors.csv")
    export_descriptors(descriptors, args.out / "descriptors.bin")
    _echo(args.out, args, {"ce_config": dataclasses.asdict(cfg), "classes": len(classes)})
    return {"classes": len(classes), "dim": cfg.embed_dim}


def _pa_data(manifest_path, split: Split, image_size: int) -> PAData:
    classes = sorted(split.classes)
    manifest = load_manifest(manifest_path, classes=classes, split=split)
    loader = VectorLoader(manifest, image_size)
    pos = {c: i for i, c in enumerate(classes)}
    src = manifest.select(domain=ILLUSTRATION)
    tgt = manifest.select(domain=PHOTO, split="train")
    return PAData(
        classes, [pos[c] for c in sorted(split.seen)],
        loader.stack(src), np.array([pos[r.class_id] for r in src]),
        loader.stack(tgt), np.array([pos[r.class_id] for r in tgt]),
    )


def cmd_train_pa(args) -> dict:
    split = Split.load(args.split)
    data = _pa_data(args.manifest, split, args.image_size)
    if args.resume:
        trainer = PATrainer.load(args.resume, class_order=data.class_ids)
        remaining = trainer.cfg.iterations - trainer.iteration
        n = args.iterations if args.iterations is not None else remaining
        cfg = trainer.cfg
    else:
        cfg = _pa_config(args, _read_config(args), PATrainConfig())
        trainer = PATrainer.for_data(data, cfg)
        n = cfg.iterations
    mode = "a" if args.resume else "w"
    with open(args.out / "train_log.jsonl", mode, encoding="utf-8") as log:
        records = trainer.fit(data, iterations=n,
                              log=lambda rec: log.write(json.dumps(rec, sort_keys=True) + "\n"))
    trainer.save(args.out / "checkpoint.pt")
    _echo(args.out, args, {"pa_config": dataclasses.asdict(cfg), "iteration": trainer.iteration})
    return {"iteration": trainer.iteration, "last": records[-1] if records else None}


def _predict(checkpoint, manifest_path, split_tag, image_size, k) -> PredictionSet:
    trainer = PATrainer.load(checkpoint)
    manifest = load_manifest(manifest_path, classes=trainer.class_ids)
    records = manifest.select(domain=PHOTO, split=split_tag)
    if not records:
        raise ZSLError(f"no photo records tagged {split_tag!r} in {manifest_path}")
    x = VectorLoader(manifest, image_size).stack(records)
    scores = trainer.predict(x).numpy()
    pos = {c: i for i, c in enumerate(trainer.class_ids)}
    return PredictionSet.from_scores(scores, [pos[r.class_id] for r in records], trainer.class_ids,
                                     k=k, sample_ids=[r.path for r in records])


def cmd_predict(args) -> dict:
    preds = _predict(args.checkpoint, args.manifest, args.split_tag, args.image_size, args.k)
    preds.save(args.out / "predictions.csv", k=args.k)
    _echo(args.out, args, {"samples": len(preds)})
    return {"samples": len(preds)}


def cmd_eval(args) -> dict:
    split = Split.load(args.split)
    ks = tuple(int(k) for k in args.ks.split(","))
    if args.predictions:
        preds = PredictionSet.load(args.predictions)
    elif args.checkpoint and args.manifest:
        preds = _predict(args.checkpoint, args.manifest, args.split_tag, args.image_size, max(ks))
    else:
        raise InvalidConfig("eval needs --predictions, or --checkpoint with --manifest")
    tax = read_taxonomy(args.taxonomy) if args.taxonomy else None
    report = evaluate(preds, split, tax, ks, args.average,
                      metadata={"average": args.average, "ks": list(ks), "seed": args.seed})
    report.save(args.out / "report.json")
    (args.out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    _echo(args.out, args, {"ks": list(ks)})
    return report.to_dict()["topk"]


def cmd_synth_bench(args) -> dict:
    spec_d = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    spec = SyntheticSpec.from_dict(spec_d) if spec_d else SyntheticSpec()
    pa_cfg = _pa_config(args, _read_config(args), BENCH_PA)
    result = synth_bench(spec, pa_cfg, BaselineConfig(iterations=pa_cfg.iterations), seed=args.seed)
    _write_json(args.out / "bench.json", result)
    (args.out / "bench.md").write_text(_bench_table(result), encoding="utf-8")
    if args.export_data:
        ds = generate_synthetic(SyntheticSpec.from_dict(result["spec"]))
        write_synthetic(ds, args.export_data)
    _echo(args.out, args, {"spec": result["spec"], "pa_config": result["pa_config"]})
    print(f"chance level: {result['chance']:.2f}%")
    return {m: r["topk"]["1"] for m, r in result["methods"].items()}


def _bench_table(result) -> str:
    lines = [f"chance: {result['chance']:.2f}%", "",
             "| method | S@1 | U@1 | H@1 | S@5 | U@5 | H@5 |", "|---|---|---|---|---|---|---|"]
    for m, r in result["methods"].items():
        t = r["topk"]
        lines.append(f"| {m} | " + " | ".join(f"{t[k][x]:.1f}" for k in ("1", "5") for x in "SUH") + " |")
    return "\n".join(lines) + "\n"


def cmd_synth_data(args) -> dict:
    spec_d = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    spec = dataclasses.replace(SyntheticSpec.from_dict(spec_d) if spec_d else SyntheticSpec(),
                               seed=derive_seed(args.seed, "data"))
    path = write_synthetic(generate_synthetic(spec), args.out)
    _echo(args.out, args, {"spec": spec.to_dict()})
    return {"manifest": str(path)}


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgzsl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0, help="global seed")
        sp.add_argument("--config", help="JSON file with command settings")
        sp.set_defaults(func=func)
        return sp

    def images(sp):
        sp.add_argument("--image-size", type=int, default=16,
                        help="side length images are resized to (non-.npy entries)")

    sp = command("split", cmd_split, "build a seeded seen/unseen split with hop sets")
    sp.add_argument("--taxonomy", required=True)
    sp.add_argument("--seen-count", type=int, required=True)
    sp.add_argument("--manifest", help="optional manifest for per-set photo counts")

    sp = command("encode", cmd_encode, "train the contrastive encoder and export class descriptors")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a CE setting")
    images(sp)

    sp = command("train-pa", cmd_train_pa, "train Prototype Alignment")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--row", choices=list("ABCDEF"), help="ablation row preset")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a PA setting")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    images(sp)

    sp = command("predict", cmd_predict, "rank classes for photos with a PA checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split-tag", default="test")
    sp.add_argument("--k", type=int, default=10)
    images(sp)

    sp = command("eval", cmd_eval, "compute the GZSL report")
    sp.add_argument("--predictions")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--split", required=True)
    sp.add_argument("--taxonomy")
    sp.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    sp.add_argument("--average", choices=("macro", "micro"), default="macro")
    sp.add_argument("--split-tag", default="test")
    images(sp)

    sp = command("synth-bench", cmd_synth_bench, "synthetic benchmark: PA vs photos-only baseline")
    sp.add_argument("--spec", help="JSON synthetic spec")
    sp.add_argument("--row", choices=list("ABCDEF"))
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--export-data", type=Path, help="also write the generated data here")

    sp = command("synth-data", cmd_synth_data, "write a synthetic dataset (manifest, arrays, taxonomy, split)")
    sp.add_argument("--spec", help="JSON synthetic spec")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        summary = args.func(args)
    except (ZSLError, OSError, ValueError, KeyError) as e:
        code = getattr(e, "code", type(e).__name__)
        print(json.dumps({"error": code, "type": type(e).__name__, "message": str(e),
                          "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
