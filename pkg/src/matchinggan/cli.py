"""``matchinggan`` command-line entry point.

Every command writes ``run_manifest.json`` into its output directory before
doing any work; ``matchinggan replay`` re-runs a command from that file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .config import FIELD_NAMES, TrainConfig, load_config
from .data import CategorySplit, build_manifest, split_categories
from .errors import ConfigError, DataError, MatchingGANError, UsageError

logger = logging.getLogger("matchinggan")

PROTOCOLS = ("fid-is", "lowdata", "fewshot")
RUN_MANIFEST = "run_manifest.json"


# --------------------------------------------------------------------------
# run manifests


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def write_run_manifest(out_dir, command: str, resolved: dict, seed, artifacts: dict, **extra) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RUN_MANIFEST
    payload = {
        "command": command,
        "resolved": _jsonable(resolved),
        "seed": seed,
        "artifacts": _jsonable(artifacts),
        "version": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **extra,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def _finish_manifest(out_dir, **fields) -> None:
    path = Path(out_dir) / RUN_MANIFEST
    payload = json.loads(path.read_text())
    payload.update(_jsonable(fields))
    payload["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}


# --------------------------------------------------------------------------
# commands


def cmd_make_toy(args) -> int:
    from .synthetic import make_glyph_dataset

    write_run_manifest(args.out, "make-toy", _resolved(args), args.seed, {"root": args.out})
    make_glyph_dataset(args.out, args.categories, args.per_category, args.size, args.seed)
    print(f"wrote {args.categories} categories x {args.per_category} images to {args.out}")
    return 0


def _parse_counts(text: str) -> tuple[int, int, int]:
    try:
        counts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"split must be three comma-separated integers, got {text!r}") from None
    if len(counts) != 3:
        raise ConfigError(f"split must be three comma-separated integers, got {text!r}")
    return counts


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    counts = _parse_counts(args.split)
    artifacts = {"manifest": out / "manifest.json", "split": out / "split.json"}
    write_run_manifest(out, "prepare-data", _resolved(args), args.seed, artifacts)
    manifest = build_manifest(args.root, cap=args.cap, seed=args.seed, verify=not args.no_verify)
    split = split_categories(manifest, counts, args.seed)
    manifest.save(artifacts["manifest"])
    split.save(artifacts["split"], seed=args.seed)
    n_files = sum(len(c.files) for c in manifest.categories)
    print(f"{len(manifest.categories)} categories, {n_files} images")
    print("split seen/validation_seen/unseen = %d/%d/%d" % split.sizes())
    return 0


def _train_overrides(args) -> dict:
    return {name: getattr(args, name) for name in FIELD_NAMES if getattr(args, name, None) is not None}


def cmd_train(args) -> int:
    from .plotting import plot_training_curves
    from .training import fit

    cfg = load_config(args.config, _train_overrides(args))
    out = Path(cfg.out)
    artifacts = {"checkpoints": out / "checkpoints", "metrics": out / "metrics.jsonl",
                 "curves": out / "training_curves.png"}
    write_run_manifest(out, "train", {"config_file": args.config, **cfg.to_dict()}, cfg.seed, artifacts,
                       config=cfg.to_dict())
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    result = fit(cfg, out_dir=out, resume=args.resume)
    plot_training_curves(result.history, artifacts["curves"])
    _finish_manifest(out, final_checkpoint=result.checkpoint)
    last = result.history[-1]
    print("finished epoch %d: %s" % (last["epoch"], ", ".join(
        f"{k}={v:.4f}" for k, v in last.items() if k != "epoch")))
    return 0


def _resolve_categories(spec: str, split: CategorySplit, known) -> list[int]:
    if spec in ("seen", "validation_seen", "unseen"):
        return sorted(getattr(split, spec))
    try:
        ids = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"categories must be a split name or comma-separated ids, got {spec!r}") from None
    unknown = [c for c in ids if c not in known]
    if unknown:
        raise DataError(f"unknown category ids: {unknown}")
    return ids


def _load_generator(checkpoint):
    from .training import load_checkpoint, load_dataset

    state = load_checkpoint(checkpoint)
    store, split = load_dataset(state.config)
    return state, store, split


def cmd_generate(args) -> int:
    from .evaluation import generate_bank
    from .plotting import contact_sheet, save_image

    out = Path(args.out)
    write_run_manifest(out, "generate", _resolved(args), args.seed,
                       {"images": out / "images", "sheets": out / "sheets"})
    state, store, split = _load_generator(args.checkpoint)
    G = state.generator
    cats = _resolve_categories(args.categories, split, set(store.categories))
    bank = generate_bank(G, store, args.count, args.k2, args.seed, categories=cats)
    noise = torch.Generator().manual_seed(args.seed + 1)
    rng = np.random.default_rng(args.seed + 1)
    for c in cats:
        d = out / "images" / str(c)
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(bank.images[c]):
            save_image(img, d / f"{i:04d}.png")
        rows = []
        pool = store.images(c)
        for _ in range(args.sheet_rows):
            cond = pool[rng.choice(len(pool), size=args.k2, replace=False)]
            z = torch.randn(args.per_row, G.cfg.d_z, generator=noise)
            batch = torch.from_numpy(cond)[None].expand(args.per_row, *cond.shape)
            coef = None
            if G.cfg.coefficient_mode == "random":
                from .generator import random_coefficients

                coef = random_coefficients(args.k2, noise, batch=args.per_row)
            G.eval()
            with torch.no_grad():
                fake, _ = G(batch.contiguous(), z, coef)
            rows.append(list(cond) + list(fake.numpy()))
        contact_sheet(rows, out / "sheets" / f"{c}.png", n_conditionals=args.k2)
    _finish_manifest(out, categories=cats, images_per_category=args.count)
    print(f"generated {args.count} images for each of {len(cats)} categories into {out}")
    return 0


def _backbone(args, store, split, out: Path):
    from .evaluation import EvalBackbone

    path = Path(args.backbone) if args.backbone else out / "backbone.pt"
    if path.exists():
        return EvalBackbone.from_state_dict(torch.load(path, weights_only=False))
    bb = EvalBackbone.pretrain(store, sorted(split.seen), epochs=args.backbone_epochs, seed=args.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(bb.state_dict(), path)
    return bb


def _bool_list(text: str) -> list[bool]:
    return {"both": [False, True], "true": [True], "false": [False]}[text]


def cmd_eval(args) -> int:
    from .evaluation import MetricReport, fewshot_protocol, fid_is_protocol, lowdata_protocol
    from .plotting import contact_sheet, figure, save

    out = Path(args.out)
    write_run_manifest(out, "eval", _resolved(args), args.seed,
                       {"reports": out / "reports.jsonl", "summary": out / "summary.md"})
    state, store, split = _load_generator(args.checkpoint)
    unseen = store.subset(sorted(split.unseen))
    backbone = _backbone(args, store, split, out)
    run_id = Path(args.checkpoint).stem
    k2 = args.k2 or state.config.k
    reports: list[MetricReport] = []
    lines: list[str] = []

    if args.protocol == "fid-is":
        res = fid_is_protocol(state.generator, backbone, unseen, args.seed, count=args.count, k2=k2)
        proto = {"protocol": "fid-is", "count": args.count, "k2": k2, "seed": args.seed,
                 "categories": len(unseen.categories)}
        reports += [MetricReport(run_id, "fid", res.fid, proto), MetricReport(run_id, "is", res.inception_score, proto)]
        lines += ["| Method | FID (↓) | IS (↑) |", "|---|---|---|", f"| Ours | {res.fid:.2f} | {res.inception_score:.2f} |"]
        contact_sheet([res.bank.images[c][:10] for c in unseen.categories], out / "samples.png")

    elif args.protocol == "lowdata":
        shots = [int(s) for s in args.shots.split(",")]
        table = {}
        for augment in _bool_list(args.augment):
            for s in shots:
                acc = lowdata_protocol(state.generator, backbone, unseen, s, augment, args.seed,
                                       k2=k2, n_generated=args.n_generated,
                                       balanced=args.generated_weight == "balanced")
                table[(augment, s)] = acc
                reports.append(MetricReport(run_id, "accuracy", acc, {
                    "protocol": "lowdata", "shots": s, "augment": augment, "k2": k2,
                    "n_generated": args.n_generated if augment else 0,
                    "generated_weight": args.generated_weight, "seed": args.seed}))
        lines += ["| Method | " + " | ".join(str(s) for s in shots) + " |", "|---|" + "---|" * len(shots)]
        for augment in _bool_list(args.augment):
            name = "Ours" if augment else "Standard"
            lines.append(f"| {name} | " + " | ".join(f"{100 * table[(augment, s)]:.2f}" for s in shots) + " |")
        fig, ax = figure(4.5)
        width = 0.38
        for i, augment in enumerate(_bool_list(args.augment)):
            ax.bar(np.arange(len(shots)) + i * width, [100 * table[(augment, s)] for s in shots], width,
                   label="augmented" if augment else "standard")
        ax.set_xticks(np.arange(len(shots)) + width / 2, [f"{s}-shot" for s in shots])
        ax.set_ylabel("accuracy (%)")
        ax.legend()
        save(fig, out / "lowdata.png")

    elif args.protocol == "fewshot":
        res = fewshot_protocol(state.generator, backbone, unseen, args.n_way, args.c_shot, args.seed,
                               episodes=args.episodes, k2=k2, n_generated=args.n_generated,
                               balanced=args.generated_weight == "balanced")
        proto = {"protocol": "fewshot", "n_way": args.n_way, "c_shot": args.c_shot, "episodes": args.episodes,
                 "k2": k2, "n_generated": args.n_generated, "generated_weight": args.generated_weight,
                 "seed": args.seed,
                 "episode_accuracies": res.episode_accuracies}
        reports.append(MetricReport(run_id, "accuracy", res.mean_accuracy, proto))
        lines += [f"| Method | {args.n_way}-way {args.c_shot}-shot |", "|---|---|",
                  f"| Ours | {100 * res.mean_accuracy:.2f} |"]

    (out / "reports.jsonl").write_text("".join(r.to_json() + "\n" for r in reports))
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    _finish_manifest(out, reports=len(reports))
    print("\n".join(lines))
    return 0


def load_spec(path) -> dict:
    try:
        spec = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read grid spec {path}: {exc}") from exc
    if not isinstance(spec, dict):
        raise ConfigError(f"grid spec {path} must hold a mapping")
    return spec


def ablation_functions(spec: dict, out: Path, seed: int, backbone_epochs: int = 15):
    """Default train/eval callables for ``run_ablation``: desk-scale fit + low-data/FID/IS."""
    from .evaluation import EvalBackbone, fid_is_protocol, lowdata_protocol
    from .training import fit, load_dataset

    cache = {}

    def data(cfg):
        key = (cfg.manifest, cfg.split, cfg.image_channels, cfg.resolution)
        if key not in cache:
            store, split = load_dataset(cfg)
            bb = EvalBackbone.pretrain(store, sorted(split.seen), epochs=backbone_epochs, seed=seed)
            cache[key] = (store, split, bb)
        return cache[key]

    def train_fn(cfg: TrainConfig):
        from .config import config_digest

        store, split, bb = data(cfg)
        res = fit(cfg, store, split, out_dir=out / "runs" / config_digest(cfg))
        return res.state, store.subset(sorted(split.unseen)), bb

    def eval_fn(model, k2: int, evaluation: dict) -> dict:
        state, unseen, bb = model
        ev_seed = int(evaluation.get("seed", seed))
        acc = lowdata_protocol(state.generator, bb, unseen, int(evaluation.get("shots", 10)), True, ev_seed,
                               k2=k2, n_generated=int(evaluation.get("n_generated", 512)))
        res = fid_is_protocol(state.generator, bb, unseen, ev_seed,
                              count=int(evaluation.get("bank_count", 128)), k2=k2)
        return {"accuracy": acc, "fid": res.fid, "is": res.inception_score}

    return train_fn, eval_fn


def cmd_ablate(args) -> int:
    from .ablation import render, run_ablation, write_report

    out = Path(args.out)
    spec = load_spec(args.spec)
    write_run_manifest(out, "ablate", {**_resolved(args), "grid_spec": spec}, args.seed,
                       {"table": out / "ablation.md", "records": out / "ablation.jsonl"})
    train_fn, eval_fn = ablation_functions(spec, out, args.seed, args.backbone_epochs)
    report = run_ablation(spec, train_fn, eval_fn)
    write_report(report, out, figures=not args.no_figures)
    _finish_manifest(out, cells=len(report.cells),
                     failed=sum(c.status == "failed" for c in report.cells))
    print(render(report), end="")
    return 0


def cmd_replay(args) -> int:
    payload = json.loads(Path(args.manifest).read_text())
    command = payload["command"]
    resolved = dict(payload["resolved"])
    if command == "train":
        resolved = {"config": resolved.pop("config_file", None), "resume": None, **resolved}
    if args.out:
        resolved["out"] = args.out
    ns = argparse.Namespace(**resolved)
    return COMMANDS[command](ns)


COMMANDS = {
    "make-toy": cmd_make_toy,
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; flags win over the config file."""
    p.add_argument("--config", help="YAML/JSON run configuration")
    p.add_argument("--resume", help="checkpoint to continue from")
    aliases = {"k": ["--k", "-K"]}
    for f in TrainConfig.__dataclass_fields__.values():
        flag = "--" + f.name.replace("_", "-")
        names = aliases.get(f.name, [flag])
        kw = {"dest": f.name, "default": None}
        if f.name == "shared_encoder":
            kw["choices"] = ["true", "false"]
        elif f.name == "coefficient_mode":
            kw["choices"] = ["matched", "random"]
        elif f.name in ("betas", "gen_channels", "disc_channels"):
            kw["help"] = "comma-separated"
        p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="matchinggan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("make-toy", help="write a procedural glyph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--categories", type=int, default=35)
    p.add_argument("--per-category", type=int, default=40)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = add("prepare-data", help="write manifest and category split files")
    p.add_argument("--root", required=True)
    p.add_argument("--split", required=True, help="seen,validation_seen,unseen counts")
    p.add_argument("--cap", type=int, default=None, help="max images kept per category")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-verify", action="store_true", help="skip decoding every file")

    p = add("train", help="train MatchingGAN")
    _add_train_flags(p)

    p = add("generate", help="generate image banks and contact sheets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--categories", default="unseen", help="split name or comma-separated ids")
    p.add_argument("--count", type=int, default=128)
    p.add_argument("--k2", type=int, default=3)
    p.add_argument("--per-row", type=int, default=6, help="generations per contact-sheet row")
    p.add_argument("--sheet-rows", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("eval", help="FID/IS, low-data or few-shot classification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.add_argument("--shots", default="5,10,15")
    p.add_argument("--augment", default="both", choices=["both", "true", "false"])
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--c-shot", type=int, default=5)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--count", type=int, default=128, help="bank size per category for fid-is")
    p.add_argument("--n-generated", type=int, default=512)
    p.add_argument("--generated-weight", default="balanced", choices=["balanced", "uniform"],
                   help="balanced: a category's generated images weigh as much as its real shots in total")
    p.add_argument("--backbone", default=None, help="saved backbone; pretrained on seen categories if absent")
    p.add_argument("--backbone-epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("ablate", help="run an ablation grid spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backbone-epochs", type=int, default=15)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)

    p = add("replay", help="re-run a command from its run_manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write to a different directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = cmd_replay if args.command == "replay" else COMMANDS[args.command]
    try:
        return func(args)
    except MatchingGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, UsageError)) else 1


if __name__ == "__main__":
    sys.exit(main())
