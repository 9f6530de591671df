"""Command-line entry point: ``eclip {synth-gen,preprocess,train,eval,verify}``.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .encoders import load_checkpoint, save_checkpoint
from .errors import ConfigError, EClipError
from .evaluation import build_report
from .preprocess import clean_manifest, load_images, read_manifest, title_features, write_manifest
from .synth import generate, load_prompts, load_text_features, split_by_catalog, to_pair_dataset, write_synth
from .training import PairDataset, init_model, train
from .verify import run_all


def _stage_dir(cfg: RunConfig, stage: str) -> Path:
    d = cfg.out_dir / stage
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return d


def _synth_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "synth"


def cmd_synth_gen(cfg: RunConfig) -> int:
    out = _stage_dir(cfg, "synth")
    data = generate(cfg.synth_spec())
    write_synth(out, data)
    print(f"wrote {len(data.records)} records to {out / 'manifest.jsonl'}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    src = Path(cfg.preprocess.manifest) if cfg.preprocess.manifest else _synth_dir(cfg) / "manifest.jsonl"
    out = _stage_dir(cfg, "preprocess")
    records = read_manifest(src)
    images, failures = load_images(records, src.parent)
    kept, report = clean_manifest(
        records, images, failures, cfg.preprocess.min_side, catalog_dedup=cfg.preprocess.catalog_dedup
    )
    # image paths are rewritten relative to the cleaned manifest's directory
    for r in kept:
        r.image_path = os.path.relpath((src.parent / r.image_path).resolve(), out.resolve())
    write_manifest(out / "cleaned_manifest.jsonl", kept)
    (out / "dedup_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    summary = ", ".join(f"{k}={v}" for k, v in report.removed.items() if v)
    print(f"kept {report.kept}/{report.input_count} records" + (f" (removed: {summary})" if summary else ""))
    return 0


def _load_dataset(cfg: RunConfig, manifest: Path) -> PairDataset:
    records = read_manifest(manifest)
    images, failures = load_images(records, manifest.parent)
    if failures:
        pid, why = next(iter(failures.items()))
        raise EClipError(f"{len(failures)} records have unusable images (first: {pid}: {why}); run preprocess")
    feats_path = Path(cfg.train.text_features) if cfg.train.text_features else _synth_dir(cfg) / "features.npz"
    if feats_path.exists():
        table = load_text_features(feats_path)
        missing = [r.product_id for r in records if r.product_id not in table]
        if missing:
            raise EClipError(f"{feats_path}: no text features for {len(missing)} products (first: {missing[0]})")
        text = np.stack([table[r.product_id] for r in records])
    else:
        text = np.stack([title_features(r.title, cfg.train.title_hash_dim) for r in records])
    return to_pair_dataset(records, text, images, cfg.train.image_side)


def _train_manifest(cfg: RunConfig) -> Path:
    return Path(cfg.train.manifest) if cfg.train.manifest else cfg.out_dir / "preprocess" / "cleaned_manifest.jsonl"


def _split(cfg: RunConfig, data: PairDataset):
    if cfg.train.holdout_per_class > 0:
        return split_by_catalog(data, cfg.train.holdout_per_class, cfg.run.seed)
    return data, data.subset([])


def cmd_train(cfg: RunConfig) -> int:
    data = _load_dataset(cfg, _train_manifest(cfg))
    out = _stage_dir(cfg, "train")
    train_set, test_set = _split(cfg, data)
    (out / "split.json").write_text(json.dumps({"train": train_set.product_ids, "test": test_set.product_ids}))
    tc = cfg.train_config(train_set.text.shape[-1], train_set.image.shape[1])
    model = init_model(tc)
    save_checkpoint(out / "init.json", model, step=0)
    probe = train_set.batch(train_set.product_ids[: tc.B0])
    ckpt_dir = out / "checkpoints"
    if tc.checkpoint_every:
        ckpt_dir.mkdir(exist_ok=True)
    model, metrics = train(tc, train_set, probe=probe, log_path=out / "metrics.jsonl", checkpoint_dir=ckpt_dir, model=model)
    save_checkpoint(out / "model.json", model, step=tc.total_steps)
    print(f"trained {tc.total_steps} steps; final batch loss {metrics[-1]['loss']:.4f}, tau {model.tau:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else cfg.out_dir / "train" / "model.json"
    model = load_checkpoint(ckpt)
    data = _load_dataset(cfg, _train_manifest(cfg))
    split_path = cfg.out_dir / "train" / "split.json"
    if split_path.exists():
        split = json.loads(split_path.read_text())
        train_set, test_set = data.subset(split["train"]), data.subset(split["test"])
    else:
        train_set, test_set = _split(cfg, data)
    if len(test_set) == 0:
        test_set = train_set
    prompts_path = Path(cfg.eval.prompts) if cfg.eval.prompts else _synth_dir(cfg) / "prompts.npz"
    if prompts_path.exists():
        prompts = load_prompts(prompts_path)
    else:
        labels = sorted({">".join(c) for c in data.categories})
        prompts = {lab: title_features(lab.replace(">", " "), cfg.train.title_hash_dim) for lab in labels}
    out = _stage_dir(cfg, "eval")
    report = build_report(
        model,
        train_set,
        test_set,
        prompts,
        adult_prefixes=cfg.eval.adult_prefixes,
        tasks=cfg.eval.tasks,
        pca_dim=cfg.eval.pca_dim,
        probe_epochs=cfg.eval.probe_epochs,
        probe_lr=cfg.eval.probe_lr,
        seed=cfg.run.seed,
    )
    (out / "eval_report.json").write_text(json.dumps(report, indent=2))
    for task, block in report.items():
        print(f"{task}: {json.dumps(block)}")
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    results = run_all(cfg.run.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eclip", description="Desk-scale e-CLIP pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--deterministic", action="store_true", help="serial, bit-reproducible execution")
    parser.add_argument("--out", help="override run.out_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out, deterministic=args.deterministic)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EClipError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
