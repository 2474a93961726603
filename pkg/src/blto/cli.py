"""Command-line pipeline: optimize-trigger, poison, pretrain, evaluate,
report, ablate. One YAML config drives all stages; stage outputs are
content-addressed so completed work is reused."""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .attack import run_blto
from .augment import attacker_pipeline, victim_pipeline
from .config import ConfigError
from .data import LabeledImageSet
from .evaluation import (
    build_monitor_context,
    export_embeddings,
    monitor_epoch,
    write_metrics,
)
from .models import load_checkpoint, save_checkpoint
from .poisoning import (
    PatchSpec,
    _paste_patch,
    apply_trigger,
    export_poisoned,
    load_poisoned,
    no_attack_manifest,
    poison_with_generator,
    poison_with_patch,
    rebuild_dataset,
)
from .report import ReportError, save_backdoor_example, write_report
from .utils import TrainingDiverged
from .victim import train_victim

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _out_dir(cfg: dict) -> Path:
    return Path(cfg["run"]["output_dir"])


def _trigger_dir(cfg: dict) -> Path:
    return _out_dir(cfg) / f"trigger-{cfgmod.stage_hash(cfg, 'trigger')}"


def _poison_dir(cfg: dict) -> Path:
    return _out_dir(cfg) / f"poison-{cfgmod.stage_hash(cfg, 'poison')}"


def _victim_dir(cfg: dict, method: str) -> Path:
    return _out_dir(cfg) / f"victim-{method}"


def stage_optimize_trigger(cfg: dict, log=print) -> Path:
    """Run the bi-level optimization and checkpoint the generator."""
    if cfg["attack"]["kind"] != "blto":
        raise ConfigError("attack.kind: optimize-trigger requires 'blto'")
    out = _trigger_dir(cfg)
    ckpt = out / "generator.ckpt"
    if ckpt.is_file():
        log(f"[optimize-trigger] reusing {ckpt}")
        return ckpt

    train, _ = cfgmod.build_datasets(cfg)
    split = cfgmod.build_split(cfg, train)
    blto_cfg = cfgmod.build_blto_config(cfg)
    norm = cfgmod.dataset_norm(cfg)
    pipeline = attacker_pipeline(train.image_size, *norm)
    log(
        f"[optimize-trigger] {blto_cfg.outer_iterations} iterations "
        f"(inner={blto_cfg.inner_steps}, outer={blto_cfg.outer_steps}) ..."
    )
    gen, trace = run_blto(split, blto_cfg, pipeline)
    trace.save(out / "trace.csv")
    save_checkpoint(gen, ckpt, extra={"config_hash": cfgmod.config_hash(cfg)})
    log(f"[optimize-trigger] wrote {ckpt} ({len(trace)} iterations)")
    return ckpt


def _load_generator(cfg: dict, generator_path: str | None, log=print):
    if generator_path is None:
        generator_path = stage_optimize_trigger(cfg, log)
    module, _ = load_checkpoint(generator_path)
    return module


def stage_poison(cfg: dict, generator_path: str | None = None, log=print) -> Path:
    """Build and export the poisoned dataset for the configured attack."""
    out = _poison_dir(cfg)
    if (out / "poison_manifest.csv").is_file():
        log(f"[poison] reusing {out}")
        return out

    train, _ = cfgmod.build_datasets(cfg)
    split = cfgmod.build_split(cfg, train)
    kind = cfg["attack"]["kind"]
    if kind == "blto":
        gen = _load_generator(cfg, generator_path, log)
        dataset, manifest = poison_with_generator(gen, split, cfg["attack"]["epsilon"])
    elif kind == "patch":
        dataset, manifest = poison_with_patch(split, PatchSpec(size=cfg["attack"]["patch"]["size"]))
    else:
        dataset, manifest = rebuild_dataset(split), no_attack_manifest(split)
    export_poisoned(
        dataset, manifest, out,
        header_extra={"config_hash": cfgmod.config_hash(cfg), "run_name": cfg["run"]["name"]},
    )
    log(f"[poison] wrote {out} ({len(manifest.poisoned_indices)} poisoned of {len(dataset)})")
    return out


def _eval_trigger_fn(cfg: dict, log=print):
    """Trigger injection used at evaluation time.

    A blto run evaluates under its own generator; patch runs under the patch;
    a no-attack run falls back to ``evaluation.trigger_checkpoint`` when set
    (so baselines are probed with the same trigger), else identity.
    """
    kind = cfg["attack"]["kind"]
    eps = cfg["attack"]["epsilon"]
    override = cfg["evaluation"]["trigger_checkpoint"]
    if kind == "patch":
        spec = PatchSpec(size=cfg["attack"]["patch"]["size"])
        return lambda images: _paste_patch(images, spec)
    if kind == "blto":
        gen = _load_generator(cfg, None, log)
        return lambda images: apply_trigger(gen, images, eps)
    if override:
        gen, _ = load_checkpoint(override)
        return lambda images: apply_trigger(gen, images, eps)
    return lambda images: images


def _monitor_context(cfg: dict, poisoned: LabeledImageSet, poisoned_indices: list[int], log=print):
    _, test = cfgmod.build_datasets(cfg)
    train_clean, _ = cfgmod.build_datasets(cfg)
    norm = cfgmod.dataset_norm(cfg)
    ev = cfg["evaluation"]
    backdoored = (
        poisoned.images[np.asarray(poisoned_indices, dtype=np.int64)]
        if poisoned_indices else None
    )
    return build_monitor_context(
        train_clean, test, _eval_trigger_fn(cfg, log), cfg["dataset"]["target_class"],
        victim_pipeline(train_clean.image_size, cfg["victim"]["include_blur"], *norm),
        norm,
        backdoored_images=backdoored,
        monitor_cap=ev["monitor_cap"],
        knn_k=ev["knn_k"],
        knn_temperature=ev["knn_temperature"],
        per_class_cap=ev["per_class_cap"],
        eval_seed=cfg["run"]["seed"],
    )


def stage_pretrain(cfg: dict, log=print) -> list[Path]:
    """Train one victim per configured CL method on the poisoned export."""
    poison_dir = stage_poison(cfg, log=log)
    dataset, manifest = load_poisoned(poison_dir)
    ctx = _monitor_context(cfg, dataset, manifest.poisoned_indices, log)
    digest = cfgmod.config_hash(cfg)

    written = []
    for method in cfg["victim"]["methods"]:
        out = _victim_dir(cfg, method)
        if (out / "metrics.csv").is_file() and (out / "encoder.ckpt").is_file():
            log(f"[pretrain] reusing {out}")
            written.append(out)
            continue
        vcfg = cfgmod.build_victim_config(cfg, method)
        norm = cfgmod.dataset_norm(cfg)
        log(f"[pretrain] {method}: {vcfg.epochs} epochs on {len(dataset)} images ...")
        try:
            stack, records = train_victim(
                dataset, vcfg, monitor=lambda s, e: monitor_epoch(s, ctx, e), norm=norm
            )
        except TrainingDiverged as err:
            write_metrics(err.records, out / "metrics.csv", cfg["run"]["name"], digest)
            raise
        write_metrics(records, out / "metrics.csv", cfg["run"]["name"], digest)
        save_checkpoint(stack, out / "encoder.ckpt", extra={"config_hash": digest})
        with open(out / "header.json", "w") as fh:
            json.dump(
                {
                    "run_name": cfg["run"]["name"],
                    "attack_kind": cfg["attack"]["kind"],
                    "method": method,
                    "config_hash": digest,
                },
                fh, indent=2, sort_keys=True,
            )
        final = records[-1]
        log(
            f"[pretrain] {method}: BA={final.ba:.4f} ASR={final.asr:.4f} "
            f"S_N={final.s_n:.3f}"
        )
        written.append(out)
    return written


def stage_evaluate(cfg: dict, checkpoint: str | None = None, log=print) -> Path:
    """Final metrics, embedding export, and a trigger visualization."""
    poison_dir = stage_poison(cfg, log=log)
    dataset, manifest = load_poisoned(poison_dir)
    ctx = _monitor_context(cfg, dataset, manifest.poisoned_indices, log)
    norm = cfgmod.dataset_norm(cfg)

    method = cfg["victim"]["methods"][0]
    ckpt_path = Path(checkpoint) if checkpoint else _victim_dir(cfg, method) / "encoder.ckpt"
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"victim checkpoint not found: {ckpt_path} (run pretrain first)")
    stack, _ = load_checkpoint(ckpt_path)

    out = _out_dir(cfg) / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    record = monitor_epoch(stack, ctx, epoch=-1)
    write_metrics([record], out / "metrics_final.csv", cfg["run"]["name"], cfgmod.config_hash(cfg))

    export_embeddings(
        stack, ctx.clean_test, ctx.triggered_test_images, ctx.test_labels,
        out / "embeddings.csv", norm,
    )
    example = ctx.clean_test.images[0]
    triggered = ctx.triggered_test_images[0]
    save_backdoor_example(example, triggered, out / "backdoor_example.png")
    log(
        f"[evaluate] BA={record.ba:.4f} ASR={record.asr:.4f} "
        f"(inclusive {record.asr_all:.4f}) S_N={record.s_n:.3f} -> {out}"
    )
    return out


def stage_ablate(cfg: dict, modes: list[str], log=print) -> Path:
    """Run the pipeline once per optimization-ablation mode and tabulate ASR."""
    base_out = _out_dir(cfg)
    rows = []
    for mode in modes:
        sub = copy.deepcopy(cfg)
        sub["attack"]["blto"]["mode"] = mode
        sub["run"]["name"] = f"{cfg['run']['name']}-{mode}"
        sub["run"]["output_dir"] = str(base_out / f"ablate-{mode}")
        cfgmod.validate_config(sub)
        cfgmod.write_lock(sub, sub["run"]["output_dir"])
        log(f"[ablate] mode={mode}")
        stage_pretrain(sub, log=log)
        for victim_out in sorted(Path(sub["run"]["output_dir"]).glob("victim-*")):
            from .evaluation import read_metrics

            final = read_metrics(victim_out / "metrics.csv")[-1]
            rows.append((mode, victim_out.name.removeprefix("victim-"), final.ba, final.asr))

    summary = base_out / "ablate_summary.csv"
    summary.parent.mkdir(parents=True, exist_ok=True)
    with open(summary, "w") as fh:
        fh.write("mode,method,BA,ASR\n")
        for mode, method, ba, asr in rows:
            fh.write(f"{mode},{method},{ba:.4f},{asr:.4f}\n")
    log(f"[ablate] wrote {summary}")
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blto", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("-c", "--config", help="YAML experiment config")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a config key by dotted path",
        )

    p = sub.add_parser("optimize-trigger", help="run bi-level trigger optimization")
    add_config_args(p)

    p = sub.add_parser("poison", help="build and export the poisoned dataset")
    add_config_args(p)
    p.add_argument("--generator", help="existing generator checkpoint to use")

    p = sub.add_parser("pretrain", help="train victim encoder(s) on the poisoned data")
    add_config_args(p)

    p = sub.add_parser("evaluate", help="evaluate a trained victim checkpoint")
    add_config_args(p)
    p.add_argument("--checkpoint", help="victim encoder checkpoint (default: pretrain output)")

    p = sub.add_parser("report", help="aggregate run directories into tables and figures")
    p.add_argument("run_dirs", nargs="+", help="completed run directories")
    p.add_argument("-o", "--out", required=True, help="report output directory")

    p = sub.add_parser("ablate", help="compare full/no_inner/no_outer optimization")
    add_config_args(p)
    p.add_argument(
        "--modes", default="full,no_inner,no_outer",
        help="comma-separated ablation modes",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(torch.get_num_threads())

    try:
        if args.command == "report":
            try:
                summary, problems = write_report(args.run_dirs, args.out)
            except ReportError as err:
                print(f"report failed: {err}", file=sys.stderr)
                return EXIT_RUNTIME
            print(f"[report] wrote {summary}")
            if problems:
                for problem in problems:
                    print(f"[report] skipped: {problem}", file=sys.stderr)
                return EXIT_RUNTIME
            return EXIT_OK

        cfg = cfgmod.load_config(args.config, args.overrides)
        cfgmod.write_lock(cfg, cfg["run"]["output_dir"])

        if args.command == "optimize-trigger":
            stage_optimize_trigger(cfg)
        elif args.command == "poison":
            stage_poison(cfg, generator_path=args.generator)
        elif args.command == "pretrain":
            stage_pretrain(cfg)
        elif args.command == "evaluate":
            stage_evaluate(cfg, checkpoint=args.checkpoint)
        elif args.command == "ablate":
            modes = [m.strip() for m in args.modes.split(",") if m.strip()]
            stage_ablate(cfg, modes)
        return EXIT_OK
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, FileNotFoundError, OSError, RuntimeError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
