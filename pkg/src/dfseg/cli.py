"""Command-line entry point: ``dfseg {gen-data,train,eval,ablate,report}``.

Every command reads one JSON config (all fields optional) and writes under
``output_dir/<command or stage>/`` a verbatim copy of that config
(``config.json``), the effective settings (``run.json``) and its artifacts.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import ablation, plotting
from .checkpoint import atomic_write_text, dump_json, load_checkpoint
from .config import RunConfig, load_config
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidSpecError,
    MissingDependencyError,
    NumericalError,
)
from .evaluation import (
    distribution_csv,
    distribution_entropy,
    evaluate_model,
    generated_distribution_report,
)
from .models import ModelConfig, param_count
from .shapesdata import class_pixel_histogram, dump_dataset, generate_dataset
from .training import distill, train_gan, train_teacher

log = logging.getLogger("dfseg")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
STAGES = ("teacher", "gan", "degan", "distill")


class Run:
    """Parsed config plus the output layout for one invocation."""

    def __init__(self, cfg: RunConfig, text: str, command: str, stage: str | None = None):
        self.cfg, self.text, self.command, self.stage = cfg, text, command, stage
        self.root = Path(cfg.output_dir)

    def stage_dir(self, name: str) -> Path:
        return self.root / name

    def echo(self, directory: Path, **extra) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        atomic_write_text(directory / "config.json", self.text)
        atomic_write_text(directory / "run.json", dump_json({
            "command": self.command, "stage": self.stage, "global_seed": self.cfg.global_seed,
            "output_dir": str(self.root), "config": self.cfg.to_dict(), **extra}))

    def dataset(self, split: str):
        data = generate_dataset(self.cfg.dataset_config(split))
        # the proxy split is unlabeled by construction
        return data.without_labels() if split == "proxy" else data

    def require(self, path: Path, what: str):
        if not (path / "manifest.json").is_file():
            raise MissingDependencyError(f"{what} checkpoint not found at {path}")
        return load_checkpoint(path)

    def teacher(self):
        return self.require(self.stage_dir("teacher") / "checkpoint", "teacher")


def _write_metrics(directory: Path, metrics: dict) -> None:
    atomic_write_text(directory / "metrics.json", dump_json(metrics))


def _final_losses(record) -> dict:
    return record.epochs[-1]["losses"] if record.epochs else {}


# -- commands -------------------------------------------------------------

def cmd_gen_data(run: Run) -> int:
    out = run.stage_dir("data")
    run.echo(out)
    for split in ("train", "val", "proxy"):
        data = run.dataset(split)
        dump_dataset(data, out / split, split, with_labels=data.has_labels)
        log.info("wrote %d %s images", len(data), split)
    return EXIT_OK


def cmd_train(run: Run) -> int:
    stage, cfg = run.stage, run.cfg
    out = run.stage_dir(stage)
    if stage == "teacher":
        train = run.dataset("train")
        model_cfg = ModelConfig("teacher_seg", num_classes=cfg.data.num_classes, width=cfg.teacher.width,
                                image_size=tuple(cfg.data.image_size), dropout=cfg.teacher.dropout,
                                seed=cfg.seed("teacher-init"))
        run.echo(out)
        model, record = train_teacher(train, cfg.teacher_policy(), model_cfg, checkpoint_dir=out / "checkpoint")
        metrics = {"eval": evaluate_model(model, run.dataset(cfg.eval.split)).to_dict(),
                   "final_losses": _final_losses(record), "param_count": param_count(model)}
    elif stage in ("gan", "degan"):
        teacher = run.teacher() if stage == "degan" else _optional_teacher(run)
        degan = cfg.degan_config() if stage == "degan" else None
        run.echo(out)
        generator, _, record = train_gan(run.dataset("proxy"), cfg.gan_policy(stage), degan=degan, teacher=teacher,
                                         generator_width=cfg.gan.generator_width,
                                         discriminator_width=cfg.gan.discriminator_width, checkpoint_dir=out,
                                         d_z=cfg.gan.d_z)
        metrics = {"final_losses": _final_losses(record)}
        if teacher is not None:
            w = generated_distribution_report(generator, teacher, cfg.eval.report_samples, seed=cfg.seed("report"))
            metrics.update(distribution=w.tolist(), distribution_entropy=distribution_entropy(w))
            atomic_write_text(out / "distribution.csv", distribution_csv(w))
    else:
        metrics, record = _train_distill(run, out)
    record.write(out / "log.jsonl")
    _write_metrics(out, metrics)
    return EXIT_OK


def _optional_teacher(run: Run):
    path = run.stage_dir("teacher") / "checkpoint"
    return load_checkpoint(path) if (path / "manifest.json").is_file() else None


def _train_distill(run: Run, out: Path):
    cfg = run.cfg
    d = cfg.distill
    teacher = run.teacher()
    generator = None
    source = d.source
    if source in ("generator", "mixed"):
        generator = run.require(run.stage_dir(d.generator_stage) / "generator", f"{d.generator_stage} generator")
    if source == "true":
        images, source = run.dataset("train").without_labels().images, "proxy"
    else:
        images = run.dataset("proxy").images
    student_cfg = ModelConfig("student_seg", num_classes=cfg.data.num_classes, width=d.student_width,
                              image_size=tuple(cfg.data.image_size), dropout=d.dropout,
                              seed=cfg.seed("student-init"))
    run.echo(out)
    student, record = distill(teacher, student_cfg, images, cfg.distill_policy(), source=source, mix=cfg.mix_spec(),
                              generator=generator, temperature=d.temperature, frozen_dump=d.frozen_dump,
                              checkpoint_dir=out / "checkpoint")
    metrics = {"eval": evaluate_model(student, run.dataset(cfg.eval.split)).to_dict(),
               "final_losses": _final_losses(record), "param_count": param_count(student),
               "teacher_param_count": param_count(teacher)}
    return metrics, record


def cmd_eval(run: Run, checkpoint: str | None) -> int:
    if checkpoint is None:
        stage = run.stage or "distill"
        if stage not in ("teacher", "distill"):
            raise InvalidConfigError(f"eval --stage must be teacher or distill, got {stage!r}")
        path, name = run.stage_dir(stage) / "checkpoint", stage
    else:
        path, name = Path(checkpoint), "report"
    if not (path / "manifest.json").is_file():
        raise MissingDependencyError(f"checkpoint not found at {path}")
    model = load_checkpoint(path)
    if model.config.kind not in ("teacher_seg", "student_seg"):
        raise InvalidConfigError(f"{path} holds a {model.config.kind}, not a segmenter")
    split = run.cfg.eval.split
    report = evaluate_model(model, run.dataset(split))
    out = run.stage_dir("eval")
    run.echo(out, checkpoint=str(path))
    atomic_write_text(out / f"{name}.json", dump_json({
        "report": report.to_dict(), "checkpoint": str(path), "split": split,
        "global_seed": run.cfg.global_seed, "config": run.cfg.to_dict()}))
    print(f"mean_iou={report.mean_iou:.4f} pixel_accuracy={report.pixel_accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(run: Run, jobs: int | None) -> int:
    cfg = run.cfg
    teacher = run.teacher()
    cells = ablation.build_cells(
        [tuple(c) for c in cfg.ablation.lambda_grid], [tuple(c) for c in cfg.ablation.mix_grid],
        base=cfg.degan_config(), n_batch=cfg.distill.batch_size, seeds=cfg.ablation_seeds())
    ctx = ablation.AblationContext(
        teacher=teacher, proxy_images=run.dataset("proxy").images, val_dataset=run.dataset(cfg.eval.split),
        gan_policy=cfg.gan_policy("ablation"), distill_policy=cfg.distill_policy(),
        student_width=cfg.distill.student_width, d_z=cfg.gan.d_z, generator_width=cfg.gan.generator_width,
        discriminator_width=cfg.gan.discriminator_width, temperature=cfg.distill.temperature,
        report_samples=cfg.eval.report_samples)
    out = run.stage_dir("ablate")
    run.echo(out, n_cells=len(cells))
    rows = ablation.run_ablation(cells, ctx, out_dir=out, jobs=jobs or cfg.ablation.jobs)
    atomic_write_text(out / "summary.csv", _summary_csv(ablation.summarize(rows)))
    failed = sum(np.isnan(r["mean_iou"]) for r in rows)
    print(f"{len(rows)} cells, {failed} failed; results in {out / 'results.csv'}")
    return EXIT_OK


SUMMARY_HEADER = ("lambda_e", "lambda_d", "variant", "alpha", "beta", "n_seeds", "n_failed", "mean_iou",
                  "mean_iou_std", "pixel_acc")


def _summary_csv(summary) -> str:
    lines = [",".join(SUMMARY_HEADER)]
    for row in summary:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in SUMMARY_HEADER))
    return "\n".join(lines) + "\n"


def _read_json(path: Path):
    return json.loads(path.read_text()) if path.is_file() else None


def _read_log(path: Path):
    if not path.is_file():
        return None
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_report(run: Run) -> int:
    """Collect whatever stages exist into CSV tables and PNG figures."""
    cfg = run.cfg
    out = run.stage_dir("report")
    run.echo(out)
    k = cfg.data.num_classes
    dists = {"true (val labels)": class_pixel_histogram(run.dataset("val").labels, k)}
    for stage, title in (("gan", "DCGAN"), ("degan", "DeGAN")):
        metrics = _read_json(run.stage_dir(stage) / "metrics.json")
        if metrics and "distribution" in metrics:
            dists[title] = np.asarray(metrics["distribution"])
    lines = ["source,class_id,fraction"]
    for name, w in dists.items():
        lines += [f"{name},{i},{float(v)!r}" for i, v in enumerate(w)]
    atomic_write_text(out / "distributions.csv", "\n".join(lines) + "\n")
    written = [plotting.plot_distributions(dists, out / "distributions.png")]

    for stage in STAGES:
        epochs = _read_log(run.stage_dir(stage) / "log.jsonl")
        if epochs:
            written.append(plotting.plot_loss_curves(epochs, out / f"losses_{stage}.png", title=stage))

    results = run.stage_dir("ablate") / "results.csv"
    if results.is_file():
        summary = ablation.summarize(ablation.read_results_csv(results))
        atomic_write_text(out / "ablation_summary.csv", _summary_csv(summary))
        base = cfg.degan_config()
        lam = [r for r in summary if r["alpha"] == 0 and [r["lambda_e"], r["lambda_d"], r["variant"]]
               in [[float(c[0]), float(c[1]), c[2]] for c in cfg.ablation.lambda_grid]]
        mix = [r for r in summary if (r["lambda_e"], r["lambda_d"], r["variant"])
               == (base.lambda_e, base.lambda_d, base.diversity_variant)
               and [r["alpha"], r["beta"]] in cfg.ablation.mix_grid]
        if lam:
            written.append(plotting.plot_lambda_grid(lam, out / "lambda_grid.png"))
        if mix:
            written.append(plotting.plot_mixing_curve(mix, out / "mixing_curve.png", cfg.distill.batch_size))

    table = []
    for stage in ("teacher", "distill"):
        metrics = _read_json(run.stage_dir(stage) / "metrics.json")
        if metrics and "eval" in metrics:
            table.append(f"{stage},{metrics['eval']['mean_iou']!r},{metrics['eval']['pixel_accuracy']!r}")
    atomic_write_text(out / "models.csv", "\n".join(["model,mean_iou,pixel_acc", *table]) + "\n")
    for path in written:
        print(path)
    return EXIT_OK


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--out", metavar="DIR", help="output directory, overrides output_dir")
        p.add_argument("--seed", metavar="N", type=int, help="overrides global_seed")
        return p

    add("gen-data", "write the train/val/proxy datasets as PPM/PGM files")
    add("train", "train one pipeline stage").add_argument("--stage", metavar="NAME", choices=STAGES, required=True)
    ev = add("eval", "evaluate a segmenter checkpoint")
    ev.add_argument("--stage", metavar="NAME", choices=("teacher", "distill"))
    ev.add_argument("--checkpoint", metavar="PATH")
    add("ablate", "run the loss-weight and mixing-ratio grids").add_argument("--jobs", metavar="N", type=int)
    add("report", "tables and figures from existing stage outputs")
    return parser


def run_command(args) -> int:
    cfg, text = load_config(args.config)
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.global_seed = args.seed
    run = Run(cfg, text, args.command, getattr(args, "stage", None))
    torch.use_deterministic_algorithms(True)
    if args.command == "gen-data":
        return cmd_gen_data(run)
    if args.command == "train":
        return cmd_train(run)
    if args.command == "eval":
        return cmd_eval(run, args.checkpoint)
    if args.command == "ablate":
        if args.jobs is not None and args.jobs < 1:
            raise InvalidConfigError("--jobs must be >= 1")
        return cmd_ablate(run, args.jobs)
    return cmd_report(run)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run_command(args)
    except (InvalidConfigError, InvalidSpecError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
