"""Grid sweeps over loss weights and mixing ratios.

A cell is one (lambda_e, lambda_d, variant, alpha, beta, seed) combination:
train the generator it needs, distill a student, evaluate it. Cells sharing a
generator configuration and seed are grouped so each GAN is trained once.
Groups are independent and can run in separate processes.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_text, dump_json, save_checkpoint
from .errors import InvalidConfigError
from .evaluation import distribution_entropy, evaluate_model, generated_distribution_report
from .models import ModelConfig
from .shapesdata import SegDataset
from .training import (
    DIVERSITY_VARIANTS,
    DeGANConfig,
    MixedBatchSpec,
    TrainPolicy,
    derive_seed,
    distill,
    train_gan,
)

log = logging.getLogger(__name__)

# (lambda_e, lambda_d) rows, each run with the plain and weighted diversity variants
LAMBDA_PAIRS = ((0.0, 0.0), (0.0, 10.0), (10.0, 0.0), (10.0, 10.0), (5.0, 10.0))
CSV_HEADER = ("cell_id", "lambda_e", "lambda_d", "variant", "alpha", "beta", "seed", "mean_iou", "pixel_acc")


def lambda_grid(pairs=LAMBDA_PAIRS, variants=DIVERSITY_VARIANTS) -> list[tuple[float, float, str]]:
    return [(float(le), float(ld), v) for le, ld in pairs for v in variants]


def mixing_grid(n_batch: int = 8, betas=None) -> list[tuple[int, int]]:
    """Ratios from pure proxy to pure generated, e.g. 8:0, 6:2, 4:4, 2:6, 0:8."""
    if betas is None:
        betas = sorted({round(n_batch * f) for f in (0, 0.25, 0.5, 0.75, 1.0)})
    return [(n_batch - b, b) for b in betas]


@dataclass(frozen=True)
class AblationCell:
    lambda_e: float
    lambda_d: float
    variant: str
    alpha: int
    beta: int
    seed: int

    @property
    def cell_id(self) -> str:
        return (f"le{self.lambda_e:g}_ld{self.lambda_d:g}_{self.variant}"
                f"_a{self.alpha}_b{self.beta}_s{self.seed}")

    @property
    def gan_key(self) -> tuple:
        """Cells with equal keys use the same trained generator."""
        if self.lambda_e == 0 and self.lambda_d == 0:
            return ("dcgan", self.seed)
        variant = self.variant if self.lambda_d > 0 else "-"
        return (self.lambda_e, self.lambda_d, variant, self.seed)

    @property
    def needs_generator(self) -> bool:
        return self.beta > 0


def build_cells(lambda_cells=(), mix_cells=(), base: DeGANConfig | None = None, n_batch: int = 8,
                seeds=(0, 1, 2)) -> list[AblationCell]:
    """Expand a loss-weight grid (distilled on generated images only) and a
    mixing-ratio grid (using ``base`` weights) over ``seeds``.

    A mixing cell identical to a loss-weight cell (the pure-generated ratio
    at the base weights) is listed once.
    """
    base = base or DeGANConfig()
    cells = []
    for seed in seeds:
        for le, ld, variant in lambda_cells:
            if variant not in DIVERSITY_VARIANTS:
                raise InvalidConfigError(f"unknown diversity variant {variant!r}")
            cells.append(AblationCell(float(le), float(ld), variant, 0, n_batch, int(seed)))
        for alpha, beta in mix_cells:
            MixedBatchSpec(int(alpha), int(beta), n_batch)
            cells.append(AblationCell(float(base.lambda_e), float(base.lambda_d), base.diversity_variant,
                                      int(alpha), int(beta), int(seed)))
    return list(dict.fromkeys(cells))


@dataclass
class AblationContext:
    """Everything a worker needs to run cells; picklable."""

    teacher: object
    proxy_images: np.ndarray
    val_dataset: SegDataset
    gan_policy: TrainPolicy
    distill_policy: TrainPolicy
    student_width: int = 8
    d_z: int = 64
    generator_width: int | None = None
    discriminator_width: int | None = None
    temperature: float = 1.0
    report_samples: int = 256


def _cell_row(cell: AblationCell, mean_iou=float("nan"), pixel_acc=float("nan")) -> dict:
    return {"cell_id": cell.cell_id, "lambda_e": cell.lambda_e, "lambda_d": cell.lambda_d, "variant": cell.variant,
            "alpha": cell.alpha, "beta": cell.beta, "seed": cell.seed, "mean_iou": mean_iou, "pixel_acc": pixel_acc}


def _gan_name(key: tuple) -> str:
    return "_".join(f"{k:g}" if isinstance(k, float) else str(k) for k in key)


def run_group(cells: list[AblationCell], ctx: AblationContext, out_dir=None) -> list[dict]:
    """Run cells that share one generator; failures are recorded per cell."""
    out_dir = Path(out_dir) if out_dir is not None else None
    first = cells[0]
    generator, gan_error = None, None
    if any(c.needs_generator for c in cells):
        degan = None
        if first.gan_key[0] != "dcgan":
            degan = DeGANConfig(first.lambda_e, first.lambda_d, first.variant, ctx.d_z)
        policy = replace(ctx.gan_policy, seed=derive_seed(first.seed, "ablation-gan"))
        try:
            generator, _, record = train_gan(ctx.proxy_images, policy, degan=degan, teacher=ctx.teacher,
                                             generator_width=ctx.generator_width,
                                             discriminator_width=ctx.discriminator_width, d_z=ctx.d_z)
            w = generated_distribution_report(generator, ctx.teacher, ctx.report_samples,
                                              seed=derive_seed(first.seed, "ablation-report"))
            if out_dir is not None:
                gan_dir = out_dir / "gans" / _gan_name(first.gan_key)
                record.write(gan_dir / "log.jsonl")
                save_checkpoint(generator, gan_dir / "generator")
                atomic_write_text(gan_dir / "distribution.json", dump_json(
                    {"gan_key": list(first.gan_key), "distribution": w.tolist(), "entropy": distribution_entropy(w)}))
        except Exception as exc:  # noqa: BLE001 - recorded, remaining groups continue
            gan_error = f"GAN training failed: {exc!r}"
            log.error("%s for %s", gan_error, first.gan_key)

    rows, done = [], {}
    for cell in cells:
        if cell.needs_generator and gan_error is not None:
            rows.append(_failed(cell, gan_error, out_dir))
            continue
        key = (cell.alpha, cell.beta)
        try:
            if key not in done:
                done[key] = _distill_and_eval(cell, ctx, generator, out_dir)
            report = done[key]
            row = _cell_row(cell, report["mean_iou"], report["pixel_accuracy"])
            if out_dir is not None:
                atomic_write_text(out_dir / "cells" / f"{cell.cell_id}.json",
                                  dump_json({"status": "ok", "row": row, "report": report}))
            rows.append(row)
        except Exception as exc:  # noqa: BLE001
            rows.append(_failed(cell, repr(exc), out_dir))
    return rows


def _failed(cell: AblationCell, message: str, out_dir) -> dict:
    row = _cell_row(cell)
    if out_dir is not None:
        atomic_write_text(out_dir / "cells" / f"{cell.cell_id}.json",
                          dump_json({"status": "failed", "row": {**row, "mean_iou": None, "pixel_acc": None},
                                     "error": message}))
    return row


def _distill_and_eval(cell: AblationCell, ctx: AblationContext, generator, out_dir) -> dict:
    n_batch = cell.alpha + cell.beta
    if cell.beta == 0:
        source = "proxy"
    elif cell.alpha == 0:
        source = "generator"
    else:
        source = "mixed"
    policy = replace(ctx.distill_policy, batch_size=n_batch, seed=derive_seed(cell.seed, "ablation-distill"))
    student_config = ModelConfig("student_seg", num_classes=ctx.val_dataset.num_classes, width=ctx.student_width,
                                 image_size=ctx.val_dataset.images.shape[-2:],
                                 seed=derive_seed(cell.seed, "ablation-student"))
    student, record = distill(ctx.teacher, student_config, ctx.proxy_images, policy, source=source,
                              mix=MixedBatchSpec(cell.alpha, cell.beta, n_batch), generator=generator,
                              temperature=ctx.temperature)
    report = evaluate_model(student, ctx.val_dataset).to_dict()
    if out_dir is not None:
        record.write(out_dir / "cells" / cell.cell_id / "log.jsonl")
        save_checkpoint(student, out_dir / "cells" / cell.cell_id / "student")
    return report


def _group(cells):
    groups = OrderedDict()
    for cell in cells:
        groups.setdefault(cell.gan_key, []).append(cell)
    return list(groups.values())


def run_ablation(cells: list[AblationCell], ctx: AblationContext, out_dir=None, jobs: int = 1) -> list[dict]:
    """Run every cell and return one row per cell, in input order.

    With ``out_dir`` each cell's result is written atomically to
    ``cells/<cell_id>.json`` as soon as it finishes, and ``results.csv`` is
    assembled at the end.
    """
    if not cells:
        if out_dir is not None:
            write_results_csv(Path(out_dir) / "results.csv", [])
        return []
    groups = _group(cells)
    if jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_group, groups, [ctx] * len(groups), [out_dir] * len(groups)))
    else:
        results = [run_group(g, ctx, out_dir) for g in groups]
    by_id = {row["cell_id"]: row for rows in results for row in rows}
    rows = [by_id[c.cell_id] for c in cells]
    if out_dir is not None:
        write_results_csv(Path(out_dir) / "results.csv", rows)
        failed = [r["cell_id"] for r in rows if np.isnan(r["mean_iou"])]
        atomic_write_text(Path(out_dir) / "failed_cells.json", dump_json(failed))
    return rows


def results_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(row[k])) if k in ("mean_iou", "pixel_acc", "lambda_e", "lambda_d") else row[k])
                         for k in CSV_HEADER})
    return buf.getvalue()


def write_results_csv(path, rows) -> None:
    atomic_write_text(Path(path), results_csv(rows))


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in ("lambda_e", "lambda_d", "mean_iou", "pixel_acc"):
            row[k] = float(row[k])
        for k in ("alpha", "beta", "seed"):
            row[k] = int(row[k])
    return rows


def summarize(rows) -> list[dict]:
    """Average cells over seeds, keeping first-seen configuration order."""
    groups = OrderedDict()
    for row in rows:
        key = (row["lambda_e"], row["lambda_d"], row["variant"], row["alpha"], row["beta"])
        groups.setdefault(key, []).append(row)
    out = []
    for (le, ld, variant, alpha, beta), members in groups.items():
        ious = np.array([m["mean_iou"] for m in members], dtype=float)
        accs = np.array([m["pixel_acc"] for m in members], dtype=float)
        ok = ~np.isnan(ious)
        out.append({
            "lambda_e": le, "lambda_d": ld, "variant": variant, "alpha": alpha, "beta": beta,
            "n_seeds": int(ok.sum()), "n_failed": int((~ok).sum()),
            "mean_iou": float(ious[ok].mean()) if ok.any() else float("nan"),
            "mean_iou_std": float(ious[ok].std()) if ok.any() else float("nan"),
            "pixel_acc": float(accs[ok].mean()) if ok.any() else float("nan"),
        })
    return out
