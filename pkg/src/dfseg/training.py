"""Teacher training, DCGAN/DeGAN generator training and mixed-batch distillation."""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .checkpoint import atomic_write_text, model_hash, save_checkpoint
from .errors import InvalidConfigError, InvalidSpecError, NumericalError
from .models import ModelConfig, freeze, generate_images, init_model
from .shapesdata import SegDataset, batch_iterator

log = logging.getLogger(__name__)

DIVERSITY_VARIANTS = ("plain", "weighted")
SOURCES = ("proxy", "generator", "mixed")


def derive_seed(base: int, *tags) -> int:
    """Stable 32-bit seed from a base seed and any number of str/int tags."""
    words = [int(base) & 0xFFFFFFFF]
    for tag in tags:
        words.append(zlib.crc32(tag.encode()) if isinstance(tag, str) else int(tag) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class TrainPolicy:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every_n_epochs: int = 10
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.epochs < 1:
            raise InvalidConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise InvalidConfigError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every_n_epochs < 1:
            raise InvalidConfigError("lr_decay_every_n_epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise InvalidConfigError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every_n_epochs)

    def make_optimizer(self, params):
        if self.optimizer == "adam":
            return torch.optim.Adam(params, lr=self.learning_rate, betas=self.betas, weight_decay=self.weight_decay)
        return torch.optim.SGD(params, lr=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def teacher_policy(**kw) -> TrainPolicy:
    base = dict(epochs=30, batch_size=8)
    base.update(kw)
    return TrainPolicy(**base)


def gan_policy(**kw) -> TrainPolicy:
    base = dict(epochs=20, batch_size=16, learning_rate=2e-4, lr_decay_factor=1.0,
                lr_decay_every_n_epochs=1000, weight_decay=0.0, optimizer="adam", betas=(0.5, 0.999))
    base.update(kw)
    return TrainPolicy(**base)


def distill_policy(**kw) -> TrainPolicy:
    base = dict(epochs=30, batch_size=8)
    base.update(kw)
    return TrainPolicy(**base)


@dataclass
class DeGANConfig:
    lambda_e: float = 0.0
    lambda_d: float = 10.0
    diversity_variant: str = "weighted"
    d_z: int = 64

    def __post_init__(self):
        if self.diversity_variant not in DIVERSITY_VARIANTS:
            raise InvalidConfigError(f"diversity_variant must be one of {DIVERSITY_VARIANTS}")
        try:
            self.weights
        except ValueError as exc:
            raise InvalidConfigError(str(exc)) from None

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(lambda_d=float(self.lambda_d), lambda_e=float(self.lambda_e))

    @property
    def is_plain_gan(self) -> bool:
        return self.lambda_e == 0 and self.lambda_d == 0


@dataclass(frozen=True)
class MixedBatchSpec:
    alpha: int
    beta: int
    n_batch: int

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidSpecError("alpha and beta must be >= 0")
        if self.alpha + self.beta != self.n_batch:
            raise InvalidSpecError(f"alpha + beta = {self.alpha + self.beta} but n_batch = {self.n_batch}")
        if self.n_batch < 1:
            raise InvalidSpecError("n_batch must be >= 1")

    @classmethod
    def even(cls, n_batch: int) -> "MixedBatchSpec":
        return cls(n_batch // 2, n_batch - n_batch // 2, n_batch)


@dataclass
class RunRecord:
    """Per-epoch log of a training run."""

    epochs: list = field(default_factory=list)
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    step_log: list = field(default_factory=list)

    def add_epoch(self, epoch: int, loss_values: dict, lr: float, wall_time_s: float) -> None:
        self.epochs.append({
            "epoch": epoch,
            "losses": {k: float(v) for k, v in loss_values.items()},
            "lr": lr,
            "wall_time_s": wall_time_s,
        })

    def loss_series(self, name: str) -> list[float]:
        return [e["losses"][name] for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)

    def write(self, path) -> None:
        atomic_write_text(Path(path), self.to_jsonl())


def _images_of(source) -> torch.Tensor:
    # accepts a bare image array/tensor or anything with an ``images`` attribute;
    # labels are never looked at
    images = source.images if hasattr(source, "images") else source
    return torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)


def _check_finite(value: torch.Tensor, what: str, epoch: int, step: int) -> None:
    if not torch.isfinite(value).all():
        shown = value.item() if value.numel() == 1 else "non-finite"
        raise NumericalError(f"{what} became {shown} at epoch {epoch}, step {step}")


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_teacher(dataset: SegDataset, policy: TrainPolicy | None = None, model_config: ModelConfig | None = None,
                  checkpoint_dir=None):
    """Supervised per-pixel cross-entropy training of a segmenter."""
    policy = policy or teacher_policy()
    model_config = model_config or ModelConfig("teacher_seg", num_classes=dataset.num_classes,
                                               image_size=dataset.images.shape[-2:], seed=policy.seed)
    torch.manual_seed(derive_seed(policy.seed, "teacher-dropout"))
    model = init_model(model_config)
    opt = policy.make_optimizer(model.parameters())
    record = RunRecord(config={"policy": policy.to_dict(), "model": model_config.to_dict()}, seed=policy.seed)
    shuffle_seed = derive_seed(policy.seed, "teacher-shuffle")
    for epoch in range(policy.epochs):
        start = time.perf_counter()
        lr = policy.lr_at(epoch)
        _set_lr(opt, lr)
        model.train()
        total, n = 0.0, 0
        for step, (images, labels) in enumerate(batch_iterator(dataset, policy.batch_size, shuffle_seed, True, epoch)):
            loss = F.cross_entropy(model(images), labels)
            _check_finite(loss.detach(), "teacher loss", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(images)
            n += len(images)
        record.add_epoch(epoch, {"ce": total / n}, lr, time.perf_counter() - start)
        log.info("teacher epoch %d ce %.4f", epoch, total / n)
    model.eval()
    if checkpoint_dir is not None:
        record.checkpoint = str(save_checkpoint(model, checkpoint_dir))
    return model, record


def train_gan(proxy_images, policy: TrainPolicy | None = None, degan: DeGANConfig | None = None, teacher=None,
              generator_width: int | None = None, discriminator_width: int | None = None, checkpoint_dir=None,
              d_z: int | None = None):
    """Alternate one discriminator step and one generator step per batch.

    With ``degan`` absent this is a plain DCGAN. Otherwise each generated batch
    also goes through the frozen ``teacher``, and the generator minimizes
    L_gan + lambda_d * L_div + lambda_e * L_ent.
    """
    policy = policy or gan_policy()
    images = _images_of(proxy_images).float()
    if len(images) < policy.batch_size:
        raise InvalidConfigError(f"need at least {policy.batch_size} proxy images, got {len(images)}")
    if degan is not None and not degan.is_plain_gan and teacher is None:
        raise InvalidConfigError("DeGAN training with nonzero lambda_e or lambda_d needs a teacher")
    if d_z is None:
        d_z = degan.d_z if degan is not None else 64
    image_size = tuple(images.shape[-2:])
    g = init_model(ModelConfig("generator", width=generator_width, image_size=image_size, d_z=d_z,
                               seed=derive_seed(policy.seed, "generator-init")))
    d = init_model(ModelConfig("discriminator", width=discriminator_width, image_size=image_size,
                               seed=derive_seed(policy.seed, "discriminator-init")))
    use_teacher = degan is not None and teacher is not None
    teacher_hash = None
    if use_teacher:
        freeze(teacher)
        teacher_hash = model_hash(teacher)
    opt_g = policy.make_optimizer(g.parameters())
    opt_d = policy.make_optimizer(d.parameters())
    latent_gen = torch.Generator().manual_seed(derive_seed(policy.seed, "gan-latents"))
    shuffle_seed = derive_seed(policy.seed, "gan-shuffle")
    n_steps = len(images) // policy.batch_size
    record = RunRecord(
        config={"policy": policy.to_dict(), "degan": asdict(degan) if degan else None,
                "generator": g.config.to_dict(), "discriminator": d.config.to_dict()},
        seed=policy.seed,
    )
    weights = degan.weights if degan is not None else losses.LossWeights()
    for epoch in range(policy.epochs):
        start = time.perf_counter()
        lr = policy.lr_at(epoch)
        _set_lr(opt_g, lr)
        _set_lr(opt_d, lr)
        g.train()
        d.train()
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(images))
        sums = dict.fromkeys(("L_D", "L_G_gan", "L_ent", "L_div", "L_G_total", "w_entropy"), 0.0)
        for step in range(n_steps):
            real = images[order[step * policy.batch_size:(step + 1) * policy.batch_size]]
            z = torch.randn(len(real), d_z, generator=latent_gen)
            fake = g(z)

            real_logits, fake_logits = d(real), d(fake.detach())
            _check_finite(torch.cat([real_logits, fake_logits]).detach(), "discriminator logits", epoch, step)
            l_d = losses.adversarial_discriminator_loss(real_logits, fake_logits)
            _check_finite(l_d.detach(), "discriminator loss", epoch, step)
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()
            record.step_log.append("D")

            gen_logits = d(fake)
            _check_finite(gen_logits.detach(), "discriminator logits", epoch, step)
            l_gan = losses.adversarial_generator_loss(gen_logits)
            zero = torch.zeros((), dtype=fake.dtype)
            l_ent, l_div, w_ent = zero, zero, zero
            if use_teacher:
                logits = teacher(fake)
                _check_finite(logits.detach(), "teacher logits", epoch, step)
                l_ent = losses.entropy_loss_from_logits(logits)
                w = torch.softmax(logits, dim=1).mean(dim=(0, 2, 3))
                w = w / w.sum()
                if degan.diversity_variant == "weighted":
                    l_div = losses.weighted_diversity_loss(w)
                else:
                    l_div = losses.diversity_loss(w)
                w_ent = -torch.xlogy(w, w).sum().detach()
            l_g = losses.generator_total_loss(l_gan, l_div, l_ent, weights)
            _check_finite(l_g.detach(), "generator loss", epoch, step)
            opt_g.zero_grad()
            l_g.backward()
            opt_g.step()
            record.step_log.append("G")

            for key, value in (("L_D", l_d), ("L_G_gan", l_gan), ("L_ent", l_ent), ("L_div", l_div),
                               ("L_G_total", l_g), ("w_entropy", w_ent)):
                sums[key] += float(value.detach())
        record.add_epoch(epoch, {k: v / n_steps for k, v in sums.items()}, lr, time.perf_counter() - start)
        log.info("gan epoch %d %s", epoch, record.epochs[-1]["losses"])
    if use_teacher and model_hash(teacher) != teacher_hash:
        raise RuntimeError("teacher parameters changed during generator training")
    g.eval()
    d.eval()
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        save_checkpoint(d, checkpoint_dir / "discriminator")
        record.checkpoint = str(save_checkpoint(g, checkpoint_dir / "generator"))
    return g, d, record


def make_mixed_batch(proxy_images, generator, spec: MixedBatchSpec, z_seed: int) -> torch.Tensor:
    """Concatenate ``spec.alpha`` proxy images and ``spec.beta`` generated ones, then shuffle."""
    images = _images_of(proxy_images)
    if len(images) < spec.alpha:
        raise InvalidSpecError(f"need {spec.alpha} proxy images, got {len(images)}")
    if spec.beta > 0 and generator is None:
        raise InvalidConfigError("a generator is required when beta > 0")
    parts = [images[:spec.alpha].float()]
    if spec.beta > 0:
        parts.append(generate_images(generator, spec.beta, z_seed))
    batch = torch.cat(parts)
    perm = torch.randperm(spec.n_batch, generator=torch.Generator().manual_seed(derive_seed(z_seed, "mix-order")))
    return batch[perm]


def distill(teacher, student_config: ModelConfig, proxy_images, policy: TrainPolicy | None = None,
            source: str = "mixed", mix: MixedBatchSpec | None = None, generator=None,
            temperature: float = 1.0, steps_per_epoch: int | None = None, frozen_dump: bool = False,
            checkpoint_dir=None):
    """Train a student on KL(teacher || student) without touching any label map.

    ``source`` picks the batch content: proxy images only, generated images
    only, or a mix of ``mix.alpha`` proxy and ``mix.beta`` generated images.
    An epoch is ceil(n_proxy / n_batch) steps for every source, so budgets
    are comparable across mixing ratios.
    """
    policy = policy or distill_policy()
    if source not in SOURCES:
        raise InvalidConfigError(f"source must be one of {SOURCES}, got {source!r}")
    if source in ("generator", "mixed") and generator is None:
        raise InvalidConfigError(f"source={source!r} needs generator parameters")
    n_batch = policy.batch_size
    if source == "proxy":
        mix = MixedBatchSpec(n_batch, 0, n_batch)
    elif source == "generator":
        mix = MixedBatchSpec(0, n_batch, n_batch)
    else:
        mix = mix or MixedBatchSpec.even(n_batch)
        if mix.n_batch != n_batch:
            raise InvalidSpecError(f"mix n_batch {mix.n_batch} differs from batch size {n_batch}")
    images = _images_of(proxy_images).float() if proxy_images is not None else torch.empty(0)
    if mix.alpha > 0 and len(images) == 0:
        raise InvalidConfigError("proxy images are required when alpha > 0")
    if steps_per_epoch is None:
        if len(images) == 0:
            raise InvalidConfigError("steps_per_epoch is required without proxy images")
        steps_per_epoch = math.ceil(len(images) / n_batch)

    freeze(teacher)
    teacher_hash = model_hash(teacher)
    if generator is not None:
        freeze(generator)
    torch.manual_seed(derive_seed(policy.seed, "student-dropout"))
    student = init_model(student_config)
    opt = policy.make_optimizer(student.parameters())
    record = RunRecord(
        config={"policy": policy.to_dict(), "student": student_config.to_dict(), "source": source,
                "mix": asdict(mix), "temperature": temperature, "frozen_dump": frozen_dump},
        seed=policy.seed,
    )
    proxy_seed = derive_seed(policy.seed, "distill-proxy")
    pool = None
    if frozen_dump and mix.beta > 0:
        pool = generate_images(generator, steps_per_epoch * mix.beta, derive_seed(policy.seed, "distill-pool"))

    cursor, pass_idx = 0, 0
    order = np.random.default_rng([proxy_seed, 0]).permutation(len(images)) if len(images) else None

    def next_proxy(count):
        nonlocal cursor, pass_idx, order
        taken = []
        while count > 0:
            if cursor >= len(order):
                pass_idx += 1
                order = np.random.default_rng([proxy_seed, pass_idx]).permutation(len(images))
                cursor = 0
            chunk = order[cursor:cursor + count]
            taken.append(chunk)
            cursor += len(chunk)
            count -= len(chunk)
        return images[np.concatenate(taken)] if taken else images[:0]

    for epoch in range(policy.epochs):
        start = time.perf_counter()
        lr = policy.lr_at(epoch)
        _set_lr(opt, lr)
        student.train()
        pool_order = np.random.default_rng([proxy_seed, 10_000 + epoch]).permutation(steps_per_epoch)
        total = 0.0
        for step in range(steps_per_epoch):
            z_seed = derive_seed(policy.seed, "distill-batch", epoch, step)
            proxy_part = next_proxy(mix.alpha)
            if pool is not None:
                k = pool_order[step]
                gen_part = pool[k * mix.beta:(k + 1) * mix.beta]
                batch = torch.cat([proxy_part, gen_part])
                perm = torch.randperm(len(batch), generator=torch.Generator().manual_seed(z_seed))
                batch = batch[perm]
            else:
                batch = make_mixed_batch(proxy_part, generator, mix, z_seed)
            with torch.no_grad():
                t_logits = teacher(batch)
            s_logits = student(batch)
            _check_finite(t_logits, "teacher logits", epoch, step)
            _check_finite(s_logits.detach(), "student logits", epoch, step)
            loss = losses.kd_kl_loss_from_logits(t_logits, s_logits, temperature)
            _check_finite(loss.detach(), "distillation loss", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        record.add_epoch(epoch, {"kd": total / steps_per_epoch}, lr, time.perf_counter() - start)
        log.info("distill epoch %d kd %.4f", epoch, total / steps_per_epoch)
    if model_hash(teacher) != teacher_hash:
        raise RuntimeError("teacher parameters changed during distillation")
    student.eval()
    if checkpoint_dir is not None:
        record.checkpoint = str(save_checkpoint(student, checkpoint_dir))
    return student, record
