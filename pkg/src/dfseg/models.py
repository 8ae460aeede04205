"""Tiny fully-convolutional networks: a DCGAN pair and encoder-decoder segmenters."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError

KINDS = ("generator", "discriminator", "teacher_seg", "student_seg")
DEFAULT_WIDTHS = {"generator": 16, "discriminator": 16, "teacher_seg": 32, "student_seg": 8}
LATENT_DIM = 64
IMAGE_CHANNELS = 3


@dataclass
class ModelConfig:
    kind: str
    num_classes: int = 6
    width: int | None = None
    image_size: tuple[int, int] = (32, 32)
    seed: int = 0
    d_z: int = LATENT_DIM
    dropout: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown model kind {self.kind!r}")
        if self.width is None:
            self.width = DEFAULT_WIDTHS[self.kind]
        self.image_size = tuple(int(v) for v in self.image_size)
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise InvalidConfigError(f"image size {self.image_size} must be positive and divisible by 8")
        if self.width < 1 or self.num_classes < 2 or self.d_z < 1:
            raise InvalidConfigError("width, d_z must be >= 1 and num_classes >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Generator(nn.Module):
    """Latent vector -> image in [-1, 1].

    Batch norm always normalizes with the statistics of the current batch
    (no running averages), so sampling behaves the same as during training.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.width
        h, wd = config.image_size
        self.base = (h // 8, wd // 8)
        self.project = nn.Linear(config.d_z, 8 * w * self.base[0] * self.base[1])
        self.project_bn = nn.BatchNorm2d(8 * w, track_running_stats=False)

        def up(cin, cout):
            return nn.Sequential(
                nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                nn.BatchNorm2d(cout, track_running_stats=False),
                nn.ReLU(inplace=True),
            )

        self.blocks = nn.Sequential(up(8 * w, 4 * w), up(4 * w, 2 * w), up(2 * w, w))
        self.to_rgb = nn.Conv2d(w, IMAGE_CHANNELS, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.config.d_z:
            raise InvalidInputError(f"latent batch must be N x {self.config.d_z}, got {tuple(z.shape)}")
        x = self.project(z).view(z.shape[0], -1, *self.base)
        x = F.relu(self.project_bn(x))
        return torch.tanh(self.to_rgb(self.blocks(x)))


class Discriminator(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.width
        h, wd = config.image_size
        layers = []
        cin = IMAGE_CHANNELS
        for cout in (w, 2 * w, 4 * w):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(4 * w * (h // 8) * (wd // 8), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.config)
        return self.head(self.features(x).flatten(1)).squeeze(1)


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """Three strided encoder stages, three upsampling decoder stages, one skip.

    ``forward`` returns logits; :func:`segnet_forward` applies the softmax.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.enc1 = _conv_bn_relu(IMAGE_CHANNELS, w, stride=2)
        self.enc2 = _conv_bn_relu(w, 2 * w, stride=2)
        self.enc3 = _conv_bn_relu(2 * w, 4 * w, stride=2)
        self.dec3 = _conv_bn_relu(4 * w, 2 * w)
        self.dec2 = _conv_bn_relu(2 * w + w, w)
        self.dec1 = _conv_bn_relu(w, w)
        self.dropout = nn.Dropout(config.dropout)
        self.classifier = nn.Conv2d(w, config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.config)
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d = self.dec3(_upsample(e3, e2.shape[-2:]))
        d = self.dec2(torch.cat([_upsample(d, e1.shape[-2:]), e1], dim=1))
        d = self.dec1(_upsample(d, x.shape[-2:]))
        return self.classifier(self.dropout(d))


def _upsample(x, size):
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def _check_images(x: torch.Tensor, config: ModelConfig) -> None:
    if x.dim() != 4 or x.shape[1] != IMAGE_CHANNELS or tuple(x.shape[-2:]) != config.image_size:
        raise InvalidInputError(
            f"expected N x {IMAGE_CHANNELS} x {config.image_size[0]} x {config.image_size[1]} images, "
            f"got {tuple(x.shape)}"
        )


def init_model(config: ModelConfig) -> nn.Module:
    """Build a network with seeded DCGAN-style initialization."""
    if config.kind == "generator":
        model = Generator(config)
    elif config.kind == "discriminator":
        model = Discriminator(config)
    else:
        model = SegNet(config)
    gen = torch.Generator().manual_seed(int(config.seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                module.weight.normal_(0.0, 0.02, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def generator_forward(model: Generator, z: torch.Tensor) -> torch.Tensor:
    return model(z)


def discriminator_forward(model: Discriminator, x: torch.Tensor) -> torch.Tensor:
    return model(x)


def segnet_forward(model: SegNet, x: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities, N x K x H x W."""
    return torch.softmax(model(x), dim=1)


def sample_latents(n: int, d_z: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(n, d_z, generator=gen)


@torch.no_grad()
def generate_images(generator: Generator, n: int, seed: int, chunk: int = 16) -> torch.Tensor:
    """Sample ``n`` images from seeded latents.

    Latents are drawn and pushed through the generator in fixed chunks of
    ``chunk`` so the batch-norm statistics match those seen in training,
    whatever ``n`` is.
    """
    if n <= 0:
        return torch.empty(0, IMAGE_CHANNELS, *generator.config.image_size)
    n_chunks = -(-n // chunk)
    z = sample_latents(n_chunks * chunk, generator.config.d_z, seed)
    was_training = generator.training
    generator.eval()
    out = torch.cat([generator(z[i * chunk:(i + 1) * chunk]) for i in range(n_chunks)])
    generator.train(was_training)
    return out[:n]


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
