"""Small convolutional feature extractor with per-position L2 normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ContractError, DegenerateVectorError, NumericError
from .geometry import GridSpec

NORM_EPS = 1e-12

# (out_channels, kernel, stride, dilation)
DEFAULT_LAYERS = ((16, 5, 1, 1), (32, 3, 2, 1), (64, 3, 2, 1), (64, 3, 1, 2))


@dataclass
class ExtractorConfig:
    layers: tuple = DEFAULT_LAYERS
    dim: int = 32
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        self.layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)
        if self.dim < 1 or not self.layers:
            raise ContractError("extractor needs >= 1 layer and dim >= 1")

    @property
    def stride(self) -> int:
        return math.prod(layer[2] for layer in self.layers)

    def grid_spec(self, image_height: int, image_width: int) -> GridSpec:
        return GridSpec(image_height, image_width, self.stride)


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """Unit-normalize a single vector; raises on (near) zero input."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > eps:
        raise DegenerateVectorError(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def normalize_channels(x: torch.Tensor, dim: int = 1) -> torch.Tensor:
    # eps**2 under the sqrt: no NaN at zero, no visible bias elsewhere
    return x / torch.sqrt((x * x).sum(dim=dim, keepdim=True) + NORM_EPS**2)


def receptive_field(layers) -> tuple[int, int]:
    """Return (size, jump) in input pixels of one output cell."""
    size, jump = 1, 1
    for _, k, s, d in layers:
        size += (k - 1) * d * jump
        jump *= s
    return size, jump


def receptive_field_radius(config: ExtractorConfig) -> float:
    """Euclidean radius around any pixel that covers the receptive field of its cell.

    Pixels farther than this from a keypoint cannot influence the feature
    vector at the keypoint's cell.
    """
    size, _ = receptive_field(config.layers)
    # cell origin sits at stride*col; the keypoint can be up to a stride away
    half = (size - 1) / 2 + config.stride
    return math.sqrt(2.0) * half


class FeatureExtractor(nn.Module):
    def __init__(self, config: ExtractorConfig | None = None):
        super().__init__()
        self.config = config or ExtractorConfig()
        convs = []
        c_in = self.config.in_channels
        for c_out, k, s, d in self.config.layers:
            convs.append(nn.Conv2d(c_in, c_out, k, stride=s, padding=d * (k - 1) // 2, dilation=d))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.reduce = nn.Conv2d(c_in, self.config.dim, 1)
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for i, conv in enumerate([*self.convs, self.reduce]):
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                # He-uniform for ReLU-fed layers, plain 1/sqrt(fan_in) for the reduction
                gain = math.sqrt(6.0) if i < len(self.convs) else math.sqrt(3.0)
                bound = gain / math.sqrt(fan_in)
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                conv.bias.zero_()

    @property
    def stride(self) -> int:
        return self.config.stride

    def raw(self, images: torch.Tensor) -> torch.Tensor:
        """Pre-normalization activations, shape (N, D, H, W)."""
        x = images - 0.5  # center [0, 1] pixels so a constant image gives no common-mode drive
        for conv in self.convs:
            x = torch.relu(conv(x))
        return self.reduce(x)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return normalize_channels(self.raw(images), dim=1)


def to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Stack HxWx3 arrays into an (N, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im) for im in images]) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if not np.all(np.isfinite(arr)):
        raise NumericError("image contains NaN or Inf")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def extract(image, model: FeatureExtractor) -> np.ndarray:
    """Feature map of one HxWx3 image as an (H/stride, W/stride, D) array."""
    x = to_batch(image, model_dtype(model))
    with torch.no_grad():
        fmap = model(x)[0]
    return fmap.permute(1, 2, 0).numpy()


def grad_params(image, model: FeatureExtractor, loss_closure, normalized: bool = True) -> dict[str, torch.Tensor]:
    """Gradient of ``loss_closure(feature_map)`` w.r.t. every parameter.

    ``loss_closure`` receives the (H, W, D) feature map as a tensor and must
    return a scalar tensor. With ``normalized=False`` it sees the activations
    before L2 normalization.
    """
    x = to_batch(image, model_dtype(model))
    params = dict(model.named_parameters())
    fmap = (model(x) if normalized else model.raw(x))[0].permute(1, 2, 0)
    loss = loss_closure(fmap)
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss, dtype=fmap.dtype)
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss.item()}")
    if not loss.requires_grad:
        return {name: torch.zeros_like(p) for name, p in params.items()}
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: (torch.zeros_like(p) if g is None else g)
        for (name, p), g in zip(params.items(), grads)
    }
