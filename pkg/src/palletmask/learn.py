"""Per-cell stability model: a small encoder-decoder trained as binary segmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from palletmask.checkpoint import load_checkpoint, save_checkpoint
from palletmask.core import PalletConfig
from palletmask.datasets import MaskSample
from palletmask.env import geometric_bitmap
from palletmask.core import OrientedBox

log = logging.getLogger(__name__)

DTYPE = torch.float64

ACTIVATIONS = {
    "silu": F.silu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda t: t,
}


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 40
    validation_split: float = 0.2
    patience: int = 8
    rng_seed: int = 0
    pos_weight: Optional[float] = None
    threshold: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.validation_split < 1:
            raise ValueError("validation_split must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


class MaskNet(nn.Module):
    """conv(4->c1) | avgpool 2x | conv(c1->c2) conv(c2->c3) | upsample, concat skip | conv(c3+c1->c4) | 1x1 -> logit"""

    def __init__(self, channels=(16, 32, 32, 16), activation: str = "silu"):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.activation = activation
        self.act = ACTIVATIONS[activation]
        self.enc = nn.Conv2d(4, c1, 3, padding=1)
        self.down1 = nn.Conv2d(c1, c2, 3, padding=1)
        self.down2 = nn.Conv2d(c2, c3, 3, padding=1)
        self.dec = nn.Conv2d(c3 + c1, c4, 3, padding=1)
        self.head = nn.Conv2d(c4, 1, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        skip = self.act(self.enc(x))
        h = F.avg_pool2d(skip, 2, ceil_mode=True)
        h = self.act(self.down1(h))
        h = self.act(self.down2(h))
        h = F.interpolate(h, size=size, mode="nearest")
        return self.act(self.dec(torch.cat([h, skip], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))[:, 0]


@dataclass
class MaskModel:
    net: MaskNet
    pallet: PalletConfig
    threshold: float = 0.5
    # box-dim channels hold raw cell counts times this scale; heightmap likewise
    input_scale: float = field(default=0.0)

    def __post_init__(self):
        if not self.input_scale:
            self.input_scale = 1.0 / self.pallet.max_height_cells

    def metadata(self) -> dict:
        return {
            "arch": {"name": "masknet", "channels": list(self.net.channels), "activation": self.net.activation},
            "pallet": [self.pallet.length_cells, self.pallet.width_cells, self.pallet.max_height_cells],
            "threshold": self.threshold,
            "normalization": {"heightmap_scale": self.input_scale, "box_scale": self.input_scale},
        }


def new_model(pallet: PalletConfig, seed: int = 0, channels=(16, 32, 32, 16), activation="silu", threshold=0.5) -> MaskModel:
    torch.manual_seed(seed)
    net = MaskNet(channels, activation).to(DTYPE)
    return MaskModel(net, pallet, threshold)


def build_input(sample: MaskSample) -> np.ndarray:
    """(4, L, W): heightmap and three constant box-dimension planes, all scaled by 1/h_p."""
    return build_inputs(sample.heightmap[None], np.array([sample.box]), sample.pallet)[0]


def build_inputs(heights: np.ndarray, boxes: np.ndarray, pallet: PalletConfig) -> np.ndarray:
    heights = np.asarray(heights, dtype=float)
    boxes = np.asarray(boxes, dtype=float)
    scale = 1.0 / pallet.max_height_cells
    B, L, W = heights.shape
    out = np.empty((B, 4, L, W))
    out[:, 0] = heights * scale
    out[:, 1:] = (boxes * scale)[:, :, None, None]
    return out


def forward(model: MaskModel, inputs) -> torch.Tensor:
    x = torch.as_tensor(inputs, dtype=DTYPE)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] != 4 or tuple(x.shape[-2:]) != model.pallet.shape:
        raise ValueError(f"input shape {tuple(x.shape)} incompatible with pallet {model.pallet.shape}")
    return torch.sigmoid(model.net(x))


def predict_proba(model: MaskModel, heights: np.ndarray, boxes: np.ndarray, batch: int = 256) -> np.ndarray:
    x = build_inputs(heights, boxes, model.pallet)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            out.append(forward(model, x[i : i + batch]).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + model.pallet.shape)


def bce_loss(net: MaskNet, x: torch.Tensor, y: torch.Tensor, pos_weight: Optional[float] = None) -> torch.Tensor:
    pw = None if pos_weight is None else torch.tensor(pos_weight, dtype=x.dtype)
    return F.binary_cross_entropy_with_logits(net(x), y, pos_weight=pw)


def _tensors(samples: Sequence[MaskSample], pallet: PalletConfig):
    x = build_inputs(np.stack([s.heightmap for s in samples]), np.array([s.box for s in samples]), pallet)
    y = np.stack([s.mask for s in samples]).astype(float)
    return torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(y, dtype=DTYPE)


def predict_masks(model: MaskModel, samples: Sequence[MaskSample], threshold: Optional[float] = None) -> list[np.ndarray]:
    """Thresholded predictions intersected with geometric validity."""
    if not samples:
        return []
    t = model.threshold if threshold is None else threshold
    probs = predict_proba(model, np.stack([s.heightmap for s in samples]), np.array([s.box for s in samples]))
    return [
        (p >= t) & geometric_bitmap(s.heightmap, OrientedBox(*s.box), s.pallet) for p, s in zip(probs, samples)
    ]


def evaluate_iou(model: MaskModel, samples: Sequence[MaskSample]) -> float:
    from palletmask.masking import pooled_iou

    return pooled_iou(predict_masks(model, samples), [s.mask for s in samples])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_iou: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    train_size: int
    val_size: int


def split_dataset(samples: Sequence[MaskSample], validation_split: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * validation_split)) if len(samples) > 1 else 0
    n_val = min(max(n_val, 1 if len(samples) > 1 else 0), len(samples) - 1)
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val


def train_mask_model(
    dataset: Sequence[MaskSample], config: TrainConfig = TrainConfig(), model: Optional[MaskModel] = None
) -> tuple[MaskModel, TrainReport]:
    """Minimise mean per-cell BCE with SGD + momentum; keeps the best validation-loss parameters."""
    if not dataset:
        raise ValueError("cannot train a mask model on an empty dataset")
    pallet = dataset[0].pallet
    if model is None:
        model = new_model(pallet, seed=config.rng_seed, threshold=config.threshold)
    train, val = split_dataset(list(dataset), config.validation_split, config.rng_seed)
    xt, yt = _tensors(train, pallet)
    xv, yv = _tensors(val, pallet) if val else (None, None)
    net = model.net
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate, momentum=config.momentum)
    rng = np.random.default_rng(config.rng_seed + 1)
    records = []
    best = (math.inf, 0, {k: v.clone() for k, v in net.state_dict().items()})
    stale = 0
    for epoch in range(config.epochs):
        net.train()
        order = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = torch.as_tensor(order[i : i + config.batch_size])
            opt.zero_grad()
            loss = bce_loss(net, xt[idx], yt[idx], config.pos_weight)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite mask loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / len(train)
        with torch.no_grad():
            if xv is not None:
                val_loss = bce_loss(net, xv, yv, config.pos_weight).item()
                val_iou = evaluate_iou(model, val)
            else:
                val_loss, val_iou = train_loss, float("nan")
        records.append(EpochRecord(epoch, train_loss, val_loss, val_iou))
        log.info("mask epoch %d train %.5f val %.5f iou %.4f", epoch, train_loss, val_loss, val_iou)
        if val_loss < best[0] - 1e-12:
            best = (val_loss, epoch, {k: v.clone() for k, v in net.state_dict().items()})
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.load_state_dict(best[2])
    net.eval()
    return model, TrainReport(records, best[1], len(train), len(val))


def gradient_check(
    model: MaskModel, sample: MaskSample, epsilon: float = 1e-4, n_params: int = 40, seed: int = 0
) -> float:
    """Max relative error between autograd and central finite differences of the BCE loss."""
    x, y = _tensors([sample], model.pallet)
    return _finite_difference_check(lambda: bce_loss(model.net, x, y), list(model.net.parameters()), epsilon, n_params, seed)


def _finite_difference_check(loss_fn, params, epsilon: float, n_params: int, seed: int) -> float:
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            i = int(flat - offsets[k])
            view = params[k].view(-1)
            orig = view[i].item()
            view[i] = orig + epsilon
            up = loss_fn().item()
            view[i] = orig - epsilon
            down = loss_fn().item()
            view[i] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = grads[k].view(-1)[i].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def save_mask_model(model: MaskModel, path) -> None:
    tensors = {k: v.detach().numpy() for k, v in model.net.state_dict().items()}
    save_checkpoint(path, "mask_model", model.metadata(), tensors)


def load_mask_model(path) -> MaskModel:
    meta, tensors = load_checkpoint(path, kind="mask_model")
    arch = meta["arch"]
    net = MaskNet(tuple(arch["channels"]), arch["activation"]).to(DTYPE)
    net.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in tensors.items()})
    net.eval()
    L, W, H = meta["pallet"]
    return MaskModel(net, PalletConfig(L, W, H), meta["threshold"], meta["normalization"]["heightmap_scale"])
