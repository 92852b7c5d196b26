"""A small convolutional mask refiner.

The network reads a 4-channel image (RGB scaled to [0, 1] plus the coarse
mask) and emits per-pixel logits; sigmoid turns them into refined mask
values, so outputs always lie in [0, 1]. It is deliberately tiny: its job
is to learn one sequence's color-to-label mapping from the first frame,
not to generalize.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

MODEL_FORMAT = 1


class MaskRefinerNet(nn.Module):
    """Three 3x3 convolutions over the 4-channel input."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        if hidden < 1:
            raise ValueError(f"hidden channels must be >= 1, got {hidden}")
        self.hidden = hidden
        self.stack = nn.Sequential(
            nn.Conv2d(4, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x)


def make_input(rgb: np.ndarray, mask: np.ndarray) -> torch.Tensor:
    """Stack an RGB frame and a coarse mask into a (4, h, w) float tensor."""
    rgb = np.asarray(rgb)
    mask = np.asarray(mask, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"rgb must be (h, w, 3), got {rgb.shape}")
    if mask.shape != rgb.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match frame {rgb.shape[:2]}")
    # copies: the arrays may be read-only views over received network bytes
    colors = torch.from_numpy(np.array(rgb, dtype=np.uint8)).float() / 255.0
    layers = torch.cat([colors.permute(2, 0, 1),
                        torch.from_numpy(np.array(mask)).unsqueeze(0)], dim=0)
    return layers


def refine_mask(model: MaskRefinerNet, rgb: np.ndarray,
                mask: np.ndarray) -> np.ndarray:
    """One feed-forward pass; returns refined values in [0, 1]."""
    model.eval()
    with torch.no_grad():
        logits = model(make_input(rgb, mask).unsqueeze(0))
        values = torch.sigmoid(logits)[0, 0]
    return values.numpy().astype(np.float64)


def save_model(path, model: MaskRefinerNet) -> None:
    torch.save({
        "format": MODEL_FORMAT,
        "hidden": model.hidden,
        "state": model.state_dict(),
    }, path)


def load_model(path) -> MaskRefinerNet:
    record = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(record, dict) or record.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a refiner model file")
    model = MaskRefinerNet(hidden=int(record["hidden"]))
    model.load_state_dict(record["state"])
    model.eval()
    return model
