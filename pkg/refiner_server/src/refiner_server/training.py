"""First-frame fitting for the convolutional refiner.

Training data is manufactured from a single annotated frame: the reference
mask is corrupted by seeded deformations (shifts, block dropouts, pixel
flips) and the network learns to map the frame plus a corrupted mask back
to the reference. Everything is deterministic given the seed.
"""

from __future__ import annotations

import numpy as np
import torch

from .model import MaskRefinerNet, make_input, save_model

# Cycling through a fixed pool of corruptions (rather than a fresh draw per
# step) keeps the optimization target stationary, so the loss curve is
# comparable across steps.
POOL_SIZE = 16
SHIFT_LIMIT = 3
FLIP_RATE = 0.1
HOLE_FRACTION = 0.25


def deform_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One seeded corruption: shift, a rectangular hole, then pixel flips."""
    out = np.asarray(mask, dtype=np.float32).copy()
    h, w = out.shape
    dr = int(rng.integers(-SHIFT_LIMIT, SHIFT_LIMIT + 1))
    dc = int(rng.integers(-SHIFT_LIMIT, SHIFT_LIMIT + 1))
    out = np.roll(out, (dr, dc), axis=(0, 1))
    hole_h = max(1, int(h * HOLE_FRACTION * rng.random()))
    hole_w = max(1, int(w * HOLE_FRACTION * rng.random()))
    r0 = int(rng.integers(0, h - hole_h + 1))
    c0 = int(rng.integers(0, w - hole_w + 1))
    out[r0:r0 + hole_h, c0:c0 + hole_w] = 0.0
    flips = rng.random(out.shape) < FLIP_RATE
    out[flips] = 1.0 - out[flips]
    return out


def finetune(rgb: np.ndarray, reference: np.ndarray, steps: int, seed: int,
             hidden: int = 16, lr: float = 0.05):
    """Fit a fresh model to one frame; returns (model, per-step losses)."""
    reference = np.asarray(reference, dtype=np.float32)
    if reference.ndim != 2:
        raise ValueError(f"reference mask must be 2-d, got {reference.shape}")
    if not (reference > 0).any():
        raise ValueError("reference mask is empty, nothing to fit")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")

    torch.manual_seed(seed)
    model = MaskRefinerNet(hidden=hidden)
    if steps == 0:
        return model, []

    rng = np.random.default_rng(seed)
    pool = [deform_mask(reference, rng) for _ in range(POOL_SIZE)]
    target = torch.from_numpy(reference).unsqueeze(0).unsqueeze(0)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = torch.nn.BCEWithLogitsLoss()

    model.train()
    losses = []
    for step in range(steps):
        coarse = pool[step % POOL_SIZE]
        batch = make_input(rgb, coarse).unsqueeze(0)
        optimizer.zero_grad()
        loss = loss_fn(model(batch), target)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


def finetune_to_file(path, rgb: np.ndarray, reference: np.ndarray,
                     steps: int, seed: int, hidden: int = 16,
                     lr: float = 0.05) -> list[float]:
    """Fit and persist; with steps=0 the file holds the seeded init."""
    model, losses = finetune(rgb, reference, steps, seed, hidden=hidden, lr=lr)
    save_model(path, model)
    return losses
