"""Tonemapped L1 objective, Adam, the patch/augmentation pipeline, a
synthetic desk-scale dataset generator, and the training loop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .hdrmath import HdrImage, LdrImage, SampleTriplet, mu_law, mu_law_t
from .model import ModelConfig, bind_params, forward_from_inputs, save_checkpoint
from .hdrmath import build_input
from .metrics import psnr


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    patch: int = 128
    stride: int = 64
    seed: int = 0
    mu: float = 5000.0
    gamma: float = 2.2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 0          # 0 = no cap beyond epochs
    checkpoint_every: int = 0   # epochs between periodic checkpoints (0 = final only)

    def __post_init__(self):
        if self.stride > self.patch:
            raise ValueError("stride must not exceed patch size")
        if self.batch_size < 1 or self.epochs < 1 or self.patch < 1:
            raise ValueError("batch_size, epochs and patch must be >= 1")


def l1_tonemapped_loss(out: tc.Tensor, gt, mu: float = 5000.0) -> tc.Tensor:
    """Mean absolute difference of mu-law tonemapped images."""
    gt_d = gt.data if isinstance(gt, tc.Tensor) else np.asarray(gt)
    if out.shape != gt_d.shape:
        raise tc.ShapeError(
            f"loss operands differ in shape: {out.shape} vs {gt_d.shape}")
    t_gt = tc.constant(mu_law(gt_d, mu))
    return tc.mean(tc.abs_(tc.sub(mu_law_t(out, mu), t_gt)))


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    """Bias-corrected Adam moments for a named parameter dict."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam update; returns the new parameter dict."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    out = {}
    for k, w in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(w)
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        out[k] = w - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


# ---------------------------------------------------------------------------
# patches and augmentation

def _positions(extent, patch, stride):
    pos = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if pos[-1] != last:
        pos.append(last)  # snap so the border is always covered
    return pos


def crop_patches(s: SampleTriplet, patch=128, stride=64):
    """Sliding-window crops, identical coordinates for all images and GT."""
    h, w = s.ldr[0].size
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than patch {patch}")
    out = []
    for y in _positions(h, patch, stride):
        for x in _positions(w, patch, stride):
            ldr = tuple(LdrImage(im.pixels[y:y + patch, x:x + patch],
                                 im.exposure_time) for im in s.ldr)
            gt = None
            if s.ground_truth is not None:
                gt = HdrImage(s.ground_truth.pixels[y:y + patch, x:x + patch],
                              s.ground_truth.scale)
            out.append(SampleTriplet(ldr=ldr, ground_truth=gt,
                                     name=f"{s.name}@{y},{x}"))
    return out


def _dihedral(pix, code):
    rot, flip = code % 4, code // 4
    if flip:
        pix = pix[:, ::-1]
    return np.rot90(pix, rot).copy()


def augment(s: SampleTriplet, code: int) -> SampleTriplet:
    """Dihedral-group element (4 rotations x optional horizontal flip),
    applied identically to the three LDRs and the GT. Codes 0..7."""
    if not 0 <= code <= 7:
        raise ValueError(f"augmentation code must be 0..7, got {code}")
    h, w = s.ldr[0].size
    if h != w and code % 4 in (1, 3):
        raise ValueError("90/270 degree rotation requires a square patch")
    ldr = tuple(LdrImage(_dihedral(im.pixels, code), im.exposure_time)
                for im in s.ldr)
    gt = None
    if s.ground_truth is not None:
        gt = HdrImage(_dihedral(s.ground_truth.pixels, code),
                      s.ground_truth.scale)
    return SampleTriplet(ldr=ldr, ground_truth=gt, name=f"{s.name}~{code}")


# ---------------------------------------------------------------------------
# synthetic data

def synth_dataset(n, seed=0, size=32, motion=True, gamma=2.2):
    """Procedural radiance fields exposed at t = (0.25, 1, 4).

    Each scene is a smooth gradient plus random soft blobs; with ``motion``
    one blob is rigidly shifted in the non-reference frames. The LDRs invert
    the HDR-space mapping exactly wherever they are unclamped.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    times = (0.25, 1.0, 4.0)
    samples = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    for i in range(n):
        def blob(cy, cx, r, amp):
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            return amp * np.exp(-d2 / (2 * r * r))

        gdir = rng.uniform(-1, 1, size=2)
        base = 0.25 + 0.2 * (gdir[0] * yy + gdir[1] * xx)
        radiance = np.stack([base.copy() for _ in range(3)], axis=2)
        blobs = []
        for _ in range(rng.integers(2, 5)):
            blob_params = (rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85),
                    rng.uniform(0.08, 0.2), rng.uniform(0.2, 0.6),
                    rng.uniform(0.3, 1.0, size=3))
            blobs.append(blob_params)
        for cy, cx, r, amp, col in blobs:
            for ch in range(3):
                radiance[:, :, ch] += col[ch] * blob(cy, cx, r, amp)
        radiance = np.clip(radiance, 0.0, None)
        radiance /= max(radiance.max(), 1e-9)

        shift = rng.uniform(-0.06, 0.06, size=2) if motion else (0.0, 0.0)
        ldr = []
        for j, t in enumerate(times):
            rad = radiance
            if motion and j != 1 and blobs:
                cy, cx, r, amp, col = blobs[0]
                moved = radiance.copy()
                for ch in range(3):
                    moved[:, :, ch] += col[ch] * (
                        blob(cy + shift[0], cx + shift[1], r, amp)
                        - blob(cy, cx, r, amp))
                rad = np.clip(moved, 0.0, None)
                rad = rad / max(rad.max(), 1e-9)
            ldr.append(LdrImage(np.clip((t * rad) ** (1.0 / gamma), 0.0, 1.0), t))
        samples.append(SampleTriplet(ldr=tuple(ldr),
                                     ground_truth=HdrImage(radiance),
                                     name=f"synth{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# training loop

def training_step(batch, params, cfg: ModelConfig, tcfg: TrainConfig):
    """Forward + backward over a batch of same-size triplets.

    Returns (loss value, gradient dict averaged over the batch)."""
    tape = tc.Tape()
    leaves = bind_params(params, tape)
    dt = tc.DTYPES[cfg.dtype]
    ins = [np.concatenate([build_input(s, tcfg.gamma)[k] for s in batch], axis=0)
           .astype(dt) for k in range(3)]
    gt = np.stack([s.ground_truth.pixels for s in batch], axis=0).astype(dt)
    out = forward_from_inputs(ins, leaves, cfg)
    loss = l1_tonemapped_loss(out, gt, tcfg.mu)
    grads = tc.backward(loss)
    gdict = {k: grads[leaf] for k, leaf in leaves.items() if leaf in grads}
    return float(loss.data), gdict


def _eval_psnr_mu(samples, params, cfg, mu):
    from .model import model_forward
    vals = []
    for s in samples:
        out = model_forward(s, params, cfg)
        vals.append(psnr(mu_law(out.pixels, mu),
                         mu_law(s.ground_truth.pixels, mu)))
    return float(np.mean(vals))


def train_loop(dataset, params, cfg: ModelConfig, tcfg: TrainConfig,
               out_dir, log_fn=None):
    """Seeded mini-batch training; logs line-delimited JSON records and
    writes checkpoints under out_dir. Returns the final parameters."""
    dataset = [s for s in dataset if s.ground_truth is not None]
    if not dataset:
        raise TrainingError("training requires samples with ground truth")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.hdck"

    patches = []
    for s in dataset:
        patches.extend(crop_patches(s, tcfg.patch, tcfg.stride))
    n_val = max(1, len(dataset) // 10)
    val = sorted(dataset, key=lambda s: s.name)[-n_val:]

    rng = np.random.default_rng(tcfg.seed)
    state = AdamState(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    step = 0
    last_good = dict(params)
    with open(log_path, "w") as log:
        for epoch in range(tcfg.epochs):
            order = rng.permutation(len(patches))
            for lo in range(0, len(order), tcfg.batch_size):
                idx = order[lo:lo + tcfg.batch_size]
                batch = [augment(patches[i], int(rng.integers(0, 8)))
                         for i in idx]
                loss, grads = training_step(batch, params, cfg, tcfg)
                if not np.isfinite(loss):
                    save_checkpoint(ckpt_path, last_good, cfg)
                    raise TrainingError(
                        f"non-finite loss at step {step}; last good "
                        f"checkpoint kept at {ckpt_path}")
                params = adam_step(params, grads, state)
                last_good = params
                step += 1
                if tcfg.max_steps and step >= tcfg.max_steps:
                    break
            psnr_mu = _eval_psnr_mu(val, params, cfg, tcfg.mu)
            rec = {"epoch": epoch, "step": step, "loss": loss,
                   "psnr_mu": psnr_mu}
            log.write(json.dumps(rec) + "\n")
            log.flush()
            if log_fn:
                log_fn(rec)
            if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_ep{epoch:04d}.hdck",
                                params, cfg)
            if tcfg.max_steps and step >= tcfg.max_steps:
                break
    save_checkpoint(ckpt_path, params, cfg)
    return params
