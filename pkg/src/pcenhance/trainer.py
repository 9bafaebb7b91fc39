"""Alternating critic/generator training, checkpoints and whole-cloud enhancement."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .critic import Critic, CriticConfig
from .generator import Generator, GeneratorConfig, PatchInput, collate, prepare_patch
from .metrics import psnr
from .objectives import LossConfig, discriminator_loss, generator_loss, gradient_penalty, rmse_loss
from .patches import GroupedPatch, Patch, fuse_patches, generate_patches, group_patches
from .pointcloud_io import CHANNELS, ColorSpace, ColorSpaceError, PointCloud, channel_index

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pcenhance-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "# pcenhance-metrics v1"


class CheckpointError(RuntimeError):
    """Missing, unreadable or mismatched checkpoint."""


class TrainingDiverged(FloatingPointError):
    """A loss became NaN/Inf; ``snapshot`` points at the saved offending batch, if any."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 5
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-6
    n_critic: int = 1
    k: int = 20
    n: int = 2048
    ol: float = 2.0
    num_nei: int = 6
    channel: str = "Y"
    seed: int = 0
    betas: tuple = (0.5, 0.9)
    val_fraction: float = 0.1
    max_steps: int | None = None
    # False trains the generator on omega * RMSE alone (regression baseline, no critic)
    adversarial: bool = True
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr_generator < 0 or self.lr_discriminator < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.n_critic < 0:
            raise ValueError("epochs and batch_size must be >= 1, n_critic >= 0")
        channel_index(self.channel)
        # the graph size is a training-level choice; keep the networks in sync
        self.generator.k = self.k
        self.critic.k = self.k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["generator"] = self.generator.to_dict()
        d["critic"] = self.critic.to_dict()
        d["loss"] = self.loss.to_dict()
        return d


@dataclass
class TrainResult:
    generator: Generator
    critic: Critic
    history: list  # one dict per logged epoch
    steps: int


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def patch_count(n_points: int, n: int, ol: float) -> int:
    """Number of seeds m giving patches of about ``n`` points (never more than the cloud)."""
    m = max(int(round(n_points * ol / n)), int(np.ceil(ol)), 1)
    return min(m, n_points)


def build_dataset(original: PointCloud, distorted: PointCloud, n: int, ol: float, num_nei: int):
    """(distorted GroupedPatch, original Patch) pairs over one cloud pair.

    Patches are cut on the distorted cloud; the original patch shares its
    indices (geometry is lossless, so both clouds have the same points).
    """
    if len(original) != len(distorted) or not np.array_equal(original.geometry, distorted.geometry):
        raise ValueError("original and distorted clouds must share geometry and point order")
    m = patch_count(len(distorted), n, ol)
    patches = generate_patches(distorted, m, ol)
    groups = group_patches(patches, min(num_nei, m - 1))
    full = np.concatenate([original.geometry, original.attributes], axis=1)
    return [
        (g, Patch(points=full[g.center.indices].copy(), indices=g.center.indices.copy(), seed_index=g.center.seed_index))
        for g in groups
    ]


def _prepare_training_items(dataset, channel: str, k: int):
    ch = channel_index(channel)
    items, targets = [], []
    for grouped, original in dataset:
        items.append(prepare_patch(grouped, ch, k))
        targets.append(np.asarray(original.attributes[:, ch], dtype=np.float64))
    return items, targets


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, model, channel: str, kind: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "channel": channel,
        "config": model.cfg.to_dict(),
        "state": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_kind: str | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, channel)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    kind = payload["kind"]
    if expected_kind and kind != expected_kind:
        raise CheckpointError(f"{path} holds a {kind}, expected a {expected_kind}")
    if kind == "generator":
        model = Generator(GeneratorConfig(**payload["config"]))
    elif kind == "critic":
        model = Critic(CriticConfig(**payload["config"]))
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["channel"]


def save_checkpoints(directory, channel: str, generator: Generator, critic: Critic | None = None):
    directory = Path(directory)
    save_checkpoint(directory / channel / "generator.ckpt", generator, channel, "generator")
    if critic is not None:
        save_checkpoint(directory / channel / "critic.ckpt", critic, channel, "critic")


def load_generators(directory, channels=CHANNELS) -> dict:
    directory = Path(directory)
    out = {}
    for ch in channels:
        path = directory / ch / "generator.ckpt"
        if not path.exists():
            raise CheckpointError(f"missing checkpoint for channel {ch}: {path}")
        out[ch], _ = load_checkpoint(path, "generator")
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _set_requires_grad(model, flag: bool):
    for p in model.parameters():
        p.requires_grad_(flag)


@torch.no_grad()
def evaluate_psnr(generator: Generator, items, targets, batch_size: int) -> float:
    was_training = generator.training
    generator.eval()
    enhanced = []
    for start in range(0, len(items), batch_size):
        out = generator.enhance(collate(items[start:start + batch_size]))
        enhanced.append(np.clip(out, 0.0, 255.0).reshape(-1))
    generator.train(was_training)
    return psnr(np.concatenate(enhanced), np.concatenate([t.reshape(-1) for t in targets]))


def _snapshot(out_dir, step, batch, target):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, attribute=batch.attribute.numpy(), target=target.numpy(),
             geometry=batch.geometry.numpy(), idx=batch.idx.numpy())
    return path


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["step", "L_G", "L_D", "RMSE", "val_PSNR"])
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in ("L_G", "L_D", "RMSE", "val_PSNR")])


def train(dataset, cfg: TrainConfig, out_dir=None, generator: Generator | None = None,
          critic: Critic | None = None) -> TrainResult:
    """Train one channel's generator and critic.

    Each step runs ``n_critic`` critic updates against the current generator
    output (generator frozen), then one generator update against the fixed
    critic. Per-epoch means of L_G, L_D and RMSE plus the validation PSNR are
    logged; with ``out_dir`` they are written to ``metrics.csv`` next to the
    ``{channel}/{generator,critic}.ckpt`` checkpoints.
    """
    if not dataset:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gp_gen = torch.Generator().manual_seed(cfg.seed + 1)

    generator = generator if generator is not None else Generator(cfg.generator)
    critic = critic if critic is not None else Critic(cfg.critic)
    generator.train()
    critic.train()

    items, targets = _prepare_training_items(dataset, cfg.channel, cfg.k)
    order = rng.permutation(len(items))
    n_val = int(len(items) * cfg.val_fraction)
    val_ids, train_ids = order[:n_val], order[n_val:]
    if len(train_ids) == 0:
        train_ids, val_ids = order, order[:0]
    # no held-out patches: report PSNR on the training patches instead
    eval_ids = val_ids if len(val_ids) else train_ids
    eval_items = [items[i] for i in eval_ids]
    eval_targets = [targets[i] for i in eval_ids]

    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr_generator, betas=cfg.betas)
    opt_d = torch.optim.Adam(critic.parameters(), lr=cfg.lr_discriminator, betas=cfg.betas)
    beta, omega = cfg.loss.beta, cfg.loss.omega

    history = []
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        perm = train_ids[rng.permutation(len(train_ids))]
        sums = {"L_G": 0.0, "L_D": 0.0, "RMSE": 0.0}
        n_batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            ids = perm[start:start + cfg.batch_size]
            batch = collate([items[i] for i in ids])
            target = torch.as_tensor(np.stack([targets[i] for i in ids]))

            loss_d = torch.zeros((), dtype=torch.float64)
            for _ in range(cfg.n_critic if cfg.adversarial else 0):
                with torch.no_grad():
                    fake = generator(batch)
                try:
                    gp = gradient_penalty(critic, target, fake, batch.idx, generator=gp_gen)
                except FloatingPointError as exc:
                    snap = _snapshot(out_dir, step, batch, target)
                    raise TrainingDiverged(f"gradient penalty failed at step {step}: {exc}", snap) from exc
                loss_d = discriminator_loss(critic(target, batch.idx), critic(fake, batch.idx), gp, beta)
                if not torch.isfinite(loss_d):
                    snap = _snapshot(out_dir, step, batch, target)
                    raise TrainingDiverged(f"critic loss is {loss_d.item()} at step {step}", snap)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()

            _set_requires_grad(critic, False)
            enhanced = generator(batch)
            if cfg.adversarial:
                loss_g = generator_loss(enhanced, target, critic(enhanced, batch.idx), omega)
            else:
                loss_g = omega * rmse_loss(enhanced, target)
            rmse = rmse_loss(enhanced.detach(), target)
            if not torch.isfinite(loss_g):
                _set_requires_grad(critic, True)
                snap = _snapshot(out_dir, step, batch, target)
                raise TrainingDiverged(f"generator loss is {loss_g.item()} at step {step}", snap)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            _set_requires_grad(critic, True)

            step += 1
            n_batches += 1
            sums["L_G"] += loss_g.item()
            sums["L_D"] += loss_d.item()
            sums["RMSE"] += rmse.item()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break

        row = {"epoch": epoch, "step": step, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        row["val_PSNR"] = evaluate_psnr(generator, eval_items, eval_targets, cfg.batch_size)
        history.append(row)
        log.info("epoch %d step %d L_G %.4f L_D %.4f RMSE %.4f val_PSNR %.3f",
                 epoch, step, row["L_G"], row["L_D"], row["RMSE"], row["val_PSNR"])
        if done:
            break

    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoints(out_dir, cfg.channel, generator, critic)
        write_metrics_csv(out_dir / f"metrics_{cfg.channel}.csv", history)
    generator.eval()
    critic.eval()
    return TrainResult(generator, critic, history, step)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def _channel_items(groups: list[GroupedPatch], channels, k: int) -> dict:
    """Per-channel inputs; the geometric part is computed once and shared."""
    base = [prepare_patch(g, 0, k) for g in groups]
    out = {}
    for ch in channels:
        c = channel_index(ch)
        out[ch] = [
            PatchInput(g.center.attributes[:, c].astype(np.float64), b.geometry, b.idx, b.exp_neighbors, b.indices)
            for g, b in zip(groups, base)
        ]
    return out


def enhance_cloud(pc: PointCloud, checkpoints, cfg: TrainConfig, channels=CHANNELS) -> PointCloud:
    """Enhance the requested channels of a YCbCr cloud.

    ``checkpoints`` maps channel name to a :class:`Generator` or is a
    checkpoint directory laid out as ``{channel}/generator.ckpt``. Patch
    outputs are clamped to [0, 255] and fused; geometry and point order are
    returned unchanged.
    """
    if pc.color_space is not ColorSpace.YCBCR:
        raise ColorSpaceError("enhance_cloud expects a YCbCr cloud")
    if isinstance(checkpoints, (str, os.PathLike)):
        checkpoints = load_generators(checkpoints, channels)
    missing = [ch for ch in channels if ch not in checkpoints]
    if missing:
        raise CheckpointError(f"missing checkpoint for channel(s) {', '.join(missing)}")

    m = patch_count(len(pc), cfg.n, cfg.ol)
    patches = generate_patches(pc, m, cfg.ol)
    groups = group_patches(patches, min(cfg.num_nei, m - 1))
    k = min(cfg.k, len(patches[0]))
    per_channel = _channel_items(groups, channels, k)

    attrs = pc.attributes.copy()
    for ch in channels:
        gen = checkpoints[ch]
        if gen.cfg.k != k:
            log.debug("generator k=%d, using k=%d from the run config", gen.cfg.k, k)
        gen.eval()
        items = per_channel[ch]
        enhanced = []
        for start in range(0, len(items), cfg.batch_size):
            chunk = items[start:start + cfg.batch_size]
            out = np.clip(gen.enhance(collate(chunk)), 0.0, 255.0)
            enhanced.extend((it.indices, row) for it, row in zip(chunk, out))
        c = channel_index(ch)
        attrs[:, c] = fuse_patches(enhanced, len(pc), pc.attributes[:, c])
    return PointCloud(pc.geometry.copy(), attrs, ColorSpace.YCBCR)
