"""Sample preparation, the alternating D/G update and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data_io
from .errors import InvalidArgumentError, TrainingDivergedError
from .gan import Discriminator, Generator, GeneratorConfig, TrainConfig, gan_loss_grads, gan_losses
from .metrics import SsimConfig, mask_ssim, ssim
from .nnloss import (FeatureExtractor, l1_loss, l1_loss_backward, nn_loss_backward, nn_loss_shifted,
                     perceptual_elementwise_backward, perceptual_elementwise_loss)
from .optim import ParamStore, adam_step
from .pose import Pose, RegionSet, decompose_regions, heatmap_from_pose
from .warp import WarpPlan, build_warp_plan

LOG_FIELDS = ("iteration", "loss_D", "loss_G_adv", "recon", "wall_time")
# timing-free subset; identical bytes across seeded reruns
LOSS_FIELDS = LOG_FIELDS[:-1]


@dataclass
class TrainSample:
    x_a: np.ndarray
    x_b: np.ndarray
    pose_a: Pose
    pose_b: Pose
    H_a: np.ndarray  # (h, w, 18)
    H_b: np.ndarray
    regions: tuple[RegionSet, RegionSet]
    plans: list[WarpPlan]  # one per skip resolution, shallow to deep
    mask_b: np.ndarray | None = None


def prepare_sample(x_a, x_b, pose_a: Pose, pose_b: Pose, gcfg: GeneratorConfig,
                   mask_b=None) -> TrainSample:
    """Heat maps and per-resolution warp plans, computed once per pair."""
    H, W = gcfg.height, gcfg.width
    if np.shape(x_a)[:2] != (H, W) or np.shape(x_b)[:2] != (H, W):
        raise InvalidArgumentError(f"images must be {H}x{W}, got {np.shape(x_a)} and {np.shape(x_b)}")
    dt = np.dtype(gcfg.dtype)
    H_a = heatmap_from_pose(pose_a, W, H, gcfg.sigma).channels_last().astype(dt)
    H_b = heatmap_from_pose(pose_b, W, H, gcfg.sigma).channels_last().astype(dt)
    ra = decompose_regions(pose_a, W, H)
    rb = decompose_regions(pose_b, W, H)
    plans = [build_warp_plan(ra, rb, (H, W), size) for size in gcfg.skip_sizes()]
    return TrainSample(np.asarray(x_a, dtype=dt), np.asarray(x_b, dtype=dt), pose_a, pose_b,
                       H_a, H_b, (ra, rb), plans, None if mask_b is None else np.asarray(mask_b))


def stack_batch(samples: Sequence[TrainSample]):
    x_a = np.stack([s.x_a for s in samples])
    x_b = np.stack([s.x_b for s in samples])
    H_a = np.stack([s.H_a for s in samples])
    H_b = np.stack([s.H_b for s in samples])
    return x_a, x_b, H_a, H_b, [s.plans for s in samples]


@dataclass
class TrainState:
    g_params: ParamStore
    d_params: ParamStore
    iteration: int = 0
    trace: list = field(default_factory=list)


class Trainer:
    """Owns the networks for one (GeneratorConfig, TrainConfig) pair."""

    def __init__(self, gcfg: GeneratorConfig, tcfg: TrainConfig):
        self.gcfg = gcfg
        self.tcfg = tcfg
        self.generator = Generator(gcfg)
        self.discriminator = Discriminator(gcfg.channel_divisor, dtype=gcfg.dtype)
        self.features = FeatureExtractor(tcfg.feature_channels, tcfg.feature_seed, dtype=np.dtype(gcfg.dtype))
        self._target_features: dict = {}

    def init_state(self) -> TrainState:
        seed = self.tcfg.seed
        return TrainState(self.generator.init_params(seed), self.discriminator.init_params(seed))

    # -- reconstruction -------------------------------------------------------------

    def target_features(self, batch: Sequence[TrainSample]) -> np.ndarray:
        out = []
        for s in batch:
            key = id(s)
            if key not in self._target_features:
                self._target_features[key] = (s, self.features(s.x_b))
            out.append(self._target_features[key][1])
        return np.stack(out)

    def recon_loss(self, x_hat, x_b, c_b=None):
        """Per-batch mean of per-sample reconstruction losses and dL/dx_hat."""
        kind = self.tcfg.recon
        b = x_hat.shape[0]
        if kind == "l1":
            vals = [l1_loss(x_hat[j], x_b[j]) for j in range(b)]
            grad = np.stack([l1_loss_backward(1.0 / b, x_hat[j], x_b[j]) for j in range(b)])
            return float(np.mean(vals)), grad
        c_hat, ctx = self.features.forward(x_hat)
        if c_b is None:
            c_b = self.features(x_b)
        vals, gc = [], []
        for j in range(b):
            if kind == "nn":
                v, argmin = nn_loss_shifted(c_hat[j], c_b[j], self.tcfg.neighborhood)
                gc.append(nn_loss_backward(1.0 / b, argmin, c_hat[j], c_b[j]))
            else:
                v = perceptual_elementwise_loss(c_hat[j], c_b[j])
                gc.append(perceptual_elementwise_backward(1.0 / b, c_hat[j], c_b[j]))
            vals.append(v)
        grad = self.features.backward(ctx, np.stack(gc))
        return float(np.mean(vals)), grad

    # -- one iteration ------------------------------------------------------------------

    def train_step(self, state: TrainState, batch: Sequence[TrainSample]) -> dict:
        """One D update on real + fake, then one G update. Mutates ``state``."""
        t = self.tcfg
        it = state.iteration
        x_a, x_b, H_a, H_b, plans = stack_batch(batch)
        b = x_a.shape[0]
        rng = np.random.default_rng([t.seed, it, 1])

        x_hat, g_ctx = self.generator.forward(state.g_params, x_a, H_a, H_b, plans, "train", rng)

        D = self.discriminator
        both, both_ctx = D.forward(state.d_params, np.concatenate([x_a, x_a]), np.concatenate([H_a, H_a]),
                                   np.concatenate([x_b, x_hat]), np.concatenate([H_b, H_b]))
        real, fake = both[:b], both[b:]
        loss_d = float(np.mean([gan_losses(r, f)[0] for r, f in zip(real, fake)]))
        if not math.isfinite(loss_d):
            raise TrainingDivergedError(it, "loss_D")
        if not t.freeze_d:
            gr = [gan_loss_grads(r, f)[0] / b for r, f in zip(real, fake)]
            gf = [gan_loss_grads(r, f)[1] / b for r, f in zip(real, fake)]
            d_grads, _ = D.backward(both_ctx, np.array(gr + gf), need_input=False)
            adam_step(state.d_params, d_grads, t.lr, t.beta1, t.beta2, t.eps)

        fake2, fake2_ctx = D.forward(state.d_params, x_a, H_a, x_hat, H_b)
        loss_g_adv = float(np.mean([gan_losses(0.5, f)[1] for f in fake2]))
        g_adv = np.array([gan_loss_grads(0.5, f)[2] for f in fake2]) / b
        _, grad_x = D.backward(fake2_ctx, g_adv)
        c_b = self.target_features(batch) if t.recon != "l1" else None
        recon, grad_recon = self.recon_loss(x_hat, x_b, c_b)
        if not (math.isfinite(loss_g_adv) and math.isfinite(recon)):
            raise TrainingDivergedError(it, "generator loss")
        grad_x = grad_x + t.lam * grad_recon
        g_grads = self.generator.backward(g_ctx, grad_x.astype(x_hat.dtype))
        adam_step(state.g_params, g_grads, t.lr, t.beta1, t.beta2, t.eps)

        state.iteration += 1
        return {"iteration": it, "loss_D": loss_d, "loss_G_adv": loss_g_adv, "recon": recon}

    def sample_batch(self, samples: Sequence[TrainSample], iteration: int) -> list[TrainSample]:
        idx = np.random.default_rng([self.tcfg.seed, iteration, 0]).integers(len(samples), size=self.tcfg.batch_size)
        return [samples[i] for i in idx]

    def train(self, state: TrainState, samples: Sequence[TrainSample], iterations: int | None = None,
              on_step: Callable[[TrainState, dict], None] | None = None) -> TrainState:
        """Run until ``state.iteration`` reaches ``iterations`` (default: the configured count)."""
        stop = self.tcfg.iterations if iterations is None else iterations
        start = time.perf_counter()
        while state.iteration < stop:
            row = self.train_step(state, self.sample_batch(samples, state.iteration))
            row["wall_time"] = time.perf_counter() - start
            state.trace.append(row)
            if on_step is not None:
                on_step(state, row)
        return state

    # -- inference ----------------------------------------------------------------------

    def generate(self, g_params: ParamStore, samples: Sequence[TrainSample], batch_size: int = 16) -> np.ndarray:
        out = []
        for i in range(0, len(samples), batch_size):
            x_a, _, H_a, H_b, plans = stack_batch(samples[i:i + batch_size])
            x_hat, _ = self.generator.forward(g_params, x_a, H_a, H_b, plans, "eval")
            out.append(x_hat)
        return np.concatenate(out)

    def evaluate(self, g_params: ParamStore, samples: Sequence[TrainSample]) -> dict:
        x_hat = self.generate(g_params, samples)
        cfg = SsimConfig(dynamic_range=2.0)
        s = [ssim(x_hat[i], samples[i].x_b, cfg) for i in range(len(samples))]
        m = [mask_ssim(x_hat[i], samples[i].x_b, samples[i].mask_b, cfg)
             for i in range(len(samples)) if samples[i].mask_b is not None]
        return {"ssim": float(np.mean(s)), "mask_ssim": float(np.mean(m)) if m else float("nan")}


# -- persistence -------------------------------------------------------------------------

def config_dict(gcfg: GeneratorConfig, tcfg: TrainConfig) -> dict:
    return {"generator": _plain(dataclasses.asdict(gcfg)), "train": _plain(dataclasses.asdict(tcfg))}


def _plain(obj):
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def configs_from_dict(d: dict) -> tuple[GeneratorConfig, TrainConfig]:
    g = dict(d["generator"])
    for key in ("encoder", "decoder"):
        g[key] = tuple(tuple(b) for b in g[key])
    return GeneratorConfig(**g), TrainConfig(**d["train"])


def save_state(path, state: TrainState, gcfg: GeneratorConfig, tcfg: TrainConfig):
    data_io.save_checkpoint(path, {"G": state.g_params, "D": state.d_params},
                            config_dict(gcfg, tcfg), state.iteration)


def load_state(path) -> tuple[TrainState, GeneratorConfig, TrainConfig]:
    stores, config, iteration = data_io.load_checkpoint(path)
    gcfg, tcfg = configs_from_dict(config)
    return TrainState(stores["G"], stores["D"], iteration), gcfg, tcfg


def write_log(path, trace: Sequence[dict], columns: Sequence[str] = LOG_FIELDS):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in trace:
            w.writerow([row["iteration"]] + [repr(float(row[k])) for k in columns[1:]])


def read_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in rec.items()}
                for rec in csv.DictReader(fh)]
