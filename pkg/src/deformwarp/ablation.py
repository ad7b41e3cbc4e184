"""Desk-scale ablation runs on synthetic figures: held-out mask-SSIM and one-sample overfitting."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .gan import build_variant
from .synth import SyntheticFigureSpec, generate_dataset
from .training import Trainer, prepare_sample


@dataclass(frozen=True)
class AblationConfig:
    iterations: int = 2000
    overfit_iterations: int = 200
    train_pairs: int = 64
    test_pairs: int = 16
    height: int = 64
    width: int = 32
    data_seed: int = 100
    test_seed: int = 200


def _samples(pairs, gcfg):
    return [prepare_sample(p.x_a, p.x_b, p.pose_a, p.pose_b, gcfg, mask_b=p.mask_b) for p in pairs]


def heldout_mask_ssim(variant: str, seed: int, cfg: AblationConfig = AblationConfig(),
                      log=None) -> dict:
    """Train ``variant`` on the synthetic training split and score the held-out split."""
    spec = SyntheticFigureSpec(height=cfg.height, width=cfg.width)
    gcfg, tcfg = build_variant(variant, seed=seed, iterations=cfg.iterations,
                               height=cfg.height, width=cfg.width)
    trainer = Trainer(gcfg, tcfg)
    train = _samples(generate_dataset(spec, cfg.train_pairs, cfg.data_seed), gcfg)
    test = _samples(generate_dataset(spec, cfg.test_pairs, cfg.test_seed), gcfg)
    start = time.perf_counter()
    state = trainer.train(trainer.init_state(), train)
    scores = trainer.evaluate(state.g_params, test)
    scores["seconds"] = time.perf_counter() - start
    if log:
        log(f"{variant} seed={seed} mask_ssim={scores['mask_ssim']:.4f} ssim={scores['ssim']:.4f} "
            f"({scores['seconds']:.0f}s)")
    return scores


def overfit_recon(variant: str, seed: int, cfg: AblationConfig = AblationConfig(), log=None) -> float:
    """L1 reconstruction of one training pair (eval mode) after fitting it alone.

    Both variants are scored with L1 so the numbers are comparable.
    """
    spec = SyntheticFigureSpec(height=cfg.height, width=cfg.width)
    gcfg, tcfg = build_variant(variant, seed=seed, iterations=cfg.overfit_iterations, batch_size=1,
                               recon="l1", height=cfg.height, width=cfg.width)
    trainer = Trainer(gcfg, tcfg)
    sample = _samples(generate_dataset(spec, 1, cfg.data_seed + seed), gcfg)
    state = trainer.train(trainer.init_state(), sample)
    x_hat = trainer.generate(state.g_params, sample)
    value = float(np.abs(x_hat[0].astype(np.float64) - sample[0].x_b).sum())
    if log:
        log(f"overfit {variant} seed={seed} l1={value:.2f}")
    return value
