"""Generator, discriminator, adversarial losses and the four ablation variants.

Block lists use the C / CN / CD notation of :func:`deformwarp.layers.block`.
At desk scale every filter count except the 3-channel output and the
1-channel discriminator head is divided by ``channel_divisor``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .layers import Sequential, block
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR, ParamStore
from .pose import NUM_JOINTS
from .warp import WarpPlan, deform, deform_backward

ENCODER = (("CN", 64, 1), ("CN", 128, 2), ("CN", 256, 2), ("CN", 512, 2), ("CN", 512, 2), ("CN", 512, 2))
DECODER = (("CD", 512, 2), ("CD", 512, 2), ("CD", 512, 2), ("CN", 256, 2), ("CN", 128, 2), ("C", 3, 1))
DISCRIMINATOR = (("C", 64, 2), ("C", 128, 2), ("C", 256, 2), ("C", 512, 2), ("C", 1, 2))
EXTRA_BLOCK = ("CN", 512, 2)

SKIP_MODES = ("none", "plain", "deformable")
RECON_KINDS = ("l1", "perceptual", "nn")
VARIANTS = ("baseline", "dsc", "percloss", "full")
SCORE_CLAMP = 1e-7


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 64
    width: int = 32
    encoder: tuple = ENCODER
    decoder: tuple = DECODER
    channel_divisor: int = 8
    extra_block: bool = False
    two_stream: bool = True
    skip: str = "deformable"
    sigma: float = 6.0
    dropout: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.skip not in SKIP_MODES:
            raise InvalidArgumentError(f"skip must be one of {SKIP_MODES}, got {self.skip!r}")
        if self.skip == "deformable" and not self.two_stream:
            raise InvalidArgumentError("deformable skips need the two-stream encoder")
        if self.decoder[-1][1] != 3:
            raise InvalidArgumentError("the last decoder block must output 3 channels")
        down = sum(s == 2 for _, _, s in self.encoder_blocks())
        up = sum(s == 2 for _, _, s in self.decoder_blocks())
        if down != up:
            raise InvalidArgumentError(f"encoder halves {down} times but decoder doubles {up} times")
        if self.height % 2 ** down or self.width % 2 ** down:
            raise InvalidArgumentError(f"image {self.height}x{self.width} not divisible by 2^{down}")

    def encoder_blocks(self) -> list:
        return list(self.encoder) + ([EXTRA_BLOCK] if self.extra_block else [])

    def decoder_blocks(self) -> list:
        return ([EXTRA_BLOCK] if self.extra_block else []) + list(self.decoder)

    def filters(self, m: int) -> int:
        return m if m <= 3 else max(1, m // self.channel_divisor)

    def encoder_sizes(self) -> list[tuple[int, int]]:
        """(height, width) after each encoder block."""
        h, w, out = self.height, self.width, []
        for _, _, s in self.encoder_blocks():
            h, w = h // s, w // s
            out.append((h, w))
        return out

    def skip_sizes(self) -> list[tuple[int, int]]:
        """Resolutions that receive skip connections: every encoder level but the deepest."""
        return self.encoder_sizes()[:-1]

    def input_channels(self) -> tuple[int, int]:
        """Input channels of (stream one, stream two); stream two is 0 when single-stream."""
        if self.two_stream:
            return 3 + NUM_JOINTS, NUM_JOINTS
        return 3 + 2 * NUM_JOINTS, 0


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lam: float = 0.01
    neighborhood: int = 3
    recon: str = "l1"
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    batch_size: int = 4
    seed: int = 0
    freeze_d: bool = False
    feature_channels: int = 16
    feature_seed: int = 1234

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError(f"lambda must be >= 0, got {self.lam}")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise InvalidArgumentError(f"neighbourhood must be odd, got {self.neighborhood}")
        if self.recon not in RECON_KINDS:
            raise InvalidArgumentError(f"recon must be one of {RECON_KINDS}, got {self.recon!r}")
        if self.batch_size < 1 or self.iterations < 0:
            raise InvalidArgumentError("batch_size must be >= 1 and iterations >= 0")


def build_variant(kind: str, **overrides) -> tuple[GeneratorConfig, TrainConfig]:
    """Ablation variants: baseline, dsc, percloss, full.

    Keyword overrides are routed to whichever config owns the field.
    """
    kind = kind.lower()
    if kind not in VARIANTS:
        raise InvalidArgumentError(f"variant must be one of {VARIANTS}, got {kind!r}")
    if kind == "baseline":
        g = GeneratorConfig(two_stream=False, skip="plain")
    else:
        g = GeneratorConfig(two_stream=True, skip="deformable")
    t = TrainConfig(recon={"baseline": "l1", "dsc": "l1", "percloss": "perceptual", "full": "nn"}[kind])
    g_fields = set(GeneratorConfig.__dataclass_fields__)
    t_fields = set(TrainConfig.__dataclass_fields__)
    unknown = set(overrides) - g_fields - t_fields
    if unknown:
        raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
    g = replace(g, **{k: v for k, v in overrides.items() if k in g_fields})
    t = replace(t, **{k: v for k, v in overrides.items() if k in t_fields})
    return g, t


# -- generator --------------------------------------------------------------------

@dataclass
class GeneratorCtx:
    enc1: list
    enc2: list
    dec: list
    feats1: list
    feats2: list
    argmax: list  # per level, per sample
    plans: list
    skip_channels: list = field(default_factory=list)


class Generator:
    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        enc = cfg.encoder_blocks()
        dec = cfg.decoder_blocks()
        self.enc1 = [Sequential(f"enc1/{i}", block(n, cfg.filters(m), s)) for i, (n, m, s) in enumerate(enc)]
        self.enc2 = ([Sequential(f"enc2/{i}", block(n, cfg.filters(m), s)) for i, (n, m, s) in enumerate(enc)]
                     if cfg.two_stream else [])
        self.dec = []
        for i, (n, m, s) in enumerate(dec):
            last = i == len(dec) - 1
            if n == "CD" and not cfg.dropout:
                n = "CN"
            self.dec.append(Sequential(f"dec/{i}", block(n, cfg.filters(m), s, up=True,
                                                         last="tanh" if last else "relu")))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def _skip_width(self, level: int, enc_channels: list) -> int:
        c = enc_channels[level]
        if self.cfg.skip == "none":
            return 0
        return 2 * c if self.cfg.two_stream else c

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng([seed, 7])
        params: dict = {}
        c1, c2 = self.cfg.input_channels()
        enc_channels = []
        for i, seq in enumerate(self.enc1):
            c1 = seq.init(c1, rng, params, self.dtype)
            enc_channels.append(c1)
        for seq in self.enc2:
            c2 = seq.init(c2, rng, params, self.dtype)
        c = enc_channels[-1] + (c2 if self.cfg.two_stream else 0)
        n_levels = len(enc_channels)
        for i, seq in enumerate(self.dec):
            if i > 0:
                c += self._skip_width(n_levels - 1 - i, enc_channels)
            c = seq.init(c, rng, params, self.dtype)
        return ParamStore(params)

    def forward(self, params, x_a, H_a, H_b, plans: Sequence[Sequence[WarpPlan]] | None = None,
                mode: str = "train", rng=None):
        """x_a (b, h, w, 3), H_a / H_b (b, h, w, 18). ``plans[b][level]`` for deformable skips.

        Returns (x_hat, ctx).
        """
        cfg = self.cfg
        b = x_a.shape[0]
        if x_a.shape[1:3] != (cfg.height, cfg.width):
            raise InvalidArgumentError(f"expected {cfg.height}x{cfg.width} images, got {x_a.shape[1:3]}")
        if cfg.skip == "deformable":
            sizes = cfg.skip_sizes()
            if plans is None or len(plans) != b or any(
                    [p.size for p in per] != sizes for per in plans):
                raise InvalidArgumentError(f"deformable skips need per-sample warp plans at {sizes}")
        if cfg.two_stream:
            s1, s2 = np.concatenate([x_a, H_a], axis=3), H_b
        else:
            s1, s2 = np.concatenate([x_a, H_a, H_b], axis=3), None

        enc1, feats1 = [], []
        x = s1
        for seq in self.enc1:
            x, c = seq.forward(params, x, mode, rng)
            enc1.append(c)
            feats1.append(x)
        enc2, feats2 = [], []
        x = s2
        for seq in self.enc2:
            x, c = seq.forward(params, x, mode, rng)
            enc2.append(c)
            feats2.append(x)

        n = len(feats1)
        argmax = [None] * n
        skip_channels = [None] * n
        dec = []
        x = np.concatenate([feats1[-1], feats2[-1]], axis=3) if cfg.two_stream else feats1[-1]
        for i, seq in enumerate(self.dec):
            if i > 0:
                lvl = n - 1 - i
                parts = self._skips(lvl, feats1, feats2, plans, argmax)
                if parts:
                    skip_channels[lvl] = [p.shape[3] for p in parts]
                    x = np.concatenate([x] + parts, axis=3)
            x, c = seq.forward(params, x, mode, rng)
            dec.append(c)
        ctx = GeneratorCtx(enc1, enc2, dec, feats1, feats2, argmax, plans, skip_channels)
        return x, ctx

    def _skips(self, lvl, feats1, feats2, plans, argmax):
        cfg = self.cfg
        if cfg.skip == "none":
            return []
        if not cfg.two_stream:
            return [feats1[lvl]]
        if cfg.skip == "plain":
            return [feats2[lvl], feats1[lvl]]
        F = feats1[lvl]
        warped = np.empty_like(F)
        am = []
        for j in range(F.shape[0]):
            warped[j], idx = deform(F[j], plans[j][lvl])
            am.append(idx)
        argmax[lvl] = am
        return [feats2[lvl], warped]

    def backward(self, ctx: GeneratorCtx, grad) -> dict:
        """Parameter gradients for dL/dx_hat = ``grad``."""
        cfg = self.cfg
        grads: dict = {}
        n = len(ctx.feats1)
        g1 = [np.zeros_like(f) for f in ctx.feats1]
        g2 = [np.zeros_like(f) for f in ctx.feats2]
        g = grad
        for i in range(len(self.dec) - 1, -1, -1):
            g = self.dec[i].backward(ctx.dec[i], g, grads)
            if i > 0:
                lvl = n - 1 - i
                widths = ctx.skip_channels[lvl]
                if widths:
                    head = g.shape[3] - sum(widths)
                    pieces = np.split(g, np.cumsum([head] + widths)[:-1], axis=3)
                    g = pieces[0]
                    self._skips_backward(lvl, pieces[1:], ctx, g1, g2)
        if cfg.two_stream:
            c1 = ctx.feats1[-1].shape[3]
            g1[-1] = g1[-1] + g[..., :c1]
            g2[-1] = g2[-1] + g[..., c1:]
        else:
            g1[-1] = g1[-1] + g
        for stream, gl in ((self.enc1, g1), (self.enc2, g2)):
            if not stream:
                continue
            carry = None
            for lvl in range(len(stream) - 1, -1, -1):
                gin = gl[lvl] if carry is None else gl[lvl] + carry
                carry = stream[lvl].backward((ctx.enc1 if stream is self.enc1 else ctx.enc2)[lvl], gin, grads,
                                             need_input=lvl > 0)
        return grads

    def _skips_backward(self, lvl, pieces, ctx, g1, g2):
        cfg = self.cfg
        if not cfg.two_stream:
            g1[lvl] += pieces[0]
            return
        g2[lvl] += pieces[0]
        if cfg.skip == "plain":
            g1[lvl] += pieces[1]
            return
        F = ctx.feats1[lvl]
        for j in range(F.shape[0]):
            g1[lvl][j] += deform_backward(pieces[1][j], ctx.plans[j][lvl], F[j], ctx.argmax[lvl][j])


# -- discriminator ----------------------------------------------------------------

class Discriminator:
    """Fully convolutional; the sigmoid patch map is averaged into one score per sample."""

    def __init__(self, channel_divisor: int = 8, blocks=DISCRIMINATOR, dtype="float32"):
        self.divisor = channel_divisor
        self.dtype = np.dtype(dtype)
        specs = []
        for i, (n, m, s) in enumerate(blocks):
            last = i == len(blocks) - 1
            specs += block(n, m if m <= 3 else max(1, m // channel_divisor), s,
                           last="sigmoid" if last else "relu")
        self.net = Sequential("disc", specs)
        self.in_channels = 2 * (3 + NUM_JOINTS)

    def init_params(self, seed: int) -> ParamStore:
        params: dict = {}
        self.net.init(self.in_channels, np.random.default_rng([seed, 11]), params, self.dtype)
        return ParamStore(params)

    def forward(self, params, x_a, H_a, y, H_b):
        """Returns (scores (b,), ctx)."""
        shapes = {t.shape[:3] for t in (x_a, H_a, y, H_b)}
        if len(shapes) != 1:
            raise InvalidArgumentError(f"discriminator inputs disagree in shape: {shapes}")
        x = np.concatenate([x_a, H_a, y, H_b], axis=3)
        patches, ctx = self.net.forward(params, x, "eval")
        scores = patches.mean(axis=(1, 2, 3))
        return scores, (ctx, patches.shape)

    def backward(self, ctx, grad_scores, need_input: bool = True):
        """Returns (param grads, grad wrt y or None)."""
        net_ctx, shape = ctx
        npatch = shape[1] * shape[2] * shape[3]
        g = np.broadcast_to((np.asarray(grad_scores) / npatch).reshape(-1, 1, 1, 1), shape).astype(self.dtype)
        grads: dict = {}
        gx = self.net.backward(net_ctx, g, grads, need_input=need_input)
        gy = gx[..., 3 + NUM_JOINTS:6 + NUM_JOINTS] if need_input else None
        return grads, gy

    def patch_shape(self, height: int, width: int) -> tuple[int, int]:
        h, w = height, width
        for spec in self.net.specs:
            if spec.kind == "conv":
                h = (h + 2 - spec.kernel) // spec.stride + 1
                w = (w + 2 - spec.kernel) // spec.stride + 1
        return h, w


# -- losses -------------------------------------------------------------------------

def _clamp(p):
    return min(max(float(p), SCORE_CLAMP), 1.0 - SCORE_CLAMP)


def gan_losses(d_real: float, d_fake: float) -> tuple[float, float]:
    """(discriminator loss, non-saturating generator loss)."""
    r, f = _clamp(d_real), _clamp(d_fake)
    return -math.log(r) - math.log(1.0 - f), -math.log(f)


def gan_loss_grads(d_real: float, d_fake: float) -> tuple[float, float, float]:
    """(dLD/dd_real, dLD/dd_fake, dLG/dd_fake); zero where the score was clamped."""
    r, f = _clamp(d_real), _clamp(d_fake)
    in_r = r == float(d_real)
    in_f = f == float(d_fake)
    return (-1.0 / r if in_r else 0.0), (1.0 / (1.0 - f) if in_f else 0.0), (-1.0 / f if in_f else 0.0)


def objective(loss_g_adv: float, recon: float, lam: float) -> float:
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    return loss_g_adv + lam * recon
