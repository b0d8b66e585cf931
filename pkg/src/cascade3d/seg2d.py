"""Dual-head 2D segmenter over the fused RGB-D + 3D feature image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IGNORE
from .nncore import (Conv2d, Dropout, Module, cross_entropy, relu, relu_backward, softmax, upsample,
                     upsample_backward)

MAIN, AUX, ENSEMBLE = "main", "aux", "ensemble"
AUX_WEIGHT = 0.4


@dataclass
class HeadPolicy:
    train_source: str = AUX
    test_source: str = ENSEMBLE

    def __post_init__(self):
        if self.train_source not in (MAIN, AUX):
            raise ValueError(f"train-time fusion source must be main or aux, got {self.train_source!r}")
        if self.test_source not in (MAIN, AUX, ENSEMBLE):
            raise ValueError(f"unknown test-time fusion source {self.test_source!r}")


@dataclass
class SegConfig:
    n_classes: int = 3  # object classes; the net predicts n_classes + 1 (background last)
    widths: tuple = (16, 32, 32, 64)
    decoder_width: int = 32
    dropout: float = 0.1
    depth_scale: float = 10.0

    @property
    def in_channels(self) -> int:
        return self.n_classes + 13

    @property
    def out_channels(self) -> int:
        return self.n_classes + 1


class SegNet(Module):
    """Four-layer conv trunk (two stride-2 stages) with two heads.

    The aux head is a single 1x1 projection of the layer-2 features at 1/2
    resolution; the main head fuses layer-4 features (1/4 resolution) with
    full-resolution layer-1 features through an extra 3x3 conv.
    """

    def __init__(self, cfg: SegConfig, rng: np.random.Generator, name: str = "seg"):
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.widths
        k = cfg.out_channels
        self.conv1 = Conv2d(cfg.in_channels, w1, rng, f"{name}.conv1")
        self.conv2 = Conv2d(w1, w2, rng, f"{name}.conv2", stride=2)
        self.conv3 = Conv2d(w2, w3, rng, f"{name}.conv3", stride=2)
        self.conv4 = Conv2d(w3, w4, rng, f"{name}.conv4")
        self.aux_cls = Conv2d(w2, k, rng, f"{name}.aux_cls", kernel=1)
        self.dec_reduce = Conv2d(w4, cfg.decoder_width, rng, f"{name}.dec_reduce", kernel=1)
        self.dec_fuse = Conv2d(cfg.decoder_width + w1, cfg.decoder_width, rng, f"{name}.dec_fuse")
        self.main_cls = Conv2d(cfg.decoder_width, k, rng, f"{name}.main_cls", kernel=1)
        self.drop = Dropout(cfg.dropout)

    def aux_parameter_count(self) -> int:
        return sum(p.value.size for p in self.aux_cls.parameters())

    def main_parameter_count(self) -> int:
        return sum(p.value.size for m in (self.conv3, self.conv4, self.dec_reduce, self.dec_fuse, self.main_cls)
                   for p in m.parameters())

    def normalise(self, channels):
        x = np.array(channels, dtype=float)
        x[..., :3] -= 0.5
        x[..., 3] = np.nan_to_num(x[..., 3]) / self.cfg.depth_scale
        return x

    def forward(self, channels, train: bool = False, rng=None):
        """Returns ``(main_logits, aux_logits, cache)`` at input resolution."""
        if channels.shape[-1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {channels.shape[-1]}")
        h, w = channels.shape[:2]
        x = self.normalise(channels)
        a1, c1 = self.conv1.forward(x)
        r1, m1 = relu(a1)
        a2, c2 = self.conv2.forward(r1)
        r2, m2 = relu(a2)
        a3, c3 = self.conv3.forward(r2)
        r3, m3 = relu(a3)
        a4, c4 = self.conv4.forward(r3)
        r4, m4 = relu(a4)

        d_aux, k_aux = self.drop.forward(r2, train, rng)
        aux_lo, c_aux = self.aux_cls.forward(d_aux)
        aux, u_aux = upsample(aux_lo, h, w)

        red, c_red = self.dec_reduce.forward(r4)
        red_r, m_red = relu(red)
        up, u_main = upsample(red_r, h, w)
        cat = np.concatenate([up, r1], axis=-1)
        fz, c_fuse = self.dec_fuse.forward(cat)
        fz_r, m_fuse = relu(fz)
        d_main, k_main = self.drop.forward(fz_r, train, rng)
        main, c_main = self.main_cls.forward(d_main)
        cache = (c1, m1, c2, m2, c3, m3, c4, m4, k_aux, c_aux, u_aux, c_red, m_red, u_main, c_fuse, m_fuse,
                 k_main, c_main)
        return main, aux, cache

    def backward(self, d_main, d_aux, cache):
        """Accumulates parameter grads; returns the gradient w.r.t. the raw
        fusion channels."""
        (c1, m1, c2, m2, c3, m3, c4, m4, k_aux, c_aux, u_aux, c_red, m_red, u_main, c_fuse, m_fuse,
         k_main, c_main) = cache
        w1 = self.cfg.widths[0]
        g = self.main_cls.backward(d_main, c_main)
        g = self.drop.backward(g, k_main)
        g = self.dec_fuse.backward(relu_backward(g, m_fuse), c_fuse)
        d_up, d_r1 = g[..., :-w1], g[..., -w1:]
        g = upsample_backward(d_up, u_main)
        d_r4 = self.dec_reduce.backward(relu_backward(g, m_red), c_red)
        d_r3 = self.conv4.backward(relu_backward(d_r4, m4), c4)
        d_r2 = self.conv3.backward(relu_backward(d_r3, m3), c3)

        g = upsample_backward(d_aux, u_aux)
        g = self.aux_cls.backward(g, c_aux)
        d_r2 = d_r2 + self.drop.backward(g, k_aux)

        d_r1 = d_r1 + self.conv2.backward(relu_backward(d_r2, m2), c2)
        dx = self.conv1.backward(relu_backward(d_r1, m1), c1)
        dx[..., 3] /= self.cfg.depth_scale
        return dx


def seg_forward(net: SegNet, fusion_channels, train: bool = False, rng=None):
    """Class-probability maps ``(main, aux)``, each H x W x (C + 1)."""
    main, aux, _ = net.forward(fusion_channels, train, rng)
    return softmax(main), softmax(aux)


def seg_loss(main_logits, aux_logits, labels, aux_weight: float = AUX_WEIGHT):
    """Pixel-mean CE of the main head plus ``aux_weight`` times the aux CE.

    IGNORE pixels are excluded from both the mean and the gradient.
    Returns ``(total, parts, d_main, d_aux)``.
    """
    lm, gm = cross_entropy(main_logits, labels, ignore_index=IGNORE)
    la, ga = cross_entropy(aux_logits, labels, ignore_index=IGNORE)
    return lm + aux_weight * la, {"main": lm, "aux": la}, gm, aux_weight * ga


def ensemble(main_probs, aux_probs):
    p = 0.5 * (main_probs + aux_probs)
    return p / p.sum(axis=-1, keepdims=True)


def select_fusion_output(main_probs, aux_probs, policy: HeadPolicy, phase: str):
    """Map fused into 3D: the train source while training, else the test source."""
    if phase == "train":
        source = policy.train_source
    elif phase == "test":
        source = policy.test_source
    else:
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
    if source == MAIN:
        return main_probs
    if source == AUX:
        return aux_probs
    return ensemble(main_probs, aux_probs)
