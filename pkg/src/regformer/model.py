"""The region transformer restoration network.

Layout follows the U-shaped restoration convention: a 3x3 embedding conv,
three encoder levels with pixel-unshuffle downsampling (channels double per
level), a latent level, three decoder levels with pixel-shuffle upsampling
and skip connections, a refinement stage, and a global residual onto the
input image.

Encoder blocks run with a full (all-ones) mask.  Decoder levels run region
transformer cascades (RTCs): the feature entering a cascade is compared
against a cached shallow feature to split the image into rain and unaffected
regions, and the cascade's two masked blocks attend to those regions
separately before a mask-free block fuses them.

Parameters live in a :class:`~regformer.nn.ParamStore`; model classes are
stateless descriptors that know their parameter paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    narrow,
    pixel_shuffle,
    pixel_unshuffle,
    pixel_unshuffle_raw,
    reshape,
    scale_channels,
    softmax,
    transpose2d,
    l2_normalize_rows,
)

__all__ = [
    "ModelConfig",
    "RegionMask",
    "FeatureCache",
    "Regformer",
    "binary_region_map",
    "generate_region_masks",
    "channel_attention",
    "init_params",
    "param_count",
]

N_LEVELS = 3  # downsampling stages; level 3 is the latent bottleneck


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation switches."""

    base_channels: int = 48
    blocks: tuple[int, int, int, int] = (4, 4, 4, 4)
    heads: tuple[int, int, int, int] = (6, 6, 6, 6)
    mgfb_n: int = 2
    mgfb_kernels: tuple[int, ...] = (3, 5)
    mgfb_expansion: int = 2
    mask_lambda: float = 0.0
    refinement_blocks: int = 1
    rtc_per_decoder_level: int = 1
    use_fg_mask: bool = True
    use_bg_mask: bool = True
    use_mgfb: bool = True
    activation: str = "gelu"

    def channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    def validate(self):
        if self.base_channels < 2 or self.base_channels % 2:
            raise ShapeError("base_channels must be even and >= 2")
        if len(self.blocks) != 4 or len(self.heads) != 4:
            raise ShapeError("blocks and heads must have one entry per level")
        if any(b < 1 for b in self.blocks):
            raise ShapeError("every level needs at least one block")
        if len(self.mgfb_kernels) != self.mgfb_n:
            raise ShapeError("mgfb_kernels length must equal mgfb_n")
        if any(k % 2 == 0 or k < 1 for k in self.mgfb_kernels):
            raise ShapeError("mgfb kernels must be odd")
        if self.mgfb_expansion < 1 or self.mgfb_n < 1:
            raise ShapeError("mgfb_n and mgfb_expansion must be positive")
        if self.refinement_blocks < 0 or self.rtc_per_decoder_level < 1:
            raise ShapeError("invalid refinement/rtc counts")
        if self.activation not in ("gelu", "relu"):
            raise ShapeError(f"unknown activation {self.activation!r}")
        for lvl in range(4):
            ch = self.channels(lvl)
            if ch % self.heads[lvl]:
                raise ShapeError(
                    f"level {lvl} channels {ch} not divisible by heads {self.heads[lvl]}"
                )
            if self.use_mgfb and ch % (self.mgfb_n * self.mgfb_expansion):
                raise ShapeError(
                    f"level {lvl} channels {ch} not divisible by "
                    f"mgfb_n*expansion={self.mgfb_n * self.mgfb_expansion}"
                )
        return self


@dataclass
class RegionMask:
    """A binary spatial map plus a learned per-channel gain.

    ``binary`` is (1, h, w) holding exact 0/1 values and never carries
    gradients; ``gain`` is a length-C vector that stays trainable.  Applying
    the mask multiplies by the binary map (broadcast over channels) and then
    scales each channel by its gain.
    """

    binary: Tensor
    gain: Tensor
    kind: str  # "rain" | "unaffected" | "full"

    @classmethod
    def full(cls, channels: int, h: int, w: int) -> "RegionMask":
        return cls(Tensor(np.ones((1, h, w))), Tensor(np.ones(channels)), "full")

    def apply(self, t: Tensor) -> Tensor:
        return scale_channels(mul(t, self.binary), self.gain)


@dataclass
class FeatureCache:
    """Shallow feature and its shared-weight downsampled versions.

    ``levels[i]`` matches the channel and spatial extents of decoder level
    ``i``; the downsampling reuses the first encoder downsampling weights.
    """

    levels: list[np.ndarray] = field(default_factory=list)


def binary_region_map(reference: np.ndarray, current: np.ndarray, lam: float) -> np.ndarray:
    """Threshold the channel-mean absolute difference of two feature maps.

    Returns a (1, h, w) array of exact 0/1 values: 1 where the difference
    exceeds mean + lam*std of the difference map.  Entirely detached from
    the tape; callers pass raw arrays.
    """
    if reference.shape != current.shape:
        raise ShapeError(
            f"feature shapes differ: {reference.shape} vs {current.shape}"
        )
    diff = np.mean(np.abs(reference - current), axis=0, keepdims=True)
    tau = float(np.mean(diff)) + lam * float(np.std(diff))
    return (diff > tau).astype(np.float64)


def _gain_vector(store: nn.ParamStore, prefix: str, channels: int) -> Tensor:
    """Learned per-channel gain: a 1x1 conv applied to an all-ones map."""
    ones = Tensor(np.ones((channels, 1, 1)))
    g = nn.conv2d(ones, store[f"{prefix}/w"], store[f"{prefix}/b"])
    return reshape(g, (channels,))


def generate_region_masks(
    i_level,
    i_prime,
    store: nn.ParamStore,
    gain_r_prefix: str,
    gain_u_prefix: str,
    lam: float = 0.0,
) -> tuple[RegionMask, RegionMask]:
    """Build the (rain, unaffected) mask pair for one cascade.

    The binary map is thresholded from the cached level feature and the
    feature entering the cascade; its complement defines the unaffected
    mask, so the two binaries always sum to one.  Gradients do not flow
    through the binarization, only through the gains.
    """
    ref = i_level.data if isinstance(i_level, Tensor) else np.asarray(i_level)
    cur = i_prime.data if isinstance(i_prime, Tensor) else np.asarray(i_prime)
    b = binary_region_map(ref, cur, lam)
    c = ref.shape[0]
    rain = RegionMask(Tensor(b), _gain_vector(store, gain_r_prefix, c), "rain")
    unaff = RegionMask(Tensor(1.0 - b), _gain_vector(store, gain_u_prefix, c), "unaffected")
    return rain, unaff


def channel_attention(q2d: Tensor, k2d: Tensor, temperature: Tensor) -> Tensor:
    """Per-head channel-correlation attention matrix.

    Rows of q/k (one per channel, flattened spatial) are L2-normalized, the
    (d x d) score matrix is scaled by the learnable temperature, and softmax
    runs along each row.  Cost is independent of spatial resolution.
    """
    qn = l2_normalize_rows(q2d)
    kn = l2_normalize_rows(k2d)
    scores = mul(matmul(qn, transpose2d(kn)), temperature)
    return softmax(scores, axis=1)


class RegionMaskedAttention:
    """Channel attention with the region mask applied to queries and keys."""

    def __init__(self, prefix: str, channels: int, heads: int):
        self.prefix = prefix
        self.channels = channels
        self.heads = heads

    def param_specs(self):
        c = self.channels
        p = self.prefix
        yield f"{p}/qkv/w", (3 * c, c, 1, 1), "conv"
        yield f"{p}/dw/w", (3 * c, 1, 3, 3), "conv"
        yield f"{p}/dw/b", (3 * c,), "zeros"
        yield f"{p}/temperature", (self.heads,), "ones"
        yield f"{p}/proj/w", (c, c, 1, 1), "conv"
        yield f"{p}/proj/b", (c,), "zeros"

    def forward(self, store: nn.ParamStore, x: Tensor, mask: RegionMask | None) -> Tensor:
        c = self.channels
        h, w = x.shape[1], x.shape[2]
        p = self.prefix
        qkv = nn.conv2d(x, store[f"{p}/qkv/w"])  # bias-free by convention
        qkv = nn.conv2d(qkv, store[f"{p}/dw/w"], store[f"{p}/dw/b"], groups=3 * c)
        q = narrow(qkv, 0, 0, c)
        k = narrow(qkv, 0, c, c)
        v = narrow(qkv, 0, 2 * c, c)
        if mask is not None:
            q = mask.apply(q)
            k = mask.apply(k)
        d = c // self.heads
        s = h * w
        temp = store[f"{p}/temperature"]
        outs = []
        for hd in range(self.heads):
            qh = reshape(narrow(q, 0, hd * d, d), (d, s))
            kh = reshape(narrow(k, 0, hd * d, d), (d, s))
            vh = reshape(narrow(v, 0, hd * d, d), (d, s))
            a = channel_attention(qh, kh, narrow(temp, 0, hd, 1))
            outs.append(matmul(a, vh))
        merged = reshape(concat(outs, 0), (c, h, w))
        return nn.conv2d(merged, store[f"{p}/proj/w"], store[f"{p}/proj/b"])


class MixedGateForwardBlock:
    """Feed-forward block gating parallel depthwise branches of mixed scale.

    The input is expanded, pre-filtered by a 3x3 depthwise conv, split into
    n channel groups, and each group is filtered at its own kernel size with
    a residual.  The first branch passes through the activation and gates
    the others by elementwise product.
    """

    def __init__(self, prefix: str, channels: int, n: int, kernels, expansion: int, act: str):
        self.prefix = prefix
        self.channels = channels
        self.n = n
        self.kernels = tuple(kernels)
        self.hidden = channels * expansion
        self.group = self.hidden // n
        self.act = act

    def param_specs(self):
        c = self.channels
        p = self.prefix
        yield f"{p}/expand/w", (self.hidden, c, 1, 1), "conv"
        yield f"{p}/expand/b", (self.hidden,), "zeros"
        yield f"{p}/dw/w", (self.hidden, 1, 3, 3), "conv"
        yield f"{p}/dw/b", (self.hidden,), "zeros"
        for i, k in enumerate(self.kernels):
            yield f"{p}/branch{i}/w", (self.group, 1, k, k), "conv"
            yield f"{p}/branch{i}/b", (self.group,), "zeros"
        yield f"{p}/proj/w", (c, self.group, 1, 1), "conv"
        yield f"{p}/proj/b", (c,), "zeros"

    def forward(self, store: nn.ParamStore, x: Tensor) -> Tensor:
        p = self.prefix
        m = nn.conv2d(x, store[f"{p}/expand/w"], store[f"{p}/expand/b"])
        m = nn.conv2d(m, store[f"{p}/dw/w"], store[f"{p}/dw/b"], groups=self.hidden)
        act = nn.activation(self.act)
        gate = None
        for i in range(self.n):
            part = narrow(m, 0, i * self.group, self.group)
            branch = add(
                nn.conv2d(
                    part,
                    store[f"{p}/branch{i}/w"],
                    store[f"{p}/branch{i}/b"],
                    groups=self.group,
                ),
                part,
            )
            if i == 0:
                gate = act(branch)
            else:
                gate = mul(gate, branch)
        return nn.conv2d(gate, store[f"{p}/proj/w"], store[f"{p}/proj/b"])


class RegionTransformerBlock:
    """Norm -> masked attention -> norm -> gated feed-forward, both residual."""

    def __init__(self, prefix: str, channels: int, heads: int, config: ModelConfig):
        self.prefix = prefix
        self.channels = channels
        self.use_mgfb = config.use_mgfb
        self.rma = RegionMaskedAttention(f"{prefix}/rma", channels, heads)
        if self.use_mgfb:
            self.mgfb = MixedGateForwardBlock(
                f"{prefix}/mgfb",
                channels,
                config.mgfb_n,
                config.mgfb_kernels,
                config.mgfb_expansion,
                config.activation,
            )

    def param_specs(self):
        c = self.channels
        p = self.prefix
        yield f"{p}/ln1/gamma", (c,), "ones"
        yield f"{p}/ln1/beta", (c,), "zeros"
        yield from self.rma.param_specs()
        if self.use_mgfb:
            yield f"{p}/ln2/gamma", (c,), "ones"
            yield f"{p}/ln2/beta", (c,), "zeros"
            yield from self.mgfb.param_specs()

    def forward(self, store: nn.ParamStore, x: Tensor, mask: RegionMask | None = None) -> Tensor:
        p = self.prefix
        normed = nn.layer_norm(x, store[f"{p}/ln1/gamma"], store[f"{p}/ln1/beta"])
        y = add(x, self.rma.forward(store, normed, mask))
        if self.use_mgfb:
            normed = nn.layer_norm(y, store[f"{p}/ln2/gamma"], store[f"{p}/ln2/beta"])
            y = add(y, self.mgfb.forward(store, normed))
        return y


class RegionTransformerCascade:
    """Three-branch cascade: unaffected-masked, rain-masked, and mask-free.

    The two masked blocks see the same input; their outputs are concatenated
    with the raw input, reduced back to C channels by a 1x1 conv, and passed
    through the mask-free block.  Ablation switches swap either masked
    branch to a full mask.
    """

    def __init__(self, prefix: str, channels: int, heads: int, config: ModelConfig):
        self.prefix = prefix
        self.channels = channels
        self.lam = config.mask_lambda
        self.use_fg = config.use_fg_mask
        self.use_bg = config.use_bg_mask
        self.rtb_u = RegionTransformerBlock(f"{prefix}/rtb_u", channels, heads, config)
        self.rtb_r = RegionTransformerBlock(f"{prefix}/rtb_r", channels, heads, config)
        self.rtb_fuse = RegionTransformerBlock(f"{prefix}/rtb_fuse", channels, heads, config)

    def param_specs(self):
        c = self.channels
        p = self.prefix
        if self.use_fg:
            yield f"{p}/gain_r/w", (c, c, 1, 1), "gain"
            yield f"{p}/gain_r/b", (c,), "zeros"
        if self.use_bg:
            yield f"{p}/gain_u/w", (c, c, 1, 1), "gain"
            yield f"{p}/gain_u/b", (c,), "zeros"
        yield from self.rtb_u.param_specs()
        yield from self.rtb_r.param_specs()
        yield f"{p}/fuse/w", (c, 3 * c, 1, 1), "conv"
        yield f"{p}/fuse/b", (c,), "zeros"
        yield from self.rtb_fuse.param_specs()

    def _masks(self, store, x: Tensor, level_feature: np.ndarray):
        c = self.channels
        h, w = x.shape[1], x.shape[2]
        if not (self.use_fg or self.use_bg):
            full = RegionMask.full(c, h, w)
            return full, full
        b = binary_region_map(level_feature, x.data, self.lam)
        if self.use_fg:
            rain = RegionMask(Tensor(b), _gain_vector(store, f"{self.prefix}/gain_r", c), "rain")
        else:
            rain = RegionMask.full(c, h, w)
        if self.use_bg:
            unaff = RegionMask(
                Tensor(1.0 - b), _gain_vector(store, f"{self.prefix}/gain_u", c), "unaffected"
            )
        else:
            unaff = RegionMask.full(c, h, w)
        return rain, unaff

    def forward(
        self,
        store: nn.ParamStore,
        x: Tensor,
        level_feature: np.ndarray,
        trace: list | None = None,
    ) -> Tensor:
        rain, unaff = self._masks(store, x, level_feature)
        if trace is not None:
            trace.append({"prefix": self.prefix, "rain": rain, "unaffected": unaff})
        u_out = self.rtb_u.forward(store, x, unaff)
        r_out = self.rtb_r.forward(store, x, rain)
        fused = nn.conv2d(
            concat([u_out, r_out, x], 0),
            store[f"{self.prefix}/fuse/w"],
            store[f"{self.prefix}/fuse/b"],
        )
        return self.rtb_fuse.forward(store, fused, None)


class Regformer:
    """Full encoder/decoder network with the global residual."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        c = config.base_channels
        self.encoder: list[list[RegionTransformerBlock]] = []
        for lvl in range(N_LEVELS):
            ch = config.channels(lvl)
            self.encoder.append(
                [
                    RegionTransformerBlock(
                        f"encoder/level{lvl}/rtb{i}", ch, config.heads[lvl], config
                    )
                    for i in range(config.blocks[lvl])
                ]
            )
        latent_ch = config.channels(3)
        self.latent = [
            RegionTransformerBlock(f"latent/rtb{i}", latent_ch, config.heads[3], config)
            for i in range(config.blocks[3])
        ]
        self.decoder: list[list[RegionTransformerCascade]] = []
        for lvl in reversed(range(N_LEVELS)):
            ch = config.channels(lvl)
            self.decoder.append(
                [
                    RegionTransformerCascade(
                        f"decoder/level{lvl}/rtc{i}", ch, config.heads[lvl], config
                    )
                    for i in range(config.rtc_per_decoder_level)
                ]
            )
        self.refinement = [
            RegionTransformerBlock(f"refinement/rtb{i}", c, config.heads[0], config)
            for i in range(config.refinement_blocks)
        ]

    # -- parameter inventory ------------------------------------------------

    def param_specs(self):
        cfg = self.config
        c = cfg.base_channels
        yield "embed/conv/w", (c, 3, 3, 3), "conv"
        yield "embed/conv/b", (c,), "zeros"
        for lvl in range(N_LEVELS):
            ch = cfg.channels(lvl)
            for blk in self.encoder[lvl]:
                yield from blk.param_specs()
            yield f"encoder/down{lvl}/conv/w", (ch // 2, ch, 1, 1), "conv"
            yield f"encoder/down{lvl}/conv/b", (ch // 2,), "zeros"
        for blk in self.latent:
            yield from blk.param_specs()
        for pos, lvl in enumerate(reversed(range(N_LEVELS))):
            ch = cfg.channels(lvl)
            above = cfg.channels(lvl + 1)
            yield f"decoder/level{lvl}/up/conv/w", (2 * above, above, 1, 1), "conv"
            yield f"decoder/level{lvl}/up/conv/b", (2 * above,), "zeros"
            yield f"decoder/level{lvl}/reduce/w", (ch, 2 * ch, 1, 1), "conv"
            yield f"decoder/level{lvl}/reduce/b", (ch,), "zeros"
            for rtc in self.decoder[pos]:
                yield from rtc.param_specs()
        for blk in self.refinement:
            yield from blk.param_specs()
        yield "output/conv/w", (3, c, 3, 3), "conv"
        yield "output/conv/b", (3,), "zeros"

    # -- forward -------------------------------------------------------------

    def _down(self, store, t: Tensor, lvl: int) -> Tensor:
        t = nn.conv2d(t, store[f"encoder/down{lvl}/conv/w"], store[f"encoder/down{lvl}/conv/b"])
        return pixel_unshuffle(t, 2)

    def _up(self, store, t: Tensor, lvl: int) -> Tensor:
        t = nn.conv2d(t, store[f"decoder/level{lvl}/up/conv/w"], store[f"decoder/level{lvl}/up/conv/b"])
        return pixel_shuffle(t, 2)

    def mask_features(self, store: nn.ParamStore, shallow: np.ndarray) -> FeatureCache:
        """Shallow feature downsampled with the shared encoder weights.

        Pure array computation: every consumer sits behind the detached
        binarization, so nothing here needs the tape.
        """
        cache = FeatureCache([shallow])
        a = shallow
        for lvl in range(N_LEVELS - 1):
            a = nn.conv2d_raw(
                a,
                store[f"encoder/down{lvl}/conv/w"].data,
                store[f"encoder/down{lvl}/conv/b"].data,
            )
            a = pixel_unshuffle_raw(a, 2)
            cache.levels.append(a)
        return cache

    def forward(
        self,
        store: nn.ParamStore,
        image: np.ndarray,
        trace: list | None = None,
    ) -> Tensor:
        """Map a (3,H,W) image in [0,1] to its restored version.

        H and W need not be multiples of 8; the input is reflect-padded to
        the next multiple and the output cropped back.
        """
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"expected a (3,H,W) image, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        ph, pw = (-h) % 8, (-w) % 8
        if ph >= h or pw >= w:
            raise ShapeError(f"image {h}x{w} too small to pad to a multiple of 8")
        if ph or pw:
            image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        x = Tensor(np.asarray(image, dtype=np.float64))

        shallow = nn.conv2d(x, store["embed/conv/w"], store["embed/conv/b"])
        cache = self.mask_features(store, shallow.data)

        feat = shallow
        skips = []
        for lvl in range(N_LEVELS):
            for blk in self.encoder[lvl]:
                feat = blk.forward(store, feat, None)
            skips.append(feat)
            feat = self._down(store, feat, lvl)
        for blk in self.latent:
            feat = blk.forward(store, feat, None)
        for pos, lvl in enumerate(reversed(range(N_LEVELS))):
            feat = self._up(store, feat, lvl)
            feat = concat([feat, skips[lvl]], 0)
            feat = nn.conv2d(
                feat, store[f"decoder/level{lvl}/reduce/w"], store[f"decoder/level{lvl}/reduce/b"]
            )
            for rtc in self.decoder[pos]:
                feat = rtc.forward(store, feat, cache.levels[lvl], trace)
        for blk in self.refinement:
            feat = blk.forward(store, feat, None)
        resid = nn.conv2d(feat, store["output/conv/w"], store["output/conv/b"])
        out = add(resid, x)
        if ph or pw:
            out = narrow(narrow(out, 1, 0, h), 2, 0, w)
        return out


def init_params(config: ModelConfig, seed: int) -> nn.ParamStore:
    """Deterministic parameter store for a config.

    Conv weights are uniform(+-1/sqrt(fan_in)), biases and layer-norm betas
    zero, gammas and attention temperatures one.  Gain-source convs start at
    1/C so every initial gain vector is (approximately) all ones.
    """
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    for path, shape, kind in Regformer(config).param_specs():
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            data = nn.uniform_fan_in(rng, shape, fan_in)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "gain":
            data = np.full(shape, 1.0 / shape[1])
        else:  # pragma: no cover
            raise ValueError(f"unknown init kind {kind!r}")
        store.add(path, Tensor(data, requires_grad=True))
    return store


def param_count(config: ModelConfig) -> int:
    """Number of scalars init_params emits; see README for the closed form."""
    total = 0
    for _, shape, _ in Regformer(config).param_specs():
        n = 1
        for s in shape:
            n *= s
        total += n
    return total


def zeroed_params(config: ModelConfig) -> nn.ParamStore:
    """All conv weights/biases zero (norm gammas kept at one).

    With every conv silenced the network is exactly the identity map, which
    is the reference point for the residual-identity checks.
    """
    store = init_params(config, 0)
    for path, t in store.items():
        if path.endswith("/gamma") or path.endswith("/temperature"):
            continue
        t.data = np.zeros_like(t.data)
    return store
