"""Generator (U-Net with a bidirectional-LSTM bottleneck) and pixel-level conditional discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import LSTMParams, Tensor, bilstm_sequence, ops, truncated_normal
from .errors import ShapeError, ValidationError

INIT_STD = 0.02


@dataclass
class GeneratorConfig:
    in_channels: int = 2
    base_channels: int = 8
    pool_depth: int = 4
    num_seg_classes: int = 3
    num_diseases: int = 2
    lstm_hidden: int = 0  # 0: half the flattened bottleneck length
    dropout_p: float = 0.5
    height: int = 32
    width: int = 32
    cls_hidden: int = 64

    def validate(self):
        for name in ("in_channels", "base_channels", "pool_depth", "num_diseases",
                     "height", "width", "cls_hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"generator.{name} must be positive")
        if self.num_seg_classes < 2:
            raise ValidationError("generator.num_seg_classes must be >= 2")
        if self.lstm_hidden < 0:
            raise ValidationError("generator.lstm_hidden must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("generator.dropout_p must be in [0, 1)")
        step = 2 ** self.pool_depth
        for name in ("height", "width"):
            if getattr(self, name) % step:
                raise ValidationError(
                    f"generator.{name}={getattr(self, name)} not divisible by 2**pool_depth={step}")
        return self

    def channels(self, level):
        return self.base_channels * 2 ** level

    @property
    def bottleneck_shape(self):
        step = 2 ** self.pool_depth
        return (self.channels(self.pool_depth - 1), self.height // step, self.width // step)

    @property
    def bottleneck_features(self):
        return int(np.prod(self.bottleneck_shape))

    @property
    def hidden(self):
        return self.lstm_hidden or self.bottleneck_features // 2


@dataclass
class DiscriminatorConfig:
    in_channels: int = 2
    num_seg_classes: int = 3
    base_channels: int = 8
    pool_depth: int = 4
    lstm_hidden: int = 16
    pixel_channels: int = 16
    height: int = 32
    width: int = 32

    def validate(self):
        for name in ("in_channels", "base_channels", "pool_depth", "lstm_hidden",
                     "pixel_channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ValidationError(f"discriminator.{name} must be positive")
        if self.num_seg_classes < 2:
            raise ValidationError("discriminator.num_seg_classes must be >= 2")
        step = 2 ** self.pool_depth
        for name in ("height", "width"):
            if getattr(self, name) % step:
                raise ValidationError(
                    f"discriminator.{name}={getattr(self, name)} not divisible by 2**pool_depth={step}")
        return self

    @property
    def score_map_shape(self):
        """Per-slice score map: one score per pixel."""
        return (self.height, self.width)


class Module:
    """Named parameter container."""

    def __init__(self, rng, dtype):
        self._rng = rng
        self.dtype = np.dtype(dtype)
        self.params = {}

    def _weight(self, name, shape):
        data = truncated_normal(self._rng, shape, INIT_STD).astype(self.dtype)
        self.params[name] = Tensor(data, requires_grad=True, name=name)
        return self.params[name]

    def _const(self, name, shape, value):
        self.params[name] = Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True, name=name)
        return self.params[name]

    def _lstm(self, prefix, features, hidden):
        out = []
        for direction in ("fwd", "bwd"):
            p = LSTMParams(
                self._weight(f"{prefix}.{direction}.w_x", (features, 4 * hidden)),
                self._weight(f"{prefix}.{direction}.w_h", (hidden, 4 * hidden)),
                self._const(f"{prefix}.{direction}.b", (4 * hidden,), 0.0))
            out.append(p)
        return out

    @property
    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise ValidationError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {arr.shape} != {p.shape}", dim=name)
            p.data = arr.astype(self.dtype).copy()

    def set_requires_grad(self, flag):
        for p in self.params.values():
            p.requires_grad = flag


def _as_batched_sequence(x, name, dtype):
    """Return ``(tensor [B,S,C,H,W], single)`` from ``[S,C,H,W]`` or ``[B,S,C,H,W]`` input."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if t.ndim == 4:
        return ops.reshape(t, (1,) + t.shape), True
    if t.ndim == 5:
        return t, False
    raise ShapeError(f"{name}: expected [S,C,H,W] or [B,S,C,H,W], got {t.shape}", dim="rank")


class Generator(Module):
    """U-Net over each slice with a biLSTM across slices at the bottleneck.

    Encoder: one conv per scale then max-pool, plus a bottleneck conv.
    Decoder: stride-2 up-convolution, concatenation with the matching
    encoder feature map, then two convs at the innermost scale and one conv
    elsewhere. A 1x1 head with channel softmax gives segmentation maps; a
    two-layer dense head on the final biLSTM states and pooled deepest
    encoder features gives the disease distribution.
    """

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(rng, dtype)
        self.config = config.validate()
        c, d = config, config.pool_depth
        prev = c.in_channels
        for level in range(d):
            ch = c.channels(level)
            self._weight(f"enc{level}.conv.weight", (ch, prev, 3, 3))
            self._const(f"enc{level}.norm.gamma", (ch,), 1.0)
            self._const(f"enc{level}.norm.beta", (ch,), 0.0)
            prev = ch
        self._weight("bottleneck.conv.weight", (prev, prev, 3, 3))
        self._const("bottleneck.conv.bias", (prev,), 0.0)
        feats, hidden = c.bottleneck_features, c.hidden
        self.lstm_fwd, self.lstm_bwd = self._lstm("lstm", feats, hidden)
        if 2 * hidden != feats:
            self._weight("lstm.proj.weight", (2 * hidden, feats))
            self._const("lstm.proj.bias", (feats,), 0.0)
        for level in reversed(range(d)):
            ch = c.channels(level)
            up_in = prev
            self._weight(f"dec{level}.up.weight", (up_in, ch, 2, 2))
            for j in range(self.decoder_convs(level)):
                self._weight(f"dec{level}.conv{j}.weight", (ch, 2 * ch if j == 0 else ch, 3, 3))
                self._const(f"dec{level}.norm{j}.gamma", (ch,), 1.0)
                self._const(f"dec{level}.norm{j}.beta", (ch,), 0.0)
            prev = ch
        self._weight("head.weight", (c.num_seg_classes, prev, 1, 1))
        self._const("head.bias", (c.num_seg_classes,), 0.0)
        cls_in = 2 * hidden + c.channels(d - 1)
        self._weight("cls.fc1.weight", (cls_in, c.cls_hidden))
        self._const("cls.fc1.bias", (c.cls_hidden,), 0.0)
        self._weight("cls.fc2.weight", (c.cls_hidden, c.num_diseases))
        self._const("cls.fc2.bias", (c.num_diseases,), 0.0)

    def decoder_convs(self, level):
        return 2 if level == self.config.pool_depth - 1 else 1

    @property
    def conv_layer_count(self):
        """3x3 convolutions on the encoder/decoder path (heads and up-convolutions excluded)."""
        d = self.config.pool_depth
        return d + 1 + sum(self.decoder_convs(level) for level in range(d))

    def forward(self, x, train=False, rng=None):
        """Segment every slice and classify the patient.

        ``x`` is ``[S, C, H, W]`` or a batch ``[B, S, C, H, W]``. Returns
        ``(seg_probs, disease_probs)`` shaped ``[(B,) S, K, H, W]`` and
        ``[(B,) D]``. Dropout in the two innermost decoder blocks is active
        only when ``train`` is true.
        """
        c, p = self.config, self.params
        x, single = _as_batched_sequence(x, "generator", self.dtype)
        B, S, C, H, W = x.shape
        if S == 0:
            raise ShapeError("generator: empty slice sequence", dim="S")
        if C != c.in_channels:
            raise ShapeError(f"generator: {C} input channels, config expects {c.in_channels}", dim="C")
        if (H, W) != (c.height, c.width):
            raise ShapeError(f"generator: input {H}x{W}, config expects {c.height}x{c.width}", dim="H,W")
        h = ops.reshape(x, (B * S, C, H, W))
        skips = []
        for level in range(c.pool_depth):
            h = ops.conv2d(h, p[f"enc{level}.conv.weight"])
            h = ops.relu(ops.instance_norm(h, p[f"enc{level}.norm.gamma"], p[f"enc{level}.norm.beta"]))
            skips.append(h)
            h = ops.maxpool2d(h)
        h = ops.relu(ops.conv2d(h, p["bottleneck.conv.weight"], p["bottleneck.conv.bias"]))
        shape = h.shape
        seq = bilstm_sequence(ops.reshape(h, (B, S, -1)), self.lstm_fwd, self.lstm_bwd)
        mixed = seq
        if "lstm.proj.weight" in p:
            mixed = ops.dense(seq, p["lstm.proj.weight"], p["lstm.proj.bias"])
        h = ops.reshape(mixed, shape)
        for level in reversed(range(c.pool_depth)):
            h = ops.upconv2d(h, p[f"dec{level}.up.weight"])
            h = ops.concat_channel([h, skips[level]])
            for j in range(self.decoder_convs(level)):
                h = ops.conv2d(h, p[f"dec{level}.conv{j}.weight"])
                h = ops.relu(ops.instance_norm(h, p[f"dec{level}.norm{j}.gamma"], p[f"dec{level}.norm{j}.beta"]))
            if level >= c.pool_depth - 2:
                h = ops.dropout(h, c.dropout_p, train, rng)
        logits = ops.conv2d(h, p["head.weight"], p["head.bias"])
        seg = ops.reshape(ops.softmax_channel(logits), (B, S, c.num_seg_classes, H, W))

        hidden = c.hidden
        deep = ops.reshape(ops.global_avg_pool(skips[-1]), (B, S, -1))
        features = ops.concat([seq[:, S - 1, :hidden], seq[:, 0, hidden:], ops.mean(deep, axis=1)], axis=-1)
        z = ops.leaky_relu(ops.dense(features, p["cls.fc1.weight"], p["cls.fc1.bias"]))
        disease = ops.softmax(ops.dense(z, p["cls.fc2.weight"], p["cls.fc2.bias"]), axis=-1)
        if single:
            return seg[0], disease[0]
        return seg, disease

    __call__ = forward

    def predict_patient(self, volume):
        """Inference on one ``[S, C, H, W]`` array; returns numpy ``(seg_probs, disease_probs)``."""
        seg, disease = self.forward(volume, train=False)
        return seg.data, disease.data


class Discriminator(Module):
    """Judges every pixel of a (slices, segmentation) pair as real or generated.

    A per-pixel path of 1x1 convolutions keeps full resolution. A parallel
    context path (five 3x3 convs, four max-pools, then a biLSTM across
    slices) summarises each slice; its output is tiled over the pixel grid
    and joined to the per-pixel features before the sigmoid head.
    """

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(rng, dtype)
        self.config = config.validate()
        c = config
        cin = c.in_channels + c.num_seg_classes
        prev = cin
        for level in range(c.pool_depth + 1):
            ch = c.base_channels * 2 ** min(level, c.pool_depth - 1)
            self._weight(f"ctx{level}.weight", (ch, prev, 3, 3))
            self._const(f"ctx{level}.bias", (ch,), 0.0)
            prev = ch
        step = 2 ** c.pool_depth
        feats = prev * (c.height // step) * (c.width // step)
        self.lstm_fwd, self.lstm_bwd = self._lstm("lstm", feats, c.lstm_hidden)
        self._weight("ctx_proj.weight", (2 * c.lstm_hidden, c.pixel_channels))
        self._const("ctx_proj.bias", (c.pixel_channels,), 0.0)
        pc = c.pixel_channels
        self._weight("pix0.weight", (pc, cin, 1, 1))
        self._const("pix0.bias", (pc,), 0.0)
        self._weight("pix1.weight", (pc, 2 * pc, 1, 1))
        self._const("pix1.bias", (pc,), 0.0)
        self._weight("out.weight", (1, pc, 1, 1))
        self._const("out.bias", (1,), 0.0)

    @property
    def conv_layer_count(self):
        return self.config.pool_depth + 1

    def forward(self, x, y):
        """Score maps ``[(B,) S, H, W]`` in (0, 1) for images ``x`` and segmentations ``y``.

        ``y`` holds class probabilities (generated) or one-hot ground truth,
        shaped like ``x`` with ``num_seg_classes`` channels.
        """
        c, p = self.config, self.params
        x, single = _as_batched_sequence(x, "discriminator", self.dtype)
        y, single_y = _as_batched_sequence(y, "discriminator", self.dtype)
        if single != single_y:
            raise ShapeError("discriminator: image and segmentation batch layouts differ", dim="B")
        B, S, C, H, W = x.shape
        if y.shape[:2] != (B, S) or y.shape[3:] != (H, W):
            raise ShapeError(f"discriminator: image {x.shape} and segmentation {y.shape} not aligned", dim="S,H,W")
        if C != c.in_channels or y.shape[2] != c.num_seg_classes:
            raise ShapeError(
                f"discriminator: channels {C}+{y.shape[2]}, config expects {c.in_channels}+{c.num_seg_classes}", dim="C")
        if (H, W) != (c.height, c.width):
            raise ShapeError(f"discriminator: input {H}x{W}, config expects {c.height}x{c.width}", dim="H,W")
        joint = ops.concat_channel([ops.reshape(x, (B * S, C, H, W)),
                                    ops.reshape(y, (B * S, c.num_seg_classes, H, W))])
        h = joint
        for level in range(c.pool_depth):
            h = ops.maxpool2d(ops.leaky_relu(ops.conv2d(h, p[f"ctx{level}.weight"], p[f"ctx{level}.bias"])))
        last = c.pool_depth
        h = ops.leaky_relu(ops.conv2d(h, p[f"ctx{last}.weight"], p[f"ctx{last}.bias"]))
        seq = bilstm_sequence(ops.reshape(h, (B, S, -1)), self.lstm_fwd, self.lstm_bwd)
        ctx = ops.dense(ops.reshape(seq, (B * S, -1)), p["ctx_proj.weight"], p["ctx_proj.bias"])
        ctx_map = ops.broadcast_spatial(ctx, H, W)
        pix = ops.leaky_relu(ops.conv2d(joint, p["pix0.weight"], p["pix0.bias"]))
        pix = ops.leaky_relu(ops.conv2d(ops.concat_channel([pix, ctx_map]), p["pix1.weight"], p["pix1.bias"]))
        score = ops.sigmoid(ops.conv2d(pix, p["out.weight"], p["out.bias"]))
        score = ops.reshape(score, (B, S, H, W))
        return score[0] if single else score

    __call__ = forward


def build_generator(config, seed=0, dtype=np.float32):
    return Generator(config, np.random.default_rng(seed), dtype)


def build_discriminator(config, seed=0, dtype=np.float32):
    return Discriminator(config, np.random.default_rng(seed), dtype)


def matching_discriminator_config(gen_config, **overrides):
    """Discriminator config sharing the generator's input geometry."""
    base = dict(in_channels=gen_config.in_channels, num_seg_classes=gen_config.num_seg_classes,
                height=gen_config.height, width=gen_config.width, pool_depth=gen_config.pool_depth)
    base.update(overrides)
    return DiscriminatorConfig(**base)


def config_dict(config):
    return asdict(config)
