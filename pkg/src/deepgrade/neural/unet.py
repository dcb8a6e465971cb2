"""Small 3D U-Net with a tanh head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ShapeError, ValidationError
from . import tensor as T


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    levels: int = 2
    base_channels: int = 8
    convs_per_level: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.convs_per_level < 1:
            raise ValidationError(f"invalid UNetConfig {self}")
        if self.kernel % 2 == 0:
            raise ValidationError("kernel side must be odd")

    def channels(self, level):
        return self.base_channels * 2 ** level

    def check_patch(self, patch_dims):
        step = 2 ** (self.levels - 1)
        if any(d % step for d in patch_dims):
            raise ValidationError(f"patch dims {tuple(patch_dims)} not divisible by {step}")

    def to_dict(self):
        return asdict(self)


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class UNet:
    """Encoder/decoder with skip concatenation; output has the input's spatial dims.

    Every conv is followed by ReLU.  Downsampling is 2x max pooling, upsampling
    is nearest-neighbour 2x followed by concatenation with the encoder features
    at that level.  The head is a 1x1x1 convolution and tanh, so outputs lie in
    (-1, 1).
    """

    def __init__(self, config: UNetConfig, seed=0, params=None):
        self.config = config
        if params is not None:
            self.params = {k: T.Tensor(np.array(v, dtype=np.float32), requires_grad=True) for k, v in params.items()}
            missing = set(self._shapes()) - set(self.params)
            if missing:
                raise ValidationError(f"checkpoint lacks parameters {sorted(missing)}")
        else:
            rng = np.random.default_rng(seed)
            self.params = {}
            for name, shape in self._shapes().items():
                if name.endswith(".b"):
                    value = np.zeros(shape, dtype=np.float32)
                else:
                    fan_in = int(np.prod(shape[:-1]))
                    value = he_uniform(rng, shape, fan_in)
                self.params[name] = T.Tensor(value, requires_grad=True)

    def _shapes(self):
        cfg, k = self.config, self.config.kernel
        shapes = {}
        cin = cfg.in_channels
        for level in range(cfg.levels):
            cout = cfg.channels(level)
            for i in range(cfg.convs_per_level):
                shapes[f"enc{level}.{i}.w"] = (k, k, k, cin, cout)
                shapes[f"enc{level}.{i}.b"] = (cout,)
                cin = cout
        for level in range(cfg.levels - 2, -1, -1):
            cout = cfg.channels(level)
            cin = cfg.channels(level + 1) + cout
            for i in range(cfg.convs_per_level):
                shapes[f"dec{level}.{i}.w"] = (k, k, k, cin, cout)
                shapes[f"dec{level}.{i}.b"] = (cout,)
                cin = cout
        shapes["head.w"] = (cfg.channels(0), 1)
        shapes["head.b"] = (1,)
        return shapes

    def arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def forward(self, x):
        """``x``: (batch, X, Y, Z, in_channels) array or Tensor -> Tensor (batch, X, Y, Z, 1)."""
        x = T.as_tensor(x)
        if x.data.ndim != 5 or x.shape[-1] != self.config.in_channels:
            raise ShapeError(f"U-Net input must be (B, X, Y, Z, {self.config.in_channels}), got {x.shape}")
        self.config.check_patch(x.shape[1:4])
        p, cfg = self.params, self.config
        skips = []
        h = x
        for level in range(cfg.levels):
            if level:
                h = T.maxpool2(h)
            for i in range(cfg.convs_per_level):
                h = T.relu(T.conv3d(h, p[f"enc{level}.{i}.w"], p[f"enc{level}.{i}.b"]))
            skips.append(h)
        for level in range(cfg.levels - 2, -1, -1):
            h = T.concat_channels(T.upsample_nn2(h), skips[level])
            for i in range(cfg.convs_per_level):
                h = T.relu(T.conv3d(h, p[f"dec{level}.{i}.w"], p[f"dec{level}.{i}.b"]))
        return T.tanh(T.dense(h, p["head.w"], p["head.b"]))

    def predict(self, x, batch_size=32):
        """Inference without building a graph for the whole batch at once."""
        x = np.asarray(x, dtype=np.float32)
        outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)
