"""Two-stage depth completion network: pre-filling autoencoder followed by a
dual-branch (depth + colour) gated UNet, with the ablation schemes A-G."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .nn import (
    AGGConv,
    AGSC,
    Conv,
    DeGConv,
    GConv,
    Module,
    VConv,
    VDeconv,
    dumps_params,
    loads_params,
)
from .rng import SplitMix64
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Scheme:
    fusion: str  # "none" | "concat" | "guided"
    prefill: bool
    gconv: bool
    ag_gconv: bool
    ag_sc: bool


SCHEMES = {
    "A": Scheme("none", True, False, False, False),
    "B": Scheme("concat", True, False, False, False),
    "C": Scheme("concat", True, True, False, False),
    "D": Scheme("guided", True, False, True, False),
    "E": Scheme("concat", True, True, False, True),
    "F": Scheme("guided", False, False, True, True),
    "G": Scheme("guided", True, False, True, True),
}

PREFILL_KERNEL = 7
PREFILL_EPS = 1e-3  # metres; floor for pre-filled values
HEAD_BIAS = 0.3  # x max_depth: initial prediction inside the depth range
HEAD_WEIGHT_SCALE = 0.1  # small output heads start close to the bias


@dataclass
class ModelConfig:
    m: int = 4
    k: int = 3
    r: int = 4
    c0: int = 8
    height: int = 64
    width: int = 64
    scheme: str = "G"
    lambda_delta: float = 0.7
    lambda_p: float = 0.3
    huber_delta: float = 1.0
    max_depth: float = 10.0
    prefill_channels: int = 8
    slope: float = 0.2
    dtype: str = "float32"
    init_seed: int = 0

    def validate(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unsupported scheme {self.scheme!r}; expected one of {''.join(SCHEMES)}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.k}")
        if self.r < 1 or self.c0 < 1 or self.prefill_channels < 1:
            raise ConfigError("r, c0 and prefill_channels must be positive")
        div = 2**self.m
        if self.height % div or self.width % div:
            raise ConfigError(
                f"input {self.height}x{self.width} not divisible by 2^m = {div}"
            )
        if self.uses_prefill and (self.height % 4 or self.width % 4):
            raise ConfigError("pre-filling needs dims divisible by 4")
        if self.lambda_delta < 0 or self.lambda_p < 0 or self.lambda_delta + self.lambda_p <= 0:
            raise ConfigError("loss weights must be non-negative with a positive sum")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        return self

    @property
    def flags(self):
        return SCHEMES[self.scheme]

    @property
    def uses_prefill(self):
        return SCHEMES[self.scheme].prefill if self.scheme in SCHEMES else True

    def channels(self, level):
        """Depth channels after encoder level ``level`` (1-based)."""
        return self.c0 * 2 ** (level - 1)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class DepthImage:
    values: np.ndarray  # (H, W) metres, 0 where invalid
    valid_mask: np.ndarray  # (H, W) bool

    @classmethod
    def from_raw(cls, raw):
        raw = np.asarray(raw)
        return cls(raw, raw > 0)


def _output_head(rng, c_in, dtype):
    head = Conv(rng, c_in, 1, 1, 1, bias=True, dtype=dtype)
    head.weight.data *= head.weight.dtype.type(HEAD_WEIGHT_SCALE)
    head.bias.data[...] = HEAD_BIAS
    return head


class PreFill(Module):
    """Light autoencoder: two stride-2 convs down, two stride-2 deconvs up."""

    def __init__(self, rng, channels, slope, max_depth, dtype):
        super().__init__()
        k = PREFILL_KERNEL
        c = channels
        self.max_depth = max_depth
        self.down1 = VConv(rng, 4, c, k, 2, slope, dtype)
        self.down2 = VConv(rng, c, 2 * c, k, 2, slope, dtype)
        self.up1 = VDeconv(rng, 2 * c, c, k, 2, slope, dtype)
        self.up2 = VDeconv(rng, c, c, k, 2, slope, dtype)
        self.head = _output_head(rng, c, dtype)
        self.slope = slope

    def __call__(self, raw, rgb, valid):
        """raw (n,1,H,W) metres, rgb (n,3,H,W); returns composite in metres."""
        x = T.concat_channels([T.scale(raw, 1.0 / self.max_depth), rgb])
        y = self.up2(self.up1(self.down2(self.down1(x))))
        dense = T.scale(T.leaky_relu(self.head(y), self.slope), self.max_depth)
        dense = T.clamp_min(dense, PREFILL_EPS)
        return T.where(valid, raw, dense)


class EncoderLevel(Module):
    def __init__(self, rng, cfg, level):
        super().__init__()
        flags = cfg.flags
        c_in = 1 if level == 1 else cfg.channels(level - 1)
        c_out = cfg.channels(level)
        k, s = cfg.k, cfg.slope
        dt = np.dtype(cfg.dtype)
        self.mode = "guided" if flags.ag_gconv else ("gated" if flags.gconv else "vanilla")
        if flags.ag_gconv:
            hw = (cfg.height >> level, cfg.width >> level)
            self.agg = AGGConv(rng, c_in, c_out, hw, k, cfg.r, s, dt)
        elif flags.gconv:
            self.down1 = GConv(rng, c_in, c_out, k, 1, s, dt)
            self.down2 = GConv(rng, c_out, c_out, k, 2, s, dt)
        else:
            self.down1 = VConv(rng, c_in, c_out, k, 1, s, dt)
            self.down2 = VConv(rng, c_out, c_out, k, 2, s, dt)
        self.concat = flags.fusion == "concat"
        if self.concat:
            self.fuse = VConv(rng, 2 * c_out, c_out, 1, 1, s, dt)

    def __call__(self, x, color):
        if self.mode == "guided":
            return self.agg(x, color)
        d = self.down2(self.down1(x))
        if self.concat:
            d = self.fuse(T.concat_channels([d, color]))
        return d


class DecoderLevel(Module):
    def __init__(self, rng, cfg, level):
        super().__init__()
        flags = cfg.flags
        c = cfg.channels(level)
        c_out = cfg.channels(level - 1) if level > 1 else cfg.c0
        dt = np.dtype(cfg.dtype)
        # colour enters the decoder as AG-SC output, as a raw skip (concat
        # fusion without AG-SC), or not at all
        if flags.ag_sc:
            self.color_mode = "agsc"
            self.agsc = AGSC(rng, c, cfg.k, cfg.slope, dt)
        elif flags.fusion == "concat":
            self.color_mode = "raw"
        else:
            self.color_mode = "none"
        c_in = 3 * c if self.color_mode != "none" else 2 * c
        if flags.fusion == "none" or (flags.fusion == "concat" and not flags.gconv):
            self.up = VDeconv(rng, c_in, c_out, cfg.k, 2, cfg.slope, dt)
        else:
            self.up = DeGConv(rng, c_in, c_out, cfg.k, 2, cfg.slope, dt)

    def __call__(self, r_d, f_d, f_c):
        parts = [r_d, f_d]
        if self.color_mode == "agsc":
            parts.append(self.agsc(f_c, r_d))
        elif self.color_mode == "raw":
            parts.append(f_c)
        return self.up(T.concat_channels(parts))


class AGGNet(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng or SplitMix64(cfg.init_seed)
        dt = np.dtype(cfg.dtype)
        flags = cfg.flags
        if flags.prefill:
            self.prefill = PreFill(rng.spawn("prefill"), cfg.prefill_channels, cfg.slope,
                                   cfg.max_depth, dt)
        self.use_color = flags.fusion != "none"
        self.color = Module()
        self.enc = Module()
        self.dec = Module()
        for level in range(1, cfg.m + 1):
            if self.use_color:
                c_in = 3 if level == 1 else cfg.channels(level - 1)
                self.color.add_module(str(level), VConv(rng.spawn("color", level), c_in,
                                                        cfg.channels(level), cfg.k, 2, cfg.slope, dt))
            self.enc.add_module(str(level), EncoderLevel(rng.spawn("enc", level), cfg, level))
            self.dec.add_module(str(level), DecoderLevel(rng.spawn("dec", level), cfg, level))
        cm = cfg.channels(cfg.m)
        brng = rng.spawn("bottleneck")
        self.bottleneck = Module()
        if flags.gconv:
            self.bottleneck.add_module("0", GConv(brng, cm, cm, cfg.k, 1, cfg.slope, dt))
        else:
            self.bottleneck.add_module("0", VConv(brng, cm, cm, cfg.k, 1, cfg.slope, dt))
            self.bottleneck.add_module("1", VConv(brng, cm, cm, cfg.k, 1, cfg.slope, dt))
        self.head = _output_head(rng.spawn("head"), cfg.c0, dt)

    # -- stages -----------------------------------------------------------

    def _as_inputs(self, raw, rgb):
        dt = np.dtype(self.cfg.dtype)
        raw = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=dt)
        if raw.ndim == 2:
            raw = raw[None]
        if raw.ndim == 3:
            raw = raw[:, None]
        rgb = np.asarray(rgb.data if isinstance(rgb, Tensor) else rgb, dtype=dt)
        if rgb.ndim == 3:
            rgb = rgb[None]
        h, w = raw.shape[2:]
        if (h, w) != (self.cfg.height, self.cfg.width) or rgb.shape[2:] != (h, w):
            raise T.ShapeError(
                f"inputs {raw.shape}/{rgb.shape} do not match configured "
                f"{self.cfg.height}x{self.cfg.width}"
            )
        return raw, rgb

    def prefill_depth(self, raw, rgb):
        """Pre-fill stage only; returns (n,1,H,W) metres with valid pixels untouched."""
        raw, rgb = self._as_inputs(raw, rgb)
        if not self.cfg.flags.prefill:
            return Tensor(raw)
        return self.prefill(Tensor(raw), Tensor(rgb), raw > 0)

    def color_features(self, rgb):
        feats = []
        x = rgb
        for level in range(1, self.cfg.m + 1):
            x = self.color._children[str(level)](x)
            feats.append(x)
        return feats

    def encode(self, depth, rgb):
        """depth (n,1,H,W) metres -> (bottleneck, depth skips, colour skips)."""
        if isinstance(rgb, np.ndarray):
            rgb = Tensor(rgb)
        x = T.scale(depth, 1.0 / self.cfg.max_depth)
        color_skips = self.color_features(rgb) if self.use_color else [None] * self.cfg.m
        depth_skips = []
        for level in range(1, self.cfg.m + 1):
            x = self.enc._children[str(level)](x, color_skips[level - 1])
            depth_skips.append(x)
        b = x
        for block in self.bottleneck._children.values():
            b = block(b)
        return b, depth_skips, color_skips

    def decode(self, bottleneck, depth_skips, color_skips):
        if len(depth_skips) != self.cfg.m or len(color_skips) != self.cfg.m:
            raise T.ShapeError(f"expected {self.cfg.m} skips per branch")
        r = bottleneck
        for level in range(self.cfg.m, 0, -1):
            f_d = depth_skips[level - 1]
            if r.shape != f_d.shape:
                raise T.ShapeError(f"decoder level {level}: {r.shape} vs skip {f_d.shape}")
            r = self.dec._children[str(level)](r, f_d, color_skips[level - 1])
        out = T.leaky_relu(self.head(r), self.cfg.slope)
        return T.scale(T.clamp_min(out, 0.0), self.cfg.max_depth)

    def __call__(self, raw, rgb):
        """Complete raw depth (n,H,W) metres given rgb (n,3,H,W); returns (n,1,H,W)."""
        raw, rgb = self._as_inputs(raw, rgb)
        rgb_t = Tensor(rgb)
        if self.cfg.flags.prefill:
            depth = self.prefill(Tensor(raw), rgb_t, raw > 0)
        else:
            depth = Tensor(raw)
        return self.decode(*self.encode(depth, rgb_t))

    forward = __call__

    def predict(self, raw, rgb):
        with T.no_grad():
            return self(raw, rgb).data[:, 0]


# --------------------------------------------------------------------------
# checkpoints


def dumps_checkpoint(model: AGGNet):
    header = model.cfg.to_json().encode("utf-8") + b"\n"
    return header + dumps_params(model.state_dict())


def loads_checkpoint(buf):
    nl = buf.index(b"\n")
    cfg = ModelConfig.from_dict(json.loads(buf[:nl].decode("utf-8")))
    state, _ = loads_params(buf, nl + 1)
    model = AGGNet(cfg)
    model.load_state_dict(state)
    return model


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
