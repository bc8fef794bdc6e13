"""DVNet: a densely connected encoder/decoder for semantic segmentation.

The network is an input convolution, ``len(levels)`` feature-encoding units
(dense block then transition-down), a linking dense block at the coarsest
scale, ``len(levels)`` feature-decoding units (transition-up, long-skip
concatenation, dense block) and a two-convolution output head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import List, Optional

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    spatial_rank: int = 3
    levels: tuple = (4, 6, 8, 10, 12)
    lu_layers: int = 16
    growth_rate: int = 16
    theta_down: float = 0.5
    theta_up: float = 0.3
    input_features: int = 64
    num_classes: int = 3
    in_channels: int = 1
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(n) for n in self.levels))
        self.validate()

    def validate(self) -> None:
        if self.spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if len(self.levels) < 1 or any(n < 1 for n in self.levels):
            raise ValueError(f"levels must be a non-empty list of positive counts, got {self.levels}")
        if self.lu_layers < 1:
            raise ValueError(f"lu_layers must be >= 1, got {self.lu_layers}")
        if self.growth_rate < 1:
            raise ValueError(f"growth_rate must be >= 1, got {self.growth_rate}")
        for name in ("theta_down", "theta_up"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.input_features < 1 or self.in_channels < 1:
            raise ValueError("input_features and in_channels must be positive")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def divisor(self) -> int:
        """Spatial extents must be multiples of this."""
        return 2 ** len(self.levels)

    def with_(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        types = {f: type(v) for f, v in asdict(cls()).items()}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            if types[key] is tuple:
                kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
            else:
                kwargs[key] = types[key](value)
        return cls(**kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


def preset(name: str, spatial_rank: int = 3, **overrides) -> NetworkConfig:
    """Named DVNet variants: ``v1`` (k=8), ``v2`` (theta_down=0.3), ``v3``."""
    table = {
        "v1": dict(theta_down=0.3, theta_up=0.3, growth_rate=8),
        "v2": dict(theta_down=0.3, theta_up=0.3, growth_rate=16),
        "v3": dict(theta_down=0.5, theta_up=0.3, growth_rate=16),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}")
    kwargs = dict(table[name], spatial_rank=spatial_rank)
    if spatial_rank == 2:
        kwargs["in_channels"] = 3
    kwargs.update(overrides)
    return NetworkConfig(**kwargs)


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class PlanRow:
    stage: str
    depth: int
    divisor: int


@dataclass
class LayerPlan:
    rows: List[PlanRow]

    @property
    def depths(self) -> List[int]:
        return [r.depth for r in self.rows]

    @property
    def divisors(self) -> List[int]:
        return [r.divisor for r in self.rows]

    def format(self) -> str:
        width = max(len(r.stage) for r in self.rows)
        out = [f"{'layer'.ljust(width)}  depth  dimension"]
        for r in self.rows:
            dim = "X" if r.divisor == 1 else f"X/{r.divisor}"
            out.append(f"{r.stage.ljust(width)}  {r.depth:5d}  {dim}")
        return "\n".join(out)


def plan_architecture(config: NetworkConfig) -> LayerPlan:
    k = config.growth_rate
    depth = config.input_features
    div = 1
    rows = [PlanRow("input conv", depth, div)]
    skips = []
    for i, n in enumerate(config.levels):
        if i:
            depth = math.floor(config.theta_down * depth)
            div *= 2
        depth += n * k
        skips.append(depth)
        rows.append(PlanRow(("TD + " if i else "") + f"DB({n} BBs)", depth, div))
    depth = math.floor(config.theta_down * depth) + config.lu_layers * k
    div *= 2
    rows.append(PlanRow(f"TD + LU({config.lu_layers} BBs)", depth, div))
    for n, skip in zip(reversed(config.levels), reversed(skips)):
        depth = math.floor(config.theta_up * depth) + skip + n * k
        div //= 2
        rows.append(PlanRow(f"TU + DB({n} BBs)", depth, div))
    rows.append(PlanRow("output conv", config.num_classes, div))
    return LayerPlan(rows)


# ---------------------------------------------------------------------------
# layers


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def parameters(self) -> List[Tensor]:
        out = []
        for value in self.__dict__.values():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def running_stats(self) -> List[RunningStats]:
        out = []
        for value in self.__dict__.values():
            if isinstance(value, RunningStats):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.running_stats())
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.running_stats())
        return out


class Conv(Module):
    def __init__(self, cin, cout, ksize, rank, rng, bias, name, transposed=False, stride=1):
        K = (ksize,) * rank
        kvol = ksize**rank
        shape = (cin, cout) + K if transposed else (cout, cin) + K
        self.weight = Tensor(xavier_uniform(shape, cin * kvol, cout * kvol, rng), True, f"{name}.weight")
        self.bias = Tensor(np.zeros(cout, np.float32), True, f"{name}.bias") if bias else None
        self.transposed = transposed
        self.stride = stride
        self.ksize = ksize

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            pad, opad = T.upsample_padding(self.ksize, self.stride)
            return T.conv_transpose_nd(x, self.weight, self.bias, self.stride, pad, opad)
        return T.conv_nd(x, self.weight, self.bias, 1, self.ksize // 2)


class BNReLU(Module):
    def __init__(self, channels, name):
        self.scale = Tensor(np.ones(channels, np.float32), True, f"{name}.scale")
        self.shift = Tensor(np.zeros(channels, np.float32), True, f"{name}.shift")
        self.stats = RunningStats.zeros(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(T.batch_norm(x, self.scale, self.shift, training, self.stats))


class Bottleneck(Module):
    """BN-ReLU-1x1 conv (4k) then BN-ReLU-3x3 conv (k) then dropout."""

    def __init__(self, cin, k, rank, rng, name):
        self.norm1 = BNReLU(cin, f"{name}.bn1")
        self.conv1 = Conv(cin, 4 * k, 1, rank, rng, False, f"{name}.conv1")
        self.norm2 = BNReLU(4 * k, f"{name}.bn2")
        self.conv2 = Conv(4 * k, k, 3, rank, rng, False, f"{name}.conv2")

    def __call__(self, x, training, rate, rng):
        h = self.conv1(self.norm1(x, training))
        h = self.conv2(self.norm2(h, training))
        return T.dropout(h, rate, rng, training)


class DenseBlock(Module):
    def __init__(self, cin, n_layers, k, rank, rng, name):
        self.layers = [Bottleneck(cin + i * k, k, rank, rng, f"{name}.bb{i}") for i in range(n_layers)]
        self.out_channels = cin + n_layers * k

    def __call__(self, x, training, rate, rng):
        for layer in self.layers:
            x = T.concat_channels(x, layer(x, training, rate, rng))
        return x


def _transition_depth(cin, theta, name):
    out = math.floor(theta * cin)
    if out < 1:
        raise ValueError(f"{name}: floor({theta} * {cin}) leaves no channels")
    return out


class TransitionDown(Module):
    def __init__(self, cin, theta, rank, rng, name):
        self.out_channels = _transition_depth(cin, theta, name)
        self.norm = BNReLU(cin, f"{name}.bn")
        self.conv = Conv(cin, self.out_channels, 1, rank, rng, False, f"{name}.conv")

    def __call__(self, x, training):
        return T.avg_pool_nd(self.conv(self.norm(x, training)), 2, 2)


class TransitionUp(Module):
    def __init__(self, cin, theta, rank, rng, name):
        self.out_channels = _transition_depth(cin, theta, name)
        t = self.out_channels
        self.reduce = Conv(cin, t, 1, rank, rng, True, f"{name}.conv")
        self.up = Conv(t, t, 3, rank, rng, True, f"{name}.upconv", transposed=True, stride=2)

    def __call__(self, x):
        return self.up(self.reduce(x))


# ---------------------------------------------------------------------------
# network


@dataclass
class StageRecord:
    stage: str
    depth: int
    spatial: tuple


class Network(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        r, k = config.spatial_rank, config.growth_rate
        self.input_conv = Conv(config.in_channels, config.input_features, 3, r, rng, True, "input_conv")
        depth = config.input_features
        self.encoder: List[DenseBlock] = []
        self.down: List[TransitionDown] = []
        for i, n in enumerate(config.levels):
            block = DenseBlock(depth, n, k, r, rng, f"enc{i}")
            self.encoder.append(block)
            td = TransitionDown(block.out_channels, config.theta_down, r, rng, f"td{i}")
            self.down.append(td)
            depth = td.out_channels
        self.linking = DenseBlock(depth, config.lu_layers, k, r, rng, "lu")
        depth = self.linking.out_channels
        self.up: List[TransitionUp] = []
        self.decoder: List[DenseBlock] = []
        for j, n in enumerate(reversed(config.levels)):
            i = len(config.levels) - 1 - j
            tu = TransitionUp(depth, config.theta_up, r, rng, f"tu{i}")
            self.up.append(tu)
            block = DenseBlock(tu.out_channels + self.encoder[i].out_channels, n, k, r, rng, f"dec{i}")
            self.decoder.append(block)
            depth = block.out_channels
        self.head_conv = Conv(depth, depth, 3, r, rng, True, "head_conv")
        self.out_conv = Conv(depth, config.num_classes, 1, r, rng, True, "out_conv")
        self.dropout_rng = np.random.default_rng([seed, 1])

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def named_buffers(self):
        """Running batch-norm statistics, keyed like their scale parameters."""
        out = []
        for mod in _walk(self):
            if isinstance(mod, BNReLU):
                stem = mod.scale.name.rsplit(".", 1)[0]
                out.append((stem, mod.stats))
        return out

    def forward(
        self,
        x,
        mode: str = "eval",
        logits: bool = False,
        trace: Optional[list] = None,
    ) -> Tensor:
        """Class probabilities (softmax over channels) for ``x``.

        ``x`` is ``(batch, in_channels, *spatial)``; a bare spatial array is
        promoted to a single-sample, single-channel batch.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.input_conv.weight.dtype))
        cfg = self.config
        if x.ndim == cfg.spatial_rank:
            x = Tensor(x.data[None, None])
        if x.ndim != cfg.spatial_rank + 2:
            raise ValueError(f"expected input of rank {cfg.spatial_rank + 2}, got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        for axis, n in enumerate(x.shape[2:]):
            if n % cfg.divisor:
                raise ValueError(f"spatial axis {axis} extent {n} not divisible by {cfg.divisor}")
        training = mode == "train"
        rate, rng = cfg.dropout_rate, self.dropout_rng

        def note(stage, t):
            if trace is not None:
                trace.append(StageRecord(stage, t.shape[1], t.shape[2:]))

        h = self.input_conv(x)
        note("input conv", h)
        skips = []
        for i, (block, td) in enumerate(zip(self.encoder, self.down)):
            h = block(h, training, rate, rng)
            note(f"enc{i}", h)
            skips.append(h)
            h = td(h, training)
        h = self.linking(h, training, rate, rng)
        note("lu", h)
        for j, (tu, block) in enumerate(zip(self.up, self.decoder)):
            skip = skips[-1 - j]
            h = tu(h)
            if h.shape[2:] != skip.shape[2:]:
                raise RuntimeError(f"long skip extent mismatch {h.shape[2:]} vs {skip.shape[2:]}")
            h = block(T.concat_channels(h, skip), training, rate, rng)
            note(f"dec{len(skips) - 1 - j}", h)
        h = self.out_conv(self.head_conv(h))
        note("output conv", h)
        return h if logits else T.softmax_channels(h)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Eval-mode probabilities as a plain array, without recording a graph."""
        with T.no_grad():
            return self.forward(x, "eval").data

    def cast(self, dtype) -> "Network":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, st in self.named_buffers():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(mod):
    yield mod
    for value in mod.__dict__.values():
        if isinstance(value, Module):
            yield from _walk(value)
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, Module):
                    yield from _walk(item)


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    return Network(config, seed)


def count_parameters(net: Network) -> int:
    return sum(p.size for p in net.parameters())
