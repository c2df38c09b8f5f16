"""Segmentation network: SE-residual conv blocks joined by strided 2x2 convolutions."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import N_LABELS, CribriformError, ShapeMismatch
from .layers import BatchNorm, Conv2D, Layer, ReLU, Residual, SEBlock, Sequential, Softmax


class NumericalInstability(CribriformError, FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyper-parameters.

    ``downsample[i]`` is the number of stride-2 2x2 convolutions between
    block ``i`` and block ``i + 1``; by default one per transition, so six
    blocks give the 32x reduction.
    """

    widths: tuple[int, ...] = (16, 32, 48, 64, 80, 96)
    se_reduction: int = 16
    input_size: int = 1024
    in_channels: int = 3
    n_classes: int = N_LABELS
    downsample: tuple[int, ...] | None = None
    bn_eps: float = 1e-3
    bn_momentum: float = 0.99
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.downsample is None:
            object.__setattr__(self, "downsample", (1,) * (len(self.widths) - 1))
        else:
            object.__setattr__(self, "downsample", tuple(int(d) for d in self.downsample))
        if len(self.downsample) != len(self.widths) - 1:
            raise ValueError("downsample needs one entry per block transition")
        if self.input_size % self.factor:
            raise ValueError(f"input size {self.input_size} not divisible by factor {self.factor}")

    @property
    def factor(self) -> int:
        return 2 ** sum(self.downsample)

    @property
    def output_size(self) -> int:
        return self.input_size // self.factor

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "NetworkConfig":
        data = dict(data)
        data["widths"] = tuple(data["widths"])
        if data.get("downsample") is not None:
            data["downsample"] = tuple(data["downsample"])
        return cls(**data)


PAPER_NETWORK = NetworkConfig()
DESK_NETWORK = NetworkConfig(widths=(8, 16, 24, 32), se_reduction=4, input_size=64)


def conv_block(c_in: int, c_out: int, reduction: int, cfg: NetworkConfig, rng) -> Sequential:
    dt = np.dtype(cfg.dtype)
    main = Sequential([
        ("conv1", Conv2D(c_in, c_out, 3, rng=rng, dtype=dt)),
        ("bn1", BatchNorm(c_out, cfg.bn_eps, cfg.bn_momentum, dt)),
        ("relu1", ReLU()),
        ("conv2", Conv2D(c_out, c_out, 3, rng=rng, dtype=dt)),
        ("bn2", BatchNorm(c_out, cfg.bn_eps, cfg.bn_momentum, dt)),
        ("se", SEBlock(c_out, reduction, rng=rng, dtype=dt)),
    ])
    skip = None if c_in == c_out else Conv2D(c_in, c_out, 1, rng=rng, dtype=dt)
    return Sequential([("res", Residual(main, skip)), ("relu", ReLU())])


def downsampler(channels: int, cfg: NetworkConfig, rng) -> Sequential:
    dt = np.dtype(cfg.dtype)
    return Sequential([
        ("conv", Conv2D(channels, channels, 2, stride=2, padding="valid", rng=rng, dtype=dt)),
        ("bn", BatchNorm(channels, cfg.bn_eps, cfg.bn_momentum, dt)),
        ("relu", ReLU()),
    ])


class Network:
    def __init__(self, config: NetworkConfig = PAPER_NETWORK, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        layers: list[tuple[str, Layer]] = []
        c = config.in_channels
        for i, width in enumerate(config.widths):
            layers.append((f"block{i}", conv_block(c, width, config.se_reduction, config, rng)))
            c = width
            if i < len(config.downsample):
                for j in range(config.downsample[i]):
                    layers.append((f"down{i}_{j}", downsampler(c, config, rng)))
        dt = np.dtype(config.dtype)
        layers.append(("head", Conv2D(c, config.n_classes, 1, rng=rng, dtype=dt)))
        layers.append(("softmax", Softmax()))
        self.body = Sequential(layers)
        self._trained_forward = False

    # -- parameter access ------------------------------------------------------

    def _walk(self, layer: Layer, prefix: str):
        yield prefix, layer
        for name, child in layer.children():
            yield from self._walk(child, f"{prefix}.{name}" if prefix else name)

    def layers(self):
        return [(n, l) for n, l in self._walk(self.body, "") if n]

    def _named(self, attr: str) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers():
            for key, value in getattr(layer, attr).items():
                out[f"{name}.{key}"] = value
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return self._named("params")

    def buffers(self) -> dict[str, np.ndarray]:
        return self._named("buffers")

    def gradients(self) -> dict[str, np.ndarray]:
        return self._named("grads")

    def state(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def set_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, layer in self.layers():
            for store in (layer.params, layer.buffers):
                for key in store:
                    full = f"{name}.{key}"
                    if full not in tensors:
                        raise KeyError(f"missing tensor {full}")
                    arr = np.asarray(tensors[full])
                    if arr.shape != store[key].shape:
                        raise ShapeMismatch(f"{full}: shape {arr.shape} != {store[key].shape}")
                    store[key] = arr.astype(store[key].dtype, copy=True)

    def architecture(self) -> dict:
        return {"config": self.config.to_json(), "graph": self.body.spec()}

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def se_blocks(self) -> list[SEBlock]:
        return [l for _, l in self.layers() if isinstance(l, SEBlock)]

    def batchnorms(self) -> list[BatchNorm]:
        return [l for _, l in self.layers() if isinstance(l, BatchNorm)]

    # -- passes ----------------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Class probabilities for a patch ``(S, S, 3)`` or batch ``(N, S, S, 3)``."""
        single = x.ndim == 3
        if single:
            x = x[None]
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (size, size, self.config.in_channels):
            raise ShapeMismatch(f"expected (N, {size}, {size}, {self.config.in_channels}), got {x.shape}")
        x = x.astype(self.config.dtype, copy=False)
        with np.errstate(over="ignore", invalid="ignore"):
            y = self.body.forward(x, train)
        if not np.isfinite(y).all():
            self.body._cache = None
            raise NumericalInstability("non-finite activation in forward pass")
        self._trained_forward = train
        return y[0] if single else y

    def backward(self, dy: np.ndarray) -> dict[str, np.ndarray]:
        """Back-propagate ``dLoss/dOutput``; returns gradients keyed like ``parameters()``."""
        if not self._trained_forward:
            from .layers import MissingCache

            raise MissingCache("backward requires a preceding forward(train=True)")
        if dy.ndim == 3:
            dy = dy[None]
        self._trained_forward = False
        self.body.backward(dy.astype(self.config.dtype, copy=False))
        return self.gradients()

    def predict(self, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Eval-mode forward in fixed-size chunks (results do not depend on caller batching)."""
        if x.ndim == 3:
            return self.forward(x)
        out = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)
