"""Network builders and checkpoint serialization.

Three architectures share an encoder/decoder skeleton: a 2D U-Net, a 3D
U-Net whose convolutional blocks carry a parallel 1x1x1 residual branch, and
a 3D FCDense built from dense blocks with transition-down/up stages.

Depth pooling is anisotropic: at each level the pool (and the mirrored
upsample) uses kernel 2 along z only while the running z-extent is even and
at least 2, else 1. Thin volumes (4 z-slices) therefore pass through
networks deeper than log2 of their z-extent. Transposed-conv weights always
store the full 2x2x2 kernel; a level that upsamples with (1,2,2) reads only
the leading z-slab, which keeps the parameter manifest independent of the
input shape.

Checkpoints are a JSON manifest (architecture, config, provenance, named
array table) next to a single little-endian float32 blob.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    ConfigInvalid,
    IndivisibleInput,
    IoFailure,
    ManifestMismatch,
    ShapeMismatch,
    VersionUnknown,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    dims: int = 3
    in_channels: int = 1
    out_channels: int = 1
    levels: int = 3
    base_channels: int = 8
    residual: bool = True

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ConfigInvalid(f"dims must be 2 or 3, got {self.dims}")
        if min(self.in_channels, self.out_channels, self.levels, self.base_channels) < 1:
            raise ConfigInvalid("channel counts and levels must be >= 1")
        if self.residual and self.dims == 2:
            raise ConfigInvalid("the residual 1x1x1 branch is a 3D-block feature")

    def channels_at(self, level: int) -> int:
        return self.base_channels * (2**level)


@dataclass(frozen=True)
class FCDenseConfig:
    growth_rate: int = 4
    layers_per_block: tuple = (2, 2, 2)  # one entry per down level, last is the bottleneck
    initial_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers_per_block", tuple(int(v) for v in self.layers_per_block))
        if len(self.layers_per_block) < 2:
            raise ConfigInvalid("need at least one down level plus a bottleneck")
        if min(self.layers_per_block) < 1 or min(
            self.growth_rate, self.initial_channels, self.in_channels, self.out_channels
        ) < 1:
            raise ConfigInvalid("growth rate, channel counts and block sizes must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.layers_per_block) - 1


def _kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """Parameters plus an architecture-specific forward."""

    architecture = ""

    def __init__(self, config):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        self.provenance: dict | None = None

    def _add_conv(self, rng, name, c_out, c_in, kernel):
        w_shape = (c_out, c_in) + tuple(kernel)
        fan_in = c_in * int(np.prod(np.array(kernel)))
        self.params[f"{name}.w"] = T.tensor(_kaiming_uniform(rng, w_shape, fan_in), requires_grad=True)
        self.params[f"{name}.b"] = T.tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def _add_tconv(self, rng, name, c_in, c_out, kernel):
        w_shape = (c_in, c_out) + tuple(kernel)
        fan_in = c_in * int(np.prod(np.array(kernel)))
        self.params[f"{name}.w"] = T.tensor(_kaiming_uniform(rng, w_shape, fan_in), requires_grad=True)
        self.params[f"{name}.b"] = T.tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def param_arrays(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ManifestMismatch(f"array names disagree (missing={missing}, extra={extra})")
        for name, p in self.params.items():
            a = arrays[name]
            if tuple(a.shape) != p.data.shape:
                raise ManifestMismatch(f"{name}: shape {a.shape} != expected {p.data.shape}")
            p.data = np.ascontiguousarray(a, dtype=np.float32)
            p.grad = None

    def forward(self, x: T.Tensor) -> T.Tensor:
        raise NotImplementedError

    # common helpers -------------------------------------------------------

    def _check_input(self, x: T.Tensor, nd: int, levels: int, in_channels: int):
        if x.data.ndim != nd + 2:
            raise ShapeMismatch(f"{self.architecture} expects {nd + 2}-d input, got {x.data.ndim}-d")
        if x.data.shape[1] != in_channels:
            raise ShapeMismatch(f"expected {in_channels} input channels, got {x.data.shape[1]}")
        div = 2**levels
        h, w = x.data.shape[-2:]
        if h % div or w % div:
            raise IndivisibleInput(f"spatial dims ({h},{w}) must be divisible by {div}")

    @staticmethod
    def _pool_kernel(nd, z_extent):
        if nd == 2:
            return (2, 2)
        kz = 2 if (z_extent % 2 == 0 and z_extent >= 2) else 1
        return (kz, 2, 2)


class UNet(Model):
    def __init__(self, config: UNetConfig, seed: int = 0):
        super().__init__(config)
        self.architecture = "unet2d" if config.dims == 2 else "unet3d"
        rng = np.random.default_rng(seed)
        nd = config.dims
        k3 = (3,) * nd
        k1 = (1,) * nd
        k2 = (2,) * nd
        c_prev = config.in_channels
        for i in range(config.levels):
            c = config.channels_at(i)
            self._add_block(rng, f"enc{i}", c_prev, c, k3, k1)
            c_prev = c
        c_bot = config.channels_at(config.levels)
        self._add_block(rng, "bot", c_prev, c_bot, k3, k1)
        for i in reversed(range(config.levels)):
            c = config.channels_at(i)
            c_deep = config.channels_at(i + 1)
            self._add_tconv(rng, f"dec{i}.up", c_deep, c, k2)
            self._add_block(rng, f"dec{i}", 2 * c, c, k3, k1)
        self._add_conv(rng, "out", config.out_channels, config.channels_at(0), k1)

    def _add_block(self, rng, tag, c_in, c_out, k3, k1):
        self._add_conv(rng, f"{tag}.conv1", c_out, c_in, k3)
        self._add_conv(rng, f"{tag}.conv2", c_out, c_out, k3)
        if self.config.residual:
            self._add_conv(rng, f"{tag}.res", c_out, c_in, k1)

    def _block(self, tag, h):
        nd = self.config.dims
        conv = T.conv3d if nd == 3 else T.conv2d
        p = self.params
        h0 = h
        h = T.relu(conv(h, p[f"{tag}.conv1.w"], p[f"{tag}.conv1.b"], padding=1))
        h = T.relu(conv(h, p[f"{tag}.conv2.w"], p[f"{tag}.conv2.b"], padding=1))
        if self.config.residual:
            h = T.pointwise_sum(h, conv(h0, p[f"{tag}.res.w"], p[f"{tag}.res.b"]))
        return h

    def forward(self, x: T.Tensor) -> T.Tensor:
        cfg = self.config
        nd = cfg.dims
        self._check_input(x, nd, cfg.levels, cfg.in_channels)
        conv = T.conv3d if nd == 3 else T.conv2d
        pool = T.maxpool3d if nd == 3 else T.maxpool2d
        tconv = T.transposed_conv3d if nd == 3 else T.transposed_conv2d
        p = self.params
        skips = []
        kernels = []
        h = x
        for i in range(cfg.levels):
            h = self._block(f"enc{i}", h)
            skips.append(h)
            k = self._pool_kernel(nd, h.data.shape[2] if nd == 3 else 0)
            kernels.append(k)
            h = pool(h, k)
        h = self._block("bot", h)
        for i in reversed(range(cfg.levels)):
            h = tconv(h, p[f"dec{i}.up.w"], p[f"dec{i}.up.b"], kernel=kernels[i])
            h = T.concat_channels(skips[i], h)
            h = self._block(f"dec{i}", h)
        return conv(h, p["out.w"], p["out.b"])


class FCDense3D(Model):
    architecture = "fcdense3d"

    def __init__(self, config: FCDenseConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        k = config.growth_rate
        c = config.initial_channels
        self._add_conv(rng, "init", c, config.in_channels, (3, 3, 3))
        self.skip_channels = []
        for lvl in range(config.levels):
            c = self._add_dense_block(rng, f"down{lvl}", c, config.layers_per_block[lvl], k)
            self.skip_channels.append(c)
            self._add_conv(rng, f"td{lvl}", c, c, (1, 1, 1))
        c = self._add_dense_block(rng, "bot", c, config.layers_per_block[-1], k)
        for lvl in reversed(range(config.levels)):
            self._add_tconv(rng, f"up{lvl}.up", c, c, (2, 2, 2))
            c = c + self.skip_channels[lvl]
            c = self._add_dense_block(rng, f"up{lvl}", c, config.layers_per_block[lvl], k)
        self._add_conv(rng, "out", config.out_channels, c, (1, 1, 1))

    def _add_dense_block(self, rng, tag, c_in, n_layers, k):
        c = c_in
        for j in range(n_layers):
            self._add_conv(rng, f"{tag}.layer{j}", k, c, (3, 3, 3))
            c += k
        return c

    def _dense_block(self, tag, h, n_layers):
        p = self.params
        for j in range(n_layers):
            y = T.conv3d(T.relu(h), p[f"{tag}.layer{j}.w"], p[f"{tag}.layer{j}.b"], padding=1)
            h = T.concat_channels(h, y)
        return h

    def forward(self, x: T.Tensor) -> T.Tensor:
        cfg = self.config
        self._check_input(x, 3, cfg.levels, cfg.in_channels)
        p = self.params
        h = T.conv3d(x, p["init.w"], p["init.b"], padding=1)
        skips = []
        kernels = []
        for lvl in range(cfg.levels):
            h = self._dense_block(f"down{lvl}", h, cfg.layers_per_block[lvl])
            skips.append(h)
            h = T.conv3d(h, p[f"td{lvl}.w"], p[f"td{lvl}.b"])
            k = self._pool_kernel(3, h.data.shape[2])
            kernels.append(k)
            h = T.maxpool3d(h, k)
        h = self._dense_block("bot", h, cfg.layers_per_block[-1])
        for lvl in reversed(range(cfg.levels)):
            h = T.transposed_conv3d(h, p[f"up{lvl}.up.w"], p[f"up{lvl}.up.b"], kernel=kernels[lvl])
            h = T.concat_channels(skips[lvl], h)
            h = self._dense_block(f"up{lvl}", h, cfg.layers_per_block[lvl])
        return T.conv3d(h, p["out.w"], p["out.b"])


def build_unet(config: UNetConfig, seed: int = 0) -> UNet:
    return UNet(config, seed=seed)


def build_fcdense(config: FCDenseConfig, seed: int = 0) -> FCDense3D:
    return FCDense3D(config, seed=seed)


_ARCHITECTURES = {
    "unet2d": (UNetConfig, UNet),
    "unet3d": (UNetConfig, UNet),
    "fcdense3d": (FCDenseConfig, FCDense3D),
}


def build_from_config(architecture: str, config_dict: dict, seed: int = 0) -> Model:
    if architecture not in _ARCHITECTURES:
        raise ConfigInvalid(f"unknown architecture {architecture!r}")
    config_cls, model_cls = _ARCHITECTURES[architecture]
    cfg = config_cls(**config_dict)
    model = model_cls(cfg, seed=seed)
    if model.architecture != architecture:
        raise ConfigInvalid(f"config dims disagree with architecture {architecture!r}")
    return model


def default_config(architecture: str):
    if architecture == "unet3d":
        return UNetConfig(dims=3, levels=3, base_channels=8, residual=True)
    if architecture == "unet2d":
        return UNetConfig(dims=2, levels=4, base_channels=8, residual=False)
    if architecture == "fcdense3d":
        return FCDenseConfig(growth_rate=4, layers_per_block=(2, 2, 2), initial_channels=8)
    raise ConfigInvalid(f"unknown architecture {architecture!r}")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    """Weights + config + provenance, detached from any live model."""

    architecture: str
    config: dict
    arrays: dict
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, provenance: dict | None = None):
        return cls(
            architecture=model.architecture,
            config=asdict(model.config),
            arrays=model.param_arrays(),
            provenance=dict(provenance or {}),
        )

    def to_model(self) -> Model:
        model = build_from_config(self.architecture, self.config)
        model.load_arrays(self.arrays)
        model.provenance = dict(self.provenance)
        return model

    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        h.update(self.architecture.encode())
        h.update(json.dumps(self.config, sort_keys=True).encode())
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str) -> None:
        json_path, bin_path = checkpoint_paths(path)
        entries = []
        blobs = []
        offset = 0
        for name, arr in self.arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "architecture": self.architecture,
            "config": self.config,
            "provenance": self.provenance,
            "id": self.checkpoint_id(),
            "arrays": entries,
        }
        try:
            with open(bin_path, "wb") as f:
                f.write(b"".join(blobs))
            tmp = json_path + ".tmp"
            with open(tmp, "w") as f:
                json.dump(manifest, f, indent=1)
            os.replace(tmp, json_path)
        except OSError as e:
            raise IoFailure(f"cannot write checkpoint {path}: {e}") from e

    @classmethod
    def load(cls, path: str):
        json_path, bin_path = checkpoint_paths(path)
        try:
            with open(json_path) as f:
                manifest = json.load(f)
            with open(bin_path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ManifestMismatch(f"manifest is not valid JSON: {e}") from e
        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise VersionUnknown(f"checkpoint format {version!r} not understood")
        arrays = {}
        pos = 0
        for entry in manifest["arrays"]:
            n = int(np.prod(np.array(entry["shape"], dtype=np.int64))) if entry["shape"] else 1
            start = entry["offset"]
            end = start + 4 * n
            if start != pos or end > len(blob):
                raise ManifestMismatch(
                    f"array {entry['name']!r} spans [{start},{end}) in a {len(blob)}-byte blob"
                )
            arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(
                entry["shape"]
            ).copy()
            pos = end
        if pos != len(blob):
            raise ManifestMismatch(f"blob has {len(blob) - pos} trailing bytes")
        return cls(
            architecture=manifest["architecture"],
            config=manifest["config"],
            arrays=arrays,
            provenance=manifest.get("provenance", {}),
        )


def checkpoint_paths(path: str):
    base = str(path)
    for suffix in (".ckpt.json", ".ckpt.bin", ".ckpt"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return base + ".ckpt.json", base + ".ckpt.bin"


def save_checkpoint(model: Model, provenance: dict, path: str) -> ModelCheckpoint:
    ckpt = ModelCheckpoint.from_model(model, provenance)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path: str) -> Model:
    return ModelCheckpoint.load(path).to_model()
