"""Mini U-Net: a stack of context slices in, one slice of class logits out.

The slice axis is consumed by the earliest encoder convolutions, which use
``kz > 1`` with no z-padding; once the z extent reaches 1 every later
convolution is effectively 2D.  Encoder outputs that still carry more than one
slice when they feed a skip connection are collapsed by a dedicated
``(z, 1, 1)`` convolution so the decoder stays 2D.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError

NUM_CLASSES = 5
MAX_KZ = 3


@dataclass(frozen=True)
class ModelConfig:
    context_slices: int = 6
    image_size: int = 64
    base_channels: int = 8
    depth: int = 3
    num_classes: int = NUM_CLASSES
    # fixed affine applied to the normalized [0, 1] input: (x - offset) * gain
    input_offset: float = 0.45
    input_gain: float = 4.0

    def validate(self) -> None:
        if self.num_classes != NUM_CLASSES:
            raise ConfigurationError(f"num_classes is fixed at {NUM_CLASSES}, got {self.num_classes}")
        if self.context_slices < 1:
            raise ConfigurationError("context_slices must be >= 1")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1 (a U-Net needs at least one pooling level)")
        if not (np.isfinite(self.input_offset) and np.isfinite(self.input_gain) and self.input_gain != 0):
            raise ConfigurationError("input_offset must be finite and input_gain finite and nonzero")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if self.image_size < 1 or self.image_size % (2**self.depth):
            raise ConfigurationError(
                f"image_size {self.image_size} must be divisible by 2**depth = {2**self.depth}"
            )


def paper_scale_config() -> ModelConfig:
    """Full 512x512 input, six context slices."""
    return ModelConfig(context_slices=6, image_size=512, base_channels=8, depth=3)


def z_schedule(context_slices: int, num_convs: int) -> list[int]:
    """Per-conv z kernel extents, spending ``kz - 1`` greedily from the first conv."""
    remaining = context_slices - 1
    out = []
    for _ in range(num_convs):
        kz = min(MAX_KZ, remaining + 1)
        out.append(kz)
        remaining -= kz - 1
    if remaining:
        raise ConfigurationError(
            f"cannot reduce {context_slices} context slices to 1 with {num_convs} encoder convs: "
            f"need sum(kz - 1) == {context_slices - 1} with kz <= {MAX_KZ}, "
            f"at most {num_convs * (MAX_KZ - 1)} is available"
        )
    return out


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    z_kernels: list[int] = field(default_factory=list)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, list(self.z_kernels))


def _layer_plan(cfg: ModelConfig) -> tuple[list[tuple], list[int]]:
    """(name, kernel shape) for every conv, in parameter-initialization order."""
    n_enc = 2 * (cfg.depth + 1)
    kzs = z_schedule(cfg.context_slices, n_enc)
    plan = []
    cin = 1
    z = cfg.context_slices
    for level in range(cfg.depth + 1):
        cout = cfg.base_channels * 2**level
        for j in range(2):
            kz = kzs[2 * level + j]
            plan.append((f"enc{level}.conv{j}", (kz, 3, 3, cin, cout)))
            cin = cout
            z -= kz - 1
        if level < cfg.depth and z > 1:
            plan.append((f"skip{level}.collapse", (z, 1, 1, cout, cout)))
    for level in reversed(range(cfg.depth)):
        cout = cfg.base_channels * 2**level
        cin = cfg.base_channels * 2 ** (level + 1) + cout
        plan.append((f"dec{level}.conv0", (1, 3, 3, cin, cout)))
        plan.append((f"dec{level}.conv1", (1, 3, 3, cout, cout)))
    plan.append(("head", (1, 1, 1, cfg.base_channels, cfg.num_classes)))
    return plan, kzs


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Initialize kernels He-uniform (bound ``sqrt(6 / fan_in)``), biases at zero."""
    config.validate()
    plan, kzs = _layer_plan(config)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in plan:
        fan_in = int(np.prod(shape[:4]))
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=shape)
        params[f"{name}.b"] = np.zeros(shape[4])
    return Model(config, params, kzs)


def count_parameters(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


def _conv(x: T.Tensor, p: dict[str, T.Tensor], name: str, activate: bool = True) -> T.Tensor:
    w = p[f"{name}.w"]
    kz, ky, kx = w.shape[:3]
    pad = ((0, 0), (ky // 2, ky // 2), (kx // 2, kx // 2))
    y = T.bias_add(T.conv3d(x, w, pad=pad), p[f"{name}.b"])
    return T.relu(y) if activate else y


def forward(model: Model, volume, params: dict[str, T.Tensor] | None = None) -> T.Tensor:
    """Logits ``(1, H, W, 5)`` for a ``(Z, H, W, 1)`` volume.

    Pass ``params`` (leaf tensors keyed like ``model.params``) to differentiate
    with respect to them; otherwise constants are used.
    """
    cfg = model.config
    x = volume if isinstance(volume, T.Tensor) else T.Tensor(volume)
    expected = (cfg.context_slices, cfg.image_size, cfg.image_size, 1)
    if x.shape != expected:
        raise DimensionError(f"model expects input shape {expected}, got {x.shape}")
    if params is None:
        params = {k: T.Tensor(v) for k, v in model.params.items()}
    if cfg.input_offset or cfg.input_gain != 1:
        x = T.mul(T.add(x, T.Tensor(np.full(x.shape, -cfg.input_offset))), cfg.input_gain)

    skips = []
    for level in range(cfg.depth + 1):
        x = _conv(x, params, f"enc{level}.conv0")
        x = _conv(x, params, f"enc{level}.conv1")
        if level < cfg.depth:
            skip = x
            if x.shape[0] > 1:
                skip = _conv(x, params, f"skip{level}.collapse")
            skips.append(skip)
            x = T.maxpool2d(x)
    for level in reversed(range(cfg.depth)):
        x = T.concat_channels(skips[level], T.upsample2d_nearest(x))
        x = _conv(x, params, f"dec{level}.conv0")
        x = _conv(x, params, f"dec{level}.conv1")
    return _conv(x, params, "head", activate=False)


def parameter_tensors(model: Model) -> dict[str, T.Tensor]:
    return {k: T.parameter(v) for k, v in model.params.items()}


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, directory) -> None:
    """Write ``config`` (key=value lines) and one ``<name>.tensor`` per parameter."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v!r}" for k, v in asdict(model.config).items()]
    (d / "config").write_text("\n".join(lines) + "\n")
    for name, arr in model.params.items():
        (d / f"{name}.tensor").write_bytes(T.dump_array(arr))


def load_model(directory) -> Model:
    d = Path(directory)
    cfg_path = d / "config"
    if not cfg_path.is_file():
        raise OSError(f"{cfg_path}: missing model config")
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for line in cfg_path.read_text().splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in types:
                raise OSError(f"{cfg_path}: unknown model config key {key!r}")
            try:
                values[key] = float(val) if types[key] in (float, "float") else int(val)
            except ValueError as exc:
                raise OSError(f"{cfg_path}: bad value for {key!r}: {val.strip()!r}") from exc
    model = build_model(ModelConfig(**values), seed=0)
    for name, arr in model.params.items():
        path = d / f"{name}.tensor"
        if not path.is_file():
            raise OSError(f"{path}: missing parameter entry {name!r}")
        loaded = T.load_array(path.read_bytes(), str(path))
        if loaded.shape != arr.shape:
            raise OSError(f"{path}: shape {loaded.shape} does not match expected {arr.shape}")
        model.params[name] = loaded
    return model
