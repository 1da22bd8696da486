"""Model configuration, the flat parameter store, and initialization helpers.

Parameters live in a flat ``name -> float32 array`` mapping. Convolutions are
stored as ``<name>.weight`` / ``<name>.bias`` and batch norms as
``<name>.gamma``, ``.beta``, ``.mean``, ``.var``. The naming scheme:

=========================================  ==========================================
``epe.pw``, ``epe.bn``                     event progression extractor
``stage{i}.root.pw``, ``stage{i}.root.bn`` root point-wise expansion
``stage{i}.root.rep{r}.{conv_k,conv_3}``   root RepBlock branches (+ ``.bn``)
``stage{i}.root.rep{r}.skip.bn``           identity branch (stride 1 only)
``stage{i}.root.rep{r}.fused``             fused RepBlock (fused form only)
``stage{i}.block{j}.mixer.dw``, ``.bn``    RepMixer (``.mixer.fused`` when fused)
``stage{i}.block{j}.ffn.dw``, ``.bn``      ConvFFN depthwise conv (bn folded when fused)
``stage{i}.block{j}.ffn.expand/project``   ConvFFN point-wise convs
``stage{i}.lstm.wx``, ``stage{i}.lstm.wh`` LSTM gate convolutions
``fpn.lateral{l}``, ``fpn.smooth{l}``      feature pyramid (``l`` = stage index)
``head.*``                                 shared decoupled detection head
=========================================  ==========================================
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from emf.errors import ConfigError
from emf.tensor_core import BnParams, ConvParams

TRAIN = "train"
FUSED = "fused"
FORMS = (TRAIN, FUSED)
BN_EPS = 1e-5
BN_FIELDS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 20
    epe_channels: int = 20
    stage_channels: tuple = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    large_kernel: int = 7
    mixer_kernel: int = 3
    ffn_kernel: int = 7
    ffn_expansion: int = 4
    detection_levels: tuple = (2, 3, 4)
    num_classes: int = 2
    head_width: int = 192

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "detection_levels", tuple(sorted(int(l) for l in self.detection_levels)))
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or any(c <= 0 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive widths, got {self.stage_channels}")
        if not self.detection_levels or not set(self.detection_levels) <= {1, 2, 3, 4}:
            raise ConfigError(f"detection_levels must be a non-empty subset of 1..4, got {self.detection_levels}")
        if len(set(self.detection_levels)) != len(self.detection_levels):
            raise ConfigError(f"duplicate detection levels {self.detection_levels}")
        for name in ("input_channels", "epe_channels", "blocks_per_stage", "ffn_expansion", "num_classes", "head_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("large_kernel", "mixer_kernel", "ffn_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {k}")

    @staticmethod
    def stage_stride(stage: int) -> int:
        return 4 * 2 ** (stage - 1)

    @property
    def strides(self) -> tuple:
        return tuple(self.stage_stride(l) for l in self.detection_levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["detection_levels"] = list(self.detection_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    """Architecture config, form tag, and the flat parameter store.

    ``meta`` carries free-form provenance (seed, sensor geometry) that is
    written into weight files.
    """

    config: ModelConfig
    form: str
    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigError(f"unknown model form {self.form!r}")

    def conv(self, name: str, stride: int = 1, groups: int = 1, padding: Optional[int] = None) -> ConvParams:
        return ConvParams(self.params[name + ".weight"], self.params[name + ".bias"], stride, padding, groups)

    def bn(self, name: str) -> BnParams:
        p = self.params
        return BnParams(p[name + ".gamma"], p[name + ".beta"], p[name + ".mean"], p[name + ".var"], BN_EPS)

    def has(self, name: str) -> bool:
        return name + ".weight" in self.params or name + ".gamma" in self.params

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], np.float32).tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        return Model(self.config, self.form, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))


class ParamInit:
    """Deterministic parameter factory shared by backbone and head initializers.

    Convolutions draw weights and biases from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
    with ``fan_in = C_in / groups * k * k``; batch norms start as identity
    (gamma=1, beta=0, mean=0, var=1).
    """

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict = {}

    def conv(self, name, cin, cout, k, groups=1, bias_value=None):
        fan_in = cin // groups * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name + ".weight"] = self.rng.uniform(-bound, bound, (cout, cin // groups, k, k)).astype(np.float32)
        bias = self.rng.uniform(-bound, bound, cout).astype(np.float32)
        if bias_value is not None:
            bias[:] = bias_value
        self.params[name + ".bias"] = bias

    def bn(self, name, c):
        self.params[name + ".gamma"] = np.ones(c, np.float32)
        self.params[name + ".beta"] = np.zeros(c, np.float32)
        self.params[name + ".mean"] = np.zeros(c, np.float32)
        self.params[name + ".var"] = np.ones(c, np.float32)


def bn_to_params(name: str, bn: BnParams) -> dict:
    return {f"{name}.{f}": np.asarray(getattr(bn, f), np.float32) for f in BN_FIELDS}


def conv_to_params(name: str, conv: ConvParams) -> dict:
    return {name + ".weight": np.asarray(conv.weight, np.float32), name + ".bias": np.asarray(conv.bias, np.float32)}


def randomize_batchnorms(model: Model, seed: int, spread: float = 0.5) -> Model:
    """Return a copy whose batch norms carry non-trivial statistics.

    A freshly initialized model has identity batch norms, which makes BN
    folding look exact for free; tests use this to exercise real folding.
    """
    rng = np.random.default_rng(seed)
    out = model.copy()
    for name in sorted(out.params):
        if not name.endswith(".gamma"):
            continue
        base = name[: -len(".gamma")]
        c = out.params[name].shape[0]
        out.params[base + ".gamma"] = rng.uniform(1 - spread, 1 + spread, c).astype(np.float32)
        out.params[base + ".beta"] = rng.uniform(-spread, spread, c).astype(np.float32)
        out.params[base + ".mean"] = rng.uniform(-spread, spread, c).astype(np.float32)
        out.params[base + ".var"] = rng.uniform(1 - spread, 1 + spread, c).astype(np.float32)
    return out
