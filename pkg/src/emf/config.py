"""Run configuration: one JSON document, overridable from the command line."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from emf.detection import EVAL_SCORE_THR, IOU_THR, OVERLAY_SCORE_THR
from emf.encoder import EncoderConfig
from emf.errors import ConfigError
from emf.evaluation import EvalProtocol, get_protocol
from emf.model import ModelConfig


@dataclass(frozen=True)
class PostProcess:
    score_thr: float = OVERLAY_SCORE_THR
    eval_score_thr: float = EVAL_SCORE_THR
    iou_thr: float = IOU_THR


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    postprocess: PostProcess = field(default_factory=PostProcess)
    protocol: EvalProtocol = field(default_factory=lambda: get_protocol("gen1"))
    seed: int = 0
    sensor: Optional[tuple] = None  # (width, height)

    def validate(self) -> "RunConfig":
        if self.model.input_channels != self.encoder.channels:
            raise ConfigError(
                f"model input_channels={self.model.input_channels} but encoder produces "
                f"2 x {self.encoder.bins} = {self.encoder.channels} channels"
            )
        if self.protocol.spatial_divisor != self.encoder.spatial_divisor:
            raise ConfigError(
                f"protocol {self.protocol.name!r} expects spatial divisor {self.protocol.spatial_divisor}, "
                f"encoder uses {self.encoder.spatial_divisor}"
            )
        if self.sensor is not None and (len(self.sensor) != 2 or min(self.sensor) <= 0):
            raise ConfigError(f"sensor must be [width, height], got {self.sensor}")
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "encoder": self.encoder.to_dict(),
            "postprocess": vars(self.postprocess).copy(),
            "protocol": self.protocol.name,
            "seed": self.seed,
            "sensor": None if self.sensor is None else {"width": self.sensor[0], "height": self.sensor[1]},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "encoder", "postprocess", "protocol", "seed", "sensor"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            sensor = d.get("sensor")
            if isinstance(sensor, dict):
                sensor = (int(sensor["width"]), int(sensor["height"]))
            return cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                encoder=EncoderConfig(**d.get("encoder", {})),
                postprocess=PostProcess(**d.get("postprocess", {})),
                protocol=get_protocol(d.get("protocol", "gen1")),
                seed=int(d.get("seed", 0)),
                sensor=None if sensor is None else tuple(sensor),
            )
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from None

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply non-None overrides; encoder keys are ``bins``, ``dt``, ``spatial_divisor``, ``saturation``."""
        enc_keys = {"bins", "dt", "spatial_divisor", "saturation"}
        post_keys = {"score_thr", "eval_score_thr", "iou_thr"}
        enc = {k: v for k, v in kw.items() if k in enc_keys and v is not None}
        post = {k: v for k, v in kw.items() if k in post_keys and v is not None}
        cfg = self
        if enc:
            cfg = replace(cfg, encoder=replace(cfg.encoder, **enc))
        if post:
            cfg = replace(cfg, postprocess=replace(cfg.postprocess, **post))
        if kw.get("protocol") is not None:
            cfg = replace(cfg, protocol=get_protocol(kw["protocol"]))
        if kw.get("seed") is not None:
            cfg = replace(cfg, seed=int(kw["seed"]))
        return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(data)
