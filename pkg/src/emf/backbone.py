"""Recurrent MetaFormer backbone: EPE, four stages of Root Module + EMF Blocks + LSTM.

All forward functions take the :class:`~emf.model.Model` and a parameter-name
prefix, and dispatch on ``model.form``. The optional ``trace`` dict collects
named intermediate outputs in execution order; the fusion verifier uses it
to localize deviations.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from emf.errors import ShapeError, StateError
from emf.model import FUSED, TRAIN, Model, ModelConfig, ParamInit
from emf.tensor_core import LstmState, batchnorm_infer, conv2d, gelu, pixel_lstm_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RepBlockLayout:
    """Shape of one RepBlock.

    Train form sums a ``kernel x kernel`` conv+BN branch, a 3x3 conv+BN branch
    when ``kernel > 3``, and a BN-only identity branch when ``stride == 1``,
    then applies GELU. Depthwise unless ``dense``.
    """

    channels: int
    kernel: int
    stride: int
    dense: bool = False

    @property
    def groups(self) -> int:
        return 1 if self.dense else self.channels

    @property
    def branches(self) -> tuple:
        names = ["conv_k"]
        if self.kernel > 3:
            names.append("conv_3")
        if self.stride == 1:
            names.append("skip")
        return tuple(names)


@dataclass
class LstmStateSet:
    """Recurrent state of all four stages; ``None`` entries mean zero state."""

    states: list = field(default_factory=lambda: [None] * 4)

    def copy(self) -> "LstmStateSet":
        return LstmStateSet([None if s is None else s.copy() for s in self.states])

    def reset(self) -> "LstmStateSet":
        return LstmStateSet([None if s is None else LstmState.zeros(s.h.shape) for s in self.states])

    def to_bytes(self) -> bytes:
        arrays = {}
        for i, s in enumerate(self.states):
            if s is not None:
                arrays[f"h{i}"] = s.h
                arrays[f"c{i}"] = s.c
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LstmStateSet":
        with np.load(io.BytesIO(data)) as z:
            states = [
                LstmState(z[f"h{i}"].copy(), z[f"c{i}"].copy()) if f"h{i}" in z.files else None
                for i in range(4)
            ]
        return cls(states)


def reset_states(states: Sequence[LstmStateSet], mask: Sequence[bool]) -> list[LstmStateSet]:
    """Zero the state sets of sequences whose ``mask`` entry is true."""
    if len(states) != len(mask):
        raise ValueError(f"{len(states)} state sets but {len(mask)} mask entries")
    return [s.reset() if m else s for s, m in zip(states, mask)]


# --------------------------------------------------------------------------
# building blocks


def _require(model: Model, name: str, form: str) -> None:
    if model.form != form or not model.has(name):
        raise StateError(f"model in {model.form!r} form has no parameter group {name!r} (expected {form!r} form)")


def root_layouts(cfg: ModelConfig, stage: int) -> list[RepBlockLayout]:
    c = cfg.stage_channels[stage - 1]
    n_down = 2 if stage == 1 else 1
    layouts = [RepBlockLayout(c, cfg.large_kernel, 2) for _ in range(n_down)]
    layouts.append(RepBlockLayout(c, 1, 1, dense=True))
    return layouts


def stage_input_channels(cfg: ModelConfig, stage: int) -> int:
    return cfg.epe_channels if stage == 1 else cfg.stage_channels[stage - 2]


def epe_forward(x: np.ndarray, model: Model) -> np.ndarray:
    """Point-wise conv -> BN -> GELU over the stacked time-bin channels."""
    if x.ndim != 3 or x.shape[0] != model.config.input_channels:
        raise ShapeError(f"EPE expects ({model.config.input_channels}, H, W) input, got {x.shape}")
    y = conv2d(x, model.conv("epe.pw"))
    if model.form == TRAIN:
        y = batchnorm_infer(y, model.bn("epe.bn"))
    return gelu(y)


def repblock_branches(x: np.ndarray, model: Model, prefix: str, layout: RepBlockLayout) -> list[np.ndarray]:
    """Outputs of the individual train-form branches, before summation."""
    _require(model, prefix + ".conv_k", TRAIN)
    outs = []
    for name in layout.branches:
        if name == "skip":
            outs.append(batchnorm_infer(x, model.bn(f"{prefix}.skip.bn")))
        else:
            conv = model.conv(f"{prefix}.{name}", layout.stride, layout.groups)
            outs.append(batchnorm_infer(conv2d(x, conv), model.bn(f"{prefix}.{name}.bn")))
    shapes = {o.shape for o in outs}
    if len(shapes) != 1:
        raise AssertionError(f"RepBlock {prefix} branch shapes disagree: {sorted(shapes)}")
    return outs


def repblock_forward(x: np.ndarray, model: Model, prefix: str, layout: RepBlockLayout) -> np.ndarray:
    if x.shape[0] != layout.channels:
        raise ShapeError(f"RepBlock {prefix} expects {layout.channels} channels, got input {x.shape}")
    if model.form == TRAIN:
        outs = repblock_branches(x, model, prefix, layout)
        y = outs[0]
        for o in outs[1:]:
            y = y + o
    else:
        _require(model, prefix + ".fused", FUSED)
        y = conv2d(x, model.conv(prefix + ".fused", layout.stride, layout.groups))
    return gelu(y)


def root_module_forward(x: np.ndarray, model: Model, stage: int, trace: Optional[dict] = None) -> np.ndarray:
    """Point-wise expansion, stride-2 large-kernel RepBlocks, then a 1x1 RepBlock."""
    cfg = model.config
    if not 1 <= stage <= 4:
        raise ValueError(f"stage index must be in 1..4, got {stage}")
    cin = stage_input_channels(cfg, stage)
    if x.ndim != 3 or x.shape[0] != cin:
        raise ShapeError(f"stage {stage} root expects ({cin}, H, W) input, got {x.shape}")
    prefix = f"stage{stage}.root"
    y = conv2d(x, model.conv(prefix + ".pw"))
    if model.form == TRAIN:
        y = batchnorm_infer(y, model.bn(prefix + ".bn"))
    for r, layout in enumerate(root_layouts(cfg, stage)):
        y = repblock_forward(y, model, f"{prefix}.rep{r}", layout)
        if trace is not None:
            trace[f"{prefix}.rep{r}"] = y
    return y


def repmixer_forward(x: np.ndarray, model: Model, prefix: str) -> np.ndarray:
    """Token mixer ``x + BN(DWConv(x))``; a single depthwise conv once fused."""
    k = model.config.mixer_kernel
    c = x.shape[0]
    if model.form == TRAIN:
        _require(model, prefix + ".dw", TRAIN)
        return x + batchnorm_infer(conv2d(x, model.conv(prefix + ".dw", groups=c)), model.bn(prefix + ".bn"))
    _require(model, prefix + ".fused", FUSED)
    conv = model.conv(prefix + ".fused", groups=c)
    if conv.kernel != k:
        raise StateError(f"{prefix}.fused has kernel {conv.kernel}, config says {k}")
    return conv2d(x, conv)


def convffn_forward(x: np.ndarray, model: Model, prefix: str) -> np.ndarray:
    """Channel mixer ``x + project(GELU(expand(BN(DWConv(x)))))``."""
    c = x.shape[0]
    h = conv2d(x, model.conv(prefix + ".dw", groups=c))
    if model.form == TRAIN:
        h = batchnorm_infer(h, model.bn(prefix + ".bn"))
    h = gelu(conv2d(h, model.conv(prefix + ".expand")))
    return x + conv2d(h, model.conv(prefix + ".project"))


def emf_block_forward(x: np.ndarray, model: Model, prefix: str, trace: Optional[dict] = None) -> np.ndarray:
    y = repmixer_forward(x, model, prefix + ".mixer")
    if trace is not None:
        trace[prefix + ".mixer"] = y
    y = convffn_forward(y, model, prefix + ".ffn")
    if trace is not None:
        trace[prefix + ".ffn"] = y
    return y


def stage_forward(
    x: np.ndarray,
    state: Optional[LstmState],
    model: Model,
    stage: int,
    trace: Optional[dict] = None,
) -> tuple[np.ndarray, LstmState]:
    """Root module, EMF blocks, then the per-pixel LSTM; returns ``(h, state)``."""
    y = root_module_forward(x, model, stage, trace)
    for j in range(model.config.blocks_per_stage):
        y = emf_block_forward(y, model, f"stage{stage}.block{j}", trace)
    if state is not None and (state.h.shape != y.shape or state.c.shape != y.shape):
        raise StateError(
            f"stage {stage} LSTM state has shape {state.h.shape} but features are {y.shape}; "
            "reset the states when the input geometry changes"
        )
    gates = (model.conv(f"stage{stage}.lstm.wx"), model.conv(f"stage{stage}.lstm.wh"))
    h, new_state = pixel_lstm_step(y, state, gates)
    if trace is not None:
        trace[f"stage{stage}.lstm"] = h
    return h, new_state


def backbone_forward(
    x: np.ndarray,
    states: Optional[LstmStateSet],
    model: Model,
    trace: Optional[dict] = None,
) -> tuple[list[np.ndarray], LstmStateSet]:
    """Run EPE and the four stages; returns the stride 4/8/16/32 outputs and new states."""
    if states is None:
        states = LstmStateSet()
    y = epe_forward(np.asarray(x, np.float32), model)
    if trace is not None:
        trace["epe"] = y
    outs, new_states = [], []
    for stage in range(1, 5):
        y, s = stage_forward(y, states.states[stage - 1], model, stage, trace)
        outs.append(y)
        new_states.append(s)
    return outs, LstmStateSet(new_states)


# --------------------------------------------------------------------------
# initialization


def init_backbone_params(cfg: ModelConfig, init: ParamInit) -> None:
    init.conv("epe.pw", cfg.input_channels, cfg.epe_channels, 1)
    init.bn("epe.bn", cfg.epe_channels)
    for stage in range(1, 5):
        c = cfg.stage_channels[stage - 1]
        root = f"stage{stage}.root"
        init.conv(root + ".pw", stage_input_channels(cfg, stage), c, 1)
        init.bn(root + ".bn", c)
        for r, layout in enumerate(root_layouts(cfg, stage)):
            for name in layout.branches:
                prefix = f"{root}.rep{r}.{name}"
                if name == "skip":
                    init.bn(prefix + ".bn", c)
                    continue
                k = layout.kernel if name == "conv_k" else 3
                init.conv(prefix, c, c, k, groups=layout.groups)
                init.bn(prefix + ".bn", c)
        for j in range(cfg.blocks_per_stage):
            blk = f"stage{stage}.block{j}"
            init.conv(blk + ".mixer.dw", c, c, cfg.mixer_kernel, groups=c)
            init.bn(blk + ".mixer.bn", c)
            init.conv(blk + ".ffn.dw", c, c, cfg.ffn_kernel, groups=c)
            init.bn(blk + ".ffn.bn", c)
            init.conv(blk + ".ffn.expand", c, c * cfg.ffn_expansion, 1)
            init.conv(blk + ".ffn.project", c * cfg.ffn_expansion, c, 1)
        forget = np.zeros(4 * c, np.float32)
        forget[c:2 * c] = 1.0
        init.conv(f"stage{stage}.lstm.wx", c, 4 * c, 1, bias_value=forget)
        init.conv(f"stage{stage}.lstm.wh", c, 4 * c, 1, bias_value=0.0)


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministically initialize a train-form model (backbone and head)."""
    from emf.detection import init_head_params

    cfg.validate()
    init = ParamInit(seed)
    init_backbone_params(cfg, init)
    init_head_params(cfg, init)
    model = Model(cfg, TRAIN, init.params, {"seed": int(seed)})
    logger.info("initialized model with %d parameters (seed %d)", model.num_parameters(), seed)
    return model
