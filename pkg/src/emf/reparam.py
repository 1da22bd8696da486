"""Structural reparameterization of train-form models into single-conv fused form.

The four primitives are exact in real arithmetic:

* :func:`fold_bn` folds an inference batch norm into the preceding conv,
* :func:`pad_kernel` zero-embeds a small odd kernel in a larger one,
* :func:`identity_kernel` expresses the identity map as a Dirac conv,
* :func:`merge_branches` sums parallel convs that share stride and groups.

:func:`fuse_model` applies them to every RepBlock, every RepMixer (whose
residual becomes a Dirac term) and every other conv->BN pair. The ConvFFN
residual, point-wise convs, LSTM and head are left as they are.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from emf.backbone import LstmStateSet, RepBlockLayout, root_layouts
from emf.errors import ShapeError, StateError
from emf.model import BN_FIELDS, FUSED, TRAIN, Model
from emf.tensor_core import BnParams, ConvParams

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-4


def fold_bn(conv: ConvParams, bn: BnParams) -> ConvParams:
    """``W' = W * g / sqrt(v + eps)`` per output channel, ``b' = beta + (b - mu) * g / sqrt(v + eps)``."""
    if bn.channels != conv.out_channels:
        raise ShapeError(f"batch norm over {bn.channels} channels cannot fold into conv with {conv.out_channels} outputs")
    scale = np.asarray(bn.gamma, np.float64) / np.sqrt(np.asarray(bn.var, np.float64) + bn.eps)
    bias = np.zeros(conv.out_channels) if conv.bias is None else np.asarray(conv.bias, np.float64)
    weight = np.asarray(conv.weight, np.float64) * scale[:, None, None, None]
    new_bias = np.asarray(bn.beta, np.float64) + (bias - np.asarray(bn.mean, np.float64)) * scale
    return conv.with_(weight=weight.astype(np.float32), bias=new_bias.astype(np.float32))


def pad_kernel(conv: ConvParams, size: int) -> ConvParams:
    """Center a ``k x k`` kernel in a ``size x size`` zero kernel; padding becomes ``size // 2``."""
    k = conv.kernel
    if k % 2 == 0 or size % 2 == 0:
        raise ValueError(f"pad_kernel needs odd kernel sizes, got {k} -> {size}")
    if size < k:
        raise ValueError(f"cannot pad a {k}x{k} kernel down to {size}x{size}")
    if conv.pad != k // 2:
        raise ValueError(f"pad_kernel expects 'same' padding {k // 2}, conv has padding {conv.pad}")
    off = (size - k) // 2
    w = np.zeros(conv.weight.shape[:2] + (size, size), np.float32)
    w[:, :, off:off + k, off:off + k] = conv.weight
    return conv.with_(weight=w, padding=size // 2)


def identity_kernel(channels: int, size: int, groups: int = 1, stride: int = 1) -> ConvParams:
    """Dirac kernel: output channel ``c`` copies input channel ``c`` at the center tap."""
    if size % 2 == 0:
        raise ValueError(f"identity kernel size must be odd, got {size}")
    if groups == 1:
        w = np.zeros((channels, channels, size, size), np.float32)
        w[np.arange(channels), np.arange(channels), size // 2, size // 2] = 1.0
    elif groups == channels:
        w = np.zeros((channels, 1, size, size), np.float32)
        w[:, 0, size // 2, size // 2] = 1.0
    else:
        raise ValueError(f"identity kernel supports groups in {{1, {channels}}}, got {groups}")
    return ConvParams(w, np.zeros(channels, np.float32), stride, size // 2, groups)


def merge_branches(branches: Sequence[ConvParams]) -> ConvParams:
    """Sum parallel branches into one conv (weights and biases add)."""
    if not branches:
        raise ValueError("merge_branches needs at least one branch")
    ref = branches[0]
    for i, b in enumerate(branches[1:], start=1):
        if b.weight.shape != ref.weight.shape or b.stride != ref.stride or b.groups != ref.groups or b.pad != ref.pad:
            raise ValueError(
                f"branch {i} (weight {b.weight.shape}, stride {b.stride}, groups {b.groups}, padding {b.pad}) "
                f"is incompatible with branch 0 (weight {ref.weight.shape}, stride {ref.stride}, "
                f"groups {ref.groups}, padding {ref.pad})"
            )
    weight = np.sum([np.asarray(b.weight, np.float64) for b in branches], axis=0)
    bias = np.sum([np.asarray(b.bias, np.float64) for b in branches], axis=0)
    return ref.with_(weight=weight.astype(np.float32), bias=bias.astype(np.float32))


# --------------------------------------------------------------------------
# model-level fusion


def fuse_repblock(model: Model, prefix: str, layout: RepBlockLayout) -> ConvParams:
    branches = []
    for name in layout.branches:
        if name == "skip":
            ident = identity_kernel(layout.channels, layout.kernel, layout.groups, layout.stride)
            branches.append(fold_bn(ident, model.bn(f"{prefix}.skip.bn")))
            continue
        conv = model.conv(f"{prefix}.{name}", layout.stride, layout.groups)
        folded = fold_bn(conv, model.bn(f"{prefix}.{name}.bn"))
        if folded.kernel != layout.kernel:
            folded = pad_kernel(folded, layout.kernel)
        branches.append(folded)
    return merge_branches(branches)


def fuse_repmixer(model: Model, prefix: str, channels: int) -> ConvParams:
    conv = fold_bn(model.conv(prefix + ".dw", groups=channels), model.bn(prefix + ".bn"))
    return merge_branches([conv, identity_kernel(channels, conv.kernel, channels)])


def fuse_model(model: Model) -> Model:
    """Return the fused-form equivalent of a train-form model."""
    if model.form != TRAIN:
        raise StateError(f"model is already in {model.form!r} form")
    cfg = model.config
    params = dict(model.params)

    def drop_bn(name):
        for f in BN_FIELDS:
            del params[f"{name}.{f}"]

    def drop_conv(name):
        del params[name + ".weight"], params[name + ".bias"]

    def put(name, conv):
        params[name + ".weight"] = conv.weight
        params[name + ".bias"] = conv.bias

    put("epe.pw", fold_bn(model.conv("epe.pw"), model.bn("epe.bn")))
    drop_bn("epe.bn")
    for stage in range(1, 5):
        c = cfg.stage_channels[stage - 1]
        root = f"stage{stage}.root"
        put(root + ".pw", fold_bn(model.conv(root + ".pw"), model.bn(root + ".bn")))
        drop_bn(root + ".bn")
        for r, layout in enumerate(root_layouts(cfg, stage)):
            prefix = f"{root}.rep{r}"
            put(prefix + ".fused", fuse_repblock(model, prefix, layout))
            for name in layout.branches:
                if name != "skip":
                    drop_conv(f"{prefix}.{name}")
                drop_bn(f"{prefix}.{name}.bn")
        for j in range(cfg.blocks_per_stage):
            blk = f"stage{stage}.block{j}"
            put(blk + ".mixer.fused", fuse_repmixer(model, blk + ".mixer", c))
            drop_conv(blk + ".mixer.dw")
            drop_bn(blk + ".mixer.bn")
            put(blk + ".ffn.dw", fold_bn(model.conv(blk + ".ffn.dw", groups=c), model.bn(blk + ".ffn.bn")))
            drop_bn(blk + ".ffn.bn")
    meta = dict(model.meta)
    meta["fused_from"] = model.checksum()
    fused = Model(cfg, FUSED, {k: np.ascontiguousarray(v, np.float32) for k, v in params.items()}, meta)
    logger.info("fused model: %d -> %d parameters", model.num_parameters(), fused.num_parameters())
    return fused


# --------------------------------------------------------------------------
# verification


@dataclass
class FusionReport:
    per_block: dict = field(default_factory=dict)
    global_max: float = 0.0
    inputs_tested: int = 0
    tol: float = DEFAULT_TOL
    passed: bool = True
    first_failing_block: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "per_block": dict(self.per_block),
            "global_max_abs_dev": self.global_max,
            "inputs_tested": self.inputs_tested,
            "tol": self.tol,
            "passed": self.passed,
            "first_failing_block": self.first_failing_block,
        }


def verification_inputs(n: int, shape: tuple, seed: int = 0) -> list[np.ndarray]:
    """Random count maps in [0, 255] rescaled to unit variance."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = rng.integers(0, 256, size=shape).astype(np.float64)
        out.append((x / x.std()).astype(np.float32))
    return out


def verify_fusion(train: Model, fused: Model, n: int = 10, tol: float = DEFAULT_TOL,
                  shape: Optional[tuple] = None, seed: int = 0) -> FusionReport:
    """Compare both forms on ``n`` seeded inputs with fresh recurrent state.

    Deviations are recorded per traced block (max-abs over all inputs). The
    first block in execution order that exceeds ``tol`` is named in the report.
    """
    from emf.pipeline import detector_forward

    if train.config != fused.config:
        raise ValueError("models have different configurations")
    shape = shape or (train.config.input_channels, 64, 64)
    per_block: dict = {}
    for x in verification_inputs(n, shape, seed):
        ta, tb = {}, {}
        detector_forward(x, LstmStateSet(), train, ta)
        detector_forward(x, LstmStateSet(), fused, tb)
        for key in ta:
            dev = float(np.max(np.abs(ta[key].astype(np.float64) - tb[key])))
            per_block[key] = max(per_block.get(key, 0.0), dev)
    global_max = max(per_block.values()) if per_block else 0.0
    failing = next((k for k, v in per_block.items() if not v <= tol), None)
    return FusionReport(per_block, global_max, n, tol, failing is None, failing)
