"""Reconstruction-based calibration of quantizer parameters.

A reconstruction job owns a contiguous run of decoder stages. Its quantized
copy receives the quantized upstream stream, the full-precision copy the fp
stream, and the trainable quantizer parameters (activation step sizes and
weight rounding offsets) are fitted by Adam to minimise the squared error
between the two outputs. Granularity decides how stages are grouped:

    per-module   every stage is its own job
    per-block    all four stages of a block form one job
    joint-pair   self-attention alone, then t2i + MLP + i2t together, so the
                 image-side loss reaches the token-side quantizers
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import mac
from .decoder import FP, BlockState, Mode, QuantGrads, backward_stages, quantize_model, run_stages
from .errors import ContractError, NumericError

GRANULARITIES = ("per-module", "per-block", "joint-pair")


@dataclass
class ReconstructionConfig:
    granularity: str = "joint-pair"
    steps: int = 2000
    lr_scale: float = 4e-5
    lr_alpha: float = 1e-2
    batch_size: int = 8
    seed: int = 0
    bits_w: int = 4
    bits_a: int = 4
    drop_prob: float = 0.0
    round_reg: float = 0.0
    keep_best: bool = True

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"granularity must be one of {GRANULARITIES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be >= 1")
        if not (self.lr_scale > 0 and self.lr_alpha > 0):
            raise ContractError("learning rates must be positive")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ContractError("drop_prob must lie in [0, 1)")
        if self.round_reg < 0:
            raise ContractError("round_reg must be non-negative")


@dataclass
class ReconstructionTrace:
    name: str
    stages: list[str]
    losses: list[float] = field(default_factory=list)  # training loss per step
    initial_loss: float = float("nan")  # hard rounding, whole calibration set
    final_loss: float = float("nan")
    wall_time: float = 0.0
    reverted: bool = False  # optimised state was worse than the start and was discarded

    def summary(self) -> dict:
        return {
            "name": self.name,
            "stages": self.stages,
            "steps": len(self.losses),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "reverted": self.reverted,
        }


class Adam:
    """Adam over a dict of named arrays, updated in place.

    Moments live in one flat buffer so a step is a handful of vector ops
    rather than a loop over every parameter.
    """

    def __init__(self, params: dict, lrs: dict, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.keys = list(params)
        bounds = np.cumsum([0] + [np.size(params[k]) for k in self.keys])
        self.slices = {k: slice(int(a), int(b)) for k, a, b in zip(self.keys, bounds[:-1], bounds[1:])}
        n = int(bounds[-1])
        self.lr = np.empty(n)
        for k, sl in self.slices.items():
            self.lr[sl] = lrs[k]
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.live = np.zeros(n, dtype=bool)
        self.t = 0

    def step(self, grads: dict, lr_factor: float = 1.0) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        g = np.zeros_like(self.m)
        self.live[:] = False
        for k, sl in self.slices.items():
            if k in grads:
                g[sl] = np.ravel(grads[k])
                self.live[sl] = True
        # parameters without a gradient this step keep their moments untouched
        m = np.where(self.live, self.b1 * self.m + (1 - self.b1) * g, self.m)
        v = np.where(self.live, self.b2 * self.v + (1 - self.b2) * g * g, self.v)
        self.m, self.v = m, v
        upd = (lr_factor * self.lr) * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for k, sl in self.slices.items():
            if k in grads:
                p = self.params[k]
                p -= upd[sl].reshape(np.shape(p))


def cosine_factor(step: int, total: int) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


def written_streams(stages) -> tuple[str, ...]:
    w = {st.writes for st in stages}
    return tuple(s for s in ("tokens", "image") if s in w)


def stream_mse(out: BlockState, target: BlockState, streams=("tokens", "image")) -> float:
    """Sum over ``streams`` of the mean squared error; the composite loss when both are listed."""
    return float(sum(np.mean((getattr(out, s) - getattr(target, s)) ** 2) for s in streams))


def _mse_grad(out, target, streams):
    d = {}
    for s in ("tokens", "image"):
        diff = getattr(out, s) - getattr(target, s)
        d[s] = 2.0 * diff / diff.size if s in streams else np.zeros_like(diff)
    return BlockState(d["tokens"], d["image"])


def _trainables(q_stages):
    params, lrs_kind, quants = {}, {}, []
    for st in q_stages:
        for lq in st.quantizers():
            if not lq.enabled:
                continue
            quants.append(lq)
            if lq.kind == "act":
                params[lq.name + ".step_log"] = lq.step_log
                lrs_kind[lq.name + ".step_log"] = "scale"
            else:
                params[lq.name + ".alpha"] = lq.alpha
                lrs_kind[lq.name + ".alpha"] = "alpha"
    return params, lrs_kind, quants


def _round_reg(quants, beta):
    """AdaRound-style push of soft rounding towards {0, 1}; returns value and alpha gradients."""
    from .quantizer import _rectified_sigmoid_grad, rectified_sigmoid

    total, grads = 0.0, {}
    for lq in quants:
        if lq.kind != "weight":
            continue
        h = rectified_sigmoid(lq.alpha)
        u = 2 * h - 1
        total += float(np.sum(1 - np.abs(u) ** beta))
        dh = -beta * np.abs(u) ** (beta - 1) * np.sign(u) * 2
        grads[lq.name + ".alpha"] = dh * _rectified_sigmoid_grad(lq.alpha)
    return total, grads


def hard_loss(fp_stages, q_stages, fp_in: BlockState, q_in: BlockState, streams=None) -> float:
    streams = written_streams(fp_stages) if streams is None else streams
    target = run_stages(fp_stages, fp_in, FP)[0]
    out = run_stages(q_stages, q_in, Mode(quant=True))[0]
    return stream_mse(out, target, streams)


def reconstruct_stages(fp_stages, q_stages, fp_in: BlockState, q_in: BlockState | None = None,
                       cfg: ReconstructionConfig | None = None, name: str = "",
                       streams=None) -> ReconstructionTrace:
    """Fit the quantizers of ``q_stages`` so their output tracks ``fp_stages``.

    ``fp_in``/``q_in`` are batched states (leading sample axis). The loss is
    the mean squared error on ``streams`` (default: every stream the stages
    write). Training uses soft rounding; the reported initial and final
    losses use hard rounding on the whole batch.
    """
    cfg = ReconstructionConfig() if cfg is None else cfg
    fp_stages, q_stages = list(fp_stages), list(q_stages)
    if [s.name for s in fp_stages] != [s.name for s in q_stages]:
        raise ContractError("fp and quantized stages must match one to one")
    q_in = fp_in if q_in is None else q_in
    streams = written_streams(fp_stages) if streams is None else tuple(streams)
    trace = ReconstructionTrace(name or "+".join(s.name for s in fp_stages), [s.name for s in fp_stages])
    t0 = time.perf_counter()
    target_all = run_stages(fp_stages, fp_in, FP)[0]
    trace.initial_loss = stream_mse(run_stages(q_stages, q_in, Mode(quant=True))[0], target_all, streams)

    params, kinds, quants = _trainables(q_stages)
    start = {k: v.copy() for k, v in params.items()}
    lrs = {k: cfg.lr_scale if v == "scale" else cfg.lr_alpha for k, v in kinds.items()}
    opt = Adam(params, lrs)
    rng = np.random.default_rng(cfg.seed)
    n = fp_in.tokens.shape[0]
    saved_drop = [lq.drop_prob for lq in quants]
    for lq in quants:
        if lq.kind == "act":
            lq.drop_prob = cfg.drop_prob
    mode = Mode(quant=True, training=True, rng=rng)
    warm = int(0.2 * cfg.steps)
    # divergence is detected from the loss itself, so numpy's overflow warnings are noise here
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            for step in range(cfg.steps):
                if cfg.batch_size >= n:
                    idx = np.arange(n)
                else:
                    idx = np.sort(rng.choice(n, cfg.batch_size, replace=False))
                target = target_all.take(idx)
                out, caches = run_stages(q_stages, q_in.take(idx), mode)
                loss = stream_mse(out, target, streams)
                grads = QuantGrads()
                backward_stages(q_stages, _mse_grad(out, target, streams), caches, grads)
                if cfg.round_reg > 0 and step >= warm:
                    beta = 20.0 + (2.0 - 20.0) * (step - warm) / max(1, cfg.steps - warm)
                    reg, rgrads = _round_reg(quants, beta)
                    loss += cfg.round_reg * reg
                    for k, g in rgrads.items():
                        grads[k] = grads.get(k, 0.0) + cfg.round_reg * g
                trace.losses.append(loss)
                if not np.isfinite(loss):
                    raise NumericError(f"reconstruction of {trace.name} diverged at step {step}")
                opt.step(grads, cosine_factor(step, cfg.steps))
        except NumericError as exc:
            exc.trace = trace
            raise
        finally:
            for lq, p in zip(quants, saved_drop):
                lq.drop_prob = p
    trace.final_loss = stream_mse(run_stages(q_stages, q_in, Mode(quant=True))[0], target_all, streams)
    if cfg.keep_best and trace.final_loss > trace.initial_loss:
        # soft-rounding optimum that rounds badly: keep the starting point
        for k, v in params.items():
            v[...] = start[k]
        trace.final_loss = trace.initial_loss
        trace.reverted = True
    trace.wall_time = time.perf_counter() - t0
    return trace


def reconstruct_module(fp_module, q_module, calib: BlockState, cfg: ReconstructionConfig | None = None,
                       q_inputs: BlockState | None = None) -> ReconstructionTrace:
    """Per-module reconstruction of a single stage."""
    return reconstruct_stages([fp_module], [q_module], calib, q_inputs, cfg)


def reconstruct_joint_pair(fp_f, fp_g, q_f, q_g, calib: BlockState, cfg: ReconstructionConfig | None = None,
                           q_inputs: BlockState | None = None) -> ReconstructionTrace:
    """Joint reconstruction of a token-side map ``f`` and the image-to-token attention ``g``.

    ``f`` may be one stage or a list (t2i attention plus MLP). The quantized
    T' produced by ``f`` feeds ``g`` directly, and the loss is the composite
    MSE(T') + MSE(I').
    """
    fp_f = list(fp_f) if isinstance(fp_f, (list, tuple)) else [fp_f]
    q_f = list(q_f) if isinstance(q_f, (list, tuple)) else [q_f]
    if fp_g.kind != "i2t":
        raise ContractError("g must be an image-to-token attention stage")
    return reconstruct_stages(fp_f + [fp_g], q_f + [q_g], calib, q_inputs, cfg, streams=("tokens", "image"))


def jobs_for_block(block, granularity: str):
    if granularity == "per-module":
        return [[st] for st in block.stages]
    if granularity == "per-block":
        return [list(block.stages)]
    if granularity == "joint-pair":
        return [[block.self_attn], [block.t2i, block.mlp, block.i2t]]
    raise ContractError(f"unknown granularity {granularity!r}")


@dataclass
class PipelineResult:
    qmodel: object
    compensations: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    stage_log: list = field(default_factory=list)
    initial_composite: float = float("nan")
    after_mac_composite: float = float("nan")
    final_composite: float = float("nan")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def composite_mse(model, qmodel, calib: BlockState) -> float:
    return stream_mse(run_stages(qmodel.stages, calib, Mode(quant=True))[0], run_stages(model.stages, calib, FP)[0])


def run_pipeline(model, calib: BlockState, cfg: ReconstructionConfig | None = None, mac_enabled: bool = True,
                 lambda_threshold: float = 0.1, reconstruct: bool = True) -> PipelineResult:
    """Calibrate, compensate every image-to-token attention, then reconstruct block by block.

    Stage errors are re-raised as :class:`StageFailure` naming the stage
    (``calibrate``, ``mac`` or ``reconstruct``).
    """
    cfg = ReconstructionConfig() if cfg is None else cfg
    try:
        qmodel = quantize_model(model, calib, cfg.bits_w, cfg.bits_a)
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageFailure("calibrate", exc) from exc
    res = PipelineResult(qmodel)
    res.stage_log.append("calibrate")
    res.initial_composite = composite_mse(model, qmodel, calib)
    hard = Mode(quant=True)

    if mac_enabled:
        try:
            fs, qs = calib, calib
            for fst, qst in zip(model.stages, qmodel.stages):
                if fst.kind == "i2t":
                    res.compensations.extend(mac.compensate_attention(fst, qst, fs, qs, lambda_threshold))
                    res.stage_log.append(f"mac:{fst.name}")
                fs = fst.forward(fs)[0]
                qs = qst.forward(qs, hard)[0]
        except Exception as exc:  # noqa: BLE001
            raise StageFailure("mac", exc) from exc
    res.after_mac_composite = composite_mse(model, qmodel, calib)

    if reconstruct:
        try:
            fs, qs = calib, calib
            for b, (fblk, qblk) in enumerate(zip(model.blocks, qmodel.blocks)):
                fjobs = jobs_for_block(fblk, cfg.granularity)
                qjobs = jobs_for_block(qblk, cfg.granularity)
                for j, (fj, qj) in enumerate(zip(fjobs, qjobs)):
                    job_cfg = _job_config(cfg, b, j)
                    streams = ("tokens", "image") if len(fj) > 1 else None
                    tr = reconstruct_stages(fj, qj, fs, qs, job_cfg, streams=streams)
                    res.traces.append(tr)
                    res.stage_log.append(f"reconstruct:{tr.name}")
                    fs = run_stages(fj, fs, FP)[0]
                    qs = run_stages(qj, qs, hard)[0]
        except Exception as exc:  # noqa: BLE001
            raise StageFailure("reconstruct", exc) from exc
    res.final_composite = composite_mse(model, qmodel, calib)
    return res


def _job_config(cfg, block_index, job_index):
    # distinct, reproducible minibatch streams per job
    from dataclasses import replace

    return replace(cfg, seed=int(np.random.SeedSequence([cfg.seed, block_index, job_index]).generate_state(1)[0]))
