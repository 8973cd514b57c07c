"""Numerical checks of how quantization error travels through a two-way block.

With ``f`` the token path (t2i attention + MLP) and ``g`` the image-to-token
attention, a first-order expansion of ``I' = g(I, f(T, I))`` gives

    dI' ~ J_g^I dI + J_g^T' (J_f^T dT + J_f^I dI)
          '-- hierarchical --' '-------- feedback ---------'

Jacobian-vector products are taken by central differences so that the check
does not depend on the hand-written backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import (
    FP,
    BlockState,
    Mode,
    TwoWayBlock,
    backward_stages,
    f_map,
    g_map,
    jvp_fd,
    quantize_model,
    run_stages,
    set_quantizers,
)
from .errors import ContractError

FD_REL_STEP = 1e-4


@dataclass
class PropagationReport:
    delta_i_actual: np.ndarray
    delta_i_predicted: np.ndarray
    hierarchical_term: np.ndarray
    feedback_term: np.ndarray
    relative_residual: float
    absolute_residual: float
    eps: float
    degenerate: bool = False

    def summary(self) -> dict:
        return {
            "eps": self.eps,
            "relative_residual": self.relative_residual,
            "absolute_residual": self.absolute_residual,
            "actual_norm": float(np.linalg.norm(self.delta_i_actual)),
            "hierarchical_norm": float(np.linalg.norm(self.hierarchical_term)),
            "feedback_norm": float(np.linalg.norm(self.feedback_term)),
            "degenerate": self.degenerate,
        }


def _scaled(d, ref, eps):
    n = np.linalg.norm(d)
    if n == 0:
        return np.zeros_like(ref)
    return d * (eps * np.linalg.norm(ref) / n)


def _jvp(fn, x, v, rel_step):
    # step proportional to |x| keeps the difference quotient above round-off
    return jvp_fd(fn, x, v, rel_step * max(1.0, float(np.linalg.norm(x))))


def verify_theorem1(block: TwoWayBlock, state: BlockState, dT, dI, eps_scale: float = 1e-3,
                    mode: Mode = FP, fd_step: float = FD_REL_STEP) -> PropagationReport:
    """Compare the actual image-stream change with its first-order prediction.

    ``dT``/``dI`` give perturbation directions; they are rescaled so that
    ``|dT| = eps_scale * |T|`` and ``|dI| = eps_scale * |I|`` (a zero
    direction stays zero). ``state`` is the input of the t2i attention.
    """
    t, i = state.tokens, state.image
    dT = _scaled(np.asarray(dT, dtype=np.float64), t, eps_scale)
    dI = _scaled(np.asarray(dI, dtype=np.float64), i, eps_scale)
    tp = f_map(block, t, i, mode)
    base = g_map(block, i, tp, mode)
    actual = g_map(block, i + dI, f_map(block, t + dT, i + dI, mode), mode) - base

    hier = _jvp(lambda x: g_map(block, x, tp, mode), i, dI, fd_step)
    df = _jvp(lambda x: f_map(block, x, i, mode), t, dT, fd_step) + _jvp(
        lambda x: f_map(block, t, x, mode), i, dI, fd_step
    )
    feedback = _jvp(lambda x: g_map(block, i, x, mode), tp, df, fd_step)
    predicted = hier + feedback
    if not np.array_equal(predicted, hier + feedback):
        raise ContractError("prediction does not decompose into its two terms")
    abs_res = float(np.linalg.norm(actual - predicted))
    n_act = float(np.linalg.norm(actual))
    degenerate = n_act == 0.0 and float(np.linalg.norm(predicted)) == 0.0
    rel = 0.0 if degenerate else abs_res / max(n_act, 1e-30)
    return PropagationReport(actual, predicted, hier, feedback, rel, abs_res, eps_scale, degenerate)


def richardson_ratio(block, state, dT, dI, eps=1e-3, mode: Mode = FP) -> tuple[float, PropagationReport, PropagationReport]:
    """``residual(eps/2) / residual(eps)`` on absolute residuals; ~0.25 for a second-order remainder."""
    big = verify_theorem1(block, state, dT, dI, eps, mode)
    small = verify_theorem1(block, state, dT, dI, eps / 2, mode)
    return small.absolute_residual / max(big.absolute_residual, 1e-300), big, small


# --- gradient coupling -------------------------------------------------------


@dataclass
class CorollaryReport:
    names: list[str]
    analytic: np.ndarray
    finite_difference: np.ndarray
    detached: np.ndarray
    max_rel_error: float
    skipped: list[str] = field(default_factory=list)
    loss: float = 0.0

    def summary(self) -> dict:
        return {
            "loss": self.loss,
            "scales": self.names,
            "analytic": self.analytic.tolist(),
            "finite_difference": self.finite_difference.tolist(),
            "detached": self.detached.tolist(),
            "max_rel_error": self.max_rel_error,
            "detached_all_zero": bool(np.all(self.detached == 0.0)),
            "skipped": self.skipped,
        }


def coupling_setup(block: TwoWayBlock, state: BlockState, bits_w: int = 4, bits_a: int = 4,
                   f_weights: bool = True) -> TwoWayBlock:
    """Quantized copy with ``f`` fully quantized and ``g`` weight-only.

    Activation quantizers inside ``g`` are piecewise constant in their input,
    so they would cut the exact derivative along ``T' -> g``.
    """
    qb = quantize_model(block, state, bits_w, bits_a)
    set_quantizers(qb.i2t, False, kinds=("act",))
    if not f_weights:
        for st in qb.f_stages:
            set_quantizers(st, False, kinds=("weight",))
    return qb


def _f_scales(qblock):
    return [lq for st in qblock.f_stages for lq in st.quantizers() if lq.kind == "act" and lq.enabled]


def coupling_loss(block, qblock, state, codes=None) -> float:
    mode = Mode(quant=True, grad_mode="exact", codes=codes)
    target = g_map(block, state.image, f_map(block, state.tokens, state.image))
    out = g_map(qblock, state.image, f_map(qblock, state.tokens, state.image, mode), mode)
    return float(np.sum((out - target) ** 2))


def coupling_gradient(block, qblock, state, detach_coupling: bool = False) -> dict:
    """d/d(step_log) of |g_q(I, f_q(T, I)) - g(I, f(T, I))|^2 for every activation scale in ``f``."""
    mode = Mode(quant=True, grad_mode="exact")
    target = g_map(block, state.image, f_map(block, state.tokens, state.image))
    f_out, f_caches = run_stages(qblock.f_stages, state, mode)
    g_out, g_caches = run_stages(qblock.g_stages, BlockState(f_out.tokens, state.image), mode)
    grads: dict = {}
    d_img = 2.0 * (g_out.image - target)
    d_in = backward_stages(qblock.g_stages, BlockState(np.zeros_like(f_out.tokens), d_img), g_caches, grads)
    d_tp = np.zeros_like(d_in.tokens) if detach_coupling else d_in.tokens
    # I is an input of the composite map, so only T' carries gradient into f
    backward_stages(qblock.f_stages, BlockState(d_tp, np.zeros_like(state.image)), f_caches, grads)
    return {lq.name: float(np.sum(grads.get(lq.name + ".step_log", 0.0))) for lq in _f_scales(qblock)}


def _stable_fd(block, qblock, state, lq, h0=1e-6, min_h=1e-12):
    base_codes: list = []
    coupling_loss(block, qblock, state, base_codes)
    orig = lq.step_log.copy()
    h = h0
    try:
        while h >= min_h:
            vals = []
            stable = True
            for sign in (1.0, -1.0):
                lq.step_log[...] = orig + sign * h
                codes: list = []
                vals.append(coupling_loss(block, qblock, state, codes))
                if any(not np.array_equal(a, b) for a, b in zip(codes, base_codes)):
                    stable = False
                    break
            if stable:
                return (vals[0] - vals[1]) / (2 * h)
            h /= 2
    finally:
        lq.step_log[...] = orig
    return None


def verify_corollary(block: TwoWayBlock, state: BlockState, bits_w: int = 4, bits_a: int = 4,
                     f_weights: bool = True, qblock: TwoWayBlock | None = None) -> CorollaryReport:
    """Gradient of the image-stream loss w.r.t. the token-path scales, with and without the T' path.

    The attached gradient is checked against central differences taken
    with steps small enough that no integer code changes, where the
    almost-everywhere derivative is the true one.
    """
    qblock = coupling_setup(block, state, bits_w, bits_a, f_weights) if qblock is None else qblock
    attached = coupling_gradient(block, qblock, state, False)
    detached = coupling_gradient(block, qblock, state, True)
    names = list(attached)
    lqs = {lq.name: lq for lq in _f_scales(qblock)}
    fd, skipped = [], []
    for n in names:
        v = _stable_fd(block, qblock, state, lqs[n])
        if v is None:
            skipped.append(n)
            v = np.nan
        fd.append(v)
    a = np.array([attached[n] for n in names])
    fd = np.array(fd)
    ok = np.isfinite(fd)
    floor = 1e-6 * max(np.max(np.abs(a)) if a.size else 0.0, 1e-300)
    rel = np.abs(a - fd)[ok] / np.maximum(np.maximum(np.abs(a[ok]), np.abs(fd[ok])), floor)
    return CorollaryReport(
        names, a, fd, np.array([detached[n] for n in names]),
        float(np.max(rel)) if rel.size else 0.0, skipped, coupling_loss(block, qblock, state),
    )


# --- oscillation -------------------------------------------------------------


TAGS = {"self": "self-attn", "t2i": "cross-attn", "i2t": "cross-attn", "mlp": "mlp"}


def oscillation_score(series) -> float:
    """Mean absolute successive difference divided by the mean value."""
    s = np.asarray(series, dtype=np.float64)
    if s.size < 2:
        return 0.0
    mean = float(np.mean(s))
    if mean == 0.0:
        return 0.0
    return float(np.mean(np.abs(np.diff(s))) / mean)


@dataclass
class OscillationReport:
    modules: list[str]
    tags: list[str]
    final_losses: list[float]
    series: dict  # tag -> final losses along depth
    scores: dict  # tag -> oscillation score
    trace_scores: dict  # module -> score of its own training-loss trace
    cross_attn_most_oscillatory: bool
    effect_size: float | None  # cross-attn score over the largest other score; None if that is 0

    def summary(self) -> dict:
        return {
            "modules": self.modules,
            "tags": self.tags,
            "final_losses": self.final_losses,
            "series": self.series,
            "scores": self.scores,
            "trace_scores": self.trace_scores,
            "cross_attn_most_oscillatory": self.cross_attn_most_oscillatory,
            "effect_size": self.effect_size,
        }


def oscillation_from_traces(traces) -> OscillationReport:
    modules, tags, finals, trace_scores = [], [], [], {}
    for tr in traces:
        if len(tr.stages) != 1:
            raise ContractError("oscillation scan needs per-module traces")
        name = tr.stages[0]
        kind = name.rsplit(".", 1)[-1].replace("self_attn", "self")
        modules.append(name)
        tags.append(TAGS[kind])
        finals.append(tr.final_loss)
        trace_scores[name] = oscillation_score(tr.losses)
    series = {tag: [f for f, t in zip(finals, tags) if t == tag] for tag in dict.fromkeys(tags)}
    scores = {tag: oscillation_score(v) for tag, v in series.items()}
    others = [v for k, v in scores.items() if k != "cross-attn"]
    cross = scores.get("cross-attn", 0.0)
    top_other = max(others) if others else 0.0
    return OscillationReport(
        modules, tags, finals, series, scores, trace_scores,
        bool(cross > top_other), float(cross / top_other) if top_other > 0 else None,
    )


def oscillation_scan(model, calib: BlockState, cfg=None) -> OscillationReport:
    """Per-module reconstruction of every stage, then the oscillation statistics of the traces."""
    from dataclasses import replace

    from .reconstruct import ReconstructionConfig, run_pipeline

    cfg = ReconstructionConfig(granularity="per-module") if cfg is None else replace(cfg, granularity="per-module")
    res = run_pipeline(model, calib, cfg, mac_enabled=False)
    return oscillation_from_traces(res.traces)
