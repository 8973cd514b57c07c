"""A small two-way transformer decoder with hand-written reverse mode.

Each block runs four sub-layers over a coupled ``(tokens, image)`` state:

    tokens = LN(tokens + SelfAttn(tokens))
    tokens = LN(tokens + CrossAttn_t2i(q=tokens, kv=image))
    tokens = LN(tokens + MLP(tokens))
    image  = LN(image  + CrossAttn_i2t(q=image,  kv=tokens))

Arrays carry an optional leading batch axis: tokens are ``(..., n_t, d)`` and
image embeddings ``(..., n_i, d)``. Weights are stored ``(d_in, d_out)`` so a
projection is ``x @ w + b``.

Every forward returns ``(output, cache)``; every backward consumes the cache
and accumulates parameter gradients into a ``dict`` keyed by parameter path.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError
from .quantizer import CalibStats, LearnableQuant, QuantParams, calibrate

LN_EPS = 1e-5


@dataclass
class Mode:
    """How a forward pass is executed.

    quant      -- apply every enabled quantizer (fake-quant execution)
    training   -- soft rounding offsets and input-drop; hard rounding otherwise
    grad_mode  -- ``"ste"`` or ``"exact"``, see ``LearnableQuant.backward``
    surrogate  -- replace softmax by uniform attention and LayerNorm/GELU by
                  identity, which turns every sub-layer into an affine map
    codes      -- when a list, every activation quantizer appends its integer codes
    observe    -- when a dict, quantizers are bypassed and the tensor reaching
                  each one is recorded into ``observe[name]`` (calibration)
    """

    quant: bool = False
    training: bool = False
    grad_mode: str = "ste"
    rng: np.random.Generator | None = None
    surrogate: bool = False
    codes: list | None = None
    observe: dict | None = None


FP = Mode()


@dataclass
class BlockState:
    tokens: np.ndarray
    image: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.tokens.shape[-1] != self.image.shape[-1]:
            raise ShapeError("tokens and image must share the embedding width")

    def copy(self) -> "BlockState":
        return BlockState(self.tokens.copy(), self.image.copy())

    def take(self, idx) -> "BlockState":
        return BlockState(self.tokens[idx], self.image[idx])


class QuantGrads(dict):
    """Gradient sink that only collects quantizer parameters (step sizes, rounding offsets)."""


def _wants_params(grads) -> bool:
    return grads is not None and not isinstance(grads, QuantGrads)


def _add_grad(grads: dict | None, key: str, g) -> None:
    if grads is None or g is None:
        return
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = np.array(g, dtype=np.float64)


def _quant(lq: LearnableQuant | None, x, mode: Mode):
    if lq is not None and mode.observe is not None:
        mode.observe.setdefault(lq.name, CalibStats(axis=lq.params.axis)).observe(x)
        return x, None
    if lq is None or not mode.quant:
        return x, None
    out, cache = lq.forward(x, training=mode.training, grad_mode=mode.grad_mode, rng=mode.rng)
    if mode.codes is not None and cache[0] == "act":
        mode.codes.append(cache[4])
    return out, cache


def _quant_back(lq: LearnableQuant | None, dout, cache, grads):
    if cache is None:
        return dout
    dx, dlog, dalpha = lq.backward(dout, cache)
    if lq.kind == "act":
        _add_grad(grads, lq.name + ".step_log", dlog)
    else:
        _add_grad(grads, lq.name + ".alpha", dalpha)
    return dx


@dataclass
class Linear:
    w: np.ndarray
    b: np.ndarray
    name: str = ""
    wq: LearnableQuant | None = None  # per-output-channel weight quantizer
    aq: LearnableQuant | None = None  # per-tensor input quantizer

    def effective_weight(self, mode: Mode = FP) -> np.ndarray:
        return _quant(self.wq, self.w, mode)[0]

    def forward(self, x, mode: Mode):
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.w.shape[0]}")
        xq, cx = _quant(self.aq, x, mode)
        w, cw = _quant(self.wq, self.w, mode)
        return xq @ w + self.b, (xq, w, cx, cw)

    def backward(self, dy, cache, grads):
        xq, w, cx, cw = cache
        if grads is not None:
            dw = xq.reshape(-1, xq.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
            dw = _quant_back(self.wq, dw, cw, grads)
            if _wants_params(grads):
                _add_grad(grads, self.name + ".b", dy.reshape(-1, dy.shape[-1]).sum(axis=0))
                _add_grad(grads, self.name + ".w", dw)
        return _quant_back(self.aq, dy @ w.T, cx, grads)

    def params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield self.name + ".w", self.w
        yield self.name + ".b", self.b

    def quantizers(self) -> Iterator[LearnableQuant]:
        for q in (self.aq, self.wq):
            if q is not None:
                yield q


@dataclass
class LayerNorm:
    gamma: np.ndarray
    beta: np.ndarray
    name: str = ""

    def forward(self, x, mode: Mode):
        if mode.surrogate:
            return x, None
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        return xhat * self.gamma + self.beta, (xhat, inv)

    def backward(self, dy, cache, grads):
        if cache is None:
            return dy
        xhat, inv = cache
        d = dy.shape[-1]
        if _wants_params(grads):
            _add_grad(grads, self.name + ".gamma", (dy * xhat).reshape(-1, d).sum(axis=0))
            _add_grad(grads, self.name + ".beta", dy.reshape(-1, d).sum(axis=0))
        dxhat = dy * self.gamma
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )

    def params(self):
        yield self.name + ".gamma", self.gamma
        yield self.name + ".beta", self.beta


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _split_heads(x, n_heads):
    *lead, n, d = x.shape
    return x.reshape(*lead, n, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(x):
    x = x.swapaxes(-2, -3)
    *lead, n, h, hd = x.shape
    return x.reshape(*lead, n, h * hd)


@dataclass
class Attention:
    q_proj: Linear
    k_proj: Linear
    v_proj: Linear
    out_proj: Linear
    n_heads: int
    name: str = ""
    q_mm: LearnableQuant | None = None
    k_mm: LearnableQuant | None = None
    v_mm: LearnableQuant | None = None
    a_mm: LearnableQuant | None = None  # post-softmax probabilities

    @property
    def head_dim(self) -> int:
        return self.q_proj.w.shape[1] // self.n_heads

    def linears(self):
        return (self.q_proj, self.k_proj, self.v_proj, self.out_proj)

    def forward(self, q_in, kv_in, mode: Mode):
        """Multi-head scaled dot-product attention, ``softmax(Q K^T / sqrt(hd)) V``.

        The cache is a dict; besides backward it is what activation capture
        reads (``Q``, ``K_hat``, ``A``, ``A_hat`` ...).
        """
        if q_in.shape[-1] != self.q_proj.w.shape[0] or kv_in.shape[-1] != self.k_proj.w.shape[0]:
            raise ShapeError(f"{self.name}: input widths do not match projections")
        c = {}
        q, c["q_proj"] = self.q_proj.forward(q_in, mode)
        k, c["k_proj"] = self.k_proj.forward(kv_in, mode)
        v, c["v_proj"] = self.v_proj.forward(kv_in, mode)
        c["Q"], c["K"], c["V"] = q, k, v
        qh, c["q_mm"] = _quant(self.q_mm, q, mode)
        kh, c["k_mm"] = _quant(self.k_mm, k, mode)
        vh, c["v_mm"] = _quant(self.v_mm, v, mode)
        c["Q_hat"], c["K_hat"], c["V_hat"] = qh, kh, vh
        qs, ks, vs = (_split_heads(t, self.n_heads) for t in (qh, kh, vh))
        c["qs"], c["ks"], c["vs"] = qs, ks, vs
        if mode.surrogate:
            a = np.full(qs.shape[:-1] + (ks.shape[-2],), 1.0 / ks.shape[-2])
        else:
            a = softmax(qs @ ks.swapaxes(-1, -2) / np.sqrt(self.head_dim))
        ah, c["a_mm"] = _quant(self.a_mm, a, mode)
        c["A"], c["A_hat"] = a, ah
        c["surrogate"] = mode.surrogate
        o = _merge_heads(ah @ vs)
        out, c["out_proj"] = self.out_proj.forward(o, mode)
        return out, c

    def backward(self, dout, c, grads):
        """Return ``(d_q_in, d_kv_in)``."""
        do = _split_heads(self.out_proj.backward(dout, c["out_proj"], grads), self.n_heads)
        dah = do @ c["vs"].swapaxes(-1, -2)
        dvs = c["A_hat"].swapaxes(-1, -2) @ do
        da = _quant_back(self.a_mm, dah, c["a_mm"], grads)
        if c["surrogate"]:
            dqs = np.zeros_like(c["qs"])
            dks = np.zeros_like(c["ks"])
        else:
            a = c["A"]
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(self.head_dim)
            dqs = ds @ c["ks"]
            dks = ds.swapaxes(-1, -2) @ c["qs"]
        dq = _quant_back(self.q_mm, _merge_heads(dqs), c["q_mm"], grads)
        dk = _quant_back(self.k_mm, _merge_heads(dks), c["k_mm"], grads)
        dv = _quant_back(self.v_mm, _merge_heads(dvs), c["v_mm"], grads)
        d_q_in = self.q_proj.backward(dq, c["q_proj"], grads)
        d_kv_in = self.k_proj.backward(dk, c["k_proj"], grads) + self.v_proj.backward(dv, c["v_proj"], grads)
        return d_q_in, d_kv_in

    def params(self):
        for lin in self.linears():
            yield from lin.params()

    def quantizers(self):
        for lin in self.linears():
            yield from lin.quantizers()
        for q in (self.q_mm, self.k_mm, self.v_mm, self.a_mm):
            if q is not None:
                yield q


class Stage:
    """One residual sub-layer mapping a ``BlockState`` to a new ``BlockState``."""

    name: str
    kind: str
    writes: str  # "tokens" or "image"

    def forward(self, state: BlockState, mode: Mode = FP):
        raise NotImplementedError

    def backward(self, d_out: BlockState, cache, grads: dict | None = None) -> BlockState:
        raise NotImplementedError

    def params(self) -> Iterator[tuple[str, np.ndarray]]:
        raise NotImplementedError

    def quantizers(self) -> Iterator[LearnableQuant]:
        raise NotImplementedError


@dataclass
class AttentionStage(Stage):
    kind: str  # "self" | "t2i" | "i2t"
    attn: Attention
    norm: LayerNorm
    name: str = ""

    @property
    def writes(self):
        return "image" if self.kind == "i2t" else "tokens"

    def _inputs(self, state):
        if self.kind == "self":
            return state.tokens, state.tokens
        if self.kind == "t2i":
            return state.tokens, state.image
        if self.kind == "i2t":
            return state.image, state.tokens
        raise ContractError(f"unknown attention kind {self.kind!r}")

    def forward(self, state, mode=FP):
        q_in, kv_in = self._inputs(state)
        a, ca = self.attn.forward(q_in, kv_in, mode)
        y, cn = self.norm.forward(q_in + a, mode)
        out = BlockState(y, state.image) if self.writes == "tokens" else BlockState(state.tokens, y)
        return out, (ca, cn)

    def backward(self, d_out, cache, grads=None):
        ca, cn = cache
        dy = d_out.tokens if self.writes == "tokens" else d_out.image
        dres = self.norm.backward(dy, cn, grads)
        dq, dkv = self.attn.backward(dres, ca, grads)
        dq = dq + dres
        if self.kind == "self":
            return BlockState(dq + dkv, d_out.image)
        if self.kind == "t2i":
            return BlockState(dq, d_out.image + dkv)
        return BlockState(d_out.tokens + dkv, dq)

    def params(self):
        yield from self.attn.params()
        yield from self.norm.params()

    def quantizers(self):
        yield from self.attn.quantizers()


@dataclass
class MlpStage(Stage):
    lin1: Linear
    lin2: Linear
    norm: LayerNorm
    name: str = ""
    kind: str = "mlp"
    writes: str = "tokens"

    def forward(self, state, mode=FP):
        t = state.tokens
        h, c1 = self.lin1.forward(t, mode)
        g = h if mode.surrogate else gelu(h)
        y, c2 = self.lin2.forward(g, mode)
        out, cn = self.norm.forward(t + y, mode)
        return BlockState(out, state.image), (h, c1, c2, cn, mode.surrogate)

    def backward(self, d_out, cache, grads=None):
        h, c1, c2, cn, surrogate = cache
        dres = self.norm.backward(d_out.tokens, cn, grads)
        dg = self.lin2.backward(dres, c2, grads)
        dh = dg if surrogate else dg * gelu_grad(h)
        return BlockState(dres + self.lin1.backward(dh, c1, grads), d_out.image)

    def params(self):
        yield from self.lin1.params()
        yield from self.lin2.params()
        yield from self.norm.params()

    def quantizers(self):
        yield from self.lin1.quantizers()
        yield from self.lin2.quantizers()


def run_stages(stages, state: BlockState, mode: Mode = FP):
    caches = []
    for st in stages:
        state, c = st.forward(state, mode)
        caches.append(c)
    return state, caches


def backward_stages(stages, d_out: BlockState, caches, grads: dict | None = None) -> BlockState:
    if len(caches) != len(stages):
        raise ContractError("missing forward cache: run forward before backward")
    d = d_out
    for st, c in zip(reversed(stages), reversed(caches)):
        d = st.backward(d, c, grads)
    return d


@dataclass
class TwoWayBlock:
    self_attn: AttentionStage
    t2i: AttentionStage
    mlp: MlpStage
    i2t: AttentionStage
    d_model: int
    n_heads: int
    name: str = ""

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def stages(self) -> list[Stage]:
        return [self.self_attn, self.t2i, self.mlp, self.i2t]

    @property
    def f_stages(self) -> list[Stage]:
        """Token path producing the i2t attention's token input: t2i attention, then MLP."""
        return [self.t2i, self.mlp]

    @property
    def g_stages(self) -> list[Stage]:
        return [self.i2t]

    def forward(self, state, mode=FP):
        return run_stages(self.stages, state, mode)

    def backward(self, d_out, caches, grads=None):
        return backward_stages(self.stages, d_out, caches, grads)


@dataclass
class Decoder:
    blocks: list[TwoWayBlock] = field(default_factory=list)

    @property
    def stages(self) -> list[Stage]:
        return [st for blk in self.blocks for st in blk.stages]

    def forward(self, state, mode=FP):
        return run_stages(self.stages, state, mode)

    def backward(self, d_out, caches, grads=None):
        return backward_stages(self.stages, d_out, caches, grads)

    def params(self):
        for st in self.stages:
            yield from st.params()

    def quantizers(self):
        for st in self.stages:
            yield from st.quantizers()


def forward(block, state: BlockState, mode: Mode = FP):
    """Run a block (or decoder) and return ``(state, caches)``."""
    return block.forward(state, mode)


def backward(block, caches, upstream: BlockState, grads: dict | None = None):
    """Reverse pass; returns ``(input_grads, param_grads)``."""
    grads = {} if grads is None else grads
    return block.backward(upstream, caches, grads), grads


def attention(q_in, kv_in, attn: Attention, mode: Mode = FP) -> np.ndarray:
    return attn.forward(np.asarray(q_in, dtype=np.float64), np.asarray(kv_in, dtype=np.float64), mode)[0]


# --- construction -----------------------------------------------------------


def _orthogonal(rng, d_in, d_out, gain):
    a = rng.standard_normal((max(d_in, d_out), min(d_in, d_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if d_in < d_out:
        q = q.T
    return gain * q[:d_in, :d_out]


def _linear(rng, d_in, d_out, name, gain=0.5, bias_std=0.1):
    return Linear(_orthogonal(rng, d_in, d_out, gain), rng.normal(0.0, bias_std, d_out), name)


def _norm(d, name):
    return LayerNorm(np.ones(d), np.zeros(d), name)


def _attention_stage(rng, kind, d, n_heads, name):
    attn = Attention(
        *(_linear(rng, d, d, f"{name}.{p}") for p in ("q_proj", "k_proj", "v_proj", "out_proj")),
        n_heads=n_heads,
        name=name,
    )
    return AttentionStage(kind, attn, _norm(d, f"{name}.norm"), name)


def build_block(rng, d_model=32, n_heads=2, mlp_ratio=2, name="block", gain=0.5) -> TwoWayBlock:
    d = d_model
    mlp = MlpStage(
        _linear(rng, d, mlp_ratio * d, f"{name}.mlp.lin1", gain),
        _linear(rng, mlp_ratio * d, d, f"{name}.mlp.lin2", gain),
        _norm(d, f"{name}.mlp.norm"),
        f"{name}.mlp",
    )
    return TwoWayBlock(
        _attention_stage(rng, "self", d, n_heads, f"{name}.self_attn"),
        _attention_stage(rng, "t2i", d, n_heads, f"{name}.t2i"),
        mlp,
        _attention_stage(rng, "i2t", d, n_heads, f"{name}.i2t"),
        d,
        n_heads,
        name,
    )


def build_decoder(seed=0, d_model=32, n_heads=2, n_blocks=2, mlp_ratio=2) -> Decoder:
    rng = np.random.default_rng(seed)
    return Decoder([build_block(rng, d_model, n_heads, mlp_ratio, f"blocks.{i}") for i in range(n_blocks)])


def synthetic_states(rng, n_samples, n_prompt_tokens=8, n_image_tokens=64, d_model=32) -> BlockState:
    """Gaussian calibration inputs with a token/image scale mismatch.

    Image embeddings sit in a narrow band (clipped to [-14, 15]); prompt
    tokens are spread much wider (clipped to [-40, 65]).
    """
    image = np.clip(0.5 + 4.0 * rng.standard_normal((n_samples, n_image_tokens, d_model)), -14.0, 15.0)
    tokens = np.clip(12.5 + 15.0 * rng.standard_normal((n_samples, n_prompt_tokens, d_model)), -40.0, 65.0)
    return BlockState(tokens, image)


def clone(module):
    return copy.deepcopy(module)


# --- finite-difference Jacobians ---------------------------------------------


def f_map(block: TwoWayBlock, tokens, image, mode: Mode = FP) -> np.ndarray:
    """T' = f(T, I): the token update feeding the image-to-token attention."""
    return run_stages(block.f_stages, BlockState(tokens, image), mode)[0].tokens


def g_map(block: TwoWayBlock, image, tokens_prime, mode: Mode = FP) -> np.ndarray:
    """I' = g(I, T')."""
    return run_stages(block.g_stages, BlockState(tokens_prime, image), mode)[0].image


def jacobian_fd(fn: Callable[[np.ndarray], np.ndarray], x, eps: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of ``ravel(fn(x))`` w.r.t. ``ravel(x)``."""
    if not 1e-6 <= eps <= 1e-2:
        raise ContractError("eps must lie in [1e-6, 1e-2]")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = np.ravel(fn(x))
        flat[k] = orig - eps
        fm = np.ravel(fn(x))
        flat[k] = orig
        cols.append((fp - fm) / (2 * eps))
    return np.stack(cols, axis=1)


def jvp_fd(fn: Callable[[np.ndarray], np.ndarray], x, v, eps: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian-vector product ``J v`` along ``v`` (unit step ``eps``)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(fn(x))
    u = v / nv
    return (fn(x + eps * u) - fn(x - eps * u)) / (2 * eps) * nv


def block_jacobian_fd(block: TwoWayBlock, which: str, at: BlockState, wrt: str, eps: float = 1e-4,
                      mode: Mode = FP) -> np.ndarray:
    """Jacobian of ``f`` (at ``(T, I)``) or ``g`` (at ``(I, T')``, with ``T'`` in ``at.tokens``)."""
    t, i = at.tokens, at.image
    if which == "f" and wrt == "T":
        return jacobian_fd(lambda x: f_map(block, x, i, mode), t, eps)
    if which == "f" and wrt == "I":
        return jacobian_fd(lambda x: f_map(block, t, x, mode), i, eps)
    if which == "g" and wrt == "I":
        return jacobian_fd(lambda x: g_map(block, x, t, mode), i, eps)
    if which == "g" and wrt == "T'":
        return jacobian_fd(lambda x: g_map(block, i, x, mode), t, eps)
    raise ContractError(f"no Jacobian for map {which!r} w.r.t. {wrt!r}")


# --- quantized copies -------------------------------------------------------


def _placeholder(bits, axis=None, shape=()):
    return QuantParams(bits, np.ones(shape), np.zeros(shape, dtype=np.int64), axis)


def quantize_model(model, calib: BlockState, bits_w: int = 4, bits_a: int = 4, weights: bool = True,
                   activations: bool = True):
    """Deep-copy ``model`` and attach min-max calibrated quantizers at every site.

    Weight quantizers are per output channel, activation quantizers per tensor,
    both asymmetric. Activation ranges come from a full-precision pass over
    ``calib``.
    """
    qm = clone(model)
    stages = qm.stages if hasattr(qm, "stages") else [qm]
    for st in stages:
        lins = list(st.attn.linears()) if isinstance(st, AttentionStage) else [st.lin1, st.lin2]
        for lin in lins:
            if weights:
                p = calibrate(CalibStats(axis=1).observe(lin.w), bits_w)
                lin.wq = LearnableQuant.for_weight(lin.w, p, name=lin.name + ".wq")
            if activations:
                lin.aq = LearnableQuant(_placeholder(bits_a), name=lin.name + ".aq")
        if activations and isinstance(st, AttentionStage):
            for site in ("q_mm", "k_mm", "v_mm", "a_mm"):
                setattr(st.attn, site, LearnableQuant(_placeholder(bits_a), name=f"{st.name}.{site}"))
    if activations:
        calibrate_activations(qm, calib)
    return qm


def calibrate_activations(qmodel, calib: BlockState, only=None) -> None:
    """Re-derive activation quantizer ranges from a full-precision pass over ``calib``."""
    obs: dict = {}
    stages = qmodel.stages if hasattr(qmodel, "stages") else [qmodel]
    run_stages(stages, calib, Mode(observe=obs))
    for st in stages:
        for lq in st.quantizers():
            if lq.kind == "act" and lq.name in obs and (only is None or lq.name in only):
                lq.params = calibrate(obs[lq.name], lq.params.bits)
                lq.step_log = np.array(np.log(lq.params.scale), dtype=np.float64)


def recalibrate_weight(lin: Linear) -> None:
    """Refit a weight quantizer after its weight changed (e.g. after compensation)."""
    if lin.wq is None:
        return
    p = calibrate(CalibStats(axis=1).observe(lin.w), lin.wq.params.bits)
    lin.wq = LearnableQuant.for_weight(lin.w, p, name=lin.wq.name)


def set_quantizers(module, enabled: bool = True, kinds=("act", "weight")) -> None:
    stages = module.stages if hasattr(module, "stages") else [module]
    for st in stages:
        for lq in st.quantizers():
            if lq.kind in kinds:
                lq.enabled = enabled
