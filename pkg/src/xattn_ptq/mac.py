"""MatMul-aware compensation of attention projections.

Quantizing the operands of ``Q K^T`` and ``A V`` perturbs the attention
product. Instead of fixing the perturbed operand locally, a correction
``dW`` is solved for the *opposite* projection so that the product stays
close to its full-precision value:

    Q-branch:  min |Q K^T - X_Q (W_Q + dW) K_hat^T|^2 + lam |dW|^2
    K-branch:  the same with the roles of Q and K swapped
    V-branch:  min |A V - A_hat X_V (W_V + dW)|^2 + lam |dW|^2

Setting the gradient of the Q/K objective to zero gives

    lam dW + (X^T X) dW (K_hat^T K_hat) = X^T Q (K - K_hat)^T K_hat

which is solved in the pre-multiplied form (no inverse of X^T X). The
V-branch is a ridge problem. Biases are absorbed by appending a column of
ones to X and the bias as an extra weight row; that row is regularised
like the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import linalg
from .errors import ContractError, DegenerateError, ShapeError

LAMBDA_FALLBACK = 1e-6


@dataclass
class ProjectionCapture:
    """Calibration data for one Q- or K-branch solve.

    ``x`` is ``(N, d_in)``, ``w`` is ``(d_in, d_out)``; the partner arrays are
    ``(M, d_out)``. Batched inputs are flattened over tokens and samples.
    """

    x: np.ndarray
    w: np.ndarray
    bias: np.ndarray | None
    partner_fp: np.ndarray
    partner_hat: np.ndarray
    n_heads: int = 1

    def __post_init__(self):
        self.x = linalg.as_matrix(np.reshape(self.x, (-1, np.shape(self.x)[-1])), "x")
        self.w = linalg.as_matrix(self.w, "w")
        d_out = self.w.shape[1]
        self.partner_fp = linalg.as_matrix(np.reshape(self.partner_fp, (-1, d_out)), "partner_fp")
        self.partner_hat = linalg.as_matrix(np.reshape(self.partner_hat, (-1, d_out)), "partner_hat")
        if self.x.shape[1] != self.w.shape[0]:
            raise ShapeError(f"x width {self.x.shape[1]} does not match w {self.w.shape}")
        if self.partner_fp.shape != self.partner_hat.shape:
            raise ShapeError("partner_fp and partner_hat must have the same shape")
        if self.bias is not None and np.shape(self.bias) != (d_out,):
            raise ShapeError(f"bias must have shape ({d_out},)")
        if d_out % self.n_heads:
            raise ShapeError("d_out must be divisible by n_heads")

    def augmented(self):
        if self.bias is None:
            return self.x, self.w
        x = np.hstack([self.x, np.ones((self.x.shape[0], 1))])
        return x, np.vstack([self.w, self.bias[None, :]])


@dataclass
class CompensationResult:
    delta_w: np.ndarray  # includes the bias row last when has_bias
    lam: float
    loss_before: float
    loss_after: float
    sylvester_residual: float
    branch: str = ""
    has_bias: bool = False
    rhs_norm: float = 0.0
    energy_rank: int = 0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "branch": self.branch,
            "lambda": self.lam,
            "energy_rank": self.energy_rank,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "sylvester_residual": self.sylvester_residual,
            "rhs_norm": self.rhs_norm,
            "delta_norm": float(np.linalg.norm(self.delta_w)),
        }


def _exact(sigma, t):
    sigma = sorted((float(v) for v in np.ravel(sigma)), reverse=True)
    if not 0 < t <= 1:
        raise ContractError(f"threshold must lie in (0, 1], got {t}")
    # rational arithmetic, with t read as the decimal it was written as, so that
    # boundary cases such as a flat spectrum land on the intended side
    vals = [Fraction(v) for v in sigma]
    total = sum(vals)
    if not total > 0:
        raise DegenerateError("spectrum has no energy")
    goal = Fraction(repr(float(t))) * total
    acc = Fraction(0)
    for n, v in enumerate(vals, 1):
        acc += v
        if acc >= goal:
            return n, acc
    return len(vals), acc  # t == 1 with trailing zeros already returned above


def energy_rank(sigma, t: float = 0.1) -> int:
    """Smallest N whose top-N singular values hold at least a fraction ``t`` of the total."""
    return _exact(sigma, t)[0]


def lambda_from_spectrum(sigma, t: float = 0.1) -> float:
    n, acc = _exact(sigma, t)
    return float(acc / n)


def select_lambda(gram, t: float = 0.1) -> float:
    """Regularisation strength: mean of the top singular values holding a ``t`` energy share."""
    gram = linalg.as_matrix(gram, "gram")
    return lambda_from_spectrum(gram_spectrum(gram), t)


def gram_spectrum(gram) -> np.ndarray:
    """Singular values of a symmetric Gram matrix, i.e. the absolute eigenvalues."""
    return np.abs(linalg.sym_eig(gram).eigenvalues)


def _lambda_or_fallback(gram, t):
    try:
        lam = select_lambda(gram, t)
        rank = energy_rank(gram_spectrum(gram), t)
    except DegenerateError:
        return LAMBDA_FALLBACK, 0
    return lam, rank


def _heads(d_out, n_heads):
    hd = d_out // n_heads
    return [slice(h * hd, (h + 1) * hd) for h in range(n_heads)]


def qk_objective(x, w, partner_fp, partner_hat, delta, lam, n_heads=1) -> float:
    """|P Pfp^T - X (W + dW) Phat^T|^2 + lam |dW|^2 summed over heads (bias already absorbed)."""
    own = x @ w
    own_hat = x @ (w + delta)
    total = lam * float(np.sum(delta * delta))
    for sl in _heads(w.shape[1], n_heads):
        r = own[:, sl] @ partner_fp[:, sl].T - own_hat[:, sl] @ partner_hat[:, sl].T
        total += float(np.sum(r * r))
    return total


def _compensate_qk(cap: ProjectionCapture, t: float, lam: float | None, route: str, branch: str):
    x, w = cap.augmented()
    gram = x.T @ x
    rank = 0
    if lam is None:
        lam, rank = _lambda_or_fallback(gram, t)
    own = x @ w
    delta = np.zeros_like(w)
    rhs_sq = 0.0
    resid_sq = 0.0
    for sl in _heads(w.shape[1], cap.n_heads):
        p_fp = cap.partner_fp[:, sl]
        p_hat = cap.partner_hat[:, sl]
        b = p_hat.T @ p_hat
        c = x.T @ (own[:, sl] @ ((p_fp - p_hat).T @ p_hat))
        if route == "generalized":
            d = linalg.solve_generalized_sylvester(lam, gram, b, c)
        elif route == "inverse":
            # left-multiplied by (X^T X)^{-1}: needs a well-conditioned Gram
            a = lam * np.linalg.inv(gram)
            d = linalg.solve_sylvester(0.5 * (a + a.T), b, w[:, sl] @ ((p_fp - p_hat).T @ p_hat))
        else:
            raise ContractError(f"unknown route {route!r}")
        delta[:, sl] = d
        resid_sq += float(np.sum((lam * d + gram @ d @ b - c) ** 2))
        rhs_sq += float(np.sum(c * c))
    before = qk_objective(x, w, cap.partner_fp, cap.partner_hat, np.zeros_like(w), lam, cap.n_heads)
    after = qk_objective(x, w, cap.partner_fp, cap.partner_hat, delta, lam, cap.n_heads)
    return CompensationResult(
        delta, lam, before, after, np.sqrt(resid_sq), branch, cap.bias is not None, np.sqrt(rhs_sq), rank
    )


def compensate_q(cap: ProjectionCapture, t: float = 0.1, lam: float | None = None,
                 route: str = "generalized") -> CompensationResult:
    """Correction for W_Q absorbing the key-side error ``K_hat - K``.

    ``cap.partner_fp`` / ``cap.partner_hat`` are K and K_hat; ``cap.x`` is the
    full-precision input of the query projection.
    """
    return _compensate_qk(cap, t, lam, route, "q")


def compensate_k(cap: ProjectionCapture, t: float = 0.1, lam: float | None = None,
                 route: str = "generalized") -> CompensationResult:
    """Mirror of :func:`compensate_q`: partners are Q and Q_hat, ``cap.x`` feeds the key projection."""
    return _compensate_qk(cap, t, lam, route, "k")


def _as_heads(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return a


def v_objective(a_fp, a_hat, xv, wv, bias, delta, lam, n_heads=1) -> float:
    a_fp, a_hat = _as_heads(a_fp), _as_heads(a_hat)
    x, w = _augment(xv, wv, bias)
    v = x @ w
    vh = x @ (w + delta)
    total = lam * float(np.sum(delta * delta))
    for h, sl in enumerate(_heads(w.shape[1], n_heads)):
        r = a_fp[..., h, :, :] @ v[..., sl] - a_hat[..., h, :, :] @ vh[..., sl]
        total += float(np.sum(r * r))
    return total


def _augment(xv, wv, bias):
    xv = np.asarray(xv, dtype=np.float64)
    wv = np.asarray(wv, dtype=np.float64)
    if bias is None:
        return xv, wv
    ones = np.ones(xv.shape[:-1] + (1,))
    return np.concatenate([xv, ones], axis=-1), np.vstack([wv, np.asarray(bias)[None, :]])


def compensate_v(a_fp, a_hat, xv, wv, bias=None, n_heads: int = 1, t: float = 0.1,
                 lam: float | None = None) -> CompensationResult:
    """Closed-form value-projection correction.

    ``a_fp``/``a_hat`` are attention maps shaped ``(..., H, n_q, n_kv)`` (or
    ``(n_q, n_kv)`` for one head); ``xv`` is ``(..., n_kv, d_in)`` with the
    same leading axes. Per head ``h``:

        dW_h = (H_h + lam I)^{-1} sum_b X^T A_hat^T (A - A_hat) V_h,
        H_h = sum_b X^T A_hat^T A_hat X

    One ``lam`` is shared across heads, chosen from the head-averaged ``H_h``.
    """
    a_fp, a_hat = _as_heads(a_fp), _as_heads(a_hat)
    x, w = _augment(xv, wv, bias)
    if a_fp.shape != a_hat.shape:
        raise ShapeError("a_fp and a_hat must have the same shape")
    if a_fp.shape[-3] != n_heads or w.shape[1] % n_heads:
        raise ShapeError(f"attention maps carry {a_fp.shape[-3]} heads, expected {n_heads}")
    if a_fp.shape[-1] != x.shape[-2]:
        raise ShapeError("attention width does not match the number of value tokens")
    if not np.allclose(a_fp.sum(axis=-1), 1.0, atol=1e-8):
        raise ContractError("a_fp rows must be stochastic (softmax output)")
    v = x @ w
    d_in = x.shape[-1]
    heads = _heads(w.shape[1], n_heads)
    grams, rhss = [], []
    for h, sl in enumerate(heads):
        ax = a_hat[..., h, :, :] @ x
        r = (a_fp[..., h, :, :] - a_hat[..., h, :, :]) @ v[..., sl]
        grams.append(ax.reshape(-1, d_in).T @ ax.reshape(-1, d_in))
        rhss.append(ax.reshape(-1, d_in).T @ r.reshape(-1, r.shape[-1]))
    rank = 0
    if lam is None:
        lam, rank = _lambda_or_fallback(sum(grams) / n_heads, t)
    delta = np.zeros_like(w)
    resid_sq = rhs_sq = 0.0
    for sl, gram, rhs in zip(heads, grams, rhss):
        d = linalg.ridge_solve(gram, lam, rhs)
        delta[:, sl] = d
        resid_sq += float(np.sum((gram @ d + lam * d - rhs) ** 2))
        rhs_sq += float(np.sum(rhs * rhs))
    before = v_objective(a_fp, a_hat, xv, wv, bias, np.zeros_like(w), lam, n_heads)
    after = v_objective(a_fp, a_hat, xv, wv, bias, delta, lam, n_heads)
    return CompensationResult(
        delta, lam, before, after, np.sqrt(resid_sq), "v", bias is not None, np.sqrt(rhs_sq), rank
    )


def merge(w, result: CompensationResult, bias=None):
    """Return ``(W + dW, bias + dbias)``; the bias row is split off when it was absorbed."""
    w = np.asarray(w, dtype=np.float64)
    delta = result.delta_w
    if result.has_bias:
        if bias is None:
            raise ContractError("compensation absorbed a bias but none was given to merge")
        if delta.shape != (w.shape[0] + 1, w.shape[1]):
            raise ShapeError(f"delta {delta.shape} does not fit augmented weight {w.shape}")
        return w + delta[:-1], np.asarray(bias) + delta[-1]
    if delta.shape != w.shape:
        raise ShapeError(f"delta {delta.shape} does not match weight {w.shape}")
    return w + delta, bias


def compensate_attention(fp_stage, q_stage, fp_in, q_in, t: float = 0.1, sequential: bool = True,
                         branches=("q", "k", "v")) -> list[CompensationResult]:
    """Solve and merge Q, K and V corrections for one attention stage of a quantized model.

    ``fp_stage``/``fp_in`` give the full-precision operands (X, Q, K, V, A);
    ``q_stage``/``q_in`` give the quantized ones (K_hat, Q_hat, A_hat), read
    from a hard-rounded fake-quant pass. Only ``q_stage`` is modified. With
    ``sequential`` every branch sees the quantized operands produced after the
    previous merges; otherwise all three are captured up front.
    """
    from .decoder import FP, Mode, recalibrate_weight

    unknown = set(branches) - {"q", "k", "v"}
    if unknown:
        raise ContractError(f"unknown branches {sorted(unknown)}")
    fp_q, fp_kv = fp_stage._inputs(fp_in)
    _, fc = fp_stage.attn.forward(fp_q, fp_kv, FP)
    q_q, q_kv = q_stage._inputs(q_in)
    attn = q_stage.attn
    heads = attn.n_heads

    def quant_cache():
        return attn.forward(q_q, q_kv, Mode(quant=True))[1]

    qc = quant_cache()
    results = []
    for branch in ("q", "k", "v"):
        if branch not in branches:
            continue
        if branch == "q":
            lin = attn.q_proj
            res = compensate_q(ProjectionCapture(fp_q, lin.w, lin.b, fc["K"], qc["K_hat"], heads), t)
        elif branch == "k":
            lin = attn.k_proj
            res = compensate_k(ProjectionCapture(fp_kv, lin.w, lin.b, fc["Q"], qc["Q_hat"], heads), t)
        else:
            lin = attn.v_proj
            res = compensate_v(fc["A"], qc["A_hat"], fp_kv, lin.w, lin.b, heads, t)
        lin.w, lin.b = merge(lin.w, res, lin.b)
        recalibrate_weight(lin)
        res.extra["layer"] = lin.name
        results.append(res)
        if sequential:
            qc = quant_cache()
    return results
