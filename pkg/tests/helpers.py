import numpy as np

from xattn_ptq.decoder import BlockState, backward, build_block, synthetic_states


def randomize_norms(block, rng, scale=0.1):
    for st in block.stages:
        d = st.norm.gamma.size
        st.norm.gamma[:] = 1.0 + scale * rng.standard_normal(d)
        st.norm.beta[:] = scale * rng.standard_normal(d)


def desk_block(seed=0, d=32, heads=2):
    rng = np.random.default_rng(seed)
    blk = build_block(rng, d, heads, name="b")
    randomize_norms(blk, rng)
    return blk, rng


def contract(c: BlockState, s: BlockState) -> float:
    return float(np.sum(c.tokens * s.tokens) + np.sum(c.image * s.image))


def gradient_probe_errors(block, state, rng, n_probes=100, eps=1e-3, mode=None):
    """Relative errors of analytic vs central-difference gradients at random entries.

    The loss is <C, block(state)> for a random C; the finite difference is
    contracted after differencing the outputs and Richardson-extrapolated
    from steps ``eps`` and ``eps / 2`` (fourth-order accurate), so a fairly
    large step keeps cancellation noise small. The relative error is floored at 1e-6 of the
    largest gradient entry so structurally-zero gradients do not divide by 0.
    """
    from xattn_ptq.decoder import FP

    mode = FP if mode is None else mode
    out, caches = block.forward(state, mode)
    c = BlockState(rng.standard_normal(out.tokens.shape), rng.standard_normal(out.image.shape))
    d_in, grads = backward(block, caches, c)
    tensors = [(n, a, grads[n]) for st in block.stages for n, a in st.params()]
    tensors += [("tokens", state.tokens, d_in.tokens), ("image", state.image, d_in.image)]
    floor = 1e-6 * max(np.max(np.abs(g)) for _, _, g in tensors)
    errors = []
    for _ in range(n_probes):
        name, arr, g = tensors[rng.integers(len(tensors))]
        idx = np.unravel_index(rng.integers(arr.size), arr.shape)
        orig = arr[idx]

        def central(h):
            arr[idx] = orig + h
            plus = block.forward(state, mode)[0]
            arr[idx] = orig - h
            minus = block.forward(state, mode)[0]
            arr[idx] = orig
            return (contract(c, plus) - contract(c, minus)) / (2 * h)

        fd = (4 * central(eps / 2) - central(eps)) / 3
        errors.append((abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), floor), name))
    return errors


def small_states(rng, n=2, nt=8, ni=64, d=32):
    return synthetic_states(rng, n, nt, ni, d)


def quant4(x, bits=4):
    from xattn_ptq.quantizer import CalibStats, calibrate, fake_quant

    return fake_quant(x, calibrate(CalibStats().observe(x), bits))


def toy_qk(rng, n=16, m=12, d_in=8, d_out=8, heads=2, bias=True, bits=4):
    """Random Q-branch capture: query input X, weight W, keys K and their fake-quantized copy."""
    from xattn_ptq.mac import ProjectionCapture

    x = rng.standard_normal((n, d_in)) * rng.uniform(0.5, 3.0)
    w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
    k = rng.standard_normal((m, d_out)) * rng.uniform(0.5, 3.0)
    b = 0.1 * rng.standard_normal(d_out) if bias else None
    return ProjectionCapture(x, w, b, k, quant4(k, bits), heads)


def toy_v(rng, batch=2, nq=6, nk=5, d_in=8, d_out=8, heads=2, bias=True, bits=4):
    """Random attention maps (fp and perturbed-then-quantized) plus value-projection data."""
    from xattn_ptq.decoder import softmax

    logits = 2.0 * rng.standard_normal((batch, heads, nq, nk))
    a = softmax(logits)
    a_hat = quant4(softmax(logits + 0.3 * rng.standard_normal(logits.shape)), bits)
    xv = rng.standard_normal((batch, nk, d_in))
    wv = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
    b = 0.1 * rng.standard_normal(d_out) if bias else None
    return a, a_hat, xv, wv, b


def qk_grad(cap, delta, lam):
    """Analytic gradient of the regularised Q/K objective with respect to the (augmented) delta."""
    x, w = cap.augmented()
    hd = w.shape[1] // cap.n_heads
    g = 2 * lam * delta
    for h in range(cap.n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        r = (x @ w[:, sl]) @ cap.partner_fp[:, sl].T - (x @ (w + delta)[:, sl]) @ cap.partner_hat[:, sl].T
        g[:, sl] -= 2 * x.T @ r @ cap.partner_hat[:, sl]
    return g


def v_grad(a, a_hat, xv, wv, bias, delta, lam, heads):
    x = xv if bias is None else np.concatenate([xv, np.ones(xv.shape[:-1] + (1,))], axis=-1)
    w = wv if bias is None else np.vstack([wv, bias[None]])
    hd = w.shape[1] // heads
    g = 2 * lam * delta
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        ax = a_hat[:, h] @ x
        r = a[:, h] @ (x @ w[:, sl]) - ax @ (w + delta)[:, sl]
        g[:, sl] -= 2 * np.einsum("bni,bnj->ij", ax, r)
    return g
