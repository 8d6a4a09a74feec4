"""The 81-token Sudoku transformer with hand-written forward and backward passes.

Tokens are the 81 cells (9-dim logit state each); conditioning is a Fourier
time embedding passed through a SiLU MLP and added to every token, plus
learned row/column/box position tables. Blocks are pre-norm: multi-head
self-attention and a GELU MLP (expansion 4), residual connections, dropout on
attention probabilities and both residual branches.

Gradients are exact reverse-mode, computed against the same dropout
realization as the forward pass; `grad_check` compares them to centered
finite differences in double precision.

Large intermediates are carved out of a per-thread buffer pool: the math here
runs millions of times per experiment and per-call allocation of the
attention tensors dominates runtime on sandboxed kernels. Buffers are keyed
by (tag, shape, dtype) and reused across calls on the same thread, so the
public functions stay reentrant across threads.
"""

from __future__ import annotations

import io
import json
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import CheckpointError, NumericError
from .grid import BOX_OF, COL_OF, ROW_OF
from .rng import RngStream

__all__ = [
    "ModelConfig",
    "ModelParams",
    "init_params",
    "fourier_time_embed",
    "forward",
    "loss_and_grads",
    "grad_check",
    "save_params",
    "load_params",
    "clear_scratch",
]

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Rational erf approximation (Abramowitz & Stegun 7.1.26), absolute error
# <= 1.5e-7: exact at float32 resolution. scipy's erf ufunc is an order of
# magnitude slower than numpy core ufuncs in this environment, so the float32
# hot path uses this; float64 (grad-check precision) keeps scipy's exact erf.
_ERF_P = 0.3275911
_ERF_A1, _ERF_A2, _ERF_A3, _ERF_A4, _ERF_A5 = (
    0.254829592,
    -0.284496736,
    1.421413741,
    -1.453152027,
    1.061405429,
)


def _erf_f32_inplace(a, tb, tc, td):
    """a <- erf(a) for float32 arrays; tb/tc/td are same-shape scratch."""
    np.abs(a, out=tb)  # u = |z|
    np.multiply(tb, _ERF_P, out=tc)
    tc += 1.0
    np.reciprocal(tc, out=tc)  # t = 1 / (1 + p u)
    np.multiply(tb, tb, out=tb)
    np.negative(tb, out=tb)
    np.exp(tb, out=tb)  # exp(-u^2)
    np.multiply(tc, _ERF_A5, out=td)
    td += _ERF_A4
    td *= tc
    td += _ERF_A3
    td *= tc
    td += _ERF_A2
    td *= tc
    td += _ERF_A1
    td *= tc  # t (a1 + a2 t + ... + a5 t^4)
    td *= tb  # (...) exp(-u^2) = 1 - erf(u)
    np.subtract(1.0, td, out=td)
    np.copysign(td, a, out=a)


class _Scratch(threading.local):
    def __init__(self):
        self.pool = {}

    def get(self, tag: str, shape: tuple, dtype) -> np.ndarray:
        key = (tag, shape, np.dtype(dtype))
        buf = self.pool.get(key)
        if buf is None:
            buf = np.empty(shape, dtype)
            self.pool[key] = buf
        return buf


_scratch = _Scratch()


def clear_scratch() -> None:
    """Release this thread's pooled work buffers (e.g. between batch sizes)."""
    _scratch.pool.clear()


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    layers: int = 4
    heads: int = 8
    time_dim: int = 64
    f_max: float = 1e3
    mlp_ratio: int = 4
    dropout: float = 0.01

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.tensors["embed.w"].dtype

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta)
        )


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    h, dt, r = cfg.hidden, cfg.time_dim, cfg.mlp_ratio
    shapes = {
        "embed.w": (9, h),
        "embed.b": (h,),
        "pos.row": (9, h),
        "pos.col": (9, h),
        "pos.box": (9, h),
        "time.w1": (dt, h),
        "time.b1": (h,),
        "time.w2": (h, h),
        "time.b2": (h,),
        "final_ln.g": (h,),
        "final_ln.b": (h,),
        "head.w": (h, 9),
        "head.b": (9,),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.g"] = (h,)
        shapes[p + "ln1.b"] = (h,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + name] = (h, h)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + name] = (h,)
        shapes[p + "ln2.g"] = (h,)
        shapes[p + "ln2.b"] = (h,)
        shapes[p + "mlp.w1"] = (h, r * h)
        shapes[p + "mlp.b1"] = (r * h,)
        shapes[p + "mlp.w2"] = (r * h, h)
        shapes[p + "mlp.b2"] = (h,)
    return shapes


def init_params(
    cfg: ModelConfig, rng, dtype=np.float32, zero_head: bool = True
) -> ModelParams:
    """Weights ~ N(0, 0.02), zero biases, unit norm scales.

    zero_head=True zeroes the output projection so the model starts at the
    zero field (training init); grad_check uses zero_head=False to probe a
    generic parameter point.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    tensors = {}
    for name, shape in _tensor_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            t = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            t = np.zeros(shape)
        elif name.startswith("head.") and zero_head:
            t = np.zeros(shape)
        else:
            t = gen.normal(0.0, 0.02, size=shape)
        tensors[name] = np.ascontiguousarray(t, dtype=dtype)
    return ModelParams(cfg, tensors)


def fourier_time_embed(t, cfg: ModelConfig) -> np.ndarray:
    """[sin(2 pi f_k t), cos(2 pi f_k t)] with f_k log-spaced from 1 to f_max."""
    t = np.asarray(t, dtype=np.float64)
    freqs = np.exp(np.linspace(0.0, np.log(cfg.f_max), cfg.time_dim // 2))
    ang = 2.0 * np.pi * t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _layer_norm(x, g, b, out, xhat):
    """out = g * xhat + b with xhat = (x - mean) / sqrt(var + eps); returns inv."""
    mu = x.mean(axis=-1, keepdims=True)
    np.subtract(x, mu, out=xhat)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / x.shape[-1]
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat *= inv
    np.multiply(xhat, g, out=out)
    out += b
    return inv


def _layer_norm_backward(dy, g, xhat, inv, out, ta, tb):
    """dx into out; returns (dg, db). ta/tb are same-shape scratch."""
    np.multiply(dy, xhat, out=ta)
    dg = ta.sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    np.multiply(dy, g, out=ta)  # dxhat
    m1 = ta.mean(axis=-1, keepdims=True)
    np.multiply(ta, xhat, out=tb)
    m2 = tb.mean(axis=-1, keepdims=True)
    np.multiply(xhat, m2, out=out)
    np.subtract(ta, out, out=out)
    out -= m1
    out *= inv
    return dg, db


def _softmax_inplace(x):
    x -= x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)


def _dropout_mask_into(buf, gen, p):
    """Inverted-dropout mask built in place: 0 with probability p, else 1/(1-p).

    Sampled as a Binomial count plus a uniform index subset (Floyd sampling),
    which is the same process law as per-entry Bernoulli draws but an order of
    magnitude cheaper for the attention-sized masks at small p.
    """
    keep = 1.0 - p
    n = buf.size
    k = int(gen.binomial(n, p))
    buf.fill(buf.dtype.type(1.0 / keep))
    if k > 0:
        idx = gen.choice(n, size=k, replace=False, shuffle=False)
        buf.ravel()[idx] = 0.0


def _dropout_masks(cfg: ModelConfig, batch: int, gen, dtype):
    """Masks in a fixed draw order (attn probs, attn residual, mlp residual,
    per block). Buffers are pooled; a fresh call overwrites previous masks."""
    p = cfg.dropout
    nh, h = cfg.heads, cfg.hidden
    masks = []
    for i in range(cfg.layers):
        triple = []
        for tag, shape in (
            (f"mask{i}.attn", (batch, nh, 81, 81)),
            (f"mask{i}.res1", (batch, 81, h)),
            (f"mask{i}.res2", (batch, 81, h)),
        ):
            buf = _scratch.get(tag, shape, dtype)
            _dropout_mask_into(buf, gen, p)
            triple.append(buf)
        masks.append(tuple(triple))
    return masks


def _forward(params: ModelParams, x, t, masks, want_cache: bool):
    cfg = params.config
    pt = params.tensors
    dtype = params.dtype
    b = x.shape[0]
    h = cfg.hidden
    nh = cfg.heads
    dh = h // nh
    rh = cfg.mlp_ratio * h
    scale = dtype.type(1.0 / np.sqrt(dh))
    # Cached buffers need to survive until the backward pass, so they get
    # per-block tags; the no-cache path reuses one set across blocks.
    tag = (lambda i, name: f"c{i}.{name}") if want_cache else (lambda i, name: f"nc.{name}")

    def buf(i, name, shape):
        return _scratch.get(tag(i, name), shape, dtype)

    phi = fourier_time_embed(t, cfg).astype(dtype)
    th1 = phi @ pt["time.w1"] + pt["time.b1"]
    tsig = expit(th1)
    ts1 = th1 * tsig
    tm = ts1 @ pt["time.w2"] + pt["time.b2"]

    pos = pt["pos.row"][ROW_OF] + pt["pos.col"][COL_OF] + pt["pos.box"][BOX_OF]
    hid = _scratch.get("hid", (b, 81, h), dtype)
    np.matmul(x.reshape(b * 81, 9), pt["embed.w"], out=hid.reshape(b * 81, h))
    hid += pt["embed.b"] + pos + tm[:, None, :]

    cache = {"phi": phi, "th1": th1, "tsig": tsig, "ts1": ts1, "x": x, "blocks": []}

    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        amask, rmask1, rmask2 = masks[i] if masks is not None else (None, None, None)

        n1 = buf(i, "n1", (b, 81, h))
        xhat1 = buf(i, "xhat1", (b, 81, h))
        inv1 = _layer_norm(hid, pt[pre + "ln1.g"], pt[pre + "ln1.b"], n1, xhat1)
        n1f = n1.reshape(b * 81, h)

        qh = buf(i, "qh", (b, nh, 81, dh))
        khT = buf(i, "khT", (b, nh, dh, 81))
        vh = buf(i, "vh", (b, nh, 81, dh))
        tmp = _scratch.get("proj_tmp", (b * 81, h), dtype)
        for w_name, b_name, dst, perm in (
            ("wq", "bq", qh, (0, 2, 1, 3)),
            ("wk", "bk", khT, (0, 2, 3, 1)),
            ("wv", "bv", vh, (0, 2, 1, 3)),
        ):
            np.matmul(n1f, pt[pre + "attn." + w_name], out=tmp)
            tmp += pt[pre + "attn." + b_name]
            np.copyto(dst, tmp.reshape(b, 81, nh, dh).transpose(perm))

        probs = buf(i, "probs", (b, nh, 81, 81))
        np.matmul(qh, khT, out=probs)
        probs *= scale
        _softmax_inplace(probs)
        if amask is not None:
            probs_d = buf(i, "probs_d", (b, nh, 81, 81))
            np.multiply(probs, amask, out=probs_d)
        else:
            probs_d = probs
        ctx = _scratch.get("ctx", (b, nh, 81, dh), dtype)
        np.matmul(probs_d, vh, out=ctx)
        ctxf = buf(i, "ctxf", (b * 81, h))
        np.copyto(ctxf.reshape(b, 81, nh, dh), ctx.transpose(0, 2, 1, 3))
        ao = _scratch.get("branch", (b, 81, h), dtype)
        np.matmul(ctxf, pt[pre + "attn.wo"], out=ao.reshape(b * 81, h))
        ao += pt[pre + "attn.bo"]
        if rmask1 is not None:
            ao *= rmask1
        hid += ao

        n2 = buf(i, "n2", (b, 81, h))
        xhat2 = buf(i, "xhat2", (b, 81, h))
        inv2 = _layer_norm(hid, pt[pre + "ln2.g"], pt[pre + "ln2.b"], n2, xhat2)
        m1 = buf(i, "m1", (b * 81, rh))
        np.matmul(n2.reshape(b * 81, h), pt[pre + "mlp.w1"], out=m1)
        m1 += pt[pre + "mlp.b1"]
        # GELU: g1 = m1 * Phi(m1), Phi the standard normal CDF via erf.
        gphi = buf(i, "gphi", (b * 81, rh))
        g1 = buf(i, "g1", (b * 81, rh))
        np.multiply(m1, dtype.type(_INV_SQRT2), out=gphi)
        if dtype == np.float32:
            t1 = _scratch.get("erf_t1", (b * 81, rh), dtype)
            t2 = _scratch.get("erf_t2", (b * 81, rh), dtype)
            _erf_f32_inplace(gphi, g1, t1, t2)
        else:
            erf(gphi, out=gphi)
        gphi += 1.0
        gphi *= 0.5
        np.multiply(m1, gphi, out=g1)
        m2 = ao  # branch buffer free again
        np.matmul(g1, pt[pre + "mlp.w2"], out=m2.reshape(b * 81, h))
        m2 += pt[pre + "mlp.b2"]
        if rmask2 is not None:
            m2 *= rmask2
        hid += m2

        if want_cache:
            cache["blocks"].append(
                {
                    "xhat1": xhat1,
                    "inv1": inv1,
                    "n1f": n1f,
                    "qh": qh,
                    "khT": khT,
                    "vh": vh,
                    "probs": probs,
                    "probs_d": probs_d,
                    "masks": (amask, rmask1, rmask2),
                    "ctxf": ctxf,
                    "xhat2": xhat2,
                    "inv2": inv2,
                    "n2f": n2.reshape(b * 81, h),
                    "m1": m1,
                    "gphi": gphi,
                    "g1": g1,
                }
            )

    nf = _scratch.get("c.nf" if want_cache else "nc.nf", (b, 81, h), dtype)
    xhatf = _scratch.get("c.xhatf" if want_cache else "nc.xhatf", (b, 81, h), dtype)
    invf = _layer_norm(hid, pt["final_ln.g"], pt["final_ln.b"], nf, xhatf)
    out = nf.reshape(b * 81, h) @ pt["head.w"] + pt["head.b"]
    out = out.reshape(b, 81, 9)
    if want_cache:
        cache["xhatf"] = xhatf
        cache["invf"] = invf
        cache["nf"] = nf
    return out, cache


def _backward(params: ModelParams, cache, dout):
    cfg = params.config
    pt = params.tensors
    dtype = params.dtype
    b = dout.shape[0]
    h = cfg.hidden
    nh = cfg.heads
    dh = h // nh
    rh = cfg.mlp_ratio * h
    scale = dtype.type(1.0 / np.sqrt(dh))
    grads = {}

    ta = _scratch.get("bw.ta", (b, 81, h), dtype)
    tb = _scratch.get("bw.tb", (b, 81, h), dtype)
    dbranch = _scratch.get("bw.branch", (b, 81, h), dtype)
    dres = _scratch.get("bw.res", (b, 81, h), dtype)
    dhid = _scratch.get("bw.dhid", (b, 81, h), dtype)
    dr1 = _scratch.get("bw.r1", (b * 81, rh), dtype)
    dr2 = _scratch.get("bw.r2", (b * 81, rh), dtype)
    dbig = _scratch.get("bw.big", (b, nh, 81, 81), dtype)
    dbig2 = _scratch.get("bw.big2", (b, nh, 81, 81), dtype)
    dctx = _scratch.get("bw.dctx", (b, nh, 81, dh), dtype)
    dheads = _scratch.get("bw.dheads", (b, nh, 81, dh), dtype)
    dflat = _scratch.get("bw.dflat", (b * 81, h), dtype)

    nf_flat = cache["nf"].reshape(b * 81, h)
    dout_flat = dout.reshape(b * 81, 9)
    grads["head.w"] = nf_flat.T @ dout_flat
    grads["head.b"] = dout_flat.sum(axis=0)
    dnf = (dout_flat @ pt["head.w"].T).reshape(b, 81, h)
    grads["final_ln.g"], grads["final_ln.b"] = _layer_norm_backward(
        dnf, pt["final_ln.g"], cache["xhatf"], cache["invf"], dhid, ta, tb
    )

    for i in reversed(range(cfg.layers)):
        pre = f"blocks.{i}."
        bc = cache["blocks"][i]
        amask, rmask1, rmask2 = bc["masks"]

        # MLP branch.
        if rmask2 is not None:
            np.multiply(dhid, rmask2, out=dbranch)
        else:
            np.copyto(dbranch, dhid)
        dm2f = dbranch.reshape(b * 81, h)
        grads[pre + "mlp.w2"] = bc["g1"].T @ dm2f
        grads[pre + "mlp.b2"] = dm2f.sum(axis=0)
        np.matmul(dm2f, pt[pre + "mlp.w2"].T, out=dr1)  # dg1
        # GELU derivative: Phi(x) + x * pdf(x).
        m1 = bc["m1"]
        np.multiply(m1, m1, out=dr2)
        dr2 *= -0.5
        np.exp(dr2, out=dr2)
        dr2 *= m1
        dr2 *= _INV_SQRT2PI
        dr2 += bc["gphi"]
        dr1 *= dr2  # dm1
        grads[pre + "mlp.w1"] = bc["n2f"].T @ dr1
        grads[pre + "mlp.b1"] = dr1.sum(axis=0)
        np.matmul(dr1, pt[pre + "mlp.w1"].T, out=dflat)
        grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layer_norm_backward(
            dflat.reshape(b, 81, h), pt[pre + "ln2.g"], bc["xhat2"], bc["inv2"],
            dres, ta, tb,
        )
        dhid += dres

        # Attention branch.
        if rmask1 is not None:
            np.multiply(dhid, rmask1, out=dbranch)
        else:
            np.copyto(dbranch, dhid)
        daof = dbranch.reshape(b * 81, h)
        grads[pre + "attn.wo"] = bc["ctxf"].T @ daof
        grads[pre + "attn.bo"] = daof.sum(axis=0)
        np.matmul(daof, pt[pre + "attn.wo"].T, out=dflat)
        np.copyto(dctx, dflat.reshape(b, 81, nh, dh).transpose(0, 2, 1, 3))
        np.matmul(dctx, bc["vh"].transpose(0, 1, 3, 2), out=dbig)  # dprobs_d
        np.matmul(bc["probs_d"].transpose(0, 1, 3, 2), dctx, out=dheads)  # dvh
        dvh_flat = dflat
        np.copyto(dvh_flat.reshape(b, 81, nh, dh), dheads.transpose(0, 2, 1, 3))
        grads[pre + "attn.wv"] = bc["n1f"].T @ dvh_flat
        grads[pre + "attn.bv"] = dvh_flat.sum(axis=0)
        np.matmul(dvh_flat, pt[pre + "attn.wv"].T, out=dres.reshape(b * 81, h))

        # Softmax (+ prob dropout) backward, fused: with pd = p * mask,
        # dscores = pd*dpd - p * rowsum(pd*dpd); when dropout is off pd is p
        # and this is the plain softmax Jacobian product.
        p = bc["probs"]
        np.multiply(bc["probs_d"], dbig, out=dbig2)
        rowsum = dbig2.sum(axis=-1, keepdims=True)
        np.multiply(p, rowsum, out=dbig)
        np.subtract(dbig2, dbig, out=dbig)
        dbig *= scale  # dscores

        np.matmul(dbig, bc["khT"].transpose(0, 1, 3, 2), out=dheads)  # dqh
        dq_flat = dflat
        np.copyto(dq_flat.reshape(b, 81, nh, dh), dheads.transpose(0, 2, 1, 3))
        grads[pre + "attn.wq"] = bc["n1f"].T @ dq_flat
        grads[pre + "attn.bq"] = dq_flat.sum(axis=0)
        tmp_res = dres.reshape(b * 81, h)
        np.matmul(dq_flat, pt[pre + "attn.wq"].T, out=dbranch.reshape(b * 81, h))
        tmp_res += dbranch.reshape(b * 81, h)

        np.matmul(dbig.transpose(0, 1, 3, 2), bc["qh"], out=dheads)  # dkh
        dk_flat = dflat
        np.copyto(dk_flat.reshape(b, 81, nh, dh), dheads.transpose(0, 2, 1, 3))
        grads[pre + "attn.wk"] = bc["n1f"].T @ dk_flat
        grads[pre + "attn.bk"] = dk_flat.sum(axis=0)
        np.matmul(dk_flat, pt[pre + "attn.wk"].T, out=dbranch.reshape(b * 81, h))
        tmp_res += dbranch.reshape(b * 81, h)

        grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layer_norm_backward(
            dres, pt[pre + "ln1.g"], bc["xhat1"], bc["inv1"], dbranch, ta, tb
        )
        dhid += dbranch

    # Embedding sum: input projection + position tables + broadcast time vector.
    xf = cache["x"].reshape(b * 81, 9)
    dhidf = dhid.reshape(b * 81, h)
    grads["embed.w"] = xf.T @ dhidf
    grads["embed.b"] = dhidf.sum(axis=0)
    dh_tokens = dhid.sum(axis=0)  # (81, H)
    for name, idx in (("pos.row", ROW_OF), ("pos.col", COL_OF), ("pos.box", BOX_OF)):
        g = np.zeros((9, h), dtype=dtype)
        np.add.at(g, idx, dh_tokens)
        grads[name] = g

    dtm = dhid.sum(axis=1)  # (B, H)
    grads["time.w2"] = cache["ts1"].T @ dtm
    grads["time.b2"] = dtm.sum(axis=0)
    dts1 = dtm @ pt["time.w2"].T
    tsig = cache["tsig"]
    dth1 = dts1 * (tsig * (1.0 + cache["th1"] * (1.0 - tsig)))
    grads["time.w1"] = cache["phi"].T @ dth1
    grads["time.b1"] = dth1.sum(axis=0)
    return grads


def _check_forward_args(params, x, t):
    x = np.asarray(x)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x.ndim != 3 or x.shape[1:] != (81, 9):
        raise ValueError(f"expected input of shape (batch, 81, 9), got {x.shape}")
    if t.shape != (x.shape[0],):
        raise ValueError(f"expected {x.shape[0]} time values, got shape {t.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("time values must lie in [0, 1]")
    if not np.isfinite(x).all():
        raise NumericError("non-finite entries in network input")
    return np.ascontiguousarray(x, dtype=params.dtype), t


def _resolve_gen(rng):
    if rng is None:
        return None
    return rng.generator() if isinstance(rng, RngStream) else rng


def forward(params: ModelParams, x, t, dropout_on: bool = False, rng=None) -> np.ndarray:
    """Model output of shape (batch, 81, 9)."""
    x, t = _check_forward_args(params, x, t)
    masks = None
    if dropout_on and params.config.dropout > 0.0:
        gen = _resolve_gen(rng)
        if gen is None:
            raise ValueError("dropout_on requires an rng")
        masks = _dropout_masks(params.config, x.shape[0], gen, params.dtype)
    out, _ = _forward(params, x, t, masks, want_cache=False)
    return out


def loss_and_grads(
    params: ModelParams, x, t, target, dropout_on: bool = False, rng=None
):
    """MSE loss against target and exact gradients for every parameter.

    The backward pass reuses the forward dropout realization, so gradients
    are exact for the sampled subnetwork.
    """
    x, t = _check_forward_args(params, x, t)
    target = np.ascontiguousarray(target, dtype=params.dtype)
    if target.shape != x.shape:
        raise ValueError(f"target shape {target.shape} != input shape {x.shape}")

    masks = None
    if dropout_on and params.config.dropout > 0.0:
        gen = _resolve_gen(rng)
        if gen is None:
            raise ValueError("dropout_on requires an rng")
        masks = _dropout_masks(params.config, x.shape[0], gen, params.dtype)

    out, cache = _forward(params, x, t, masks, want_cache=True)
    diff = out - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dout = diff
    dout *= params.dtype.type(2.0 / diff.size)

    grads = _backward(params, cache, dout)
    return loss, grads


def grad_check(
    params: ModelParams,
    probe_count: int = 200,
    eps: float = 1e-5,
    seed: int = 0,
    batch: int = 3,
) -> float:
    """Max relative error of analytic gradients vs centered finite differences.

    Runs in the params' own precision; pass float64 params for meaningful
    tolerances. Dropout is off. Relative error denominators are floored at
    1e-8.
    """
    gen = RngStream(seed, ("grad_check",)).generator()
    x = gen.standard_normal((batch, 81, 9)).astype(params.dtype)
    t = gen.random(batch)
    target = gen.standard_normal((batch, 81, 9)).astype(params.dtype)

    _, grads = loss_and_grads(params, x, t, target)
    grads = {k: v.copy() for k, v in grads.items()}

    names = sorted(params.tensors)
    sizes = np.array([params.tensors[n].size for n in names], dtype=np.float64)
    probs = sizes / sizes.sum()
    max_rel = 0.0
    work = params.copy()
    for _ in range(probe_count):
        name = names[int(gen.choice(len(names), p=probs))]
        flat_idx = int(gen.integers(params.tensors[name].size))
        idx = np.unravel_index(flat_idx, params.tensors[name].shape)
        orig = work.tensors[name][idx]

        work.tensors[name][idx] = orig + eps
        lp = _loss_only(work, x, t, target)
        work.tensors[name][idx] = orig - eps
        lm = _loss_only(work, x, t, target)
        work.tensors[name][idx] = orig

        numeric = (lp - lm) / (2.0 * eps)
        analytic = float(grads[name][idx])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel


def _loss_only(params, x, t, target):
    out, _ = _forward(params, x, t, None, want_cache=False)
    diff = out - target
    return float(np.mean(diff.astype(np.float64) ** 2))


# Checkpoint format v1 (all little-endian):
#   magic "GFLW" | version u32 | config: hidden, layers, heads, time_dim,
#   mlp_ratio as u32; f_max, dropout as f64 | meta: u32 byte length + UTF-8
#   JSON | tensor count u32 | per tensor (sorted by name): name length u32,
#   name bytes, rank u32, dims u32 each, row-major f32 payload.
_MAGIC = b"GFLW"
_VERSION = 1


def save_params(params: ModelParams, path, meta: dict | None = None) -> None:
    cfg = params.config
    meta_bytes = json.dumps(
        meta if meta is not None else params.meta, sort_keys=True
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(
        struct.pack(
            "<5I2d",
            cfg.hidden,
            cfg.layers,
            cfg.heads,
            cfg.time_dim,
            cfg.mlp_ratio,
            cfg.f_max,
            cfg.dropout,
        )
    )
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    names = sorted(params.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_params(path, dtype=np.float32) -> ModelParams:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointError("bad magic bytes; not a gridflow checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        hidden, layers, heads, time_dim, mlp_ratio, f_max, dropout = struct.unpack(
            "<5I2d", _read_exact(fh, 36, "config")
        )
        cfg = ModelConfig(hidden, layers, heads, time_dim, f_max, mlp_ratio, dropout)
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            payload = _read_exact(fh, 4 * int(np.prod(shape)), f"tensor {name}")
            tensors[name] = (
                np.frombuffer(payload, dtype="<f4").reshape(shape).astype(dtype)
            )
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")

    expected = _tensor_shapes(cfg)
    if set(tensors) != set(expected):
        missing = set(expected) ^ set(tensors)
        raise CheckpointError(f"tensor set mismatch: {sorted(missing)}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"tensor {name} has shape {tensors[name].shape}, expected {shape}"
            )
    return ModelParams(cfg, tensors, meta)
