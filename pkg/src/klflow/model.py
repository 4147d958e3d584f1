"""Bidirectional transformer denoiser with hand-rolled backprop.

The network maps a noisy sequence state (S x V logits plus a time in [0,1])
to per-position logits over the clean token. Everything is plain numpy so
the whole stack runs in either float32 (training) or float64
(finite-difference gradient verification) with no framework in between.

Input convention: each state row is softmaxed and multiplied into the token
embedding table, so a smoothed one-hot reduces to (almost) a standard token
embedding and a mixed row is the matching convex combination.

Time conditioning strategies:

- ``layer_norm_modulation``: a two-layer SiLU map of the sinusoidal time
  embedding feeds zero-initialized per-block linear heads that produce
  scale/shift applied after each normalization (and after the final norm).
  Zero init means a fresh model ignores t entirely.
- ``time_token``: the time feature is prepended as an extra sequence
  position and stripped from the output.
- ``additive``: the time feature is added to every position's embedding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, InputError, NumericError
from .simplex import SequenceState, softmax

TIME_STRATEGIES = ("layer_norm_modulation", "time_token", "additive")

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class TransformerConfig:
    layers: int
    heads: int
    embed_dim: int
    vocab_size: int
    max_seq_len: int
    time_conditioning: str = "layer_norm_modulation"
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("layers", "heads", "embed_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.time_conditioning not in TIME_STRATEGIES:
            raise ConfigError(
                f"unknown time_conditioning {self.time_conditioning!r}; "
                f"expected one of {TIME_STRATEGIES}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "heads": self.heads, "embed_dim": self.embed_dim,
            "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
            "time_conditioning": self.time_conditioning, "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)


def param_shapes(cfg: TransformerConfig) -> dict[str, tuple]:
    """Full tensor inventory, in a fixed order (init and checkpoints rely on it)."""
    d, v = cfg.embed_dim, cfg.vocab_size
    shapes: dict[str, tuple] = {
        "tok_embed": (v, d),
        "pos_embed": (cfg.max_seq_len, d),
        "time_mlp.w1": (d, d),
        "time_mlp.b1": (d,),
        "time_mlp.w2": (d, d),
        "time_mlp.b2": (d,),
    }
    for i in range(cfg.layers):
        p = f"block{i}."
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "mlp.w1"] = (d, cfg.mlp_dim)
        shapes[p + "mlp.b1"] = (cfg.mlp_dim,)
        shapes[p + "mlp.w2"] = (cfg.mlp_dim, d)
        shapes[p + "mlp.b2"] = (d,)
        if cfg.time_conditioning == "layer_norm_modulation":
            shapes[p + "mod.w"] = (d, 4 * d)
            shapes[p + "mod.b"] = (4 * d,)
    if cfg.time_conditioning == "layer_norm_modulation":
        shapes["final_mod.w"] = (d, 2 * d)
        shapes["final_mod.b"] = (2 * d,)
    shapes["head.w"] = (d, v)
    shapes["head.b"] = (v,)
    return shapes


def init_params(cfg: TransformerConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters.

    Residual-branch output projections get the 1/sqrt(2*layers) shrink;
    modulation heads and the output head start at zero so a new model
    predicts the uniform distribution and ignores t.
    """
    resid_std = INIT_STD / math.sqrt(2 * cfg.layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head.") or ".mod." in name or name.startswith("final_mod"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith((".b1", ".b2")):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(("attn.wo", "mlp.w2")):
            params[name] = rng.normal(0.0, resid_std, shape).astype(dtype)
        else:
            params[name] = rng.normal(0.0, INIT_STD, shape).astype(dtype)
    return params


def num_params(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


# --- primitive forward/backward pairs ------------------------------------

def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _silu_backward(dy, x, s):
    return dy * (s * (1.0 + x * (1.0 - s)))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_backward(dy, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dy * (cdf + x * pdf)


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat, inv


def _layernorm_backward(dy, xhat, inv):
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * xhat).mean(axis=-1, keepdims=True)
    return inv * (dy - m1 - xhat * m2)


def _softmax_backward(dA, A):
    return A * (dA - np.sum(dA * A, axis=-1, keepdims=True))


def time_features(t: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of t in [0,1], shape (B, dim).

    t is stretched to [0,1000] before the usual log-spaced frequencies so
    the fastest channel resolves step-size-scale differences in t.
    """
    half = dim // 2
    exponents = np.arange(half, dtype=np.float64) / max(half - 1, 1)
    freqs = np.exp(-math.log(10000.0) * exponents)
    args = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=-1)
    return emb.astype(dtype)


def input_embedding(params: dict, state_logits: np.ndarray) -> np.ndarray:
    """Map state rows onto the embedding space: softmax(row) @ E + positions.

    A smoothed one-hot row reduces to (nearly) that token's embedding; a
    mixed row lands on the matching convex combination. (B, S, D).
    """
    dtype = params["tok_embed"].dtype
    s = state_logits.shape[1]
    probs = softmax(np.asarray(state_logits, dtype=np.float64), axis=-1).astype(dtype)
    return probs @ params["tok_embed"] + params["pos_embed"][None, :s, :]


# --- forward -------------------------------------------------------------

def _check_state_shapes(cfg: TransformerConfig, state_logits: np.ndarray, t: np.ndarray):
    if state_logits.ndim != 3:
        raise InputError(f"expected (B,S,V) state logits, got shape {state_logits.shape}")
    b, s, v = state_logits.shape
    if v != cfg.vocab_size:
        raise InputError(f"state vocab {v} != config vocab {cfg.vocab_size}")
    if s > cfg.max_seq_len:
        raise InputError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if t.shape != (b,):
        raise InputError(f"t must have shape ({b},), got {t.shape}")


def forward(params: dict, cfg: TransformerConfig, state_logits: np.ndarray,
            t: np.ndarray, want_cache: bool = False):
    """Run the denoiser on a batch.

    state_logits: (B, S, V); t: (B,). Returns (B, S, V) output logits, plus
    the activation cache when ``want_cache`` (needed for backward).
    """
    dtype = params["tok_embed"].dtype
    state_logits = np.asarray(state_logits)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    _check_state_shapes(cfg, state_logits, t)
    b, s, v = state_logits.shape
    d = cfg.embed_dim
    adaln = cfg.time_conditioning == "layer_norm_modulation"

    probs = softmax(state_logits.astype(np.float64), axis=-1).astype(dtype)
    x = input_embedding(params, state_logits)

    sinus = time_features(t, d, dtype)
    th = sinus @ params["time_mlp.w1"] + params["time_mlp.b1"]
    ta, tsig = _silu(th)
    tfeat = ta @ params["time_mlp.w2"] + params["time_mlp.b2"]  # (B, d)

    if cfg.time_conditioning == "additive":
        x = x + tfeat[:, None, :]
    elif cfg.time_conditioning == "time_token":
        x = np.concatenate([tfeat[:, None, :], x], axis=1)

    cache = {
        "probs": probs, "sinus": sinus, "th": th, "tsig": tsig, "ta": ta,
        "tfeat": tfeat, "blocks": [], "s": s,
    } if want_cache else None

    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.layers):
        p = f"block{i}."
        if adaln:
            mod = tfeat @ params[p + "mod.w"] + params[p + "mod.b"]
            sc1, sh1, sc2, sh2 = np.split(mod, 4, axis=-1)
        x_in = x
        n1hat, inv1 = _layernorm(x)
        n1 = n1hat * (1.0 + sc1[:, None, :]) + sh1[:, None, :] if adaln else n1hat

        q = n1 @ params[p + "attn.wq"]
        k = n1 @ params[p + "attn.wk"]
        vv = n1 @ params[p + "attn.wv"]
        se = q.shape[1]
        qh = q.reshape(b, se, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        kh = k.reshape(b, se, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        vh = vv.reshape(b, se, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        att = softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale, axis=-1)
        ctx = (att @ vh).transpose(0, 2, 1, 3).reshape(b, se, d)
        x = x + ctx @ params[p + "attn.wo"]

        x_mid = x
        n2hat, inv2 = _layernorm(x)
        n2 = n2hat * (1.0 + sc2[:, None, :]) + sh2[:, None, :] if adaln else n2hat
        h1 = n2 @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        g = _gelu(h1)
        x = x + g @ params[p + "mlp.w2"] + params[p + "mlp.b2"]

        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation leaving block {i}", step=i)
        if want_cache:
            cache["blocks"].append({
                "x_in": x_in, "n1hat": n1hat, "inv1": inv1, "n1": n1,
                "qh": qh, "kh": kh, "vh": vh, "att": att, "ctx": ctx,
                "x_mid": x_mid, "n2hat": n2hat, "inv2": inv2, "n2": n2,
                "h1": h1, "g": g,
                "sc1": sc1 if adaln else None, "sc2": sc2 if adaln else None,
            })

    nfhat, invf = _layernorm(x)
    if adaln:
        fmod = tfeat @ params["final_mod.w"] + params["final_mod.b"]
        fsc, fsh = np.split(fmod, 2, axis=-1)
        nf = nfhat * (1.0 + fsc[:, None, :]) + fsh[:, None, :]
    else:
        nf = nfhat
    if cfg.time_conditioning == "time_token":
        nf_out = nf[:, 1:, :]
    else:
        nf_out = nf
    out = nf_out @ params["head.w"] + params["head.b"]

    if want_cache:
        cache.update({
            "nfhat": nfhat, "invf": invf, "nf": nf, "nf_out": nf_out,
            "fsc": fsc if adaln else None,
        })
        return out, cache
    return out


def backward(params: dict, cfg: TransformerConfig, cache: dict,
             dout: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter, given d(loss)/d(out)."""
    adaln = cfg.time_conditioning == "layer_norm_modulation"
    b = dout.shape[0]
    d = cfg.embed_dim
    s = cache["s"]
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    dtfeat = np.zeros_like(cache["tfeat"])

    nf_out = cache["nf_out"]
    grads["head.w"] += nf_out.reshape(-1, d).T @ dout.reshape(-1, cfg.vocab_size)
    grads["head.b"] += dout.sum(axis=(0, 1))
    dnf_out = dout @ params["head.w"].T

    if cfg.time_conditioning == "time_token":
        dnf = np.zeros_like(cache["nf"])
        dnf[:, 1:, :] = dnf_out
    else:
        dnf = dnf_out

    if adaln:
        fsc = cache["fsc"]
        dnfhat = dnf * (1.0 + fsc[:, None, :])
        dfsc = (dnf * cache["nfhat"]).sum(axis=1)
        dfsh = dnf.sum(axis=1)
        dfmod = np.concatenate([dfsc, dfsh], axis=-1)
        grads["final_mod.w"] += cache["tfeat"].T @ dfmod
        grads["final_mod.b"] += dfmod.sum(axis=0)
        dtfeat += dfmod @ params["final_mod.w"].T
    else:
        dnfhat = dnf
    dx = _layernorm_backward(dnfhat, cache["nfhat"], cache["invf"])

    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in reversed(range(cfg.layers)):
        p = f"block{i}."
        blk = cache["blocks"][i]
        se = blk["n1"].shape[1]

        # MLP sublayer
        dg = dx @ params[p + "mlp.w2"].T
        grads[p + "mlp.w2"] += blk["g"].reshape(-1, cfg.mlp_dim).T @ dx.reshape(-1, d)
        grads[p + "mlp.b2"] += dx.sum(axis=(0, 1))
        dh1 = _gelu_backward(dg, blk["h1"])
        dn2 = dh1 @ params[p + "mlp.w1"].T
        grads[p + "mlp.w1"] += blk["n2"].reshape(-1, d).T @ dh1.reshape(-1, cfg.mlp_dim)
        grads[p + "mlp.b1"] += dh1.sum(axis=(0, 1))
        if adaln:
            dn2hat = dn2 * (1.0 + blk["sc2"][:, None, :])
            dsc2 = (dn2 * blk["n2hat"]).sum(axis=1)
            dsh2 = dn2.sum(axis=1)
        else:
            dn2hat = dn2
        dx = dx + _layernorm_backward(dn2hat, blk["n2hat"], blk["inv2"])

        # attention sublayer
        dctx_o = dx @ params[p + "attn.wo"].T
        grads[p + "attn.wo"] += blk["ctx"].reshape(-1, d).T @ dx.reshape(-1, d)
        dctx = dctx_o.reshape(b, se, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        datt = dctx @ blk["vh"].transpose(0, 1, 3, 2)
        dvh = blk["att"].transpose(0, 1, 3, 2) @ dctx
        dscores = _softmax_backward(datt, blk["att"]) * scale
        dqh = dscores @ blk["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ blk["qh"]
        dq = dqh.transpose(0, 2, 1, 3).reshape(b, se, d)
        dk = dkh.transpose(0, 2, 1, 3).reshape(b, se, d)
        dv = dvh.transpose(0, 2, 1, 3).reshape(b, se, d)
        n1_flat = blk["n1"].reshape(-1, d)
        grads[p + "attn.wq"] += n1_flat.T @ dq.reshape(-1, d)
        grads[p + "attn.wk"] += n1_flat.T @ dk.reshape(-1, d)
        grads[p + "attn.wv"] += n1_flat.T @ dv.reshape(-1, d)
        dn1 = dq @ params[p + "attn.wq"].T + dk @ params[p + "attn.wk"].T \
            + dv @ params[p + "attn.wv"].T
        if adaln:
            dn1hat = dn1 * (1.0 + blk["sc1"][:, None, :])
            dsc1 = (dn1 * blk["n1hat"]).sum(axis=1)
            dsh1 = dn1.sum(axis=1)
            dmod = np.concatenate([dsc1, dsh1, dsc2, dsh2], axis=-1)
            grads[p + "mod.w"] += cache["tfeat"].T @ dmod
            grads[p + "mod.b"] += dmod.sum(axis=0)
            dtfeat += dmod @ params[p + "mod.w"].T
        else:
            dn1hat = dn1
        dx = dx + _layernorm_backward(dn1hat, blk["n1hat"], blk["inv1"])

    # peel off the time-token / additive injection
    if cfg.time_conditioning == "time_token":
        dtfeat += dx[:, 0, :]
        dx = dx[:, 1:, :]
    elif cfg.time_conditioning == "additive":
        dtfeat += dx.sum(axis=1)

    # time MLP
    grads["time_mlp.w2"] += cache["ta"].T @ dtfeat
    grads["time_mlp.b2"] += dtfeat.sum(axis=0)
    dta = dtfeat @ params["time_mlp.w2"].T
    dth = _silu_backward(dta, cache["th"], cache["tsig"])
    grads["time_mlp.w1"] += cache["sinus"].T @ dth
    grads["time_mlp.b1"] += dth.sum(axis=0)

    # embeddings
    grads["tok_embed"] += np.einsum("bsv,bsd->vd", cache["probs"], dx)
    grads["pos_embed"][:s] += dx.sum(axis=0)
    return grads


# --- loss ----------------------------------------------------------------

def denoising_loss(output_logits: np.ndarray, target_tokens: np.ndarray,
                   mask: np.ndarray | None = None) -> float:
    """Weighted mean negative log-likelihood of the targets under
    row-softmaxed logits.

    Accepts (S,V) or (B,S,V). ``mask`` is a per-position weight; a boolean
    mask (pad exclusion) is the common case, float weights support
    importance-weighted variants of the objective.
    """
    logits = np.asarray(output_logits, dtype=np.float64)
    squeeze = logits.ndim == 2
    if squeeze:
        logits = logits[None]
    targets = np.asarray(target_tokens, dtype=np.int64).reshape(logits.shape[:2])
    if targets.max(initial=0) >= logits.shape[-1] or targets.min(initial=0) < 0:
        raise InputError("target token out of vocabulary range")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    tgt_logit = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = logz - tgt_logit
    if mask is None:
        return float(nll.mean())
    w = np.asarray(mask, dtype=np.float64).reshape(nll.shape)
    total = w.sum()
    if total <= 0:
        raise InputError("loss mask excludes every position")
    return float((nll * w).sum() / total)


def loss_grad_wrt_logits(output_logits: np.ndarray, target_tokens: np.ndarray,
                         mask: np.ndarray | None = None) -> np.ndarray:
    """d(weighted mean NLL)/d(logits) = weight * (softmax - onehot) / sum(weight)."""
    logits = np.asarray(output_logits)
    p = softmax(logits.astype(np.float64), axis=-1)
    targets = np.asarray(target_tokens, dtype=np.int64).reshape(logits.shape[:-1])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    g = p - onehot
    if mask is None:
        total = float(np.prod(targets.shape))
    else:
        w = np.asarray(mask, dtype=np.float64).reshape(targets.shape)
        g = g * w[..., None]
        total = float(w.sum())
    return (g / total).astype(logits.dtype)


def loss_and_grad(params: dict, cfg: TransformerConfig, state_logits: np.ndarray,
                  t: np.ndarray, target_tokens: np.ndarray,
                  mask: np.ndarray | None = None):
    """Denoising loss and its gradient w.r.t. every parameter tensor."""
    state_logits = np.asarray(state_logits)
    if state_logits.ndim == 2:
        state_logits = state_logits[None]
        target_tokens = np.asarray(target_tokens)[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    out, cache = forward(params, cfg, state_logits, t, want_cache=True)
    loss = denoising_loss(out, target_tokens, mask)
    dout = loss_grad_wrt_logits(out, target_tokens, mask)
    grads = backward(params, cfg, cache, dout)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    return loss, grads


class TransformerDenoiser:
    """Callable bundle of (params, config) implementing the denoiser protocol."""

    def __init__(self, params: dict, cfg: TransformerConfig):
        missing = set(param_shapes(cfg)) - set(params)
        if missing:
            raise InputError(f"missing parameter tensors: {sorted(missing)}")
        self.params = params
        self.cfg = cfg

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @classmethod
    def initialize(cls, cfg: TransformerConfig, rng: np.random.Generator,
                   dtype=np.float32) -> "TransformerDenoiser":
        return cls(init_params(cfg, rng, dtype), cfg)

    def predict_logits(self, state: SequenceState) -> np.ndarray:
        """Output logits over clean tokens for one state, shape (S, V)."""
        out = forward(self.params, self.cfg, state.logits[None], np.array([state.t]))
        return np.asarray(out[0], dtype=np.float64)

    def predict_logits_batch(self, state_logits: np.ndarray, t: np.ndarray) -> np.ndarray:
        out = forward(self.params, self.cfg, state_logits, t)
        return np.asarray(out, dtype=np.float64)
