"""Unified (prefix-LM) transformer in numpy with a hand-written backward pass.

Input vectors are the sum of token, position, type and role embeddings.
Blocks are pre-norm (LayerNorm -> masked multi-head attention -> residual,
LayerNorm -> GELU MLP -> residual), followed by a final LayerNorm and an
output projection tied to the token embedding table by default.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .batching import Batch

LN_EPS = 1e-5
INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 512
    n_types: int = 3
    n_roles: int = 9
    max_positions: int = 256
    init_scale_seed: int = 0
    tie_embeddings: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "n_types", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_roles < 2:
            raise ValueError(f"n_roles must be at least 2, got {self.n_roles}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ff
        out = {
            "tok_emb": (self.vocab_size, d),
            "pos_emb": (self.max_positions, d),
            "type_emb": (self.n_types, d),
            "role_emb": (self.n_roles, d),
        }
        for i in range(self.n_layers):
            p = f"h{i}."
            out.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
                p + "attn.w_out": (d, d), p + "attn.b_out": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "mlp.w_in": (d, f), p + "mlp.b_in": (f,),
                p + "mlp.w_out": (f, d), p + "mlp.b_out": (d,),
            })
        out["ln_f.g"] = (d,)
        out["ln_f.b"] = (d,)
        if not self.tie_embeddings:
            out["lm_head"] = (d, self.vocab_size)
        return out

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    # Bumped on every in-place update so stale traces can be detected.
    version: int = 0

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def copy(self, dtype=None) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.astype(dtype or v.dtype, copy=True)
                                             for k, v in self.tensors.items()})

    def output_weight(self) -> np.ndarray:
        """(d_model, vocab) projection applied to the final hidden states."""
        return self.tensors["tok_emb"].T if self.config.tie_embeddings else self.tensors["lm_head"]


def init_params(config: ModelConfig, seed: Optional[int] = None, dtype=np.float32) -> ModelParameters:
    """Gaussian(0, 0.02) weights; residual output projections shrunk by 1/sqrt(2 * n_layers)."""
    config.validate()
    rng = np.random.default_rng(config.init_scale_seed if seed is None else seed)
    resid_std = INIT_STD / math.sqrt(2 * config.n_layers)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith(".g"):
            t = np.ones(shape)
        elif name.endswith((".b", ".b_qkv", ".b_out", ".b_in")):
            t = np.zeros(shape)
        elif name.endswith(("attn.w_out", "mlp.w_out")):
            t = rng.normal(0.0, resid_std, shape)
        else:
            t = rng.normal(0.0, INIT_STD, shape)
        tensors[name] = t.astype(dtype)
    return ModelParameters(config, tensors)


def embed(batch: Batch, params: ModelParameters) -> np.ndarray:
    cfg = params.config
    for ids, name, bound in ((batch.token_ids, "token", cfg.vocab_size),
                             (batch.position_ids, "position", cfg.max_positions),
                             (batch.type_ids, "type", cfg.n_types),
                             (batch.role_ids, "role", cfg.n_roles)):
        if ids.size and (ids.min() < 0 or ids.max() >= bound):
            raise ValueError(f"{name} id out of range [0, {bound}): min {ids.min()}, max {ids.max()}")
    t = params.tensors
    return (t["tok_emb"][batch.token_ids] + t["pos_emb"][batch.position_ids]
            + t["type_emb"][batch.type_ids] + t["role_emb"][batch.role_ids])


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def _masked_softmax(scores, allowed):
    s = np.where(allowed, scores, -np.inf)
    m = s.max(-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    denom = e.sum(-1, keepdims=True)
    # Fully masked rows (padding) get all-zero weights.
    return e / np.where(denom > 0, denom, 1.0)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    caches: list = field(repr=False)
    final: tuple = field(repr=False)
    params_id: int = 0
    params_version: int = 0
    batch_id: int = 0


class StaleTraceError(RuntimeError):
    pass


def _check_finite(x, where):
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite activation in {where}")


def forward(batch: Batch, params: ModelParameters) -> ForwardTrace:
    cfg = params.config
    t = params.tensors
    B, L = batch.token_ids.shape
    H, dh = cfg.n_heads, cfg.d_head
    allowed = (batch.attention_mask != 0)[:, None, :, :]
    scale = 1.0 / math.sqrt(dh)

    x = embed(batch, params)
    _check_finite(x, "embedding")
    caches = []
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a, ln1 = _layer_norm(x, t[p + "ln1.g"], t[p + "ln1.b"])
        qkv = a @ t[p + "attn.w_qkv"] + t[p + "attn.b_qkv"]
        q, k, v = (z.reshape(B, L, H, dh).transpose(0, 2, 1, 3) for z in np.split(qkv, 3, axis=-1))
        probs = _masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, allowed)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, cfg.d_model)
        x = x + ctx @ t[p + "attn.w_out"] + t[p + "attn.b_out"]
        m, ln2 = _layer_norm(x, t[p + "ln2.g"], t[p + "ln2.b"])
        pre = m @ t[p + "mlp.w_in"] + t[p + "mlp.b_in"]
        hid, tanh_cache = _gelu(pre)
        x = x + hid @ t[p + "mlp.w_out"] + t[p + "mlp.b_out"]
        _check_finite(x, f"layer {i}")
        caches.append((a, ln1, q, k, v, probs, ctx, m, ln2, pre, hid, tanh_cache))
    hf, lnf = _layer_norm(x, t["ln_f.g"], t["ln_f.b"])
    logits = hf @ params.output_weight()
    _check_finite(logits, "output projection")
    return ForwardTrace(logits, caches, (hf, lnf), id(params), params.version, id(batch))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def nll_loss(trace: ForwardTrace, batch: Batch):
    """Mean NLL (nats/token) over loss-masked positions, each predicted from the previous position.

    Returns (loss, per_token) where per_token is B x L with zeros off the mask.
    """
    mask = batch.loss_mask.astype(bool)
    total = int(mask.sum())
    if total == 0:
        raise ValueError("loss mask is empty: no target tokens in batch")
    if mask[:, 0].any():
        raise ValueError("position 0 cannot be a prediction target")
    logp = log_softmax(trace.logits[:, :-1])
    targets = batch.token_ids[:, 1:]
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    per_token = np.zeros(batch.token_ids.shape, dtype=trace.logits.dtype)
    per_token[:, 1:] = np.where(mask[:, 1:], -picked, 0.0)
    return float(per_token.sum() / total), per_token


def backward(trace: ForwardTrace, batch: Batch, params: ModelParameters, grad_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Exact gradients of ``grad_scale * nll_loss`` w.r.t. every parameter tensor."""
    if (trace.params_id, trace.params_version, trace.batch_id) != (id(params), params.version, id(batch)):
        raise StaleTraceError("trace was not produced by forward on these parameters and batch")
    cfg = params.config
    t = params.tensors
    B, L = batch.token_ids.shape
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
    scale = 1.0 / math.sqrt(dh)
    grads = {k: np.zeros_like(v) for k, v in t.items()}

    mask = batch.loss_mask.astype(bool)
    total = int(mask.sum())
    if total == 0:
        raise ValueError("loss mask is empty: no target tokens in batch")
    probs_out = np.exp(log_softmax(trace.logits[:, :-1]))
    rows, cols = np.nonzero(mask[:, 1:])
    probs_out[rows, cols, batch.token_ids[rows, cols + 1]] -= 1.0
    probs_out *= (mask[:, 1:, None] * (grad_scale / total))
    dlogits = np.zeros_like(trace.logits)
    dlogits[:, :-1] = probs_out

    hf, lnf = trace.final
    flat_dl = dlogits.reshape(-1, cfg.vocab_size)
    flat_hf = hf.reshape(-1, d)
    if cfg.tie_embeddings:
        grads["tok_emb"] += flat_dl.T @ flat_hf
    else:
        grads["lm_head"] += flat_hf.T @ flat_dl
    dhf = dlogits @ params.output_weight().T
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_back(dhf, t["ln_f.g"], lnf)

    for i in reversed(range(cfg.n_layers)):
        p = f"h{i}."
        a, ln1, q, k, v, probs, ctx, m, ln2, pre, hid, tanh_cache = trace.caches[i]
        # MLP branch
        dout = dx.reshape(-1, d)
        grads[p + "mlp.w_out"] += hid.reshape(-1, cfg.d_ff).T @ dout
        grads[p + "mlp.b_out"] += dout.sum(0)
        dhid = dx @ t[p + "mlp.w_out"].T
        dpre = _gelu_back(dhid, pre, tanh_cache)
        flat_dpre = dpre.reshape(-1, cfg.d_ff)
        grads[p + "mlp.w_in"] += m.reshape(-1, d).T @ flat_dpre
        grads[p + "mlp.b_in"] += flat_dpre.sum(0)
        dm = dpre @ t[p + "mlp.w_in"].T
        dln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_back(dm, t[p + "ln2.g"], ln2)
        dx = dx + dln
        # attention branch
        dout = dx.reshape(-1, d)
        grads[p + "attn.w_out"] += ctx.reshape(-1, d).T @ dout
        grads[p + "attn.b_out"] += dout.sum(0)
        dctx = (dx @ t[p + "attn.w_out"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([z.transpose(0, 2, 1, 3).reshape(B, L, d) for z in (dq, dk, dv)], axis=-1)
        flat_dqkv = dqkv.reshape(-1, 3 * d)
        grads[p + "attn.w_qkv"] += a.reshape(-1, d).T @ flat_dqkv
        grads[p + "attn.b_qkv"] += flat_dqkv.sum(0)
        da = dqkv @ t[p + "attn.w_qkv"].T
        dln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_back(da, t[p + "ln1.g"], ln1)
        dx = dx + dln

    flat_dx = dx.reshape(-1, d)
    for name, ids in (("tok_emb", batch.token_ids), ("pos_emb", batch.position_ids),
                      ("type_emb", batch.type_ids), ("role_emb", batch.role_ids)):
        np.add.at(grads[name], ids.reshape(-1), flat_dx)
    return grads


def loss_and_grads(batch: Batch, params: ModelParameters, grad_scale: float = 1.0):
    trace = forward(batch, params)
    loss, _ = nll_loss(trace, batch)
    return loss, backward(trace, batch, params, grad_scale)


_CKPT_MAGIC = b"UDCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParameters, extra_header: Optional[dict] = None,
                    extra_tensors: Optional[dict[str, np.ndarray]] = None) -> None:
    """Versioned header (config JSON) followed by named little-endian float32 blobs."""
    header = {"format_version": _CKPT_VERSION, "config": asdict(params.config)}
    if extra_header:
        header.update(extra_header)
    blobs = [(k, params.tensors[k]) for k in sorted(params.tensors)]
    blobs += sorted((extra_tensors or {}).items())
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (params, header, extra_tensors)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(dtype)
        off += 4 * size
    config = ModelConfig(**header["config"])
    names = set(config.shapes())
    params = ModelParameters(config, {k: tensors.pop(k) for k in sorted(names)})
    for k, shp in config.shapes().items():
        if params.tensors[k].shape != shp:
            raise ValueError(f"{path}: tensor {k} has shape {params.tensors[k].shape}, expected {shp}")
    return params, header, tensors
