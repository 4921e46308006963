"""Prompt-guided multi-task inversion network.

Pipeline per call: patchify the 4-band patch and run a frozen windowed
self-attention backbone once, then for every requested task look up its prompt
row, run that task's cross-attentive adapter and decode a full-resolution map
with its MLP head.

Arrays are batched: images ``(B, 4, H, W)``, tokens ``(B, N, d)``.  Forward
helpers with a ``_fwd`` suffix return a cache consumed by the matching ``_bwd``
which produces gradients for trainable parameters only.
"""
import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .dataset import ALL_TASKS, TaskId
from .grid import Grid2D

ADAPTER_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2")
GELU_C = math.sqrt(2.0 / math.pi)
# fixed per-band standardisation (B2, B3, B4, B8 surface reflectance)
BAND_MEAN = (0.08, 0.10, 0.10, 0.28)
BAND_STD = (0.05, 0.05, 0.07, 0.15)

# Fixed per-task output gain: decoders work in roughly unit range and the
# gain maps back to physical units, so Adam's step size suits every task.
OUTPUT_SCALE = {
    TaskId.NDVI: 1.0, TaskId.GNDVI: 1.0, TaskId.SAVI: 1.0, TaskId.EVI: 1.0, TaskId.NDWI: 1.0,
    TaskId.H: 30.0, TaskId.AGB: 700.0, TaskId.CS: 330.0,
}
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    input_hw: int = 32
    in_channels: int = 4
    patch_p: int = 4
    embed_d: int = 64
    n_heads: int = 4
    window: int = 4
    n_backbone_blocks: int = 2
    decoder_hidden: int = 1024
    decoder_layers: int = 4
    decoder_mode: str = "global"
    backbone_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.in_channels != 4:
            raise ValueError("in_channels must be 4 (B2, B3, B4, B8)")
        if self.input_hw % self.patch_p:
            raise ValueError(f"input_hw {self.input_hw} not divisible by patch_p {self.patch_p}")
        if self.token_side % self.window:
            raise ValueError(f"token grid side {self.token_side} not divisible by window {self.window}")
        if self.embed_d % self.n_heads:
            raise ValueError(f"embed_d {self.embed_d} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.decoder_layers <= 10:
            raise ValueError("decoder_layers must lie in 1..10")
        if self.decoder_mode not in ("global", "tokenwise"):
            raise ValueError(f"decoder_mode must be 'global' or 'tokenwise', got {self.decoder_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.n_backbone_blocks < 0 or self.decoder_hidden < 1:
            raise ValueError("bad backbone depth or decoder width")

    @property
    def token_side(self):
        return self.input_hw // self.patch_p

    @property
    def n_tokens(self):
        return self.token_side ** 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def decoder_widths(self):
        """Layer widths from the decoder input to its output."""
        out = self.input_hw ** 2 if self.decoder_mode == "global" else self.patch_p ** 2
        return [self.embed_d] + [self.decoder_hidden] * (self.decoder_layers - 1) + [out]

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                raw = mapping[f.name]
                kwargs[f.name] = raw if f.type == "str" or isinstance(f.default, str) else int(raw)
        return cls(**kwargs)


def tiny_config(**overrides):
    """8x8 input, d=8, 2 heads, 2-layer decoder: small enough for exhaustive differencing."""
    base = dict(input_hw=8, patch_p=2, embed_d=8, n_heads=2, window=2, n_backbone_blocks=2,
                decoder_hidden=16, decoder_layers=2, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ModelParams:
    config: ModelConfig
    backbone: dict
    trainable: dict

    def copy(self):
        return replace(self, trainable={k: v.copy() for k, v in self.trainable.items()})

    def adapter(self, task):
        return {k: self.trainable[f"adapter.{task.name}.{k}"] for k in ADAPTER_KEYS}

    def decoder(self, task):
        n = self.config.decoder_layers
        return [(self.trainable[f"decoder.{task.name}.w{i}"], self.trainable[f"decoder.{task.name}.b{i}"])
                for i in range(n)]

    def backbone_hash(self):
        return params_hash(self.backbone)


def params_hash(groups):
    h = hashlib.sha256()
    for name in sorted(groups):
        arr = np.ascontiguousarray(groups[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# initialisation


def _glorot(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)


def init_backbone(cfg):
    rng = np.random.default_rng(cfg.backbone_seed)
    dt = cfg.np_dtype
    d = cfg.embed_d
    pin = cfg.patch_p ** 2 * cfg.in_channels
    out = {
        "input.mean": np.array(BAND_MEAN, dt),
        "input.std": np.array(BAND_STD, dt),
        "embed.w": _glorot(rng, pin, d, dt),
        "embed.b": np.zeros(d, dt),
    }
    for i in range(cfg.n_backbone_blocks):
        pre = f"blk{i}."
        out[pre + "ln1.g"] = np.ones(d, dt)
        out[pre + "ln1.b"] = np.zeros(d, dt)
        for k in ("q", "k", "v", "o"):
            out[pre + f"attn.w{k}"] = _glorot(rng, d, d, dt)
            out[pre + f"attn.b{k}"] = np.zeros(d, dt)
        out[pre + "ln2.g"] = np.ones(d, dt)
        out[pre + "ln2.b"] = np.zeros(d, dt)
        out[pre + "ffn.w1"] = _glorot(rng, d, 4 * d, dt)
        out[pre + "ffn.b1"] = np.zeros(4 * d, dt)
        out[pre + "ffn.w2"] = _glorot(rng, 4 * d, d, dt)
        out[pre + "ffn.b2"] = np.zeros(d, dt)
    out["final_ln.g"] = np.ones(d, dt)
    out["final_ln.b"] = np.zeros(d, dt)
    for v in out.values():
        v.setflags(write=False)
    return out


def init_trainable(cfg, seed):
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d = cfg.embed_d
    out = {"prompt": rng.normal(0.0, 0.02, (len(ALL_TASKS), d)).astype(dt)}
    for t in ALL_TASKS:
        pre = f"adapter.{t.name}."
        for k in ("q", "k", "v", "o"):
            out[pre + f"w{k}"] = _glorot(rng, d, d, dt)
            out[pre + f"b{k}"] = np.zeros(d, dt)
        out[pre + "w1"] = _glorot(rng, d, 4 * d, dt)
        out[pre + "b1"] = np.zeros(4 * d, dt)
        out[pre + "w2"] = _glorot(rng, 4 * d, d, dt)
        out[pre + "b2"] = np.zeros(d, dt)
        widths = cfg.decoder_widths()
        for i in range(cfg.decoder_layers):
            out[f"decoder.{t.name}.w{i}"] = _glorot(rng, widths[i], widths[i + 1], dt)
            out[f"decoder.{t.name}.b{i}"] = np.zeros(widths[i + 1], dt)
    return out


def init_params(cfg, seed=0):
    return ModelParams(cfg, init_backbone(cfg), init_trainable(cfg, seed))


# ---------------------------------------------------------------------------
# primitives


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x):
    inner = GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _wgrad(x, dy):
    """Weight gradient ``x^T dy`` over all leading axes, reduced in float64."""
    x2 = x.reshape(-1, x.shape[-1]).astype(np.float64)
    d2 = dy.reshape(-1, dy.shape[-1]).astype(np.float64)
    return (x2.T @ d2).astype(dy.dtype)


def _bgrad(dy):
    return dy.reshape(-1, dy.shape[-1]).astype(np.float64).sum(0).astype(dy.dtype)


def _split_heads(x, h):
    B, N, d = x.shape
    return x.reshape(B, N, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * dh)


# ---------------------------------------------------------------------------
# frozen backbone


def images_from(x, dtype=np.float32):
    """``(1, 4, H, W)`` array from a BandStack; nodata pixels are zero."""
    arr = np.where(x.valid[None], x.to_array(), 0.0).astype(dtype)
    return arr[None]


def patchify(images, p):
    B, C, H, W = images.shape
    S = H // p
    t = images.reshape(B, C, S, p, S, p).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(B, S * S, p * p * C)


def _shift_mask(side, window, shift):
    """Additive attention mask for cyclically shifted windows, ``(nW, w*w, w*w)``."""
    labels = np.zeros((side, side), np.int64)
    cuts = (slice(0, side - window), slice(side - window, side - shift), slice(side - shift, side))
    n = 0
    for rs in cuts:
        for cs in cuts:
            labels[rs, cs] = n
            n += 1
    win = _to_windows(labels[None, :, :, None], window)[..., 0][0]
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, -np.inf)


def _to_windows(x, w):
    B, S, _, d = x.shape
    n = S // w
    return x.reshape(B, n, w, n, w, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, n * n, w * w, d)


def _from_windows(x, w, S):
    B, nW, ww, d = x.shape
    n = S // w
    return x.reshape(B, n, n, w, w, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, S, S, d)


def window_attention(x, bb, pre, cfg, shift):
    """Multi-head self-attention inside (optionally shifted) windows of the token grid."""
    B, N, d = x.shape
    S, w, h = cfg.token_side, cfg.window, cfg.n_heads
    grid = x.reshape(B, S, S, d)
    if shift:
        grid = np.roll(grid, (-shift, -shift), axis=(1, 2))
    win = _to_windows(grid, w)
    nW = win.shape[1]
    flat = win.reshape(B * nW, w * w, d)
    q = _split_heads(flat @ bb[pre + "wq"] + bb[pre + "bq"], h)
    k = _split_heads(flat @ bb[pre + "wk"] + bb[pre + "bk"], h)
    v = _split_heads(flat @ bb[pre + "wv"] + bb[pre + "bv"], h)
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d // h)
    if shift:
        mask = _shift_mask(S, w, shift).astype(s.dtype)
        s = (s.reshape(B, nW, h, w * w, w * w) + mask[None, :, None]).reshape(s.shape)
    o = _merge_heads(softmax(s) @ v) @ bb[pre + "wo"] + bb[pre + "bo"]
    grid = _from_windows(o.reshape(B, nW, w * w, d), w, S)
    if shift:
        grid = np.roll(grid, (shift, shift), axis=(1, 2))
    return grid.reshape(B, N, d)


def backbone_forward(cfg, bb, images):
    """Frozen feature extractor: ``(B, 4, H, W)`` -> tokens ``(B, N, d)``."""
    images = np.asarray(images, dtype=cfg.np_dtype)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.in_channels, cfg.input_hw, cfg.input_hw):
        raise ValueError(f"expected images of shape (B, 4, {cfg.input_hw}, {cfg.input_hw}), got {images.shape}")
    images = (images - bb["input.mean"][:, None, None]) / bb["input.std"][:, None, None]
    x = patchify(images, cfg.patch_p) @ bb["embed.w"] + bb["embed.b"]
    for i in range(cfg.n_backbone_blocks):
        pre = f"blk{i}."
        shift = cfg.window // 2 if i % 2 else 0
        x = x + window_attention(layer_norm(x, bb[pre + "ln1.g"], bb[pre + "ln1.b"]), bb, pre + "attn.", cfg, shift)
        hdn = gelu(layer_norm(x, bb[pre + "ln2.g"], bb[pre + "ln2.b"]) @ bb[pre + "ffn.w1"] + bb[pre + "ffn.b1"])
        x = x + hdn @ bb[pre + "ffn.w2"] + bb[pre + "ffn.b2"]
    return layer_norm(x, bb["final_ln.g"], bb["final_ln.b"])


# ---------------------------------------------------------------------------
# prompt, adapter, decoder


def prompt_embed(table, task):
    return np.array(table[TaskId.parse(task).ordinal])


def cross_attend_fwd(a, f, q, n_heads):
    """Cross-attention with the prompt added to every query token.

    Queries are ``(f_i + q) Wq``; keys and values come from ``f``.
    """
    f = np.asarray(f)
    if f.ndim == 2:
        f = f[None]
    d = f.shape[-1]
    dh = d // n_heads
    xq = f + q
    qh = _split_heads(xq @ a["wq"] + a["bq"], n_heads)
    kh = _split_heads(f @ a["wk"] + a["bk"], n_heads)
    vh = _split_heads(f @ a["wv"] + a["bv"], n_heads)
    scale = 1.0 / math.sqrt(dh)
    p = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
    oc = _merge_heads(p @ vh)
    out = oc @ a["wo"] + a["bo"]
    return out, dict(f=f, xq=xq, qh=qh, kh=kh, vh=vh, p=p, oc=oc, scale=scale)


def cross_attend_bwd(a, cache, dout):
    n_heads = cache["qh"].shape[1]
    g = {"wo": _wgrad(cache["oc"], dout), "bo": _bgrad(dout)}
    do = _split_heads(dout @ a["wo"].T, n_heads)
    p, vh, qh, kh = cache["p"], cache["vh"], cache["qh"], cache["kh"]
    dp = do @ vh.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * cache["scale"]
    dq = _merge_heads(ds @ kh)
    dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ qh)
    dv = _merge_heads(dv)
    g["wq"], g["bq"] = _wgrad(cache["xq"], dq), _bgrad(dq)
    g["wk"], g["bk"] = _wgrad(cache["f"], dk), _bgrad(dk)
    g["wv"], g["bv"] = _wgrad(cache["f"], dv), _bgrad(dv)
    dprompt = _bgrad(dq @ a["wq"].T)
    return g, dprompt


def cross_attend(a, f, q, n_heads):
    out, _ = cross_attend_fwd(a, f, q, n_heads)
    return out[0] if np.ndim(f) == 2 else out


def attention_weights(a, f, q, n_heads):
    """Softmax weights ``(B, heads, N, N)`` of :func:`cross_attend`."""
    return cross_attend_fwd(a, f, q, n_heads)[1]["p"]


def adapter_fwd(a, f, q, n_heads):
    attn, c1 = cross_attend_fwd(a, f, q, n_heads)
    z = c1["f"] + attn
    h1 = z @ a["w1"] + a["b1"]
    g1 = gelu(h1)
    out = z + g1 @ a["w2"] + a["b2"]
    return out, dict(attn=c1, a=z, h1=h1, g1=g1)


def adapter_bwd(a, cache, dout):
    g = {"w2": _wgrad(cache["g1"], dout), "b2": _bgrad(dout)}
    dh1 = (dout @ a["w2"].T) * gelu_grad(cache["h1"])
    g["w1"], g["b1"] = _wgrad(cache["a"], dh1), _bgrad(dh1)
    dattn = dout + dh1 @ a["w1"].T
    g_attn, dprompt = cross_attend_bwd(a, cache["attn"], dattn)
    g.update(g_attn)
    return g, dprompt


def adapter_forward(a, f, q, n_heads):
    """Task-adapted tokens: ``z = f + cross_attend(f, q)``, then ``z + MLP(z)``."""
    out, _ = adapter_fwd(a, f, q, n_heads)
    return out[0] if np.ndim(f) == 2 else out


def decode_fwd(layers, ft, cfg):
    ft = np.asarray(ft)
    if ft.ndim == 2:
        ft = ft[None]
    h = ft.mean(1) if cfg.decoder_mode == "global" else ft
    acts = [h]
    pre = []
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            pre.append(z)
            h = np.maximum(z, 0)
            acts.append(h)
        else:
            h = z
    B = ft.shape[0]
    hw = cfg.input_hw
    if cfg.decoder_mode == "global":
        maps = h.reshape(B, hw, hw)
    else:
        S, p = cfg.token_side, cfg.patch_p
        maps = h.reshape(B, S, S, p, p).transpose(0, 1, 3, 2, 4).reshape(B, hw, hw)
    return maps, dict(acts=acts, pre=pre, n_tokens=ft.shape[1])


def decode_bwd(layers, cache, dmaps, cfg):
    B = dmaps.shape[0]
    if cfg.decoder_mode == "global":
        dh = dmaps.reshape(B, -1)
    else:
        S, p = cfg.token_side, cfg.patch_p
        dh = dmaps.reshape(B, S, p, S, p).transpose(0, 1, 3, 2, 4).reshape(B, S * S, p * p)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (_wgrad(cache["acts"][i], dh), _bgrad(dh))
        dh = dh @ w.T
        if i > 0:
            dh = dh * (cache["pre"][i - 1] > 0)
    if cfg.decoder_mode == "global":
        dft = np.repeat(dh[:, None, :] / cache["n_tokens"], cache["n_tokens"], axis=1)
    else:
        dft = dh
    return grads, dft


def decode(layers, ft, cfg):
    """Map task tokens to an ``input_hw x input_hw`` grid (array for batches, Grid2D for one)."""
    maps, _ = decode_fwd(layers, ft, cfg)
    if np.ndim(ft) == 2:
        return Grid2D(maps[0].astype(np.float32), np.ones(maps[0].shape, bool))
    return maps


def task_fwd(params, task, feats):
    """Prompt -> adapter -> decoder for one task on backbone tokens ``feats``."""
    cfg = params.config
    q = params.trainable["prompt"][task.ordinal]
    a = params.adapter(task)
    ft, ca = adapter_fwd(a, feats, q, cfg.n_heads)
    layers = params.decoder(task)
    maps, cd = decode_fwd(layers, ft, cfg)
    return maps * OUTPUT_SCALE[task], dict(adapter=ca, decoder=cd)


def task_bwd(params, task, cache, dmaps):
    """Gradients of one task's trainable groups, keyed by full parameter name."""
    cfg = params.config
    layers = params.decoder(task)
    dgrads, dft = decode_bwd(layers, cache["decoder"], dmaps * OUTPUT_SCALE[task], cfg)
    ag, dprompt = adapter_bwd(params.adapter(task), cache["adapter"], dft)
    out = {f"adapter.{task.name}.{k}": v for k, v in ag.items()}
    for i, (gw, gb) in enumerate(dgrads):
        out[f"decoder.{task.name}.w{i}"] = gw
        out[f"decoder.{task.name}.b{i}"] = gb
    return out, dprompt


def predict_maps(params, images, tasks, feats=None):
    """Batched prediction: ``{task: (B, H, W) array}``; backbone runs once."""
    if feats is None:
        feats = backbone_forward(params.config, params.backbone, images)
    return {t: task_fwd(params, t, feats)[0] for t in tasks}


def forward_all(params, x, tasks):
    """Predicted Grid2D per task for one BandStack patch."""
    tasks = [TaskId.parse(t) for t in tasks]
    if not tasks:
        raise ValueError("task set must be non-empty")
    tasks = sorted(set(tasks), key=lambda t: t.value)
    images = images_from(x, params.config.np_dtype)
    maps = predict_maps(params, images, tasks)
    return {t: Grid2D(m[0].astype(np.float32), np.ones(m[0].shape, bool)) for t, m in maps.items()}
