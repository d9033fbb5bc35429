"""Network architectures: toy velocity MLP, DiT-style velocity layer, micro teacher.

The teacher is a parallel-residual decoder (attention and MLP both read the
layer input and are summed into the stream). The velocity layer wraps one
teacher-style block with per-token modulation vectors predicted from time
features; with the modulation at its (scale=1, shift=0, gate=1) baseline the
block reproduces the unmodulated teacher layer bitwise.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, InputError
from .rng import stream
from .tensor import (
    Tensor,
    as_tensor,
    causal_attention,
    concat_cols,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    slice_axis,
    slice_cols,
)

N_TIME_FREQS = 8
TIME_FEATURES = 2 * N_TIME_FREQS
_TIME_FREQS = np.geomspace(1.0, 64.0, N_TIME_FREQS)


def check_time(t: np.ndarray) -> None:
    if t.min() < 0.0 or t.max() > 1.0:
        raise ContractError(f"time values must lie in [0, 1], got range [{t.min()}, {t.max()}]")


def time_features(t, n_rows: int | None = None) -> np.ndarray:
    """Sinusoidal features of t: sin/cos at 8 geometrically spaced frequencies."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0 and n_rows is not None:
        t = np.full(n_rows, float(t))
    check_time(t)
    ang = t[..., None] * _TIME_FREQS
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _init(rng, fan_in: int, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape) / np.sqrt(fan_in), requires_grad=True)


class VelocityMlp:
    """Small MLP velocity field u(x, t) for low-dimensional experiments."""

    def __init__(self, dim: int, hidden: int = 128, seed: int = 0):
        self.dim = dim
        rng = stream(seed, "init/velocity-mlp")
        d_in = dim + TIME_FEATURES
        self.w1 = _init(rng, d_in, d_in, hidden)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = _init(rng, hidden, hidden, hidden)
        self.b2 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w3 = _init(rng, hidden, hidden, dim)
        self.b3 = Tensor(np.zeros(dim), requires_grad=True)

    def named_parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2),
                ("b2", self.b2), ("w3", self.w3), ("b3", self.b3)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def __call__(self, x, t, context=None) -> Tensor:
        x = as_tensor(x)
        feats = Tensor(time_features(t, n_rows=x.shape[0]))
        h = concat_cols(x, feats)
        h = gelu(linear(h, self.w1, self.b1))
        h = gelu(linear(h, self.w2, self.b2))
        return linear(h, self.w3, self.b3)


# -- teacher ------------------------------------------------------------------


@dataclass
class MicroConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    context: int = 64
    ln_eps: float = 1e-5
    init_std: float = 0.02

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


def _layer_param_names():
    # no key bias: softmax is invariant to a uniform shift of each score row,
    # so a bias on the keys can never receive gradient
    return ("ln1_g", "ln1_b", "wq", "bq", "wk", "wv", "bv", "wo", "bo",
            "ln2_g", "ln2_b", "w_in", "b_in", "w_out", "b_out")


def _init_layer_params(rng, cfg: MicroConfig) -> dict[str, Tensor]:
    d, f, std = cfg.d_model, cfg.d_ff, cfg.init_std

    def w(*shape):
        return Tensor(rng.normal(size=shape) * std, requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    return {
        "ln1_g": Tensor(np.ones(d), requires_grad=True), "ln1_b": zeros(d),
        "wq": w(d, d), "bq": zeros(d), "wk": w(d, d),
        "wv": w(d, d), "bv": zeros(d), "wo": w(d, d), "bo": zeros(d),
        "ln2_g": Tensor(np.ones(d), requires_grad=True), "ln2_b": zeros(d),
        "w_in": w(d, f), "b_in": zeros(f), "w_out": w(f, d), "b_out": zeros(d),
    }


def attn_branch(lp: dict[str, Tensor], q_src, kv_src, n_heads: int) -> Tensor:
    q = linear(q_src, lp["wq"], lp["bq"])
    k = matmul(kv_src, lp["wk"])
    v = linear(kv_src, lp["wv"], lp["bv"])
    return linear(causal_attention(q, k, v, n_heads), lp["wo"], lp["bo"])


def mlp_branch(lp: dict[str, Tensor], x) -> Tensor:
    return linear(gelu(linear(x, lp["w_in"], lp["b_in"])), lp["w_out"], lp["b_out"])


def layer_forward(lp: dict[str, Tensor], h, n_heads: int, eps: float) -> Tensor:
    """Parallel-residual block: h + Attn(LN1(h)) + MLP(LN2(h))."""
    a_in = layer_norm(h, lp["ln1_g"], lp["ln1_b"], eps)
    m_in = layer_norm(h, lp["ln2_g"], lp["ln2_b"], eps)
    return h + attn_branch(lp, a_in, a_in, n_heads) + mlp_branch(lp, m_in)


class MicroTransformer:
    """Decoder-only language model with parallel-residual blocks."""

    def __init__(self, cfg: MicroConfig | None = None, seed: int = 0):
        self.cfg = cfg or MicroConfig()
        c = self.cfg
        rng = stream(seed, "init/teacher")
        self.tok_emb = Tensor(rng.normal(size=(c.vocab_size, c.d_model)) * c.init_std,
                              requires_grad=True)
        self.pos_emb = Tensor(rng.normal(size=(c.context, c.d_model)) * c.init_std,
                              requires_grad=True)
        self.layers = [_init_layer_params(rng, c) for _ in range(c.n_layers)]
        self.final_ln_g = Tensor(np.ones(c.d_model), requires_grad=True)
        self.final_ln_b = Tensor(np.zeros(c.d_model), requires_grad=True)
        self.unembed = Tensor(rng.normal(size=(c.d_model, c.vocab_size)) * c.init_std,
                              requires_grad=True)

    def named_parameters(self):
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, lp in enumerate(self.layers):
            for k in _layer_param_names():
                out.append((f"layers.{i}.{k}", lp[k]))
        out += [("final_ln_g", self.final_ln_g), ("final_ln_b", self.final_ln_b),
                ("unembed", self.unembed)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def layer_param_count(self) -> int:
        return sum(t.data.size for t in self.layers[0].values())

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise InputError("token id out of vocabulary")
        if tokens.shape[-1] > self.cfg.context:
            raise InputError(
                f"sequence length {tokens.shape[-1]} exceeds context {self.cfg.context}")
        return tokens

    def embed(self, tokens) -> Tensor:
        tokens = self._check_tokens(tokens)
        s = tokens.shape[-1]
        return embedding(self.tok_emb, tokens) + embedding(self.pos_emb, np.arange(s))

    def run_layers(self, h, lo: int, hi: int) -> Tensor:
        for lp in self.layers[lo:hi]:
            h = layer_forward(lp, h, self.cfg.n_heads, self.cfg.ln_eps)
        return h

    def logit_lens(self, h) -> Tensor:
        """Project a residual-stream latent to logits via final LN + unembedding."""
        h = as_tensor(h)
        if h.shape[-1] != self.cfg.d_model:
            raise InputError(f"latent width {h.shape[-1]} != d_model {self.cfg.d_model}")
        return matmul(layer_norm(h, self.final_ln_g, self.final_ln_b, self.cfg.ln_eps),
                      self.unembed)

    def forward(self, tokens, skip: tuple[int, int] | None = None):
        """Return (logits, latents); latents[l] is the input of layer l, latents[-1] the output.

        ``skip=(m, n)`` replaces layers m..n (inclusive) with the identity.
        """
        h = self.embed(tokens)
        latents = [h]
        for l in range(self.cfg.n_layers):
            if skip is not None and skip[0] <= l <= skip[1]:
                latents.append(h)
                continue
            h = layer_forward(self.layers[l], h, self.cfg.n_heads, self.cfg.ln_eps)
            latents.append(h)
        return self.logit_lens(h), latents

    def lm_loss(self, tokens) -> Tensor:
        """Mean next-token cross entropy over the sequence(s)."""
        tokens = np.asarray(tokens)
        logits, _ = self.forward(tokens)
        s = tokens.shape[-1]
        return cross_entropy(slice_axis(logits, -2, 0, s - 1), tokens[..., 1:])


# -- DiT-style velocity layer ---------------------------------------------------


class DitVelocityLayer:
    """One modulated teacher block acting as a velocity field over latents.

    Queries come from the transported state x_t; keys and values come from the
    frozen context stream (the block-input latents of all prior positions), so
    per-token times stay well defined. The conditioning MLP maps time features
    to scale/shift/gate deltas for both branches; its final layer starts at
    zero, which makes the initial velocity equal to (teacher block output - input).
    """

    def __init__(self, cfg: MicroConfig, seed: int = 0):
        self.cfg = cfg
        d = cfg.d_model
        rng = stream(seed, "init/dit-layer")
        self.lp = _init_layer_params(rng, cfg)
        self.cond_w1 = _init(rng, TIME_FEATURES, TIME_FEATURES, d)
        self.cond_b1 = Tensor(np.zeros(d), requires_grad=True)
        self.cond_w2 = Tensor(np.zeros((d, 6 * d)), requires_grad=True)
        self.cond_b2 = Tensor(np.zeros(6 * d), requires_grad=True)

    @classmethod
    def from_teacher_layer(cls, teacher: MicroTransformer, layer_index: int,
                           seed: int = 0) -> "DitVelocityLayer":
        layer = cls(teacher.cfg, seed=seed)
        src = teacher.layers[layer_index]
        for k in _layer_param_names():
            layer.lp[k].data = src[k].data.copy()
        return layer

    def named_parameters(self):
        out = [(k, self.lp[k]) for k in _layer_param_names()]
        out += [("cond_w1", self.cond_w1), ("cond_b1", self.cond_b1),
                ("cond_w2", self.cond_w2), ("cond_b2", self.cond_b2)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def cond_param_count(self) -> int:
        return sum(t.data.size for t in
                   (self.cond_w1, self.cond_b1, self.cond_w2, self.cond_b2))

    def modulations(self, t, n_rows: int) -> list[Tensor]:
        """Six per-token modulation deltas from t, each (rows, d_model)."""
        feats = Tensor(time_features(t, n_rows=n_rows))
        h = gelu(linear(feats, self.cond_w1, self.cond_b1))
        mods = linear(h, self.cond_w2, self.cond_b2)
        d = self.cfg.d_model
        return [slice_cols(mods, i * d, (i + 1) * d) for i in range(6)]

    def block_output(self, x, t, context=None) -> Tensor:
        """Modulated block output; same summation order as the teacher layer."""
        x = as_tensor(x)
        if x.ndim != 2:
            raise DimensionError(f"velocity layer expects (S, D) input, got {x.shape}")
        context = x if context is None else as_tensor(context)
        if context.shape != x.shape:
            raise DimensionError(
                f"context shape {context.shape} does not match input {x.shape}")
        ds_a, dsh_a, dg_a, ds_m, dsh_m, dg_m = self.modulations(t, x.shape[0])
        eps, heads = self.cfg.ln_eps, self.cfg.n_heads
        q_src = layer_norm(x, self.lp["ln1_g"], self.lp["ln1_b"], eps) * (ds_a + 1.0) + dsh_a
        kv_src = layer_norm(context, self.lp["ln1_g"], self.lp["ln1_b"], eps)
        att = attn_branch(self.lp, q_src, kv_src, heads) * (dg_a + 1.0)
        m_src = layer_norm(x, self.lp["ln2_g"], self.lp["ln2_b"], eps) * (ds_m + 1.0) + dsh_m
        mlp = mlp_branch(self.lp, m_src) * (dg_m + 1.0)
        return x + att + mlp

    def __call__(self, x, t, context=None) -> Tensor:
        x = as_tensor(x)
        return self.block_output(x, t, context) - x


# -- checkpoint format ----------------------------------------------------------

CHECKPOINT_MAGIC = b"LFTM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_arrays) -> None:
    """Write named float64 arrays: magic, version, manifest, then raw LE blobs."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in named_arrays:
        arr = np.asarray(arr, dtype=np.float64)
        entries.append((name, arr.shape, offset))
        blobs.append(arr.astype("<f8").tobytes())
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, shape, off in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(struct.pack("<Q", off))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        (n_entries,) = struct.unpack("<I", fh.read(4))
        manifest = []
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            (off,) = struct.unpack("<Q", fh.read(8))
            manifest.append((name, shape, off))
        blob_start = fh.tell()
        out = {}
        for name, shape, off in manifest:
            fh.seek(blob_start + off)
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
        return out


def save_teacher(path, model: MicroTransformer, extras=None) -> None:
    c = model.cfg
    named = [(f"_meta.{k}", np.asarray(float(v)))
             for k, v in (("vocab_size", c.vocab_size), ("d_model", c.d_model),
                          ("n_layers", c.n_layers), ("n_heads", c.n_heads),
                          ("context", c.context), ("ln_eps", c.ln_eps))]
    if extras:
        named += [(f"_extra.{k}", np.asarray(v, dtype=np.float64)) for k, v in extras.items()]
    named += [(name, p.data) for name, p in model.named_parameters()]
    save_checkpoint(path, named)


def load_teacher(path) -> tuple[MicroTransformer, dict[str, np.ndarray]]:
    arrays = load_checkpoint(path)

    def meta(name):
        return arrays[f"_meta.{name}"].reshape(-1)[0]

    cfg = MicroConfig(
        vocab_size=int(meta("vocab_size")),
        d_model=int(meta("d_model")),
        n_layers=int(meta("n_layers")),
        n_heads=int(meta("n_heads")),
        context=int(meta("context")),
        ln_eps=float(meta("ln_eps")),
    )
    model = MicroTransformer(cfg)
    for name, p in model.named_parameters():
        if name not in arrays:
            raise InputError(f"{path}: checkpoint missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise InputError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name].copy()
    extras = {k[len("_extra."):]: v for k, v in arrays.items() if k.startswith("_extra.")}
    return model, extras
