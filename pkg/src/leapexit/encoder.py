"""Compact transformer text encoder exposing per-layer mean-pooled vectors."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ContractError, CorruptCheckpointError, DegenerateInputError, SchemaVersionError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LEAPCKPT"
CHECKPOINT_VERSION = 1
_MASK_NEG = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    vocab_size: int = 256
    max_seq_len: int = 32
    pooling: str = "mean"
    # "pre": h + f(LN(h)); "post": LN(h + f(h)) as in BERT-style encoders.
    norm_style: str = "pre"
    # std multiplier on the output projections of each residual branch
    residual_init: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 2:
            raise ContractError("num_layers must be >= 2")
        if self.hidden_dim % self.num_heads:
            raise ContractError("hidden_dim must be divisible by num_heads")
        if self.pooling != "mean":
            raise ContractError(f"unsupported pooling {self.pooling!r}")
        if self.norm_style not in ("pre", "post"):
            raise ContractError(f"unknown norm_style {self.norm_style!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def param_shapes(self):
        d, f = self.hidden_dim, self.ff_dim
        shapes = {"tok_emb": (self.vocab_size, d), "pos_emb": (self.max_seq_len, d)}
        for l in range(1, self.num_layers + 1):
            p = f"layer{l}."
            shapes.update({
                p + "ln1_g": (d,), p + "ln1_b": (d,),
                p + "wq": (d, d), p + "bq": (d,),
                p + "wk": (d, d), p + "bk": (d,),
                p + "wv": (d, d), p + "bv": (d,),
                p + "wo": (d, d), p + "bo": (d,),
                p + "ln2_g": (d,), p + "ln2_b": (d,),
                p + "w1": (d, f), p + "b1": (f,),
                p + "w2": (f, d), p + "b2": (d,),
            })
        return shapes


class EncoderModel:
    """Weights plus the layer-by-layer forward pieces.

    The model holds no mutable inference state, so concurrent forward passes
    over one instance are safe.
    """

    def __init__(self, config: EncoderConfig, params=None):
        self.config = config
        if params is None:
            params = _init_params(config)
        expected = config.param_shapes()
        if set(params) != set(expected):
            raise ShapeError("parameter names do not match config")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = {k: p if isinstance(p, Tensor) else Tensor(p, requires_grad=True)
                       for k, p in params.items()}

    @property
    def num_layers(self):
        return self.config.num_layers

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def copy(self):
        return EncoderModel(self.config, {k: Tensor(p.data.copy(), requires_grad=True)
                                          for k, p in self.params.items()})

    def astype(self, dtype):
        return EncoderModel(self.config, {k: Tensor(p.data.astype(dtype), requires_grad=False)
                                          for k, p in self.params.items()})

    def layer_params(self, l):
        p = f"layer{l}."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    # -- forward pieces ------------------------------------------------
    def embed(self, tokens):
        t = tokens.shape[1]
        return T.embedding(self.params["tok_emb"], tokens) + self.params["pos_emb"][:t]

    def attention_bias(self, mask):
        dtype = self.params["tok_emb"].data.dtype
        return ((1.0 - mask.astype(dtype)) * _MASK_NEG)[:, None, None, :]

    def block(self, l, h, bias):
        """Apply transformer block ``l`` (1-based) to hidden states ``h``."""
        p = self.layer_params(l)
        if self.config.norm_style == "pre":
            h = h + self._attention(T.layer_norm(h, p["ln1_g"], p["ln1_b"]), bias, p)
            return h + self._ffn(T.layer_norm(h, p["ln2_g"], p["ln2_b"]), p)
        h = T.layer_norm(h + self._attention(h, bias, p), p["ln1_g"], p["ln1_b"])
        return T.layer_norm(h + self._ffn(h, p), p["ln2_g"], p["ln2_b"])

    def _attention(self, x, bias, p):
        b, t, d = x.shape
        nh = self.config.num_heads
        dh = d // nh

        def heads(w, bb):
            return (x @ w + bb).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(p["wq"], p["bq"]), heads(p["wk"], p["bk"]), heads(p["wv"], p["bv"])
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)) + bias
        ctx = T.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        return ctx @ p["wo"] + p["bo"]

    def _ffn(self, x, p):
        return T.gelu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]

    def pool(self, h, mask):
        return mean_pool(h, mask)


def _init_params(config):
    rng = np.random.default_rng(config.seed)
    d, f = config.hidden_dim, config.ff_dim
    params = {
        "tok_emb": rng.normal(0.0, 1.0, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.1, (config.max_seq_len, d)),
    }
    for l in range(1, config.num_layers + 1):
        p = f"layer{l}."
        params[p + "ln1_g"] = np.ones(d)
        params[p + "ln1_b"] = np.zeros(d)
        params[p + "ln2_g"] = np.ones(d)
        params[p + "ln2_b"] = np.zeros(d)
        for name in ("wq", "wk", "wv"):
            params[p + name] = rng.normal(0.0, d ** -0.5, (d, d))
            params[p + "b" + name[1]] = np.zeros(d)
        params[p + "wo"] = rng.normal(0.0, config.residual_init * d ** -0.5, (d, d))
        params[p + "bo"] = np.zeros(d)
        params[p + "w1"] = rng.normal(0.0, d ** -0.5, (d, f))
        params[p + "b1"] = np.zeros(f)
        params[p + "w2"] = rng.normal(0.0, config.residual_init * f ** -0.5, (f, d))
        params[p + "b2"] = np.zeros(d)
    return params


@dataclass
class LayerTrace:
    """Pooled vectors p_1..p_L of a batch, each a (B, d) tensor."""

    pooled: list
    mask: np.ndarray
    hidden: list = field(default=None, repr=False)

    @property
    def num_layers(self):
        return len(self.pooled)

    @property
    def final_embedding(self):
        return T.normalize(self.pooled[-1])

    def embedding(self, l):
        return T.normalize(self.pooled[l - 1])

    def pooled_array(self):
        """(B, L, d) numpy view of the pooled vectors."""
        return np.stack([p.data for p in self.pooled], axis=1)


class Projection:
    """Learned linear map from student to teacher hidden size."""

    def __init__(self, d_student, d_teacher, seed=0, trainable=True):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(max(d_student, d_teacher), min(d_student, d_teacher)))
        q, _ = np.linalg.qr(a)
        w = q if d_student >= d_teacher else q.T
        self.weight = Tensor(np.ascontiguousarray(w[:d_student, :d_teacher]) * np.sqrt(d_teacher / d_student),
                             requires_grad=trainable)

    @property
    def trainable(self):
        return self.weight.requires_grad

    def __call__(self, x):
        return x @ self.weight


def prepare_inputs(config, tokens, mask=None):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if mask is None:
        mask = np.ones(tokens.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != tokens.shape:
        raise ShapeError(f"mask shape {mask.shape} != tokens shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ContractError("token id outside vocabulary")
    if not mask.any(axis=1).all():
        raise DegenerateInputError("every sample needs at least one unmasked token")
    return tokens.astype(np.int64), mask


def mean_pool(hidden, mask):
    """Mean of hidden states over unmasked positions."""
    return T.masked_mean(hidden, mask)


def forward_trace(model, tokens, mask=None, num_layers=None, keep_hidden=False):
    """Run the encoder and pool every layer.

    With ``num_layers`` only the first layers are computed; because p_l depends
    only on layers <= l the result is a prefix of the full trace.
    """
    tokens, mask = prepare_inputs(model.config, tokens, mask)
    n = model.num_layers if num_layers is None else num_layers
    bias = model.attention_bias(mask)
    h = model.embed(tokens)
    pooled, hidden = [], []
    for l in range(1, n + 1):
        h = model.block(l, h, bias)
        pooled.append(model.pool(h, mask))
        if keep_hidden:
            hidden.append(h)
    return LayerTrace(pooled=pooled, mask=mask, hidden=hidden if keep_hidden else None)


def uniform_layer_map(l_student, l_teacher):
    """pi(l) = round(l * L_t / L_s) for l = 1..L_s, as a dict."""
    if l_student > l_teacher:
        raise ContractError(f"student depth {l_student} exceeds teacher depth {l_teacher}")
    if l_student < 1:
        raise ContractError("student depth must be positive")
    return {l: int(np.floor(l * l_teacher / l_student + 0.5)) for l in range(1, l_student + 1)}


# -- checkpoints ---------------------------------------------------------------

def save_weights(model, path, meta=None):
    """Write a checkpoint: magic, version, JSON header, float64 payload, CRC32."""
    names = list(model.config.param_shapes())
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "tensors": [[n, list(model.params[n].shape)] for n in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes() for n in names)
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + payload
    blob = body + struct.pack("<I", zlib.crc32(body))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return _parse_checkpoint(blob)[0]


def _parse_checkpoint(blob):
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < fixed + 4 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpointError("not a checkpoint file or truncated header")
    version, hlen = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC):fixed])
    if version != CHECKPOINT_VERSION:
        raise SchemaVersionError(f"checkpoint schema {version}, expected {CHECKPOINT_VERSION}")
    if len(blob) < fixed + hlen + 4:
        raise CorruptCheckpointError("truncated checkpoint")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CorruptCheckpointError("checksum mismatch")
    try:
        header = json.loads(blob[fixed:fixed + hlen])
    except ValueError as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    return header, blob[fixed + hlen:-4]


def load_weights(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _parse_checkpoint(blob)
    try:
        config = EncoderConfig.from_dict(header["config"])
    except (KeyError, TypeError, ContractError) as exc:
        raise CorruptCheckpointError(f"bad config header: {exc}") from None
    expected = config.param_shapes()
    listed = {n: tuple(s) for n, s in header["tensors"]}
    if listed != expected:
        raise CorruptCheckpointError("tensor shape table does not match config header")
    params, offset = {}, 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CorruptCheckpointError("payload shorter than shape table")
        params[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CorruptCheckpointError("payload longer than shape table")
    return EncoderModel(config, params)
