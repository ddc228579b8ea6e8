"""Visual MLP, bidirectional LSTM text encoder, modality discriminator.

Also the binary checkpoint container holding named float64 tensors.
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError, ParseError
from .losses import ClassifierHead

LRELU_SLOPE = 0.1
DISC_LRELU_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
# below this vocabulary size the input projection is applied to the table, not to tokens
PROJECT_VOCAB_MAX = 4096


def xavier_uniform(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)


def orthogonal(rng, n, m):
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


def zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class VisualEncoder:
    def __init__(self, rng, in_dim, hidden=512, out_dim=512):
        self.in_dim = in_dim
        self.W1, self.b1 = xavier_uniform(rng, in_dim, hidden), zeros(hidden)
        self.W2, self.b2 = xavier_uniform(rng, hidden, hidden), zeros(hidden)
        self.W3, self.b3 = xavier_uniform(rng, hidden, out_dim), zeros(out_dim)

    def parameters(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2, "W3": self.W3, "b3": self.b3}

    def __call__(self, obs):
        return visual_encode(self, obs)


def visual_encode(enc, obs):
    obs = ag.as_tensor(obs)
    if obs.ndim != 2 or obs.shape[1] != enc.in_dim:
        raise ContractError(f"visual input must be B x {enc.in_dim}, got {obs.shape}")
    h = ag.leaky_relu(obs @ enc.W1 + enc.b1, LRELU_SLOPE)
    h = ag.leaky_relu(h @ enc.W2 + enc.b2, LRELU_SLOPE)
    return h @ enc.W3 + enc.b3


class TextEncoder:
    """Word table -> BiLSTM (final states of both directions) -> affine."""

    def __init__(self, rng, vocab_size, word_dim=768, hidden=512, out_dim=512, frozen=True):
        self.vocab_size, self.hidden = vocab_size, hidden
        self.project_vocab = vocab_size <= PROJECT_VOCAB_MAX
        self.table = Tensor(rng.standard_normal((vocab_size, word_dim)), requires_grad=True)
        self.lstm = {}
        for d in ("fwd", "bwd"):
            w_hh = np.concatenate([orthogonal(rng, hidden, hidden) for _ in range(4)], axis=1)
            self.lstm[d] = {
                "W_ih": xavier_uniform(rng, word_dim, 4 * hidden),
                "W_hh": Tensor(w_hh, requires_grad=True),
                "b": zeros(4 * hidden),
            }
        self.W_proj = xavier_uniform(rng, 2 * hidden, out_dim)
        self.b_proj = zeros(out_dim)
        self.frozen = frozen

    @property
    def frozen(self):
        return not self.table.requires_grad

    @frozen.setter
    def frozen(self, value):
        self.table.requires_grad = not value
        if value:
            self.table.grad = None

    def parameters(self):
        out = {"table": self.table}
        for d, ps in self.lstm.items():
            for k, v in ps.items():
                out[f"{d}.{k}"] = v
        out["W_proj"], out["b_proj"] = self.W_proj, self.b_proj
        return out

    def __call__(self, tokens, lengths):
        return text_encode(self, tokens, lengths)


def reverse_within_length(tokens, lengths):
    rev = tokens.copy()
    for b, n in enumerate(lengths):
        rev[b, :n] = tokens[b, :n][::-1]
    return rev


def text_encode(enc, tokens, lengths):
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if tokens.ndim != 2 or lengths.shape != (tokens.shape[0],):
        raise DimensionError(f"tokens {tokens.shape} / lengths {lengths.shape} mismatch")
    B = tokens.shape[0]
    if lengths.min() < 1 or lengths.max() > tokens.shape[1]:
        raise ContractError("sequence length outside [1, max_len]")
    T = int(lengths.max())
    tokens = tokens[:, :T]
    if tokens.min() < 0 or tokens.max() >= enc.vocab_size:
        raise ContractError(f"token id out of vocabulary [0, {enc.vocab_size})")
    # padded slots are never read by the masked recurrence; point them at id 0
    valid = np.arange(T)[None, :] < lengths[:, None]
    tokens = np.where(valid, tokens, 0)
    mask = valid.T.astype(np.float64)  # T x B
    finals = []
    for d, seq in (("fwd", tokens), ("bwd", reverse_within_length(tokens, lengths))):
        p = enc.lstm[d]
        ids = seq.T.reshape(-1)  # time-major rows
        if enc.project_vocab:
            # project the whole (small) vocabulary once, then gather rows
            x_proj = ag.embedding(enc.table @ p["W_ih"] + p["b"], ids)
        else:
            x_proj = ag.embedding(enc.table, ids) @ p["W_ih"] + p["b"]
        finals.append(ag.lstm_sequence(x_proj, p["W_hh"], mask))
    return ag.concat(finals, axis=1) @ enc.W_proj + enc.b_proj


class Discriminator:
    """FC(256) - BN - LReLU(0.2) - FC(1) - sigmoid."""

    def __init__(self, rng, in_dim=512, hidden=256):
        self.W1, self.b1 = xavier_uniform(rng, in_dim, hidden), zeros(hidden)
        self.gamma = Tensor(np.ones(hidden), requires_grad=True)
        self.beta = zeros(hidden)
        self.W2, self.b2 = xavier_uniform(rng, hidden, 1), zeros(1)
        self.running_mean = np.zeros(hidden)
        self.running_var = np.ones(hidden)

    def parameters(self):
        return {"W1": self.W1, "b1": self.b1, "gamma": self.gamma, "beta": self.beta,
                "W2": self.W2, "b2": self.b2}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, emb, training=True, update_stats=True):
        return discriminate(self, emb, training, update_stats)


def discriminate(d, emb, training=True, update_stats=True):
    h = ag.as_tensor(emb) @ d.W1 + d.b1
    h = ag.batch_norm(h, d.gamma, d.beta, d.running_mean, d.running_var, training=training,
                      momentum=BN_MOMENTUM, eps=BN_EPS, update_stats=update_stats)
    h = ag.leaky_relu(h, DISC_LRELU_SLOPE)
    return ag.sigmoid(h @ d.W2 + d.b2)


@dataclass
class ModelDims:
    visual_dim: int
    vocab_size: int
    num_classes: int
    embed_dim: int = 512
    word_dim: int = 768
    lstm_hidden: int = 512
    visual_hidden: int = 512
    disc_hidden: int = 256


class Model:
    """Both encoders, the shared identity head and the discriminator."""

    GROUPS = ("image", "text", "discriminator")

    def __init__(self, dims, seed=0, frozen_table=True):
        self.dims = dims
        rng = np.random.default_rng(seed)
        self.visual = VisualEncoder(rng, dims.visual_dim, dims.visual_hidden, dims.embed_dim)
        self.text = TextEncoder(rng, dims.vocab_size, dims.word_dim, dims.lstm_hidden, dims.embed_dim,
                                frozen=frozen_table)
        w = rng.standard_normal((dims.num_classes, dims.embed_dim)) / np.sqrt(dims.embed_dim)
        self.head = ClassifierHead(Tensor(w, requires_grad=True), zeros(dims.num_classes))
        self.disc = Discriminator(rng, dims.embed_dim, dims.disc_hidden)

    def groups(self):
        """Parameters per optimizer group; frozen tensors are still listed."""
        image = {f"visual.{k}": v for k, v in self.visual.parameters().items()}
        image["head.W"], image["head.b"] = self.head.W, self.head.b
        text = {f"text.{k}": v for k, v in self.text.parameters().items()}
        disc = {f"disc.{k}": v for k, v in self.disc.parameters().items()}
        return {"image": image, "text": text, "discriminator": disc}

    def named_parameters(self):
        out = {}
        for g in self.groups().values():
            out.update(g)
        return out

    def named_buffers(self):
        return {f"disc.{k}": v for k, v in self.disc.buffers().items()}

    def check_partition(self):
        seen = {}
        for gname, params in self.groups().items():
            for name, t in params.items():
                if id(t) in seen:
                    raise ContractError(f"{name} registered in both {seen[id(t)]} and {gname}")
                seen[id(t)] = gname
        return True

    def zero_grads(self):
        ag.zero_grads(self.named_parameters().values())

    def state(self):
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state(self, tensors):
        params, bufs = self.named_parameters(), self.named_buffers()
        for name, t in params.items():
            arr = tensors[name]
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = np.array(arr, dtype=np.float64)
        for name, buf in bufs.items():
            buf[...] = tensors[name]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"XMCKPT\x00\x01"
VERSION = 1


def save_checkpoint(path, tensors, meta_text=""):
    """Write named arrays and a UTF-8 metadata block; little-endian, sorted by name."""
    blob = bytearray(MAGIC)
    meta = meta_text.encode("utf-8")
    blob += struct.pack("<II", VERSION, len(meta))
    blob += meta
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        key = name.encode("utf-8")
        blob += struct.pack("<H", len(key)) + key
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ParseError(f"checkpoint truncated at byte {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    if blob[:len(MAGIC)] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, meta_len = read("<II")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    meta = blob[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = read("<I")
    tensors = {}
    for _ in range(count):
        (klen,) = read("<H")
        name = blob[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = read("<B")
        shape = read(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(blob):
            raise ParseError(f"checkpoint truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ParseError("trailing bytes after last tensor")
    return tensors, meta
