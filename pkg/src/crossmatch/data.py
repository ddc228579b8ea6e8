"""Synthetic identity-structured image/text pairs and their text file format.

Each identity owns a latent center. Its "images" are a fixed random affine
map of the center plus Gaussian noise; its "descriptions" carry an
identity-specific phrase (token ids hashed from the center) scattered among
filler words, with phrase tokens corrupted at ``text_noise``.

File format, one record per line after a ``#spec`` JSON header::

    <label>\\t<split>\\tv:<17-digit floats, comma separated>\\tt:<token ids>
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ContractError, ParseError

PAD_ID = 0
MIN_CENTER_DIST = 1.0
SPLITS = ("train", "val", "test")


@dataclass
class SyntheticSpec:
    num_identities: int = 32
    per_identity: int = 20
    latent_dim: int = 16
    visual_dim: int = 64
    vocab_size: int = 200
    filler_vocab: int = 60
    phrase_len: int = 3
    sentence_len_min: int = 5
    sentence_len_max: int = 8
    visual_noise: float = 0.5
    text_noise: float = 0.1
    val_per_identity: int = 4
    test_per_identity: int = 4
    pair_only: bool = False
    seed: int = 0

    def validate(self):
        checks = [
            (self.num_identities >= 2, "num_identities >= 2"),
            (self.per_identity >= 1, "per_identity >= 1"),
            (self.latent_dim >= 1 and self.visual_dim >= 1, "latent_dim, visual_dim >= 1"),
            (1 <= self.filler_vocab < self.vocab_size - self.phrase_len,
             "1 <= filler_vocab < vocab_size - phrase_len"),
            (self.phrase_len >= 1, "phrase_len >= 1"),
            (self.phrase_len <= self.sentence_len_min <= self.sentence_len_max,
             "phrase_len <= sentence_len_min <= sentence_len_max"),
            (self.visual_noise >= 0, "visual_noise >= 0"),
            (0 <= self.text_noise <= 1, "0 <= text_noise <= 1"),
            (self.val_per_identity >= 0 and self.test_per_identity >= 0, "val/test counts >= 0"),
            (self.val_per_identity + self.test_per_identity < self.per_identity,
             "val_per_identity + test_per_identity < per_identity (train split must be non-empty)"),
        ]
        for ok, what in checks:
            if not ok:
                raise ContractError(f"invalid synthetic spec: requires {what}")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ContractError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PairedSample:
    visual: np.ndarray
    tokens: np.ndarray
    label: int
    split: str

    def __eq__(self, other):
        return (self.label == other.label and self.split == other.split
                and np.array_equal(self.visual, other.visual) and np.array_equal(self.tokens, other.tokens))


@dataclass
class Dataset:
    samples: list
    spec: SyntheticSpec
    pair_only: bool = False

    def __len__(self):
        return len(self.samples)

    def indices(self, split):
        return np.array([i for i, s in enumerate(self.samples) if s.split == split], dtype=np.int64)

    def visual(self, idx):
        return np.stack([self.samples[i].visual for i in idx])

    def labels(self, idx):
        return np.array([self.samples[i].label for i in idx], dtype=np.int64)

    def tokens(self, idx):
        return pad_sequences([self.samples[i].tokens for i in idx])

    @property
    def num_classes(self):
        return int(max(s.label for s in self.samples)) + 1


@dataclass
class Batch:
    """Model inputs for one mini-batch; either modality may be absent."""
    labels: np.ndarray
    visual: np.ndarray = None
    tokens: np.ndarray = None
    lengths: np.ndarray = None
    index: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)


def pad_sequences(seqs):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def _centers(rng, C, L):
    centers = np.empty((C, L))
    for c in range(C):
        for _ in range(1000):
            z = rng.standard_normal(L)
            if c == 0 or np.sqrt(((centers[:c] - z) ** 2).sum(axis=1)).min() >= MIN_CENTER_DIST:
                centers[c] = z
                break
        else:
            raise ContractError(f"could not place {C} centers {MIN_CENTER_DIST} apart in {L} dims")
    return centers


def identity_phrase(center, spec):
    """Phrase tokens for one identity, hashed from the center's bytes."""
    digest = hashlib.blake2b(np.asarray(center, dtype="<f8").tobytes(), digest_size=8).digest()
    prng = np.random.default_rng(int.from_bytes(digest, "little"))
    first = spec.filler_vocab + 1
    return prng.choice(np.arange(first, spec.vocab_size), size=spec.phrase_len, replace=False).astype(np.int64)


def generate(spec):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, n = spec.num_identities, spec.per_identity
    centers = _centers(rng, C, spec.latent_dim)
    A = rng.standard_normal((spec.visual_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    offset = rng.standard_normal(spec.visual_dim)
    phrases = [identity_phrase(z, spec) for z in centers]
    n_train = n - spec.val_per_identity - spec.test_per_identity
    samples = []
    for c in range(C):
        for k in range(n):
            split = "train" if k < n_train else ("val" if k < n_train + spec.val_per_identity else "test")
            visual = A @ centers[c] + offset + spec.visual_noise * rng.standard_normal(spec.visual_dim)
            length = int(rng.integers(spec.sentence_len_min, spec.sentence_len_max + 1))
            tokens = rng.integers(1, spec.filler_vocab + 1, size=length).astype(np.int64)
            slots = np.sort(rng.choice(length, size=spec.phrase_len, replace=False))
            tokens[slots] = phrases[c]
            corrupt = rng.random(spec.phrase_len) < spec.text_noise
            replacement = rng.integers(1, spec.vocab_size, size=spec.phrase_len)
            tokens[slots[corrupt]] = replacement[corrupt]
            samples.append(PairedSample(visual, tokens, c, split))
    return Dataset(samples, spec, pair_only=spec.pair_only)


def assign_unique_ids(dataset):
    """Give every image-text pair its own consecutive label (pair-only data)."""
    if not dataset.pair_only:
        raise ContractError("assign_unique_ids requires a pair-only dataset")
    samples = [PairedSample(s.visual, s.tokens, i, s.split) for i, s in enumerate(dataset.samples)]
    return Dataset(samples, dataset.spec, pair_only=True)


# ---------------------------------------------------------------- file I/O

def _fmt(x):
    return format(float(x), ".17g")


def dumps(dataset):
    lines = ["#spec " + dataset.spec.to_json()]
    for s in dataset.samples:
        v = ",".join(_fmt(x) for x in s.visual)
        t = " ".join(str(int(x)) for x in s.tokens)
        lines.append(f"{s.label}\t{s.split}\tv:{v}\tt:{t}")
    return "\n".join(lines) + "\n"


def save(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(dataset))


def loads(text):
    lines = text.split("\n")
    if not text.endswith("\n"):
        raise ParseError("file does not end with a newline (truncated?)", len(lines))
    lines = lines[:-1]
    if not lines or not lines[0].startswith("#spec "):
        raise ParseError("missing '#spec' header", 1)
    try:
        spec = SyntheticSpec.from_dict(json.loads(lines[0][len("#spec "):]))
        spec.validate()
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad spec header: {exc}", 1) from None
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4 or not parts[2].startswith("v:") or not parts[3].startswith("t:"):
            raise ParseError("expected 4 tab-separated fields 'id, split, v:..., t:...'", lineno)
        label, split, v, t = parts
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", lineno)
        try:
            label = int(label)
            visual = np.array([float(x) for x in v[2:].split(",")], dtype=np.float64)
            tokens = np.array([int(x) for x in t[2:].split(" ")], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if visual.size != spec.visual_dim:
            raise ParseError(f"expected {spec.visual_dim} visual values, got {visual.size}", lineno)
        if not np.isfinite(visual).all():
            raise ParseError("non-finite visual value", lineno)
        if tokens.min() < 0 or tokens.max() >= spec.vocab_size:
            raise ParseError(f"token id outside [0, {spec.vocab_size})", lineno)
        samples.append(PairedSample(visual, tokens, label, split))
    expected = spec.num_identities * spec.per_identity
    if len(samples) != expected:
        raise ParseError(f"expected {expected} records, found {len(samples)} (truncated?)", len(lines) + 1)
    return Dataset(samples, spec, pair_only=spec.pair_only)


def load(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return loads(fh.read())


# ---------------------------------------------------------------- batching

def batches(dataset, batch_size, seed, paired=True, split="train"):
    """Yield shuffled mini-batches, dropping the short remainder.

    Paired batches carry both modalities of the same samples. Unpaired mode
    yields ``(visual_batch, text_batch)`` drawn from two independent orders.
    """
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2")
    idx = dataset.indices(split)
    rng = np.random.default_rng(seed)
    n = len(idx) // batch_size
    if paired:
        order = idx[rng.permutation(len(idx))]
        for b in range(n):
            yield _make_batch(dataset, order[b * batch_size:(b + 1) * batch_size], True, True)
    else:
        ov = idx[rng.permutation(len(idx))]
        ot = idx[rng.permutation(len(idx))]
        for b in range(n):
            sl = slice(b * batch_size, (b + 1) * batch_size)
            yield _make_batch(dataset, ov[sl], True, False), _make_batch(dataset, ot[sl], False, True)


def _make_batch(dataset, sel, with_visual, with_text):
    batch = Batch(labels=dataset.labels(sel), index=sel)
    if with_visual:
        batch.visual = dataset.visual(sel)
    if with_text:
        batch.tokens, batch.lengths = dataset.tokens(sel)
    return batch


def split_batch(dataset, split):
    """All samples of a split as one unshuffled batch."""
    return _make_batch(dataset, dataset.indices(split), True, True)
