"""Alternating min-max training of both encoders against the modality discriminator.

One iteration: a discriminator step on independently drawn visual and
textual mini-batches with smoothed/flipped targets, then an encoder step on a
paired mini-batch minimizing identification + projection matching + the
generator's fooling term. Training runs in two stages: word table frozen
under a plateau schedule, then unfrozen at a small fixed learning rate.
"""
import csv
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from . import config as cfgmod
from . import data as datamod
from . import losses as L
from .encoders import Model, ModelDims, load_checkpoint, save_checkpoint
from .errors import ContractError, NumericalError
from .optim import Adam, PlateauScheduler, SGDMomentum
from .retrieval import rank_k, similarity_matrix

log = logging.getLogger(__name__)

ADVERSARIAL_MODES = ("alternating", "gradient_reversal", "off")
LOG_FIELDS = ("iteration", "epoch", "stage", "l_id_visual", "l_id_text", "l_match_v2t", "l_match_t2v",
              "l_disc", "l_gen_adv", "total", "lr_image", "lr_text", "lr_disc", "d_acc")
VAL_FIELDS = ("epoch", "stage", "iteration", "val_loss", "val_rank1", "lr_image", "lr_text", "lr_disc")


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_init: float = 2e-4
    lr_image: Optional[float] = None
    lr_text: Optional[float] = None
    lr_disc: Optional[float] = None
    lr_floor: float = 2e-6
    weight_decay: float = 4e-4
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    stage1_epochs: int = 40
    stage2_lr: float = 2e-6
    stage2_epochs: int = 30
    adversarial: str = "alternating"
    grl_strength: float = 1.0
    d_steps_per_g: int = 1
    use_id_loss: bool = True
    use_match_loss: bool = True
    label_smooth_pos_lo: float = 0.8
    label_smooth_pos_hi: float = 1.2
    label_smooth_neg_lo: float = 0.0
    label_smooth_neg_hi: float = 0.3
    label_flip_prob: float = 0.2
    eps: float = 1e-8
    seed: int = 0
    val_every: int = 1
    plateau_patience: int = 3
    plateau_threshold: float = 1e-3
    monitor: str = "total"
    embed_dim: int = 512
    word_dim: int = 768
    lstm_hidden: int = 512
    visual_hidden: int = 512
    disc_hidden: int = 256

    def validate(self):
        checks = [
            (self.batch_size >= 2, "batch_size >= 2"),
            (self.adversarial in ADVERSARIAL_MODES, f"adversarial in {ADVERSARIAL_MODES}"),
            (self.monitor in ("total", "matching"), "monitor in ('total', 'matching')"),
            (self.use_id_loss or self.use_match_loss, "at least one of use_id_loss/use_match_loss"),
            (0 < self.lr_floor <= self.lr_init, "0 < lr_floor <= lr_init"),
            (self.stage1_epochs >= 0 and self.stage2_epochs >= 0, "epoch counts >= 0"),
            (self.stage1_epochs + self.stage2_epochs >= 1, "at least one epoch"),
            (self.label_smooth_pos_lo <= self.label_smooth_pos_hi, "label_smooth_pos_lo <= hi"),
            (self.label_smooth_neg_lo <= self.label_smooth_neg_hi, "label_smooth_neg_lo <= hi"),
            (0.0 <= self.label_flip_prob <= 1.0, "0 <= label_flip_prob <= 1"),
            (self.d_steps_per_g >= 1, "d_steps_per_g >= 1"),
            (self.val_every >= 1 and self.plateau_patience >= 1, "val_every, plateau_patience >= 1"),
            (self.weight_decay >= 0, "weight_decay >= 0"),
        ]
        for ok, what in checks:
            if not ok:
                raise ContractError(f"invalid train config: requires {what}")
        return self

    def group_lr(self, group):
        override = {"image": self.lr_image, "text": self.lr_text, "discriminator": self.lr_disc}[group]
        return self.lr_init if override is None else override

    def dumps(self):
        return cfgmod.dumps(self)

    @classmethod
    def loads(cls, text, **overrides):
        cfg = cfgmod.build(cls, cfgmod.parse_kv(text))
        return cfgmod.build(cls, overrides, base=cfg) if overrides else cfg


def smooth_and_flip_labels(rng, batch_size, modality, config):
    """Soft discriminator targets: visual ~ U[pos], textual ~ U[neg], each swapped with prob. flip."""
    pos = rng.uniform(config.label_smooth_pos_lo, config.label_smooth_pos_hi, batch_size)
    neg = rng.uniform(config.label_smooth_neg_lo, config.label_smooth_neg_hi, batch_size)
    flip = rng.random(batch_size) < config.label_flip_prob
    if modality == "visual":
        return np.where(flip, neg, pos)
    if modality == "text":
        return np.where(flip, pos, neg)
    raise ContractError(f"unknown modality {modality!r}")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    val_rows: list = field(default_factory=list)
    stage_boundaries: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ContractError("training log iterations must increase")
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def write(self, path, val_path=None):
        _write_csv(path, LOG_FIELDS, self.rows)
        if val_path is not None:
            _write_csv(val_path, VAL_FIELDS, self.val_rows)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(r[h])) if isinstance(r[h], float) else r[h] for h in header])


@contextmanager
def _component(name):
    """Name the loss/encoder piece in any numerical failure raised inside."""
    try:
        yield
    except NumericalError as exc:
        raise NumericalError(f"{name}: {exc}") from exc


def dims_for(dataset, config):
    return ModelDims(
        visual_dim=dataset.spec.visual_dim,
        vocab_size=dataset.spec.vocab_size,
        num_classes=dataset.num_classes,
        embed_dim=config.embed_dim,
        word_dim=config.word_dim,
        lstm_hidden=config.lstm_hidden,
        visual_hidden=config.visual_hidden,
        disc_hidden=config.disc_hidden,
    )


class Trainer:
    def __init__(self, model, config):
        self.model = model
        self.config = config.validate()
        model.check_partition()
        groups = model.groups()
        image = dict(groups["image"])
        if not config.use_id_loss:
            image = {k: v for k, v in image.items() if not k.startswith("head.")}
        self.optimizers = {
            "image": SGDMomentum(image, config.group_lr("image"), config.momentum, config.weight_decay),
            "text": Adam(groups["text"], config.group_lr("text"), (config.adam_beta1, config.adam_beta2),
                         config.adam_eps, config.weight_decay),
            "discriminator": SGDMomentum(groups["discriminator"], config.group_lr("discriminator"),
                                         config.momentum, config.weight_decay),
        }
        self.label_rng = np.random.default_rng([config.seed, 7])

    @property
    def adversarial(self):
        return self.config.adversarial

    def lrs(self):
        return {f"lr_{k if k != 'discriminator' else 'disc'}": o.lr for k, o in self.optimizers.items()}

    # -- loss pieces
    def matching_losses(self, phi, tau, labels, bundle):
        cfg = self.config
        if cfg.use_id_loss:
            with _component("l_id_visual"):
                bundle.l_id_visual = L.identification_loss(phi, labels, self.model.head)
            with _component("l_id_text"):
                bundle.l_id_text = L.identification_loss(tau, labels, self.model.head)
        if cfg.use_match_loss:
            q = L.true_matching_distribution(labels)
            with _component("l_match_v2t"):
                bundle.l_match_v2t = L.projection_matching_loss(phi, tau, q, cfg.eps)
            with _component("l_match_t2v"):
                bundle.l_match_t2v = L.projection_matching_loss(tau, phi, q, cfg.eps)
        return bundle

    def discriminator_step(self, vbatch, tbatch):
        model, cfg = self.model, self.config
        with ag.no_grad():
            phi = model.visual(vbatch.visual)
            tau = model.text(tbatch.tokens, tbatch.lengths)
        Bv = len(vbatch)
        with _component("l_disc"):
            scores = model.disc(ag.concat([phi, tau], axis=0), training=True, update_stats=True)
            tv = smooth_and_flip_labels(self.label_rng, Bv, "visual", cfg)
            tt = smooth_and_flip_labels(self.label_rng, len(tbatch), "text", cfg)
            loss = L.soft_target_bce(scores[:Bv], tv) + L.soft_target_bce(scores[Bv:], tt)
            ag.backward(loss)
        with _component("discriminator update"):
            self.optimizers["discriminator"].step()
        model.zero_grads()
        s = scores.data[:, 0]
        acc = float(np.mean(np.concatenate([s[:Bv] > 0.5, s[Bv:] < 0.5])))
        return loss, acc

    def train_step(self, batch, d_batches=()):
        """One iteration; ``d_batches`` are (visual, text) pairs for the D-steps."""
        model, cfg = self.model, self.config
        bundle = L.LossBundle()
        d_acc = float("nan")
        if self.adversarial == "alternating":
            for vb, tb in d_batches:
                bundle.l_disc, d_acc = self.discriminator_step(vb, tb)
        model.zero_grads()

        with _component("visual encoder"):
            phi = model.visual(batch.visual)
        with _component("text encoder"):
            tau = model.text(batch.tokens, batch.lengths)
        self.matching_losses(phi, tau, batch.labels, bundle)
        B = len(batch)
        if self.adversarial == "alternating":
            with _component("l_gen_adv"):
                scores = model.disc(ag.concat([phi, tau], axis=0), training=True, update_stats=False)
                bundle.l_gen_adv = L.generator_adversarial_loss(scores[:B], scores[B:])
            bundle.total = L.total_loss(bundle, "generator")
            steps = ("image", "text")
        elif self.adversarial == "gradient_reversal":
            rev = ag.concat([ag.grad_reverse(phi, cfg.grl_strength), ag.grad_reverse(tau, cfg.grl_strength)], axis=0)
            with _component("l_disc"):
                scores = model.disc(rev, training=True, update_stats=True)
                tv = smooth_and_flip_labels(self.label_rng, B, "visual", cfg)
                tt = smooth_and_flip_labels(self.label_rng, B, "text", cfg)
                bundle.l_disc = L.soft_target_bce(scores[:B], tv) + L.soft_target_bce(scores[B:], tt)
            s = scores.data[:, 0]
            d_acc = float(np.mean(np.concatenate([s[:B] > 0.5, s[B:] < 0.5])))
            bundle.total = L.total_loss(bundle, "joint")
            steps = ("image", "text", "discriminator")
        else:
            bundle.total = L.total_loss(bundle, "generator")
            steps = ("image", "text")
        total = bundle.total.item()
        if not np.isfinite(total):
            raise NumericalError(f"non-finite total loss: {bundle.values()}")
        with _component("backward pass"):
            ag.backward(bundle.total)
        for name in steps:
            with _component(f"{name} update"):
                self.optimizers[name].step()
        model.zero_grads()
        return bundle, d_acc

    # -- evaluation
    def embed(self, dataset, split, chunk=256):
        idx = dataset.indices(split)
        phis, taus = [], []
        with ag.no_grad():
            for lo in range(0, len(idx), chunk):
                sel = idx[lo:lo + chunk]
                phis.append(self.model.visual(dataset.visual(sel)).data)
                toks, lens = dataset.tokens(sel)
                taus.append(self.model.text(toks, lens).data)
        return np.concatenate(phis), np.concatenate(taus), dataset.labels(idx)

    def validation_loss(self, dataset, split="val"):
        cfg = self.config
        total, n = 0.0, 0
        bs = min(cfg.batch_size, len(dataset.indices(split)))
        with ag.no_grad():
            for batch in _sequential_batches(dataset, split, bs):
                phi = self.model.visual(batch.visual)
                tau = self.model.text(batch.tokens, batch.lengths)
                b = self.matching_losses(phi, tau, batch.labels, L.LossBundle())
                if cfg.monitor == "matching":
                    value = sum(x.item() for x in (b.l_match_v2t, b.l_match_t2v) if x is not None)
                else:
                    value = L.total_loss(b, "generator").item()
                    if self.adversarial != "off":
                        s = self.model.disc(ag.concat([phi, tau], axis=0), training=False)
                        value += L.discriminator_loss(s[:len(batch)], s[len(batch):]).item()
                total += value
                n += 1
        return total / max(n, 1)


def _sequential_batches(dataset, split, bs):
    idx = dataset.indices(split)
    for lo in range(0, len(idx) - bs + 1, bs):
        yield datamod._make_batch(dataset, idx[lo:lo + bs], True, True)


def text_to_image_rank1(phi, tau, labels):
    return rank_k(similarity_matrix(tau, phi), labels, labels, 1)


@dataclass
class TrainResult:
    model: Model
    trainer: Trainer
    log: TrainingLog
    best_state: dict
    best_epoch: int
    best_val_rank1: float
    final_val_rank1: float


def run_training(dataset, config, out_dir=None, meta_extra=""):
    """Two-stage training; returns the final model plus the best-validation state."""
    config.validate()
    for split in ("train", "val"):
        if len(dataset.indices(split)) == 0:
            raise ContractError(f"dataset has an empty {split!r} split")
    if len(dataset.indices("train")) < config.batch_size:
        raise ContractError("train split smaller than one batch")
    model = Model(dims_for(dataset, config), seed=config.seed, frozen_table=True)
    trainer = Trainer(model, config)
    sched = PlateauScheduler(trainer.optimizers.values(), config.plateau_patience,
                             config.plateau_threshold, 10.0, config.lr_floor)
    tlog = TrainingLog()
    it = 0
    best = (-1.0, None, -1)
    final_rank1 = float("nan")
    stages = [(1, config.stage1_epochs), (2, config.stage2_epochs)]
    epoch = 0
    for stage, n_epochs in stages:
        if n_epochs == 0:
            continue
        if stage == 2:
            model.text.frozen = False
            for opt in trainer.optimizers.values():
                opt.lr = config.stage2_lr
        tlog.stage_boundaries.append({"stage": stage, "first_epoch": epoch, "first_iteration": it})
        for _ in range(n_epochs):
            d_iters = [datamod.batches(dataset, config.batch_size, [config.seed, epoch, 1 + k], paired=False)
                       for k in range(config.d_steps_per_g)]
            for batch in datamod.batches(dataset, config.batch_size, [config.seed, epoch, 0]):
                d_pairs = [next(d) for d in d_iters] if config.adversarial == "alternating" else ()
                bundle, d_acc = trainer.train_step(batch, d_pairs)
                row = {"iteration": it, "epoch": epoch, "stage": stage}
                row.update(bundle.values())
                row.update(trainer.lrs())
                row["d_acc"] = d_acc
                tlog.append(row)
                it += 1
            if (epoch + 1) % config.val_every == 0 or epoch == config.stage1_epochs + config.stage2_epochs - 1:
                val_loss = trainer.validation_loss(dataset)
                phi, tau, y = trainer.embed(dataset, "val")
                r1 = text_to_image_rank1(phi, tau, y)
                final_rank1 = r1
                if r1 > best[0]:
                    best = (r1, {k: np.array(v) for k, v in model.state().items()}, epoch)
                vrow = {"epoch": epoch, "stage": stage, "iteration": it, "val_loss": val_loss, "val_rank1": r1}
                vrow.update(trainer.lrs())
                tlog.val_rows.append(vrow)
                if stage == 1:
                    sched.step(val_loss)
                log.info("epoch %d stage %d val_loss %.4f val_rank1 %.4f", epoch, stage, val_loss, r1)
            epoch += 1
    result = TrainResult(model, trainer, tlog, best[1], best[2], best[0], final_rank1)
    if out_dir is not None:
        write_outputs(result, dataset, config, out_dir, meta_extra)
    return result


def checkpoint_meta(config, dims, spec=None, extra=""):
    lines = ["[train]", config.dumps().rstrip("\n"), "[dims]", cfgmod.dumps(dims).rstrip("\n")]
    if spec is not None:
        lines += ["[data]", spec.to_json()]
    if extra:
        lines += ["[extra]", extra.rstrip("\n")]
    return "\n".join(lines) + "\n"


def parse_checkpoint_meta(meta):
    sections, cur = {}, None
    for line in meta.splitlines():
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1]
            sections[cur] = []
        elif cur is not None:
            sections[cur].append(line)
    return {k: "\n".join(v) + "\n" for k, v in sections.items()}


def model_tensors(model, trainer=None):
    out = dict(model.state())
    if trainer is not None:
        for gname, opt in trainer.optimizers.items():
            for k, v in opt.state_arrays().items():
                out[f"optim.{gname}/{k}"] = v
    return out


def write_outputs(result, dataset, config, out_dir, meta_extra=""):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = checkpoint_meta(config, result.model.dims, dataset.spec, meta_extra)
    save_checkpoint(out / "final.ckpt", model_tensors(result.model, result.trainer), meta)
    best_meta = meta + f"[best]\nepoch = {result.best_epoch}\nval_rank1 = {result.best_val_rank1!r}\n"
    save_checkpoint(out / "best.ckpt", result.best_state, best_meta)
    result.log.write(out / "train_log.csv", out / "val_log.csv")


def load_model(path):
    """Rebuild a model (and its training config) from a checkpoint file."""
    tensors, meta = load_checkpoint(path)
    sec = parse_checkpoint_meta(meta)
    config = TrainConfig.loads(sec.get("train", ""))
    dims = cfgmod.build(ModelDims, cfgmod.parse_kv(sec["dims"]))
    model = Model(dims, seed=config.seed)
    model.load_state({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    return model, config, tensors
