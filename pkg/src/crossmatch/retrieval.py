"""Cosine ranking, rank-k accuracy, CMC curves and AP@50.

Rankings sort scores descending and break ties by ascending gallery index.
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, DimensionError

RANKS = (1, 5, 10)
AP_TOP = 50


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _unit_rows(x, what):
    x = _arr(x)
    if x.ndim != 2:
        raise DimensionError(f"{what} must be a matrix")
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if (n < 1e-12).any():
        raise DegenerateInputError(f"{what} has a zero-norm row")
    return x / n


def similarity_matrix(probe, gallery):
    p, g = _unit_rows(probe, "probe"), _unit_rows(gallery, "gallery")
    if p.shape[1] != g.shape[1]:
        raise DimensionError(f"probe dim {p.shape[1]} vs gallery dim {g.shape[1]}")
    return np.clip(p @ g.T, -1.0, 1.0)


def _prep(scores, probe_labels, gallery_labels):
    scores = np.ascontiguousarray(_arr(scores))
    pl = np.ascontiguousarray(probe_labels, dtype=np.int64)
    gl = np.ascontiguousarray(gallery_labels, dtype=np.int64)
    if scores.shape != (pl.size, gl.size):
        raise DimensionError(f"scores {scores.shape} vs {pl.size} probes x {gl.size} gallery items")
    return scores, pl, gl


def first_hit_positions(scores, probe_labels, gallery_labels):
    """0-based rank of each probe's best-ranked correct item (-1 if none)."""
    return kernels.first_hit_positions(*_prep(scores, probe_labels, gallery_labels))


def rank_k(scores, probe_labels, gallery_labels, k):
    scores, pl, gl = _prep(scores, probe_labels, gallery_labels)
    if not 1 <= k <= gl.size:
        raise ContractError(f"k={k} outside [1, {gl.size}]")
    pos = kernels.first_hit_positions(scores, pl, gl)
    return float(np.mean((pos >= 0) & (pos < k)))


def cmc_curve(scores, probe_labels, gallery_labels):
    scores, pl, gl = _prep(scores, probe_labels, gallery_labels)
    pos = kernels.first_hit_positions(scores, pl, gl)
    counts = np.bincount(pos[pos >= 0], minlength=gl.size)
    return np.cumsum(counts) / pl.size


def ap_at_50(scores, probe_labels, gallery_labels, top=AP_TOP):
    """Per-probe precision in the top min(50, N), averaged per probe class, then over classes."""
    scores, pl, gl = _prep(scores, probe_labels, gallery_labels)
    k = min(top, gl.size)
    prec = kernels.topk_correct_counts(scores, pl, gl, k) / k
    classes = np.unique(pl)
    return float(np.mean([prec[pl == c].mean() for c in classes]))


def ranked_lists(scores):
    return np.argsort(-_arr(scores), axis=1, kind="stable")


@dataclass
class RetrievalReport:
    direction: str
    num_probes: int
    gallery_size: int
    rank: dict
    cmc: np.ndarray
    ap50: float
    ranked: np.ndarray = field(default=None, repr=False)

    def metrics_row(self):
        row = {"direction": self.direction, "num_probes": self.num_probes, "gallery_size": self.gallery_size}
        for k in RANKS:
            row[f"rank{k}"] = self.rank.get(k, float("nan"))
        row["ap50"] = self.ap50
        return row


def evaluate(probe, gallery, probe_labels, gallery_labels, direction="t2i", keep_ranked=False):
    scores = similarity_matrix(probe, gallery)
    cmc = cmc_curve(scores, probe_labels, gallery_labels)
    rank = {k: float(cmc[k - 1]) for k in RANKS if k <= cmc.size}
    return RetrievalReport(
        direction=direction,
        num_probes=scores.shape[0],
        gallery_size=scores.shape[1],
        rank=rank,
        cmc=cmc,
        ap50=ap_at_50(scores, probe_labels, gallery_labels),
        ranked=ranked_lists(scores) if keep_ranked else None,
    )


def _num(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_reports(reports, path, dump_ranked=False):
    """Metrics CSV at ``path``; CMC as ``<stem>.cmc_<direction>.csv`` next to it."""
    path = Path(path)
    written = [path]
    rows = [r.metrics_row() for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([_num(v) for v in row.values()])
    for r in reports:
        cmc_path = path.with_name(f"{path.stem}.cmc_{r.direction}.csv")
        with open(cmc_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "value"])
            for k, v in enumerate(r.cmc, start=1):
                w.writerow([k, _num(v)])
        written.append(cmc_path)
        if dump_ranked and r.ranked is not None:
            tsv = path.with_name(f"{path.stem}.ranked_{r.direction}.tsv")
            with open(tsv, "w") as fh:
                for q, order in enumerate(r.ranked):
                    fh.write(f"{q}\t" + " ".join(str(int(i)) for i in order) + "\n")
            written.append(tsv)
    return written


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
