"""Post-hoc modality probe: how well can a linear classifier tell visual from textual embeddings?"""
import numpy as np
from sklearn.linear_model import LogisticRegression

from .errors import ContractError


def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def modality_probe_accuracy(train_visual, train_text, test_visual, test_text, seed=0, normalize=True):
    """Fit logistic regression on one set of embeddings and score it on another.

    Label 1 marks visual rows, 0 textual. Embeddings are unit-normalized first
    by default, since retrieval only ever sees their directions.
    """
    if len(train_visual) == 0 or len(test_visual) == 0:
        raise ContractError("modality probe needs non-empty train and test embeddings")
    prep = _unit if normalize else np.asarray
    xtr = np.concatenate([prep(train_visual), prep(train_text)])
    ytr = np.r_[np.ones(len(train_visual)), np.zeros(len(train_text))]
    xte = np.concatenate([prep(test_visual), prep(test_text)])
    yte = np.r_[np.ones(len(test_visual)), np.zeros(len(test_text))]
    clf = LogisticRegression(C=1.0, max_iter=2000, random_state=seed)
    clf.fit(xtr, ytr)
    return float(clf.score(xte, yte))


def probe_model(trainer, dataset, seed=0):
    phi_tr, tau_tr, _ = trainer.embed(dataset, "train")
    phi_te, tau_te, _ = trainer.embed(dataset, "test")
    return modality_probe_accuracy(phi_tr, tau_tr, phi_te, tau_te, seed)
