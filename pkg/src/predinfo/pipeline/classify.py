"""Generative classification with one sequence model per class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .. import rnn


@dataclass
class Classification:
    log_likelihood: np.ndarray  # (n, C)
    posterior: np.ndarray  # (n, C)
    predicted: np.ndarray  # (n,)


def _check_prior(prior, n_classes: int) -> np.ndarray:
    if prior is None:
        return np.full(n_classes, 1.0 / n_classes)
    p = np.asarray(prior, dtype=np.float64)
    if p.shape != (n_classes,):
        raise ValueError(f"prior has {p.size} entries for {n_classes} classes")
    if np.any(p < 0) or not abs(p.sum() - 1.0) <= 1e-9:
        raise ValueError(f"prior must be non-negative and sum to 1 (sums to {p.sum():.12g})")
    return p


def posterior_from_loglik(loglik: np.ndarray, prior=None) -> np.ndarray:
    """Normalise log p(x | C=k) + log p(C=k) over k with logsumexp."""
    loglik = np.atleast_2d(loglik)
    p = _check_prior(prior, loglik.shape[1])
    with np.errstate(divide="ignore"):
        joint = loglik + np.log(p)
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def naive_bayes(models: Sequence[rnn.RNNModel], x: np.ndarray, prior=None) -> Classification:
    """Class posterior for one sequence (T, d) or a batch (n, T, d).

    Class likelihoods are the noise-free sequence log-likelihoods of each
    class model; the default prior is uniform.
    """
    if not models:
        raise ValueError("need at least one class model")
    dims = {m.config.input_dim for m in models}
    if len(dims) != 1:
        raise ValueError(f"class models disagree on input_dim: {sorted(dims)}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    _check_prior(prior, len(models))
    loglik = np.column_stack([rnn.sequence_log_likelihood(m, x) for m in models])
    post = posterior_from_loglik(loglik, prior)
    return Classification(loglik, post, np.argmax(post, axis=1))


def train_class_models(
    sequences_by_class: dict,
    model_cfg: rnn.RNNConfig,
    train_cfg: rnn.TrainConfig,
    seq_len: int,
) -> dict:
    """One MLE-trained model per class, trained on random crops of that class's sequences."""
    models = {}
    for k, (label, seqs) in enumerate(sorted(sequences_by_class.items(), key=lambda kv: str(kv[0]))):
        model = rnn.RNNModel.create(model_cfg)
        tc = rnn.TrainConfig(**{**train_cfg.__dict__, "seed": train_cfg.seed + k})
        rnn.train(model, rnn.CropSource(seqs, seq_len), tc)
        models[label] = model
    return models


def accuracy(models: dict, sequences: Sequence[np.ndarray], labels: Sequence, prior=None) -> float:
    names = list(models)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        by_len.setdefault(len(s), []).append(i)
    correct = 0
    for idx in by_len.values():
        batch = np.stack([sequences[i] for i in idx])
        res = naive_bayes([models[n] for n in names], batch, prior)
        correct += sum(names[p] == labels[i] for p, i in zip(res.predicted, idx))
    return correct / len(sequences)
