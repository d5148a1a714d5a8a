"""Trainer stubs with known memorization scores."""

import numpy as np

from memrehearse.data import Dataset


def toy_dataset(n=20, c=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 2)), rng.integers(0, c, size=n), np.arange(100, 100 + n), c)


def _onehot(labels, c, correct):
    pred = np.where(correct, labels, (labels + 1) % c)
    return np.eye(c)[pred]


def memorizer(dataset, train_indices, seed):
    inside = np.zeros(len(dataset), dtype=bool)
    inside[train_indices] = True
    return _onehot(dataset.labels, dataset.class_count, inside)


def constant(dataset, train_indices, seed):
    return _onehot(dataset.labels, dataset.class_count, np.ones(len(dataset), dtype=bool))


def bernoulli(p_in=0.9, p_out=0.3):
    def trainer(dataset, train_indices, seed):
        rng = np.random.default_rng(seed)
        p = np.full(len(dataset), p_out)
        p[train_indices] = p_in
        return _onehot(dataset.labels, dataset.class_count, rng.random(len(dataset)) < p)
    return trainer
