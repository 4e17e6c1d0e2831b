"""Shared test utilities."""

import numpy as np

from convexp.data import Collection, Document

H = 1e-5


def fd_grad(f, x, h=H, idx=None):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = idx if idx is not None else np.ndindex(*x.shape)
    for i in it:
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_collection(rng, num_docs=12, vocab=20, length=(3, 9)):
    words = [f"t{i}" for i in range(vocab)]
    docs = []
    for j in range(num_docs):
        n = int(rng.integers(length[0], length[1] + 1))
        docs.append(Document(f"D{j:02d}", " ".join(rng.choice(words, size=n))))
    return Collection(docs), words
