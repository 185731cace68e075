"""Contrastive Encoding of side-information images.

An encoder ``E`` is trained on illustrations with a cross-entropy head and a
supervised contrastive loss; each class is then summarized by the normalized
sum of its illustration embeddings, and the resulting descriptors can be
written out for external zero-shot methods.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import MLPEncoder, ProjectionHead, l2_normalize
from .errors import (
    DimensionMismatch,
    EmptyClass,
    InvalidConfig,
    IOFailure,
    NonUnitInput,
    NoPositivePairs,
)

UNIT_TOL = 1e-6


def supcon_loss(z, labels, tau: float = 0.1):
    """Supervised contrastive loss over a batch of unit vectors.

    For each anchor ``i`` with at least one positive (same label, ``p != i``)::

        -1/|P(i)| * sum_p log( exp(z_i.z_p / tau) / sum_{j != i} exp(z_i.z_j / tau) )

    The result is the mean over anchors that have positives. Anchors without
    positives are skipped; if none remain :class:`NoPositivePairs` is raised.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    n = z.shape[0]
    if n < 2:
        raise ValueError("supcon_loss needs a batch of at least 2 samples")
    norms = torch.linalg.vector_norm(z.detach(), dim=1)
    if bool(((norms - 1).abs() > UNIT_TOL).any()):
        raise NonUnitInput("supcon_loss expects L2-normalized embeddings")
    labels = torch.as_tensor(labels)
    self_mask = torch.eye(n, dtype=torch.bool)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(1)
    anchors = n_pos > 0
    if not bool(anchors.any()):
        raise NoPositivePairs("no anchor in the batch has a same-class partner")
    sim = (z @ z.T) / tau
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    # zero out the -inf diagonal before summing over positives
    log_prob = log_prob.masked_fill(self_mask, 0.0)
    per_anchor = -(log_prob * pos).sum(1)[anchors] / n_pos[anchors]
    return per_anchor.mean()


@dataclass
class CEConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    head: str = "mlp"
    head_hidden: int = 64
    tau: float = 0.1
    lr: float = 1e-3
    steps: int = 200
    classes_per_batch: int = 8
    samples_per_class: int = 2
    seed: int = 0

    def validate(self):
        if self.tau <= 0:
            raise InvalidConfig("tau must be positive")
        if self.classes_per_batch < 1 or self.samples_per_class < 2:
            raise InvalidConfig("batches need >= 1 class and >= 2 samples per class")
        return self


class ContrastiveModel(nn.Module):
    """Encoder ``E``, classifier ``C`` and projection head ``h`` trained jointly."""

    def __init__(self, in_dim: int, num_classes: int, cfg: CEConfig):
        super().__init__()
        self.encoder = MLPEncoder(in_dim, cfg.hidden_dim, cfg.embed_dim, normalize=False)
        self.classifier = nn.Linear(cfg.embed_dim, num_classes)
        self.projection = ProjectionHead(cfg.head, cfg.embed_dim, cfg.head_hidden)

    def losses(self, x, y, tau):
        z = self.encoder(x)
        l_cls = F.cross_entropy(self.classifier(z), y)
        # identity head leaves z unnormalized; eta is idempotent on mlp output
        z_tilde = l2_normalize(self.projection(z))
        return l_cls, supcon_loss(z_tilde, y, tau)


def ce_train_step(model: ContrastiveModel, optimizer, x, y, tau: float = 0.1):
    """One optimizer update on ``L_cls + L_cont``; returns both loss values."""
    model.train()
    optimizer.zero_grad()
    l_cls, l_cont = model.losses(x, y, tau)
    (l_cls + l_cont).backward()
    optimizer.step()
    return float(l_cls.detach()), float(l_cont.detach())


def _balanced_batch(rng, by_class, classes_per_batch, samples_per_class):
    classes = list(by_class)
    chosen = rng.choice(len(classes), size=min(classes_per_batch, len(classes)), replace=False)
    idx = []
    for c in chosen:
        members = by_class[classes[c]]
        idx.extend(rng.choice(members, size=samples_per_class,
                              replace=len(members) < samples_per_class))
    return np.asarray(idx)


def train_contrastive(x: np.ndarray, y: np.ndarray, num_classes: int, cfg: CEConfig | None = None,
                      log=None):
    """Train a :class:`ContrastiveModel` on illustrations ``x`` with labels ``y``.

    Batches sample ``classes_per_batch`` classes and ``samples_per_class``
    illustrations of each (with replacement when a class has fewer), so every
    anchor has a positive. Returns the model and a per-step loss history.
    """
    cfg = (cfg or CEConfig()).validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ContrastiveModel(x.shape[1], num_classes, cfg).double()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    xt = torch.as_tensor(x, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.long)
    by_class = {c: np.flatnonzero(y == c) for c in np.unique(y)}
    history = []
    for step in range(cfg.steps):
        idx = _balanced_batch(rng, by_class, cfg.classes_per_batch, cfg.samples_per_class)
        l_cls, l_cont = ce_train_step(model, opt, xt[idx], yt[idx], cfg.tau)
        history.append({"step": step, "L_cls": l_cls, "L_cont": l_cont})
        if log is not None:
            log(history[-1])
    return model, history


@dataclass
class ClassDescriptor:
    class_id: str
    vector: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, ClassDescriptor) and self.class_id == other.class_id
                and np.array_equal(self.vector, other.vector))


def class_descriptor(encoder, illustrations_by_class: Mapping[str, Sequence]) -> list[ClassDescriptor]:
    """phi(y) = eta(sum of E(s) over the class's illustrations), in input order."""
    out = []
    was_training = getattr(encoder, "training", False)
    if hasattr(encoder, "eval"):
        encoder.eval()
    try:
        with torch.no_grad():
            for cid, samples in illustrations_by_class.items():
                if len(samples) == 0:
                    raise EmptyClass(f"class {cid!r} has no illustrations")
                xs = torch.as_tensor(np.asarray(samples), dtype=torch.float64)
                z = encoder(xs)
                out.append(ClassDescriptor(str(cid), l2_normalize(z.sum(0)).numpy()))
    finally:
        if was_training:
            encoder.train()
    return out


# --- descriptor files -------------------------------------------------------

BIN_MAGIC = b"FGZD"
BIN_VERSION = 1


def _check_descriptors(descriptors):
    if not descriptors:
        raise ValueError("no descriptors to export")
    dims = {np.asarray(d.vector).shape for d in descriptors}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionMismatch(f"descriptors have inconsistent shapes {sorted(dims)}")
    return next(iter(dims))[0]


def export_descriptors(descriptors: Sequence[ClassDescriptor], path, fmt: str | None = None) -> None:
    """Write descriptors as text (``.csv``, default) or binary (``.bin``).

    Formats are documented in ``docs/formats.md``.
    """
    dim = _check_descriptors(descriptors)
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "csv")
    try:
        if fmt == "csv":
            with open(path, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["class_id", dim])
                for d in descriptors:
                    w.writerow([d.class_id, *(repr(float(v)) for v in d.vector)])
        elif fmt == "bin":
            with open(path, "wb") as f:
                f.write(BIN_MAGIC + struct.pack("<III", BIN_VERSION, len(descriptors), dim))
                for d in descriptors:
                    cid = d.class_id.encode("utf-8")
                    f.write(struct.pack("<I", len(cid)) + cid)
                    f.write(np.asarray(d.vector, dtype="<f4").tobytes())
        else:
            raise ValueError(f"unknown descriptor format {fmt!r}")
    except OSError as e:
        raise IOFailure(str(e)) from e


def import_descriptors(path, fmt: str | None = None) -> list[ClassDescriptor]:
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "csv")
    try:
        if fmt == "csv":
            return _read_csv(path)
        return _read_bin(path)
    except OSError as e:
        raise IOFailure(str(e)) from e


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "class_id" or len(rows[0]) != 2:
        raise IOFailure(f"{path}: missing 'class_id,<dim>' header")
    dim = int(rows[0][1])
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) - 1 != dim:
            raise DimensionMismatch(f"{path}:{n}: expected {dim} values, got {len(row) - 1}")
        out.append(ClassDescriptor(row[0], np.array([float(v) for v in row[1:]])))
    return out


def _read_bin(path):
    data = path.read_bytes()
    if data[:4] != BIN_MAGIC:
        raise IOFailure(f"{path}: not a descriptor file")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != BIN_VERSION:
        raise IOFailure(f"{path}: unsupported version {version}")
    off, out = 16, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        cid = data[off:off + n].decode("utf-8")
        off += n
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        out.append(ClassDescriptor(cid, vec))
    if off != len(data):
        raise DimensionMismatch(f"{path}: {len(data) - off} trailing bytes; record dims disagree")
    return out

