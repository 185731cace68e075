"""Prototype Alignment: one encoder for illustrations (source) and photos
(target), a momentum-updated prototype bank per domain, an in-domain
contrastive loss and a prototype classifier that is discriminative against the
prototypes of both domains.

Class labels are integer indices into the class registry (the source bank's
class order). The target bank holds the seen subset and records which global
label each of its rows belongs to.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import MLPEncoder, ProjectionHead, l2_normalize, prototype_logits
from .errors import EmptyClassList, InvalidConfig, UninitializedPrototype, UnseenPhotoLeak

CHECKPOINT_FORMAT = "fgzsl-pa-checkpoint"
CHECKPOINT_VERSION = 1
SOURCE, TARGET = "source", "target"


class PrototypeBank:
    """Per-domain table of unit-norm class prototypes.

    Slots start uninitialized; the first embedding seen for a class becomes its
    prototype, later ones are blended in with momentum.
    """

    def __init__(self, domain: str, class_ids: Sequence[str], labels: Sequence[int], dim: int):
        if len(class_ids) == 0:
            raise EmptyClassList(f"{domain} bank needs at least one class")
        if len(class_ids) != len(labels):
            raise ValueError("class_ids and labels must have equal length")
        self.domain = domain
        self.class_ids = [str(c) for c in class_ids]
        self.labels = torch.as_tensor(list(labels), dtype=torch.long)
        self.dim = dim
        self.prototypes = torch.zeros(len(class_ids), dim, dtype=torch.float64)
        self.initialized = torch.zeros(len(class_ids), dtype=torch.bool)
        self._row = {int(g): r for r, g in enumerate(self.labels.tolist())}

    def __len__(self):
        return len(self.class_ids)

    @property
    def complete(self) -> bool:
        return bool(self.initialized.all())

    def rows(self, labels) -> torch.Tensor:
        """Bank row of each global label, -1 where the class is not in this bank."""
        return torch.tensor([self._row.get(int(y), -1) for y in labels], dtype=torch.long)

    def has(self, label: int) -> bool:
        return int(label) in self._row

    def update(self, label: int, z, m: float) -> torch.Tensor:
        """phi <- eta((1 - m) z + m phi); first touch sets phi = eta(z)."""
        r = self._row[int(label)]
        z = torch.as_tensor(z, dtype=torch.float64).detach()
        if not bool(torch.isfinite(z).all()):
            raise ValueError("prototype update with non-finite embedding")
        if self.initialized[r]:
            new = l2_normalize((1 - m) * z + m * self.prototypes[r])
        else:
            new = l2_normalize(z)
            self.initialized[r] = True
        self.prototypes[r] = new
        return new

    def update_many(self, labels, z, m: float) -> None:
        # sequential so several samples of one class in a batch each contribute
        for y, zi in zip(labels.tolist(), z):
            if self.has(y):
                self.update(y, zi, m)

    def active(self, rows: torch.Tensor, what: str):
        """Initialized prototypes plus ``rows`` re-indexed into that subset."""
        if bool((~self.initialized[rows]).any()):
            missing = sorted({self.class_ids[r] for r in rows[~self.initialized[rows]].tolist()})
            raise UninitializedPrototype(f"{what}: no {self.domain} prototype yet for {missing[:5]}")
        mask = self.initialized
        remap = torch.cumsum(mask.long(), 0) - 1
        return self.prototypes[mask], remap[rows]

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "class_ids": list(self.class_ids),
            "labels": self.labels.tolist(),
            "dim": self.dim,
            "prototypes": {c: self.prototypes[i].clone() for i, c in enumerate(self.class_ids)
                           if self.initialized[i]},
        }

    @classmethod
    def from_dict(cls, d: dict, class_order: Sequence[str] | None = None) -> "PrototypeBank":
        """Rebuild a bank; ``class_order`` re-keys rows when classes were reordered."""
        ids, labels = d["class_ids"], d["labels"]
        if class_order is not None:
            pos = {c: i for i, c in enumerate(class_order)}
            labels = [pos[c] for c in ids]
        bank = cls(d["domain"], ids, labels, d["dim"])
        for c, vec in d["prototypes"].items():
            r = bank.class_ids.index(c)
            bank.prototypes[r] = torch.as_tensor(vec, dtype=torch.float64)
            bank.initialized[r] = True
        return bank


def init_bank(domain: str, class_ids: Sequence[str], dim: int, labels: Sequence[int] | None = None,
              rng=None) -> PrototypeBank:
    """Empty bank over ``class_ids``. ``rng`` is accepted for API symmetry;
    first-touch initialization needs no random draws."""
    if labels is None:
        labels = range(len(class_ids))
    return PrototypeBank(domain, class_ids, list(labels), dim)


def update_prototype(bank: PrototypeBank, label: int, z, m: float = 0.9) -> torch.Tensor:
    return bank.update(label, z, m)


def _reduce(per_sample, reduction):
    if reduction == "none":
        return per_sample
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        return per_sample.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def indomain_contrastive_loss(z, y, bank: PrototypeBank, head: nn.Module | None = None,
                              tau: float = 0.1, reduction: str = "sum"):
    """Softmax cross-entropy of each sample against its own domain's prototypes.

    ``-log exp(h(z).h(phi_y)/tau) / sum_k exp(h(z).h(phi_k)/tau)`` over the
    initialized prototypes of ``bank``. Prototypes are constants here.
    """
    head = head or nn.Identity()
    rows = bank.rows(y)
    if bool((rows < 0).any()):
        raise UninitializedPrototype(f"label(s) not present in the {bank.domain} bank")
    protos, target = bank.active(rows, "in-domain contrastive loss")
    logits = head(z) @ head(protos.to(z.dtype)).T / tau
    return _reduce(F.cross_entropy(logits, target, reduction="none"), reduction)


def dual_domain_cls_loss(z, y, bank_s: PrototypeBank, bank_x: PrototypeBank | None,
                         logit_scale: float = 1.0, reduction: str = "sum"):
    """Cross-entropy against source prototypes plus, for classes present in the
    target bank, cross-entropy against target prototypes.

    Samples whose class is not in ``bank_x`` (unseen classes) get no target
    term; pass ``bank_x=None`` to drop the target term for every sample.
    """
    rows_s = bank_s.rows(y)
    protos_s, t_s = bank_s.active(rows_s, "source classification loss")
    loss = F.cross_entropy(prototype_logits(z, protos_s.to(z.dtype), logit_scale), t_s,
                           reduction="none")
    if bank_x is not None:
        rows_x = bank_x.rows(y)
        has_x = rows_x >= 0
        if bool(has_x.any()):
            protos_x, t_x = bank_x.active(rows_x[has_x], "target classification loss")
            l_x = F.cross_entropy(prototype_logits(z[has_x], protos_x.to(z.dtype), logit_scale),
                                  t_x, reduction="none")
            loss = loss.index_add(0, torch.nonzero(has_x).squeeze(1), l_x)
    return _reduce(loss, reduction)


@dataclass
class PATrainConfig:
    """Hyperparameters of a Prototype Alignment run (row F of the ablation by default)."""

    momentum: float = 0.9
    tau: float = 0.1
    lambda_c_source: float = 1.0
    lambda_c_target: float = 1.0
    lambda_cls_source: float = 1.0
    lambda_cls_target: float = 0.1
    logit_scale: float = 1.0
    head: str = "identity"
    head_hidden: int = 64
    classifier: str = "prototype"
    dual_term: bool = True
    embed_dim: int = 32
    hidden_dim: int = 128
    source_per_batch: int = 32
    target_per_batch: int = 32
    iterations: int = 40000
    lr: float = 1e-4
    backbone_lr_mult: float = 0.1
    log_every: int = 100
    seed: int = 0

    def validate(self) -> "PATrainConfig":
        lams = (self.lambda_c_source, self.lambda_c_target,
                self.lambda_cls_source, self.lambda_cls_target)
        if any(lam < 0 for lam in lams):
            raise InvalidConfig("loss weights must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig("momentum must lie in [0, 1)")
        if self.tau <= 0 or self.logit_scale <= 0 or self.lr <= 0:
            raise InvalidConfig("tau, logit_scale and lr must be positive")
        if self.head not in ("identity", "mlp"):
            raise InvalidConfig(f"head must be 'identity' or 'mlp', got {self.head!r}")
        if self.classifier not in ("prototype", "learned"):
            raise InvalidConfig(f"classifier must be 'prototype' or 'learned', got {self.classifier!r}")
        if self.classifier == "learned" and self.dual_term:
            raise InvalidConfig("a learned classifier has no target-prototype term; set dual_term=False")
        if self.source_per_batch < 0 or self.target_per_batch < 0 or \
                self.source_per_batch + self.target_per_batch == 0:
            raise InvalidConfig("batch must contain samples from at least one domain")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PATrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        return cls(**d).validate()


# Ablation rows: (lambda_c, head, lambda_cls_target, classifier, dual_term)
ABLATION_ROWS = {
    "A": (1.0, "identity", 0.1, "learned", False),
    "B": (1.0, "identity", 0.1, "prototype", False),
    "C": (0.0, "identity", 0.1, "prototype", True),
    "D": (1.0, "mlp", 0.1, "prototype", True),
    "E": (1.0, "identity", 1.0, "prototype", True),
    "F": (1.0, "identity", 0.1, "prototype", True),
}


def ablation_variant(row: str = "F", base: PATrainConfig | None = None, **overrides) -> PATrainConfig:
    """Config for one ablation row, layered over ``base`` and then ``overrides``."""
    if row not in ABLATION_ROWS:
        raise InvalidConfig(f"unknown ablation row {row!r}; choose from {sorted(ABLATION_ROWS)}")
    lam_c, head, lam_t, classifier, dual = ABLATION_ROWS[row]
    cfg = dataclasses.replace(
        base or PATrainConfig(),
        lambda_c_source=lam_c, lambda_c_target=lam_c, head=head,
        lambda_cls_target=lam_t, classifier=classifier, dual_term=dual,
    )
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except TypeError as e:
        raise InvalidConfig(str(e)) from None
    return cfg.validate()


class PAModel(nn.Module):
    """Shared encoder ``F``, projection head ``h`` and (row A only) a learned classifier."""

    def __init__(self, in_dim: int, num_classes: int, cfg: PATrainConfig):
        super().__init__()
        self.encoder = MLPEncoder(in_dim, cfg.hidden_dim, cfg.embed_dim, normalize=True)
        self.projection = ProjectionHead(cfg.head, cfg.embed_dim, cfg.head_hidden)
        self.classifier = nn.Linear(cfg.embed_dim, num_classes) if cfg.classifier == "learned" else None

    def forward(self, x):
        return self.encoder(x)


@dataclass
class MixedBatch:
    """Source samples (labels over all classes) and target samples (seen classes only)."""

    x_source: torch.Tensor
    y_source: torch.Tensor
    x_target: torch.Tensor
    y_target: torch.Tensor


@dataclass
class PAData:
    """Training data for Prototype Alignment, labels indexing ``class_ids``."""

    class_ids: list[str]
    seen: list[int]
    x_source: np.ndarray
    y_source: np.ndarray
    x_target: np.ndarray
    y_target: np.ndarray

    def __post_init__(self):
        seen = set(self.seen)
        leaked = set(np.unique(self.y_target).tolist()) - seen
        if leaked:
            raise UnseenPhotoLeak(f"target samples of unseen classes {sorted(leaked)[:5]}")


def pa_losses(model: PAModel, bank_s: PrototypeBank, bank_x: PrototypeBank, batch: MixedBatch,
              cfg: PATrainConfig, embeddings: dict | None = None) -> dict[str, torch.Tensor]:
    """Weighted per-domain loss terms and their total, with banks held constant.

    When ``embeddings`` is a dict it receives the detached per-domain
    embeddings under ``"s"`` and ``"x"``.
    """
    zero = torch.zeros((), dtype=torch.float64)
    out = {"L_c_s": zero, "L_c_x": zero, "L_cls_s": zero, "L_cls_x": zero}
    head = model.projection
    for key, x, y, bank, lam_c, lam_cls in (
        ("s", batch.x_source, batch.y_source, bank_s, cfg.lambda_c_source, cfg.lambda_cls_source),
        ("x", batch.x_target, batch.y_target, bank_x, cfg.lambda_c_target, cfg.lambda_cls_target),
    ):
        if len(y) == 0:
            continue
        z = model(x)
        if embeddings is not None:
            embeddings[key] = z.detach()
        if lam_c > 0:
            out[f"L_c_{key}"] = indomain_contrastive_loss(z, y, bank, head, cfg.tau)
        if lam_cls > 0:
            if model.classifier is not None:
                l_cls = F.cross_entropy(model.classifier(z), y, reduction="sum")
            else:
                l_cls = dual_domain_cls_loss(z, y, bank_s, bank_x if cfg.dual_term else None,
                                             cfg.logit_scale)
            out[f"L_cls_{key}"] = l_cls
    out["total"] = (cfg.lambda_c_source * out["L_c_s"] + cfg.lambda_cls_source * out["L_cls_s"]
                    + cfg.lambda_c_target * out["L_c_x"] + cfg.lambda_cls_target * out["L_cls_x"])
    return out


def pa_predict(model: PAModel, bank_s: PrototypeBank, x, logit_scale: float = 1.0) -> torch.Tensor:
    """Logits over every class: ``F(x) . phi(Y)`` with the source prototypes,
    or the learned classifier for the row-A wiring."""
    model.eval()
    with torch.no_grad():
        z = model(torch.as_tensor(x, dtype=torch.float64))
        if model.classifier is not None:
            return model.classifier(z)
        if not bank_s.complete:
            missing = [c for c, ok in zip(bank_s.class_ids, bank_s.initialized.tolist()) if not ok]
            raise UninitializedPrototype(f"source prototypes missing for {missing[:5]}")
        return prototype_logits(z, bank_s.prototypes, logit_scale)


class PATrainer:
    """Owns the model, both banks, the optimizer and the batch RNG.

    One :meth:`train_step` is encode -> loss -> parameter update -> bank update.
    """

    def __init__(self, data_dims: tuple[int, list[str], list[int]], cfg: PATrainConfig):
        in_dim, class_ids, seen = data_dims
        self.cfg = cfg.validate()
        self.in_dim = in_dim
        self.class_ids = list(class_ids)
        self.seen = sorted(int(s) for s in seen)
        torch.manual_seed(cfg.seed)
        self.model = PAModel(in_dim, len(class_ids), cfg).double()
        self.bank_s = init_bank(SOURCE, self.class_ids, cfg.embed_dim)
        self.bank_x = init_bank(TARGET, [self.class_ids[s] for s in self.seen], cfg.embed_dim,
                                labels=self.seen)
        backbone = list(self.model.encoder.backbone.parameters())
        backbone_ids = {id(p) for p in backbone}
        rest = [p for p in self.model.parameters() if id(p) not in backbone_ids]
        self.optimizer = torch.optim.Adam([
            {"params": backbone, "lr": cfg.lr * cfg.backbone_lr_mult},
            {"params": rest, "lr": cfg.lr},
        ])
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0

    @classmethod
    def for_data(cls, data: PAData, cfg: PATrainConfig) -> "PATrainer":
        return cls((data.x_source.shape[1], data.class_ids, data.seen), cfg)

    # -- banks ---------------------------------------------------------------
    def _touch(self, bank, x, y):
        """First-touch initialization for classes in ``y`` that have no prototype."""
        rows = bank.rows(y)
        fresh = (rows >= 0) & ~bank.initialized[rows.clamp(min=0)]
        if bool(fresh.any()):
            with torch.no_grad():
                z = self.model(x[fresh])
            for yi, zi in zip(y[fresh].tolist(), z):
                if not bank.initialized[bank.rows([yi])[0]]:  # repeats within the batch
                    bank.update(yi, zi, self.cfg.momentum)

    def warm_start(self, data: PAData) -> None:
        """One pass over all training samples through the momentum update, so
        every class present in the data has a prototype before training."""
        self.model.eval()
        with torch.no_grad():
            for bank, x, y in ((self.bank_s, data.x_source, data.y_source),
                               (self.bank_x, data.x_target, data.y_target)):
                if len(y):
                    z = self.model(torch.as_tensor(x, dtype=torch.float64))
                    bank.update_many(torch.as_tensor(y), z, self.cfg.momentum)

    # -- training --------------------------------------------------------------
    def sample_batch(self, data: PAData) -> MixedBatch:
        cfg = self.cfg
        i_s = self.rng.integers(len(data.y_source), size=cfg.source_per_batch) \
            if len(data.y_source) else np.zeros(0, dtype=int)
        i_x = self.rng.integers(len(data.y_target), size=cfg.target_per_batch) \
            if len(data.y_target) else np.zeros(0, dtype=int)
        as_t = lambda a, dt: torch.as_tensor(a, dtype=dt)  # noqa: E731
        return MixedBatch(as_t(data.x_source[i_s], torch.float64), as_t(data.y_source[i_s], torch.long),
                          as_t(data.x_target[i_x], torch.float64), as_t(data.y_target[i_x], torch.long))

    def train_step(self, batch: MixedBatch) -> dict[str, float]:
        if len(batch.y_source) + len(batch.y_target) == 0:
            raise ValueError("empty mixed batch")
        self._touch(self.bank_s, batch.x_source, batch.y_source)
        self._touch(self.bank_x, batch.x_target, batch.y_target)
        self.model.train()
        self.optimizer.zero_grad()
        z = {}
        losses = pa_losses(self.model, self.bank_s, self.bank_x, batch, self.cfg, embeddings=z)
        if losses["total"].requires_grad:
            losses["total"].backward()
            self.optimizer.step()
        # banks absorb this step's embeddings (computed before the parameter update)
        if "s" in z:
            self.bank_s.update_many(batch.y_source, z["s"], self.cfg.momentum)
        if "x" in z:
            self.bank_x.update_many(batch.y_target, z["x"], self.cfg.momentum)
        self.iteration += 1
        return {k: float(v.detach()) for k, v in losses.items()}

    def fit(self, data: PAData, iterations: int | None = None,
            log: Callable[[dict], None] | None = None,
            on_step: Callable[["PATrainer", dict], None] | None = None) -> list[dict]:
        """Train for ``iterations`` steps (default ``cfg.iterations``); returns log records."""
        if self.iteration == 0 and not (self.bank_s.initialized.any() or self.bank_x.initialized.any()):
            self.warm_start(data)
        n = self.cfg.iterations if iterations is None else iterations
        records = []
        for _ in range(n):
            losses = self.train_step(self.sample_batch(data))
            if on_step is not None:
                on_step(self, losses)
            if self.iteration % self.cfg.log_every == 0 or self.iteration == 1:
                rec = {"iteration": self.iteration, **losses}
                records.append(rec)
                if log is not None:
                    log(rec)
        return records

    def predict(self, x) -> torch.Tensor:
        return pa_predict(self.model, self.bank_s, x, self.cfg.logit_scale)

    # -- checkpoints -----------------------------------------------------------
    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "in_dim": self.in_dim,
            "class_ids": self.class_ids,
            "seen": [self.class_ids[s] for s in self.seen],
            "config": asdict(self.cfg),
            "iteration": self.iteration,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "banks": {SOURCE: self.bank_s.to_dict(), TARGET: self.bank_x.to_dict()},
            "rng": json.dumps(self.rng.bit_generator.state),
        }

    def save(self, path) -> None:
        torch.save(self.state(), Path(path))

    @classmethod
    def load(cls, path, class_order: Sequence[str] | None = None) -> "PATrainer":
        """Restore a trainer. ``class_order`` re-indexes labels when the caller's
        class registry is ordered differently from the one used for training."""
        st = torch.load(Path(path), weights_only=True)
        if st.get("format") != CHECKPOINT_FORMAT or st.get("version") != CHECKPOINT_VERSION:
            raise InvalidConfig(f"{path}: not a version-{CHECKPOINT_VERSION} PA checkpoint")
        class_ids = list(class_order) if class_order is not None else st["class_ids"]
        if sorted(class_ids) != sorted(st["class_ids"]):
            raise InvalidConfig("class_order must be a permutation of the checkpoint's classes")
        pos = {c: i for i, c in enumerate(class_ids)}
        cfg = PATrainConfig.from_dict(st["config"])
        tr = cls((st["in_dim"], class_ids, [pos[c] for c in st["seen"]]), cfg)
        model_state = dict(st["model"])
        if class_order is not None and tr.model.classifier is not None:
            perm = torch.tensor([st["class_ids"].index(c) for c in class_ids])
            model_state["classifier.weight"] = model_state["classifier.weight"][perm]
            model_state["classifier.bias"] = model_state["classifier.bias"][perm]
        tr.model.load_state_dict(model_state)
        tr.optimizer.load_state_dict(st["optimizer"])
        tr.bank_s = _rebank(st["banks"][SOURCE], tr.bank_s)
        tr.bank_x = _rebank(st["banks"][TARGET], tr.bank_x)
        tr.rng.bit_generator.state = json.loads(st["rng"])
        tr.iteration = st["iteration"]
        return tr


def _rebank(d: dict, empty: PrototypeBank) -> PrototypeBank:
    # rows follow the trainer's (possibly reordered) registry, values follow class ids
    for c, vec in d["prototypes"].items():
        r = empty.class_ids.index(c)
        empty.prototypes[r] = torch.as_tensor(vec, dtype=torch.float64)
        empty.initialized[r] = True
    return empty
