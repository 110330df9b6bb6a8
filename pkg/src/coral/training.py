"""Tuple mining, lazy quadruplet loss, two-stage negative sampling and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import DataError, NumericalError
from .network import CoralNet, batch_inputs
from .tensor_nn import save_checkpoint

log = logging.getLogger(__name__)


class MiningError(DataError):
    pass


@dataclass(frozen=True)
class SampleMeta:
    id: int
    x: float
    y: float
    heading: float = 0.0  # degrees in [-180, 180)
    run: int = 0
    image_path: str = ""
    cloud_path: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"sample {self.id}: non-finite position")
        if not -180.0 <= self.heading < 180.0:
            raise ValueError(f"sample {self.id}: heading {self.heading} outside [-180, 180)")


@dataclass(frozen=True)
class TrainingTuple:
    anchor: SampleMeta
    positives: tuple[SampleMeta, ...]
    negatives: tuple[SampleMeta, ...]
    extra_negative: SampleMeta
    negative_pool: tuple[SampleMeta, ...] = field(repr=False, default=())


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.5
    beta: float = 0.2
    second_term: str = "negstar_negatives"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("margins must be positive")
        if self.second_term not in ("negstar_negatives", "anchor_negstar"):
            raise ValueError(f"bad second_term {self.second_term!r}")


@dataclass(frozen=True)
class MiningRules:
    positive_radius: float = 10.0
    negative_radius: float = 50.0
    heading_bound: float = 30.0
    num_positives: int = 2
    num_negatives: int = 18
    anchor_run: int = -1  # -1: every sample may anchor a tuple

    @classmethod
    def from_config(cls, cfg) -> "MiningRules":
        return cls(cfg["positive_radius"], cfg["negative_radius"], cfg["heading_bound_deg"],
                   cfg["num_positives"], cfg["num_negatives"], cfg["anchor_run"])


def heading_difference(a: float, b: float) -> float:
    return abs((a - b + 180.0) % 360.0 - 180.0)


def _distances(metas: Sequence[SampleMeta]) -> np.ndarray:
    xy = np.array([[m.x, m.y] for m in metas])
    return np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))


def mine_tuples(metas: Sequence[SampleMeta], rules: MiningRules = MiningRules(),
                rng: np.random.Generator | None = None) -> list[TrainingTuple]:
    """One tuple per anchor that has enough positives and a feasible negative set.

    The extra negative is chosen first; the anchor's negative pool then keeps
    only samples at least ``negative_radius`` from it, so every negative drawn
    later (random or hard) respects the joint-distance constraint.
    """
    rng = rng or np.random.default_rng(0)
    dist = _distances(metas)
    heading = np.array([m.heading for m in metas])
    hdiff = np.abs((heading[:, None] - heading[None, :] + 180.0) % 360.0 - 180.0)
    near = (dist < rules.positive_radius) & (hdiff < rules.heading_bound)
    np.fill_diagonal(near, False)
    far = dist >= rules.negative_radius

    tuples = []
    lacking_pos = lacking_neg = 0
    for a in range(len(metas)):
        if rules.anchor_run >= 0 and metas[a].run != rules.anchor_run:
            continue
        pos_idx = np.nonzero(near[a])[0]
        if len(pos_idx) < rules.num_positives:
            lacking_pos += 1
            continue
        pos = rng.choice(pos_idx, rules.num_positives, replace=False)
        neg_idx = np.nonzero(far[a])[0]
        extra_candidates = [e for e in neg_idx if far[e, pos].all()]
        chosen = None
        for e in rng.permutation(extra_candidates):
            pool = neg_idx[far[e, neg_idx]]
            if len(pool) >= rules.num_negatives:
                chosen = (e, pool)
                break
        if chosen is None:
            lacking_neg += 1
            continue
        e, pool = chosen
        negatives = rng.choice(pool, rules.num_negatives, replace=False)
        tuples.append(TrainingTuple(
            anchor=metas[a],
            positives=tuple(metas[p] for p in pos),
            negatives=tuple(metas[n] for n in negatives),
            extra_negative=metas[e],
            negative_pool=tuple(metas[n] for n in pool),
        ))
    if not tuples:
        raise MiningError(
            f"no training tuples from {len(metas)} samples: {lacking_pos} anchors lack "
            f"{rules.num_positives} positives, {lacking_neg} lack {rules.num_negatives} feasible negatives")
    return tuples


@dataclass
class QuadrupletLoss:
    loss: torch.Tensor
    term1: float
    term2: float
    positive_index: int
    negative_index: int
    second_index: int


def lazy_quadruplet_loss(d_anchor_pos, d_anchor_neg, d_second, alpha: float = 0.5,
                         beta: float = 0.2) -> QuadrupletLoss:
    """Hinge loss using only the hardest positive and the hardest negatives.

    ``d_second`` holds the distances compared in the second hinge: either the
    extra negative to each negative, or the single anchor-to-extra distance.
    Every distance is a squared Euclidean distance between unit descriptors.
    Ties pick the lowest index.
    """
    d_ap, d_an, d_2 = (torch.as_tensor(d, dtype=torch.float64) if not torch.is_tensor(d) else d
                       for d in (d_anchor_pos, d_anchor_neg, d_second))
    p = int(np.argmax(d_ap.detach().cpu().numpy()))
    n = int(np.argmin(d_an.detach().cpu().numpy()))
    s = int(np.argmin(d_2.detach().cpu().numpy()))
    term1 = torch.clamp(alpha + d_ap[p] - d_an[n], min=0.0)
    term2 = torch.clamp(beta + d_ap[p] - d_2[s], min=0.0)
    return QuadrupletLoss(term1 + term2, term1.item(), term2.item(), p, n, s)


def squared_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise squared Euclidean distance from vector ``a`` to every row of ``b``."""
    return ((b - a) ** 2).sum(dim=-1)


def descriptor_loss(anchor, positives, negatives, extra, params: LossParams = LossParams()) -> QuadrupletLoss:
    d_ap = squared_distances(anchor, positives)
    d_an = squared_distances(anchor, negatives)
    if params.second_term == "negstar_negatives":
        d_2 = squared_distances(extra, negatives)
    else:
        d_2 = squared_distances(anchor, extra[None, :])
    return lazy_quadruplet_loss(d_ap, d_an, d_2, params.alpha, params.beta)


def sample_negatives(stage: str, pool: Sequence, count: int = 18, rng: np.random.Generator | None = None,
                     anchor_descriptor: np.ndarray | None = None,
                     pool_descriptors: np.ndarray | None = None) -> list:
    """Random stage: uniform without replacement. Hard stage: the ``count`` pool
    members whose descriptors are closest to the anchor's (ties by pool order)."""
    if len(pool) < count:
        raise MiningError(f"negative pool has {len(pool)} samples, {count} needed")
    if stage == "random":
        rng = rng or np.random.default_rng(0)
        return [pool[k] for k in rng.choice(len(pool), count, replace=False)]
    if stage == "hard":
        d = ((np.asarray(pool_descriptors, np.float64) - np.asarray(anchor_descriptor, np.float64)) ** 2).sum(1)
        order = np.argsort(d, kind="stable")[:count]
        return [pool[k] for k in order]
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)  # (step, loss, term1, term2)
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


def write_loss_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "term1", "term2"])
        for step, loss, t1, t2 in rows:
            writer.writerow([step, repr(float(loss)), repr(float(t1)), repr(float(t2))])


def read_loss_csv(path: str | Path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"]), float(r["term1"]), float(r["term2"]))
                for r in csv.DictReader(fh)]


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 200
    learning_rate: float = 1e-4
    lr_halve_epochs: int = 5
    stage1_epochs: int = 2
    seed: int = 0
    loss: LossParams = LossParams()
    num_negatives: int = 18

    @classmethod
    def from_config(cls, cfg, **overrides) -> "TrainSettings":
        values = dict(steps=cfg["steps"], learning_rate=cfg["learning_rate"], lr_halve_epochs=cfg["lr_halve_epochs"],
                      stage1_epochs=cfg["stage1_epochs"], seed=cfg["seed"],
                      loss=LossParams(cfg["alpha"], cfg["beta"], cfg["second_term"]),
                      num_negatives=cfg["num_negatives"])
        values.update(overrides)
        return cls(**values)


def train(model: CoralNet, samples: dict, tuples: Sequence[TrainingTuple], settings: TrainSettings,
          out_dir: str | Path | None = None) -> TrainResult:
    """Optimise ``model`` in place, one tuple per step.

    ``samples`` maps sample id to a prepared sample (``image``, ``elevation``,
    ``table``). Negatives are drawn at random for the first
    ``stage1_epochs`` epochs, then mined as the hardest ones under descriptors
    refreshed with the current model at the start of every epoch.
    """
    rng = np.random.default_rng(settings.seed)
    torch.manual_seed(settings.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.learning_rate)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult()
    ids = sorted(samples)
    row_of = {sid: k for k, sid in enumerate(ids)}

    step, epoch = 0, 0
    while step < settings.steps:
        stage = "random" if epoch < settings.stage1_epochs else "hard"
        lr = settings.learning_rate * 0.5 ** (epoch // settings.lr_halve_epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        snapshot = model.describe([samples[i] for i in ids]) if stage == "hard" else None
        for t in rng.permutation(len(tuples)):
            if step >= settings.steps:
                break
            tup = tuples[t]
            if stage == "hard":
                pool_desc = snapshot[[row_of[m.id] for m in tup.negative_pool]]
                negatives = sample_negatives("hard", tup.negative_pool, settings.num_negatives,
                                             anchor_descriptor=snapshot[row_of[tup.anchor.id]],
                                             pool_descriptors=pool_desc)
            else:
                negatives = sample_negatives("random", tup.negative_pool, settings.num_negatives, rng)
            members = [tup.anchor, *tup.positives, *negatives, tup.extra_negative]
            model.train()
            desc = model(**batch_inputs([samples[m.id] for m in members]))
            n_pos = len(tup.positives)
            result_loss = descriptor_loss(desc[0], desc[1:1 + n_pos], desc[1 + n_pos:-1], desc[-1], settings.loss)
            loss = result_loss.loss
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at step {step} (epoch {epoch}, anchor {tup.anchor.id}): "
                    f"term1={result_loss.term1} term2={result_loss.term2}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            result.rows.append((step, loss.item(), result_loss.term1, result_loss.term2))
            step += 1
        epoch += 1
        log.info("epoch %d (%s negatives) done at step %d, last loss %.4f", epoch, stage, step, result.rows[-1][1])
        if out_dir is not None:
            path = out_dir / f"epoch{epoch:03d}.ckpt"
            save_checkpoint(path, model.state_dict())
            result.checkpoints.append(path)
    if out_dir is not None:
        path = out_dir / "final.ckpt"
        save_checkpoint(path, model.state_dict())
        result.checkpoints.append(path)
        write_loss_csv(out_dir / "loss.csv", result.rows)
    return result


def loss_reduction(losses: Sequence[float], window: int) -> tuple[float, float]:
    """Mean loss over the first and the last ``window`` steps."""
    losses = np.asarray(losses, float)
    window = max(1, min(window, len(losses)))
    return float(losses[:window].mean()), float(losses[-window:].mean())
