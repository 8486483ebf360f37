"""GECO-constrained training and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import Corpus
from .icsbp import FixedK, MassThreshold, StopPolicy
from .likelihood import gaussian_kl, mask_consistency_kl, sgmm_log_likelihood
from .metrics import ari, ideal_slot_count, msc, predicted_labels, slot_count_mae
from .model import EncodeResult, SceneVAE
from .nn import RngState, adam_step

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "nll", "kl_latent", "kl_mask", "beta", "ema_error")
GOAL_PER_VALUE = 0.5655


class NumericalError(RuntimeError):
    def __init__(self, step: int, breakdown: "LossBreakdown"):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown.describe()}")


@dataclass(frozen=True)
class GecoState:
    """Multiplicative controller on the KL weight; ``goal`` and ``ema_error`` are image totals."""

    goal: float
    beta: float = 1.0
    ema_error: float | None = None
    alpha_g: float = 0.99
    eta_up: float = 1e-4
    eta_down: float = 1e-5
    beta_min: float = 1e-10

    @classmethod
    def create(cls, goal: float, use_mask_loss: bool = False, beta_init: float | None = None, **kw) -> "GecoState":
        if beta_init is None:
            beta_init = 1e-10 if use_mask_loss else 1.0
        state = cls(goal=goal, beta=beta_init, **kw)
        if not state.beta_min > 0 or state.beta < state.beta_min:
            raise ValueError("need beta_min > 0 and beta_init >= beta_min")
        if not 0.0 <= state.alpha_g <= 1.0:
            raise ValueError("alpha_g must lie in [0, 1]")
        return state


def scaled_goal(per_value: float, image_size, channels: int) -> float:
    h, w = image_size
    return per_value * h * w * channels


def geco_update(geco: GecoState, nll: float) -> GecoState:
    nll = float(nll)
    if geco.ema_error is None or math.isnan(geco.ema_error):
        ema = nll
    else:
        ema = geco.alpha_g * geco.ema_error + (1.0 - geco.alpha_g) * nll
    eta = geco.eta_down if geco.goal <= ema else geco.eta_up
    beta = max(geco.beta * math.exp(eta * (geco.goal - ema)), geco.beta_min)
    return dataclasses.replace(geco, beta=beta, ema_error=ema)


@dataclass
class LossBreakdown:
    nll: float
    kl_latent: float
    kl_mask: float
    beta_used: float
    total: T.Tensor

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    def describe(self) -> str:
        return (f"nll={self.nll!r} kl_latent={self.kl_latent!r} kl_mask={self.kl_mask!r} "
                f"beta={self.beta_used!r} total={self.total_value!r}")

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.nll, self.kl_latent, self.kl_mask, self.total_value))


def compute_loss(result: EncodeResult, x, sigma_x: float, geco: GecoState, use_mask_loss: bool) -> LossBreakdown:
    """Batch-mean nll + beta * (KL_latent + KL_mask); beta is a constant."""
    ll = sgmm_log_likelihood(x, result.components, sigma_x)
    nll = -T.mean(ll)
    q, p = result.latents.posterior, result.latents.prior
    kl_latent = T.mean(T.sum_(gaussian_kl(q, p), axis=-1))
    beta = float(geco.beta)
    if use_mask_loss:
        kl_mask = T.mean(mask_consistency_kl(result.attention, result.components.masks_pi.data))
        total = nll + beta * (kl_latent + kl_mask)
        kl_mask_value = float(kl_mask.data)
    else:
        total = nll + beta * kl_latent
        kl_mask_value = 0.0
    return LossBreakdown(float(nll.data), float(kl_latent.data), kl_mask_value, beta, total)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 8
    lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    sigma_x: float = 0.7
    geco_goal: float = GOAL_PER_VALUE  # per pixel and channel
    geco_alpha: float = 0.99
    geco_eta_up: float = 1e-4
    geco_eta_down: float = 1e-5
    beta_min: float = 1e-10
    beta_init: float | None = None
    use_mask_loss: bool = False
    seed: int = 0
    log_every: int = 1
    save_every: int = 2000


@dataclass
class TrainResult:
    step: int
    geco: GecoState
    last: LossBreakdown | None
    checkpoints: list


def _batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Epoch-wise shuffled batches; a function of (seed, step) so resuming is exact."""
    per_epoch = max(n // batch, 1)
    epoch, pos = divmod(step, per_epoch)
    order = RngState.derived(seed, 1, epoch).generator.permutation(n)
    idx = order[pos * batch:(pos + 1) * batch]
    if idx.size < batch:
        idx = np.resize(order, batch)
    return idx


def train(model: SceneVAE, corpus: Corpus, config: TrainConfig, out_dir=None,
          start_step: int = 0, geco: GecoState | None = None, log_rows: list | None = None) -> TrainResult:
    """Train for ``config.steps`` total steps (continuing from ``start_step``).

    Writes ``metrics.csv`` and ``ckpt/step-<n>.ocpt`` under ``out_dir`` when
    given; log rows are also appended to ``log_rows`` if a list is passed.
    """
    cfg = model.config
    images = corpus.float_images(T.get_default_dtype())
    if images.shape[1:] != tuple(cfg.image_size) + (cfg.channels,):
        raise T.ShapeError("train", images.shape, tuple(cfg.image_size) + (cfg.channels,))
    store = model.store()
    if geco is None:
        geco = GecoState.create(
            scaled_goal(config.geco_goal, cfg.image_size, cfg.channels),
            use_mask_loss=config.use_mask_loss, beta_init=config.beta_init,
            alpha_g=config.geco_alpha, eta_up=config.geco_eta_up, eta_down=config.geco_eta_down,
            beta_min=config.beta_min)
    policy = FixedK(cfg.k_train)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        (out / "ckpt").mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.csv"
        resume = start_step > 0 and log_path.exists()
        fh = open(log_path, "a" if resume else "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if not resume:
            writer.writerow(LOG_HEADER)
    log.info("GECO goal %.6g per value, %.6g per image", config.geco_goal, geco.goal)
    checkpoints, last = [], None

    def save(step: int) -> None:
        if out is not None:
            path = out / "ckpt" / f"step-{step}.ocpt"
            save_checkpoint(path, Checkpoint.from_store(store, step, geco.beta, geco.ema_error))
            checkpoints.append(path)

    try:
        step = start_step
        while step < config.steps:
            idx = _batch_indices(len(images), config.batch_size, step, config.seed)
            x = images[idx]
            rng = RngState.derived(config.seed, 2, step)
            result = model.encode(x, policy, rng)
            last = compute_loss(result, x, config.sigma_x, geco, config.use_mask_loss)
            if not last.is_finite():
                raise NumericalError(step + 1, last)
            last.total.backward()
            adam_step(store, config.lr, config.adam_betas, config.adam_eps)
            geco = geco_update(geco, last.nll)
            step += 1
            if step % config.log_every == 0 or step == config.steps:
                row = (step, repr(last.nll), repr(last.kl_latent), repr(last.kl_mask),
                       repr(geco.beta), repr(geco.ema_error))
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                if log_rows is not None:
                    log_rows.append(row)
            if config.save_every and step % config.save_every == 0 and step != config.steps:
                save(step)
        if not checkpoints or checkpoints[-1].name != f"step-{step}.ocpt":
            save(step)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(step, geco, last, checkpoints)


# evaluation -----------------------------------------------------------------


EVAL_COLUMNS = ("image", "ari_fg", "msc_fg", "ari", "msc", "k", "ideal_k", "elbo")
SUMMARY_KEYS = ("ari_fg", "msc_fg", "ari", "msc", "avg_k", "mae", "elbo", "n_images")


@dataclass
class EvalReport:
    rows: list  # one dict per image
    summary: dict

    def write(self, summary_path, images_path=None) -> None:
        summary_path = Path(summary_path)
        summary_path.parent.mkdir(parents=True, exist_ok=True)
        with open(summary_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("metric", "value"))
            for key in SUMMARY_KEYS:
                w.writerow((key, repr(self.summary[key])))
        if images_path is not None:
            with open(images_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(EVAL_COLUMNS)
                for row in self.rows:
                    w.writerow([row[c] if c == "image" else repr(row[c]) for c in EVAL_COLUMNS])
                w.writerow(["mean"] + [repr(self.summary[c]) for c in ("ari_fg", "msc_fg", "ari", "msc", "avg_k")]
                           + ["", repr(self.summary["elbo"])])


def score_segmentation(pred, truth) -> dict:
    return {
        "ari_fg": ari(pred, truth, foreground_only=True),
        "msc_fg": msc(pred, truth, foreground_only=True),
        "ari": ari(pred, truth),
        "msc": msc(pred, truth),
    }


def summarize(rows: list) -> dict:
    summary = {key: float(np.mean([r[key] for r in rows])) for key in ("ari_fg", "msc_fg", "ari", "msc", "elbo")}
    summary["avg_k"] = float(np.mean([r["k"] for r in rows]))
    summary["mae"] = slot_count_mae([(r["k"], r["ideal_k"]) for r in rows])
    summary["n_images"] = len(rows)
    return summary


def evaluate(model: SceneVAE, corpus: Corpus, policy: StopPolicy, sigma_x: float = 0.7,
             seed: int = 0, batch_size: int = 32, segment_from: str = "pi") -> EvalReport:
    """Segmentation metrics, slot counts and a one-sample ELBO over every record.

    ``segment_from`` picks the masks whose argmax gives the predicted labels:
    the decoded object masks ("pi") or the attention masks ("attention").
    """
    if corpus.labels is None or corpus.labels.shape[0] != len(corpus):
        raise ValueError("evaluate: corpus has no ground-truth labels")
    if segment_from not in ("pi", "attention"):
        raise ValueError("segment_from must be 'pi' or 'attention'")
    images = corpus.float_images(T.get_default_dtype())
    step = 1 if isinstance(policy, MassThreshold) else batch_size
    rows = []
    with T.no_grad():
        for start in range(0, len(images), step):
            x = images[start:start + step]
            result = model.encode(x, policy, RngState.derived(seed, 3, start))
            ll = sgmm_log_likelihood(x, result.components, sigma_x).data
            kl = T.sum_(gaussian_kl(result.latents.posterior, result.latents.prior), axis=-1).data
            masks = result.components.masks_pi if segment_from == "pi" else result.attention.masks
            pred = predicted_labels(masks.data)
            k = result.attention.num_slots
            for b in range(x.shape[0]):
                truth = corpus.labels[start + b]
                row = {"image": start + b, **score_segmentation(pred[b], truth)}
                row.update(k=k, ideal_k=ideal_slot_count(truth), elbo=float(kl[b] - ll[b]))
                rows.append(row)
    return EvalReport(rows, summarize(rows))
