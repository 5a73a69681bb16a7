"""Plain-SGD training, held-out evaluation and the ablation sweeps."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ..cbom import LAMBDA_GRID
from ..errors import ContractError, TrainingError
from ..evalstat import InstanceMask, iou, mask_ap
from ..tensorkit import ParamStore
from .config import ModelConfig, Toggles
from .model import filtered_features, forward, init_params, loss, predict_instances, trainable_names
from .synth import SynthSample, synth_camo

log = logging.getLogger(__name__)

DEFAULT_TRAIN_SIZE = 256
DEFAULT_TEST_SIZE = 64
DEFAULT_CONTRAST = 0.6
DEFAULT_BLUR = 1.0
TEST_SEED_OFFSET = 1_000_003


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.steps, self.losses))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "loss"))
            for s, v in self.rows():
                w.writerow((s, repr(float(v))))


def default_datasets(cfg: ModelConfig, n_train: int = DEFAULT_TRAIN_SIZE, n_test: int = DEFAULT_TEST_SIZE,
                     contrast: float = DEFAULT_CONTRAST, blur_sigma: float = DEFAULT_BLUR):
    """Training and held-out synthetic sets; the held-out seed is offset from ``cfg.seed``."""
    train = synth_camo(cfg.seed, n_train, contrast, blur_sigma, hw=cfg.input_hw)
    test = synth_camo(cfg.seed + TEST_SEED_OFFSET, n_test, contrast, blur_sigma, hw=cfg.input_hw)
    return train, test


def _stack(samples):
    images = np.stack([s.image for s in samples])
    targets = np.stack([s.union_mask for s in samples])[..., None].astype(np.float64)
    return images, targets


def precompute_filtered(images: np.ndarray, params: ParamStore, cfg: ModelConfig,
                        chunk: int = 32) -> np.ndarray | None:
    if not cfg.toggles.fdtim:
        return None
    parts = [filtered_features(images[i:i + chunk], params, cfg).data
             for i in range(0, len(images), chunk)]
    return np.concatenate(parts)


def fit(dataset: list[SynthSample], cfg: ModelConfig, params: ParamStore | None = None,
        log_every: int = 50) -> tuple[ParamStore, TrainLog]:
    """Train with fixed-rate SGD on shuffled mini-batches.

    The filtered-image encoder (``frozen.*``) is never updated; its features
    are computed once up front.
    """
    if not dataset:
        raise ContractError("fit needs a non-empty dataset")
    params = init_params(cfg) if params is None else params
    images, targets = _stack(dataset)
    f_k = precompute_filtered(images, params, cfg)
    names = trainable_names(params)
    rng = np.random.default_rng([cfg.seed, 7])
    order = rng.permutation(len(dataset))
    cursor = 0
    history = TrainLog()
    bs = min(cfg.batch_size, len(dataset))
    for step in range(cfg.steps):
        if cursor + bs > len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        idx = np.sort(order[cursor:cursor + bs])
        cursor += bs
        params.zero_grad()
        out = forward(images[idx], params, cfg, None if f_k is None else f_k[idx])
        value = loss(out.mask_logits, targets[idx])
        lv = float(value.data)
        if not np.isfinite(lv):
            raise TrainingError(f"loss became {lv} at step {step}", step=step)
        value.backward()
        for n in names:
            p = params[n]
            if p.grad is not None:
                p.data -= cfg.learning_rate * p.grad
        history.steps.append(step)
        history.losses.append(lv)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, lv)
    params.zero_grad()
    return params, history


@dataclass
class EvalResult:
    mean_iou: float
    ap: float
    ap50: float
    ap75: float
    per_sample_iou: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75, "mean_iou": self.mean_iou}


def predict(samples, params: ParamStore, cfg: ModelConfig, chunk: int = 16):
    """Forward results for ``samples`` in chunks; returns (logits, salience) arrays."""
    images = np.stack([s.image for s in samples])
    logits, sal = [], []
    for i in range(0, len(images), chunk):
        out = forward(images[i:i + chunk], params, cfg)
        logits.append(out.mask_logits.data)
        sal.append(out.salience.data)
    return np.concatenate(logits), np.concatenate(sal)


def evaluate(samples, params: ParamStore, cfg: ModelConfig) -> EvalResult:
    """Mean union-mask IoU and instance mask AP on ``samples``."""
    logits, sal = predict(samples, params, cfg)
    ious, preds, gts = [], [], []
    for s, lg, sl in zip(samples, logits, sal):
        ious.append(iou(lg[..., 0] >= 0.0, s.union_mask))
        preds.append(predict_instances(lg, sl))
        gts.append([InstanceMask(m) for m in s.instance_masks])
    rep = mask_ap(preds, gts)
    return EvalResult(float(np.mean(ious)), rep.ap, rep.ap50, rep.ap75, ious)


# ------------------------------------------------------------------ ablation
GRIDS = ("lambda", "k", "modules", "freq")


def k_grid(input_hw, n: int = 6) -> list[int]:
    """0 plus log-spaced K up to 1/30 of all components (``H*W*3``)."""
    kmax = max(1, (input_hw[0] * input_hw[1] * 3) // 30)
    kmax = min(kmax, input_hw[0] * input_hw[1])
    vals = np.unique(np.round(np.logspace(0, np.log10(kmax), n)).astype(int))
    return [0] + [int(v) for v in vals]


MODULE_SETTINGS = (
    ("full", Toggles()),
    ("w/o CBOM", Toggles(cbom=False)),
    ("w/o MFFAM", Toggles(mffam_low=False, mffam_high=False)),
    ("w/o FDTIM", Toggles(fdtim=False)),
    ("w/o ALL", Toggles.all_off()),
)

FREQ_SETTINGS = (
    ("low-/high-", Toggles(mffam_low=False, mffam_high=False)),
    ("low-/high+", Toggles(mffam_low=False, mffam_high=True)),
    ("low+/high-", Toggles(mffam_low=True, mffam_high=False)),
    ("low+/high+", Toggles()),
)


def grid_settings(grid: str, cfg: ModelConfig) -> list[tuple[str, ModelConfig]]:
    if grid == "lambda":
        return [(f"lambda={lam:.1f}", cfg.replace(lam=lam)) for lam in LAMBDA_GRID]
    if grid == "k":
        return [(f"k={k}", cfg.replace(k_filter=k)) for k in k_grid(cfg.input_hw)]
    if grid == "modules":
        return [(label, cfg.replace(toggles=t)) for label, t in MODULE_SETTINGS]
    if grid == "freq":
        return [(label, cfg.replace(toggles=t)) for label, t in FREQ_SETTINGS]
    raise ContractError(f"unknown grid {grid!r}; expected one of {GRIDS}")


CSV_FIELDS = ("grid", "setting", "lambda", "k", "cbom", "fdtim", "mffam_low", "mffam_high",
              "ap", "ap50", "ap75", "mean_iou", "final_loss")


def run_ablation(grid: str, cfg: ModelConfig, train=None, test=None) -> list[dict]:
    """Train and evaluate one model per grid setting; one result row each."""
    if train is None or test is None:
        train, test = default_datasets(cfg)
    rows = []
    for label, c in grid_settings(grid, cfg):
        params, history = fit(train, c, log_every=0)
        res = evaluate(test, params, c)
        row = {"grid": grid, "setting": label, "lambda": c.lam, "k": c.k, **c.toggles.as_dict(),
               **res.as_row(), "final_loss": history.losses[-1] if history.losses else float("nan")}
        log.info("%s %s: AP %.4f mIoU %.4f", grid, label, res.ap, res.mean_iou)
        rows.append(row)
    return rows


def write_rows(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_FIELDS})
