"""Training procedures for the three forecaster variants.

- tecde:     outcome model trained on plain MSE over observed targets.
- twostep:   stage 1 fits a full model (trunk + intensity head) on
             cross-entropy; stage 2 fits a fresh outcome model on weighted
             MSE with weights frozen from stage-1 intensity predictions.
- multitask: one model, one solver call per batch; the weighted outcome loss
             updates trunk and outcome head while the cross-entropy loss
             reaches only the intensity head (its latents are detached), and
             the combined scalar drives early stopping only.

Every epoch samples one window batch for the gradient step.  Early stopping
watches the training loss evaluated on a fixed subsample of training windows
(drawn once per run), so the stopping signal moves only when the parameters
move; the best parameters (not the last) are restored.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from . import cdeflow as cf
from . import datastore as ds
from . import objectives as ob
from .gradcore import ParamStore, Tape

VARIANTS = ("tecde", "twostep", "multitask")


class TrainError(RuntimeError):
    """Raised when training cannot proceed (bad config or divergence)."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "multitask"
    batch_size: int = 128
    lr: float = 5e-4
    max_epochs: int = 1000
    patience: int = 50
    alpha: float = 0.8
    seed: int = 0
    val_every: int = 25
    val_windows: int = 512
    stop_windows: int = 512

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TrainError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise TrainError("batch_size, max_epochs, and patience must be positive")
        if self.stop_windows < 1:
            raise TrainError("stop_windows must be positive")
        if self.lr <= 0:
            raise TrainError("learning rate must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise TrainError("alpha must lie strictly inside (0, 1)")


@dataclass
class TrainedModel:
    params: ParamStore                    # outcome model
    intensity_params: ParamStore | None   # model that predicts intensities
    model_config: cf.ModelConfig
    train_config: TrainConfig
    history: list                         # per-epoch dicts
    stopped_epoch: int
    best_epoch: int
    best_loss: float
    fingerprint: str
    wall_time: float = 0.0


def config_fingerprint(model_cfg: cf.ModelConfig, train_cfg: TrainConfig,
                       extra: dict | None = None) -> str:
    payload = {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "extra": extra or {},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def fit_model_config(base: cf.ModelConfig, dataset: ds.Dataset,
                     with_intensity_head: bool) -> cf.ModelConfig:
    """Align architecture knobs that the dataset dictates."""
    return dataclasses.replace(
        base,
        lookback=dataset.config.lookback,
        horizon=dataset.config.horizon,
        n_static=dataset.config.n_static if dataset.config.mode == "sar_unrelated" else 0,
        with_intensity_head=with_intensity_head,
    )


def _epoch_metrics(mode: str, y_hat, lam_hat, sub: cf.WindowBatch,
                   weights, alpha: float) -> dict:
    out = {}
    if mode == "mse":
        out["loss"] = float(ob.loss_mse(y_hat.data, sub.targets, sub.dn).data)
    elif mode == "wmse_fixed":
        out["loss"] = float(ob.loss_wmse(y_hat.data, sub.targets, sub.dn, weights).data)
    elif mode == "ce_full":
        out["loss"] = float(ob.loss_ce(lam_hat.data, sub.dn, sub.grid).data)
    elif mode == "multitask":
        wmse = float(ob.loss_wmse(y_hat.data, sub.targets, sub.dn, weights).data)
        ce = float(ob.loss_ce(lam_hat.data, sub.dn, sub.grid).data)
        out.update(wmse=wmse, ce=ce, loss=ob.loss_multitask(wmse, ce, alpha))
    return out


def _fit(store: ParamStore, model_cfg: cf.ModelConfig, batch: cf.WindowBatch,
         mode: str, tcfg: TrainConfig, fixed_weights: np.ndarray | None = None,
         val_batch: cf.WindowBatch | None = None):
    """Shared training loop. mode selects the objective:

    - "mse":        plain squared error (tecde)
    - "ce_full":    cross-entropy through the whole model (two-step stage 1)
    - "wmse_fixed": weighted squared error with precomputed weights (stage 2)
    - "multitask":  weighted squared error + detached-latent cross-entropy

    The stopping metric is the same objective evaluated (without gradients)
    on a fixed subsample of training windows after each update, so patience
    reacts to parameter movement rather than to batch-resampling noise.

    Mutates store; restores the best-metric parameters before returning.
    Returns (history, stopped_epoch, best_epoch, best_loss).
    """
    if batch.size == 0:
        raise TrainError("training split produced no forecast windows")
    rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 3)))
    val_rows = None
    if val_batch is not None and val_batch.size > 0:
        k = min(tcfg.val_windows, val_batch.size)
        val_rows = val_batch.take(rng.choice(val_batch.size, size=k, replace=False))
    stop_idx = rng.choice(batch.size, size=min(tcfg.stop_windows, batch.size),
                          replace=False)
    stop_rows = batch.take(stop_idx)
    stop_fixed_w = fixed_weights[stop_idx] if fixed_weights is not None else None

    history = []
    best_loss = np.inf
    best_state = store.state_dict()
    best_epoch = 0
    since_best = 0
    epochs_run = 0
    for epoch in range(tcfg.max_epochs):
        rows = rng.choice(batch.size, size=min(tcfg.batch_size, batch.size), replace=False)
        sub = batch.take(rows)
        w_rows = fixed_weights[rows] if fixed_weights is not None else None

        tape = Tape()
        leaves = store.leaves(tape)
        y_hat, lam_hat = cf.predict(leaves, model_cfg, sub,
                                    detach_intensity=(mode == "multitask"))
        if mode == "mse":
            loss = ob.loss_mse(y_hat, sub.targets, sub.dn)
        elif mode == "ce_full":
            loss = ob.loss_ce(lam_hat, sub.dn, sub.grid)
        elif mode == "wmse_fixed":
            loss = ob.loss_wmse(y_hat, sub.targets, sub.dn, w_rows)
        elif mode == "multitask":
            w_rows = ob.make_weights(lam_hat)
            wmse = ob.loss_wmse(y_hat, sub.targets, sub.dn, w_rows)
            ce = ob.loss_ce(lam_hat, sub.dn, sub.grid)
            loss = wmse + ce  # parameter sets are disjoint, so this routes itself
        else:
            raise TrainError(f"unknown training mode {mode!r}")

        store.zero_grads()
        tape.backward(loss)
        store.collect(leaves)

        entry = {"epoch": epoch}
        entry.update(_epoch_metrics(mode, y_hat, lam_hat, sub, w_rows, tcfg.alpha))
        if not np.isfinite(entry["loss"]):
            raise TrainError(
                f"training diverged: non-finite loss {entry['loss']} "
                f"at epoch {epoch} (mode {mode})"
            )
        store.adam_step(lr=tcfg.lr)
        epochs_run = epoch + 1

        sy, slam = cf.predict(store.constants(), model_cfg, stop_rows)
        sw = ob.make_weights(slam) if mode == "multitask" else stop_fixed_w
        entry.update({f"stop_{k}": v for k, v in
                      _epoch_metrics(mode, sy, slam, stop_rows, sw, tcfg.alpha).items()})
        metric = entry["stop_loss"]
        if not np.isfinite(metric):
            raise TrainError(
                f"training diverged: non-finite stopping loss {metric} "
                f"at epoch {epoch} (mode {mode})"
            )

        if metric < best_loss:
            best_loss = metric
            best_epoch = epoch
            best_state = store.state_dict()
            since_best = 0
        else:
            since_best += 1
        entry["best"] = best_loss

        if val_rows is not None and epoch % tcfg.val_every == 0:
            vy, vlam = cf.predict(store.constants(), model_cfg, val_rows)
            vw = None
            if mode == "multitask":
                vw = ob.make_weights(vlam)
            elif mode == "wmse_fixed":
                vw = np.ones_like(val_rows.targets)
            entry.update({f"val_{k}": v for k, v in
                          _epoch_metrics(mode, vy, vlam, val_rows, vw, tcfg.alpha).items()})
        history.append(entry)
        if since_best >= tcfg.patience:
            break

    store.load_values(best_state)
    return history, epochs_run, best_epoch, best_loss


def _train_prepare(dataset: ds.Dataset, model_cfg: cf.ModelConfig):
    train_batch = cf.prepare(ds.windows(dataset, "train"), model_cfg,
                             dataset.vol_scale, dataset.time_scale)
    val_windows = list(ds.windows(dataset, "val"))
    val_batch = (cf.prepare(val_windows, model_cfg, dataset.vol_scale, dataset.time_scale)
                 if val_windows else None)
    return train_batch, val_batch


def train_tecde(dataset: ds.Dataset, model_cfg: cf.ModelConfig,
                tcfg: TrainConfig) -> TrainedModel:
    cfg = fit_model_config(model_cfg, dataset, with_intensity_head=False)
    store = cf.init_model(cfg, (tcfg.seed, 0))
    train_batch, val_batch = _train_prepare(dataset, cfg)
    history, stopped, best_epoch, best_loss = _fit(
        store, cfg, train_batch, "mse", tcfg, val_batch=val_batch)
    return TrainedModel(store, None, cfg, tcfg, history, stopped, best_epoch,
                        best_loss, config_fingerprint(cfg, tcfg))


def train_twostep(dataset: ds.Dataset, model_cfg: cf.ModelConfig,
                  tcfg: TrainConfig) -> TrainedModel:
    cfg_full = fit_model_config(model_cfg, dataset, with_intensity_head=True)
    cfg_out = dataclasses.replace(cfg_full, with_intensity_head=False)
    train_batch, val_batch = _train_prepare(dataset, cfg_full)

    stage1 = cf.init_model(cfg_full, (tcfg.seed, 0))
    hist1, stopped1, _, _ = _fit(stage1, cfg_full, train_batch, "ce_full", tcfg,
                                 val_batch=val_batch)

    # frozen stage-1 intensities -> truncated inverse weights, fixed for stage 2
    _, lam_hat = cf.predict(stage1.constants(), cfg_full, train_batch)
    weights = ob.make_weights(lam_hat)

    stage2 = cf.init_model(cfg_out, (tcfg.seed, 1))
    hist2, stopped2, best_epoch, best_loss = _fit(
        stage2, cfg_out, train_batch, "wmse_fixed", tcfg,
        fixed_weights=weights, val_batch=val_batch)

    history = ([dict(stage=1, **h) for h in hist1]
               + [dict(stage=2, **h) for h in hist2])
    trained = TrainedModel(stage2, stage1, cfg_out, tcfg, history,
                           stopped1 + stopped2, best_epoch, best_loss,
                           config_fingerprint(cfg_out, tcfg))
    return trained


def train_multitask(dataset: ds.Dataset, model_cfg: cf.ModelConfig,
                    tcfg: TrainConfig) -> TrainedModel:
    cfg = fit_model_config(model_cfg, dataset, with_intensity_head=True)
    store = cf.init_model(cfg, (tcfg.seed, 0))
    train_batch, val_batch = _train_prepare(dataset, cfg)
    history, stopped, best_epoch, best_loss = _fit(
        store, cfg, train_batch, "multitask", tcfg, val_batch=val_batch)
    return TrainedModel(store, store, cfg, tcfg, history, stopped, best_epoch,
                        best_loss, config_fingerprint(cfg, tcfg))


def train(dataset: ds.Dataset, model_cfg: cf.ModelConfig,
          tcfg: TrainConfig) -> TrainedModel:
    fn = {"tecde": train_tecde, "twostep": train_twostep,
          "multitask": train_multitask}[tcfg.variant]
    start = time.perf_counter()
    trained = fn(dataset, model_cfg, tcfg)
    trained.wall_time = time.perf_counter() - start
    return trained


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict_batch(trained: TrainedModel, batch: cf.WindowBatch):
    """Normalized predictions: (y_hat, lambda_hat or None) as numpy arrays."""
    y_hat, lam = cf.predict(trained.params.constants(), trained.model_config, batch)
    if lam is None and trained.intensity_params is not None:
        _, lam = cf.predict(trained.intensity_params.constants(),
                            dataclasses.replace(trained.model_config, with_intensity_head=True),
                            batch)
    return y_hat.data, (lam.data if lam is not None else None)


def forecast(trained: TrainedModel, windows, vol_scale: float, time_scale: float,
             arm: str | None = None, taus=None):
    """Per-window forecasts in cm^3 (and intensities) at the requested
    horizons; taus default to 1..horizon and must stay within it."""
    hz = trained.model_config.horizon
    taus = list(range(1, hz + 1)) if taus is None else list(taus)
    for tau in taus:
        if not (0 < tau <= hz):
            raise TrainError(f"tau {tau} outside (0, {hz}]")
    cols = [t - 1 for t in taus]
    batch = cf.prepare(windows, trained.model_config, vol_scale, time_scale, arm=arm)
    y_norm, lam = predict_batch(trained, batch)
    return y_norm[:, cols] * vol_scale, (lam[:, cols] if lam is not None else None)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_trained(trained: TrainedModel, path) -> None:
    """Write <path>.npz (+ <path>.intensity.npz when the intensity model is a
    separate network) and <path>.history.csv."""
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "model_config": dataclasses.asdict(trained.model_config),
        "train_config": dataclasses.asdict(trained.train_config),
        "stopped_epoch": trained.stopped_epoch,
        "best_epoch": trained.best_epoch,
        "best_loss": trained.best_loss,
        "fingerprint": trained.fingerprint,
        "wall_time": trained.wall_time,
        "has_separate_intensity": trained.intensity_params is not None
                                   and trained.intensity_params is not trained.params,
    }
    trained.params.save(path.with_suffix(".npz"), extra_meta=meta)
    if meta["has_separate_intensity"]:
        trained.intensity_params.save(path.with_suffix(".intensity.npz"), extra_meta=meta)

    keys = sorted({k for h in trained.history for k in h})
    with open(path.with_suffix(".history.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(trained.history)


def load_trained(path) -> TrainedModel:
    import csv
    from pathlib import Path

    path = Path(path)
    store, meta = ParamStore.load(path.with_suffix(".npz"))
    model_cfg = cf.ModelConfig(**meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"])
    intensity = None
    if meta.get("has_separate_intensity"):
        intensity, _ = ParamStore.load(path.with_suffix(".intensity.npz"))
    elif model_cfg.with_intensity_head:
        intensity = store
    history = []
    hist_path = path.with_suffix(".history.csv")
    if hist_path.exists():
        with open(hist_path, newline="") as fh:
            for row in csv.DictReader(fh):
                history.append({k: float(v) for k, v in row.items() if v != ""})
    return TrainedModel(store, intensity, model_cfg, tcfg, history,
                        int(meta["stopped_epoch"]), int(meta["best_epoch"]),
                        float(meta["best_loss"]), meta["fingerprint"],
                        wall_time=float(meta.get("wall_time", 0.0)))
