"""Joint optimization of all parameter groups with Adam.

A step is one optimizer update on one minibatch of tasks (all training pairs
of those tasks at once). Epoch boundaries refresh the encoder-input
statistics and the validation metric; the best-validation checkpoint is kept.
Every piece of mutable state (parameters, moments, RNG, counters, history)
travels through the checkpoint, so a resumed run reproduces the
uninterrupted trajectory bitwise.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import Grid, TaskDataset
from .losses import Hyperparams, LossBreakdown, cls_term, data_term, kl_term, \
    recon_term, total_loss
from .model import ForwardResult, ModelState, load_checkpoint, save_checkpoint
from .seeding import split_stream
from .tensor import Tensor


class TrainError(RuntimeError):
    pass


class NonFiniteLoss(TrainError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.995   # multiplicative, per epoch


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float, beta2: float, eps: float):
    """One bias-corrected Adam update, in place on param/m/v."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.state = {
            "t": 0,
            "lr": cfg.lr,
            "m": {n: np.zeros_like(p.data) for n, p in params.items()},
            "v": {n: np.zeros_like(p.data) for n, p in params.items()},
        }

    def step(self, only: set[str] | None = None):
        self.state["t"] += 1
        t = self.state["t"]
        for n, p in self.params.items():
            if only is not None and n not in only:
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteLoss(f"non-finite gradient in parameter group {n!r}")
            adam_step(p.data, g, self.state["m"][n], self.state["v"][n], t,
                      self.state["lr"], self.cfg.beta1, self.cfg.beta2, self.cfg.eps)

    def decay_lr(self):
        self.state["lr"] *= self.cfg.lr_decay

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainConfig:
    mode: str = "disentango"
    epochs: int = 50
    patience: int = 0                 # 0 disables early stopping
    task_batch: int = 0               # 0 means all training tasks per step
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stats_momentum: float = 0.9


@dataclass
class TrainReport:
    epochs: list[dict]
    final_val_rel_l2: float
    wall_time_s: float
    config_hash: str
    seed: int
    mode: str

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "final_val_rel_l2": self.final_val_rel_l2,
                "wall_time_s": self.wall_time_s, "config_hash": self.config_hash,
                "seed": self.seed, "mode": self.mode}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _stack_pairs(tasks: list[TaskDataset], indices, pair_slice: slice):
    fs = np.stack([np.stack([p[0] for p in tasks[i].pairs[pair_slice]]) for i in indices])
    us = np.stack([np.stack([p[1] for p in tasks[i].pairs[pair_slice]]) for i in indices])
    return fs, us


def relative_l2(u_hat: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-pair relative L2 over the spatial axes; shapes (tasks, pairs, *grid)."""
    axes = tuple(range(2, u.ndim))
    num = np.sqrt(np.sum((u_hat - u) ** 2, axis=axes))
    den = np.sqrt(np.sum(u**2, axis=axes))
    return num / np.maximum(den, 1e-300)


def evaluate(model: ModelState, tasks: list[TaskDataset], indices: list[int],
             pair_slice: slice, mode: str = "metano") -> dict:
    """Mean relative L2 over pairs and tasks, with a per-task breakdown.

    Uses the posterior mean (no latent sampling) in disentango mode.
    """
    if not indices:
        raise TrainError("empty evaluation split")
    if len(tasks[indices[0]].pairs[pair_slice]) == 0:
        raise TrainError("evaluation split has no pairs")
    fs, us = _stack_pairs(tasks, indices, pair_slice)
    res = model.full_forward(indices, Tensor(fs), mode=mode)
    rel = relative_l2(res.u_hat.data, us)
    return {
        "mean_rel_l2": float(rel.mean()),
        "per_task": {int(i): float(r) for i, r in zip(indices, rel.mean(axis=1))},
    }


class Trainer:
    def __init__(self, model: ModelState, tasks: list[TaskDataset], manifest: dict,
                 hp: Hyperparams, cfg: TrainConfig, run_config: dict | None = None):
        self.model = model
        self.tasks = tasks
        self.manifest = manifest
        self.hp = hp
        self.cfg = cfg
        self.run_config = run_config or {}
        self.grid = Grid(tuple(manifest["spec"]["grid_extents"]))
        self.n_train = manifest["spec"]["n_train"]
        self.n_eval = manifest["spec"]["n_eval"]
        self.splits = manifest["splits"]
        self.optimizer = Adam(model.parameters(), cfg.optimizer)
        self.latent_rng = split_stream(cfg.seed, "latent-sample")
        self.epoch = 0
        self.step_count = 0
        self.batch_cursor = 0
        self.history: list[dict] = []
        self.best_val = float("inf")
        self.best_epoch = -1
        self._validate_scenario()
        model.init_theta_stats()

    def _validate_scenario(self):
        spec = self.manifest["spec"]
        if self.hp.scenario == "SC2" and not spec["with_labels"]:
            raise TrainError("SC2 training needs a dataset generated with labels")
        if self.hp.scenario == "SC3" and not spec["with_b"]:
            raise TrainError("SC3 training needs a dataset carrying the parameter vectors")

    # -- batching ------------------------------------------------------------

    def _batches(self) -> list[list[int]]:
        train = self.splits["train"]
        size = self.cfg.task_batch or len(train)
        return [train[i:i + size] for i in range(0, len(train), size)]

    @property
    def steps_per_epoch(self) -> int:
        return len(self._batches())

    # -- single optimization step ----------------------------------------------

    def train_step(self, indices: list[int]) -> LossBreakdown:
        model, hp = self.model, self.hp
        fs, us = _stack_pairs(self.tasks, indices, slice(0, self.n_train))
        eps = None
        if self.cfg.mode == "disentango":
            eps = self.latent_rng.standard_normal((len(indices), model.d_z))
        res = model.full_forward(indices, Tensor(fs), mode=self.cfg.mode, eps=eps)
        data = data_term(res.u_hat, Tensor(us), self.grid.cell_measure)
        if self.cfg.mode == "disentango":
            recon = recon_term(res.theta_flat, res.theta_hat)
            b = None
            if hp.scenario == "SC3":
                b = Tensor(np.stack([self.tasks[i].b_vector for i in indices]))
            kl = kl_term(res.posterior, hp.scenario, b, hp.kl_form)
            cls = None
            if hp.scenario == "SC2":
                labels = np.array([self.tasks[i].label for i in indices])
                z_for_cls = res.posterior.sample(eps)
                cls = cls_term(z_for_cls, labels, model.cls_w, model.cls_b)
            loss, breakdown = total_loss(data, recon, kl, hp, len(indices), cls)
        else:
            zero = Tensor(0.0)
            loss, breakdown = total_loss(
                data, zero, zero,
                Hyperparams(hp.beta_d, 0.0, 0.0, "SC1", hp.kl_form), len(indices))
        if not np.isfinite(breakdown.total):
            raise NonFiniteLoss(f"non-finite training loss at step {self.step_count}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        return breakdown

    def run_step(self) -> LossBreakdown:
        """Advance one step, handling epoch boundaries."""
        batches = self._batches()
        bd = self.train_step(batches[self.batch_cursor])
        self.batch_cursor += 1
        if self.batch_cursor >= len(batches):
            self.batch_cursor = 0
            self._end_epoch(bd)
        return bd

    def _end_epoch(self, last_breakdown: LossBreakdown):
        self.model.update_theta_stats(self.cfg.stats_momentum)
        self.optimizer.decay_lr()
        self.epoch += 1
        val = self.validation_metric()
        self.history.append({
            "epoch": self.epoch,
            "train_data": last_breakdown.data, "train_recon": last_breakdown.recon,
            "train_kl": last_breakdown.kl, "train_cls": last_breakdown.cls,
            "train_total": last_breakdown.total, "val_rel_l2": val,
        })
        if val < self.best_val:
            self.best_val = val
            self.best_epoch = self.epoch

    def validation_metric(self) -> float:
        """Relative L2 on held-out pairs of the training tasks (falls back to
        training pairs when the dataset carries no eval pairs)."""
        if self.n_eval > 0:
            sl = slice(self.n_train, self.n_train + self.n_eval)
        else:
            sl = slice(0, self.n_train)
        return evaluate(self.model, self.tasks, self.splits["train"], sl,
                        mode=self.cfg.mode)["mean_rel_l2"]

    # -- full run ------------------------------------------------------------------

    def train(self, checkpoint_path: str | None = None) -> TrainReport:
        t0 = time.time()
        chash = config_hash(self.run_config)
        # on a NonFiniteLoss abort the exception propagates and the last
        # best-validation checkpoint stays on disk untouched
        while self.epoch < self.cfg.epochs:
            epoch_before = self.epoch
            while self.epoch == epoch_before:
                self.run_step()
            if checkpoint_path and self.best_epoch == self.epoch:
                self.save(checkpoint_path)
            if self.cfg.patience and self.epoch - self.best_epoch >= self.cfg.patience:
                break
        report = TrainReport(
            epochs=self.history,
            final_val_rel_l2=self.history[-1]["val_rel_l2"] if self.history else float("nan"),
            wall_time_s=time.time() - t0,
            config_hash=chash, seed=self.cfg.seed, mode=self.cfg.mode)
        return report

    # -- persistence ------------------------------------------------------------------

    def _extra_state(self) -> dict:
        return {
            "epoch": self.epoch, "step_count": self.step_count,
            "batch_cursor": self.batch_cursor, "history": self.history,
            "best_val": self.best_val, "best_epoch": self.best_epoch,
        }

    def save(self, path: str):
        save_checkpoint(path, self.model, self.run_config,
                        optimizer_state=self.optimizer.state,
                        rng_state=self.latent_rng.bit_generator.state,
                        extra=self._extra_state())

    def restore(self, path: str):
        model, run_config, opt_state, rng_state, extra = load_checkpoint(path)
        if model.config_dict() != self.model.config_dict():
            raise TrainError("checkpoint model configuration does not match")
        self.model = model
        self.optimizer = Adam(model.parameters(), self.cfg.optimizer)
        if opt_state is not None:
            self.optimizer.state["t"] = opt_state["t"]
            self.optimizer.state["lr"] = opt_state["lr"]
            self.optimizer.state["m"] = opt_state["m"]
            self.optimizer.state["v"] = opt_state["v"]
        if rng_state is not None:
            self.latent_rng.bit_generator.state = rng_state
        self.epoch = extra["epoch"]
        self.step_count = extra["step_count"]
        self.batch_cursor = extra["batch_cursor"]
        self.history = extra["history"]
        self.best_val = extra["best_val"]
        self.best_epoch = extra["best_epoch"]


def write_report(outdir: str, report: TrainReport):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(os.path.join(outdir, "losses.csv"), "w") as fh:
        cols = ["epoch", "train_data", "train_recon", "train_kl", "train_cls",
                "train_total", "val_rel_l2"]
        fh.write(",".join(cols) + "\n")
        for row in report.epochs:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")


def adapt(model: ModelState, tasks: list[TaskDataset], indices: list[int],
          n_pairs: int, steps: int, opt_cfg: OptimizerConfig,
          grid: Grid) -> list[float]:
    """Fit only the lifting parameters of the given (unseen) tasks; shared
    operator and variational head stay frozen. Returns the loss trace."""
    params = {"theta_p_w": model.theta_p_w, "theta_p_b": model.theta_p_b}
    opt = Adam(params, opt_cfg)
    only = {"theta_p_w", "theta_p_b"}
    # warm-start the new rows at the average trained lifting: the shared
    # operator was fit against on-manifold parameters, and a cold start has
    # to cross regions the frozen operator never saw
    donors = [i for i in range(model.num_tasks) if i not in set(indices)]
    if donors:
        model.theta_p_w.data[indices] = model.theta_p_w.data[donors].mean(axis=0)
        model.theta_p_b.data[indices] = model.theta_p_b.data[donors].mean(axis=0)
    fs, us = _stack_pairs(tasks, indices, slice(0, n_pairs))
    mask_w = np.zeros_like(model.theta_p_w.data)
    mask_b = np.zeros_like(model.theta_p_b.data)
    mask_w[indices] = 1.0
    mask_b[indices] = 1.0
    trace = []
    for _ in range(steps):
        opt.zero_grad()
        res = model.full_forward(indices, Tensor(fs), mode="metano")
        loss = (1.0 / len(indices)) * data_term(res.u_hat, Tensor(us), grid.cell_measure)
        loss.backward()
        # other tasks' rows receive no gradient, but mask defensively so the
        # moment buffers never leak updates into trained rows
        model.theta_p_w.grad *= mask_w
        model.theta_p_b.grad *= mask_b
        opt.step(only=only)
        trace.append(loss.item())
    return trace
