"""Training runs: one-step and two-step schedules, metrics logging, resume."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from . import metrics as M
from .config import TrainingConfig
from .data import load_idx, synth_dataset
from .model import Network
from .optim import TRAINING_LR, Optimizer
from .tensor import backward, softmax_cross_entropy

log = logging.getLogger(__name__)

SWEEP_LRS = {"adam": [0.0005, 0.0025, 0.01, 0.05], "sgd": [0.02, 0.1, 0.5]}


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, last_row=None):
        super().__init__(message if last_row is None else f"{message}; last metrics row: {last_row}")
        self.last_row = last_row


@dataclass
class RunResult:
    out_dir: str
    summary: dict
    model: Network
    completed: bool = True

    @property
    def metrics_path(self):
        return os.path.join(self.out_dir, "metrics.csv")


def load_dataset(cfg: TrainingConfig):
    d = cfg.dataset
    if d.kind == "idx":
        return load_idx(d.images_path, d.labels_path)
    return synth_dataset(d.synthetic, d.n, d.noise, seed=cfg.seed, classes=d.classes,
                         size=d.image_size)


def build_model(cfg: TrainingConfig, dataset, rng):
    c, h, w = dataset.image_shape
    if h != w:
        raise ValueError(f"square images required, got {h}x{w}")
    a = cfg.arch
    return Network(c, dataset.num_classes, h, a.width, a.blocks, a.pool_grid,
                   a.binarize_first_last, a.weight_grad_mode, rng=rng)


class BatchOrder:
    """Batch indices as a pure function of the global step: resumable by construction."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self._perms = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            if len(self._perms) > 4:
                self._perms.clear()
            self._perms[epoch] = np.random.default_rng([self.seed, 1, epoch]).permutation(self.n)
        return self._perms[epoch]

    def __call__(self, step):
        pos = np.arange(step * self.batch_size, (step + 1) * self.batch_size)
        epochs, offsets = np.divmod(pos, self.n)
        out = np.empty(self.batch_size, dtype=np.int64)
        for e in np.unique(epochs):
            mask = epochs == e
            out[mask] = self._perm(int(e))[offsets[mask]]
        return out


def _lr_at(base, step, total, mode):
    if mode == "linear":
        return base * (1.0 - step / total)
    return base


def _eval_batch(ds, limit=512):
    return ds.x[:limit], ds.y[:limit]


class Trainer:
    def __init__(self, cfg: TrainingConfig, out_dir=None):
        self.cfg = cfg.validate()
        self.out_dir = os.fspath(out_dir or cfg.out_dir)
        self.ckpt_dir = os.path.join(self.out_dir, "checkpoints")
        data = load_dataset(cfg)
        self.train_set, self.val_set = data.split(cfg.dataset.val_fraction, cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.model = build_model(cfg, data, self.rng)
        self.order = BatchOrder(len(self.train_set), cfg.schedule.batch_size, cfg.seed)
        self.plan = cfg.phase_plan()
        self.phase_index = 0
        self.step_in_phase = 0
        self.global_step = 0
        self.ff_sum = 0.0
        self.ff_count = 0
        self.phase_ff_sum = 0.0
        self.phase_ff_count = 0
        self.phase_results = []
        self.optimizer = None
        self.snapshot = None
        self.last_row = None

    # -- phase plumbing ----------------------------------------------------

    def _start_phase(self):
        name, iters, bin_w, bin_a, wd = self.plan[self.phase_index]
        self.model.set_binarization(bin_w, bin_a)
        oc = self.cfg.optimizer
        lr = oc.lr if oc.lr is not None else TRAINING_LR.get(oc.name)
        self.optimizer = Optimizer(oc.name, self.model.parameters(), lr=lr, weight_decay=wd,
                                   decoupled=oc.decoupled, decay_mask=self.model.decay_mask(),
                                   **oc.hyper)
        self.snapshot = M.InitSnapshot.capture(self.model.measured_weights())
        self.phase_ff_sum = 0.0
        self.phase_ff_count = 0
        log.info("phase %s: %d iterations, weights=%s activations=%s wd=%g",
                 name, iters, bin_w, bin_a, wd)

    def _finish_phase(self):
        name, iters, _, _, wd = self.plan[self.phase_index]
        w = self.model.measured_weights()
        self.phase_results.append({
            "name": name,
            "iterations": iters,
            "weight_decay": wd,
            "mean_ff_ratio": self.phase_ff_sum / max(self.phase_ff_count, 1),
            "final_c2i_ratio": M.c2i_ratio(self.snapshot, w),
            "final_c2i_literal": M.c2i_literal(self.snapshot, w),
        })
        os.makedirs(self.ckpt_dir, exist_ok=True)
        self.save(os.path.join(self.ckpt_dir, f"{name}.ckpt"))

    # -- one iteration -----------------------------------------------------

    def _step(self, writer):
        name, iters, _, _, _ = self.plan[self.phase_index]
        measured = self.model.measured_weights()
        before = [w.data.copy() for w in measured]
        idx = self.order(self.global_step)
        xb, yb = self.train_set.x[idx], self.train_set.y[idx]

        self.optimizer.zero_grad()
        logits = self.model(xb, training=True)
        loss = softmax_cross_entropy(logits, yb)
        if not np.isfinite(loss.item()):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {self.global_step + 1}", self.last_row)
        backward(loss)
        self.optimizer.lr = _lr_at(self.optimizer.base_lr, self.step_in_phase, iters,
                                   self.cfg.schedule.lr_decay)
        self.optimizer.step()

        after = [w.data for w in measured]
        ff = M.ff_ratio(before, after)
        self.ff_sum += ff
        self.ff_count += 1
        self.phase_ff_sum += ff
        self.phase_ff_count += 1
        self.step_in_phase += 1
        self.global_step += 1

        if self.step_in_phase % self.cfg.log_interval == 0 or self.step_in_phase == iters:
            cams = [M.cam(w) for w in after]
            rec = M.MetricsRecord(
                iteration=self.global_step,
                phase=name,
                loss=loss.item(),
                accuracy=float(np.mean(np.argmax(logits.data, axis=1) == yb)),
                ff_ratio=ff,
                ff_ratio_mean=self.phase_ff_sum / self.phase_ff_count,
                c2i_ratio=M.c2i_ratio(self.snapshot, after),
                c2i_literal=M.c2i_literal(self.snapshot, after),
                cam=cams,
                sdam=[M.sdam(c) for c in cams],
                saturation=[M.saturation_ratio(s.last_input) for s in self.model.activation_sites()],
                update_cam=M.update_cam([a - b for a, b in zip(after, before)]),
            )
            writer.write(rec)
            self.last_row = rec.row(writer.n_sites)

    # -- run ---------------------------------------------------------------

    def run(self, stop_after=None, resumed=False):
        os.makedirs(self.out_dir, exist_ok=True)
        writer = M.MetricsWriter(os.path.join(self.out_dir, "metrics.csv"),
                                 len(self.model.activation_sites()), append=resumed)
        interval = self.cfg.checkpoint_interval
        while self.phase_index < len(self.plan):
            if self.optimizer is None:
                self._start_phase()
            iters = self.plan[self.phase_index][1]
            while self.step_in_phase < iters:
                self._step(writer)
                if interval and self.global_step % interval == 0:
                    os.makedirs(self.ckpt_dir, exist_ok=True)
                    self.save(os.path.join(self.ckpt_dir, f"step_{self.global_step}.ckpt"))
                if stop_after is not None and self.global_step >= stop_after \
                        and self.step_in_phase < iters:
                    os.makedirs(self.ckpt_dir, exist_ok=True)
                    self.save(os.path.join(self.ckpt_dir, "resume.ckpt"))
                    return RunResult(self.out_dir, {}, self.model, completed=False)
            self._finish_phase()
            self.phase_index += 1
            self.step_in_phase = 0
            self.optimizer = None
        summary = self.summarize()
        self.save(os.path.join(self.ckpt_dir, "final.ckpt"))
        path = os.path.join(self.out_dir, "summary.json")
        try:
            with open(path, "w") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
        except OSError as exc:
            raise OSError(f"cannot write summary {path}: {exc}") from exc
        return RunResult(self.out_dir, summary, self.model)

    def summarize(self):
        model = self.model
        w = [p.data for p in model.measured_weights()]
        xe, _ = _eval_batch(self.val_set if len(self.val_set) else self.train_set)
        model(xe, training=False)
        cams = [M.cam(x) for x in w]
        hist = M.weight_histogram(w)
        last = self.phase_results[-1]
        return {
            "final_train_accuracy": model.accuracy(self.train_set.x, self.train_set.y),
            "final_val_accuracy": model.accuracy(self.val_set.x, self.val_set.y),
            "mean_ff_ratio": self.ff_sum / max(self.ff_count, 1),
            "final_c2i_ratio": last["final_c2i_ratio"],
            "final_c2i_literal": last["final_c2i_literal"],
            "phases": self.phase_results,
            "final_saturation": [M.saturation_ratio(s.last_input) for s in model.activation_sites()],
            "cam_min": [float(c.min()) for c in cams],
            "sdam": [M.sdam(c) for c in cams],
            "weight_histogram": hist.tolist(),
            "tail_mass_0.75": float(M.tail_mass(hist)),
            "iterations": self.global_step,
            "seed": self.cfg.seed,
        }

    # -- checkpointing -----------------------------------------------------

    def save(self, path):
        meta = {
            "phase_index": self.phase_index,
            "step_in_phase": self.step_in_phase,
            "global_step": self.global_step,
            "ff_sum": self.ff_sum,
            "ff_count": self.ff_count,
            "phase_ff_sum": self.phase_ff_sum,
            "phase_ff_count": self.phase_ff_count,
            "phase_results": self.phase_results,
            "binarize_weights": self.model.binarize_weights,
            "binarize_activations": self.model.binarize_activations,
            "config": self.cfg.to_dict(),
        }
        ck = ckpt_io.Checkpoint(
            arch_digest=self.model.digest(),
            params=[(n, p.data) for n, p in self.model.named_parameters()],
            buffers=self.model.named_buffers(),
            optimizer=self.optimizer.state_dict() if self.optimizer is not None else None,
            rng_state=self.rng.bit_generator.state,
            snapshot=list(self.snapshot.signs) if self.snapshot is not None else [],
            meta=meta,
        )
        ckpt_io.save_checkpoint(ck, path)

    def restore(self, ck):
        if ck.arch_digest != self.model.digest():
            raise ckpt_io.ArchitectureMismatchError("checkpoint architecture does not match config")
        load_parameters(self.model, ck)
        m = ck.meta
        self.phase_index = m["phase_index"]
        self.step_in_phase = m["step_in_phase"]
        self.global_step = m["global_step"]
        self.ff_sum, self.ff_count = m["ff_sum"], m["ff_count"]
        self.phase_ff_sum, self.phase_ff_count = m["phase_ff_sum"], m["phase_ff_count"]
        self.phase_results = m["phase_results"]
        self.rng.bit_generator.state = ck.rng_state
        self.optimizer = None
        if ck.optimizer is not None and self.phase_index < len(self.plan):
            saved_ff = (self.phase_ff_sum, self.phase_ff_count)
            self._start_phase()
            self.phase_ff_sum, self.phase_ff_count = saved_ff
            self.optimizer.load_state_dict(ck.optimizer)
            self.snapshot = M.InitSnapshot(tuple(np.asarray(s, dtype=np.int8) for s in ck.snapshot))


def load_parameters(model, ck):
    names = [n for n, _ in model.named_parameters()]
    if [n for n, _ in ck.params] != names:
        raise ckpt_io.ArchitectureMismatchError("checkpoint parameter names do not match model")
    for (_, p), (_, arr) in zip(model.named_parameters(), ck.params):
        if p.shape != arr.shape:
            raise ckpt_io.ArchitectureMismatchError(f"parameter shape {arr.shape} vs {p.shape}")
        p.data = arr.copy()
    model.load_buffers([a for _, a in ck.buffers])
    meta = ck.meta or {}
    if "binarize_weights" in meta:
        model.set_binarization(meta["binarize_weights"], meta["binarize_activations"])


def train(config: TrainingConfig, out_dir=None, resume=None, stop_after=None):
    """Run every configured phase; returns the run summary and trained model.

    ``resume`` is a checkpoint path written by an interrupted run of the same
    config; ``stop_after`` interrupts after that many global iterations.
    """
    trainer = Trainer(config, out_dir)
    resumed = False
    if resume is not None:
        trainer.restore(ckpt_io.load_checkpoint(resume, trainer.model.digest()))
        resumed = True
    return trainer.run(stop_after=stop_after, resumed=resumed)


def compare_optimizers(config: TrainingConfig, names, out_dir=None, lrs=None):
    """Train one run per optimizer with identical seed and data order.

    ``lrs`` maps optimizer name to a learning rate (or a list of them for a
    learning-rate sweep). Writes ``comparison.csv`` and
    ``saturation_trajectories.csv`` under ``out_dir``.
    """
    if len(names) < 2:
        raise ValueError("compare_optimizers needs at least two optimizers")
    return _run_grid(config, names, out_dir, lrs)


def _run_grid(config, names, out_dir, lrs):
    out_dir = os.fspath(out_dir or config.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    lrs = lrs or {}
    rows, trajectories = [], {}
    for i, name in enumerate(names):
        grid = lrs.get(name, [config.optimizer.lr])
        grid = grid if isinstance(grid, (list, tuple)) else [grid]
        for lr in grid:
            cfg = config.replace(**{"optimizer.name": name, "optimizer.lr": lr})
            label = f"{i}_{name}" + (f"_lr{lr:g}" if lr is not None else "")
            res = train(cfg, out_dir=os.path.join(out_dir, label))
            s = res.summary
            rows.append({
                "run": label, "optimizer": name,
                "lr": lr if lr is not None else TRAINING_LR.get(name, float("nan")),
                "seed": cfg.seed,
                "final_train_accuracy": s["final_train_accuracy"],
                "final_val_accuracy": s["final_val_accuracy"],
                "mean_ff_ratio": s["mean_ff_ratio"],
                "final_c2i_ratio": s["final_c2i_ratio"],
                "final_saturation_first": s["final_saturation"][0] if s["final_saturation"] else math.nan,
            })
            trajectories[label] = [(int(r["iteration"]), r["saturation_0"])
                                   for r in M.read_metrics(res.metrics_path)]
    fields = list(rows[0])
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    labels = list(trajectories)
    iters = sorted({it for t in trajectories.values() for it, _ in t})
    with open(os.path.join(out_dir, "saturation_trajectories.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + labels)
        lookup = {k: dict(v) for k, v in trajectories.items()}
        for it in iters:
            w.writerow([it] + [lookup[k].get(it, "") for k in labels])
    return rows


def lr_sweep(config: TrainingConfig, sweep=None, out_dir=None):
    """Accuracy-vs-initial-learning-rate grid; writes ``lr_sweep.csv``."""
    sweep = sweep or SWEEP_LRS
    out_dir = os.fspath(out_dir or config.out_dir)
    rows = _run_grid(config, list(sweep), out_dir, sweep)
    with open(os.path.join(out_dir, "lr_sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["optimizer", "lr", "final_train_accuracy", "final_val_accuracy"])
        for r in rows:
            w.writerow([r["optimizer"], r["lr"], r["final_train_accuracy"], r["final_val_accuracy"]])
    return rows
