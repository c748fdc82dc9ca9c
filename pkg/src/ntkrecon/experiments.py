"""Experiment commands behind the CLI.  Each command writes into an output
directory and records its stages in a manifest so reruns can resume."""
from __future__ import annotations

import itertools
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import fileio
from .attack import AttackConfig, AttackDiverged, run_attack, run_attack_batched
from .config import ConfigError, ExperimentConfig, Manifest
from .data import TaskSpec, export_grid, load_task
from .distill import (AnalyticKernel, DistillConfig, DistilledSet, FiniteEval, accuracy, distill,
                       retrain_eval, rkip_finite_labels)
from .dynamics import LabeledDataset, TrainConfig, TrainingDiverged, closed_form_delta_theta, train
from .kernels import RidgePolicy, SingularKernelError, empirical_ntk, kernel_distance
from .metrics import alpha_error_table, greedy_pair, mean_recon_error, prune_most_reconstructed, prune_random, spearman
from .network import Architecture, forward, init_params

log = logging.getLogger(__name__)

NUMERICAL_ERRORS = (TrainingDiverged, AttackDiverged, SingularKernelError, FloatingPointError,
                    np.linalg.LinAlgError)


def _spec(cfg: ExperimentConfig, seed: int, n_per_class=None) -> TaskSpec:
    return TaskSpec(cfg.task.kind, cfg.task.n_per_class if n_per_class is None else n_per_class, seed,
                    cfg.task.normalization, cfg.task.unit_sphere)


def _limit_test(test: LabeledDataset, limit, seed):
    if limit is None or len(test) <= limit:
        return test
    idx = np.sort(np.random.default_rng([seed, 7]).choice(len(test), limit, replace=False))
    return test.subset(idx)


def _arch(cfg, data: LabeledDataset, width=None) -> Architecture:
    return Architecture(data.X.shape[1], width or cfg.arch.width, data.Y.shape[1], cfg.arch.activation)


def _ridge(cfg) -> RidgePolicy:
    return RidgePolicy(cfg.ridge.mode, cfg.ridge.lam)


def train_one(cfg, data, width, seed, dynamics=None, max_iters=None, early_stop=None):
    arch = _arch(cfg, data, width)
    theta0 = init_params(arch, seed)
    tc = TrainConfig(learning_rate=len(data) * cfg.train.lr_per_example, momentum=cfg.train.momentum,
                     max_iters=max_iters or cfg.train.max_iters,
                     early_stop_loss=cfg.train.early_stop_loss if early_stop is None else early_stop,
                     dynamics=dynamics or cfg.train.dynamics, seed=seed, log_every=cfg.train.log_every)
    return arch, train(arch, theta0, data, tc)


def attack_config(cfg, n, seed, iters=None) -> AttackConfig:
    a = cfg.attack
    return AttackConfig(m=a.m_factor * n, iters=a.iters if iters is None else iters, adam_lr=a.adam_lr,
                        image_init_std=a.image_init_std, temp_start=a.temp_start, temp_end=a.temp_end,
                        temp_update_every=a.temp_update_every, kernel_choice=a.kernel_choice,
                        batch_size=a.batch_size, seed=seed)


def attack_one(cfg, arch, theta0, theta_f, data, seed, iters=None):
    """Run the attack configured in ``cfg`` against a trained network and pair
    the best reconstructions with the training set."""
    acfg = attack_config(cfg, len(data), seed, iters)
    theta_eval = {"final": theta_f, "initial": theta0, "hybrid": (theta_f, theta0)}[acfg.kernel_choice]
    delta = np.asarray(theta_f) - np.asarray(theta0)
    soft = arch.with_temperature(acfg.temp_start)
    if acfg.batch_size is not None and acfg.batch_size < acfg.m:
        trace = run_attack_batched(delta, soft, theta_eval, acfg)
    else:
        trace = run_attack(delta, soft, theta_eval, acfg)
    curve = greedy_pair(data.X, trace.best.images)
    return trace, curve


# ---------------------------------------------------------------------------

def _stage(manifest: Manifest, name: str, h: str, resume: bool):
    if resume and manifest.done(name, h):
        log.info("stage %s already complete, skipping", name)
        return True
    return False


TRAIN_SECTIONS = ["task", "arch", "train", "data_dir"]
ATTACK_SECTIONS = TRAIN_SECTIONS + ["attack"]
DISTILL_SECTIONS = ["task", "distill", "ridge", "data_dir"]


def cmd_train(cfg: ExperimentConfig, out, resume=False) -> list:
    man = Manifest(out)
    out = man.dir
    results = []
    for seed in cfg.seeds:
        name = f"train_s{seed}"
        h = cfg.hash(TRAIN_SECTIONS + ["ridge"], seed=seed)
        if _stage(man, name, h, resume):
            results.append(man.info(name))
            continue
        data, _ = load_task(_spec(cfg, seed), cfg.data_dir)
        arch, res = train_one(cfg, data, cfg.arch.width, seed)
        ckpt = fileio.save_checkpoint(out / f"{name}.ckpt", arch, res.params_init, res.params_final)
        losses = fileio.write_csv(out / f"{name}_loss.csv", ["iter", "loss"], res.loss_history)
        alpha = fileio.write_csv(out / f"{name}_alpha.csv", ["train_index"] + [f"alpha_{c}" for c in range(arch.output_dim)],
                                 [[i] + row.tolist() for i, row in enumerate(res.alpha_integral)])
        info = {"seed": seed, "n_train": len(data), "width": arch.width, "dynamics": cfg.train.dynamics,
                "final_loss": res.final_loss, "stopped_at_iter": res.stopped_at_iter}
        if cfg.train.dynamics == "linearized" and len(data) * arch.output_dim <= 2000:
            closed = closed_form_delta_theta(arch, res.params_init, data, _ridge(cfg))
            info["delta_theta_rel_err"] = float(np.linalg.norm(res.delta_theta - closed) / np.linalg.norm(closed))
        summary = out / f"{name}.json"
        summary.write_text(json.dumps(info, indent=1))
        man.record(name, h, [ckpt, losses, alpha, summary], info)
        results.append(info)
    return results


def cmd_attack(cfg: ExperimentConfig, out, resume=False, checkpoint=None) -> list:
    man = Manifest(out)
    out = man.dir
    results = []
    for seed in cfg.seeds:
        name = f"attack_s{seed}"
        ckpt = Path(checkpoint) if checkpoint else out / f"train_s{seed}.ckpt"
        h = cfg.hash(ATTACK_SECTIONS, seed=seed,
                     checkpoint=fileio.sha256_file(ckpt) if ckpt.exists() else None)
        if _stage(man, name, h, resume):
            results.append(man.info(name))
            continue
        if not ckpt.exists():
            raise ConfigError(f"checkpoint {ckpt} not found; run 'train' first")
        arch, theta0, theta_f = fileio.load_checkpoint(ckpt)
        data, _ = load_task(_spec(cfg, seed), cfg.data_dir)
        if data.X.shape[1] != arch.input_dim:
            raise ConfigError("checkpoint does not match the configured task")
        trace, curve = attack_one(cfg, arch, theta0, theta_f, data, seed)
        files = [fileio.write_curve(out / f"{name}_curve.csv", curve),
                 fileio.write_trace(out / f"{name}_trace.csv", trace)]
        np.savez(out / f"{name}_recon.npz", images=trace.best.images, duals=trace.best.duals,
                 checkpoint=np.array(str(ckpt.resolve())))
        files.append(out / f"{name}_recon.npz")
        alpha_path = ckpt.with_name(ckpt.stem + "_alpha.csv")
        if alpha_path.exists():
            rows = fileio.read_csv(alpha_path)
            alpha = np.array([[float(v) for k, v in r.items() if k != "train_index"] for r in rows])
            files.append(fileio.write_csv(out / f"{name}_alpha_table.csv", ["train_index", "alpha_abs", "sq_l2"],
                                          alpha_error_table(curve, alpha)))
        try:
            order = curve.train_index
            files.append(export_grid(data.X[order], out / f"{name}_train.png", data.normalization))
            files.append(export_grid(trace.best.images[curve.recon_index], out / f"{name}_recon.png",
                                     data.normalization))
        except ValueError as exc:
            log.warning("image grid skipped: %s", exc)
        info = {"seed": seed, "n_train": len(data), "m": len(trace.best), "best_loss": trace.best_loss,
                "final_loss": trace.final_loss, "mean_error": mean_recon_error(curve)}
        summary = out / f"{name}.json"
        summary.write_text(json.dumps(info, indent=1))
        files.append(summary)
        man.record(name, h, files, info)
        results.append(info)
    return results


SWEEP_HEADER = ["width", "n_train", "dynamics", "seed", "kernel_distance", "mean_error", "status"]


def cmd_sweep(cfg: ExperimentConfig, out, resume=False) -> dict:
    """Train and attack every (width, N, dynamics, seed) cell.  Splits are
    shared across widths for a given seed.  Failed cells are recorded."""
    man = Manifest(out)
    out = man.dir
    rows = []
    for width, npc, dyn, seed in itertools.product(cfg.sweep.widths, cfg.sweep.n_per_class,
                                                   cfg.sweep.dynamics, cfg.seeds):
        name = f"sweep_w{width}_n{npc}_{dyn}_s{seed}"
        h = cfg.hash(ATTACK_SECTIONS)
        if _stage(man, name, h, resume):
            rows.append(man.info(name)["row"])
            continue
        data, _ = load_task(_spec(cfg, seed, npc), cfg.data_dir)
        try:
            arch, res = train_one(cfg, data, width, seed, dyn)
            if dyn == "linearized":
                kd = 0.0   # the tangent kernel is frozen at initialisation
            else:
                kd = kernel_distance(empirical_ntk(arch, res.params_init, data.X),
                                     empirical_ntk(arch, res.params_final, data.X))
            _, curve = attack_one(cfg, arch, res.params_init, res.params_final, data, seed)
            row = [width, len(data), dyn, seed, kd, mean_recon_error(curve), "ok"]
        except NUMERICAL_ERRORS as exc:
            log.warning("cell %s failed: %s", name, exc)
            row = [width, len(data), dyn, seed, math.nan, math.nan, f"failed: {type(exc).__name__}"]
        man.record(name, h, [], {"row": row})
        rows.append(row)
    path = fileio.write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    std = [r for r in rows if r[2] == "standard" and r[6] == "ok"]
    rho = spearman([r[4] for r in std], [r[5] for r in std]) if len(std) >= 3 else math.nan
    summary = {"spearman_standard": rho, "cells": len(rows),
               "failed": sum(r[6] != "ok" for r in rows)}
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=1))
    man.record("sweep", cfg.hash(), [path, out / "sweep_summary.json"], summary)
    return summary


def onion_width(n: int, coeff: float = 55.0) -> int:
    return int(round(coeff * math.sqrt(n)))


ONION_HEADER = ["arm", "iteration", "n_train", "width", "test_accuracy", "mean_error", "n_removed", "removed"]


def _test_accuracy(arch, theta, test):
    return accuracy(forward(arch, theta, test.X), test.Y)


def cmd_onion(cfg: ExperimentConfig, out, resume=False) -> dict:
    """Privacy onion: repeatedly train at width 55 sqrt(n), attack, and drop
    the best-reconstructed points; a control arm drops random points.  Both
    arms use the same seeds at every iteration."""
    man = Manifest(out)
    out = man.dir
    oc = cfg.onion
    h = cfg.hash(ATTACK_SECTIONS + ["onion", "seeds"])
    if _stage(man, "onion", h, resume):
        return man.info("onion")
    seed = cfg.seeds[0]
    spec = _spec(cfg, seed)
    per = oc.n_start // (2 if spec.binary else 10)
    full, test = load_task(_spec(cfg, seed, per), cfg.data_dir, with_test=True)
    test = _limit_test(test, cfg.task.test_limit, seed)
    rows = {"reconstruction": [], "random": []}
    current = {"reconstruction": full, "random": full}
    rng = np.random.default_rng([seed, 11])
    for it in range(oc.iterations):
        for arm in ("reconstruction", "random"):
            data = current[arm]
            if len(data) < oc.remove:
                raise ConfigError(f"only {len(data)} points left, cannot remove {oc.remove}")
            width = onion_width(len(data), oc.width_coeff)
            arch, res = train_one(cfg, data, width, seed + it)
            acc = _test_accuracy(arch, res.params_final, test)
            if arm == "reconstruction":
                _, curve = attack_one(cfg, arch, res.params_init, res.params_final, data, seed + it)
                err = mean_recon_error(curve)
                reduced, removed = prune_most_reconstructed(curve, data, oc.remove, oc.balanced)
            else:
                err = math.nan
                reduced, removed = prune_random(data, oc.remove, rng, oc.balanced)
            rows[arm].append([arm, it, len(data), width, acc, err, len(removed),
                              " ".join(map(str, removed.tolist()))])
            current[arm] = reduced
            log.info("onion %s iteration %d: n=%d width=%d acc=%.4f", arm, it, len(data), width, acc)
    files = []
    for arm, r in rows.items():
        files.append(fileio.write_csv(out / f"onion_{arm}.csv", ONION_HEADER, r))
    summary = {"rows": rows, "final_n": {arm: len(d) for arm, d in current.items()}}
    man.record("onion", h, files, summary)
    return summary


# ---------------------------------------------------------------------------

def _distill_config(cfg, loss, seed) -> DistillConfig:
    d = cfg.distill
    return DistillConfig(loss=loss, m=d.m, iters=d.iters, lr=d.lr, learn_labels=d.learn_labels,
                         ridge=_ridge(cfg), seed=seed)


def _analytic_kernel(cfg) -> AnalyticKernel:
    return AnalyticKernel(cfg.distill.kernel_weight_variance, cfg.distill.kernel_bias_variance)


def make_distilled(cfg, method, data, seed) -> DistilledSet:
    d = cfg.distill
    if method == "full":
        return DistilledSet(data.X, data.Y, False, {"method": "full", "seed": seed})
    if method == "random":
        rng = np.random.default_rng([seed, 3])
        classes = np.unique(data.class_ids)
        per = d.m // len(classes)
        idx = np.sort(np.concatenate([rng.choice(np.flatnonzero(data.class_ids == c), per, replace=False)
                                      for c in classes]))
        return DistilledSet(data.X[idx], data.Y[idx], False, {"method": "random", "seed": seed})
    if method in ("kip", "rkip"):
        ds, hist = distill(data, _distill_config(cfg, method, seed), _analytic_kernel(cfg))
        ds.metadata.update(method=method, final_loss=hist[-1][1])
        return ds
    if method == "rkip_finite":
        if not d.attack_run:
            raise ConfigError("distill.attack_run must point at an attack output directory for rkip_finite")
        rec = Path(d.attack_run) / f"attack_s{seed}_recon.npz"
        if not rec.exists():
            raise ConfigError(f"{rec} not found")
        with np.load(rec) as z:
            images, duals, ckpt = z["images"], z["duals"], str(z["checkpoint"])
        arch, theta0, _ = fileio.load_checkpoint(ckpt)
        if len(images) > d.m:
            keep = np.argsort(-np.linalg.norm(duals, axis=1), kind="stable")[:d.m]
            images, duals = images[np.sort(keep)], duals[np.sort(keep)]
        y = rkip_finite_labels(empirical_ntk(arch, theta0, images), duals)
        return DistilledSet(images, y, False, {"method": "rkip_finite", "seed": seed, "source": str(rec)})
    raise ConfigError(f"unknown method {method!r}")


def cmd_distill(cfg: ExperimentConfig, out, resume=False) -> list:
    man = Manifest(out)
    out = man.dir
    made = []
    for seed in cfg.seeds:
        data, _ = load_task(_spec(cfg, seed, cfg.distill.n_per_class), cfg.data_dir)
        for method in cfg.distill.methods:
            name = f"distill_{method}_s{seed}"
            h = cfg.hash(DISTILL_SECTIONS, method=method, seed=seed)
            if not _stage(man, name, h, resume):
                ds = make_distilled(cfg, method, data, seed)
                path = out / f"{name}.npz"
                fileio.save_distilled(path, ds)
                man.record(name, h, [path], {"method": method, "seed": seed, "m": len(ds)})
            made.append(name)
    return made


TABLE_HEADER = ["method", "eval_mode", "mean_acc", "std_acc", "n_seeds"]


def cmd_retrain(cfg: ExperimentConfig, out, resume=False) -> list:
    """Evaluate every distilled set under each configured evaluation mode and
    write the mean/std table over seeds."""
    man = Manifest(out)
    out = man.dir
    d = cfg.distill
    accs = {}
    for seed in cfg.seeds:
        train_data, test = load_task(_spec(cfg, seed, d.n_per_class), cfg.data_dir, with_test=True)
        test = _limit_test(test, cfg.task.test_limit, seed)
        for method in d.methods:
            path = out / f"distill_{method}_s{seed}.npz"
            if not path.exists():
                raise ConfigError(f"{path} not found; run 'distill' first")
            ds = fileio.load_distilled(path)
            for mode in d.eval_modes:
                name = f"retrain_{method}_{mode}_s{seed}"
                h = cfg.hash(DISTILL_SECTIONS, distilled=fileio.sha256_file(path))
                if _stage(man, name, h, resume):
                    acc = man.info(name)["accuracy"]
                else:
                    if mode == "infinite":
                        ev = "infinite"
                    else:
                        arch = Architecture(ds.images.shape[1], d.eval_width, ds.labels.shape[1], "relu")
                        ev = FiniteEval(arch, mode, d.eval_max_iters, d.lr_per_example)
                    acc = retrain_eval(ds, ev, test, seed=seed, ridge=_ridge(cfg), kernel=_analytic_kernel(cfg))
                    man.record(name, h, [], {"accuracy": acc})
                accs.setdefault((method, mode), []).append(acc)
    rows = [[m, mode, float(np.mean(v)), float(np.std(v)), len(v)] for (m, mode), v in accs.items()]
    path = fileio.write_csv(out / "table.csv", TABLE_HEADER, rows)
    man.record("retrain", cfg.hash(DISTILL_SECTIONS + ["seeds"]), [path], {"rows": rows})
    return rows


def cmd_report(cfg: ExperimentConfig, out) -> str:
    """Collect the summaries present in an output directory into report.md."""
    out = Path(out)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    lines = ["# Run report", ""]
    for p in sorted(out.glob("*.json")):
        if p.name == "manifest.json":
            continue
        lines += [f"## {p.stem}", "", "```", p.read_text().strip(), "```", ""]
    for p in sorted(out.glob("*.csv")):
        if p.name.endswith(("_trace.csv", "_loss.csv")):
            continue
        rows = fileio.read_csv(p)
        if not rows or len(rows) > 50:
            lines += [f"## {p.name}", "", f"{len(rows)} rows", ""]
            continue
        keys = list(rows[0])
        lines += [f"## {p.name}", "", "| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
        lines += ["| " + " | ".join(r[k] for k in keys) + " |" for r in rows]
        lines.append("")
    text = "\n".join(lines)
    (out / "report.md").write_text(text)
    return text
