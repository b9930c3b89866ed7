"""Two-phase training, leave-one-domain-out runs and hyper-parameter sweeps.

Phase 1 trains a plain segmentation network on the cross-entropy term alone.
Phase 2 switches on style randomization and optimizes
``seg + consist + lambda_adv * adv``; by default the style classifier is
trained in the same step and the encoder sees its gradient reversed.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import TrainConfig, format_config, to_flat
from .data import DomainCorpus, LodoSplit, Sample, augment, epoch_batches, lodo_splits
from .errors import ICSLError, NumericError
from .featstats import SirConfig
from .losses import adv_loss, consist_loss, seg_loss, total_loss
from .metrics import MetricsReport, config_hash, evaluate, validation_dice
from .model import build_model, forward_dual, reverse_gradient

log = logging.getLogger(__name__)

LOSS_FIELDS = ("seg", "consist", "adv", "total")


@dataclass
class PhaseSnapshot:
    """Full training state at the end of phase 1, enough to fork phase 2 runs."""

    key: str
    model_state: dict
    classifier_state: dict
    rng: dict
    step: int
    epoch: int
    records: List[dict]
    validation: List[dict]
    best: float


@dataclass
class TrainResult:
    model: torch.nn.Module
    classifier: torch.nn.Module
    log: List[dict]
    validation: List[dict] = field(default_factory=list)
    checkpoints: Dict[str, Path] = field(default_factory=dict)
    best_val: float = float("nan")
    phase1: Optional[PhaseSnapshot] = None


def phase1_key(config: TrainConfig) -> str:
    """Hash of every setting that influences phase 1."""
    flat = to_flat(config)
    keep = {k: v for k, v in flat.items()
            if k.startswith(("model.", "augment.")) or k in (
                "phase1_epochs", "learning_rate", "batch_size", "seed", "adam_beta1", "adam_beta2",
                "weight_decay", "val_every", "deterministic")}
    return config_hash(keep)


def _setup_determinism(config: TrainConfig) -> None:
    threads = config.threads or (1 if config.deterministic else 0)
    if threads:
        torch.set_num_threads(threads)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)


def collate(samples: Sequence[Sample]):
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    return x, y


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "poly" and total > 0:
        return config.learning_rate * (1 - min(step, total) / total) ** config.poly_power
    return config.learning_rate


def _make_optimizer(params, config: TrainConfig):
    return torch.optim.Adam(params, lr=config.learning_rate,
                            betas=(config.adam_beta1, config.adam_beta2),
                            weight_decay=config.weight_decay)


def phase2_sir(config: TrainConfig) -> SirConfig:
    return dataclasses.replace(config.sir, enabled=config.sir.enabled and not config.disable_sir)


def training_step(model, classifier, batch, y, config: TrainConfig, phase: int, optimizers,
                  generator: torch.Generator):
    """One optimization step; returns the loss bundle."""
    opt_main, opt_clf = optimizers
    zero = torch.zeros(())
    if phase == 1:
        out = forward_dual(model, None, batch, SirConfig(enabled=False))
        total, bundle = total_loss(seg_loss(out.p_seg, out.p_seg_hat, y), zero, zero, config.lambda_adv)
        opt_main.zero_grad(set_to_none=True)
        total.backward()
        opt_main.step()
        return bundle

    sir = phase2_sir(config)
    use_adv = not config.disable_adv
    alternating = use_adv and config.adv_mode == "alternating"
    kappa = config.model.grl_coefficient
    out = forward_dual(model, classifier if use_adv else None, batch, sir, generator,
                       grl_coefficient=kappa, detach_classifier_input=alternating)
    seg = seg_loss(out.p_seg, out.p_seg_hat, y)
    consist = zero if config.disable_consist else consist_loss(out.p_seg, out.p_seg_hat, config.consist_mode)
    adv = zero
    if use_adv:
        adv = adv_loss(out.p_c, out.p_c_hat)
        if alternating:
            # classifier step on detached features, then the encoder plays against the updated classifier
            opt_clf.zero_grad(set_to_none=True)
            adv.backward()
            opt_clf.step()
            both = torch.cat([out.features, out.features_hat], dim=0)
            scores = classifier(reverse_gradient(both, kappa))
            n = batch.shape[0]
            adv = adv_loss(scores[:n], scores[n:])
    total, bundle = total_loss(seg, consist, adv, config.lambda_adv)
    opt_main.zero_grad(set_to_none=True)
    total.backward()
    opt_main.step()
    return bundle


class _Writer:
    def __init__(self, run_dir: Optional[Path]):
        self.run_dir = run_dir
        self.fh = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            self.fh = open(run_dir / "train_log.jsonl", "a")

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train(train_samples: Sequence[Sample], config: TrainConfig, val_samples: Sequence[Sample] = (),
          decomposition: Optional[dict] = None, run_dir=None,
          resume: Optional[PhaseSnapshot] = None) -> TrainResult:
    """Run both phases on ``train_samples``.

    ``val_samples`` (held-in test data) are scored with a dice-only pass every
    ``val_every`` epochs and at the end of each phase.  With ``run_dir`` set,
    the step log, checkpoints and a config snapshot are written there.
    ``resume`` skips phase 1 by restoring a snapshot taken from a run with the
    same phase-1 settings; the result is identical to training from scratch.
    """
    config.validate()
    if len(train_samples) < 2:
        raise ICSLError("training needs at least 2 samples")
    _setup_determinism(config)
    run_dir = Path(run_dir) if run_dir is not None else None

    torch.manual_seed(config.seed)
    model, classifier = build_model(config.model)
    data_rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    generator = torch.Generator().manual_seed(config.seed + 7)

    records, validation, checkpoints = [], [], {}
    best = -math.inf
    step = epoch = 0
    if resume is not None:
        if resume.key != phase1_key(config):
            raise ICSLError("phase-1 snapshot was taken with different phase-1 settings")
        if not config.reset_optimizer:
            raise ICSLError("resuming from a phase-1 snapshot requires reset_optimizer = true")
        model.load_state_dict(resume.model_state)
        classifier.load_state_dict(resume.classifier_state)
        torch.set_rng_state(resume.rng["torch"])
        generator.set_state(resume.rng["sir"])
        data_rng.bit_generator.state = resume.rng["data"]
        aug_rng.bit_generator.state = resume.rng["aug"]
        step, epoch, best = resume.step, resume.epoch, resume.best
        records, validation = list(resume.records), list(resume.validation)

    writer = _Writer(run_dir)
    if run_dir is not None:
        (run_dir / "config.cfg").write_text(format_config(config))

    n = len(train_samples)
    steps_per_epoch = len(epoch_batches(n, config.batch_size, np.random.default_rng(0)))
    phase2_steps = steps_per_epoch * config.phase2_epochs
    t0 = time.perf_counter()
    snapshot = resume

    def checkpoint(name, phase):
        if run_dir is None:
            return
        checkpoints[name] = save_checkpoint(
            run_dir / f"{name}.npz", model, classifier, config.model, epoch=epoch, step=step,
            phase=phase, sir_generator=generator, numpy_rng=data_rng,
            extra={"config_hash": config_hash(to_flat(config))})

    try:
        opt_main = opt_clf = None
        for phase, n_epochs in ((1, config.phase1_epochs), (2, config.phase2_epochs)):
            if n_epochs == 0 or (phase == 1 and resume is not None):
                continue
            joint_clf = phase == 2 and config.adv_mode == "grl"
            if opt_main is None or config.reset_optimizer:
                params = list(model.parameters())
                if joint_clf:
                    params += list(classifier.parameters())
                opt_main = _make_optimizer(params, config)
            elif joint_clf:
                opt_main.add_param_group({"params": list(classifier.parameters())})
            if phase == 2 and config.adv_mode == "alternating":
                opt_clf = _make_optimizer(classifier.parameters(), config)

            phase_step = 0
            for _ in range(n_epochs):
                epoch += 1
                model.train()
                classifier.train()
                for idx in epoch_batches(n, config.batch_size, data_rng):
                    lr = _lr_at(config, phase_step, phase2_steps) if phase == 2 else config.learning_rate
                    for opt in (opt_main, opt_clf):
                        if opt is not None:
                            for g in opt.param_groups:
                                g["lr"] = lr
                    x, y = collate([augment(train_samples[i], aug_rng, config.augment) for i in idx])
                    try:
                        bundle = training_step(model, classifier, x, y, config, phase,
                                               (opt_main, opt_clf), generator)
                    except NumericError as exc:
                        # the failing step raised before any parameter update
                        checkpoint("last_good", phase)
                        raise NumericError(f"{exc} at step {step + 1} (epoch {epoch}, phase {phase})") from exc
                    step += 1
                    phase_step += 1
                    rec = {"step": step, "epoch": epoch, "phase": phase, "lr": lr,
                           "wall_time": round(time.perf_counter() - t0, 3), **bundle.as_dict()}
                    records.append(rec)
                    writer.write(rec)

                if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                    checkpoint(f"epoch{epoch:04d}", phase)
                phase_end = epoch == config.phase1_epochs + (config.phase2_epochs if phase == 2 else 0)
                if val_samples and decomposition and (
                        phase_end or (config.val_every and epoch % config.val_every == 0)):
                    scores = validation_dice(model, val_samples, decomposition)
                    entry = {"epoch": epoch, "phase": phase, "dice": scores.pop("mean"),
                             **{f"dice_{c}": v for c, v in scores.items()}}
                    validation.append(entry)
                    writer.write({"validation": entry})
                    if entry["dice"] > best:
                        best = entry["dice"]
                        checkpoint("best", phase)
            if phase == 1:
                snapshot = PhaseSnapshot(
                    phase1_key(config),
                    copy.deepcopy(model.state_dict()), copy.deepcopy(classifier.state_dict()),
                    {"torch": torch.get_rng_state(), "sir": generator.get_state(),
                     "data": data_rng.bit_generator.state, "aug": aug_rng.bit_generator.state},
                    step, epoch, list(records), list(validation), best)
        checkpoint("final", 2 if config.phase2_epochs else 1)
    finally:
        writer.close()
    model.eval()
    classifier.eval()
    return TrainResult(model, classifier, records, validation, checkpoints, best, snapshot)


# --------------------------------------------------------------------------- #
# leave-one-domain-out

@dataclass
class SplitResult:
    held_out: int
    report: Optional[MetricsReport]
    held_in: Optional[MetricsReport] = None
    log: List[dict] = field(default_factory=list)
    error: str = ""
    phase1: Optional[PhaseSnapshot] = None


@dataclass
class LodoResult:
    splits: List[SplitResult]
    report: MetricsReport
    config_hash: str

    def table(self, metric: str = "dice") -> str:
        return self.report.table(metric)

    def held_in_dice(self, cls: str) -> float:
        vals = [s.held_in.class_average(cls) for s in self.splits if s.held_in is not None]
        return float(np.mean(vals)) if vals else math.nan


def split_config(config: TrainConfig, held_out: int) -> TrainConfig:
    return dataclasses.replace(config, seed=config.seed * 1000 + held_out)


def run_split(corpus: DomainCorpus, split: LodoSplit, config: TrainConfig, run_dir=None,
              evaluate_held_in: bool = True, resume: Optional[PhaseSnapshot] = None) -> SplitResult:
    names = {d.domain_id: d.name for d in corpus.domains}
    cfg = split_config(config, split.held_out)
    chash = config_hash(to_flat(config))
    sub = Path(run_dir) / f"split_{names[split.held_out]}" if run_dir is not None else None
    result = train(split.train_samples(), cfg, split.held_in_test(), corpus.decomposition, sub, resume)
    report = evaluate(result.model, split.test_domain.test, corpus.decomposition, names, chash)
    held_in = None
    if evaluate_held_in and split.held_in_test():
        held_in = evaluate(result.model, split.held_in_test(), corpus.decomposition, names, chash)
    if sub is not None:
        (sub / "report.json").write_text(report.to_json())
        (sub / "report.tsv").write_text(report.table("dice") + report.table("asd"))
    return SplitResult(split.held_out, report, held_in, result.log, phase1=result.phase1)


def _run_split_job(args):
    corpus, split, config, run_dir = args
    torch.set_num_threads(1)
    try:
        return run_split(corpus, split, config, run_dir)
    except ICSLError as exc:
        return SplitResult(split.held_out, None, error=f"{type(exc).__name__}: {exc}")


def run_lodo(corpus: DomainCorpus, config: TrainConfig, run_dir=None, jobs: int = 1,
             splits: Optional[Sequence[int]] = None) -> LodoResult:
    """Train and evaluate once per held-out domain.

    A split that fails is recorded as failed and the others still run.
    ``jobs > 1`` runs splits in worker processes.
    """
    all_splits = lodo_splits(corpus)
    if splits is not None:
        all_splits = [s for s in all_splits if s.held_out in set(splits)]
    chash = config_hash(to_flat(config))
    jobs_args = [(corpus, s, config, run_dir) for s in all_splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_split_job, jobs_args))
    else:
        results = []
        for args in jobs_args:
            try:
                results.append(run_split(*args))
            except ICSLError as exc:
                log.error("split %s failed: %s", args[1].held_out, exc)
                results.append(SplitResult(args[1].held_out, None, error=f"{type(exc).__name__}: {exc}"))

    for r in results:
        r.phase1 = None
    return _merge_results(corpus, results, chash)


def _merge_results(corpus: DomainCorpus, results: Sequence[SplitResult], chash: str) -> LodoResult:
    names = {d.domain_id: d.name for d in corpus.domains}
    merged = MetricsReport({}, list(corpus.decomposition), names, chash)
    for r in results:
        if r.report is not None:
            merged = merged.merge(r.report)
        else:
            merged.failed[r.held_out] = r.error
    merged.domain_names = names
    merged.config_hash = chash
    return LodoResult(list(results), merged, chash)


def _compare_split(corpus: DomainCorpus, split: LodoSplit, configs: Dict[str, TrainConfig],
                   run_dir=None) -> Dict[str, SplitResult]:
    out = {}
    cache: Dict[str, PhaseSnapshot] = {}
    for name, cfg in configs.items():
        key = phase1_key(split_config(cfg, split.held_out)) if cfg.reset_optimizer else None
        sub = Path(run_dir) / name if run_dir is not None else None
        try:
            r = run_split(corpus, split, cfg, sub, resume=cache.get(key) if key else None)
        except ICSLError as exc:
            log.error("%s split %s failed: %s", name, split.held_out, exc)
            r = SplitResult(split.held_out, None, error=f"{type(exc).__name__}: {exc}")
        if r.phase1 is not None and key:
            cache.setdefault(key, r.phase1)
        r.phase1 = None
        out[name] = r
    return out


def _compare_split_job(args):
    torch.set_num_threads(1)
    return _compare_split(*args)


def run_comparison(corpus: DomainCorpus, configs: Dict[str, TrainConfig], run_dir=None,
                   jobs: int = 1) -> Dict[str, LodoResult]:
    """LODO runs for several method variants (e.g. full method and ablations).

    Variants whose phase-1 settings agree share one phase-1 run per split.
    ``jobs > 1`` runs splits in worker processes; results do not change.
    """
    job_args = [(corpus, split, configs, run_dir) for split in lodo_splits(corpus)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_split = list(pool.map(_compare_split_job, job_args))
    else:
        per_split = [_compare_split(*a) for a in job_args]
    return {name: _merge_results(corpus, [ps[name] for ps in per_split], config_hash(to_flat(cfg)))
            for name, cfg in configs.items()}


# --------------------------------------------------------------------------- #
# sweeps

SWEEP_PARAMETERS = ("lambda_style_fixed", "lambda_adv")


def sweep_config(config: TrainConfig, parameter: str, value: float) -> TrainConfig:
    if parameter == "lambda_adv":
        if value < 0:
            raise ValueError(f"lambda_adv must be >= 0, got {value}")
        return dataclasses.replace(config, lambda_adv=float(value))
    if parameter == "lambda_style_fixed":
        if not 0 <= value <= 1:
            raise ValueError(f"lambda_style must lie in [0, 1], got {value}")
        sir = dataclasses.replace(config.sir, lambda_mode="fixed", lambda_fixed=float(value))
        return dataclasses.replace(config, sir=sir)
    raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")


def run_sweep(corpus: DomainCorpus, config: TrainConfig, parameter: str, values: Sequence[float],
              run_dir=None, jobs: int = 1) -> List[dict]:
    """One LODO run per value; rows of ``{parameter, value, dice, per-class dice, asd}``."""
    if not values:
        raise ValueError("sweep needs at least one value")
    configs = [sweep_config(copy.deepcopy(config), parameter, v) for v in values]
    rows = []
    for value, cfg in zip(values, configs):
        sub = Path(run_dir) / f"{parameter}={value:g}" if run_dir is not None else None
        res = run_lodo(corpus, cfg, sub, jobs)
        row = {"parameter": parameter, "value": float(value), "dice": res.report.overall("dice"),
               "asd": res.report.overall("asd")}
        for c in res.report.class_names:
            row[f"dice_{c}"] = res.report.class_average(c, "dice")
        rows.append(row)
    return rows
