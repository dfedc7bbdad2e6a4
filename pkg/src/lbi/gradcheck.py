"""Finite-difference verification of the ignoring-weight hypergradients.

The engine's hypergradients are closed-form derivatives of the composed map

    raw scores -> (pretraining step) -> (finetuning step) -> validation loss

so they can be checked against central differences on that exact map: nudge
one raw score, rerun the two forward steps through the engine's own step
functions, and difference the validation loss.  The numeric side never calls
the closed-form hypergradient code, so the two routes share nothing except
the forward model; an error in either surfaces as disagreement.

Two details matter for a trustworthy comparison.  First, clamp mode is
non-differentiable exactly at raw scores 0 and 1, so check instances draw
raw scores strictly inside (0, 1) (the engine's projected-step semantics at
the boundary are tested separately, not differenced).  Second, relative
error uses max(|analytic|, |numeric|, tiny) as the denominator so agreeing
near-zero components do not explode the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import datasets, engine, model
from .engine import BundleArrays, LbiConfig, LbiState

REL_ERR_FLOOR = 1e-12


@dataclass
class FdEntry:
    """One compared component."""

    which: str  # "pretrain" or "finetune"
    index: int
    analytic: float
    numeric: float

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_err(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), REL_ERR_FLOOR)
        return self.abs_err / denom


@dataclass
class FdReport:
    """Full comparison over every ignoring score of an instance."""

    step: float
    threshold: float
    entries: list[FdEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def flagged(self) -> list[FdEntry]:
        return [e for e in self.entries if e.rel_err >= self.threshold]

    def passed(self) -> bool:
        return not self.flagged()

    def as_table(self) -> str:
        lines = [
            f"{'set':<9} {'idx':>4} {'analytic':>24} {'numeric':>24} "
            f"{'rel_err':>12} flag",
        ]
        for e in self.entries:
            mark = "FAIL" if e.rel_err >= self.threshold else "ok"
            lines.append(
                f"{e.which:<9} {e.index:>4} {e.analytic:>24.16e} "
                f"{e.numeric:>24.16e} {e.rel_err:>12.3e} {mark}"
            )
        lines.append(
            f"max rel err {self.max_rel_err:.3e} "
            f"(threshold {self.threshold:.1e}, step {self.step:.1e}): "
            + ("PASS" if self.passed() else "FAIL")
        )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "threshold": self.threshold,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed(),
            "entries": [
                {
                    "which": e.which,
                    "index": e.index,
                    "analytic": e.analytic,
                    "numeric": e.numeric,
                    "abs_err": e.abs_err,
                    "rel_err": e.rel_err,
                }
                for e in self.entries
            ],
        }


def _lookahead_val_loss(state: LbiState, arrays: BundleArrays,
                        cfg: LbiConfig) -> float:
    """Validation loss after one pretraining step and one finetuning step."""
    rates = cfg.rates_at(state.iteration)
    pretrained_next = engine.pretrain_step(state, arrays, cfg, rates)
    finetuned_next = engine.finetune_step(state, pretrained_next, arrays, cfg, rates)
    return model.weighted_loss_arrays(
        finetuned_next, arrays.val.X, arrays.val.y, np.ones(arrays.val.n)
    )


def fd_val_loss_wrt_ignore(state: LbiState, bundle, cfg: LbiConfig,
                           which: str, index: int, step: float = 1e-4) -> float:
    """Central difference of the lookahead validation loss in one raw score.

    Pure: works on copies, never mutates the given state, and never calls
    the closed-form hypergradient functions.
    """
    if which not in ("pretrain", "finetune"):
        raise ValueError(f"which must be 'pretrain' or 'finetune', got {which!r}")
    arrays = engine.ensure_arrays(bundle)
    n = arrays.pretrain.n
    if not 0 <= index < n:
        raise IndexError(f"ignore index {index} outside 0..{n - 1}")
    vals = []
    for sign in (1.0, -1.0):
        probe = state.copy()
        target = (probe.ignore_pretrain if which == "pretrain"
                  else probe.ignore_finetune)
        if target is None:
            raise ValueError("state has no finetuning ignore scores")
        target.raw[index] += sign * step
        vals.append(_lookahead_val_loss(probe, arrays, cfg))
    return (vals[0] - vals[1]) / (2.0 * step)


def verify_hypergrads(state: LbiState, bundle, cfg: LbiConfig,
                      step: float = 1e-4, threshold: float = 1e-4) -> FdReport:
    """Compare both closed-form hypergradients against central differences,
    one component per pretraining example."""
    arrays = engine.ensure_arrays(bundle)
    rates = cfg.rates_at(state.iteration)
    pretrained_next = engine.pretrain_step(state, arrays, cfg, rates)
    finetuned_next = engine.finetune_step(state, pretrained_next, arrays, cfg, rates)

    report = FdReport(step=step, threshold=threshold)
    sections = [("pretrain",
                 engine.hypergrad_ignore_pretrain(
                     state, finetuned_next, arrays, cfg, rates))]
    if cfg.mode == "extended":
        sections.append(("finetune",
                         engine.hypergrad_ignore_finetune(
                             state, finetuned_next, arrays, cfg, rates)))
    for which, analytic in sections:
        for i in range(arrays.pretrain.n):
            numeric = fd_val_loss_wrt_ignore(state, arrays, cfg, which, i, step)
            report.entries.append(
                FdEntry(which, i, float(analytic[i]), float(numeric))
            )
    return report


@dataclass
class CheckInstance:
    """A randomized small problem for hypergradient verification."""

    state: LbiState
    arrays: BundleArrays
    cfg: LbiConfig


def make_check_instance(seed: int, hidden: int = 0, ignore_mode: str = "clamp",
                        mode: str = "extended", dim: int | None = None,
                        classes: int | None = None,
                        n_pretrain: int | None = None,
                        n_train: int | None = None, n_val: int | None = None,
                        lam: float | None = None,
                        gamma: float | None = None) -> CheckInstance:
    """Build a small randomized instance at a generic point.

    Sizes default to random draws within desk scale (dim <= 8, classes <= 3,
    10/8/6 examples).  Parameters are drawn wider than normal init and raw
    ignoring scores are drawn strictly inside the differentiable region, so
    the comparison happens away from special points.  Rates, lam, and gamma
    are drawn positive unless pinned by the caller.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    dim = dim if dim is not None else int(rng.integers(2, 9))
    classes = classes if classes is not None else int(rng.integers(2, 4))
    n_pretrain = n_pretrain if n_pretrain is not None else int(rng.integers(3, 11))
    n_train = n_train if n_train is not None else int(rng.integers(2, 9))
    n_val = n_val if n_val is not None else int(rng.integers(2, 7))

    spec = datasets.SynthSpec(
        dim=dim, classes=classes,
        n_pretrain=n_pretrain, n_train=n_train, n_val=n_val, n_test=2,
        shift=float(rng.uniform(0.0, 1.0)), noise_sigma=1.0,
        corrupt_frac=0.3, corrupt_kind="label_flip",
        seed=int(rng.integers(0, 2**31)),
    )
    arrays = engine.ensure_arrays(datasets.generate(spec))

    cfg = LbiConfig(
        lam=float(rng.uniform(0.1, 0.8)) if lam is None else lam,
        gamma=float(rng.uniform(0.2, 1.0)) if gamma is None else gamma,
        lr_pretrain_encoder=float(rng.uniform(0.02, 0.2)),
        lr_pretrain_head=float(rng.uniform(0.02, 0.2)),
        lr_finetune_encoder=float(rng.uniform(0.02, 0.2)),
        lr_finetune_head=float(rng.uniform(0.02, 0.2)),
        iterations=1, mode=mode, ignore_mode=ignore_mode, hidden=hidden,
        seed=seed,
    )
    cfg.validate()

    state = engine.init_state(arrays, cfg)
    arch = state.pretrain_model.arch
    state.pretrain_model = model.ModelParams(
        arch,
        rng.uniform(-0.6, 0.6, arch.encoder_size),
        rng.uniform(-0.6, 0.6, arch.head_size),
    )
    state.finetune_model = model.ModelParams(
        arch,
        rng.uniform(-0.6, 0.6, arch.encoder_size),
        rng.uniform(-0.6, 0.6, arch.head_size),
    )
    if ignore_mode == "clamp":
        # Strictly interior so clipping is inactive around the probe points.
        state.ignore_pretrain.raw = rng.uniform(0.2, 0.8, n_pretrain)
        if state.ignore_finetune is not None:
            state.ignore_finetune.raw = rng.uniform(0.2, 0.8, n_pretrain)
    else:
        state.ignore_pretrain.raw = rng.uniform(-1.2, 1.2, n_pretrain)
        if state.ignore_finetune is not None:
            state.ignore_finetune.raw = rng.uniform(-1.2, 1.2, n_pretrain)
    return CheckInstance(state, arrays, cfg)
