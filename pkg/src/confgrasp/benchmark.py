"""Desk-scale experiments: supervised training on the synthetic source domain and
the three-way adaptation comparison on the shifted target domain."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapt import METHODS, AdaptConfig, AdaptResult, prepare_target, run_adaptation
from .model import BackboneConfig, Params
from .synth import source_config, synth_generate, target_config
from .trainer import EvalReport, TrainConfig, evaluate, train_two_step


def desk_train_config(seed: int = 0) -> TrainConfig:
    """Rates and epochs that train the 64x64 model from scratch in a few minutes."""
    return TrainConfig(lr_pose=3e-4, lr_loc=1e-3, decay_every=25, epochs_pose=100, epochs_loc=40, seed=seed)


@dataclass
class SupervisedSetup:
    seed: int = 0
    n_labelled: int = 200
    n_eval: int = 200
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=desk_train_config)


@dataclass
class SupervisedOutcome:
    params: Params
    log: list
    report: EvalReport


def run_supervised(setup: SupervisedSetup) -> SupervisedOutcome:
    scfg = source_config(setup.seed, setup.backbone.input_size)
    d_l, _, d_e = synth_generate(scfg, setup.n_labelled, 0, setup.n_eval)
    params, log = train_two_step(d_l, setup.backbone, setup.train)
    return SupervisedOutcome(params, log, evaluate(params, d_e, setup.backbone))


def desk_adapt_config(seed: int = 0) -> AdaptConfig:
    return AdaptConfig(seed=seed, lr=1e-3, epochs=60)


@dataclass
class DomainShiftSetup:
    seed: int = 0
    labelled_n: int = 9
    n_unlabelled: int = 90
    n_eval: int = 100
    adapt: AdaptConfig = field(default_factory=desk_adapt_config)

    @property
    def pool_n(self) -> int:
        return max(self.labelled_n, self.adapt.loc_finetune_n)


def subsample(samples: Sequence, n: int, seed: int) -> list:
    """``n`` samples chosen by seed, returned in id order."""
    if n > len(samples):
        raise ValueError(f"asked for {n} labelled samples but only {len(samples)} exist")
    idx = np.random.default_rng([seed, 20]).permutation(len(samples))[:n]
    return sorted((samples[i] for i in idx), key=lambda s: s.id)


def run_domain_shift(
    source_params: Params,
    cfg: BackboneConfig,
    setup: DomainShiftSetup,
    methods: Sequence[str] = METHODS,
) -> dict[str, AdaptResult]:
    tcfg_synth = target_config(setup.seed, cfg.input_size)
    pool, d_u, d_e = synth_generate(tcfg_synth, setup.pool_n, setup.n_unlabelled, setup.n_eval)
    acfg = replace(setup.adapt, seed=setup.seed)
    d_loc = subsample(pool, min(acfg.loc_finetune_n, len(pool)), setup.seed)
    params, tcfg = prepare_target(source_params, cfg, d_loc, acfg)
    d_l = subsample(pool, setup.labelled_n, setup.seed)
    return {m: run_adaptation(params, d_l, d_u, d_e, tcfg, replace(acfg, method=m)) for m in methods}


@dataclass
class ShiftVerdict:
    final: dict
    best: dict
    best_margin: float
    direct_rises: bool
    cmt_beats_direct_final: bool
    cmt_beats_mt_final: bool

    @property
    def margin_ok(self) -> bool:
        return self.best_margin >= 0.10


def judge(results: dict[str, AdaptResult]) -> ShiftVerdict:
    final = {m: r.curve[-1][2] for m, r in results.items()}
    best = {m: r.best_loss for m, r in results.items()}
    direct = results["direct"].losses()
    k = int(np.argmin(direct))
    rises = k < len(direct) - 1 and max(direct[k + 1 :]) > direct[k]
    margin = 1.0 - best["confidence_mt"] / best["direct"]
    return ShiftVerdict(
        final=final,
        best=best,
        best_margin=margin,
        direct_rises=bool(rises),
        cmt_beats_direct_final=final["confidence_mt"] < final["direct"],
        cmt_beats_mt_final=final["confidence_mt"] < final["mean_teacher"],
    )


def as_dict(obj) -> dict:
    return asdict(obj)
