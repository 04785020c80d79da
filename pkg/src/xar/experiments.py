"""Desk-scale experiments on planted-correspondence data.

Expert ablation, pretrain/finetune and training-set scale studies run on
synthetic features instead of real AudioCaps/Clotho archives. Each function
returns plain results; ``scripts/`` prints them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .datakit import SynthExpert, synth_generate
from .encoders import Model, init_params
from .trainer import (
    ExperimentResult,
    LookaheadRAdam,
    TrainConfig,
    evaluate,
    model_config_for,
    prepare_splits,
    run_experiment,
    train_epoch,
)

# Small enough for a laptop core, large enough to fit 32 pairs.
SMALL_MODEL = {"arch": "ce", "embed_dim": 128, "text_clusters": 8, "text_ghost_clusters": 1, "expert_clusters": 8}
TOY_EXPERTS = (("audio_a", 24), ("audio_b", 32))


def overfit_dataset(seed: int = 0, noise: float = 0.05):
    experts = [SynthExpert(n, d) for n, d in TOY_EXPERTS]
    return synth_generate(32, 16, experts, noise, seed).dataset


@dataclass
class OverfitTrace:
    epochs: list[int]
    t2a_r1: list[float]
    a2t_r1: list[float]
    losses: list[float]

    @property
    def reached(self) -> int | None:
        """First epoch with train R@1 >= 95 in both directions."""
        for e, a, b in zip(self.epochs, self.t2a_r1, self.a2t_r1):
            if a >= 95.0 and b >= 95.0:
                return e
        return None


def run_overfit(max_epochs: int = 300, seed: int = 0, stop_when_reached: bool = True,
                model: dict | None = None) -> OverfitTrace:
    """Fit the 32-pair set with the default recipe at B=32 and track train R@1."""
    ds = overfit_dataset()
    mc = model_config_for(ds, model or SMALL_MODEL)
    tc = TrainConfig(batch_size=32, margin=0.2, lr=0.01, lr_decay=0.95, max_epochs=max_epochs, seeds=1,
                     base_seed=seed)
    train = prepare_splits(ds, tc, mc.expert_names)["train"]
    params = init_params(mc, seed)
    net = Model(params)
    opt = LookaheadRAdam(params, tc)
    trace = OverfitTrace([], [], [], [])
    for epoch in range(1, max_epochs + 1):
        stats = train_epoch(net, train, tc, np.random.default_rng([seed, epoch]), opt, epoch)
        reps = evaluate(net, train)
        trace.epochs.append(epoch)
        trace.losses.append(stats.mean_loss)
        trace.t2a_r1.append(reps["t2a"].recalls[1])
        trace.a2t_r1.append(reps["a2t"].recalls[1])
        if stop_when_reached and trace.reached is not None:
            break
    return trace


GEN_SPLITS = {"train": 512, "val": 128, "test": 128}


def generalization_dataset(seed: int = 1, noise: float = 0.1, rank: int = 8, map_seed: int | None = None,
                           splits=None):
    """Two experts, each seeing a different rank-``rank`` view of a 16-d latent."""
    splits = dict(splits or GEN_SPLITS)
    experts = [SynthExpert(n, d, rank) for n, d in TOY_EXPERTS]
    return synth_generate(sum(splits.values()), 16, experts, noise, seed, splits=splits, map_seed=map_seed).dataset


def recipe(**overrides) -> TrainConfig:
    """Default recipe (B=128, m=0.2, lr 0.01, wd 0.001, decay 0.95, 20 epochs, 3 seeds) with overrides."""
    return replace(TrainConfig(), **overrides)


def run_expert_ablation(dataset=None, train_config: TrainConfig | None = None, arch: str = "ce",
                        model: dict | None = None) -> dict[str, ExperimentResult]:
    """Each single expert and the combination, same data and seeds."""
    ds = dataset if dataset is not None else generalization_dataset()
    tc = train_config or recipe()
    base = dict(model or SMALL_MODEL, arch=arch)
    names = [n for n, _ in ds.experts]
    configs = [[n] for n in names] + [names]
    out = {}
    for experts in configs:
        label = " + ".join(experts)
        mc = model_config_for(ds, dict(base, experts=experts))
        out[label] = run_experiment(mc, tc, ds, label=label)
    return out


def run_scale_sweep(fractions: Sequence[float] = (0.1, 0.25, 0.5, 1.0), dataset=None,
                    train_config: TrainConfig | None = None, model: dict | None = None) -> dict[float, ExperimentResult]:
    ds = dataset if dataset is not None else generalization_dataset()
    tc = train_config or recipe()
    mc = model_config_for(ds, model or SMALL_MODEL)
    return {f: run_experiment(mc, replace(tc, train_fraction=f), ds, label=f"fraction {f:g}") for f in fractions}


def run_pretrain_finetune(arch: str = "ce", train_config: TrainConfig | None = None,
                          model: dict | None = None) -> dict[str, ExperimentResult]:
    """Train on a large source set, then fine-tune on a small target set sharing the generator."""
    source = generalization_dataset(seed=11, map_seed=5)
    target = generalization_dataset(seed=12, map_seed=5, splits={"train": 64, "val": 64, "test": 128})
    tc = train_config or recipe()
    base = dict(model or SMALL_MODEL, arch=arch)
    mc = model_config_for(target, base)
    scratch = run_experiment(mc, tc, target, label=f"{arch} / none")
    pre = run_experiment(model_config_for(source, base), replace(tc, seeds=1), source, label=f"{arch} / source")
    tuned = run_experiment(mc, tc, target, init=pre.best_run.checkpoint, label=f"{arch} / pretrained")
    return {"none": scratch, "pretrained": tuned}
