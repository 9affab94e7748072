"""Why the default synthetic data uses a local Idle step.

In the cataract table Idle belongs to every phase. Its column in the
step-to-phase matrix is all ones, so putting all probability on Idle makes
the summed phase probability 1 for any phase label: the dependency loss is
zero without learning anything about the real steps. A model trained from
scratch with mostly phase-only videos finds that shortcut.

This script shows the zero-loss point directly, then trains the same small
DEP setup twice (Idle everywhere vs Idle only in its own phase) and reports
how much of the test set each model labels as Idle.

    python demos/idle_collapse.py
"""

import numpy as np

from steptcn import (ClassWeights, ModelConfig, TrainConfig, assign_annotation_regime, autodiff as ad,
                     dependency_loss, fit, generate_synthetic_dataset, load_ontology, predict)
from steptcn.data import default_generator_config


def zero_loss_point(o):
    idle = o.step_names.index("Idle")
    logits = np.full((o.num_phases, o.num_steps), -30.0)
    logits[:, idle] = 30.0
    w = ClassWeights(np.ones(o.num_steps), np.ones(o.num_phases))
    return dependency_loss(ad.constant(logits), np.arange(o.num_phases), o, w).item()


def idle_share(ref, epochs=12):
    o = load_ontology(ref)
    cfg = default_generator_config(seed=1, ontology=o)
    vids = generate_synthetic_dataset(cfg)
    train = assign_annotation_regime(vids[:24], 2, 22, seed=0, ontology=o)
    mcfg = ModelConfig(obs_dim=cfg.obs_dim, num_steps=o.num_steps, tcn_layers=6, tcn_filters=24)
    res = fit(train, vids[24:30], o, TrainConfig(epochs=epochs, seed=0), mcfg)
    pred = np.concatenate([predict(res.state, v.obs) for v in vids[30:]])
    true = np.concatenate([v.step_labels for v in vids[30:]])
    idle = o.step_names.index("Idle")
    return float(np.mean(pred == idle)), float(np.mean(true == idle))


def main():
    for ref in ("builtin:cataracts", "builtin:cataracts-local-idle"):
        o = load_ontology(ref)
        print(f"{ref}: dependency loss with all mass on Idle = {zero_loss_point(o) + 0.0:.3g}")
    print()
    for ref in ("builtin:cataracts", "builtin:cataracts-local-idle"):
        pred, true = idle_share(ref)
        print(f"{ref:32s} predicted Idle on {100 * pred:5.1f}% of test frames (true share {100 * true:.1f}%)")


if __name__ == "__main__":
    main()
