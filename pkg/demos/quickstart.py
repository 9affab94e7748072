"""Train FSA and DEP on a small synthetic dataset and compare test scores.

FSA sees only the k step-labelled videos. DEP sees the same k videos plus
every other training video with phase labels alone, supervised through the
step-to-phase table. Runs in a few seconds on one core.

    python demos/quickstart.py
"""

from steptcn import ExperimentSpec, ModelConfig, TrainConfig, default_generator_config, run_weak_supervision_grid
from steptcn.harness import dataset_from_generator, rows_to_markdown


def main():
    gen = default_generator_config(seed=0)
    ds = dataset_from_generator(gen, (24, 6, 10))
    print(f"{len(ds.train)} train / {len(ds.val)} val / {len(ds.test)} test videos, "
          f"{ds.ontology.num_steps} steps in {ds.ontology.num_phases} phases")

    spec = ExperimentSpec(dataset={}, seeds=(0,), k_values=(3,),
                          train_config=TrainConfig(epochs=15),
                          model_config=ModelConfig(tcn_layers=6, tcn_filters=24))
    rows = run_weak_supervision_grid(spec, ds)
    print()
    print(rows_to_markdown(rows))
    fsa, dep = rows
    print(f"\nDEP - FSA test F1: {100 * (dep.mean['f1'] - fsa.mean['f1']):+.2f} points")


if __name__ == "__main__":
    main()
