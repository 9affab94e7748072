"""Stream a video through the model chunk by chunk and draw a ribbon plot.

Online inference encodes each new chunk, appends the features to a
per-video buffer and runs the causal TCN over the whole history. Because
every convolution is left-padded, the logits for a frame never depend on
later frames, so the streamed output matches the whole-video pass up to
floating-point rounding.

    python demos/online_inference.py [out.svg]
"""

import sys

import numpy as np

from steptcn import (FeatureBuffer, ModelConfig, TrainConfig, assign_annotation_regime, autodiff as ad,
                     derive_phase_labels, emit_ribbon_svg, fit, forward_offline, forward_video_online,
                     generate_synthetic_dataset, receptive_field)
from steptcn.data import default_generator_config


def main(out="ribbon.svg"):
    cfg = default_generator_config(seed=2)
    o = cfg.ontology
    vids = generate_synthetic_dataset(cfg)
    train = assign_annotation_regime(vids[:24], 6, 18, seed=0, ontology=o)
    mcfg = ModelConfig(obs_dim=cfg.obs_dim, num_steps=o.num_steps, tcn_layers=6, tcn_filters=24)
    print(f"receptive field: {receptive_field(mcfg)} frames")
    state = fit(train, vids[24:30], o, TrainConfig(epochs=10), mcfg).state

    video = vids[-1]
    buffer = FeatureBuffer(video.video_id, video.T)
    chunks = []
    with ad.no_grad():
        for start in range(0, video.T, 50):
            chunks.append(forward_video_online(state, buffer, video.obs[start:start + 50], video.video_id).values)
        online = np.concatenate(chunks)
        offline = forward_offline(state, video.obs).values
    print(f"{len(chunks)} chunks, max |online - offline| = {np.max(np.abs(online - offline)):.2e}")

    pred = online.argmax(axis=1)
    errors = np.sum(~o.matrix[pred, video.phase_labels].astype(bool))
    print(f"frame accuracy {np.mean(pred == video.step_labels):.3f}, "
          f"{errors} frames predicted with a step outside the true phase")
    path = emit_ribbon_svg(video.step_labels, pred, video.phase_labels, derive_phase_labels(o, pred), out,
                           o.step_names, o.phase_names)
    print(f"wrote {path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
