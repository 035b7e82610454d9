"""Feature distortion in miniature: fine-tuning from a random head moves the
trunk further than fine-tuning from a linear-probed head, and the larger move
costs accuracy on the shifted split.

    python3 demos/feature_distortion.py
"""
import numpy as np

from adaptlab import SynthSpec, build_benchmark, evaluate_all, new_model, parse_protocol, run_protocol

for seed in range(3):
    spec = SynthSpec(seed=seed)
    _, train, suite, trunk = build_benchmark(spec)
    print(f"seed {seed}")
    for name in ("ft", "lp+ft"):
        model = new_model(trunk, spec.num_classes, seed=[seed, 99])
        out, _ = run_protocol(parse_protocol(name, "desk", seed=seed), model, train)
        moved = np.linalg.norm(out.trunk.flat() - trunk.flat()) / np.linalg.norm(trunk.flat())
        r = evaluate_all(out, suite)
        print(f"  {name:<6} relative trunk change {moved:.4f}  ID {r.id_acc:.4f}  OOD {r.ood_acc:.4f}")
