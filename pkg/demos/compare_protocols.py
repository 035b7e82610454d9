"""Run the four headline protocols on one draw of the default synthetic
benchmark and print their metric rows.

    python3 demos/compare_protocols.py [seed]
"""
import sys

from adaptlab import SynthSpec, build_benchmark, evaluate_all, new_model, parse_protocol, run_protocol

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
spec = SynthSpec(seed=seed)
source, train, suite, trunk = build_benchmark(spec)
print(f"source {source.n}x{source.dim}, train {train.n}, test {suite.id_test.n}, "
      f"{len(suite.corrupted)} corrupted sets, anomalies: {', '.join(a.name for a in suite.anomaly_sets)}")

print(f"{'protocol':<22}{'mCA':>8}{'RMSE':>8}{'AUROC':>8}{'ID':>8}{'OOD':>8}")
for name in ("lp", "ft", "lp+ft", "(lp+vat)+(ft+mixup)"):
    model = new_model(trunk, spec.num_classes, seed=[seed, 99])
    model, log = run_protocol(parse_protocol(name, "desk", seed=seed), model, train)
    r = evaluate_all(model, suite)
    print(f"{name:<22}{r.mca:8.4f}{r.rmse_calibration:8.4f}{r.auroc_mean:8.4f}{r.id_acc:8.4f}{r.ood_acc:8.4f}")
