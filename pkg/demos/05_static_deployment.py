"""Lower a deploy-variant model to a static graph and benchmark it.

The deploy variant replaces the LSTM with a flattened-input spline
stack and every adaptive pool with fixed kernel/stride stages (split in
two when a kernel would exceed the 63 limit), so the whole forward pass
becomes a branch-free op list with precomputed spline coefficients.

Run: python demos/05_static_deployment.py
"""

import numpy as np

from stormkan import (ModelConfig, Session, Tape, bench, build_model,
                      decompose_pooling, export, load_graph, save_graph)

cfg = ModelConfig(image_hw=40, r_center=20, ring_count=9, variant="deploy")
model = build_model(cfg, seed=1)

# pools wider than the kernel limit split into two balanced stages
print("kernel 76 ->", decompose_pooling(76, 76))
print("kernel 32 ->", decompose_pooling(32, 32))

graph = export(model)
print(f"graph: {len(graph.nodes)} nodes, "
      f"{graph.parameter_count()} constant values")

payload = save_graph(graph)
print("serialized bytes:", len(payload))
graph2 = load_graph(payload)  # load fully re-validates the graph

rng = np.random.default_rng(0)
inputs = {
    "x_seq_flat": rng.uniform(0, 1, (1, 15)).astype(np.float32),
    "x_img": rng.uniform(0, 1, (1, 8, 40, 40)).astype(np.float32),
}
session = Session(graph2)
static_out = session.run(inputs)

tape = Tape()
ym, yr = model.forward_deploy(tape, inputs["x_seq_flat"], inputs["x_img"])
print("static vs dynamic |diff|:",
      abs(float(static_out["y_msw"][0, 0]) - float(ym.data[0, 0])),
      abs(float(static_out["y_rmw"][0, 0]) - float(yr.data[0, 0])))

report = bench(graph2, n_warmup=3, n_runs=20)
print(f"latency: mean {report['mean_ms']:.2f} ms, "
      f"p50 {report['p50_ms']:.2f} ms, p95 {report['p95_ms']:.2f} ms; "
      f"steady-state allocations: {report['steady_state_allocs']}")

# the full (recurrent) variant refuses to lower, by design
try:
    export(build_model(ModelConfig(image_hw=40, r_center=20, ring_count=9),
                       seed=2))
except Exception as exc:
    print("full variant export ->", type(exc).__name__, "-", exc)
