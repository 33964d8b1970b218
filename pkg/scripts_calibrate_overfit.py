import sys
import time

import numpy as np

import stormkan as sk
from stormkan.data import SyntheticDataset
from stormkan.training import TrainConfig, evaluate, train

mode = sys.argv[1] if len(sys.argv) > 1 else "probe"

ds = SyntheticDataset(range(8), 8, seed=7, cache=True)
print("n samples:", len(ds), flush=True)

if mode == "probe":
    for lr, batch in [(0.005, 16), (0.02, 16), (0.01, 8), (0.03, 8)]:
        model = sk.build_model(sk.ModelConfig(), seed=3, dtype=np.float32)
        cfg = TrainConfig(lr=lr, batch=batch, max_epochs=6, seed=11,
                          early_stop_patience=1000)
        t0 = time.time()
        res = train(model, ds, ds, cfg)
        hist = " ".join(f"{v:.4f}" for v in res.val_history)
        print(f"lr={lr} b={batch}: {time.time()-t0:.0f}s hist: {hist}",
              flush=True)
else:
    lr, batch, epochs = float(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4])
    model = sk.build_model(sk.ModelConfig(), seed=3, dtype=np.float32)
    cfg = TrainConfig(lr=lr, batch=batch, max_epochs=epochs, seed=11,
                      plateau_patience=3, early_stop_patience=1000)
    t0 = time.time()
    res = train(model, ds, ds, cfg)
    _, met = evaluate(model, ds)
    print(f"lr={lr} b={batch}: {res.epochs_run}ep {time.time()-t0:.0f}s "
          f"best={res.best_val_loss:.5f}@{res.best_epoch} "
          f"MAE msw={met.mae_msw_kt:.2f}kt rmw={met.mae_rmw_nmi:.2f}nmi",
          flush=True)
    for i, line in enumerate(res.log_lines):
        if i % 4 == 0 or i == len(res.log_lines) - 1:
            p = line.split(",")
            print(f"  ep{p[0]:>3} loss={p[2][:8]} lr={p[3][:8]} "
                  f"msw={p[4][:6]}kt rmw={p[6][:6]}nmi", flush=True)
