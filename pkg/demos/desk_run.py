"""Train and evaluate the desk-scale model end to end.

Generates the 300/100 split, reports the untrained AUC, trains for the
preset's 20 epochs and then prints the view sweep and per-type accuracy.
About a quarter of an hour on one CPU core.

    python3 demos/desk_run.py [out_dir]
"""

import sys
import time
from pathlib import Path

from oddvox.config import desk_preset
from oddvox.encoder import Encoder
from oddvox.evaluation import evaluate, sweep_views, write_plots
from oddvox.model import build_model
from oddvox.scenegen import build_dataset
from oddvox.train import fit, prepare_scenes

out = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_run")
cfg = desk_preset()
encoder = Encoder(cfg.encoder)

t0 = time.perf_counter()
train = prepare_scenes(build_dataset(0, 300, cfg.dataset), encoder)
test = prepare_scenes(build_dataset(1, 100, cfg.dataset), encoder)
print(f"{len(train)} train / {len(test)} test scenes in {time.perf_counter() - t0:.0f} s")

model = build_model(cfg.model, cfg.encoder, cfg.grid)
print(f"untrained AUC {evaluate(model, test).auc:.3f}")

fit(model, train, cfg.train, out, meta=cfg.echo(), log_fn=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['loss']:.3f}"))

report = evaluate(model, test)
report.sweep_views = sweep_views(model, test)
print(f"trained AUC {report.auc:.3f}  accuracy {report.accuracy:.3f}")
for k, a in report.sweep_views.items():
    print(f"  {k} view(s): AUC {a:.3f}")
for name, acc in report.per_type.items():
    print(f"  {name:>9}: {acc:.3f}")
write_plots(report, out)
