"""Command-line interface: ``oddvox {gen,train,eval,ablate,som-eval}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 external-service error.
"""

from __future__ import annotations

import argparse
import copy
import sys
from collections import Counter
from pathlib import Path

from . import __version__, jsonio
from .config import config_from_dict, load_config
from .diffcore import load_checkpoint
from .encoder import Encoder
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    ExternalServiceError,
    NumericError,
    UsageError,
    ValidationError,
)
from .evaluation import bench, evaluate, sweep_object_count, sweep_views, write_plots
from .model import build_model
from .scenegen import build_dataset, read_dataset, write_dataset
from .som import HttpChatClient, MockClient, ReplayClient, evaluate_som
from .train import fit, prepare_scenes

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_EXTERNAL = 0, 2, 3, 4, 5

_EXIT_FOR = (
    (ConfigError, EXIT_CONFIG),
    (UsageError, EXIT_CONFIG),
    (NumericError, EXIT_NUMERIC),
    (ExternalServiceError, EXIT_EXTERNAL),
    (DatasetError, EXIT_DATA),
    (CheckpointError, EXIT_DATA),
    (ValidationError, EXIT_DATA),
)


def _say(*args):
    print(*args, flush=True)


def _load_data(path, encoder):
    return prepare_scenes(read_dataset(path), encoder)


def _model_for(cfg):
    return build_model(cfg.model, cfg.encoder, cfg.grid)


def _write_json(obj, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        jsonio.dump(obj, path)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


# --- commands ---------------------------------------------------------------------


def cmd_gen(args):
    cfg = load_config(args.config)
    scenes = build_dataset(args.seed, args.scenes, cfg.dataset)
    write_dataset(scenes, args.out, config=cfg.dataset, extra_meta={"master_seed": args.seed, "run_config": cfg.to_dict()})
    hist = Counter(str(t) for s in scenes for t in s.spec.anomaly_types if str(t) != "none")
    n_obj = sum(len(s.labels) for s in scenes)
    _say(f"wrote {len(scenes)} scenes ({n_obj} objects) to {args.out}")
    for name, count in sorted(hist.items()):
        _say(f"  {name:>13}: {count}")
    return EXIT_OK


def train_run(cfg, data_dir, out_dir, resume=None):
    encoder = Encoder(cfg.encoder)
    data = _load_data(data_dir, encoder)
    model = _model_for(cfg)
    records = fit(model, data, cfg.train, out_dir, resume=resume, meta=cfg.echo(), log_fn=_log_epoch)
    return model, records


def _log_epoch(rec):
    _say(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.4f}  bce {rec['bce']:.4f}  norm {rec['normality']:.4f}  lr {rec['lr']:.2e}")


def cmd_train(args):
    cfg = load_config(args.config)
    if not Path(args.data).is_dir():
        raise DatasetError(f"data directory not found: {args.data}")
    train_run(cfg, args.data, args.out, resume=args.resume)
    _say(f"checkpoint written to {Path(args.out) / 'final.ckpt'}")
    return EXIT_OK


def load_trained(ckpt):
    params, meta, _ = load_checkpoint(ckpt)
    if "config" not in meta:
        raise CheckpointError(f"{ckpt} carries no config echo")
    cfg = config_from_dict(meta["config"])
    model = _model_for(cfg)
    model.load_state_dict(params)
    return cfg, model


def object_sweep_data(cfg, encoder):
    """Fresh scenes with a fixed object count per bucket, from the eval seed."""
    out = {}
    for n in cfg.eval.object_counts:
        dcfg = copy.deepcopy(cfg.dataset)
        dcfg.n_objects = (n, n)
        dcfg.validate()
        out[n] = prepare_scenes(build_dataset(cfg.eval.object_sweep_seed + n, cfg.eval.scenes_per_count, dcfg), encoder)
    return out


def run_eval(cfg, model, data, sweep_v=False, sweep_o=False, with_bench=False):
    report = evaluate(model, data, cfg.eval.threshold)
    if sweep_v:
        report.sweep_views = sweep_views(model, data)
    if sweep_o:
        report.sweep_objects = sweep_object_count(model, object_sweep_data(cfg, Encoder(cfg.encoder)))
    if with_bench:
        report.bench = bench(model, data[0], cfg.eval.bench_repeats, cfg.eval.bench_warmup)
    report.config = cfg.to_dict()
    report.version = __version__
    return report


def cmd_eval(args):
    cfg, model = load_trained(args.ckpt)
    data = _load_data(args.data, Encoder(cfg.encoder))
    report = run_eval(cfg, model, data, args.sweep_views, args.sweep_objects, args.bench)
    _write_json(report.to_dict(), args.out)
    if args.plots:
        write_plots(report, Path(args.out).parent)
    _say(f"auc {report.auc:.4f}  accuracy {report.accuracy:.4f}  ({report.objects} objects)")
    return EXIT_OK


ABLATION_ROWS = (
    ("sparse_voxel_attn", {"kind": "sparse", "residual_enabled": False, "score_source": "context"}),
    ("context", {"kind": "dense", "residual_enabled": False, "score_source": "context"}),
    ("context_residual", {"kind": "dense", "residual_enabled": True, "score_source": "residual"}),
)


def ablation_config(cfg, head_overrides):
    d = cfg.to_dict()
    d["model"]["head"].update(head_overrides)
    d["train"]["residual_enabled"] = head_overrides["residual_enabled"]
    return config_from_dict(d)


def cmd_ablate(args):
    base = load_config(args.config)
    out = Path(args.out)
    test = _load_data(args.data_test, Encoder(base.encoder))
    rows = []
    for name, overrides in ABLATION_ROWS:
        cfg = ablation_config(base, overrides)
        _say(f"== {name}")
        model, _ = train_run(cfg, args.data_train, out / name)
        rep = run_eval(cfg, model, test, with_bench=True)
        rows.append(
            {
                "variant": name,
                "auc": rep.auc,
                "accuracy": rep.accuracy,
                "peak_forward_bytes": rep.bench["peak_forward_bytes"],
                "latency_ms_median": rep.bench["latency_ms_median"],
                "parameters": rep.bench["parameters"],
            }
        )
    table = {"rows": rows, **base.echo()}
    _write_json(table, out / "ablation.json")
    lines = ["| variant | AUC | Accuracy | peak fwd MB | latency ms | params |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(
            f"| {r['variant']} | {r['auc']:.4f} | {r['accuracy']:.4f} | {r['peak_forward_bytes'] / 2**20:.1f} "
            f"| {r['latency_ms_median']:.1f} | {r['parameters']} |"
        )
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    _say("\n".join(lines))
    return EXIT_OK


def _som_client(args):
    if args.client == "mock":
        return MockClient(default=args.mock_reply)
    if args.client == "replay":
        if not args.replay:
            raise ConfigError("--client replay needs --replay TRANSCRIPT")
        return ReplayClient(args.replay)
    return HttpChatClient()


def cmd_som_eval(args):
    cfg = load_config(args.config)
    client = _som_client(args)
    scenes = read_dataset(args.data)
    transcript = args.transcript or str(Path(args.out).with_suffix(".transcript.jsonl"))
    if args.client == "replay" and Path(transcript).resolve() == Path(args.replay).resolve():
        transcript = None
    report = evaluate_som(scenes, client, cfg.eval.som_seed, cfg.eval.som_concurrency, transcript)
    report.update(cfg.echo())
    _write_json(report, args.out)
    _say(f"accuracy {report['accuracy']:.4f}  ({report['objects']} objects, client {report['client']})")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="oddvox", description="Multi-view odd-one-out detection on lifted voxel features.")
    p.add_argument("--version", action="version", version=f"oddvox {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--sweep-views", action="store_true")
    e.add_argument("--sweep-objects", action="store_true")
    e.add_argument("--bench", action="store_true")
    e.add_argument("--plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare the three head variants")
    a.add_argument("--config")
    a.add_argument("--data-train", required=True)
    a.add_argument("--data-test", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("som-eval", help="run the Set-of-Mark chat-model baseline")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--client", choices=("mock", "http", "replay"), default="mock")
    s.add_argument("--out", required=True)
    s.add_argument("--transcript", help="where to record requests and replies")
    s.add_argument("--replay", help="transcript to answer from with --client replay")
    s.add_argument("--mock-reply", default="none", help="reply the mock client gives every scene")
    s.set_defaults(func=cmd_som_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(exc for exc, _ in _EXIT_FOR) as exc:
        code = next(c for e, c in _EXIT_FOR if isinstance(exc, e))
        print(f"oddvox {args.command}: error: {exc}", file=sys.stderr)
        return code
    except FloatingPointError as exc:
        print(f"oddvox {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
