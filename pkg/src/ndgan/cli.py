"""Command-line interface.

Subcommands cover the whole compression workflow: pretrain a teacher,
inspect pruning choices, run the distillation, evaluate checkpoints, read
back diagnostics from a finished (or crashed) run directory, and render
plots.  Exit codes: 0 success, 2 bad configuration or inputs, 3 run
diverged or was aborted mid-training.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import kernels as kernels_mod
from . import metrics as metrics_mod
from . import nets as nets_mod
from .errors import NdganError, NumericError
from .losses import LossWeights, METHODS
from .train import TrainConfig, RunResult, distill, equilibrium_drift, read_jsonl, train_teacher

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

MANIFEST_SCHEMA = "experiment.v1"


class ExperimentManifest:
    """Run-directory marker written before work starts and finalized after.

    A directory holding a manifest whose status is still "running" belongs to
    a crashed or in-flight run; tooling can tell those apart from finished
    ones without parsing logs.
    """

    def __init__(self, run_dir: str, command: str, argv: list[str]):
        self.path = os.path.join(run_dir, "experiment.json")
        self.body = {
            "schema": MANIFEST_SCHEMA,
            "command": command,
            "argv": argv,
            "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "status": "running",
        }

    def _write(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.body, fh, indent=2)
        os.replace(tmp, self.path)

    def start(self) -> None:
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        self._write()

    def finalize(self, status: str, **extra) -> None:
        self.body["status"] = status
        self.body["finished_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.body.update(extra)
        self._write()


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for name in ("seed", "steps", "method", "dataset", "batch_size", "eval_every"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "target", None) is not None:
        overrides["compression_target"] = args.target
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _result_exit(result: RunResult) -> int:
    return EXIT_OK if result.status == "completed" else EXIT_DIVERGED


def _print_json(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    g_spec = nets_mod.generator_spec(cfg.resolution, cfg.base_channels, cfg.latent_dim)
    d_spec = nets_mod.discriminator_spec(cfg.resolution, cfg.base_channels)
    if args.dry_run:
        _print_json(
            {
                "config": cfg.to_dict(),
                "generator": {"params": nets_mod.count_cost(g_spec).params, "flops": nets_mod.count_cost(g_spec).flops},
                "discriminator": {"params": nets_mod.count_cost(d_spec).params, "flops": nets_mod.count_cost(d_spec).flops},
                "out": args.out,
            }
        )
        return EXIT_OK
    manifest = ExperimentManifest(args.out, "train-teacher", sys.argv[1:])
    manifest.start()
    result = train_teacher(cfg, args.out, resume=args.resume)
    manifest.finalize(result.status, best_fid=result.best_fid)
    _print_json(result.as_dict())
    return _result_exit(result)


def cmd_prune(args) -> int:
    ckpt = nets_mod.load_checkpoint(args.teacher)
    t_spec = ckpt.spec("generator")
    s_spec = nets_mod.prune_spec(t_spec, args.target, tolerance=args.tolerance)
    cost = nets_mod.count_cost(s_spec, reference=t_spec)
    t_cost = nets_mod.count_cost(t_spec)
    summary = {
        "teacher": {"params": t_cost.params, "flops": t_cost.flops},
        "student": {"params": cost.params, "flops": cost.flops},
        "channel_multiplier": s_spec.channel_multiplier,
        "compression_rate": cost.compression_rate,
        "target": args.target,
    }
    if args.out:
        s_spec.save(args.out)
        summary["spec"] = args.out
    _print_json(summary)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        ckpt = nets_mod.load_checkpoint(args.teacher)
        t_spec = ckpt.spec("generator")
        s_spec = (
            nets_mod.prune_spec(t_spec, cfg.compression_target, tolerance=cfg.prune_tolerance)
            if cfg.compression_target > 0
            else t_spec
        )
        cost = nets_mod.count_cost(s_spec, reference=t_spec)
        _print_json(
            {
                "config": cfg.to_dict(),
                "weights": dataclasses.asdict(LossWeights.for_method(cfg.method, **dataclasses.asdict(cfg.weights))),
                "student": {"params": cost.params, "flops": cost.flops},
                "compression_rate": cost.compression_rate,
                "out": args.out,
            }
        )
        return EXIT_OK
    manifest = ExperimentManifest(args.out, "distill", sys.argv[1:])
    manifest.start()
    result = distill(cfg, args.teacher, args.out, resume=args.resume)
    manifest.finalize(result.status, best_fid=result.best_fid, compression=result.compression)
    _print_json(result.as_dict())
    return _result_exit(result)


def cmd_evaluate(args) -> int:
    ckpt = nets_mod.load_checkpoint(args.checkpoint)
    gen = ckpt.build(args.component)
    dataset = data_mod.open_dataset(args.against, gen.spec.resolution)
    kernel = kernels_mod.metrics_kernel(gen.spec.resolution)
    report = metrics_mod.evaluate_pair(kernel, dataset, gen, n_samples=args.samples, seed=args.seed)
    body = report.as_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
    _print_json(body)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    out = {}
    result_path = os.path.join(args.run, "result.json")
    if os.path.exists(result_path):
        with open(result_path) as fh:
            out["result"] = json.load(fh)
    stability_path = os.path.join(args.run, "stability.jsonl")
    if os.path.exists(stability_path):
        records = read_jsonl(stability_path)
        fake = [r["fake_logit_mean"] for r in records]
        out["stability"] = {
            "records": len(records),
            "equilibrium_drift": equilibrium_drift(fake),
            "last_real_logit": records[-1]["real_logit_mean"] if records else None,
            "last_fake_logit": records[-1]["fake_logit_mean"] if records else None,
        }
    losses_path = os.path.join(args.run, "losses.jsonl")
    if os.path.exists(losses_path):
        fids = sorted(r["eval_fid"] for r in read_jsonl(losses_path) if "eval_fid" in r)
        out["evals"] = {"count": len(fids), "best_fid": fids[0] if fids else None}
        if args.summarize and fids:
            out["evals"]["summary_fid"] = float(np.mean(fids[:5]))
    if not out:
        print(f"no run artifacts found under {args.run}", file=sys.stderr)
        return EXIT_CONFIG
    _print_json(out)
    return EXIT_OK


def _plot_losses(rows: list[dict], ax) -> None:
    for key in ("total", "g_loss", "ds_loss", "eval_fid"):
        pts = [(r["step"], r[key]) for r in rows if key in r]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=key)
    ax.set_xlabel("step")
    ax.legend()


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    if args.kind == "losses":
        _plot_losses(read_jsonl(os.path.join(args.run, "losses.jsonl")), ax)
        ax.set_title("training losses")
    elif args.kind == "stability":
        rows = read_jsonl(os.path.join(args.run, "stability.jsonl"))
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["real_logit_mean"] for r in rows], label="real logit")
        ax.plot(steps, [r["fake_logit_mean"] for r in rows], label="fake logit")
        ax.axhline(0.0, color="k", lw=0.5)
        ax.set_xlabel("step")
        ax.set_title("discriminator operating point (0 = equilibrium)")
        ax.legend()
    elif args.kind == "samples":
        ckpt = nets_mod.load_checkpoint(os.path.join(args.run, "ckpt-final"))
        gen = ckpt.build("generator")
        with_grid = int(args.grid)
        z = data_mod.sample_latents(gen.latent_dim, with_grid * with_grid, args.seed, "plot-samples")
        import torch

        with torch.no_grad():
            imgs = data_mod.denormalize_images(gen(z))
        tiles = imgs.transpose(0, 2, 3, 1).reshape(with_grid, with_grid, imgs.shape[2], imgs.shape[3], 3)
        mosaic = np.concatenate(np.concatenate(tiles, axis=1), axis=1)
        ax.imshow(mosaic)
        ax.set_axis_off()
    fig.savefig(args.out, dpi=120, bbox_inches="tight")
    plt.close(fig)
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ndgan", description="GAN compression by dual distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
        p.add_argument("--dataset", default=None, help='e.g. "mixture:8" or an image folder')
        p.add_argument("--resume", action="store_true")
        p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("train-teacher", help="adversarially pretrain the teacher pair")
    add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("prune", help="derive a pruned student architecture from a teacher")
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--target", type=float, required=True, help="compression rate in [0, 1)")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--out", help="write the student spec JSON here")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("distill", help="compress a teacher into a student generator")
    add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--target", type=float, default=None, help="compression rate override")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="score a checkpointed generator against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--component", default="generator")
    p.add_argument("--against", default="mixture:8", help="dataset to compare with")
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the metric report JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="summarize logs and stability of a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--summarize", action="store_true", help="add the mean of the 5 lowest eval FIDs")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("plot", help="render loss, stability, or sample plots")
    p.add_argument("--run", required=True)
    p.add_argument("--kind", choices=("losses", "stability", "samples"), default="losses")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=6, help="sample grid side length")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NdganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
