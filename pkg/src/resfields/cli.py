"""Command-line entry point: ``resfields <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import data, gradcheck, metrics, tasks
from .io import RunConfig, load_checkpoint, load_config, save_checkpoint
from .models import FlowHead, ResFieldSpec, build_relu_pe, build_siren, formula_param_count
from .resfield import FACTORIZATIONS

log = logging.getLogger("resfields")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(s):
    s = s.strip()
    if s in ("", "none"):
        return []
    return [int(p) for p in s.split(",")]


def _factors(s):
    if s is None or s.endswith("%"):
        return s
    return int(s)


# flag dest -> (section, field)
OVERRIDES = {
    "task": (None, "task"),
    "seed": (None, "seed"),
    "out": (None, "out_dir"),
    "arch": ("model", "arch"),
    "width": ("model", "width"),
    "depth": ("model", "depth"),
    "omega0": ("model", "omega0"),
    "resfields": ("model", "resfield_layers"),
    "factorization": ("model", "factorization"),
    "mode": ("model", "mode"),
    "rank": ("model", "rank"),
    "factors": ("model", "factors"),
    "chunks": ("model", "n_chunks"),
    "chunk_policy": ("model", "chunk_policy"),
    "head": ("model", "head"),
    "data_seed": ("data", "seed"),
    "frames": ("data", "frames"),
    "img_height": ("data", "height"),
    "img_width": ("data", "width"),
    "segments": ("data", "segments"),
    "holdout": ("data", "holdout"),
    "points": ("data", "points"),
    "n_per_frame": ("data", "n_per_frame"),
    "grid": ("data", "grid"),
    "frame_dir": ("data", "frame_dir"),
    "iterations": ("optim", "iterations"),
    "batch_size": ("optim", "batch_size"),
    "frames_per_batch": ("optim", "frames_per_batch"),
    "lr": ("optim", "lr"),
    "lr_min": ("optim", "lr_min"),
}


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--task", choices=["video", "sdf", "flow"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--arch", choices=["siren", "relu_pe"])
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--omega0", type=float)
    p.add_argument("--resfields", type=_int_list, help="comma-separated layer indices")
    p.add_argument("--factorization", choices=sorted(FACTORIZATIONS))
    p.add_argument("--mode", choices=["residual", "direct", "modulated", "output"])
    p.add_argument("--rank", type=int)
    p.add_argument("--factors", type=_factors, help="factor count or percentage of frames")
    p.add_argument("--chunks", type=int)
    p.add_argument("--chunk-policy", choices=["shared", "residual", "both"])
    p.add_argument("--head", choices=["offset", "se3", "dct"])
    p.add_argument("--data-seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--img-height", type=int)
    p.add_argument("--img-width", type=int)
    p.add_argument("--segments", type=int)
    p.add_argument("--holdout", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--n-per-frame", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--frame-dir")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--frames-per-batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-min", type=float)


def resolve_config(args) -> RunConfig:
    """JSON config (if any) with command-line flags and ``RESFIELDS_SEED`` on top."""
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        base = load_config(args.config).to_dict()
    else:
        base = RunConfig().to_dict()
    for dest, (section, key) in OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        (base if section is None else base[section])[key] = v
    env = os.environ.get("RESFIELDS_SEED")
    if env is not None:
        base["seed"] = int(env)
    if base["task"] == "flow" and base["model"]["arch"] == "siren" and not (
        args.config or args.arch
    ):
        base["model"]["arch"] = "relu_pe"
    return RunConfig.from_dict(base)


# -- task plumbing ---------------------------------------------------------


def make_dataset(cfg: RunConfig):
    d = cfg.data
    if cfg.task == "video":
        if d.frame_dir:
            return data.load_frame_directory(d.frame_dir, d.holdout, d.seed)
        return data.gen_video(d.seed, d.frames, d.height, d.width, d.segments, d.holdout)
    if cfg.task == "sdf":
        return data.TemporalSdfScene.default(d.frames)
    return data.gen_flow(d.seed, d.frames, d.points)


def estimator_params(cfg: RunConfig):
    m, o = cfg.model, cfg.optim
    kw = dict(
        width=m.width, depth=m.depth, resfield_layers=tuple(m.resfield_layers),
        factorization=m.factorization, rank=m.rank, n_factors=m.factors, mode=m.mode,
        n_chunks=m.n_chunks, chunk_policy=m.chunk_policy, iterations=o.iterations,
        batch_size=o.batch_size, frames_per_batch=o.frames_per_batch, lr=o.lr, lr_min=o.lr_min,
        seed=cfg.seed,
    )
    if cfg.task == "flow":
        kw.update(head=m.head, n_basis=m.n_basis)
    else:
        kw.update(omega0=m.omega0)
    return kw


def run_task(cfg: RunConfig, ds=None, **extra):
    ds = ds if ds is not None else make_dataset(cfg)
    kw = {**estimator_params(cfg), **extra}
    if cfg.task == "video":
        return tasks.run_video(ds, **kw)
    if cfg.task == "sdf":
        frames = sorted({0, ds.n_frames // 2, ds.n_frames - 1})
        return tasks.run_sdf(ds, cfg.data.n_per_frame, frames, cfg.data.grid,
                             data_seed=cfg.data.seed, **kw)
    return tasks.run_flow(ds, **kw)


def _scalars(result):
    return {k: v for k, v in result.items() if isinstance(v, (int, float, np.floating))}


# -- subcommands -----------------------------------------------------------


def cmd_train(args):
    cfg = resolve_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    res = run_task(cfg, metrics_path=os.path.join(cfg.out_dir, "metrics.csv"))
    est = res["estimator"]
    save_checkpoint(os.path.join(cfg.out_dir, "model.rfck"), est.model_, est.model_.optimizer,
                    cfg.optim.iterations, run_config=cfg.to_dict())
    summary = _scalars(res)
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _checkpoint_config(ck):
    run = ck.config.get("run")
    if run is None:
        raise UsageError("checkpoint carries no run configuration")
    return RunConfig.from_dict(run)


def cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ck = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ck)
    model = ck.model()
    ds = make_dataset(cfg)
    out = {}
    if cfg.task == "video":
        for split in ("train", "test"):
            X, y = ds.arrays(split)
            if len(X):
                out[f"{split}_psnr"] = metrics.psnr(model(X), y)
    elif cfg.task == "sdf":
        G = cfg.data.grid
        for f in sorted({0, ds.n_frames // 2, ds.n_frames - 1}):
            t = data.frame_times(ds.n_frames)[f]
            mesh = metrics.marching_cubes(_grid_eval(model, t, G))
            gp = ds.sample_surface(np.random.default_rng(1000 + f), 30000, t)
            m = metrics.mesh_metrics(mesh, gp, ds.normals(gp, t), seed=f)
            out[f"frame{f}_chamfer"] = m["chamfer"]
            out[f"frame{f}_nc"] = m["nc"]
    else:
        from .estimator import FlowObjective

        obj = FlowObjective(FlowHead(**model.meta["head"]), ds.n_frames)
        for split in ("train", "test"):
            X, y = ds.arrays(split)
            pred = obj.predict(model, X)
            fr = obj.frames(X)
            vf, vb = fr < ds.n_frames - 1, fr > 0
            out[f"{split}_fwd"] = 1e3 * float(np.mean(np.abs(pred[vf, :3] - y[vf, :3])))
            out[f"{split}_bwd"] = 1e3 * float(np.mean(np.abs(pred[vb, 3:] - y[vb, 3:])))
    print(json.dumps(out, sort_keys=True))
    return 0


def _grid_eval(model, t, G):
    pts = metrics.grid_points(G)
    X = np.column_stack([np.full(len(pts), 2 * t - 1), pts])
    return model(X)[:, 0].reshape(G, G, G)


ABLATE_FIELDS = ["variant", "rank", "params", "train_metric", "test_metric", "wall_seconds"]


def ablation_grid(kind):
    """``(variant, overrides)`` cells of the factorization or layers-vs-rank grid."""
    if kind == "factorization":
        cells = [("none", dict(resfield_layers=[]), 0)]
        for tag, rank in [("cp", 10), ("tucker", 10), ("lowrank", 10), ("matrix", 10),
                          ("dictionary", 0), ("loe", 0), ("hypernet", 0)]:
            cells.append((tag, dict(factorization=tag, rank=max(rank, 1)), rank))
        return cells
    if kind == "layers-rank":
        cells = []
        for layers in ([1], [1, 2], [1, 2, 3], [0, 1, 2, 3, 4]):
            for rank in (1, 5, 10, 20):
                name = "layers" + "".join(str(i) for i in layers)
                cells.append((name, dict(resfield_layers=layers, rank=rank), rank))
        return cells
    raise UsageError(f"unknown grid {kind!r}")


def cmd_ablate(args):
    cfg = resolve_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = args.csv or os.path.join(cfg.out_dir, f"ablate_{args.ablation}.csv")
    ds = make_dataset(cfg)
    rows = []
    for variant, over, rank in ablation_grid(args.ablation):
        c = cfg.to_dict()
        c["model"].update(over)
        cell = RunConfig.from_dict(c)
        t0 = time.perf_counter()
        res = run_task(cell, ds)
        wall = time.perf_counter() - t0
        if cfg.task == "video":
            tr, te = res["train_psnr"], res["test_psnr"]
        elif cfg.task == "sdf":
            tr, te = float("nan"), res["chamfer"]
        else:
            tr = 0.5 * (res["train_fwd"] + res["train_bwd"])
            te = 0.5 * (res["test_fwd"] + res["test_bwd"])
        rows.append(dict(variant=variant, rank=rank, params=res["params"], train_metric=tr,
                         test_metric=te, wall_seconds=wall))
        log.info("%s rank=%s test=%.4g", variant, rank, te)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_FIELDS)
        w.writeheader()
        w.writerows(rows)
    print(path)
    return 0


def cmd_grad_check(args):
    seeds = range(args.seeds)
    results = gradcheck.run_suite(seeds, include_heads=args.all)
    if not args.all:
        results = [r for r in results if r.name.startswith("resfield-lowrank")]
    ok = True
    for name, err, passed in gradcheck.summarize(results, args.tol):
        print(f"{'PASS' if passed else 'FAIL'} {name:32s} max_rel_err={err:.3e}")
        ok &= passed
    return 0 if ok else 1


def cmd_gen_data(args):
    cfg = resolve_config(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    ds = make_dataset(cfg)
    if cfg.task == "video":
        for f, img in enumerate(ds.frames):
            data.write_ppm(os.path.join(out, f"frame_{f:05d}.ppm"), img)
        np.save(os.path.join(out, "test_mask.npy"), ds.test_mask)
    elif cfg.task == "sdf":
        X, y = data.sdf_training_set(ds, cfg.data.n_per_frame, cfg.data.seed)
        np.savez(os.path.join(out, "sdf_samples.npz"), X=X, y=y)
        G = cfg.data.grid
        pts = metrics.grid_points(G)
        for f, t in enumerate(data.frame_times(ds.n_frames)):
            mesh = metrics.marching_cubes(ds.sdf(pts, t).reshape(G, G, G))
            metrics.write_obj(os.path.join(out, f"mesh_{f:05d}.obj"), mesh)
    else:
        np.savez(os.path.join(out, "flow.npz"), positions=ds.positions,
                 train_idx=ds.train_idx, test_idx=ds.test_idx)
    print(out)
    return 0


def cmd_export(args):
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ck = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ck)
    model = ck.model()
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    d = cfg.data
    if cfg.task == "video":
        ds = data.VideoDataset(np.zeros((d.frames, d.height, d.width, 3)),
                               np.zeros((d.frames, d.height, d.width), dtype=bool))
        X = ds.coords_for(np.arange(d.frames * d.height * d.width))
        frames = np.clip(model(X), 0, 1).reshape(d.frames, d.height, d.width, 3)
        for f, img in enumerate(frames):
            data.write_ppm(os.path.join(out, f"frame_{f:05d}.ppm"), img)
    elif cfg.task == "sdf":
        for f, t in enumerate(data.frame_times(d.frames)):
            mesh = metrics.marching_cubes(_grid_eval(model, t, d.grid))
            metrics.write_obj(os.path.join(out, f"mesh_{f:05d}.obj"), mesh)
    else:
        raise UsageError("export supports video and sdf checkpoints")
    print(out)
    return 0


def param_table(arch, width, depth, in_dim, out_dim, layers, rank, factors, tags, mode=None):
    rows = []
    kw = dict(initialize=False)
    base = _build(arch, width, depth, in_dim, out_dim, None, kw)
    rows.append(("none", formula_param_count(base.meta), base.num_parameters()))
    for tag in tags:
        spec = ResFieldSpec(layers=tuple(layers), factorization=tag, rank=rank,
                            n_factors=factors, mode=mode if tag in ("dictionary", "loe") else None)
        m = _build(arch, width, depth, in_dim, out_dim, spec, kw)
        rows.append((tag, formula_param_count(m.meta), m.num_parameters()))
        del m
    return rows


def _build(arch, width, depth, in_dim, out_dim, spec, kw):
    if arch == "siren":
        return build_siren(width, depth, in_dim, out_dim, spec, **kw)
    return build_relu_pe(width, depth, resfield=spec, space_dim=in_dim - 1, **kw)


def cmd_params(args):
    tags = sorted(FACTORIZATIONS) if args.factorization == "all" else [args.factorization]
    factors = args.factors if isinstance(args.factors, int) else None
    if factors is None:
        from .estimator import resolve_factors

        factors = resolve_factors(args.factors, args.frames)
    rows = param_table(args.arch, args.width, args.depth, args.in_dim, args.out_dim,
                       args.resfields, args.rank, factors, tags, args.mode)
    print(f"{'variant':12s} {'formula':>14s} {'allocated':>14s} {'millions':>9s}")
    for tag, f, a in rows:
        print(f"{tag:12s} {f:14d} {a:14d} {a / 1e6:8.2f}M")
    return 0 if all(f == a for _, f, a in rows) else 1


def build_parser():
    p = _Parser(prog="resfields", description="Temporal neural fields with residual layers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    for name, fn, helptext in [
        ("train", cmd_train, "fit a field and write checkpoint + metrics"),
        ("ablate", cmd_ablate, "run an ablation grid and write a comparison CSV"),
        ("gen-data", cmd_gen_data, "write the synthetic dataset for a task"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        _add_run_flags(sp)
        sp.set_defaults(fn=fn)
        if name == "ablate":
            sp.add_argument("--ablation", choices=["factorization", "layers-rank"],
                            default="factorization", help="which grid to run")
            sp.add_argument("--csv", help="output CSV path")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on its task data")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export", help="render frames (PPM) or meshes (OBJ) from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_export)

    sp = sub.add_parser("grad-check", help="finite-difference check of all backward passes")
    sp.add_argument("--all", action="store_true", help="every factorization, mode and head")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_grad_check)

    sp = sub.add_parser("params", help="parameter-count table")
    sp.add_argument("--arch", choices=["siren", "relu_pe"], default="siren")
    sp.add_argument("--width", type=int, default=512)
    sp.add_argument("--depth", type=int, default=5)
    sp.add_argument("--in-dim", type=int, default=3)
    sp.add_argument("--out-dim", type=int, default=3)
    sp.add_argument("--resfields", type=_int_list, default=[1, 2, 3])
    sp.add_argument("--rank", type=int, default=10)
    sp.add_argument("--factors", type=_factors, default=300)
    sp.add_argument("--frames", type=int, default=300, help="frame count for percentage factors")
    sp.add_argument("--factorization", default="lowrank",
                    choices=["all"] + sorted(FACTORIZATIONS))
    sp.add_argument("--mode", choices=["residual", "direct"])
    sp.set_defaults(fn=cmd_params)
    return p


def _limit_threads():
    n = os.environ.get("RESFIELDS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"resfields {args.cmd}: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        print(f"resfields {args.cmd}: error: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
