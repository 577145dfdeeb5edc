"""Command-line entry point: ``zssmnet <subcommand> [options]``.

Exit status is 0 on success, 1 for invalid input (bad flags, config or
paths) and 2 when the work itself fails. Every subcommand writes its
artifacts and a ``run_config.cfg`` snapshot into its output directory.
"""
import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, parse_triple

LOG = sys.stderr


class UsageError(Exception):
    """Invalid invocation; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _info(msg):
    print(msg, file=LOG, flush=True)


# ------------------------------------------------------------ helpers

def _need_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _out_dir(path):
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"output path {p} exists and is not a directory")
    return p


def _snapshot(out, cfg, args):
    out.mkdir(parents=True, exist_ok=True)
    command = {k: (json.dumps(v) if not isinstance(v, str) else v)
               for k, v in sorted(vars(args).items()) if k not in ("func",)}
    command["version"] = __version__
    (out / "run_config.cfg").write_text(cfg.to_text(command))


def _workers(cfg, args):
    n = args.workers if getattr(args, "workers", None) else cfg.get("run", "workers")
    return max(1, int(n or os.cpu_count() or 1))


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _cases(manifest):
    from .volume import load_cases
    return load_cases(manifest)


def _patch(cfg):
    return cfg.get("finetune", "patch_dims")


# ------------------------------------------------------------ subcommands

def cmd_phantom(args, cfg):
    from .phantom import generate_dataset
    out = _out_dir(args.out)
    n, params = cfg.phantom()
    if args.n is not None:
        n = args.n
    if n < 1:
        raise UsageError("--n must be at least 1")

    def run():
        _snapshot(out, cfg, args)
        cases, manifest = generate_dataset(n, params, cfg.seed, out)
        _info(f"wrote {len(cases)} cases ({sum(c.label for c in cases)} positive) to {manifest}")
    return run


def _preprocess_one(job):
    from .volume import preprocess_case, save_case
    case, spacing, margin, target, out = job
    return save_case(preprocess_case(case, spacing, margin, target), out)


def cmd_preprocess(args, cfg):
    from .volume import write_manifest
    manifest = _need_file(args.manifest, "manifest")
    out = _out_dir(args.out)
    pp = cfg.section("preprocess")

    def run():
        _snapshot(out, cfg, args)
        cases = _cases(manifest)
        jobs = [(c, pp.get("spacing"), pp.get("margin_mm"), pp.get("target_dims"), out)
                for c in cases]
        entries = _map(_preprocess_one, jobs, _workers(cfg, args))
        write_manifest(out / "manifest.jsonl", entries)
        _info(f"preprocessed {len(entries)} cases into {out}")
    return run


def cmd_pretrain(args, cfg):
    from . import mesh
    from .train import pretrain, save_model
    manifest = _need_file(args.manifest, "manifest")
    out = _out_dir(args.out)
    pcfg = cfg.pretrain()
    mcfg = cfg.mesh()

    def run():
        _snapshot(out, cfg, args)
        cases = _cases(manifest)
        net = mesh.build(mcfg, seed=cfg.seed)
        res = pretrain(cases, net, pcfg, log_path=out / "pretrain_log.csv")
        save_model(out / "pretrain.zckpt", res.net, {"kind": "pretrain",
                   "pretrain": pcfg.to_dict()}, {"seed": cfg.seed, "epoch": res.stopped_epoch})
        _info(f"pre-trained {res.stopped_epoch + 1} epochs, final loss "
              f"{res.history[-1]['loss']:.5f}")
    return run


def cmd_finetune(args, cfg):
    from . import mesh
    from .train import check_patch, finetune_folds
    manifest = _need_file(args.manifest, "manifest")
    init = _need_file(args.init, "checkpoint") if args.init else None
    out = _out_dir(args.out)
    fcfg = cfg.finetune()
    mcfg = cfg.mesh()
    try:
        check_patch(mesh.build(mcfg, seed=0), fcfg.patch_dims)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def run():
        _snapshot(out, cfg, args)
        cases = _cases(manifest)
        results = finetune_folds(cases, lambda k: mesh.build(mcfg, seed=cfg.seed + k), fcfg,
                                 init=init, out_dir=out)
        for k, res in results:
            _info(f"fold {k}: final loss {res.history[-1]['loss']:.5f}")
    return run


def _infer_one(job):
    from .train import infer, load_model
    from .volume import save_volume
    case, model_paths, patch, out = job
    models = [load_model(p)[0] for p in model_paths]
    prob = infer(models, case, patch)
    name = f"{case.case_id}_prob.zvol"
    save_volume(prob, out / name)
    return {"case_id": case.case_id, "prob": name}


def cmd_infer(args, cfg):
    from .train import load_model
    manifest = _need_file(args.manifest, "manifest")
    models = [_need_file(m, "model") for m in args.models]
    out = _out_dir(args.out)
    for m in models:
        load_model(m)  # reject unreadable or incompatible checkpoints up front

    def run():
        _snapshot(out, cfg, args)
        cases = _cases(manifest)
        jobs = [(c, [str(m) for m in models], _patch(cfg), out) for c in cases]
        entries = _map(_infer_one, jobs, _workers(cfg, args))
        _write_jsonl(out / "probs.jsonl", entries)
        _info(f"wrote {len(entries)} probability maps to {out}")
    return run


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path, keys):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            r = json.loads(line)
            missing = set(keys) - set(r)
            if missing:
                raise UsageError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            rows.append(r)
    return rows


def _extract_one(job):
    from .detect import extract_lesions
    from .volume import Volume, load_volume, save_volume
    cid, path, params, out = job
    prob = load_volume(path)
    cands, det = extract_lesions(prob, params)
    name = f"{cid}_det.zvol"
    save_volume(Volume(det[None], prob.spacing), out / name)
    return cid, name, cands


def cmd_extract(args, cfg):
    from .detect import write_candidates
    index = _need_file(args.probs, "probability index")
    rows = _read_jsonl(index, ("case_id", "prob"))
    for r in rows:
        _need_file(index.parent / r["prob"], "probability map")
    out = _out_dir(args.out)
    params = cfg.extract()

    def run():
        _snapshot(out, cfg, args)
        jobs = [(r["case_id"], index.parent / r["prob"], params, out) for r in rows]
        results = _map(_extract_one, jobs, _workers(cfg, args))
        _write_jsonl(out / "detections.jsonl", [{"case_id": c, "det": n} for c, n, _ in results])
        write_candidates(out / "candidates.jsonl", {c: k for c, _, k in results})
        _info(f"extracted {sum(len(k) for _, _, k in results)} candidates from {len(rows)} cases")
    return run


def cmd_evaluate(args, cfg):
    from .detect import evaluate
    from .volume import load_volume, read_manifest
    index = _need_file(args.detections, "detection index")
    manifest = _need_file(args.manifest, "manifest")
    rows = _read_jsonl(index, ("case_id", "det"))
    entries = {e["case_id"]: e for e in read_manifest(manifest)}
    missing = [r["case_id"] for r in rows if r["case_id"] not in entries]
    if missing:
        raise UsageError(f"cases {missing[:3]} are not in the ground-truth manifest")
    out = _out_dir(args.out)
    iou = float(cfg.get("evaluate", "iou_min", 0.1))

    def run():
        _snapshot(out, cfg, args)
        dets, gts, labels = {}, {}, {}
        for r in rows:
            cid = r["case_id"]
            e = entries[cid]
            dets[cid] = load_volume(index.parent / r["det"])
            les = e.get("lesions")
            gts[cid] = load_volume(manifest.parent / les).data[0] > 0.5 if les else None
            labels[cid] = bool(e["label"])
        report = evaluate(dets, gts, labels, iou, cfg.extract())
        (out / "report.json").write_text(report.to_json())
        report.write_curves(out)
        print(report.summary_line(), flush=True)
    return run


def cmd_postprocess_zones(args, cfg):
    from .volume import ZonalMask, load_volume, save_volume
    from .zonal import postprocess
    src = _need_file(args.mask, "zonal mask")
    out = Path(args.out)
    if out.exists() and out.is_dir():
        raise UsageError(f"output {out} is a directory; give a file path")

    def run():
        mask = ZonalMask.from_volume(load_volume(src))
        cleaned = postprocess(mask, args.fov)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_volume(cleaned.to_volume(), out)
        _snapshot(out.parent, cfg, args)
        _info(f"kept {int((cleaned.labels > 0).sum())} of {int((mask.labels > 0).sum())} voxels")
    return run


def cmd_corrupt_preview(args, cfg):
    from .ssl import corrupt, sample_recipe, sample_subvolumes
    from .volume import Volume, save_volume
    manifest = _need_file(args.manifest, "manifest")
    out = _out_dir(args.out)
    pcfg = cfg.pretrain()

    def run():
        _snapshot(out, cfg, args)
        cases = _cases(manifest)
        if args.case:
            cases = [c for c in cases if c.case_id == args.case]
            if not cases:
                raise UsageError(f"case {args.case} not in manifest")
        case = cases[0]
        svs = sample_subvolumes(case, args.count, pcfg.subvolume_dims, seed=cfg.seed)
        for k, sv in enumerate(svs):
            recipe = sample_recipe(pcfg.probs, cfg.seed * 1000 + k, pcfg.subvolume_dims)
            after = corrupt(sv, recipe)
            save_volume(Volume(sv.data, case.spacing), out / f"{case.case_id}_{k}_before.zvol")
            save_volume(Volume(after.data, case.spacing), out / f"{case.case_id}_{k}_after.zvol")
            rec = dict(recipe.to_dict(), origin=list(sv.origin), case_id=case.case_id)
            (out / f"{case.case_id}_{k}_recipe.json").write_text(
                json.dumps(rec, sort_keys=True, indent=1))
        _info(f"wrote {len(svs)} before/after pairs to {out}")
    return run


def cmd_gradcheck(args, cfg):
    from . import mesh
    from .nn.autograd import Node
    from .nn.gradcheck import grad_check
    from .nn.losses import loss_mse
    dims = parse_triple(args.input) if args.input else (8, 16, 16)

    def run():
        t0 = time.time()
        mcfg = mesh.MeshConfig(grid=args.grid, base_filters=args.base, growth=args.growth)
        net = mesh.build(mcfg, seed=args.seed, dtype=np.float64)
        rng = np.random.default_rng(args.seed)
        x = Node(rng.standard_normal((1, mcfg.in_channels) + tuple(dims)), requires_grad=True)
        target = rng.random((1, mcfg.n_classes) + tuple(dims))

        def loss():
            final, aux = mesh.forward(net, x)
            return loss_mse(final, target)

        err = grad_check(loss, [x] + net.parameters(), eps=args.eps,
                         samples_per_leaf=args.samples, seed=args.seed)
        ok = err <= args.tol
        print(f"max relative error {err:.3e} over grid {args.grid} "
              f"({'ok' if ok else 'FAILED'}, tol {args.tol:g}, {time.time() - t0:.1f}s)")
        if not ok:
            raise RuntimeError("gradient check failed")
    return run


# ------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="zssmnet", description="Zonal-aware mesh network pipeline on bpMRI volumes.")
    p.add_argument("--version", action="version", version=f"zssmnet {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="<command>")

    def add(name, func, help_text):
        s = sub.add_parser(name, help=help_text, description=help_text)
        s.add_argument("--preset", default="desk", help="base preset: desk or paper")
        s.add_argument("--config", help="config file layered over the preset")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        s.add_argument("--seed", type=int, help="overrides run.seed")
        s.set_defaults(func=func)
        return s

    s = add("phantom", cmd_phantom, "generate a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, help="number of cases (default: phantom.n_cases)")

    s = add("preprocess", cmd_preprocess, "resample, ROI-crop and pad cases")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)

    s = add("pretrain", cmd_pretrain, "self-supervised restoration pre-training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)

    s = add("finetune", cmd_finetune, "supervised fine-tuning, one model per fold")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="pre-training checkpoint (default: random initialization)")

    s = add("infer", cmd_infer, "ensemble sliding-window inference")
    s.add_argument("--manifest", required=True)
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)

    s = add("extract", cmd_extract, "lesion candidates and detection maps")
    s.add_argument("--probs", required=True, help="probs.jsonl written by infer")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)

    s = add("evaluate", cmd_evaluate, "AP, AUROC and ranking score")
    s.add_argument("--detections", required=True, help="detections.jsonl written by extract")
    s.add_argument("--manifest", required=True, help="ground-truth manifest")
    s.add_argument("--out", required=True)

    s = add("postprocess-zones", cmd_postprocess_zones, "clean a zonal segmentation")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fov", choices=("normal", "large"),
                   help="field-of-view class (default: from physical extent)")

    s = add("corrupt-preview", cmd_corrupt_preview, "write corrupted sub-volume examples")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--case")
    s.add_argument("--count", type=int, default=4)

    s = add("gradcheck", cmd_gradcheck, "finite-difference check of a whole mesh")
    s.add_argument("--grid", type=int, default=3)
    s.add_argument("--base", type=int, default=2)
    s.add_argument("--growth", type=int, default=1)
    s.add_argument("--input", help="input dims, in-plane first (default 16x16x8)")
    s.add_argument("--samples", type=int, default=4, help="coordinates checked per leaf")
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--eps", type=float, default=1e-6, help="finite-difference step")
    return p


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            raise UsageError("zssmnet: error: a subcommand is required")
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        cfg = load_config(args.preset, args.config, overrides)
        work = args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"zssmnet: invalid input: {exc}", file=sys.stderr)
        return 1
    try:
        work()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any failure of the work itself
        print(f"zssmnet {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
