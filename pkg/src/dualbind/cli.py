"""Command-line interface.

Subcommands cover the whole desk workflow: synth -> split -> train -> eval,
plus predict, bench and inspect.  Heavy modules are imported only after the
thread-count environment is settled, so DUALBIND_NUM_THREADS can still take
effect on the numerics libraries.

Exit codes: 0 success, 1 data/runtime failure, 2 usage error.
"""

import argparse
import datetime
import hashlib
import json
import os
import sys

from . import __version__

THREADS_ENV = "DUALBIND_NUM_THREADS"
_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env():
    want = os.environ.get(THREADS_ENV)
    if not want:
        return
    if not want.isdigit() or int(want) < 1:
        print(f"dualbind: {THREADS_ENV} must be a positive integer, got {want!r}",
              file=sys.stderr)
        raise SystemExit(2)
    for var in _THREAD_VARS:
        os.environ.setdefault(var, want)


def _build_parser():
    p = argparse.ArgumentParser(
        prog="dualbind",
        description="Energy-based protein-ligand affinity model (train, eval, tools).",
    )
    p.add_argument("--version", action="version", version=f"dualbind {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic complex dataset")
    sp.add_argument("--out", required=True, help="output JSONL path")
    sp.add_argument("--n-complexes", "--n", dest="n", type=int, default=200,
                    help="number of complexes")
    sp.add_argument("--ligands", type=int, default=None,
                    help="distinct ligands (default: one per 4 complexes)")
    sp.add_argument("--pocket-residues", type=int, default=10)
    sp.add_argument("--ligand-atoms", type=int, nargs=2, default=(6, 14),
                    metavar=("MIN", "MAX"))
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("split", help="ligand-identity split into train/val/test")
    sp.add_argument("--data", required=True, help="input JSONL dataset")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--fractions", nargs="+", default=["0.7", "0.15", "0.15"],
                    help="three train/val/test fractions, space or comma separated")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--prefix", default="data")

    sp = sub.add_parser("train", help="fit the energy model")
    sp.add_argument("--train", required=True, dest="train_data", help="train JSONL")
    sp.add_argument("--val", dest="val_data", help="validation JSONL")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--config", default="desk",
                    help="model config: desk, paper, or a JSON file")
    sp.add_argument("--train-config", default="desk",
                    help="schedule: desk, paper, or a JSON file")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lr-decay", type=float)
    sp.add_argument("--lambda", type=float, dest="lam",
                    help="denoising loss weight")
    sp.add_argument("--sigma-min", type=float)
    sp.add_argument("--sigma-max", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cap", type=float, default=None,
                    help="label cap threshold (default -3.0)")
    sp.add_argument("--no-cap", action="store_true", help="skip label capping")
    sp.add_argument("--ligand-only", action="store_true",
                    help="train the protein-free ablation")
    sp.add_argument("--resume", help="directory (or checkpoint file) to continue from")

    for name, hlp in (("eval", "score a dataset against its labels"),
                      ("predict", "write predictions for a dataset")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--checkpoint", "--ckpt", required=True,
                        help="checkpoint file, or a train --out-dir")
        if name == "eval":
            sp.add_argument("--out-dir", required=True)
        else:
            sp.add_argument("--out", help="output CSV (default: stdout)")
        sp.add_argument("--cap", type=float, default=None)
        sp.add_argument("--no-cap", action="store_true")
        sp.add_argument("--ligand-only", action="store_true",
                        help="force the ligand-only energy path")

    sp = sub.add_parser("bench", help="per-complex inference latency")
    sp.add_argument("--data", help="JSONL complexes (default: a synthetic batch)")
    sp.add_argument("--checkpoint", "--ckpt", help="use trained weights")
    sp.add_argument("--config", default="desk",
                    help="model config when no checkpoint is given")
    sp.add_argument("--n", type=int, default=16, help="synthetic complexes if no --data")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--batch-sizes", default=None,
                    help="comma-separated group sizes for clock granularity "
                         "(the forward path is per-complex regardless)")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("inspect", help="describe a dataset or checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--json", action="store_true", dest="as_json")
    return p


def _model_config(spec):
    from . import model

    if spec == "desk":
        return model.desk_config()
    if spec == "paper":
        return model.paper_config()
    with open(spec) as fh:
        return model.ModelConfig(**json.load(fh))


def _train_config(spec, args):
    import dataclasses

    from . import train

    if spec == "desk":
        base = train.desk_train_config()
    elif spec == "paper":
        base = train.paper_train_config()
    else:
        with open(spec) as fh:
            base = train.TrainConfig(**json.load(fh))
    overrides = {}
    for field in ("epochs", "batch_size", "lr", "lr_decay", "lam",
                  "sigma_min", "sigma_max", "seed"):
        v = getattr(args, field)
        if v is not None:
            overrides[field] = v
    if args.no_cap:
        overrides["cap"] = None
    elif args.cap is not None:
        overrides["cap"] = args.cap
    return dataclasses.replace(base, **overrides) if overrides else base


def _load_records(path, cap, no_cap):
    from . import data

    records = data.load_dataset(path)
    if no_cap:
        return records
    return data.cap_labels(records, data.CAP_THRESHOLD if cap is None else cap)


def _resolve_checkpoint(path):
    """Accept a checkpoint file or a training output directory.

    Returns (checkpoint, resolved file path); a directory resolves to its
    best.ckpt when present, else last.ckpt.
    """
    from . import train

    if os.path.isdir(path):
        for name in ("best.ckpt", "last.ckpt"):
            cand = os.path.join(path, name)
            if os.path.exists(cand):
                return train.load_checkpoint(cand), cand
        raise train.CheckpointError(f"{path}: no best.ckpt or last.ckpt in directory")
    return train.load_checkpoint(path), path


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir, command, payload, inputs=(), outputs=()):
    """Drop run_manifest.json next to a command's outputs (atomically)."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "tool": "dualbind",
        "version": __version__,
        "command": command,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "input_sha256": {str(p): _sha256(p) for p in inputs if p},
        "output_sha256": {os.path.basename(str(p)): _sha256(p)
                          for p in outputs if p and os.path.exists(p)},
    }
    doc.update(payload)
    target = os.path.join(out_dir, "run_manifest.json")
    tmp = target + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, target)


def _parse_fractions(tokens):
    parts = [t for tok in tokens for t in str(tok).split(",") if t]
    try:
        fractions = tuple(float(t) for t in parts)
    except ValueError:
        raise ValueError(f"fractions must be numbers, got {parts}") from None
    if len(fractions) != 3:
        raise ValueError(f"expected three fractions, got {len(fractions)}")
    return fractions


def _cmd_synth(args):
    from . import data

    cfg = data.SynthConfig(
        n_complexes=args.n, n_ligands=args.ligands,
        pocket_residues=args.pocket_residues,
        ligand_atoms=tuple(args.ligand_atoms), seed=args.seed,
    )
    records = data.synth_generate(cfg)
    data.save_dataset(records, args.out)
    labels = [r.label for r in records]
    print(f"wrote {len(records)} complexes ({len({r.smiles for r in records})} ligands) "
          f"to {args.out}; labels in [{min(labels):.2f}, {max(labels):.2f}]")
    return 0


def _cmd_split(args):
    from . import data

    fractions = _parse_fractions(args.fractions)
    records = data.load_dataset(args.data)
    spec = data.split_by_smiles(records, fractions, seed=args.seed)
    paths = data.write_split_files(records, spec, args.out_dir, prefix=args.prefix)
    parts = data.apply_split(records, spec)
    for name, rs, path in zip(data.PARTITIONS, parts, paths):
        print(f"{name}: {len(rs)} records, {len({r.smiles for r in rs})} ligands "
              f"-> {path}")
    print(f"pair density {data.compute_density(records):.4f}")
    _write_manifest(args.out_dir, "split", {
        "data": args.data,
        "fractions": list(fractions),
        "seed": args.seed,
        "records": {name: len(rs) for name, rs in zip(data.PARTITIONS, parts)},
        "ligands": {name: len({r.smiles for r in rs})
                    for name, rs in zip(data.PARTITIONS, parts)},
    }, inputs=[args.data], outputs=paths)
    return 0


def _cmd_train(args):
    from . import model, train

    mconfig = _model_config(args.config)
    tconfig = _train_config(args.train_config, args)
    train_records = _load_records(args.train_data, args.cap, args.no_cap)
    val_records = (_load_records(args.val_data, args.cap, args.no_cap)
                   if args.val_data else ())
    energy_fn = model.ligand_only_energy if args.ligand_only else model.energy
    checkpoint = best = None
    resume_paths = []
    if args.resume:
        if os.path.isdir(args.resume):
            last_path = os.path.join(args.resume, "last.ckpt")
            checkpoint = train.load_checkpoint(last_path)
            resume_paths.append(last_path)
            best_path = os.path.join(args.resume, "best.ckpt")
            if os.path.exists(best_path):
                best = train.load_checkpoint(best_path)
                resume_paths.append(best_path)
        else:
            checkpoint = train.load_checkpoint(args.resume)
            resume_paths.append(args.resume)

    def log(row):
        e, lr, mse, dsm, total, vr = row
        msg = f"epoch {e:4d}  lr {lr:.3e}  mse {mse:11.4f}  dsm {dsm:10.4f}"
        if vr == vr:
            msg += f"  val_rmse {vr:8.4f}"
        print(msg)

    result = train.fit(
        mconfig, tconfig, train_records, val_records,
        checkpoint=checkpoint, best_checkpoint=best,
        energy_fn=energy_fn, out_dir=args.out_dir, log=log,
    )

    import dataclasses

    _write_manifest(args.out_dir, "train", {
        "model_config": dataclasses.asdict(mconfig),
        "train_config": dataclasses.asdict(tconfig),
        "train_data": args.train_data,
        "val_data": args.val_data,
        "n_train": len(train_records),
        "n_val": len(val_records),
        "variant": "ligand_only" if args.ligand_only else "full",
        "resumed_from": args.resume,
    }, inputs=[args.train_data, args.val_data, *resume_paths],
       outputs=[os.path.join(args.out_dir, f)
                for f in ("last.ckpt", "best.ckpt", "history.csv")])
    where = os.path.join(args.out_dir, "best.ckpt")
    if result.best_val is not None:
        print(f"best epoch {result.best_epoch} (val RMSE {result.best_val:.4f}) -> {where}")
    else:
        print(f"finished {tconfig.epochs} epochs -> {where}")
    if result.skipped_batches:
        print(f"warning: {result.skipped_batches} batches skipped as non-finite",
              file=sys.stderr)
    return 0


def _cmd_eval(args):
    from . import data, metrics, model

    ckpt, ckpt_path = _resolve_checkpoint(args.checkpoint)
    records = _load_records(args.data, args.cap, args.no_cap)
    energy_fn = model.ligand_only_energy if args.ligand_only else ckpt.energy_fn()
    if args.no_cap:
        cap = None
    else:
        cap = data.CAP_THRESHOLD if args.cap is None else args.cap
    m, rows = metrics.evaluate(ckpt.param_tensors(), ckpt.model_config, records,
                               energy_fn=energy_fn, cap=cap)
    os.makedirs(args.out_dir, exist_ok=True)
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    preds_path = os.path.join(args.out_dir, "predictions.csv")
    metrics.write_metrics_csv(metrics_path, m)
    metrics.write_predictions_csv(preds_path, rows)
    _write_manifest(args.out_dir, "eval", {
        "data": args.data, "n_records": len(records), "cap": cap,
        "checkpoint": ckpt_path, "checkpoint_epoch": ckpt.epoch,
        "variant": ckpt.variant,
    }, inputs=[args.data, ckpt_path], outputs=[metrics_path, preds_path])
    print(f"n {m['n']}  rmse {m['rmse']:.4f}  pearson {m['pearson']:.4f}  "
          f"spearman {m['spearman']:.4f}  r2 {m['r2']:.4f}")
    return 0


def _cmd_predict(args):
    from . import data, metrics, model

    ckpt, _ = _resolve_checkpoint(args.checkpoint)
    records = _load_records(args.data, args.cap, args.no_cap)
    energy_fn = model.ligand_only_energy if args.ligand_only else ckpt.energy_fn()
    raw = metrics.predict(ckpt.param_tensors(), ckpt.model_config, records,
                          energy_fn=energy_fn)
    cap = data.CAP_THRESHOLD if args.cap is None else args.cap
    capped = raw if args.no_cap else metrics.cap_predictions(raw, cap)
    rows = [(r.complex_id, r.label, float(p), float(c))
            for r, p, c in zip(records, raw, capped)]
    if args.out:
        metrics.write_predictions_csv(args.out, rows)
        print(f"wrote {len(rows)} predictions to {args.out}")
    else:
        print("complex_id,label,prediction,prediction_capped")
        for cid, label, p, c in rows:
            print(f"{cid},{label!r},{p!r},{c!r}")
    return 0


def _cmd_bench(args):
    from . import data, metrics, model

    if args.checkpoint:
        ckpt, _ = _resolve_checkpoint(args.checkpoint)
        mconfig = ckpt.model_config
        params = ckpt.param_tensors()
        energy_fn = ckpt.energy_fn()
    else:
        mconfig = _model_config(args.config)
        params = model.init_params(mconfig, seed=args.seed)
        energy_fn = model.energy
    if args.data:
        records = data.load_dataset(args.data)
    else:
        records = data.synth_generate(data.SynthConfig(n_complexes=args.n,
                                                       seed=args.seed))
    if args.batch_sizes:
        sizes = [int(t) for t in args.batch_sizes.split(",") if t]
    else:
        sizes = [None]
    for size in sizes:
        out = metrics.latency_bench(params, mconfig, records,
                                    energy_fn=energy_fn, repeats=args.repeats,
                                    group_size=size)
        print(f"{out['n']} complexes x {out['repeats']} repeats "
              f"(groups of {out['group_size']}): "
              f"median {out['median_ms']:.2f} ms/complex "
              f"(mean {out['mean_ms']:.2f}, best {out['best_ms']:.2f}); "
              f"{model.parameter_count(params)} parameters")
    return 0


def _cmd_inspect(args):
    if not args.data and not args.checkpoint:
        print("dualbind inspect: give --data and/or --checkpoint", file=sys.stderr)
        return 2
    report = {}
    if args.data:
        from . import data

        records = data.load_dataset(args.data)
        labels = [r.label for r in records]
        capped = sum(1 for r in records if r.label == data.CAP_THRESHOLD)
        report["dataset"] = {
            "path": args.data,
            "records": len(records),
            "ligands": len({r.smiles for r in records}),
            "proteins": len({r.protein_id for r in records}),
            "pair_density": data.compute_density(records),
            "label_min": min(labels),
            "label_max": max(labels),
            "labels_at_cap": capped,
            "atoms_per_complex": sorted(len(r.atoms) for r in records)[len(records) // 2],
        }
    if args.checkpoint:
        import dataclasses

        from . import train

        ckpt, ckpt_path = _resolve_checkpoint(args.checkpoint)
        report["checkpoint"] = {
            "path": ckpt_path,
            "format_version": train.CHECKPOINT_VERSION,
            "variant": ckpt.variant,
            "completed_epochs": ckpt.epoch,
            "best_epoch": ckpt.best_epoch,
            "best_val_rmse": ckpt.best_val,
            "parameters": int(sum(a.size for a in ckpt.params.values())),
            "model_config": dataclasses.asdict(ckpt.model_config),
            "train_config": dataclasses.asdict(ckpt.train_config),
        }
    if args.as_json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        for section, fields in report.items():
            print(f"[{section}]")
            for k, v in fields.items():
                print(f"  {k}: {v}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
}


def main(argv=None):
    _apply_thread_env()
    args = _build_parser().parse_args(argv)
    from . import data, metrics, train

    try:
        return _COMMANDS[args.command](args)
    except (data.DatasetError, train.TrainingError, train.CheckpointError,
            metrics.MetricsError, OSError) as exc:
        print(f"dualbind {args.command}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"dualbind {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
