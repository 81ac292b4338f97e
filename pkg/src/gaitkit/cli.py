"""Command line entry point: synth | train | embed | rerank | eval | check.

Commands compose through files only (datasets, .sfe checkpoints, .gemb
embedding sets, distance-matrix CSVs, report directories).  Every run that
writes artifacts also writes a manifest.json with the resolved config, the
seed, and SHA-256 hashes of its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys


def _set_threads(argv):
    # must happen before numpy is imported anywhere
    threads = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


class UsageError(Exception):
    pass


def _load_config_file(path, known_keys):
    import yaml
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a mapping")
    unknown = set(cfg) - set(known_keys)
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def _resolve(args, defaults):
    """Flag > config file > GAITKIT_SEED (seed only) > built-in default."""
    cfg = {}
    if getattr(args, "config", None):
        cfg = _load_config_file(args.config, defaults.keys())
    resolved = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key.replace("-", "_"), None)
        if cli_val is not None:
            resolved[key] = cli_val
        elif key in cfg:
            resolved[key] = cfg[key]
        elif key == "seed" and os.environ.get("GAITKIT_SEED"):
            resolved[key] = int(os.environ["GAITKIT_SEED"])
        else:
            resolved[key] = default
    return resolved


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, resolved, artifacts):
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(resolved.items())},
        "artifacts": {os.path.relpath(p, out_dir): _sha256(p)
                      for p in sorted(artifacts)},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _collect_files(out_dir, exclude=("manifest.json",)):
    out = []
    for base, _dirs, files in os.walk(out_dir):
        for f in sorted(files):
            if f not in exclude:
                out.append(os.path.join(base, f))
    return out


def _parse_int_list(text):
    return [int(v) for v in str(text).split(",") if str(v).strip()]


# -- subcommand implementations ------------------------------------------


def cmd_synth(args):
    from .synth import SynthSpec, synth_generate
    d = _resolve(args, {
        "out": None, "subjects": 4, "seqs-per-subject": 2, "frames": 30,
        "views": "0,45,90,135", "noise": 0.0, "seed": 0,
    })
    if not d["out"]:
        raise UsageError("synth requires --out")
    spec = SynthSpec(n_subjects=int(d["subjects"]),
                     sequences_per_subject=int(d["seqs-per-subject"]),
                     frames_per_sequence=int(d["frames"]),
                     views=tuple(_parse_int_list(d["views"])),
                     noise_level=float(d["noise"]), seed=int(d["seed"]))
    index = synth_generate(spec, d["out"])
    write_manifest(d["out"], "synth", d, _collect_files(d["out"]))
    print(f"wrote {len(index.entries)} sequences under {d['out']}")
    return 0


def _model_config(d):
    from .model import SfeConfig
    stages = tuple(_parse_int_list(d["ffe-stages"]))
    return SfeConfig(ffe_stages=stages, strip_dim=int(d["strip-dim"]),
                     share_ffe_blocks=bool(d["share-ffe-blocks"]))


def _load_split(index, split):
    from .dataset import load_sequence
    if split == "train":
        entries = index.train()
    elif split == "gallery":
        entries = index.gallery()
    elif split == "all":
        entries = list(index.entries)
    elif split.startswith("probe"):
        cond = split.split(":", 1)[1] if ":" in split else None
        entries = index.probes(cond)
    else:
        raise UsageError(f"unknown split '{split}'")
    if not entries:
        raise UsageError(f"split '{split}' is empty")
    return [load_sequence(e) for e in entries]


def cmd_train(args):
    import numpy as np
    from .dataset import index_dataset, resolve_protocol
    from .training import BatchSpec, TrainConfig, TripletLossConfig, train
    d = _resolve(args, {
        "dataset": None, "protocol": "casia-b", "train-subjects": None,
        "out": None, "iterations": 100, "p": 8, "k": 16, "frames-per-seq": 50,
        "margin": 0.2, "lr": 1e-4, "ffe-stages": "4", "strip-dim": 256,
        "share-ffe-blocks": False, "seed": 0, "checkpoint-every": 0,
    })
    if not d["dataset"] or not d["out"]:
        raise UsageError("train requires --dataset and --out")
    protocol = resolve_protocol(d["protocol"], d["train-subjects"] and int(d["train-subjects"]))
    index = index_dataset(d["dataset"], protocol)
    sequences = _load_split(index, "train")
    print(f"training on {len(sequences)} sequences, "
          f"{len({s.subject_id for s in sequences})} subjects")
    config = TrainConfig(
        iterations=int(d["iterations"]),
        batch=BatchSpec(p=int(d["p"]), k=int(d["k"]),
                        frames_per_seq=int(d["frames-per-seq"])),
        loss=TripletLossConfig(margin=float(d["margin"])),
        model=_model_config(d),
        learning_rate=float(d["lr"]), seed=int(d["seed"]),
        out_dir=d["out"], checkpoint_every=int(d["checkpoint-every"]))
    _model, trace = train(sequences, config,
                          progress=lambda it, v: print(f"iter {it}: loss {v:.5f}"))
    write_manifest(d["out"], "train", d, _collect_files(d["out"]))
    print(f"final loss {trace[-1][1]:.5f}; artifacts in {d['out']}")
    return 0


def cmd_embed(args):
    import numpy as np
    from .dataset import index_dataset, resolve_protocol
    from .gda import export_gemb_csv, save_gemb
    from .model import SfeModel
    d = _resolve(args, {
        "dataset": None, "protocol": "casia-b", "train-subjects": None,
        "model": None, "split": "all", "out": None, "csv": False, "seed": 0,
    })
    if not d["dataset"] or not d["model"] or not d["out"]:
        raise UsageError("embed requires --dataset, --model and --out")
    protocol = resolve_protocol(d["protocol"], d["train-subjects"] and int(d["train-subjects"]))
    index = index_dataset(d["dataset"], protocol)
    sequences = _load_split(index, d["split"])
    model = SfeModel.load(d["model"])
    feats = []
    meta = []
    for seq in sequences:
        feats.append(model.embed_sequence(seq.frames).flat)
        meta.append({"subject": seq.subject_id, "condition": seq.condition,
                     "view": seq.view})
    feats = np.stack(feats)
    save_gemb(d["out"], feats, meta)
    if d["csv"]:
        export_gemb_csv(d["out"] + ".csv", feats, meta)
    out_dir = os.path.dirname(os.path.abspath(d["out"]))
    write_manifest(out_dir, "embed", d, [os.path.abspath(d["out"])])
    print(f"embedded {len(feats)} sequences -> {d['out']}")
    return 0


def _subject_subset(features, meta, n_subjects):
    subjects = sorted({str(m.get("subject")) for m in meta if m})
    keep = set(subjects[:n_subjects])
    idx = [i for i, m in enumerate(meta) if m and str(m.get("subject")) in keep]
    return features[idx]


def cmd_rerank(args):
    from .evaluate import distance_matrix
    from .gda import AdjustmentSet, GdaConfig, load_gemb, refine_distances
    d = _resolve(args, {
        "probe": None, "gallery": None, "adjustment": None, "out": None,
        "t": 3, "lambda-g": 0.5, "lambda-q": 0.5, "probe-only": False,
        "k-min": 1, "sweep-adjustment-subjects": None, "seed": 0,
    })
    if not (d["probe"] and d["gallery"] and d["adjustment"] and d["out"]):
        raise UsageError("rerank requires --probe, --gallery, --adjustment and --out")
    pfeat, pmeta = load_gemb(d["probe"])
    gfeat, gmeta = load_gemb(d["gallery"])
    afeat, ameta = load_gemb(d["adjustment"])
    cfg = GdaConfig(t=int(d["t"]), lambda_g=float(d["lambda-g"]),
                    lambda_q=float(d["lambda-q"]),
                    probe_only=bool(d["probe-only"]), k_min=int(d["k-min"]))
    dm = distance_matrix(pfeat, gfeat, pmeta, gmeta)
    os.makedirs(d["out"], exist_ok=True)
    artifacts = []

    def refine_to(features, name):
        refined = refine_distances(dm.values, pfeat, gfeat,
                                   AdjustmentSet(features), cfg)
        path = os.path.join(d["out"], name)
        dm_out = type(dm)(refined, dm.probe_meta, dm.gallery_meta)
        dm_out.save_csv(path)
        artifacts.append(path)

    raw_path = os.path.join(d["out"], "distances_raw.csv")
    dm.save_csv(raw_path)
    artifacts.append(raw_path)
    if d["sweep-adjustment-subjects"]:
        for n in _parse_int_list(d["sweep-adjustment-subjects"]):
            refine_to(_subject_subset(afeat, ameta, n),
                      f"distances_refined_adj{n:04d}.csv")
    else:
        refine_to(afeat, "distances_refined.csv")
    write_manifest(d["out"], "rerank", d, artifacts)
    print(f"wrote {len(artifacts)} matrices to {d['out']}")
    return 0


def cmd_eval(args):
    import csv as _csv
    from .evaluate import DistanceMatrix, distance_matrix, emit_report, rank1_evaluate
    from .gda import AdjustmentSet, GdaConfig, load_gemb, refine_distances
    d = _resolve(args, {
        "matrix": None, "probe": None, "gallery": None, "out": None,
        "gda": False, "adjustment": None, "t": 3, "lambda-g": 0.5,
        "lambda-q": 0.5, "probe-only": False, "k-min": 1,
        "gallery-all-views": False, "sweep-adjustment-subjects": None, "seed": 0,
    })
    if not d["out"]:
        raise UsageError("eval requires --out")
    all_views = bool(d["gallery-all-views"])
    os.makedirs(d["out"], exist_ok=True)

    if d["matrix"]:
        dm = DistanceMatrix.load_csv(d["matrix"])
        report = rank1_evaluate(dm, gallery_all_views=all_views)
        emit_report(report, d["out"])
    else:
        if not (d["probe"] and d["gallery"]):
            raise UsageError("eval needs --matrix, or --probe and --gallery")
        pfeat, pmeta = load_gemb(d["probe"])
        gfeat, gmeta = load_gemb(d["gallery"])
        dm = distance_matrix(pfeat, gfeat, pmeta, gmeta)
        cfg = GdaConfig(t=int(d["t"]), lambda_g=float(d["lambda-g"]),
                        lambda_q=float(d["lambda-q"]),
                        probe_only=bool(d["probe-only"]), k_min=int(d["k-min"]))
        if d["sweep-adjustment-subjects"]:
            if not d["adjustment"]:
                raise UsageError("the adjustment sweep needs --adjustment")
            afeat, ameta = load_gemb(d["adjustment"])
            rows = []
            for n in _parse_int_list(d["sweep-adjustment-subjects"]):
                sub = _subject_subset(afeat, ameta, n)
                refined = refine_distances(dm.values, pfeat, gfeat,
                                           AdjustmentSet(sub), cfg)
                rep = rank1_evaluate(DistanceMatrix(refined, dm.probe_meta,
                                                    dm.gallery_meta),
                                     gallery_all_views=all_views)
                rows.append((n, len(sub), rep.grand_mean))
            with open(os.path.join(d["out"], "adjustment_sweep.csv"), "w",
                      newline="") as fh:
                writer = _csv.writer(fh)
                writer.writerow(["adjustment_subjects", "adjustment_features",
                                 "rank1_grand_mean"])
                writer.writerows(rows)
            report = None
        else:
            if d["gda"]:
                if not d["adjustment"]:
                    raise UsageError("--gda needs --adjustment")
                afeat, _ameta = load_gemb(d["adjustment"])
                values = refine_distances(dm.values, pfeat, gfeat,
                                          AdjustmentSet(afeat), cfg)
                dm = DistanceMatrix(values, dm.probe_meta, dm.gallery_meta)
            report = rank1_evaluate(dm, gallery_all_views=all_views)
            emit_report(report, d["out"])

    write_manifest(d["out"], "eval", d, _collect_files(d["out"]))
    if report is not None and report.grand_mean is not None:
        print(f"grand mean rank-1: {100.0 * report.grand_mean:.1f}%")
    print(f"report in {d['out']}")
    return 0


def cmd_check(args):
    from .selfcheck import run_selfcheck
    return 0 if run_selfcheck() else 1


# -- argument wiring --------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="YAML config file with per-command keys")
    p.add_argument("--threads", type=int, help="cap worker/BLAS threads (1 = bitwise determinism)")
    p.add_argument("--seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="gaitkit",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic silhouette dataset")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--subjects", type=int)
    p.add_argument("--seqs-per-subject", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--views", help="comma-separated view angles in degrees")
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the embedding network")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--protocol", help="casia-b | mini-oumvlp | synthetic | JSON file")
    p.add_argument("--train-subjects", type=int)
    p.add_argument("--out")
    p.add_argument("--iterations", type=int,
                   help="optimization steps (full benchmark runs use tens of thousands)")
    p.add_argument("--p", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--frames-per-seq", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--ffe-stages", help="block counts, e.g. '4' or '4,8'")
    p.add_argument("--strip-dim", type=int)
    p.add_argument("--share-ffe-blocks", action=argparse.BooleanOptionalAction)
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a dataset split to a GEMB file")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--protocol")
    p.add_argument("--train-subjects", type=int)
    p.add_argument("--model")
    p.add_argument("--split", help="train | gallery | probe[:COND] | all")
    p.add_argument("--out")
    p.add_argument("--csv", action=argparse.BooleanOptionalAction,
                   help="also export a CSV mirror")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rerank", help="refine a distance matrix with GDA")
    _add_common(p)
    p.add_argument("--probe")
    p.add_argument("--gallery")
    p.add_argument("--adjustment")
    p.add_argument("--out")
    p.add_argument("--t", type=int)
    p.add_argument("--lambda-g", type=float)
    p.add_argument("--lambda-q", type=float)
    p.add_argument("--probe-only", action=argparse.BooleanOptionalAction)
    p.add_argument("--k-min", type=int)
    p.add_argument("--sweep-adjustment-subjects",
                   help="comma-separated subject counts; one matrix each")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="cross-view rank-1 evaluation")
    _add_common(p)
    p.add_argument("--matrix")
    p.add_argument("--probe")
    p.add_argument("--gallery")
    p.add_argument("--out")
    p.add_argument("--gda", action=argparse.BooleanOptionalAction)
    p.add_argument("--adjustment")
    p.add_argument("--t", type=int)
    p.add_argument("--lambda-g", type=float)
    p.add_argument("--lambda-q", type=float)
    p.add_argument("--probe-only", action=argparse.BooleanOptionalAction)
    p.add_argument("--k-min", type=int)
    p.add_argument("--gallery-all-views", action=argparse.BooleanOptionalAction)
    p.add_argument("--sweep-adjustment-subjects")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the gradient/oracle self-test suite")
    _add_common(p)
    p.set_defaults(func=cmd_check)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, not a usage problem
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
