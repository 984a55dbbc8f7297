"""Config-driven pipeline commands with persisted, hash-chained artifacts.

Every command reads one JSON config, loads its inputs from earlier stages'
artifact files, and writes its own outputs into the run directory.  A sha256
of the resolved config rides in every artifact header so stages refuse to
mix files produced under different configurations.  Exit codes: 0 success,
2 completed but convergence-flagged, 1 error.
"""

import os

# Worker-thread caps must be in the environment before numpy and numba set
# up their pools; the default of 1 keeps full runs bit-reproducible.
_THREADS = os.environ.get("LATENT_SCOPE_THREADS") or "1"
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS",
             "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import dataclasses
import hashlib
import json
import shutil
import sys
import time

import numpy as np

from .artifacts import load_encodings, save_encodings, save_sequence_encodings
from .dataset import (
    SyntheticConfig,
    generate_synthetic,
    load_frames,
    save_frames,
    split,
    write_manifest,
)
from .direct_eval import emit_per_query_csv, emit_pr_curve, evaluate_direct
from .errors import ArtifactError, ConfigError, LatentScopeError
from .future import FpConfig, evaluate_fp, fit_fp
from .future import load_fp_checkpoint, save_fp_checkpoint
from .mixture import (
    ChainConfig,
    evaluate_mixture,
    load_posterior_csv,
    sample_posterior,
    save_posterior_csv,
    write_diagnostics,
)
from .vae import VaeConfig, encode_dataset
from .vae import fit as fit_vae
from .vae import load_checkpoint, save_checkpoint

THREADS = max(1, int(_THREADS))

# stage seeds derive from the global seed at fixed offsets so one --seed
# controls the whole pipeline without correlating any two stages
_SEED_OFFSETS = {
    ("dataset", "synthetic"): 0,
    ("vae",): 1,
    ("chain",): 2,
    ("fp",): 3,
}
_ENCODE_TRAIN_OFFSET = 4
_ENCODE_TEST_OFFSET = 5

FILES = {
    "config": "config.json",
    "manifest": "run_manifest.json",
    "dataset": "dataset",
    "dataset_manifest": "dataset_manifest.csv",
    "vae": "vae.bin",
    "vae_history": "vae_history.csv",
    "enc_train": "encodings_train.bin",
    "enc_test": "encodings_test.bin",
    "direct_pr": "direct_pr.csv",
    "direct_queries": "direct_per_query.csv",
    "direct_metrics": "direct_metrics.json",
    "posterior": "posterior.csv",
    "mixture_diag": "mixture_diagnostics.json",
    "mixture_scores": "mixture_scores.csv",
    "mixture_metrics": "mixture_metrics.json",
    "fp": "fp.bin",
    "fp_history": "fp_history.csv",
    "sequences": "sequences.bin",
    "fp_queries": "fp_per_query.csv",
    "fp_metrics": "fp_metrics.json",
    "report_txt": "report.txt",
    "report_csv": "report.csv",
}

METHOD_ROWS = [
    ("direct-eval", "direct_ap"),
    ("mixture-mcmc", "mixture_ap"),
    ("future-prediction", "fp_ap"),
]


def default_config() -> dict:
    cfg = {
        "seed": 0,
        "output_dir": "runs/latent-scope",
        "dataset": {
            "source": "synthetic",
            "directory": None,
            "labels": None,
            "holdout_fraction": 0.2,
            "synthetic": dataclasses.asdict(SyntheticConfig()),
        },
        "vae": dataclasses.asdict(VaeConfig()),
        "chain": dataclasses.asdict(ChainConfig()),
        "fp": dataclasses.asdict(FpConfig(max_gap=2)),
    }
    # null = derive from the global seed when the config is resolved
    cfg["dataset"]["synthetic"]["seed"] = None
    for section in ("vae", "chain", "fp"):
        cfg[section]["seed"] = None
    return cfg


def _deep_update(dst: dict, src: dict, path: str = "") -> None:
    for key, value in src.items():
        here = f"{path}{key}"
        if key not in dst:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(dst[key], dict) and isinstance(value, dict):
            _deep_update(dst[key], value, here + ".")
        else:
            dst[key] = value


def _apply_set(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, _, raw = item.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical config JSON; the output path is excluded so
    the same experiment hashes identically wherever it is written."""
    payload = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclasses.dataclass(frozen=True)
class Run:
    cfg: dict
    out: str
    hash: str
    synthetic: SyntheticConfig
    vae: VaeConfig
    chain: ChainConfig
    fp: FpConfig


def resolve_config(args) -> Run:
    cfg = default_config()
    config_file = getattr(args, "config", None)
    if config_file is None:
        # a run directory carries its own resolved config, so per-stage
        # invocations do not have to repeat every override
        candidate = os.path.join(getattr(args, "out", None)
                                 or cfg["output_dir"], FILES["config"])
        if os.path.exists(candidate):
            config_file = candidate
    elif not os.path.exists(config_file):
        raise ConfigError(f"config file not found: {config_file}")
    if config_file:
        with open(config_file) as fh:
            _deep_update(cfg, json.load(fh))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        for path in _SEED_OFFSETS:  # rederive stage seeds from the new seed
            node = cfg
            for part in path:
                node = node[part]
            node["seed"] = None
    if getattr(args, "out", None):
        cfg["output_dir"] = args.out
    if getattr(args, "frames", None):
        cfg["dataset"]["synthetic"]["count"] = args.frames
    for item in getattr(args, "overrides", None) or []:
        _apply_set(cfg, item)

    seed = int(cfg["seed"])
    for path, offset in _SEED_OFFSETS.items():
        node = cfg
        for part in path:
            node = node[part]
        if node["seed"] is None:
            node["seed"] = seed + offset

    source = cfg["dataset"]["source"]
    if source not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'directory', "
                          f"got {source!r}")
    if source == "directory":
        directory = cfg["dataset"]["directory"]
        if not directory or not os.path.isdir(directory):
            raise ConfigError(f"dataset.directory does not exist: {directory!r}")
        labels = cfg["dataset"]["labels"]
        if labels and not os.path.exists(labels):
            raise ConfigError(f"dataset.labels file does not exist: {labels!r}")
    fraction = cfg["dataset"]["holdout_fraction"]
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout_fraction must be in (0,1), got {fraction}")
    if cfg["fp"]["latent_dim"] != cfg["vae"]["latent_dim"]:
        raise ConfigError(
            f"fp.latent_dim={cfg['fp']['latent_dim']} must match "
            f"vae.latent_dim={cfg['vae']['latent_dim']}")

    def build(cls, section):
        try:
            instance = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"bad {cls.__name__} section: {exc}")
        if hasattr(instance, "validate"):
            instance.validate()
        return instance

    run = Run(cfg=cfg, out=cfg["output_dir"], hash=config_hash(cfg),
              synthetic=build(SyntheticConfig, cfg["dataset"]["synthetic"]),
              vae=build(VaeConfig, cfg["vae"]),
              chain=build(ChainConfig, cfg["chain"]),
              fp=build(FpConfig, cfg["fp"]))
    return run


def _path(run: Run, name: str) -> str:
    return os.path.join(run.out, FILES[name])


def _write_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _ensure_run_dir(run: Run, force: bool) -> None:
    os.makedirs(run.out, exist_ok=True)
    path = _path(run, "config")
    if os.path.exists(path) and not force:
        with open(path) as fh:
            existing = json.load(fh)
        if config_hash(existing) != run.hash:
            raise ConfigError(
                f"{run.out} holds artifacts for a different configuration; "
                "rerun with --force or choose another --out")
    _write_json(path, run.cfg)


def _update_manifest(run: Run, stage: str, artifacts: dict,
                     metrics: dict) -> None:
    path = _path(run, "manifest")
    manifest = {"config_hash": run.hash, "stages": {}, "metrics": {}}
    if os.path.exists(path):
        with open(path) as fh:
            existing = json.load(fh)
        if existing.get("config_hash") != run.hash:
            raise ArtifactError(
                "run manifest belongs to a different configuration; "
                "rerun with --force or choose another --out")
        manifest = existing
    manifest["stages"][stage] = {
        "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": artifacts,
        "metrics": metrics,
    }
    for key in ("direct_ap", "mixture_ap", "fp_ap"):
        if key in metrics:
            manifest.setdefault("metrics", {})[key] = metrics[key]
    _write_json(path, manifest)


def _require(run: Run, name: str, producer: str) -> str:
    path = _path(run, name)
    if not os.path.exists(path):
        raise ArtifactError(
            f"missing artifact {FILES[name]}; run `latentscope {producer}` first")
    return path


def _check_hash(run: Run, artifact_hash: str, what: str) -> None:
    if artifact_hash != run.hash:
        raise ArtifactError(
            f"{what} was produced under config hash {artifact_hash[:12]}..., "
            f"current config hashes to {run.hash[:12]}...; artifacts from "
            "different configurations cannot be mixed")


def _load_dataset(run: Run):
    """Dataset with the run's deterministic train/test split applied."""
    if run.cfg["dataset"]["source"] == "synthetic":
        directory = _path(run, "dataset")
        if not os.path.isdir(directory):
            raise ArtifactError(
                "missing synthetic dataset; run `latentscope synth` first")
        labels = os.path.join(directory, "labels.csv")
        data = load_frames(directory,
                           labels_file=labels if os.path.exists(labels) else None)
    else:
        data = load_frames(run.cfg["dataset"]["directory"],
                           labels_file=run.cfg["dataset"]["labels"])
    return split(data, run.cfg["dataset"]["holdout_fraction"],
                 seed=int(run.cfg["seed"]))


def _load_split_encodings(run: Run, name: str, data) -> tuple:
    """Encodings for one split plus the aligned labels."""
    enc = load_encodings(_require(run, name, "encode"))
    _check_hash(run, enc.config_hash, FILES[name])
    split_name = "train" if name == "enc_train" else "test"
    if not np.array_equal(enc.indices, data.raw_indices(split_name)):
        raise ArtifactError(
            f"{FILES[name]} indices do not match the current split; "
            "re-run `latentscope encode`")
    return enc, split_name


def _write_history_csv(path: str, history, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch," + ",".join(fieldnames) + "\n")
        for epoch, entry in enumerate(history):
            if isinstance(entry, dict):
                row = [entry[k] for k in fieldnames]
            else:
                row = [entry]
            fh.write(",".join([str(epoch)] + [f"{float(v)!r}" for v in row])
                     + "\n")


# -- commands -------------------------------------------------------------


def cmd_synth(run: Run, args) -> int:
    directory = _path(run, "dataset")
    if os.path.isdir(directory) and os.listdir(directory):
        if not args.force:
            raise ConfigError(
                f"{directory} already contains files; pass --force to replace")
        shutil.rmtree(directory)
    data = generate_synthetic(run.synthetic)
    data = split(data, run.cfg["dataset"]["holdout_fraction"],
                 seed=int(run.cfg["seed"]))
    save_frames(data, directory)
    write_manifest(data, _path(run, "dataset_manifest"))
    prevalence = float(np.mean([f.label for f in data.frames]))
    metrics = {"frames": len(data), "prevalence": prevalence,
               "test_frames": int(data.test_mask.sum())}
    _update_manifest(run, "synth", {
        "dataset": FILES["dataset"],
        "dataset_manifest": FILES["dataset_manifest"],
    }, metrics)
    print(f"synth: {len(data)} frames, prevalence {prevalence:.4f} "
          f"-> {directory}")
    return 0


def cmd_train_vae(run: Run, args) -> int:
    data = _load_dataset(run)
    params, history = fit_vae(data, run.vae)
    save_checkpoint(params, run.vae, _path(run, "vae"), config_hash=run.hash)
    fields = sorted(history[0]) if history else []
    _write_history_csv(_path(run, "vae_history"), history, fields)
    metrics = {"first_epoch_total": history[0]["total"],
               "final_epoch_total": history[-1]["total"]}
    _update_manifest(run, "train-vae", {
        "vae": FILES["vae"], "vae_history": FILES["vae_history"],
    }, metrics)
    print(f"train-vae: {run.vae.epochs} epochs, "
          f"loss {history[0]['total']:.2f} -> {history[-1]['total']:.2f}")
    return 0


def cmd_encode(run: Run, args) -> int:
    params, _, artifact_hash = load_checkpoint(_require(run, "vae", "train-vae"))
    _check_hash(run, artifact_hash, FILES["vae"])
    data = _load_dataset(run)
    seed = int(run.cfg["seed"])
    for name, split_name, offset in (
            ("enc_train", "train", _ENCODE_TRAIN_OFFSET),
            ("enc_test", "test", _ENCODE_TEST_OFFSET)):
        enc = encode_dataset(params, data, split=split_name,
                             seed=seed + offset, config_hash=run.hash)
        save_encodings(_path(run, name), enc)
    _update_manifest(run, "encode", {
        "enc_train": FILES["enc_train"], "enc_test": FILES["enc_test"],
    }, {"train_frames": len(data.positions("train")),
        "test_frames": len(data.positions("test"))})
    print(f"encode: {len(data.positions('train'))} train / "
          f"{len(data.positions('test'))} test frames encoded")
    return 0


def cmd_eval_direct(run: Run, args) -> int:
    data = _load_dataset(run)
    enc, split_name = _load_split_encodings(run, "enc_test", data)
    labels = data.labels(split_name)
    result = evaluate_direct(enc, labels)
    emit_pr_curve(result.pooled_scores, result.pooled_labels,
                  _path(run, "direct_pr"), config_hash=run.hash)
    emit_per_query_csv(result, _path(run, "direct_queries"),
                       config_hash=run.hash)
    metrics = {"direct_ap": result.headline, "mean_ap": result.mean_ap,
               "pooled_ap": result.pooled_ap,
               "queries": int(len(result.query_aps))}
    _write_json(_path(run, "direct_metrics"),
                dict(metrics, config_hash=run.hash))
    _update_manifest(run, "eval-direct", {
        "direct_pr": FILES["direct_pr"],
        "direct_queries": FILES["direct_queries"],
        "direct_metrics": FILES["direct_metrics"],
    }, metrics)
    print(f"eval-direct: mean AP {result.mean_ap:.4f} over "
          f"{len(result.query_aps)} queries (pooled {result.pooled_ap:.4f})")
    return 0


def cmd_fit_mixture(run: Run, args) -> int:
    data = _load_dataset(run)
    enc, _ = _load_split_encodings(run, "enc_train", data)
    posterior = sample_posterior(enc, run.chain, threads=THREADS)
    save_posterior_csv(posterior, _path(run, "posterior"),
                       config_hash=run.hash)
    write_diagnostics(posterior, _path(run, "mixture_diag"),
                      config_hash=run.hash)
    metrics = {"flagged": posterior.flagged,
               "max_rhat": max(posterior.rhats.values())}
    _update_manifest(run, "fit-mixture", {
        "posterior": FILES["posterior"],
        "mixture_diag": FILES["mixture_diag"],
    }, metrics)
    state = "FLAGGED" if posterior.flagged else "converged"
    print(f"fit-mixture: {run.chain.chains} chains, "
          f"max R-hat {metrics['max_rhat']:.4f} ({state})")
    return 2 if posterior.flagged else 0


def cmd_eval_mixture(run: Run, args) -> int:
    data = _load_dataset(run)
    enc, split_name = _load_split_encodings(run, "enc_test", data)
    posterior = load_posterior_csv(_require(run, "posterior", "fit-mixture"))
    labels = data.labels(split_name)
    result = evaluate_mixture(posterior, enc, labels)
    with open(_path(run, "mixture_scores"), "w", newline="") as fh:
        fh.write(f"# config_hash={run.hash}\n")
        fh.write("frame_index,p_cluster2,label\n")
        for idx, score, label in zip(enc.indices, result.scores, labels):
            fh.write(f"{int(idx)},{float(score)!r},{int(label)}\n")
    metrics = {"mixture_ap": result.headline_ap,
               "ap_cluster2": result.ap_cluster2,
               "ap_cluster1": result.ap_cluster1,
               "orientation": result.orientation,
               "calibration_frames": result.calibration_count,
               "flagged": posterior.flagged}
    _write_json(_path(run, "mixture_metrics"),
                dict(metrics, config_hash=run.hash))
    _update_manifest(run, "eval-mixture", {
        "mixture_scores": FILES["mixture_scores"],
        "mixture_metrics": FILES["mixture_metrics"],
    }, metrics)
    print(f"eval-mixture: AP {result.headline_ap:.4f} "
          f"({result.orientation} as tool, "
          f"{result.calibration_count} calibration frames)")
    return 2 if posterior.flagged else 0


def cmd_train_fp(run: Run, args) -> int:
    data = _load_dataset(run)
    enc, _ = _load_split_encodings(run, "enc_train", data)
    params, history = fit_fp(enc, run.fp)
    save_fp_checkpoint(params, run.fp, _path(run, "fp"), config_hash=run.hash)
    _write_history_csv(_path(run, "fp_history"), history, ["nll"])
    metrics = {"first_epoch_nll": history[0], "final_epoch_nll": history[-1]}
    _update_manifest(run, "train-fp", {
        "fp": FILES["fp"], "fp_history": FILES["fp_history"],
    }, metrics)
    print(f"train-fp: {run.fp.epochs} epochs, "
          f"NLL {history[0]:.2f} -> {history[-1]:.2f}")
    return 0


def cmd_eval_fp(run: Run, args) -> int:
    params, fp_cfg, artifact_hash = load_fp_checkpoint(
        _require(run, "fp", "train-fp"))
    _check_hash(run, artifact_hash, FILES["fp"])
    data = _load_dataset(run)
    enc, split_name = _load_split_encodings(run, "enc_test", data)
    labels = data.labels(split_name)
    # test frames sit a fixed stride apart; windows slide over the split
    gap = int(np.diff(enc.indices).min()) if len(enc) > 1 else 1
    result = evaluate_fp(params, enc, labels, fp_cfg, max_gap=gap,
                         config_hash=run.hash)
    save_sequence_encodings(_path(run, "sequences"), result.sequences)
    with open(_path(run, "fp_queries"), "w", newline="") as fh:
        fh.write(f"# config_hash={run.hash}\n")
        fh.write("query_window_start,ap\n")
        for w, ap in zip(result.query_windows, result.query_aps):
            start = int(result.sequences.windows[w][0])
            fh.write(f"{start},{float(ap)!r}\n")
    metrics = {"fp_ap": result.mean_ap,
               "queries": int(len(result.query_aps)),
               "windows": int(len(result.sequences))}
    _write_json(_path(run, "fp_metrics"), dict(metrics, config_hash=run.hash))
    _update_manifest(run, "eval-fp", {
        "sequences": FILES["sequences"],
        "fp_queries": FILES["fp_queries"],
        "fp_metrics": FILES["fp_metrics"],
    }, metrics)
    print(f"eval-fp: mean AP {result.mean_ap:.4f} over "
          f"{len(result.query_aps)} query windows")
    return 0


def cmd_report(run: Run, args) -> int:
    path = _path(run, "manifest")
    if not os.path.exists(path):
        raise ArtifactError("no run manifest; run at least one eval stage first")
    with open(path) as fh:
        manifest = json.load(fh)
    _check_hash(run, manifest.get("config_hash", ""), FILES["manifest"])
    metrics = manifest.get("metrics", {})
    rows = [(method, metrics[key]) for method, key in METHOD_ROWS
            if key in metrics]
    missing = [method for method, key in METHOD_ROWS if key not in metrics]
    if not rows:
        raise ArtifactError("manifest holds no AP metrics; run the eval stages")

    width = max(len(m) for m, _ in rows) + 2
    lines = ["method".ljust(width) + "ap"]
    lines += [m.ljust(width) + f"{float(ap)!r}" for m, ap in rows]
    if missing:
        lines.append("")
        lines.append("note: missing stages: " + ", ".join(missing))
    if not missing:
        ordered = (metrics["fp_ap"] >= metrics["mixture_ap"]
                   >= metrics["direct_ap"])
        lines.append("")
        lines.append("note: ordering future-prediction >= mixture-mcmc >= "
                     f"direct-eval holds: {'yes' if ordered else 'no'}")
    text = "\n".join(lines) + "\n"
    with open(_path(run, "report_txt"), "w") as fh:
        fh.write(text)
    with open(_path(run, "report_csv"), "w", newline="") as fh:
        fh.write(f"# config_hash={run.hash}\n")
        fh.write("method,ap\n")
        for m, ap in rows:
            fh.write(f"{m},{float(ap)!r}\n")
        if missing:
            fh.write("# missing=" + ",".join(missing) + "\n")
    _update_manifest(run, "report", {
        "report_txt": FILES["report_txt"], "report_csv": FILES["report_csv"],
    }, {})
    print(text, end="")
    return 0


def cmd_run(run: Run, args) -> int:
    stages = []
    if run.cfg["dataset"]["source"] == "synthetic":
        stages.append(("synth", cmd_synth))
    stages += [
        ("train-vae", cmd_train_vae),
        ("encode", cmd_encode),
        ("eval-direct", cmd_eval_direct),
        ("fit-mixture", cmd_fit_mixture),
        ("eval-mixture", cmd_eval_mixture),
        ("train-fp", cmd_train_fp),
        ("eval-fp", cmd_eval_fp),
        ("report", cmd_report),
    ]
    code = 0
    for name, fn in stages:
        code = max(code, fn(run, args))
    return code


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic dataset"),
    "train-vae": (cmd_train_vae, "train the frame VAE on the train split"),
    "encode": (cmd_encode, "encode both splits with the trained VAE"),
    "eval-direct": (cmd_eval_direct, "cosine-query evaluation of encodings"),
    "fit-mixture": (cmd_fit_mixture, "MCMC over the two-cluster latent mixture"),
    "eval-mixture": (cmd_eval_mixture, "score frames by cluster membership"),
    "train-fp": (cmd_train_fp, "train the sequence future predictor"),
    "eval-fp": (cmd_eval_fp, "sequence-encoding query evaluation"),
    "report": (cmd_report, "summary table of headline APs"),
    "run": (cmd_run, "run every stage in order"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentscope",
        description="unsupervised tool-presence detection from frame latents")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="run directory (default from config)")
        sp.add_argument("--seed", type=int, help="global seed override")
        sp.add_argument("--force", action="store_true",
                        help="replace conflicting outputs")
        sp.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. vae.epochs=40")
        if name in ("synth", "run"):
            sp.add_argument("--frames", type=int,
                            help="synthetic frame count shortcut")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = resolve_config(args)
        _ensure_run_dir(run, args.force)
        return COMMANDS[args.command][0](run, args)
    except LatentScopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
