"""Command-line entry point: synth, pretrain, train, encode, eval, bench.

Every command reads an optional ``key=value`` config file; flags override
file values. Keys are TrainConfig field names, ``synth.<field>`` for the
synthetic generator and ``bench.<field>`` for the benchmark.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, nn
from .codespace import CodePrior, load_codes, normalization_factor, normalize_uniform, sample_codes, save_codes
from .dataset import SplitProtocol, SynthConfig, generate_synthetic, load_features, save_features, split_query_gallery
from .errors import AbcError, ConfigError, FormatError
from .retrieval import (benchmark, build_euclidean_index, build_index, evaluate_index, write_bench_csv)
from .trainer import TrainConfig, encode_dataset, extract, pretrain, train_joint

log = logging.getLogger("abcode")

COMMANDS = ("synth", "pretrain", "train", "encode", "eval", "bench")


@dataclasses.dataclass(frozen=True)
class BenchConfig:
    gallery_size: int = 100_000
    queries: int = 20
    repetitions: int = 3


SECTIONS = {"": TrainConfig, "synth.": SynthConfig, "bench.": BenchConfig}


def _coerce(raw: str, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _field_defaults(cls):
    return {f.name: f.default for f in dataclasses.fields(cls)}


def parse_config_text(text: str) -> dict:
    """Flat ``{key: typed value}`` from ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _typed(key, value)
    return out


def _typed(key, value):
    for prefix, cls in SECTIONS.items():
        if prefix and not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        defaults = _field_defaults(cls)
        if name in defaults:
            return _coerce(value, defaults[name], key) if isinstance(value, str) else value
    raise ConfigError(f"unknown config key {key!r}")


def build_configs(values: dict):
    """Split flat settings into (TrainConfig, SynthConfig, BenchConfig)."""
    parts = {prefix: {} for prefix in SECTIONS}
    for key, value in values.items():
        prefix = next(p for p in ("synth.", "bench.") if key.startswith(p)) if "." in key else ""
        parts[prefix][key[len(prefix):]] = value
    try:
        return tuple(cls(**parts[prefix]) for prefix, cls in SECTIONS.items())
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def snapshot(train_cfg, synth_cfg, bench_cfg):
    flat = {}
    for prefix, cfg in zip(SECTIONS, (train_cfg, synth_cfg, bench_cfg)):
        for key, value in dataclasses.asdict(cfg).items():
            flat[prefix + key] = list(value) if isinstance(value, tuple) else value
    return flat


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path, obj):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


class RunManifest:
    """JSON record of one command: config, seeds, files and timing."""

    def __init__(self, path, command, argv, config, inputs, outputs):
        self.path = Path(path)
        self.data = {
            "command": command,
            "argv": list(argv),
            "tool_version": __version__,
            "numpy_version": np.__version__,
            "python_version": platform.python_version(),
            "config": config,
            "seeds": {k: v for k, v in config.items() if k.endswith("seed")},
            "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items()},
            "outputs": {k: str(v) for k, v in outputs.items()},
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "status": "running",
        }
        self._t0 = time.perf_counter()
        write_json_atomic(self.path, self.data)

    def finish(self, status="ok"):
        self.data["status"] = status
        self.data["wall_seconds"] = round(time.perf_counter() - self._t0, 3)
        self.data["output_sha256"] = {k: _sha256(v) for k, v in self.data["outputs"].items()
                                      if Path(v).is_file()}
        write_json_atomic(self.path, self.data)


# --- commands --------------------------------------------------------------

def _find_role(nets, role):
    for spec, params, r in nets:
        if r == role:
            return spec, params
    raise FormatError(f"checkpoint has no {role} network")


def _train_split(ds, cfg):
    q_idx, g_idx = split_query_gallery(ds, SplitProtocol(cfg.query_fraction), cfg.split_seed)
    return q_idx, g_idx


def cmd_synth(args, cfg, synth, bench, out):
    ds = generate_synthetic(synth)
    save_features(out["dataset"], ds)
    print(f"wrote {len(ds)} records to {out['dataset']}")


def cmd_pretrain(args, cfg, synth, bench, out):
    ds = load_features(args.dataset)
    _, g_idx = _train_split(ds, cfg)
    rng = np.random.default_rng(cfg.rng_seed)
    ext = nn.init_params(cfg.extractor_spec(ds.dim), rng)
    ext, report = pretrain(ext, ds.subset(g_idx), cfg, rng)
    nn.save_checkpoint(out["model"], [(cfg.extractor_spec(ds.dim), ext, "extractor")])
    report.write_csv(out["report"])
    print(f"pretrain: final cross-entropy {report.pretrain_loss[-1]:.4f}" if report.pretrain_loss
          else "pretrain: 0 iterations")


def cmd_train(args, cfg, synth, bench, out):
    ds = load_features(args.dataset)
    _, g_idx = _train_split(ds, cfg)
    spec = cfg.extractor_spec(ds.dim)
    critic = None
    if args.model:
        nets = nn.load_checkpoint(args.model)
        _, ext = _find_role(nets, "extractor")
        if any(r.startswith("critic.") for _, _, r in nets):
            from .critic import Critic
            critic = Critic.from_nets(nets)
    else:
        ext = nn.init_params(spec, np.random.default_rng(cfg.rng_seed))

    def checkpoint(it, e, c):
        nn.save_checkpoint(out["checkpoint"], [(spec, e, "extractor")] + c.to_nets())
        log.info("checkpoint at iteration %d", it)

    ext, critic, report = train_joint(ext, critic, ds.subset(g_idx), cfg, checkpoint=checkpoint)
    nn.save_checkpoint(out["model"], [(spec, ext, "extractor")] + critic.to_nets())
    report.write_csv(out["report"])
    n = max(1, len(report.critic_estimate) // 10)
    print(f"train: triplet loss {np.mean(report.triplet_loss[-n:]):.4f}, "
          f"critic estimate {np.mean(report.critic_estimate[:n]):.4f} -> {np.mean(report.critic_estimate[-n:]):.4f}")


def _lambda_for(spec, cfg):
    return normalization_factor(CodePrior(spec.output_dim, cfg.code_p, cfg.lambda_mode))


def cmd_encode(args, cfg, synth, bench, out):
    ds = load_features(args.dataset)
    spec, ext = _find_role(nn.load_checkpoint(args.model), "extractor")
    codes = encode_dataset(ext, spec, ds, _lambda_for(spec, cfg))
    save_codes(out["codes"], codes)
    print(f"encoded {len(codes)} records to {codes.m}-bit codes, bit mean {codes.bits().mean():.3f}")


def cmd_eval(args, cfg, synth, bench, out):
    ds = load_features(args.dataset)
    q_idx, g_idx = _train_split(ds, cfg)
    ids, views = ds.identities, ds.views
    if args.codes:
        codes = load_codes(args.codes)
        if len(codes) != len(ds):
            raise FormatError(f"{len(codes)} codes for {len(ds)} dataset records")
        index = build_index(codes[g_idx], (ids[g_idx], views[g_idx]))
        queries = [codes[int(i)] for i in q_idx]
        extra = {"kind": "binary", "bits": codes.m}
    else:
        spec, ext = _find_role(nn.load_checkpoint(args.model), "extractor")
        z = extract(ext, spec, ds)
        index = build_euclidean_index(z[g_idx], (ids[g_idx], views[g_idx]))
        queries = z[q_idx]
        extra = {"kind": "real", "dim": z.shape[1]}
    report = evaluate_index(index, queries, ids[q_idx], views[q_idx])
    report.to_csv(out["report"], extra)
    print(f"eval: rank-1 {report.rank(1):.4f}, mAP {report.map:.4f} over {len(q_idx)} queries")


def cmd_bench(args, cfg, synth, bench, out):
    rng = np.random.default_rng(cfg.rng_seed)
    if args.codes:
        codes = load_codes(args.codes)
    else:
        codes = sample_codes(CodePrior(cfg.code_length, cfg.code_p, cfg.lambda_mode), bench.gallery_size, rng)
    lam = normalization_factor(CodePrior(codes.m, cfg.code_p, cfg.lambda_mode))
    nq = min(bench.queries, len(codes))
    q_rows = rng.choice(len(codes), size=nq, replace=False)
    q_codes = codes[np.sort(q_rows)]
    binary = benchmark(build_index(codes), q_codes, bench.repetitions)
    # float baseline over the same vectors; built in chunks to bound peak memory
    feats = np.empty((len(codes), codes.m), np.float32)
    for s in range(0, len(codes), 8192):
        feats[s:s + 8192] = normalize_uniform(codes[s:s + 8192], lam)
    real = benchmark(feats, normalize_uniform(q_codes, lam), bench.repetitions)
    write_bench_csv(out["report"], [binary, real])
    print(f"bench: n={len(codes)} m={codes.m} binary {binary.median_query_seconds * 1e3:.3f} ms/query, "
          f"float {real.median_query_seconds * 1e3:.3f} ms/query, "
          f"memory ratio {real.memory_bytes / binary.memory_bytes:.1f}")


OUTPUTS = {
    "synth": {"dataset": "dataset.abcf"},
    "pretrain": {"model": "pretrain.abcm", "report": "pretrain_report.csv"},
    "train": {"model": "model.abcm", "report": "train_report.csv", "checkpoint": "checkpoint.abcm"},
    "encode": {"codes": "codes.abcb"},
    "eval": {"report": "eval.csv"},
    "bench": {"report": "bench.csv"},
}
HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "encode": cmd_encode,
            "eval": cmd_eval, "bench": cmd_bench}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides rng_seed and synth.rng_seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--bits", type=int, help="code length m")
    common.add_argument("--lambda-mode", choices=("norm-matching", "paper-literal"))
    common.add_argument("--no-l2norm", action="store_true", help="skip the l2 head (ablation)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="abcode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("synth", parents=[common], help="generate a synthetic identity dataset (ABCF)")
    for name, text in (("pretrain", "classification pretraining"), ("train", "joint triplet + adversarial training")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--dataset", type=Path, required=True)
        if name == "train":
            p.add_argument("--model", type=Path, help="start from this checkpoint (e.g. pretrain.abcm)")
    p = sub.add_parser("encode", parents=[common], help="binarize extractor outputs (ABCB)")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p = sub.add_parser("eval", parents=[common], help="cross-view CMC / mAP")
    p.add_argument("--dataset", type=Path, required=True, help="labels and split source")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--codes", type=Path, help="evaluate binary codes")
    src.add_argument("--model", type=Path, help="evaluate real-valued extractor features")
    p = sub.add_parser("bench", parents=[common], help="binary vs float scan timing and memory")
    p.add_argument("--codes", type=Path, help="gallery codes; random codes when omitted")
    return parser


def resolve_settings(args) -> dict:
    values = parse_config_text(args.config.read_text()) if args.config else {}
    overrides = {}
    if args.seed is not None:
        overrides.update({"rng_seed": args.seed, "synth.rng_seed": args.seed})
    if args.bits is not None:
        overrides["code_length"] = args.bits
    if args.lambda_mode:
        overrides["lambda_mode"] = args.lambda_mode
    if args.no_l2norm:
        overrides["l2_normalize_enabled"] = False
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _typed(key.strip(), value)
    values.update(overrides)
    return values


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, synth, bench = build_configs(resolve_settings(args))
        args.out.mkdir(parents=True, exist_ok=True)
        out = {k: args.out / v for k, v in OUTPUTS[args.command].items()}
        inputs = {k: getattr(args, k) for k in ("dataset", "model", "codes") if getattr(args, k, None)}
        manifest = RunManifest(args.out / f"{args.command}_manifest.json", args.command, argv,
                               snapshot(cfg, synth, bench), inputs, out)
        HANDLERS[args.command](args, cfg, synth, bench, out)
        manifest.finish()
    except (AbcError, ValueError, OSError) as exc:
        print(f"abcode {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
