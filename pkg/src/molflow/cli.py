"""Command-line entry point: corpus generation, training, sampling, guidance,
evaluation and the ablation sweeps.

Settings resolve as: built-in defaults < ``<run_dir>/config.txt`` <
``--config FILE`` < ``--set key=value`` / named flags. Every invocation logs
its resolved settings under ``logs/``; a successful one also writes them back
to ``<run_dir>/config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import bounds_matrix, dump_csv
from .chem import Molecule, SYMBOLS
from .data import CorpusError, format_xyz, gen_synthetic, read_corpus, size_sampler, write_corpus
from .flow import TrainConfig, jsonl_logger, train
from .metrics import equivariance_curve, evaluate, renoise_probe
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .rng import stream
from .sampler import GuidanceConfig, ModelPredictor, SampleConfig, sample

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "corpus": "",
    "test_corpus": "",
    "ckpt": "",
    "n_train": 500,
    "n_test": 64,
    # model
    "hidden_size": 64,
    "n_blocks": 4,
    "n_heads": 4,
    "max_len": 72,
    "positional_encoding": True,
    "precondition": True,
    "sigma_data": 1.3,
    # training
    "steps": 20000,
    "alpha": 1.8,
    "lambda_discrete": 0.1,
    "ema_decay": 0.999,
    "n_rot_augs": 8,
    "rotate": True,
    "batch_size": 4,
    "lr": 0.001,
    "grad_clip": 10.0,
    "lr_schedule": "cosine",
    "warmup_steps": 200,
    "lr_min": 0.0,
    "log_every": 100,
    # sampling
    "n_samples": 256,
    "n_steps": 100,
    "g_kind": "inv_t",
    "eps_g": 0.01,
    "gamma": 0.01,
    "g_cutoff": 0.9,
    "schedule": "logarithmic",
    "noise_literal": False,
    "ema": True,
    "t_guidance": 0.99,
    "alpha_phys": 0.01,
    "guidance_iters": 1,
    "guidance_mode": "network",
    # probes
    "n_probe_mols": 32,
    "n_rot": 64,
    "t_grid": "0.1,0.3,0.5,0.7,0.9",
    "tau_grid": "0,0.5,0.8,0.9,0.95",
    "ablate_train_steps": 2000,
}

ABLATION_GRIDS = {
    "alpha": [1.5, 1.8, 2.0],
    "g_kind": ["zero", "inv_t", "inv_t2", "one_minus_t_over_t"],
    "steps": [10, 20, 30, 40, 50, 100, 200, 500],
    "gamma": [0.0, 0.001, 0.01, 0.1, 1.0],
    "rotation": ["augmented", "rotate_only", "none"],
}


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown setting {key!r}")
    proto = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config(text: str) -> dict[str, object]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def format_config(cfg: dict[str, object]) -> str:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg))


class Run:
    """A resolved configuration bound to a run directory."""

    SUBDIRS = ("checkpoints", "samples", "metrics", "logs")

    def __init__(self, run_dir: Path, cfg: dict[str, object]):
        self.dir = run_dir
        self.cfg = cfg

    @classmethod
    def open(cls, args) -> "Run":
        run_dir = Path(args.run_dir)
        cfg = dict(DEFAULTS)
        stored = run_dir / "config.txt"
        if stored.exists():
            cfg.update(parse_config(stored.read_text()))
        if args.config:
            try:
                cfg.update(parse_config(Path(args.config).read_text()))
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg[k.strip()] = _coerce(k.strip(), v)
        for key, value in vars(args).items():
            if key in DEFAULTS and value is not None:
                cfg[key] = value
        run = cls(run_dir, cfg)
        for sub in cls.SUBDIRS:
            (run_dir / sub).mkdir(parents=True, exist_ok=True)
        run.path("logs", f"{args.command}.config.txt").write_text(format_config(cfg))
        return run

    def save(self) -> None:
        (self.dir / "config.txt").write_text(format_config(self.cfg))

    def __getitem__(self, key):
        return self.cfg[key]

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    # builders -------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                hidden_size=self["hidden_size"],
                n_blocks=self["n_blocks"],
                n_heads=self["n_heads"],
                max_len=self["max_len"],
                use_positional_encoding=self["positional_encoding"],
                precondition=self["precondition"],
                sigma_data=self["sigma_data"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, **override) -> TrainConfig:
        keys = (
            "alpha", "lambda_discrete", "ema_decay", "n_rot_augs", "rotate", "batch_size", "lr", "grad_clip", "steps",
            "lr_schedule", "warmup_steps", "lr_min",
        )
        try:
            return TrainConfig(**{**{k: self[k] for k in keys}, **override})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sample_config(self, guided: bool = False, **override) -> SampleConfig:
        try:
            gc = GuidanceConfig(
                enabled=guided,
                t_guidance=self["t_guidance"],
                alpha_phys=self["alpha_phys"],
                n_iters=self["guidance_iters"],
                mode=self["guidance_mode"],
            )
            if gc.mode not in ("network", "direct"):
                raise ValueError(f"unknown guidance_mode {gc.mode!r}")
            keys = ("n_steps", "g_kind", "eps_g", "gamma", "g_cutoff", "schedule", "noise_literal")
            sc = SampleConfig(**{**{k: self[k] for k in keys}, **override}, guidance=gc)
            if sc.schedule not in ("uniform", "logarithmic"):
                raise ValueError(f"unknown schedule {sc.schedule!r}")
            return sc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid(self, key: str) -> list[float]:
        try:
            return [float(v) for v in str(self[key]).split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad grid for {key}") from exc

    # data -----------------------------------------------------------------
    def corpus(self, key: str = "corpus", required: bool = True):
        path = self[key]
        if not path:
            if required:
                raise DataError(f"no {key} configured (use --{key.replace('_', '-')})")
            return None
        if not Path(path).exists():
            raise DataError(f"{key} not found: {path}")
        return read_corpus(path)

    def size_source(self):
        return self.corpus("test_corpus", required=False) or self.corpus("corpus")

    def model(self) -> ModelParams:
        path = self["ckpt"]
        if not path or not Path(path).exists():
            raise DataError(f"missing checkpoint: {path or '(none configured)'}")
        try:
            return load_checkpoint(path)
        except ValueError as exc:
            raise DataError(f"unreadable checkpoint {path}: {exc}") from exc

    def predictor(self) -> ModelPredictor:
        mp = self.model()
        try:
            return ModelPredictor(mp.select(self["ema"]), mp.config)
        except ValueError as exc:
            raise DataError(str(exc)) from exc


def versioned(path: Path) -> Path:
    """``path`` if free, else the first free ``stem.vK.suffix``."""
    if not path.exists():
        return path
    k = 1
    while True:
        cand = path.with_name(f"{path.stem}.v{k}{path.suffix}")
        if not cand.exists():
            return cand
        k += 1


def _out_path(args, default: Path) -> Path:
    return Path(args.out) if getattr(args, "out", None) else versioned(default)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(run: Run, args) -> int:
    seed = run["seed"]
    corpus = gen_synthetic(run["n_train"] + run["n_test"], stream(seed, "data"))
    train_c, test_c = corpus.split_off(run["n_test"], stream(seed, "split"))
    out = Path(args.out) if args.out else run.path("corpus.xyz")
    write_corpus(out, train_c, split="train")
    run.cfg["corpus"] = str(out)
    if len(test_c):
        test_out = out.with_name(out.stem + "_test" + out.suffix)
        write_corpus(test_out, test_c, split="test")
        run.cfg["test_corpus"] = str(test_out)
    run.save()
    print(f"wrote {len(train_c)} training molecules to {out}; size histogram {train_c.size_histogram()}")
    return EXIT_OK


def _train_model(run: Run, corpus, tc: TrainConfig, model_cfg: ModelConfig, log_path: Path, seed: int) -> ModelParams:
    mp = ModelParams.create(model_cfg, stream(seed, "init"))
    log = jsonl_logger(log_path)
    try:
        train(mp, list(corpus), tc, stream(seed, "train"), log=log, log_every=run["log_every"])
    finally:
        log.close()
    return mp


def cmd_train(run: Run, args) -> int:
    corpus = run.corpus()
    if len(corpus) == 0:
        raise DataError("training corpus is empty")
    tc = run.train_config()
    mc = run.model_config()
    t0 = time.time()
    mp = _train_model(run, corpus, tc, mc, run.path("logs", "train.jsonl"), run["seed"])
    out = Path(args.out) if args.out else run.path("checkpoints", "model.tbsc")
    save_checkpoint(mp, out)
    run.cfg["ckpt"] = str(out)
    run.save()
    print(f"trained {tc.steps} steps in {time.time() - t0:.1f}s; checkpoint {out}")
    return EXIT_OK


def _sizes(run: Run, args, n: int, seed: int):
    if getattr(args, "atoms", None):
        return [args.atoms] * n
    return list(size_sampler(run.size_source(), stream(seed, "sizes"), n))


def _write_trajectory(path: Path, trajs) -> None:
    buf = io.StringIO()
    for k, traj in enumerate(trajs):
        for snap in traj:
            mol = Molecule(np.clip(snap.a_t, 0, len(SYMBOLS) - 1), snap.x_t)
            mol.meta.update({"id": str(k), "t": f"{snap.t:.6f}"})
            buf.write(format_xyz([mol]))
    path.write_text(buf.getvalue())


def _do_sample(run: Run, args, guided: bool) -> int:
    seed = run["seed"]
    n = run["n_samples"]
    predictor = run.predictor()
    sizes = _sizes(run, args, n, seed)
    cfg = run.sample_config(guided=guided)
    res = sample(predictor, sizes, cfg, seed=seed, return_trajectory=args.trajectory)
    mols, trajs = res if args.trajectory else (res, None)
    stem = f"{'guided' if guided else 'sample'}-seed{seed}"
    out = _out_path(args, run.path("samples", stem + ".xyz"))
    for k, m in enumerate(mols):
        m.meta["id"] = str(k)
    write_corpus(out, mols, split="sample")
    print(f"wrote {len(mols)} molecules to {out}")
    if trajs is not None:
        tpath = versioned(run.path("samples", stem + "-trajectory.xyz"))
        _write_trajectory(tpath, trajs)
        print(f"wrote trajectory snapshots to {tpath}")
    return EXIT_OK


def cmd_sample(run: Run, args) -> int:
    return _do_sample(run, args, guided=False)


def cmd_guide(run: Run, args) -> int:
    return _do_sample(run, args, guided=True)


def _train_hashes(run: Run):
    from .chem import perceive_bonds, wl_hash

    corpus = run.corpus(required=False)
    return None if corpus is None else {wl_hash(m, perceive_bonds(m)) for m in corpus}


def cmd_evaluate(run: Run, args) -> int:
    path = Path(args.samples)
    if not path.exists():
        raise DataError(f"samples not found: {path}")
    mols = read_corpus(path).molecules
    report = evaluate(mols, _train_hashes(run))
    stem = path.stem
    run.path("metrics", stem + ".jsonl").write_text(report.to_jsonl())
    summary = report.summary()
    run.path("metrics", stem + ".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _probe_mols(run: Run):
    src = run.size_source()
    return list(src)[: run["n_probe_mols"]]


def cmd_equiv_error(run: Run, args) -> int:
    probe = equivariance_curve(run.predictor(), _probe_mols(run), run.grid("t_grid"), run["n_rot"], stream(run["seed"], "equiv"))
    out = _out_path(args, run.path("metrics", "equiv.csv"))
    out.write_text(probe.to_csv())
    sys.stdout.write(probe.to_csv())
    return EXIT_OK


def cmd_renoise(run: Run, args) -> int:
    rates = renoise_probe(run.predictor(), _probe_mols(run), run.grid("tau_grid"), run.sample_config(), run["seed"])
    text = "tau,pb_rate\n" + "".join(f"{t:.6f},{r:.6f}\n" for t, r in rates.items())
    out = _out_path(args, run.path("metrics", "renoise.csv"))
    out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_bounds(run: Run, args) -> int:
    path = Path(args.xyz) if args.xyz else None
    corpus = read_corpus(path) if path else run.corpus()
    if not 0 <= args.index < len(corpus):
        raise DataError(f"index {args.index} out of range for {len(corpus)} molecules")
    text = dump_csv(bounds_matrix(corpus[args.index]))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _metric_row(mols, hashes, seconds) -> dict:
    r = evaluate(mols, hashes)
    return {
        "validity": r.validity,
        "connectivity": r.connectivity,
        "novelty": r.novelty,
        "diversity": r.diversity,
        "pb_rate": r.pb_rate,
        "seconds": round(seconds, 2),
    }


def cmd_ablate(run: Run, args) -> int:
    axis = args.axis
    grid = ABLATION_GRIDS[axis]
    if args.grid:
        proto = type(grid[0])
        grid = [proto(v) for v in args.grid.split(",")]
    seed = run["seed"]
    hashes = _train_hashes(run)
    sizes = _sizes(run, args, run["n_samples"], seed)
    rows = []
    for value in grid:
        t0 = time.time()
        if axis in ("alpha", "rotation"):
            corpus = run.corpus()
            if axis == "alpha":
                tc = run.train_config(alpha=float(value), steps=run["ablate_train_steps"])
            else:
                k = run["n_rot_augs"]
                bs = run["batch_size"]
                mode = {"augmented": (k, True, bs), "rotate_only": (1, True, bs * k), "none": (1, False, bs * k)}
                if value not in mode:
                    raise ConfigError(f"unknown rotation mode {value!r}")
                n_aug, rot, batch = mode[value]
                tc = run.train_config(n_rot_augs=n_aug, rotate=rot, batch_size=batch, steps=run["ablate_train_steps"])
            mp = _train_model(run, corpus, tc, run.model_config(), run.path("logs", f"ablate-{axis}-{value}.jsonl"), seed)
            predictor = ModelPredictor(mp.select(run["ema"]), mp.config)
            cfg = run.sample_config()
        else:
            predictor = run.predictor()
            override = {"steps": {"n_steps": int(value)}, "g_kind": {"g_kind": value}, "gamma": {"gamma": float(value)}}[axis]
            cfg = run.sample_config(**override)
        mols = sample(predictor, sizes, cfg, seed=seed)
        rows.append({"axis": axis, "value": value, **_metric_row(mols, hashes, time.time() - t0)})
        print(json.dumps(rows[-1]), flush=True)
    out = _out_path(args, run.path("metrics", f"ablate-{axis}.csv"))
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _bool_flag(p, name: str, help: str):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action=argparse.BooleanOptionalAction, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molflow", description=__doc__.split("\n\n")[0].replace("\n", " "))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting")
    common.add_argument("--seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n", dest="n_train", type=int, default=None, help="training molecules")
    p.add_argument("--n-test", dest="n_test", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--corpus", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--n-rot-augs", dest="n_rot_augs", type=int, default=None)
    _bool_flag(p, "rotate", "random rotations of training molecules")
    _bool_flag(p, "positional_encoding", "sinusoidal positional encodings")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("sample", cmd_sample, "sample molecules"), ("guide", cmd_guide, "sample with bounds guidance")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--ckpt", default=None)
        p.add_argument("--n", dest="n_samples", type=int, default=None)
        p.add_argument("--atoms", type=int, help="fixed atom count instead of the corpus size histogram")
        p.add_argument("--n-steps", dest="n_steps", type=int, default=None)
        p.add_argument("--g-kind", dest="g_kind", default=None)
        p.add_argument("--gamma", type=float, default=None)
        _bool_flag(p, "ema", "use EMA weights")
        p.add_argument("--trajectory", action="store_true", help="also write per-step snapshots")
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for a sample file")
    p.add_argument("samples")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("equiv-error", parents=[common], help="rotation-variance curve over t")
    p.add_argument("--ckpt", default=None)
    _bool_flag(p, "ema", "use EMA weights")
    p.add_argument("--out")
    p.set_defaults(func=cmd_equiv_error)

    p = sub.add_parser("renoise", parents=[common], help="partial-renoising probe")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--n-steps", dest="n_steps", type=int, default=None)
    _bool_flag(p, "ema", "use EMA weights")
    p.add_argument("--out")
    p.set_defaults(func=cmd_renoise)

    p = sub.add_parser("bounds", parents=[common], help="dump one molecule's bounds matrix as CSV")
    p.add_argument("--xyz", help="corpus file (default: configured corpus)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("ablate", parents=[common], help="sweep one axis; one CSV row per setting")
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_GRIDS))
    p.add_argument("--grid", help="comma-separated values replacing the default grid")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--atoms", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = Run.open(args)
        code = args.func(run, args)
        run.save()  # only a successful command updates the stored settings
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
