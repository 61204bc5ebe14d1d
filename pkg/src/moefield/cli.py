"""Command line: gen-scene, train, eval, sweep, ensemble-analyze."""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .ensemble import PairedPredictions, error_gap, gap_sq, optimal_alpha, sweep_argmax, sweep_csv
from .experts import build_bank
from .imageio import write_png
from .metrics import (evaluate, evaluate_expert, render_gate_image, render_moe_image)
from .moe import ensemble_moe
from .scene import Dataset, get_scene, load_dataset, make_dataset, save_dataset
from .trainer import (MoETrainer, TrainConfig, build_moe, load_moe, pretrain_experts, save_moe,
                      train_single_experts)

log = logging.getLogger("moefield")


@dataclass
class RunConfig:
    """Everything a run needs. Config files hold ``key = value`` lines for these fields."""

    train: TrainConfig = field(default_factory=TrainConfig)
    scene: str = "three-spheres-multifreq"
    data: str = ""  # dataset directory; generated from ``scene`` when empty
    out_dir: str = "run"
    width: int = 64
    height: int = 64
    n_train: int = 16
    n_test: int = 4
    data_seed: int = 0
    eval_samples: int = 64

    @classmethod
    def keys(cls) -> list[str]:
        return TrainConfig.field_names() + [f.name for f in fields(cls) if f.name != "train"]

    def set(self, key: str, raw: str) -> None:
        if key in TrainConfig.field_names():
            target = self.train
        elif key in self.keys():
            target = self
        else:
            raise ValueError(f"unknown config key {key!r}; known keys: {', '.join(self.keys())}")
        current = getattr(target, key)
        setattr(target, key, _coerce(raw, type(current), key))

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in dataclasses.asdict(self.train).items()]
        lines += [f"{f.name} = {getattr(self, f.name)}" for f in fields(self) if f.name != "train"]
        return "\n".join(lines) + "\n"


def _coerce(raw: str, kind: type, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    cfg.train.validate()
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return parse_config(f.read())


@contextlib.contextmanager
def thread_limit(n: int | None):
    """Cap BLAS threads; MOEFIELD_THREADS wins over the flag."""
    env = os.environ.get("MOEFIELD_THREADS")
    if env:
        n = int(env)
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _dataset_for(cfg: RunConfig) -> Dataset:
    if cfg.data:
        return load_dataset(cfg.data)
    return make_dataset(get_scene(cfg.scene), cfg.n_train, cfg.n_test, cfg.width, cfg.height,
                        seed=cfg.data_seed)


def _check_finite(values, what: str) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


# ----------------------------------------------------------------------------
# commands


def cmd_gen_scene(args) -> int:
    scene = get_scene(args.scene)
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    ds = make_dataset(scene, args.n_train, args.n_test, args.width, args.height, seed=args.seed)
    written = save_dataset(ds, out)
    print(f"wrote {len(written) - 1} images and manifest to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    cfg.train.validate()
    ckpt = os.path.join(cfg.out_dir, "checkpoint")
    dataset = _dataset_for(cfg)
    if args.resume:
        trainer = MoETrainer.resume(ckpt, dataset)
        trainer.config.joint_iters = cfg.train.joint_iters
    else:
        if os.path.exists(os.path.join(ckpt, "trainer.json")) and not args.force:
            raise FileExistsError(f"{ckpt} already holds a run (use --resume or --force)")
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "config.txt"), "w") as f:
            f.write(cfg.to_text())
        bank = build_bank(cfg.train.base_resolution, cfg.train.M, cfg.train.seed, dtype=cfg.train.np_dtype)
        pretrain_experts(bank, dataset, cfg.train)
        save_moe(build_moe(bank, cfg.train), os.path.join(cfg.out_dir, "pretrained"))
        trainer = MoETrainer(build_moe(bank, cfg.train), dataset, cfg.train)
    remaining = max(0, trainer.config.joint_iters - trainer.iteration)
    every = args.checkpoint_every or remaining
    while remaining > 0:
        n = min(every, remaining)
        trainer.run(n)
        remaining -= n
        trainer.save(ckpt)
    if not os.path.exists(os.path.join(ckpt, "trainer.json")):
        trainer.save(ckpt)
    report = trainer.report
    _check_finite(report.l_tot, "training losses")
    with open(os.path.join(cfg.out_dir, "train_report.csv"), "w") as f:
        f.write(report.to_csv())
    last = report.l_tot[-1] if report.l_tot else float("nan")
    print(f"trained {trainer.iteration} joint iterations, final loss {last:.6g}; checkpoint in {ckpt}")
    return 0


def cmd_eval(args) -> int:
    ckpt = args.checkpoint
    if not os.path.exists(os.path.join(ckpt, "moe.json")):
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    moe = load_moe(ckpt)
    if args.ensemble:
        moe = ensemble_moe(moe)
    dataset = load_dataset(args.data)
    cams, imgs = dataset.split("test")
    out = args.out
    os.makedirs(out, exist_ok=True)
    with ad.no_grad():
        report, renders = evaluate(moe, cams, imgs, args.n_samples, with_w0=not args.no_w0)
    _check_finite([report.psnr, report.ssim, report.gflops], "evaluation report")
    with open(os.path.join(out, "eval_report.csv"), "w") as f:
        f.write(report.to_csv())
    with ad.no_grad():
        for v, (cam, img) in enumerate(zip(cams, renders)):
            write_png(os.path.join(out, f"test_{v:03d}.png"), img)
            for e in range(moe.M):
                only = render_moe_image(moe, cam, args.n_samples, only_expert=e)
                write_png(os.path.join(out, f"test_{v:03d}_expert{e}.png"), only)
                gate = render_gate_image(moe, cam, e, args.n_samples)
                write_png(os.path.join(out, f"test_{v:03d}_gate{e}.png"), gate)
    print(f"psnr {report.psnr:.3f} dB, ssim {report.ssim:.4f}, w0 {report.w0}, "
          f"{report.gflops:.4f} GFLOPs/image; outputs in {out}")
    return 0


SWEEP_AXES = ("topk", "penalty", "resolution")


def run_sweep(cfg: RunConfig, axis: str) -> list[dict]:
    """Rows of (setting, psnr, gflops, w0) for one ablation axis."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    tc = cfg.train.validate()
    dataset = _dataset_for(cfg)
    cams, imgs = dataset.split("test")
    rows = []
    if axis == "resolution":
        bank = train_single_experts(dataset, tc)
        for e in bank:
            rep, _ = evaluate_expert(e, cams, imgs, cfg.eval_samples)
            rows.append({"setting": "x".join(map(str, e.resolution)), "psnr": rep.psnr,
                         "gflops": rep.gflops, "w0": rep.w0})
        return rows
    bank = build_bank(tc.base_resolution, tc.M, tc.seed, dtype=tc.np_dtype)
    pretrain_experts(bank, dataset, tc)
    if axis == "topk":
        settings = [("k", k) for k in range(1, tc.M + 1)]
    else:
        settings = [("penalty", p) for p in ("none", "linear", "geometric", "quadratic")]
    for key, value in settings:
        run_cfg = dataclasses.replace(tc, **{key: value})
        moe = build_moe(bank.copy(), run_cfg)
        MoETrainer(moe, dataset, run_cfg).run(run_cfg.joint_iters)
        with ad.no_grad():
            rep, _ = evaluate(moe, cams, imgs, cfg.eval_samples)
        rows.append({"setting": f"{key}={value}", "psnr": rep.psnr, "gflops": rep.gflops, "w0": rep.w0})
    return rows


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    rows = run_sweep(cfg, args.axis)
    _check_finite([[r["psnr"], r["gflops"]] for r in rows], "sweep results")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["setting", "psnr", "gflops", "w0"])
    w.writeheader()
    w.writerows(rows)
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_ensemble_analyze(args) -> int:
    rng = np.random.default_rng(args.seed)
    p = PairedPredictions.random(rng, args.J)
    de, d2 = error_gap(p), gap_sq(p)
    table = sweep_csv(p, args.step)
    _emit(table, args.out)
    summary = {"delta_e": de, "gap_sq": d2, "sweep_argmax": sweep_argmax(p, args.step),
               "alpha_unit_gap": optimal_alpha(de), "alpha_exact": optimal_alpha(de, d2)}
    print(json.dumps(summary), file=sys.stderr)
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        parent = os.path.dirname(out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moefield", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (MOEFIELD_THREADS overrides)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic dataset to disk")
    g.add_argument("scene")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--n-train", type=int, default=16)
    g.add_argument("--n-test", type=int, default=4)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="pre-train experts, then train the mixture")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint and write renders")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--n-samples", type=int, default=64)
    e.add_argument("--ensemble", action="store_true", help="every expert with a uniform gate")
    e.add_argument("--no-w0", action="store_true", help="skip the active-parameter count")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="ablation over top-k, penalty or resolution")
    s.add_argument("axis", choices=SWEEP_AXES)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ensemble-analyze", help="alpha sweep of two-predictor mixing")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--J", type=int, default=16)
    a.add_argument("--step", type=float, default=1e-3)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ensemble_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit(args.threads):
            return args.func(args)
    except (ValueError, FileExistsError, FileNotFoundError, FloatingPointError) as exc:
        print(f"moefield {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
