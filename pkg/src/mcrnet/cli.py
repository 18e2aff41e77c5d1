"""Command-line harness: generate | meta-train | adapt | eval-sweep | benchmark.

Every command is a pure function of (config file, overrides, seed).  Exit
codes: 0 success, 2 bad config or usage, 3 training divergence, 4 I/O or
file-format problems.  CSV outputs start with '# key=value' lines echoing
the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from . import __version__
from .channel import ChannelConfig, apply_channel
from .config import ExperimentConfig
from .data import generate_psi, nmse, sample_task, save_dataset
from .errors import (ConfigError, DivergenceError, FormatError, GeometryError,
                     ShapeError, ZeroReferenceError)
from .meta import evaluate_adaptation, joint_train, meta_train
from .model import count_params, load_weights, save_weights
from .tensor import Tensor


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcrnet",
        description="Compress and reconstruct quantized phase-shift matrices "
                    "with a meta-trained asymmetric autoencoder.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p):
        p.add_argument("--config", help="key=value config file; flags like "
                                        "--seed=3 override individual keys")
        p.add_argument("--deterministic", action="store_true",
                       help="pin the BLAS pool to one thread for bit-exact reruns")

    p = sub.add_parser("generate", help="write a PSID dataset from one task draw")
    common(p)
    p.add_argument("--out", required=True, help="output .psid path")

    p = sub.add_parser("meta-train", help="meta-train and save best weights + report")
    common(p)
    p.add_argument("--out-weights", default="weights.mcrw")
    p.add_argument("--out-report", default="train_report.csv")
    p.add_argument("--joint", action="store_true",
                   help="plain pooled-batch training instead of meta-training")

    p = sub.add_parser("adapt", help="few-shot adapt saved weights to one task")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--task-seed", type=int, default=0)

    p = sub.add_parser("eval-sweep", help="NMSE versus SNR for saved weights")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--snr-list", default="0,5,10,15,20",
                   help="comma-separated SNR points in dB")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--out", required=True, help="output metrics CSV path")

    p = sub.add_parser("benchmark", help="parameter counts and inference timings")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--machine", action="store_true",
                   help="emit key=value lines instead of prose")
    return parser


def _resolve_config(args, extras) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg.apply_overrides(extras)
    return cfg


def _preamble(cfg: ExperimentConfig) -> list:
    return [f"version={__version__}", *cfg.to_lines()]


def _check_hw(model, cfg: ExperimentConfig) -> None:
    if model.config.hw != cfg.hw:
        raise ConfigError(f"weights expect hw={model.config.hw}, "
                          f"config says {cfg.height}x{cfg.width}={cfg.hw}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args, cfg: ExperimentConfig) -> int:
    spec = cfg.task_spec()
    samples = generate_psi(spec, cfg.count, seed=cfg.seed)
    save_dataset(samples, args.out, spec=spec)
    print(f"wrote {len(samples)} samples ({spec.height}x{spec.width}, "
          f"{spec.bits}-bit) to {args.out}")
    return 0


def cmd_meta_train(args, cfg: ExperimentConfig) -> int:
    train = joint_train if args.joint else meta_train
    model, report = train(cfg.model_config(), cfg.meta_config(), cfg.task_spec(),
                          seed=cfg.seed)
    save_weights(model, args.out_weights)
    with open(args.out_report, "w", encoding="utf-8", newline="") as fh:
        report.write_csv(fh, preamble=_preamble(cfg))
    mode = "joint" if args.joint else "meta"
    print(f"{mode} training finished: {len(report.rows)} iterations, "
          f"stop={report.stop_reason}, best_iter={report.best_iter}")
    print(f"weights -> {args.out_weights}")
    print(f"report  -> {args.out_report}")
    return 0


def cmd_adapt(args, cfg: ExperimentConfig) -> int:
    model = load_weights(args.weights)
    _check_hw(model, cfg)
    task = sample_task(cfg.task_spec(), cfg.k_support, cfg.k_query, seed=args.task_seed)
    channel = cfg.channel_config()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    out = evaluate_adaptation(model, task, alpha=cfg.inner_lr, steps=cfg.inner_steps,
                              channel=channel, rng=rng)
    improvement = 100.0 * (1.0 - out["nmse_post"] / out["nmse_pre"]) \
        if out["nmse_pre"] else 0.0
    print(f"nmse_pre={out['nmse_pre']!r}")
    print(f"nmse_post={out['nmse_post']!r}")
    print(f"improvement_pct={improvement!r}")
    return 0


def cmd_eval_sweep(args, cfg: ExperimentConfig) -> int:
    model = load_weights(args.weights)
    _check_hw(model, cfg)
    try:
        snrs = [float(s) for s in args.snr_list.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--snr-list: cannot parse {args.snr_list!r}") from None
    if not snrs:
        raise ConfigError("--snr-list is empty")
    if args.n_samples < 1:
        raise ConfigError(f"--n-samples must be >= 1, got {args.n_samples}")

    spec = cfg.task_spec()
    pool_ss, chan_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    # one sample per task draw, so the pool covers the task distribution
    samples = [generate_psi(spec, 1, seed=child)[0]
               for child in pool_ss.spawn(args.n_samples)]
    batch = np.stack([s.normalized for s in samples]).astype(model.dtype)[..., None]
    latent = model.encode(Tensor(batch)).data
    chan_children = chan_ss.spawn(len(snrs))

    cr = model.config.compression_ratio
    rows = []
    for snr, child in zip(snrs, chan_children):
        t0 = time.perf_counter()
        channel = cfg.channel_config()
        if channel.mode != "ideal":
            channel = ChannelConfig(mode=channel.mode, snr_db=snr)
        noisy = apply_channel(latent, channel, np.random.default_rng(child))
        recon = model.decode(Tensor(noisy)).data
        value = nmse(recon, batch)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        rows.append((cr, snr, value, cfg.seed, wall_ms))

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        for line in _preamble(cfg):
            fh.write(f"# {line}\n")
        fh.write("cr,snr_db,nmse,seed,wall_ms\n")
        for cr_s, snr, value, seed, wall in rows:
            fh.write(f"{cr_s},{snr!r},{value!r},{seed},{wall:.3f}\n")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _median_ms(fn, warmups: int = 10, reps: int = 100) -> float:
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


def cmd_benchmark(args, cfg: ExperimentConfig) -> int:
    model = load_weights(args.weights)
    counts = count_params(model)
    x = np.zeros((1, model.config.hw, 1), dtype=model.dtype)
    z = model.encode(Tensor(x)).data
    encode_ms = _median_ms(lambda: model.encode(Tensor(x)))
    decode_ms = _median_ms(lambda: model.decode(Tensor(z)))
    if args.machine:
        print(f"version={__version__}")
        for line in model.config.record().strip().splitlines():
            print(line)
        print(f"encoder_params={counts['encoder']}")
        print(f"decoder_params={counts['decoder']}")
        print(f"encode_ms_median={encode_ms!r}")
        print(f"decode_ms_median={decode_ms!r}")
    else:
        c = model.config
        print(f"model: hw={c.hw} channels={c.channels} cr={c.compression_ratio} "
              f"blocks={c.mhsa_blocks} dwcg={c.dwcg_modules}")
        print(f"encoder: {counts['encoder']:,} parameters, "
              f"median encode {encode_ms:.3f} ms")
        print(f"decoder: {counts['decoder']:,} parameters, "
              f"median decode {decode_ms:.3f} ms")
        print("timing: median of 100 single-sample runs after 10 warmups")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "meta-train": cmd_meta_train,
    "adapt": cmd_adapt,
    "eval-sweep": cmd_eval_sweep,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    try:
        args, extras = build_parser().parse_known_args(argv)
        cfg = _resolve_config(args, extras)
        if args.deterministic:
            import threadpoolctl
            with threadpoolctl.threadpool_limits(limits=1):
                return COMMANDS[args.command](args, cfg)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ShapeError, GeometryError, ZeroReferenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
