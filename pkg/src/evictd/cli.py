"""Command-line surface: verify, bench, retention-report, run, train.

Every command is deterministic under a fixed seed (bench timings aside) and
stamps each artifact it writes with a run manifest.  Exit codes: 0 success,
1 property failure, 2 usage or configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import bench as bn
from . import manifest as mf
from . import model as md
from . import report as rpt
from . import training as tr
from . import verify as vf
from .config import PRESETS, ModelConfig, preset

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _load_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            return ModelConfig.from_json(fh.read())
    return preset(args.preset)


def _config_args(sub):
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--preset", choices=sorted(PRESETS), default="toy",
                       help="named model shape (default: toy)")
    group.add_argument("--config", help="path to a JSON config file")


# ---------------------------------------------------------------------------
# verify


def _cmd_verify(args) -> int:
    names = sorted(vf.SUITES) if args.suite == "all" else [args.suite]
    report = vf.run_suites(names, seed=args.seed)
    man = mf.build_manifest(
        "verify", args.seed, params={"suites": names},
        outputs=[args.out] if args.out else [],
    )
    doc = {"manifest": man}
    doc.update(report)
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        mf.write_text_atomic(args.out, text + "\n")
    print(text)
    for suite in report["suites"]:
        for prop in suite["properties"]:
            mark = "PASS" if prop["ok"] else "FAIL"
            print(f"[{mark}] {suite['suite']}.{prop['property']}", file=sys.stderr)
    return EXIT_OK if report["ok"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# bench


def _cmd_bench(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",") if x]
    mixers = [m.strip() for m in args.mixers.split(",") if m.strip()]
    for m in mixers:
        if m not in bn.MIXERS:
            raise ValueError(f"unknown mixer {m!r}; choose from {bn.MIXERS}")
    rows = bn.run_bench(mixers, lengths, reps=args.reps, seed=args.seed)
    man = mf.build_manifest(
        "bench", args.seed,
        params={"lengths": lengths, "reps": args.reps, "mixers": mixers},
        outputs=[args.out],
    )
    mf.write_csv(args.out, bn.BENCH_HEADER, bn.rows_as_csv_lists(rows), man)
    print(f"wrote {args.out} ({len(rows)} rows)")
    if not args.no_plot:
        plot_path = args.plot or os.path.splitext(args.out)[0] + ".png"
        bn.plot_bench(rows, plot_path, man)
        print(f"wrote {plot_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# retention report


def _cmd_retention_report(args) -> int:
    if args.samples < 16:
        raise ValueError("retention rates need at least 16 samples")
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ck = tr.load_checkpoint(args.checkpoint)
    rates, layers = rpt.retention_matrix(
        ck["params"], ck["config"], n_samples=args.samples, seed=args.seed
    )
    man = mf.build_manifest(
        "retention-report", args.seed,
        config=json.loads(ck["config"].to_json()),
        params={"checkpoint": args.checkpoint, "samples": args.samples},
        outputs=[args.out],
    )
    header, rows = rpt.rates_csv_rows(rates, layers)
    mf.write_csv(args.out, header, rows, man)
    print(f"wrote {args.out}")
    if not args.no_plot:
        plot_path = args.plot or os.path.splitext(args.out)[0] + ".png"
        rpt.plot_retention_heatmap(rates, layers, plot_path, man)
        print(f"wrote {plot_path}")
    print(f"cross-head coefficient of variation: {rpt.cross_head_cv(rates):.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    params = md.init_params(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    session = md.DecodeSession(cfg, params, record_trace=args.check)

    prompt = rng.integers(0, cfg.vocab_size, size=args.prompt_len)
    all_logits = [session.prefill(prompt)]
    decoded = []
    if args.mode == "decode":
        stream = rng.integers(0, cfg.vocab_size, size=args.steps)
        for tok in stream:
            decoded.append(int(tok))
            all_logits.append(session.step(int(tok))[None, :])
    logits = np.concatenate(all_logits, axis=0)

    payload = {
        "mode": args.mode,
        "prompt": prompt.tolist(),
        "decoded_stream": decoded,
        "n_positions": int(logits.shape[0]),
        "logits_sha256": hashlib.sha256(
            np.ascontiguousarray(logits).tobytes()
        ).hexdigest(),
        "final_top5": np.argsort(logits[-1])[::-1][:5].tolist(),
        "cache": {
            str(i): session.caches[i].report()
            for i, kind in enumerate(cfg.pattern)
            if kind == "lte" and cfg.retention_override is None
        },
    }
    status = EXIT_OK
    if args.check:
        dev = session.replay_check()
        payload["replay_max_abs_dev"] = dev
        if dev > 1e-10:
            print(f"replay check FAILED: max deviation {dev:.3e}", file=sys.stderr)
            status = EXIT_FAIL
        else:
            print(f"replay check passed: max deviation {dev:.3e}")
    if args.out:
        man = mf.build_manifest(
            "run", args.seed, config=json.loads(cfg.to_json()),
            params={
                "mode": args.mode, "prompt_len": args.prompt_len,
                "steps": args.steps, "check": bool(args.check),
            },
            outputs=[args.out],
        )
        mf.write_json(args.out, payload, man)
        print(f"wrote {args.out}")
    return status


# ---------------------------------------------------------------------------
# train


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    settings = tr.TrainSettings(
        lr=args.lr, batch_size=args.batch_size,
        sparsity=not args.no_sparsity,
        total_steps=args.total_steps,
    )
    man = mf.build_manifest(
        "train", args.seed, config=json.loads(cfg.to_json()),
        params={
            "task": args.task, "steps": args.steps, "lr": args.lr,
            "batch_size": args.batch_size, "resume": args.resume,
            "sparsity": not args.no_sparsity,
        },
        outputs=[os.path.join(args.out, "checkpoint.json"),
                 os.path.join(args.out, "metrics.ndjson")],
    )
    metrics_path = os.path.join(args.out, "metrics.ndjson")
    tmp_path = metrics_path + ".tmp"
    try:
        with open(tmp_path, "w") as fh:
            fh.write(json.dumps({"manifest": man}) + "\n")
            result = tr.train_toy(
                cfg, steps=args.steps, seed=args.seed, task=args.task,
                settings=settings, out_dir=args.out, metrics_fh=fh,
                resume=args.resume,
            )
    except tr.TrainingDiverged as exc:
        os.replace(tmp_path, metrics_path)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    os.replace(tmp_path, metrics_path)
    final = result["metrics"][-1]["loss"] if result["metrics"] else None
    print(
        f"trained to step {result['step']}"
        + (f", final loss {final:.4f}" if final is not None else "")
    )
    print(f"wrote {os.path.join(args.out, 'checkpoint.json')}")
    print(f"wrote {metrics_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="evictd",
        description="Learned token eviction: verification, benchmarks, "
                    "reports, simulation, and toy training.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run oracle-equivalence property suites")
    v.add_argument("--suite", choices=sorted(vf.SUITES) + ["all"], default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="also write the JSON report here")
    v.set_defaults(fn=_cmd_verify)

    b = sub.add_parser("bench", help="prefill cost benchmarks (CSV + plot)")
    b.add_argument("--lengths", default="256,512,1024",
                   help="comma-separated ascending sequence lengths")
    b.add_argument("--mixers", default=",".join(bn.MIXERS))
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="CSV output path")
    b.add_argument("--plot", help="PNG path (default: CSV path with .png)")
    b.add_argument("--no-plot", action="store_true")
    b.set_defaults(fn=_cmd_bench)

    r = sub.add_parser("retention-report",
                       help="per-layer per-head retention rates (CSV + heatmap)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--samples", type=int, default=16)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="CSV output path")
    r.add_argument("--plot", help="PNG path (default: CSV path with .png)")
    r.add_argument("--no-plot", action="store_true")
    r.set_defaults(fn=_cmd_retention_report)

    run = sub.add_parser("run", help="prefill/decode simulation on random streams")
    run.add_argument("--mode", choices=("prefill", "decode"), required=True)
    _config_args(run)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--prompt-len", type=int, default=48)
    run.add_argument("--steps", type=int, default=64,
                     help="decode steps (decode mode only)")
    run.add_argument("--check", action="store_true",
                     help="verify decode outputs against the replay oracle")
    run.add_argument("--out", help="JSON output path")
    run.set_defaults(fn=_cmd_run)

    t = sub.add_parser("train", help="toy passkey training")
    _config_args(t)
    t.add_argument("--task", choices=("passkey",), default="passkey")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--total-steps", type=int, default=None,
                   help="schedule horizon when resuming in stages")
    t.add_argument("--no-sparsity", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(fn=_cmd_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
