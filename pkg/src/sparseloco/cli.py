"""Command line entry point: ``sparseloco {run,codec-bench,timing,report}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec
from .config import ConfigError, RunConfig, dump_config, from_dict, load_config
from .core import ParamVector, Rng, chunk_layout, effective_k
from .optimizer import ErrorFeedback, compress_with_ef
from .timing import PRESETS, simulate_timing, timeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("sparseloco")


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    overrides = {}
    for name in ("seed", "rounds", "workers", "out"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides).validate()
    return cfg


def summarize(rounds: list[dict], n_params: int | None = None) -> dict:
    """Run summary computed from RoundLog records alone."""
    if not rounds:
        return {"rounds": 0}
    payloads = [r["mean_payload_bytes"] for r in rounds if r["mean_payload_bytes"] > 0]
    out = {
        "rounds": len(rounds),
        "final_loss": rounds[-1]["train_loss"],
        "mean_active_peers": float(np.mean([r["active_peers"] for r in rounds])),
        "mean_contributing_peers": float(np.mean([r["contributing_peers"] for r in rounds])),
        "mean_utilization": float(np.mean([r["utilization"] for r in rounds])),
        "stalled_rounds": int(sum(r["stalled"] for r in rounds)),
        "final_param_digest": rounds[-1]["global_param_digest"],
        "mean_payload_bytes": float(np.mean(payloads)) if payloads else 0.0,
    }
    if n_params is not None:
        out["n_params"] = n_params
        out["measured_compression_ratio"] = (
            codec.measured_compression_ratio(int(round(out["mean_payload_bytes"])), n_params)
            if payloads
            else None
        )
    return out


def cmd_run(args) -> int:
    from .swarm import Swarm, encode_checkpoint

    cfg = _load(args)
    if args.print_effective_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "effective_config.yaml").write_text(dump_config(cfg))
    swarm = Swarm(cfg)
    n_params = swarm.params.values.size

    def save_checkpoint(tag: str) -> None:
        data = encode_checkpoint(swarm.params, swarm.round, swarm.config_digest)
        (out / "checkpoints" / f"{tag}.ckpt").write_bytes(data)

    with open(out / "rounds.jsonl", "w") as rounds_fh, open(out / "validator.jsonl", "w") as val_fh:
        try:
            for i in range(cfg.rounds):
                rec = swarm.step()
                rounds_fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
                if swarm.validator_log and swarm.validator_log[-1].round == rec.round:
                    val_fh.write(json.dumps(swarm.validator_log[-1].to_json(), sort_keys=True) + "\n")
                if (i + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(f"round_{swarm.round:08d}")
        except OSError as exc:
            log.error("I/O failure at round %d: %s", swarm.round, exc)
            try:
                save_checkpoint("abort")
            except OSError:
                pass
            return EXIT_RUNTIME
    save_checkpoint("final")
    summary = summarize([r.to_json() for r in swarm.logs], n_params)
    summary["name"] = cfg.name
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def codec_bench(cfg: RunConfig, n_values: int = 4096 * 1024, seed: int = 0) -> dict:
    geometry = cfg.geometry()
    layout = (("bench", (n_values,)),)
    g = Rng.for_purpose(seed, "codec-bench").generator()
    delta = ParamVector(g.standard_normal(n_values), layout)
    compressed, _ = compress_with_ef(
        delta, ErrorFeedback.zeros(n_values, cfg.optim.ef_beta), geometry,
        peer_id="bench", quantize=cfg.compression.quant_bits != 0,
    )
    payload = codec.serialize(compressed)
    selected = sum(len(c) for c in compressed.chunks)
    counts = [effective_k(len(ch), geometry) for ch in chunk_layout(layout, geometry)]
    value_bits = cfg.compression.quant_bits or 64
    predicted = codec.serialized_size(counts, quantized=cfg.compression.quant_bits != 0)
    return {
        "C": geometry.C,
        "k": geometry.k,
        "n_values": n_values,
        "selected_values": selected,
        "entropy_bound_bits_per_value": codec.index_entropy_bound(geometry.C, geometry.k),
        "index_bits_per_value": codec.INDEX_BITS,
        "idealized_ratio": codec.compression_ratio(geometry, 32, codec.INDEX_BITS + value_bits),
        "measured_bytes": len(payload),
        "predicted_bytes": predicted,
        "overhead_adjusted_ratio": codec.measured_compression_ratio(predicted, n_values),
        "measured_bits_per_selected": 8 * len(payload) / selected,
        "measured_ratio": codec.measured_compression_ratio(payload, n_values),
    }


def cmd_codec_bench(args) -> int:
    cfg = _load(args)
    if args.print_effective_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    report = codec_bench(cfg, args.values, cfg.seed)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def timing_report(cfg: RunConfig, preset: str | None = None, n_params: int | None = None) -> dict:
    if preset is not None:
        p = PRESETS[preset]
        model, up, down, label = p.model(), 0.0, 0.0, p.description
    else:
        model = cfg.timing_model()
        label = cfg.timing.preset or cfg.name
        if cfg.timing.preset is not None or n_params is None:
            up = down = 0.0
        else:
            geometry = cfg.geometry()
            counts = [effective_k(len(c), geometry) for c in chunk_layout((("p", (n_params,)),), geometry)]
            up = codec.serialized_size(counts, cfg.compression.quant_bits != 0)
            down = up * (cfg.gauntlet.cap - 1)
    t_comm, util = simulate_timing(up, down, model)
    return {
        "label": label,
        "t_compute": model.t_compute,
        "payload_bytes_up": up,
        "payload_bytes_down": down,
        "t_comm": t_comm,
        "utilization": util,
        "timeline": timeline(model.t_compute, t_comm),
    }


def cmd_timing(args) -> int:
    cfg = _load(args)
    if args.print_effective_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    presets = sorted(PRESETS) if args.preset == "all" else [args.preset]
    reports = [timing_report(cfg, p, args.params) for p in presets]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "round", "phase", "start_s", "end_s"])
    for rep in reports:
        for r, phase, start, end in rep["timeline"]:
            w.writerow([rep["label"], r, phase, f"{start:.3f}", f"{end:.3f}"])
    for rep in reports:
        print(f"{rep['label']}: t_compute={rep['t_compute']:.1f}s t_comm={rep['t_comm']:.3f}s "
              f"utilization={100 * rep['utilization']:.2f}%")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "timeline.csv").write_text(buf.getvalue())
    elif args.timeline:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.dir)
    path = out / "rounds.jsonl"
    if not path.is_file():
        raise ConfigError(f"dir: {path} not found")
    rounds = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    n_params = None
    summary_path = out / "summary.json"
    if summary_path.is_file():
        n_params = json.loads(summary_path.read_text()).get("n_params")
    print(json.dumps(summarize(rounds, n_params), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseloco", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_run_flags=False):
        p.add_argument("--config", help="YAML file or bundled config name")
        p.add_argument("--seed", type=int)
        p.add_argument("--print-effective-config", action="store_true")
        if with_run_flags:
            p.add_argument("--rounds", type=int)
            p.add_argument("--workers", type=int)
            p.add_argument("--out")

    p = sub.add_parser("run", help="simulate a swarm and write logs, checkpoints and a summary")
    common(p, with_run_flags=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("codec-bench", help="measure wire bytes and compression ratios")
    common(p)
    p.add_argument("--values", type=int, default=4096 * 1024)
    p.set_defaults(func=cmd_codec_bench)

    p = sub.add_parser("timing", help="communication time, utilization and timeline")
    common(p)
    p.add_argument("--preset", choices=[*sorted(PRESETS), "all"], default=None)
    p.add_argument("--params", type=int, default=None, help="model size used to size payloads")
    p.add_argument("--out", help="directory for timeline.csv")
    p.add_argument("--timeline", action="store_true", help="print the CSV timeline")
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("report", help="summarize an output directory from its logs")
    p.add_argument("dir", nargs="?", default=None)
    p.add_argument("--out", dest="dir_flag")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "report":
        args.dir = args.dir or args.dir_flag
        if args.dir is None:
            parser.error("report needs an output directory")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - stable exit code for any runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
