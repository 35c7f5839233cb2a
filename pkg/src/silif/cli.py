"""``silif`` command line.

Exit status: 0 success, 1 runtime failure, 2 usage error. ``SILIF_THREADS``
caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .bptt import finite_difference_check
from .config import RunConfig, default_config_text, load_config, parse_config
from .data import SynthTaskSpec, bin_events, gen_synthetic, read_event_text, read_labels, save_spkt
from .errors import SilifError
from .training import build_network, evaluate, load_datasets, load_network_from_checkpoint, train

log = logging.getLogger("silif")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _config(path) -> RunConfig:
    return load_config(path) if path else parse_config("")


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg = parse_config(_override_epochs(cfg.source_text, args.epochs))
    out = Path(args.out)
    res = train(cfg, out_dir=out, log_path=out / "train.jsonl")
    best = max((r["accuracy"] for r in res.log if r["split"] == "val"), default=None)
    print(json.dumps({"epochs": cfg.epochs, "best_val_accuracy": best, "checkpoint": str(res.best_checkpoint) if res.best_checkpoint else None,
                      "seconds": round(res.seconds, 2)}))
    return EXIT_OK


def _override_epochs(text: str, epochs: int) -> str:
    lines = [l for l in text.splitlines() if not l.strip().startswith("epochs")]
    # top-level keys must precede the first section header
    return f"epochs = {epochs}\n" + "\n".join(lines) + "\n"


def _eval_payload(args):
    net, cfg, meta = load_network_from_checkpoint(args.checkpoint)
    split = args.split or cfg.eval.split
    data = load_datasets(cfg)[split]
    dense_macs = getattr(args, "dense_input_macs", False) or cfg.eval.dense_input_macs
    ev = evaluate(net, data, cfg.eval.batch, cfg.delays.enabled, dense_macs)
    return net, cfg, meta, split, ev


def cmd_eval(args) -> int:
    _, cfg, meta, split, ev = _eval_payload(args)
    print(json.dumps({"split": split, "epoch": meta["epoch"], "loss": ev.loss, "accuracy": ev.accuracy,
                      "sparsity": ev.sparsity, "sops": ev.sops}, sort_keys=True))
    return EXIT_OK


def cmd_profile_sops(args) -> int:
    _, cfg, _, split, ev = _eval_payload(args)
    rep = analysis.activity_report(ev.trace, cfg.delays.enabled)
    rep["split"] = split
    rep["per_layer_sparsity"] = analysis.sparsity_breakdown(ev.trace)
    if args.report:
        analysis.write_jsonl(args.report, [rep])
    if args.points:
        with open(args.points, "a") as fh:
            fh.write(f"{rep['sops']:.6f} {ev.accuracy:.6f}\n")
    print(json.dumps(rep, sort_keys=True))
    return EXIT_OK


def cmd_analyze_eigen(args) -> int:
    if args.checkpoint:
        net, _, _ = load_network_from_checkpoint(args.checkpoint)
    else:
        cfg = _config(args.config)
        ds = cfg.data
        net = build_network(cfg, ds.channels, ds.classes)
    reports = analysis.network_spectra(net)
    if args.out:
        analysis.write_eigen_pairs(args.out, reports)
    summaries = [r.summary() for r in reports]
    if args.report:
        analysis.write_jsonl(args.report, summaries)
    for s in summaries:
        print(json.dumps({k: s[k] for k in ("model", "layer", "neurons", "complex_pairs", "real_pairs", "max_magnitude")}))
    return EXIT_OK


def cmd_sop_calc(args) -> int:
    r = analysis.eventssm_sops(args.state, args.events, args.events2, args.ssm2, args.dense2)
    print(f"block1 {analysis.format_millions(r.block1)}")
    print(f"block2 {analysis.format_millions(r.block2)}")
    print(f"total {analysis.format_millions(r.total)}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    cfg = _config(args.config)
    d = cfg.data
    seed = args.seed if args.seed is not None else cfg.seed
    spec = SynthTaskSpec(d.classes, d.channels, d.timesteps, d.template_rate, d.jitter, d.drop, d.samples_per_class, seed)
    save_spkt(args.out, gen_synthetic(spec)[args.split])
    return EXIT_OK


def cmd_convert_events(args) -> int:
    labels = read_labels(args.labels)
    if len(labels) != len(args.events):
        raise SilifError(f"{len(args.events)} event files but {len(labels)} labels")
    streams = [read_event_text(p, lab) for p, lab in zip(args.events, labels)]
    t = bin_events(streams, args.bin_ms, args.pool, args.channels)
    save_spkt(args.out, t)
    print(json.dumps({"samples": len(t), "timesteps": t.timesteps, "channels": t.channels}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    if cfg.surrogate.spike_mode == "heaviside":
        raise SilifError("gradcheck needs [surrogate] spike_mode = \"linear\" or \"relaxed\"")
    ds = load_datasets(cfg)["train"]
    n = min(cfg.eval.gradcheck_samples, len(ds))
    T = min(cfg.eval.gradcheck_timesteps, ds.timesteps)
    x = ds.data[:n, :T].astype(np.float64)
    y = ds.labels[:n].astype(np.int64)
    net = build_network(cfg, ds.channels, max(ds.n_classes, int(y.max()) + 1), dtype=np.float64)
    if cfg.delays.enabled:
        net.set_sigma(cfg.delays.max_delay / 4.0)
    rep = finite_difference_check(net, x, y, cfg.eval.gradcheck_params or None, cfg.eval.fd_step,
                                  cfg.eval.probes_per_tensor, "quadratic", cfg.seed)
    for line in rep.lines():
        print(line)
    ok = rep.passed(1e-5)
    print(f"probes {len(rep.probes)} max_rel_error {rep.max_rel_error:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silif", description="Spiking state-space neuron engine.")
    p.add_argument("--print-defaults", action="store_true", help="print the default config with documentation and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("train", help="train a network from a config")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="directory for checkpoints and the JSON-lines log")
    s.add_argument("--epochs", type=int, help="override the config's epoch count")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"), ("profile-sops", cmd_profile_sops, "SOP and sparsity profile")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--split", choices=("train", "val", "test"))
        s.add_argument("--dense-input-macs", action="store_true")
        if name == "profile-sops":
            s.add_argument("--report", help="write the report as a JSON line")
            s.add_argument("--points", help="append an 'sops accuracy' line for plotting")
        s.set_defaults(func=func)

    s = sub.add_parser("analyze-eigen", help="transition eigenvalues per neuron")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--config", help="analyze a freshly initialized network")
    s.add_argument("--out", help="two-column 're im' file")
    s.add_argument("--report", help="JSON-lines summaries")
    s.set_defaults(func=cmd_analyze_eigen)

    s = sub.add_parser("sop-calc-eventssm", help="closed-form SOPs of a two-block event SSM")
    s.add_argument("--state", type=int, required=True)
    s.add_argument("--events", type=float, required=True, help="events per sample in block 1")
    s.add_argument("--events2", type=float, required=True, help="events per sample in block 2")
    s.add_argument("--ssm2", type=int, default=3)
    s.add_argument("--dense2", type=int, default=2)
    s.set_defaults(func=cmd_sop_calc)

    s = sub.add_parser("gen-synthetic", help="write one split of the synthetic task")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.add_argument("--config", help="take the task shape from this config")
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("convert-events", help="bin 't_us,channel' event files into an SPKT tensor")
    s.add_argument("--events", nargs="+", required=True)
    s.add_argument("--labels", required=True, help="one integer label per line, in file order")
    s.add_argument("--channels", type=int, required=True)
    s.add_argument("--pool", type=int, default=1)
    s.add_argument("--bin-ms", type=float, default=4.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert_events)

    s = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    s.add_argument("--config")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    raw = os.environ.get("SILIF_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise SilifError(f"SILIF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SilifError(f"SILIF_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        sys.stdout.write(default_config_text())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (SilifError, OSError) as exc:
        print(f"silif {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def entry() -> None:
    sys.exit(main())
