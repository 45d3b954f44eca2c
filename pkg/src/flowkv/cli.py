"""Command-line front end.

Subcommands: run (single strategy/ratio cell), sweep (full grid), loss-model
(decay CSV), bench (timing table), gen-scenarios (synthetic corpus), ifr
(score aggregation from a JSONL of pass/fail records).

Exit codes: 0 success, 2 bad configuration, 3 structural invariant violated
during a run, 4 partial cell failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import kernels
from .errors import ConfigError, FlowKVError
from .harness import (
    CSV_VERSION,
    SUMMARY_COLUMNS,
    SweepConfig,
    bench_cell,
    generate_scenarios,
    load_config,
    read_scenarios,
    report_rows,
    run_scenario,
    run_sweep,
    summarize_rows,
    write_csv,
    write_scenarios,
)
from .loss_model import decay_table
from .metrics import load_prompt_results, write_ifr_summary
from .model import dump_weights
from .pool import snapshot
from .strategies import BASELINE, FLOWKV, FULL

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_PARTIAL = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (see docs/config.md)")
    p.add_argument("--seed", type=int, help="override the config seed list with one seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--output-dir", type=Path, help="where reports are written")
    p.add_argument("--invert-ratio", action="store_true",
                   help="read ratios as retention instead of 1-retention")
    p.add_argument("--full-dump", action="store_true",
                   help="include key/value payloads in pool snapshots")


def _load_sweep_config(args) -> SweepConfig:
    cfg = load_config(args.config) if args.config else SweepConfig.from_json({})
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.invert_ratio:
        cfg.invert_ratio = True
    cfg.jobs = max(1, args.jobs)
    return cfg


def _ensure_outdir(cfg: SweepConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def cmd_run(args) -> int:
    cfg = _load_sweep_config(args)
    scenarios = read_scenarios(args.scenarios)
    if args.strategy not in (FULL, BASELINE, FLOWKV):
        raise ConfigError(f"unknown strategy {args.strategy!r}")
    outdir = _ensure_outdir(cfg)
    seed = cfg.seeds[0]
    records_path = outdir / "records.jsonl"
    reports = []
    want_pool = args.full_dump or args.dump_pool
    with open(records_path, "w", encoding="utf-8") as rec_fh:
        for scenario in scenarios:
            report = run_scenario(scenario, args.strategy, args.ratio, cfg, seed,
                                  keep_pool=want_pool)
            reports.append(report)
            for record in report.records:
                line = {"scenario_id": scenario.id, "strategy": args.strategy,
                        "ratio": args.ratio, "seed": seed, **record.to_json()}
                rec_fh.write(json.dumps(line, sort_keys=True) + "\n")
    with open(outdir / "session_reports.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2, sort_keys=True)

    if args.dump_weights:
        from .harness import model_for_seed

        dump_weights(model_for_seed(cfg.model, seed), args.dump_weights)
    if want_pool:
        with open(outdir / "pool_snapshot.json", "w", encoding="utf-8") as fh:
            json.dump(snapshot(reports[-1].final_pool, full_dump=args.full_dump), fh, indent=2)
    print(f"wrote {records_path} ({len(reports)} sessions, backend={kernels.backend_name()})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_sweep_config(args)
    scenarios = read_scenarios(args.scenarios)
    outdir = _ensure_outdir(cfg)
    result = run_sweep(scenarios, cfg)
    write_csv(result.rows, outdir / "sweep.csv")
    write_csv(summarize_rows(result.rows), outdir / "sweep_summary.csv",
              columns=SUMMARY_COLUMNS, version=CSV_VERSION + "-summary")
    for problem in result.violations:
        print(f"INVARIANT: {problem}", file=sys.stderr)
    print(f"wrote {outdir / 'sweep.csv'} ({len(result.rows)} rows)")
    if result.violations:
        return EXIT_INVARIANT
    if result.had_errors:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_loss_model(args) -> int:
    rows = decay_table(args.alpha, args.turns, dim=args.dim, noise_scale=args.noise_scale)
    out = args.output or "-"
    lines = ["turn,nested_signal,isolated_signal,nested_error_norm,isolated_error_norm"]
    for r in rows:
        lines.append(
            f"{r['turn']},{r['nested_signal']:.12g},{r['isolated_signal']:.12g},"
            f"{r['nested_error_norm']:.12g},{r['isolated_error_norm']:.12g}"
        )
    text = "\n".join(lines) + "\n"
    if out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
        print(f"wrote {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_sweep_config(args)
    if args.config is None:
        # default bench model must fit the long prompt
        from .model import ModelConfig
        cfg.model = ModelConfig(max_seq=args.prompt_len + args.output_len + 16)
    header = (
        f"{'configuration':<22} {'prompt':>7} {'output':>7} {'ratio':>6} "
        f"{'prefill(s)':>11} {'cache_frac':>11} {'ttft(s)':>9} {'tpot(ms)':>9} {'total(s)':>9}"
    )
    print(f"backend: {kernels.backend_name()}")
    print(header)
    cells = [(FULL, 0.0, "full")] + [
        (s, args.ratio, f"{cfg.policy.policy_kind}+{s}") for s in (BASELINE, FLOWKV)
    ]
    for strategy, ratio, label in cells:
        stats = bench_cell(strategy, ratio, cfg, args.prompt_len, args.output_len, seed=cfg.seeds[0])
        print(
            f"{label:<22} {args.prompt_len:>7} {args.output_len:>7} {ratio:>6.2f} "
            f"{stats.prefill_s:>11.4f} {stats.cache_fraction:>11.4f} {stats.ttft_s:>9.4f} "
            f"{stats.tpot_ms:>9.4f} {stats.total_gen_s:>9.4f}"
        )
    return EXIT_OK


def cmd_gen_scenarios(args) -> int:
    scenarios = generate_scenarios(args.count, args.turns, args.seed, vocab=args.vocab)
    write_scenarios(scenarios, args.output)
    print(f"wrote {args.output} ({len(scenarios)} scenarios)")
    return EXIT_OK


def cmd_ifr(args) -> int:
    prompts = load_prompt_results(args.input)
    summary = write_ifr_summary(prompts, args.output)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowkv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one (strategy, ratio) cell over a scenario file")
    _add_common(p)
    p.add_argument("--scenarios", type=Path, required=True)
    p.add_argument("--strategy", default=FLOWKV, choices=[FULL, BASELINE, FLOWKV])
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--dump-pool", action="store_true", help="write a pool snapshot JSON")
    p.add_argument("--dump-weights", type=Path, help="write model weights (TDKV format)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the full strategy x ratio x seed grid")
    _add_common(p)
    p.add_argument("--scenarios", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("loss-model", help="emit the analytic decay table as CSV")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--turns", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise-scale", type=float, default=0.0)
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_loss_model)

    p = sub.add_parser("bench", help="timing table: full vs compressed strategies")
    _add_common(p)
    p.add_argument("--prompt-len", type=int, default=8192)
    p.add_argument("--output-len", type=int, default=128)
    p.add_argument("--ratio", type=float, default=0.9)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-scenarios", help="write a seeded synthetic scenario corpus")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--turns", type=int, default=3)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_gen_scenarios)

    p = sub.add_parser("ifr", help="aggregate instruction pass/fail records")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_ifr)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FlowKVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
