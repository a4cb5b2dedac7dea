"""Command-line surface: benchmark generation, CS-bank seeding, adaptive and
fixed-chain runs, evaluation reports, and trace replay.

Config precedence: flags > AHARNESS_* environment variables > JSON config
file > built-in defaults. Exit code 0 iff the requested artifact was fully
produced.
"""

from __future__ import annotations

import json
import shlex
import sys
import time

import click

from .config import MODES, RunConfig, load_config
from .memory import MemoryStore
from .runtime import replay_trace, run_batch, run_episode
from .scenario import Benchmark, build_benchmark, generate_scene
from .skills import default_registry

_CONFIG_FLAGS = (
    ("--seed", "seed", int),
    ("--budget", "budget", float),
    ("--delta", "delta", float),
    ("--omega-floor", "omega_floor", float),
    ("--alpha", "alpha", float),
    ("--beta", "beta", float),
    ("--gamma", "gamma", float),
    ("--top-n", "top_n", int),
    ("--cs-capacity", "cs_capacity", int),
    ("--tt-capacity", "tt_capacity", int),
    ("--noise-difficulty", "noise_difficulty", float),
    ("--max-steps", "max_steps", int),
    ("--orderings", "orderings", int),
    ("--mode", "mode", click.Choice(MODES)),
)


def config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="JSON config file.")(fn)
    for flag, name, typ in _CONFIG_FLAGS:
        fn = click.option(flag, name, type=typ, default=None)(fn)
    fn = click.option("--budget-truncation/--no-budget-truncation",
                      "budget_truncation", default=None)(fn)
    fn = click.option("--verifier/--no-verifier", "verifier_enabled",
                      default=None)(fn)
    fn = click.option("--memory/--no-memory", "memory_enabled",
                      default=None)(fn)
    return fn


def build_config(config_path, **flags) -> RunConfig:
    try:
        return load_config(config_path, overrides=flags)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        raise click.ClickException(f"bad config: {e}")


def _load_banks(cs_bank_path, config) -> MemoryStore | None:
    if cs_bank_path is None:
        return MemoryStore(cs_capacity=config.cs_capacity,
                           tt_capacity=config.tt_capacity)
    store = MemoryStore.load(cs_bank_path)
    store.tt_capacity = config.tt_capacity
    return store


def _write_json(path, obj):
    if path == "-":
        click.echo(json.dumps(obj, sort_keys=True))
    else:
        with open(path, "w") as f:
            json.dump(obj, f, sort_keys=True)


@click.group()
def main():
    """Budget-aware skill orchestration toolkit."""


@main.command("scene-gen")
@click.option("--easy", type=int, default=0)
@click.option("--medium", type=int, default=0)
@click.option("--hard", type=int, default=0)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def scene_gen(easy, medium, hard, seed, out):
    """Generate a benchmark with disjoint eval and library splits."""
    counts = {"easy": easy, "medium": medium, "hard": hard}
    if sum(counts.values()) <= 0:
        raise click.ClickException("at least one band count must be positive")
    bench = build_benchmark(counts, seed)
    bench.save(out)
    click.echo(f"wrote {len(bench.eval_scenes)} eval scenes and "
               f"{len(bench.library)} library entries to {out}")


@main.command("seed-cs")
@click.option("--benchmark", "bench_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--cs-capacity", type=int, default=1000)
@click.option("--tt-capacity", type=int, default=80)
def seed_cs(bench_path, out, cs_capacity, tt_capacity):
    """Build a curated-skill bank from the benchmark's library split."""
    bench = Benchmark.load(bench_path)
    store = MemoryStore(cs_capacity=cs_capacity, tt_capacity=tt_capacity)
    stored = store.seed_cs(bench.library)
    store.save(out)
    click.echo(f"seeded {stored}/{len(bench.library)} library entries to {out}")


@main.command("run")
@config_options
@click.option("--benchmark", "bench_path", type=click.Path(exists=True),
              default=None)
@click.option("--index", type=int, default=0, help="Eval scene index.")
@click.option("--scene-seed", type=int, default=None,
              help="Generate an ad-hoc scene instead of using a benchmark.")
@click.option("--difficulty", type=float, default=0.5)
@click.option("--occlusion", type=float, default=0.0)
@click.option("--cs-bank", "cs_bank_path", type=click.Path(exists=True),
              default=None)
@click.option("--trace", "trace_path", type=click.Path(), default=None)
def run_cmd(config_path, bench_path, index, scene_seed, difficulty, occlusion,
            cs_bank_path, trace_path, **flags):
    """Execute one adaptive episode and print its trace summary."""
    config = build_config(config_path, **flags)
    if scene_seed is not None:
        scene = generate_scene(scene_seed, difficulty, occlusion)
    elif bench_path is not None:
        bench = Benchmark.load(bench_path)
        if not 0 <= index < len(bench.eval_scenes):
            raise click.ClickException(f"index {index} out of range")
        scene = bench.eval_scenes[index]
    else:
        raise click.ClickException("need --benchmark or --scene-seed")
    banks = _load_banks(cs_bank_path, config) if config.memory_enabled else None
    fused, trace, accepted = run_episode(scene, scene.instruction,
                                         default_registry(), banks, config)
    if trace_path:
        trace.save(trace_path)
    from .geometry import iou
    score = iou(fused.mask, scene.target_gt) if fused.mask is not None else 0.0
    click.echo(f"episode seed={trace.seed} accepted={accepted} "
               f"in_loop_calls={trace.in_loop_calls} "
               f"detect_calls={trace.detect_calls} "
               f"charged={trace.charged:.2f} iou={score:.4f} "
               f"fusion={fused.source}")


def _report_payload(config: RunConfig, results, summary) -> dict:
    return {
        "config": config.to_json(),
        "orderings": [r.to_json() for r in results],
        "summary": summary,
    }


def _echo_metrics(label, m, extra=""):
    click.echo(f"{label:<12} gIoU={m.giou:.4f} cIoU={m.ciou:.4f} "
               f"P@50={m.p50:.4f} P@50:95={m.p50_95:.4f} "
               f"calls={m.mean_skill_calls:.2f}{extra}")


@main.command("bench")
@config_options
@click.option("--benchmark", "bench_path", type=click.Path(exists=True),
              required=True)
@click.option("--cs-bank", "cs_bank_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--skill-server", default=None,
              help="Command line of an external skill server for detect "
                   "and segment (stdio transport).")
def bench_cmd(config_path, bench_path, cs_bank_path, out, skill_server,
              **flags):
    """Run a batch in the configured mode and emit a metrics report."""
    config = build_config(config_path, **flags)
    bench = Benchmark.load(bench_path)
    banks = _load_banks(cs_bank_path, config) if config.memory_enabled else None
    registry = default_registry()
    conn = None
    if skill_server:
        from .skillbridge import BridgeConnection, register_bridged_skills
        conn = BridgeConnection.spawn(shlex.split(skill_server))
        for name in [c["skill"] for c in conn.capabilities.skills]:
            registry.deregister(name)
        register_bridged_skills(registry, conn)
    t0 = time.monotonic()
    try:
        results, summary = run_batch(bench.eval_scenes, banks, config, registry)
    finally:
        if conn is not None:
            conn.close()
    summary["wall_clock_s"] = time.monotonic() - t0
    summary["benchmark_seed"] = bench.seed
    for i, r in enumerate(results):
        _echo_metrics(f"{config.mode}[{i}]", r.metrics,
                      extra=f" fallback_rate={r.fallback_rate:.3f}")
    click.echo(f"summary gIoU={summary['giou_mean']:.4f}"
               f"±{summary['giou_dev']:.4f} "
               f"calls={summary['calls_mean']:.2f}±{summary['calls_dev']:.2f} "
               f"wall={summary['wall_clock_s']:.1f}s")
    if out:
        _write_json(out, _report_payload(config, results, summary))


DELTA_SWEEP = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
OMEGA_SWEEP = (0.3, 0.4, 0.5, 0.6, 0.7)
TOPN_SWEEP = (1, 2, 3, 5, 8, 10)
TT_SWEEP = (10, 20, 40, 80, 160)
WEIGHT_SWEEP = ((0.5, 0.3, 0.2), (0.6, 0.25, 0.15), (0.4, 0.4, 0.2),
                (0.34, 0.33, 0.33))


def _sweep(bench, cs_bank_path, config, values, field_sets):
    rows = []
    for value, overrides in zip(values, field_sets):
        cfg = config.replaced(**overrides)
        banks = _load_banks(cs_bank_path, cfg) if cfg.memory_enabled else None
        results, summary = run_batch(bench.eval_scenes, banks, cfg,
                                     default_registry())
        rows.append({"value": value, "giou": summary["giou_mean"],
                     "calls": summary["calls_mean"]})
    return rows


@main.command("report")
@config_options
@click.option("--benchmark", "bench_path", type=click.Path(exists=True),
              required=True)
@click.option("--cs-bank", "cs_bank_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--sweeps/--no-sweeps", default=False,
              help="Also run the hyperparameter sensitivity sweeps.")
def report_cmd(config_path, bench_path, cs_bank_path, out, sweeps, **flags):
    """Pareto comparison of adaptive vs fixed chains, plus optional sweeps."""
    config = build_config(config_path, **flags)
    bench = Benchmark.load(bench_path)
    payload = {"config": config.to_json(), "benchmark_seed": bench.seed,
               "modes": {}}
    for mode in MODES:
        cfg = config.replaced(mode=mode)
        banks = _load_banks(cs_bank_path, cfg) if cfg.memory_enabled else None
        results, summary = run_batch(bench.eval_scenes, banks, cfg,
                                     default_registry())
        m = results[0].metrics
        _echo_metrics(mode, m)
        payload["modes"][mode] = {"summary": summary,
                                  "metrics": m.to_json()}
    if sweeps:
        payload["sweeps"] = {
            "delta": _sweep(bench, cs_bank_path, config, DELTA_SWEEP,
                            [{"delta": v} for v in DELTA_SWEEP]),
            "omega_floor": _sweep(bench, cs_bank_path, config, OMEGA_SWEEP,
                                  [{"omega_floor": v} for v in OMEGA_SWEEP]),
            "top_n": _sweep(bench, cs_bank_path, config, TOPN_SWEEP,
                            [{"top_n": v} for v in TOPN_SWEEP]),
            "tt_capacity": _sweep(bench, cs_bank_path, config, TT_SWEEP,
                                  [{"tt_capacity": v} for v in TT_SWEEP]),
            "weights": _sweep(bench, cs_bank_path, config,
                              ["/".join(map(str, w)) for w in WEIGHT_SWEEP],
                              [{"alpha": a, "beta": b, "gamma": g}
                               for a, b, g in WEIGHT_SWEEP]),
        }
        for name, rows in payload["sweeps"].items():
            line = "  ".join(f"{r['value']}:{r['giou']:.3f}@{r['calls']:.2f}"
                             for r in rows)
            click.echo(f"sweep {name:<12} {line}")
    if out:
        _write_json(out, payload)


@main.command("replay")
@click.option("--trace", "trace_path", type=click.Path(exists=True),
              required=True)
def replay_cmd(trace_path):
    """Re-execute a recorded trace; nonzero exit on any divergence."""
    with open(trace_path) as f:
        recorded = json.load(f)
    fused, trace = replay_trace(recorded, default_registry())
    replayed = trace.to_json()
    if replayed["fusion"] != recorded["fusion"]:
        click.echo("divergence: fused output differs", err=True)
        sys.exit(1)
    if replayed["steps"] != recorded["steps"]:
        click.echo("divergence: step records differ", err=True)
        sys.exit(1)
    click.echo(f"replay ok: {len(trace.steps)} steps, fused output identical")


if __name__ == "__main__":
    main()
