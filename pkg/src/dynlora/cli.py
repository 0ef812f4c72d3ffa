"""Command-line entry point: ``dynlora <command> [options]``.

Commands: gen, decode, check, bench, profile, train, ablate. Settings come
from a flat ``key=value`` file (``--config``) and are overridden by flags.
Exit codes: 0 ok, 1 check failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, linalg, switching
from . import model as M
from . import trainer as T
from .engine import DecodeSession, PRE_GATED_MODES, NonFiniteError
from .gating import GatingDecision
from .profiler import (
    CostParams,
    DispatchKind,
    ExecMode,
    Profiler,
    breakdown,
    count_per_token,
    flops_per_token,
    format_breakdown,
    gemm_flops,
    log_to_csv,
    log_to_json,
    modeled_token_us,
    verify_counts,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
FORMATS = ("csv", "json", "table")


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


# -- config files ---------------------------------------------------------------

def read_kv(path: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc.strerror or exc}") from exc
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise UsageError(f"{path}:{n}: duplicate key {k!r}")
        out[k] = v
    return out


def parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean (true/false), got {v!r}")


def _u64(v: str) -> int:
    n = int(v)
    if not 0 <= n < 2**64:
        raise ValueError("out of u64 range")
    return n


def _enum(cls):
    def conv(v: str):
        for m in cls:
            if v.lower() in (m.value.lower(), m.name.lower()):
                return m
        raise ValueError(f"choose from {', '.join(m.value for m in cls)}")

    return conv


MODEL_KEYS: dict[str, Callable] = {
    "n_blocks": int, "d_model": int, "d_hidden": int, "vocab": int, "n_experts": int,
    "rank": int, "alpha": float, "top_k": int, "placement": _enum(M.Placement),
    "routing": _enum(M.Routing), "seed": _u64, "up_init_std": float,
}
RUN_KEYS: dict[str, Callable] = {
    "n_queries": int, "n_new": int, "prompt_len": int, "overhead_us": float,
    "throughput_gflops": float, "inject_delay": parse_bool, "workers": int,
    "tile": switching.TileConfig.parse, "seed": _u64, "mode": ExecMode.parse,
}
TRAIN_KEYS: dict[str, Callable] = {
    "steps": int, "batch_size": int, "learning_rate": float, "router_lr_scale": float,
    "seed": _u64, "n_classes": int, "tokens_per_class": int,
}


def convert(raw: dict[str, str], allowed: dict[str, Callable], source: str) -> dict:
    out = {}
    for k, v in raw.items():
        if k not in allowed:
            raise UsageError(f"{source}: unknown key {k!r} (allowed: {', '.join(sorted(allowed))})")
        try:
            out[k] = allowed[k](v)
        except (ValueError, UsageError) as exc:
            raise UsageError(f"{source}: bad value for {k}: {v!r} ({exc})") from None
    return out


# -- run settings ---------------------------------------------------------------

@dataclass
class RunConfig:
    model_path: str | None = None
    mode: ExecMode = ExecMode.FUSED_SWITCH
    n_queries: int = 50
    n_new: int = 200
    prompt_len: int = 8
    seed: int = 0
    overhead_us: float = 20.0
    throughput_gflops: float = 2750.0
    inject_delay: bool = False
    workers: int = 1
    tile: switching.TileConfig = switching.TileConfig()
    out: str | None = None
    fmt: str = "table"

    def validate(self) -> None:
        for name in ("n_queries", "n_new", "prompt_len", "workers"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.fmt not in FORMATS:
            raise UsageError(f"format must be one of {', '.join(FORMATS)}")
        try:
            self.cost()
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def cost(self) -> CostParams:
        return CostParams(self.overhead_us, self.throughput_gflops, self.inject_delay)

    def switcher(self) -> switching.Switcher:
        return switching.Switcher(self.tile, self.workers)


def run_config(args, extra_keys=()) -> RunConfig:
    rc = RunConfig()
    if getattr(args, "config", None):
        vals = convert(read_kv(args.config), RUN_KEYS, args.config)
        for k, v in vals.items():
            setattr(rc, k, v)
    flag_map = {
        "model": "model_path", "mode": "mode", "n_queries": "n_queries", "n_new": "n_new",
        "prompt_len": "prompt_len", "seed": "seed", "overhead_us": "overhead_us",
        "throughput_gflops": "throughput_gflops", "inject_delay": "inject_delay",
        "workers": "workers", "tile": "tile", "out": "out", "format": "fmt",
    }
    for flag, attr in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(rc, attr, v)
    rc.validate()
    return rc


def prompts(rc: RunConfig, vocab: int) -> list[list[int]]:
    rng = np.random.default_rng([rc.seed, 21])
    return [rng.integers(0, vocab, rc.prompt_len).tolist() for _ in range(rc.n_queries)]


def load_model(path: str | None) -> M.Model:
    if not path:
        raise UsageError("--model is required")
    try:
        return M.load(path)
    except FileNotFoundError:
        raise IOFailure(f"model file not found: {path}") from None
    except OSError as exc:
        raise IOFailure(f"cannot read model {path}: {exc.strerror or exc}") from None
    except M.ModelFormatError as exc:
        raise IOFailure(f"{path}: {exc}") from None


# -- output ---------------------------------------------------------------------

def header_line(command: str, rc_seed: int | None = None) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    seed = "" if rc_seed is None else f" seed={rc_seed}"
    return f"# dynlora {__version__} {command}{seed} created={stamp} backend={linalg.backend()}\n"


def emit(payload: str, command: str, out: str | None, seed: int | None = None) -> None:
    """Write the metadata header line then the payload to ``out`` (or stdout)."""
    text = header_line(command, seed) + payload
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {out}: {exc.strerror or exc}") from None


def render(rows: list[dict], fmt: str, extra: dict | None = None) -> str:
    if fmt == "json":
        payload = dict(extra or {})
        payload["rows"] = rows
        return json.dumps(payload, indent=2) + "\n"
    if not rows:
        return ""
    cols = list(rows[0])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    numeric = [isinstance(rows[0][c], (int, float)) for c in cols]

    def line(vals):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(vals, widths, numeric)).rstrip()

    return "\n".join([line(cols)] + [line(row) for row in cells]) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


# -- commands ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    if not args.config:
        raise UsageError("gen needs --config")
    if not args.out:
        raise UsageError("gen needs --out")
    vals = convert(read_kv(args.config), MODEL_KEYS, args.config)
    up_std = vals.pop("up_init_std", 0.0)
    if args.seed is not None:
        vals["seed"] = args.seed
    try:
        cfg = M.ModelConfig(**vals)
        cfg.validate()
    except M.ConfigError as exc:
        raise UsageError(" ".join(str(exc).split())) from None
    model = M.generate(cfg)
    if up_std:
        M.randomize_up_factors(model, cfg.seed, up_std)
    try:
        M.save(model, args.out)
    except OSError as exc:
        raise IOFailure(f"cannot write {args.out}: {exc.strerror or exc}") from None
    print(f"wrote {args.out} ({cfg.adapted_sites} adapted sites, {cfg.n_experts} experts, rank {cfg.rank})")
    return EXIT_OK


def _decode_all(model: M.Model, mode: ExecMode, rc: RunConfig, prof: Profiler | None):
    """Greedy-decode every seeded prompt; returns (generations, decode seconds).

    Prefill is excluded from the timing since it runs the same path in every mode.
    token_step keeps counting across queries so every decode step is distinct.
    """
    sess = DecodeSession(model, mode, prof, rc.switcher())
    gens = []
    elapsed = 0.0
    for p in prompts(rc, model.config.vocab):
        if len(p) > 1:
            sess.prefill(p[:-1])
        tok = p[-1]
        out = []
        t0 = time.perf_counter()
        for _ in range(rc.n_new):
            tok = int(np.argmax(sess.decode_token(tok)[:, 0]))
            out.append(tok)
        elapsed += time.perf_counter() - t0
        gens.append(out)
    sess.restore()
    return gens, elapsed


def cmd_decode(args) -> int:
    rc = run_config(args)
    model = load_model(rc.model_path)
    prof = Profiler(rc.cost())
    gens, _ = _decode_all(model, rc.mode, rc, prof)
    if rc.fmt == "json":
        payload = json.loads(log_to_json(prof.events, prof.params))
        payload = {"mode": rc.mode.value, "generations": gens, **payload}
        text = json.dumps(payload, indent=2) + "\n"
    elif rc.fmt == "csv":
        text = log_to_csv(prof.events, prof.params)
    else:
        text = f"mode {rc.mode.value}: {len(gens)} queries x {rc.n_new} tokens\n"
        text += format_breakdown(breakdown(prof.events, prof.params), "table")
    emit(text, "decode", rc.out, rc.seed)
    if args.generations:
        try:
            Path(args.generations).write_text(json.dumps(gens) + "\n")
        except OSError as exc:
            raise IOFailure(f"cannot write {args.generations}: {exc.strerror or exc}") from None
    return EXIT_OK


# check suites

@dataclass
class SuiteResult:
    suite: str
    ok: bool
    detail: str


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def suite_equivalence(model: M.Model, rc: RunConfig, tol: float = 1e-9) -> SuiteResult:
    worst = 0.0
    for qi, p in enumerate(prompts(rc, model.config.vocab)):
        runs = []
        for mode in PRE_GATED_MODES:
            sess = DecodeSession(model.copy(), mode, switcher=rc.switcher())
            logits = []
            tok_seq = []
            if len(p) > 1:
                sess.prefill(p[:-1])
            tok = p[-1]
            for _ in range(rc.n_new):
                z = sess.decode_token(tok)
                logits.append(z)
                tok = int(np.argmax(z[:, 0]))
                tok_seq.append(tok)
            runs.append((tok_seq, logits))
        ref_toks, ref_logits = runs[0]
        for mode, (toks, logits) in zip(PRE_GATED_MODES[1:], runs[1:]):
            if toks != ref_toks:
                step = next(i for i, (a, b) in enumerate(zip(toks, ref_toks)) if a != b)
                return SuiteResult("equivalence", False, f"query {qi}: {mode.value} diverges at token {step}")
            worst = max(worst, max(_rel(a, b) for a, b in zip(logits, ref_logits)))
    ok = worst <= tol
    return SuiteResult("equivalence", ok, f"{rc.n_queries}x{rc.n_new} tokens, max logit rel err {worst:.3e} (tol {tol:g})")


def _max_drift(model: M.Model, pristine: list[np.ndarray]) -> float:
    return max(_rel(s.weight, w) for s, w in zip(model.adapted_sites(), pristine))


def suite_roundtrip(model: M.Model, rc: RunConfig, steps: int = 1000, tol: float = 1e-9) -> SuiteResult:
    m = model.copy()
    pristine = [s.weight.copy() for s in m.adapted_sites()]
    sess = DecodeSession(m, ExecMode.FUSED_SWITCH, switcher=rc.switcher())
    rng = np.random.default_rng([rc.seed, 22])
    sess.generate(rng.integers(0, m.config.vocab, 2).tolist(), steps)
    sess.restore()
    drift = _max_drift(m, pristine)
    # single merge then unmerge: within one rounding of each operand
    s = model.copy().adapted_sites()[0]
    w0 = s.weight.copy()
    d = GatingDecision(tuple(range(model.config.top_k)), (1.0 / model.config.top_k,) * model.config.top_k, 0)
    dc, uc = switching.build_concat(s, d, model.config.scale)
    p = linalg.matmul(uc, dc)
    switching.merge(s, dc, uc)
    switching.unmerge(s, dc, uc)
    eps = np.finfo(np.float64).eps
    single_ok = bool(np.all(np.abs(s.weight - w0) <= 2 * eps * (np.abs(w0) + np.abs(p))))
    ok = drift <= tol and single_ok
    return SuiteResult(
        "roundtrip", ok,
        f"{steps}-step restore max rel drift {drift:.3e} (tol {tol:g}); single merge/unmerge within rounding: {single_ok}",
    )


def suite_sign(model: M.Model, rc: RunConfig, tol: float = 1e-9) -> SuiteResult:
    k = model.config.top_k
    n = model.config.n_experts
    a = GatingDecision(tuple(range(k)), (1.0 / k,) * k, 0)
    b = GatingDecision(tuple((i + k) % n for i in range(k)), (1.0 / k,) * k, 1)
    base = model
    note = ""
    if not any(e.up.any() for s in model.adapted_sites() for e in s.experts):
        # zero adapters cannot tell the constructions apart; exercise them on seeded factors
        base = model.copy()
        M.randomize_up_factors(base, rc.seed)
        note = " (seeded up factors: model adapters are zero)"
    drift = {}
    for literal in (True, False):
        m = base.copy()
        pristine = [s.weight.copy() for s in m.adapted_sites()]
        st = switching.SwitchState()
        for d in (a, b):
            switching.switch_all(m, st, d, opts=rc.switcher(), negate_both=literal)
        switching.restore(m, st, opts=rc.switcher(), negate_both=literal)
        drift[literal] = _max_drift(m, pristine)
    ok = drift[False] <= tol and drift[True] > tol
    return SuiteResult(
        "sign-regression", ok,
        f"corrected drift {drift[False]:.3e}, double-negation drift {drift[True]:.3e}{note}",
    )


def suite_sgmm(model: M.Model, rc: RunConfig, seeds: int = 3) -> SuiteResult:
    k = model.config.top_k
    n = model.config.n_experts
    rng = np.random.default_rng([rc.seed, 23])
    for trial in range(seeds):
        prev = GatingDecision(tuple(sorted(rng.choice(n, k, replace=False))), (1.0 / k,) * k, 0)
        cur = GatingDecision(tuple(sorted(rng.choice(n, k, replace=False))), (1.0 / k,) * k, 1)
        outs = set()
        for workers in (1, 2, 8):
            m = model.copy()
            sites = m.adapted_sites()
            fused = switching.fused_delta(sites, prev, cur, m.config.scale)
            switching.sgmm(sites, fused, rc.tile, workers=workers)
            outs.add(b"".join(s.weight.tobytes() for s in sites))
        if len(outs) != 1:
            return SuiteResult("sgmm-determinism", False, f"trial {trial}: weight bytes differ across worker counts")
    return SuiteResult("sgmm-determinism", True, f"{seeds} trials, workers 1/2/8 byte-identical")


def cmd_check(args) -> int:
    rc = run_config(args)
    model = load_model(rc.model_path)
    results = []
    for fn in (suite_equivalence, suite_roundtrip, suite_sign, suite_sgmm):
        try:
            results.append(fn(model, rc))
        except NonFiniteError as exc:
            results.append(SuiteResult(fn.__name__.removeprefix("suite_"), False, str(exc)))
    rows = [{"suite": r.suite, "result": "PASS" if r.ok else "FAIL", "detail": r.detail} for r in results]
    emit(render(rows, rc.fmt), "check", rc.out, rc.seed)
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


def _backbone_wall(model: M.Model, rc: RunConfig) -> float:
    """Wall-clock microseconds per token of the bare backbone forward."""
    from .engine import backbone_product

    prof = Profiler(rc.cost())
    n = 0
    t0 = time.perf_counter()
    for p in prompts(rc, model.config.vocab):
        tok = p[-1]
        for _ in range(rc.n_new):
            h = np.ascontiguousarray(model.embedding[tok].reshape(-1, 1))
            for block in model.blocks:
                h = M.block_forward(block, h, lambda s, u: backbone_product(s, u, prof))
            tok = int(np.argmax(linalg.matmul(model.head, h)[:, 0]))
            n += 1
    return (time.perf_counter() - t0) / n * 1e6


def bench_rows(model: M.Model, rc: RunConfig, modes: list[ExecMode], wall: bool = True) -> list[dict]:
    params = rc.cost()
    cfg = model.config
    base_us = modeled_token_us(cfg, None, params)
    rows = []
    if wall:
        # one untimed pass warms caches and the kernel module
        warm = RunConfig(n_queries=1, n_new=min(rc.n_new, 8), seed=rc.seed, tile=rc.tile, workers=rc.workers)
        _backbone_wall(model, warm)
        _decode_all(model.copy(), ExecMode.FUSED_SWITCH, warm, None)
    base_wall = _backbone_wall(model, rc) if wall else None
    rows.append(_bench_row("Backbone", cfg.total_sites, base_us, base_us, base_wall, base_wall))
    for mode in modes:
        prof = Profiler(rc.cost())
        tokens = rc.n_queries * rc.n_new
        _, elapsed = _decode_all(model.copy(), mode, rc, prof)
        ev = prof.decode_events()
        modeled = sum(r.modeled_us for r in breakdown(ev, params)) / tokens
        wall_us = elapsed / tokens * 1e6 if wall else None
        rows.append(_bench_row(mode.value, len(ev) / tokens, modeled, base_us, wall_us, base_wall))
    return rows


def _bench_row(name, dispatches, modeled, base, wall, base_wall) -> dict:
    row = {
        "mode": name,
        "dispatches_per_token": round(float(dispatches), 3),
        "modeled_us_per_token": round(modeled, 3),
        "overhead_pct": round(100.0 * (modeled / base - 1.0), 2),
    }
    if wall is not None:
        row["wall_us_per_token"] = round(wall, 1)
        row["wall_overhead_pct"] = round(100.0 * (wall / base_wall - 1.0), 1)
    return row


def cmd_bench(args) -> int:
    rc = run_config(args)
    model = load_model(rc.model_path)
    modes = [ExecMode.parse(m) for m in args.modes.split(",")] if args.modes else list(ExecMode)
    rows = bench_rows(model, rc, modes, wall=not args.no_wall)
    extra = {"params": {"launch_overhead_us": rc.overhead_us, "throughput_gflops": rc.throughput_gflops,
                        "inject_delay": rc.inject_delay}}
    emit(render(rows, rc.fmt, extra), "bench", rc.out, rc.seed)
    return EXIT_OK


def cmd_profile(args) -> int:
    rc = run_config(args)
    model = load_model(rc.model_path)
    prof = Profiler(rc.cost())
    _decode_all(model, rc.mode, rc, prof)
    report = verify_counts(prof.events, model.config, rc.mode)
    text = format_breakdown(breakdown(prof.events, prof.params), rc.fmt, prof.params)
    if rc.fmt == "table":
        text = f"mode {rc.mode.value}, {rc.n_queries * rc.n_new} decode tokens, counts {report}\n" + text
    emit(text, "profile", rc.out, rc.seed)
    return EXIT_OK


def cmd_train(args) -> int:
    model = load_model(args.model)
    vals = convert(read_kv(args.config), TRAIN_KEYS, args.config) if args.config else {}
    for k in ("steps", "batch_size", "learning_rate", "router_lr_scale", "seed"):
        if getattr(args, k, None) is not None:
            vals[k] = getattr(args, k)
    task = T.SyntheticClasses(vals.pop("n_classes", 2), vals.pop("tokens_per_class", 16))
    tc = T.TrainConfig(task=task, **vals)
    try:
        tc.validate(model)
        report = T.train(model, tc)
    except ValueError as exc:
        raise UsageError(" ".join(str(exc).split())) from None
    except T.TrainingDiverged as exc:
        print(f"dynlora train: training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK
    if args.out:
        try:
            M.save(model, args.out)
        except OSError as exc:
            raise IOFailure(f"cannot write {args.out}: {exc.strerror or exc}") from None
    text = report.to_json() + "\n"
    if args.report:
        try:
            Path(args.report).write_text(text)
        except OSError as exc:
            raise IOFailure(f"cannot write {args.report}: {exc.strerror or exc}") from None
    else:
        sys.stdout.write(text)
    shares = report.dominant_shares()
    print(
        f"loss {report.initial_loss:.4f} -> {report.final_loss:.4f}; dominant shares "
        + ", ".join(f"class {c}: {v:.3f}" for c, v in shares.items()),
        file=sys.stderr,
    )
    return EXIT_OK


ABLATE_N = (8, 16)
ABLATE_R = (8, 16, 32, 64)
ABLATE_K = (1, 2)


def ablate_rows(base: M.ModelConfig, params: CostParams) -> list[dict]:
    rows = []
    backbone = modeled_token_us(base, None, params)
    for n in ABLATE_N:
        for r in ABLATE_R:
            for k in ABLATE_K:
                cfg = base.with_(n_experts=n, rank=r, top_k=k)
                for mode in ExecMode:
                    counts = count_per_token(cfg, mode)
                    us = modeled_token_us(cfg, mode, params)
                    rows.append({
                        "n_experts": n, "rank": r, "top_k": k, "mode": mode.value,
                        "backbone": counts.get(DispatchKind.BACKBONE, 0),
                        "adapter": counts.get(DispatchKind.ADAPTER, 0),
                        "router": counts.get(DispatchKind.ROUTER, 0),
                        "merge": counts.get(DispatchKind.MERGE, 0),
                        "sgmm": counts.get(DispatchKind.SGMM, 0),
                        "dispatches": sum(counts.values()),
                        "modeled_us": round(us, 3),
                        "overhead_pct": round(100.0 * (us / backbone - 1.0), 2),
                    })
    return rows


def cmd_ablate(args) -> int:
    rc = run_config(argparse.Namespace(**{k: v for k, v in vars(args).items() if k != "config"}))
    vals = {}
    if args.config:
        vals = convert(read_kv(args.config), MODEL_KEYS, args.config)
        vals.pop("up_init_std", None)
    try:
        base = M.ModelConfig(**vals)
        base.validate()
    except M.ConfigError as exc:
        raise UsageError(" ".join(str(exc).split())) from None
    # rank up to 64 needs room in both widths
    if min(base.d_model, base.d_hidden) < max(ABLATE_R):
        raise UsageError(f"ablate needs min(d_model, d_hidden) >= {max(ABLATE_R)}")
    rows = ablate_rows(base, rc.cost())
    emit(render(rows, rc.fmt, {"params": {"launch_overhead_us": rc.overhead_us,
                                          "throughput_gflops": rc.throughput_gflops}}), "ablate", rc.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _tile(v: str) -> switching.TileConfig:
    try:
        return switching.TileConfig.parse(v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bool(v: str) -> bool:
    try:
        return parse_bool(v)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _mode(v: str) -> ExecMode:
    try:
        return ExecMode.parse(v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _seed(v: str) -> int:
    try:
        return _u64(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer in [0, 2^64), got {v!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynlora", description="Dynamic LoRA decoding, switching and profiling on a toy model.")
    p.add_argument("--version", action="version", version=f"dynlora {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True, mode=False, run=True):
        sp.add_argument("--config", metavar="PATH", help="key=value settings file")
        if model:
            sp.add_argument("--model", metavar="PATH")
        if mode:
            sp.add_argument("--mode", type=_mode, metavar="NAME")
        sp.add_argument("--out", metavar="PATH", help="output file (default stdout)")
        sp.add_argument("--format", choices=FORMATS)
        sp.add_argument("--seed", type=_seed, metavar="U64")
        if run:
            sp.add_argument("--n-queries", type=int, dest="n_queries")
            sp.add_argument("--n-new", type=int, dest="n_new")
            sp.add_argument("--prompt-len", type=int, dest="prompt_len")
            sp.add_argument("--workers", type=int)
            sp.add_argument("--tile", type=_tile, metavar="RxC")
        sp.add_argument("--overhead-us", type=float, dest="overhead_us", metavar="F")
        sp.add_argument("--throughput-gflops", type=float, dest="throughput_gflops", metavar="F")
        sp.add_argument("--inject-delay", type=_bool, dest="inject_delay", metavar="BOOL")

    g = sub.add_parser("gen", help="generate a seeded model file from a config")
    g.add_argument("--config", metavar="PATH")
    g.add_argument("--out", metavar="PATH")
    g.add_argument("--seed", type=_seed, metavar="U64")
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("decode", help="greedy-decode seeded prompts and log dispatches")
    common(d, mode=True)
    d.add_argument("--generations", metavar="PATH", help="also write generated tokens as JSON")
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("check", help="equivalence, roundtrip, sign-regression and sgmm-determinism suites")
    common(c)
    c.set_defaults(func=cmd_check)

    b = sub.add_parser("bench", help="per-mode dispatches, modeled and wall-clock latency")
    common(b)
    b.add_argument("--modes", help="comma-separated subset (default: all five)")
    b.add_argument("--no-wall", action="store_true", help="skip wall-clock columns (fully reproducible output)")
    b.set_defaults(func=cmd_bench)

    pr = sub.add_parser("profile", help="per-kind dispatch breakdown for one mode")
    common(pr, mode=True)
    pr.set_defaults(func=cmd_profile)

    t = sub.add_parser("train", help="fine-tune adapters and router on the synthetic task")
    t.add_argument("--config", metavar="PATH")
    t.add_argument("--model", metavar="PATH")
    t.add_argument("--out", metavar="PATH", help="where to save the trained model")
    t.add_argument("--report", metavar="PATH", help="TrainReport JSON (default stdout)")
    t.add_argument("--seed", type=_seed, metavar="U64")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--learning-rate", type=float, dest="learning_rate")
    t.add_argument("--router-lr-scale", type=float, dest="router_lr_scale")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="closed-form sweep over experts, rank and top-k")
    common(a, model=False, run=False)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dynlora {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as exc:
        print(f"dynlora {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
