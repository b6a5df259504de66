"""Command-line front end: ``pdprune <command> [options]``.

Commands write versioned JSON artifacts into ``--out`` (default ``out``)
and print a short report, or the same report as JSON with ``--json``.
Options may also come from a JSON config file (``--config``); the seed is
resolved as flag, then ``PDPRUNE_SEED``, then config file, then 0.

Exit codes: 0 success, 1 a requested check failed or artifacts are
inconsistent, 2 bad arguments or configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import toy
from .analysis import analysis_from_json, analysis_to_json, partition, redundancy_profile
from .checkpoint import dumps, load, merged_map
from .data import generate_calibration
from .distill import distill_pair, make_job
from .errors import ConsistencyError, PDPruneError
from .kvprune import KVSelectionPlan, TransferScenario, select_layers, transfer_volume
from .model import TransformerModel, collect_attention_stats, collect_trace
from .objective import CalibrationObjective
from .plan import StagePlan, stage_views
from .runtime import reference_unified_run, run_two_node, transfer_metrics
from .search import (AnnealingSchedule, assign_stages, brute_force_optimum, plan_from_json, plan_to_json,
                     run_annealing)
from .verify import CHECKS, run_all

log = logging.getLogger("pdprune")

FORMAT_VERSION = 1
SEED_ENV = "PDPRUNE_SEED"


class UsageError(Exception):
    """Bad arguments or configuration; exit code 2."""


class CheckFailed(Exception):
    """A requested check did not pass; exit code 1."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class RunConfig:
    model: str | None = None            # checkpoint path; None means the shipped toy model
    seed: int = 0
    calib_seed: int = toy.CALIB_SEED
    calib_samples: int = toy.CALIB_SAMPLES
    seq_len: int = toy.SEQ_LEN
    k: int = toy.K
    T0: float = 15.0
    alpha: float = 0.85
    T_min: float = 0.05
    d_T: float = toy.D_T
    theta: float = 0.03
    objective: str = "unified"
    p: float = 0.3
    gamma: float = 0.75
    n: int = 0
    distill_steps: int = 200
    distill_lr: float = 1e-3
    scenario: str | None = None
    prompt_seed: int = 5
    prompt_len: int = 16
    steps: int = 16
    bandwidth: float = 1e9             # bytes per second for the simulated link
    latency: float = 0.0
    host: str = "127.0.0.1"
    timeout: float = 30.0
    out: str = "out"

    def validate(self) -> None:
        if self.k < 1:
            raise UsageError(f"k must be >= 1, got {self.k}")
        if self.calib_samples < 1 or self.seq_len < 2:
            raise UsageError("calibration needs at least one sequence of length >= 2")
        if self.objective not in ("unified", "prefill", "decode"):
            raise UsageError(f"unknown objective mode {self.objective!r}")
        if self.n < 0:
            raise UsageError("n must be >= 0")
        if self.bandwidth <= 0 or self.latency < 0 or self.timeout <= 0:
            raise UsageError("link parameters must be positive")
        try:
            AnnealingSchedule(self.T0, self.alpha, self.T_min)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def schedule(self) -> AnnealingSchedule:
        return AnnealingSchedule(self.T0, self.alpha, self.T_min, self.seed)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def resolve_config(args: argparse.Namespace, env=os.environ) -> RunConfig:
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(doc) - _FIELDS - {"format_version"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update({k: v for k, v in doc.items() if k in _FIELDS})
    if env.get(SEED_ENV) not in (None, ""):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer") from exc
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "schedule", None):
        try:
            values["T0"], values["alpha"], values["T_min"] = (float(x) for x in args.schedule.split(","))
        except ValueError as exc:
            raise UsageError("--schedule takes T0,alpha,T_min") from exc
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# helpers


def load_model(cfg: RunConfig):
    if cfg.model is None:
        return toy.load_toy()
    path = Path(cfg.model)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} does not exist")
    return load(path)


def calibration(cfg: RunConfig, model: TransformerModel) -> np.ndarray:
    if cfg.seq_len > model.config.max_seq:
        raise UsageError(f"seq_len {cfg.seq_len} exceeds the model's max_seq {model.config.max_seq}")
    return generate_calibration(cfg.calib_seed, cfg.calib_samples, cfg.seq_len, model.config.vocab)


def write_artifact(cfg: RunConfig, name: str, text: str) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / name
    path.write_text(text)
    return path


def read_artifact(cfg: RunConfig, name: str, explicit: str | None = None, required=True) -> str | None:
    path = Path(explicit) if explicit else cfg.out_dir / name
    if not path.exists():
        if required:
            raise FileNotFoundError(f"{path} not found; run the producing command first")
        return None
    return path.read_text()


def dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def check_fingerprint(doc: dict, model: TransformerModel, what: str) -> None:
    want = doc.get("model_fingerprint")
    if want is not None and want != model.fingerprint():
        raise ConsistencyError(f"{what}: model_fingerprint {want} does not match the loaded model "
                               f"({model.fingerprint()})")


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(cfg: RunConfig, args) -> dict:
    model, _ = load_model(cfg)
    cal = calibration(cfg, model)
    profile = redundancy_profile(collect_trace(model, cal))
    try:
        part = partition(profile, cfg.k, cfg.d_T)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = analysis_to_json(profile, part, model_fingerprint=model.fingerprint(),
                            calibration={"seed": cfg.calib_seed, "samples": cfg.calib_samples,
                                         "length": cfg.seq_len})
    path = write_artifact(cfg, "analysis.json", text)
    return {"artifact": str(path), "L": profile.L, "p_initial": part.p_initial,
            "distillation": [list(p) for p in part.distillation], "p_final": part.p_final}


def cmd_search(cfg: RunConfig, args) -> dict:
    model, merged = load_model(cfg)
    profile, part, doc = analysis_from_json(read_artifact(cfg, "analysis.json", args.analysis))
    check_fingerprint(doc, model, "analysis.json")
    k = part.k if part.k is not None else cfg.k
    if args.k is not None and args.k != k:
        raise ConsistencyError(f"analysis.json was built for k={k}, not k={args.k}")
    cal = calibration(cfg, model)
    objective = CalibrationObjective(model, cal, cfg.objective)
    schedule = cfg.schedule()
    result = run_annealing(part, k, schedule, objective, profile.r)
    stage_log: list = []
    stage_obj = CalibrationObjective(model, cal, "decode", merged=merged_map(merged))
    plan = assign_stages(result.best, stage_obj, cfg.theta, stage_log)
    extra = {"model_fingerprint": model.fingerprint(), "objective": cfg.objective,
             "stage_log": stage_log}
    report = {"best": [str(e) for e in result.best], "best_f": result.best_f,
              "iterations": result.iterations,
              "decode_only": [str(e) for e in plan.decode_only()]}
    if args.oracle:
        star, f_star = brute_force_optimum(part, k, objective, profile.r)
        extra.update(oracle_match=bool(f_star == result.best_f), oracle_best_f=f_star,
                     oracle_best=[str(e) for e in star])
        report["oracle_match"] = extra["oracle_match"]
    path = write_artifact(cfg, "plan.json", plan_to_json(plan, k=k, schedule=schedule, result=result, **extra))
    report["artifact"] = str(path)
    if args.oracle and not extra["oracle_match"]:
        raise CheckFailed(f"annealing best {result.best_f} differs from brute force {f_star}", report)
    return report


def cmd_distill(cfg: RunConfig, args) -> dict:
    model, _ = load_model(cfg)
    profile, part, doc = analysis_from_json(read_artifact(cfg, "analysis.json", args.analysis))
    check_fingerprint(doc, model, "analysis.json")
    cal = calibration(cfg, model)
    pairs = [tuple(p) for p in args.pair] if args.pair else part.distillation
    records = []
    for pair in pairs:
        rec = distill_pair(make_job(model, cal, pair, profile.r, lr=cfg.distill_lr,
                                    epochs=cfg.distill_steps, seed=cfg.seed))
        records.append(rec)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.out_dir / "distilled.pdtk"
    ckpt.write_bytes(dumps(model, records))
    pairs_doc = [{"pair": list(r.pair), "source": r.source, "steps": r.steps,
                  "init_mse": r.init_mse, "final_mse": r.final_mse} for r in records]
    write_artifact(cfg, "distill.json", dump({"format_version": FORMAT_VERSION, "checkpoint": ckpt.name,
                                              "pairs": pairs_doc}))
    return {"artifact": str(ckpt), "pairs": pairs_doc}


def _stage_plan_from(cfg: RunConfig, explicit: str | None) -> StagePlan:
    text = read_artifact(cfg, "plan.json", explicit, required=explicit is not None)
    return plan_from_json(text)[0] if text else StagePlan.empty()


def cmd_kv_select(cfg: RunConfig, args) -> dict:
    model, merged = load_model(cfg)
    plan = _stage_plan_from(cfg, args.plan)
    _, decode_view = stage_views(model, plan, merged_map(merged))
    stats = collect_attention_stats(decode_view, calibration(cfg, model))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        kv_plan = select_layers(stats, cfg.p, cfg.gamma, cfg.n)
    for w in caught:
        print(f"pdprune: warning: {w.message}", file=sys.stderr)
    path = write_artifact(cfg, "kvplan.json", kv_plan.to_json())
    return {"artifact": str(path), "selected_layers": list(kv_plan.selected_layers),
            "admissible": sorted(l for l, s in kv_plan.head_scores.items() if min(s) >= cfg.gamma)}


def cmd_simulate(cfg: RunConfig, args) -> dict:
    if cfg.scenario:
        sc = toy.load_scenario(cfg.scenario)
        model, merged = toy.scenario_model(sc)
        plan, kv_plan, prompt, steps = sc.stage_plan(), sc.kv_plan(), sc.prompt(model.config.vocab), sc.steps
        name = sc.name
    else:
        model, merged = load_model(cfg)
        plan = _stage_plan_from(cfg, args.plan)
        kv_text = read_artifact(cfg, "kvplan.json", args.kvplan, required=args.kvplan is not None)
        kv_plan = KVSelectionPlan.from_json(kv_text) if kv_text else None
        prompt = generate_calibration(cfg.prompt_seed, 1, cfg.prompt_len, model.config.vocab)[0]
        steps, name = cfg.steps, "custom"
    mg = merged_map(merged)
    run = run_two_node(model, plan, kv_plan, prompt, steps, mg, transport=args.transport,
                       host=cfg.host, timeout=cfg.timeout)
    full = run_two_node(model, StagePlan.empty(), None, prompt, 1, transport="inproc")
    m_pruned = transfer_metrics(run.manifest, cfg.bandwidth, cfg.latency)
    m_full = transfer_metrics(full.manifest, cfg.bandwidth, cfg.latency)
    doc = {"format_version": FORMAT_VERSION, "scenario": name, "transport": args.transport,
           "prompt": [int(t) for t in prompt], "transcript": run.transcript,
           "wire_roundtrip_identical": run.manifest == run.received,
           "manifest": {"pruned": m_pruned.to_dict(), "full": m_full.to_dict(),
                        "payload_ratio": m_full.payload_bytes / m_pruned.payload_bytes
                        if m_pruned.payload_bytes else None},
           "link": {"bandwidth_bytes_per_s": cfg.bandwidth, "latency_s": cfg.latency}}
    ok = doc["wire_roundtrip_identical"]
    if args.check_oracle:
        ref = reference_unified_run(model, plan, kv_plan, prompt, steps, mg)
        doc["reference_transcript"] = ref
        doc["transcripts_equal"] = ref == run.transcript
        ok = ok and doc["transcripts_equal"]
    path = write_artifact(cfg, "metrics.json", dump(doc))
    report = {"artifact": str(path), "transcript": run.transcript,
              "manifest_bytes": m_pruned.volume_bytes, "full_manifest_bytes": m_full.volume_bytes}
    if args.check_oracle:
        report["transcripts_equal"] = doc["transcripts_equal"]
    if not ok:
        raise CheckFailed("two-node run disagrees with the unified reference", report)
    return report


def _load_transfer_scenario(name: str) -> TransferScenario:
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        return TransferScenario.from_json(path.read_text())
    res = resources.files("pdprune").joinpath("scenarios").joinpath(f"{name}.json")
    if not res.is_file():
        raise FileNotFoundError(f"no transfer scenario {name!r}")
    return TransferScenario.from_json(res.read_text())


def cmd_bandwidth(cfg: RunConfig, args) -> dict:
    sc = _load_transfer_scenario(cfg.scenario or "llama31-8b")
    stage_plan = StagePlan.empty() if args.no_block_pruning else sc.stage_plan()
    kv_plan = sc.kv_plan()
    if args.n is not None and kv_plan is not None:
        layers = kv_plan.selected_layers[:args.n]
        kv_plan = KVSelectionPlan(kv_plan.p, kv_plan.gamma, len(layers), layers, sc.seq_len) if layers else None
    vol = transfer_volume(sc, stage_plan, kv_plan)
    gib = 2 ** 30
    doc = {"format_version": FORMAT_VERSION, "scenario": sc.name, "bytes_full": vol.bytes_full,
           "bytes_pruned": vol.bytes_pruned, "gib_full": vol.bytes_full / gib,
           "gib_pruned": vol.bytes_pruned / gib, "ratio": vol.ratio,
           "calibrated": sc.calibrated}
    bw = sc.link.get("bandwidth_bytes_per_s")
    if bw:
        lat = sc.link.get("latency_s", 0.0)
        doc["seconds_full"] = lat + vol.bytes_full / bw
        doc["seconds_pruned"] = lat + vol.bytes_pruned / bw
    path = write_artifact(cfg, "bandwidth.json", dump(doc))
    doc["artifact"] = str(path)
    doc["summary"] = (f"full={vol.bytes_full / gib:.1f} GiB ({vol.bytes_full} bytes) "
                      f"pruned={vol.bytes_pruned / gib:.3f} GiB ({vol.bytes_pruned} bytes) "
                      f"ratio={vol.ratio:.2f}x")
    return doc


def cmd_verify(cfg: RunConfig, args) -> dict:
    checks = run_all(args.only)
    report = {"checks": [c.to_dict() for c in checks], "passed": all(c.passed for c in checks)}
    if not report["passed"]:
        raise CheckFailed("some invariant checks failed", report)
    return report


COMMANDS = {"analyze": cmd_analyze, "search": cmd_search, "distill": cmd_distill,
            "kv-select": cmd_kv_select, "simulate": cmd_simulate, "bandwidth": cmd_bandwidth,
            "verify": cmd_verify}


# ---------------------------------------------------------------------------
# argument parsing


def _pair(text: str) -> tuple[int, int]:
    try:
        i, j = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("pairs look like 3,4") from exc
    return i, j


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the config file")
    common.add_argument("--json", action="store_true", help="print the report as JSON")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--model", help="checkpoint path (default: shipped toy model)")
    common.add_argument("-v", "--verbose", action="store_true")

    calib = argparse.ArgumentParser(add_help=False)
    calib.add_argument("--calib-seed", dest="calib_seed", type=int)
    calib.add_argument("--calib-samples", dest="calib_samples", type=int)
    calib.add_argument("--seq-len", dest="seq_len", type=int)

    parser = argparse.ArgumentParser(prog="pdprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common, calib], help="redundancy profile and set partition")
    p.add_argument("--k", type=int)
    p.add_argument("--d-T", dest="d_T", type=float)

    p = sub.add_parser("search", parents=[common, calib], help="annealing search and stage assignment")
    p.add_argument("--analysis", help="analysis.json path (default: OUT/analysis.json)")
    p.add_argument("--k", type=int)
    p.add_argument("--schedule", help="T0,alpha,T_min (default 15,0.85,0.05)")
    p.add_argument("--theta", type=float)
    p.add_argument("--objective", choices=["unified", "prefill", "decode"])
    p.add_argument("--oracle", action="store_true", help="also run brute force and record agreement")

    p = sub.add_parser("distill", parents=[common, calib], help="train merged blocks for distillation pairs")
    p.add_argument("--analysis")
    p.add_argument("--pair", type=_pair, action="append", help="pair to distill, e.g. 3,4 (repeatable)")
    p.add_argument("--steps", dest="distill_steps", type=int)
    p.add_argument("--lr", dest="distill_lr", type=float)

    p = sub.add_parser("kv-select", parents=[common, calib], help="choose layers for KV pruning")
    p.add_argument("--plan", help="plan.json whose decode view is analysed (default: OUT/plan.json if present)")
    p.add_argument("--p", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--n", type=int)

    p = sub.add_parser("simulate", parents=[common], help="two-node run with a real KV transfer")
    p.add_argument("--scenario", help="shipped run scenario (toy-full, toy-kv, toy-staged) or JSON path")
    p.add_argument("--plan")
    p.add_argument("--kvplan")
    p.add_argument("--prompt-seed", dest="prompt_seed", type=int)
    p.add_argument("--prompt-len", dest="prompt_len", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--transport", choices=["socket", "inproc"], default="socket")
    p.add_argument("--host")
    p.add_argument("--timeout", type=float)
    p.add_argument("--bandwidth", type=float, help="simulated link bytes per second")
    p.add_argument("--latency", type=float, help="simulated link latency in seconds")
    p.add_argument("--check-oracle", dest="check_oracle", action="store_true")

    p = sub.add_parser("bandwidth", parents=[common], help="full and pruned KV transfer volume")
    p.add_argument("--scenario", help="transfer scenario name or JSON path (default: llama31-8b)")
    p.add_argument("--n", type=int, help="use only the first n selected layers (0 disables KV pruning)")
    p.add_argument("--no-block-pruning", dest="no_block_pruning", action="store_true")

    p = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    p.add_argument("--only", nargs="+", choices=sorted(CHECKS))
    return parser


def _print_report(command: str, report: dict, as_json: bool, stream=None) -> None:
    stream = stream or sys.stdout
    if as_json:
        stream.write(dump(report))
        return
    if command == "verify":
        for c in report["checks"]:
            print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['detail']}", file=stream)
        return
    if "summary" in report:
        print(report["summary"], file=stream)
    for key, value in report.items():
        if key != "summary":
            print(f"{key}: {value}", file=stream)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        report = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"pdprune: error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        if exc.report is not None:
            _print_report(args.command, exc.report, args.json)
        print(f"pdprune: check failed: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PDPruneError, ValueError) as exc:
        print(f"pdprune: error: {exc}", file=sys.stderr)
        return 1
    _print_report(args.command, report, args.json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
