"""``lutllm`` command line: quantize, infer, perf and simulate.

Settings resolve as flag > ``--config`` JSON file > built-in default. Every
command writes JSON or CSV to stdout and exits 0 only on success.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import container, model as mr
from .kernels import quantize_linear
from .perf import (
    PAPER_EXAMPLE_HW,
    PAPER_EXAMPLE_SCHEME,
    PAPER_EXAMPLE_SHAPE,
    QWEN3_1_7B,
    HardwareProfile,
    LayerShape,
    ModelConfig,
    layer_latency,
    load_bundled_profile,
    points_to_csv,
    roofline_points,
    scheme_for,
    transformer_latency,
)
from .sim import (
    SCHEDULE_MODES,
    EngineTopology,
    simulate_end_to_end,
    simulate_layer_schedule,
    simulate_lutlinear,
)
from .vq import QWEN_SCHEME, SCHEME_KINDS, SchemeConfig

SINGLE_LAYER_TOL = 0.10
END_TO_END_TOL = 0.15
NAMED_MODELS = {"qwen3-1.7b": QWEN3_1_7B, "desk": mr.DESK_MODEL}
SCHEME_FIELDS = ("G", "v", "c_w", "c_a", "table_bits")


class CliError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"bad JSON in {path}: {e}") from None


def _config(args) -> dict:
    return _read_json(args.config) if getattr(args, "config", None) else {}


def _scheme(args, cfg: dict, default: SchemeConfig) -> SchemeConfig:
    base = dict(default.to_dict())
    base.update(cfg.get("scheme", {}))
    if getattr(args, "scheme", None):
        base["kind"] = args.scheme
    for f in SCHEME_FIELDS:
        val = getattr(args, f, None)
        if val is not None:
            base[f] = val
    try:
        return SchemeConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid scheme: {e}") from None


def _hardware(spec: str | None, cfg: dict) -> tuple:
    """Return ``(HardwareProfile, topology dict)`` from a bundled name, a JSON path or the config file."""
    src = spec if spec is not None else cfg.get("hw", "v80")
    if src == "paper-example":
        return PAPER_EXAMPLE_HW, {}
    if isinstance(src, dict):
        raw = src
    elif src.endswith(".json"):
        raw = _read_json(src)
    else:
        try:
            raw = load_bundled_profile(src)
        except (FileNotFoundError, ModuleNotFoundError):
            raise CliError(f"unknown hardware profile {src!r}") from None
    try:
        return HardwareProfile.from_dict(raw), dict(raw.get("topology") or {})
    except (TypeError, ValueError, KeyError) as e:
        raise CliError(f"bad hardware profile: {e}") from None


def _model(spec: str | None, cfg: dict, default: ModelConfig) -> ModelConfig:
    spec = spec or cfg.get("model")
    if spec is None:
        return default
    if isinstance(spec, dict):
        raw = spec
    elif spec in NAMED_MODELS:
        return NAMED_MODELS[spec]
    else:
        raw = _read_json(spec)
    try:
        return ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad model config: {e}") from None


def _ints(text: str) -> list:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise CliError(f"expected comma-separated integers, got {text!r}") from None


def _shape(text: str) -> tuple:
    vals = _ints(text)
    if len(vals) != 2:
        raise CliError(f"--shape needs M,D, got {text!r}")
    return tuple(vals)


def _emit(obj) -> None:
    if isinstance(obj, str):
        sys.stdout.write(obj if obj.endswith("\n") else obj + "\n")
    else:
        sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands

def cmd_init(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if args.layer:
        rng = np.random.default_rng(seed)
        lins = {}
        for spec in args.layer:
            name, _, dims = spec.partition("=")
            if not dims:
                raise CliError(f"--layer needs NAME=M,D, got {spec!r}")
            M, D = _shape(dims)
            lins[name] = rng.normal(0.0, 0.02, size=(M, D)).astype(np.float32)
        nbytes = container.save_linears(args.out, lins)
        _emit({"out": str(args.out), "bytes": nbytes, "linears": {k: list(v.shape) for k, v in lins.items()}})
        return 0
    mcfg = _model(args.model, cfg, mr.DESK_MODEL)
    dense = mr.init_dense_model(mcfg, seed=seed)
    nbytes = container.save_model(args.out, dense)
    _emit({"out": str(args.out), "bytes": nbytes, "model": mcfg.to_dict()})
    return 0


def cmd_quantize(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    manifest, _ = container.read_container(args.input)
    kind = manifest.get("kind")
    breakdown = {}
    if kind == "model":
        dense = container.load_model(args.input)
        scheme = _scheme(args, cfg, mr.DESK_SCHEME)
        if dense.quantized:
            raise CliError("input model is already quantized")
        rng = np.random.default_rng(seed)
        calib = rng.integers(0, dense.config.vocab, size=args.calib_tokens)
        try:
            q = mr.quantize_model(dense, scheme, calib, seed=seed, int8_tables=not args.fp32_tables)
        except ValueError as e:
            raise CliError(str(e)) from None
        container.save_model(args.output, q)
        for i, layer in enumerate(q.layers):
            for name, lin in layer.linears.items():
                breakdown[f"l{i}.{name}"] = lin.size_breakdown()
    elif kind == "linears":
        lins, _, extra = container.load_linears(args.input)
        scheme = _scheme(args, cfg, QWEN_SCHEME)
        rng = np.random.default_rng(seed)
        out = {}
        for name, W in lins.items():
            if not isinstance(W, np.ndarray):
                raise CliError(f"layer {name} is already quantized")
            samples = extra.get(f"{name}.act_samples")
            if samples is None and scheme.uses_activation_vq:
                samples = rng.normal(size=(args.calib_tokens, W.shape[1])).astype(np.float32)
            try:
                out[name] = quantize_linear(W, scheme, samples, seed=seed, int8_tables=not args.fp32_tables)
            except ValueError as e:
                raise CliError(f"{name}: {e}") from None
            breakdown[name] = out[name].size_breakdown()
        container.save_linears(args.output, out, scheme)
    else:
        raise CliError(f"unsupported container kind {kind!r}")
    total = {k: sum(b[k] for b in breakdown.values()) for k in ("codebooks", "indices", "tables", "dense", "total")}
    _emit({"out": str(args.output), "scheme": scheme.to_dict(), "layers": breakdown, "total": total})
    return 0


def cmd_infer(args) -> int:
    model = container.load_model(args.artifact)
    prompt = _ints(args.prompt)
    if not prompt:
        raise CliError("empty prompt")
    if max(prompt) >= model.config.vocab or min(prompt) < 0:
        raise CliError("prompt token out of vocabulary range")
    tokens = mr.generate(model, prompt, args.max_new, capacity=args.capacity)
    out = {"prompt": prompt, "generated": tokens, "scheme": model.scheme.to_dict() if model.scheme else None}
    if args.compare_dense:
        dense = container.load_model(args.compare_dense)
        if dense.quantized:
            raise CliError("--compare-dense expects a dense model")
        try:
            out["compare"] = mr.compare_paths(dense, model, prompt + tokens)
        except ValueError as e:
            raise CliError(str(e)) from None
    _emit(out)
    return 0


def _paper_example_rows(kinds) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "t_mem", "t_lat", "overall", "chosen_S"])
    for kind in kinds:
        est = layer_latency(PAPER_EXAMPLE_SHAPE, scheme_for(kind, PAPER_EXAMPLE_SCHEME), PAPER_EXAMPLE_HW)
        w.writerow([kind, f"{est.t_mem:.6g}", f"{est.t_lat:.6g}", f"{est.overall:.6g}",
                    est.chosen_S if est.chosen_S is not None else ""])
    return buf.getvalue()


def cmd_perf(args) -> int:
    if args.paper_example:
        kinds = [args.scheme] if args.scheme else ["weight_vq", "activation_vq", "coquant"]
        _emit(_paper_example_rows(kinds))
        return 0
    cfg = _config(args)
    hw, _ = _hardware(args.hw, cfg)
    scheme = _scheme(args, cfg, QWEN_SCHEME)
    model = ModelConfig.single_linear(*_shape(args.shape)) if args.shape else _model(args.model, cfg, QWEN3_1_7B)
    seqs = _ints(args.seq)
    if args.stage == "end2end":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["prompt_len", "gen_len", "scheme", "prefill_cycles", "decode_cycles", "end2end_cycles",
                    "tokens_per_s"])
        for n in seqs:
            lat = transformer_latency(model, scheme, hw, n, args.gen_len)
            w.writerow([n, args.gen_len, scheme.kind, f"{lat.prefill_cycles:.6g}", f"{lat.decode_cycles:.6g}",
                        f"{lat.end2end_cycles:.6g}", f"{lat.tokens_per_s('end2end'):.6g}"])
        _emit(buf.getvalue())
        return 0
    try:
        pts = roofline_points(model, scheme, hw, seqs, args.stage, linear_only=bool(args.shape))
    except ValueError as e:
        raise CliError(str(e)) from None
    _emit(points_to_csv(pts))
    return 0


def _within(sim: float, ref: float, tol: float) -> bool:
    return ref == 0 and sim == 0 or ref > 0 and abs(sim / ref - 1) <= tol


def cmd_simulate(args) -> int:
    cfg = _config(args)
    hw, topo_raw = _hardware(args.hw, cfg)
    if args.topology:
        topo_raw.update(_read_json(args.topology))
    topo_raw.update(cfg.get("topology", {}))
    if args.num_bpcsu is not None:
        topo_raw["num_bpcsu"] = args.num_bpcsu
    if args.chain_len is not None:
        topo_raw["chain_len"] = args.chain_len
    topo = EngineTopology.from_dict(topo_raw)
    summary = {}
    try:
        if args.paper_example or args.shape:
            if args.paper_example:
                shape, scheme, hw = PAPER_EXAMPLE_SHAPE, PAPER_EXAMPLE_SCHEME, PAPER_EXAMPLE_HW
                if args.prompt_len is not None:
                    shape = LayerShape(shape.M, shape.D, args.prompt_len)
            else:
                scheme = _scheme(args, cfg, QWEN_SCHEME)
                shape = LayerShape(*_shape(args.shape), args.prompt_len if args.prompt_len is not None else 1)
            trace = simulate_lutlinear(shape, scheme, hw, topo)
            ref = layer_latency(shape, scheme, hw).overall
            tol = SINGLE_LAYER_TOL
            summary["analytic_cycles"] = ref
        else:
            model = _model(args.model, cfg, mr.DESK_MODEL)
            scheme = _scheme(args, cfg, mr.DESK_SCHEME if model == mr.DESK_MODEL else QWEN_SCHEME)
            prompt = args.prompt_len if args.prompt_len is not None else 16
            if args.block:
                trace = simulate_layer_schedule(args.mode, model, scheme, hw, prompt, prompt, topo)
                ref, tol = None, None
            else:
                trace = simulate_end_to_end(model, scheme, hw, topo, prompt, args.gen_len,
                                            record=bool(args.trace), mode=args.mode)
                lat = transformer_latency(model, scheme, hw, prompt, args.gen_len)
                ref, tol = lat.end2end_cycles, END_TO_END_TOL
                summary.update(analytic_cycles=ref, analytic_prefill=lat.prefill_cycles,
                               analytic_decode=lat.decode_cycles)
    except ValueError as e:
        raise CliError(str(e)) from None
    summary.update(trace.summary())
    summary["mode"] = args.mode
    if args.trace:
        Path(args.trace).write_text(trace.to_jsonl())
        summary["trace"] = str(args.trace)
    status = 0
    if args.check:
        if ref is None:
            raise CliError("--check needs an analytic reference (not available with --block)")
        ok = _within(trace.total_cycles, ref, tol)
        summary["check"] = {"tolerance": tol, "ratio": trace.total_cycles / ref if ref else None, "passed": ok}
        if not ok:
            status = 3
    _emit(summary)
    return status


# --------------------------------------------------------------------------
# argument parsing

def _scheme_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", choices=SCHEME_KINDS, help="quantization scheme kind")
    p.add_argument("--G", type=int, help="weight group size")
    p.add_argument("--v", type=int, help="vector length")
    p.add_argument("--c-w", dest="c_w", type=int, help="weight centroids per group")
    p.add_argument("--c-a", dest="c_a", type=int, help="activation centroids per slice")
    p.add_argument("--table-bits", dest="table_bits", type=int, choices=(4, 8))
    p.add_argument("--config", help="JSON file with defaults (scheme, model, hw, topology, seed)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lutllm", description="LUT-based vector-quantized LLM toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a seeded random dense model or bare-layer container")
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="model config JSON or a named model (desk, qwen3-1.7b)")
    p.add_argument("--layer", action="append", help="NAME=M,D bare dense layer (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("quantize", help="quantize a dense container")
    p.add_argument("input")
    p.add_argument("output")
    _scheme_flags(p)
    p.add_argument("--calib-tokens", type=int, default=256, help="calibration tokens (or samples per bare layer)")
    p.add_argument("--fp32-tables", action="store_true", help="keep lookup tables in fp32")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="greedy generation from a model artifact")
    p.add_argument("artifact")
    p.add_argument("--prompt", required=True, help="comma-separated token ids")
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--capacity", type=int, help="KV cache capacity (default: exactly enough)")
    p.add_argument("--compare-dense", help="dense model artifact to diff against")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("perf", help="analytic latency / roofline CSV")
    _scheme_flags(p)
    p.add_argument("--paper-example", action="store_true", help="the small worked-example layer and hardware")
    p.add_argument("--hw", help="bundled profile name or profile JSON path (default v80)")
    target = p.add_mutually_exclusive_group()
    target.add_argument("--shape", help="single linear layer M,D")
    target.add_argument("--model", help="model config JSON or a named model")
    p.add_argument("--seq", default="1,16,64,256,1024,4096")
    p.add_argument("--stage", choices=("prefill", "decode", "end2end"), default="prefill")
    p.add_argument("--gen-len", type=int, default=128, help="decode tokens for --stage end2end")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("simulate", help="event simulation of the LUT engine")
    _scheme_flags(p)
    p.add_argument("--hw", help="bundled profile name, 'paper-example' or profile JSON path")
    p.add_argument("--topology", help="topology JSON (overrides the profile's topology key)")
    p.add_argument("--num-bpcsu", type=int)
    p.add_argument("--chain-len", type=int)
    target = p.add_mutually_exclusive_group()
    target.add_argument("--model", help="model config JSON or a named model (default desk)")
    target.add_argument("--shape", help="single linear layer M,D")
    target.add_argument("--paper-example", action="store_true")
    p.add_argument("--block", action="store_true", help="one attention block only (Q/K/V, attention, O)")
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--gen-len", type=int, default=0)
    p.add_argument("--mode", choices=SCHEDULE_MODES, default="hybrid")
    p.add_argument("--trace", help="write events as JSON lines")
    p.add_argument("--check", action="store_true", help="exit 3 if the simulator diverges from the analytic model")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
