"""Command-line driver: ``generate``, ``quantize``, ``analyze`` and ``report``.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 stage failure
(the failing stage is named on stderr).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__, analysis, config as cfgmod, tensorfile
from .decoder import FP, BlockState, Decoder, Mode, build_decoder, run_stages, synthetic_states
from .reconstruct import StageFailure, composite_mse, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STAGE = 0, 1, 2, 3
REPORT_SCHEMA = "xattn-ptq-report/1"
CHECKPOINT_SCHEMA = "xattn-ptq-checkpoint/1"
EPS_SWEEP = (1e-2, 1e-3, 1e-4)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise cfgmod.ConfigError(message)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageFailure:
        raise
    except OSError:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced with the stage name
        raise StageFailure(name, exc) from exc


# --- checkpoint ----------------------------------------------------------------


def checkpoint_dir(cfg) -> str:
    return os.path.join(cfg.output_dir, "checkpoint")


def _dims(cfg) -> dict:
    return {k: getattr(cfg, k) for k in ("d_model", "n_heads", "n_image_tokens", "n_prompt_tokens", "n_blocks")}


def save_checkpoint(path, model: Decoder, sets: dict, dims: dict) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {"schema": CHECKPOINT_SCHEMA, "dims": dims, "params": {}, "data": {}}
    for name, arr in model.params():
        fname = name + ".cart"
        tensorfile.write_tensor(os.path.join(path, fname), arr)
        manifest["params"][name] = fname
    for set_name, state in sets.items():
        for stream in ("tokens", "image"):
            fname = f"{set_name}.{stream}.cart"
            tensorfile.write_tensor(os.path.join(path, fname), getattr(state, stream))
            manifest["data"][f"{set_name}.{stream}"] = fname
    tensorfile.atomic_write_bytes(
        os.path.join(path, "manifest.json"), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    )


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise tensorfile.TensorFormatError("unrecognised checkpoint manifest")
    dims = manifest["dims"]
    model = build_decoder(0, dims["d_model"], dims["n_heads"], dims["n_blocks"])
    params = dict(model.params())
    if set(params) != set(manifest["params"]):
        raise tensorfile.TensorFormatError("checkpoint parameters do not match the decoder layout")
    for name, fname in manifest["params"].items():
        arr = tensorfile.read_tensor(os.path.join(path, fname))
        if arr.shape != params[name].shape:
            raise tensorfile.TensorFormatError(f"{name}: stored shape {arr.shape} != {params[name].shape}")
        params[name][...] = arr
    sets = {}
    for key, fname in manifest["data"].items():
        set_name, stream = key.rsplit(".", 1)
        sets.setdefault(set_name, {})[stream] = tensorfile.read_tensor(os.path.join(path, fname))
    data = {k: BlockState(v["tokens"], v["image"]) for k, v in sets.items()}
    return model, data, dims


def _check_dims(cfg, dims):
    if dims != _dims(cfg):
        raise cfgmod.ConfigError(f"config dims {_dims(cfg)} do not match checkpoint {dims}")


# --- reports ---------------------------------------------------------------------


def _assert_finite(obj, path="report"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite value at {path}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _assert_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _assert_finite(v, f"{path}[{i}]")


def write_json(path, obj) -> None:
    tensorfile.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def numeric_payload(report: dict) -> dict:
    """The report without its wall-clock section; identical runs must agree on this exactly."""
    return {k: v for k, v in report.items() if k != "timing"}


def _quantizer_summary(qmodel) -> dict:
    out = {}
    for lq in qmodel.quantizers():
        p = lq.current_params()
        entry = {"kind": lq.kind, "bits": p.bits, "enabled": lq.enabled}
        if lq.kind == "act":
            entry.update(scale=float(p.scale), zero_point=int(p.zero_point))
        else:
            entry.update(scale_min=float(np.min(p.scale)), scale_max=float(np.max(p.scale)),
                         rounded_up=float(np.mean(lq.alpha >= 0)))
        out[lq.name] = entry
    return out


# --- verbs -----------------------------------------------------------------------


def cmd_generate(cfg) -> dict:
    model = build_decoder(cfg.seed, cfg.d_model, cfg.n_heads, cfg.n_blocks)
    sets = {}
    for k, name in enumerate(("calib", "eval")):
        rng = np.random.default_rng([cfg.seed, 1 + k])
        sets[name] = synthetic_states(rng, cfg.calib_samples, cfg.n_prompt_tokens, cfg.n_image_tokens, cfg.d_model)
    save_checkpoint(checkpoint_dir(cfg), model, sets, _dims(cfg))
    c = sets["calib"]
    return {
        "checkpoint": checkpoint_dir(cfg),
        "tokens_range": [float(c.tokens.min()), float(c.tokens.max())],
        "image_range": [float(c.image.min()), float(c.image.max())],
    }


def cmd_quantize(cfg) -> dict:
    model, data, dims = load_checkpoint(checkpoint_dir(cfg))
    _check_dims(cfg, dims)
    calib, held_out = data["calib"], data.get("eval")
    t0 = time.perf_counter()
    res = run_pipeline(model, calib, cfg.reconstruction(), cfg.mac_enabled, cfg.lambda_threshold)
    t_pipe = time.perf_counter() - t0
    evaluation = _stage("evaluate", lambda: {
        "calib_initial_composite": res.initial_composite,
        "calib_after_mac_composite": res.after_mac_composite,
        "calib_final_composite": res.final_composite,
        **({"eval_final_composite": composite_mse(model, res.qmodel, held_out)} if held_out is not None else {}),
    })
    report = {
        "schema": REPORT_SCHEMA,
        "command": "quantize",
        "version": __version__,
        "config": cfg.to_dict(),
        "granularity": cfg.effective_granularity,
        "stage_log": res.stage_log,
        "calibration": _quantizer_summary(res.qmodel),
        "compensation": [{"layer": c.extra.get("layer", ""), **c.summary()} for c in res.compensations],
        "reconstruction": [t.summary() for t in res.traces],
        "evaluation": evaluation,
        "timing": {"pipeline_seconds": t_pipe, "jobs": {t.name: t.wall_time for t in res.traces}},
    }
    _stage("report", _assert_finite, numeric_payload(report))
    os.makedirs(cfg.output_dir, exist_ok=True)
    lines = "".join(
        json.dumps({"job": t.name, "step": i, "loss": v}) + "\n" for t in res.traces for i, v in enumerate(t.losses)
    )
    tensorfile.atomic_write_bytes(os.path.join(cfg.output_dir, "traces.jsonl"), lines.encode())
    write_json(os.path.join(cfg.output_dir, "report.json"), report)
    return report


def _block_inputs(model, state, upto_block):
    """fp state entering block ``upto_block``'s t2i attention."""
    for blk in model.blocks[:upto_block]:
        state = blk.forward(state)[0]
    return model.blocks[upto_block].self_attn.forward(state)[0]


def cmd_analyze(cfg) -> dict:
    model, data, dims = load_checkpoint(checkpoint_dir(cfg))
    _check_dims(cfg, dims)
    calib = data["calib"]
    mode = Mode(surrogate=True) if cfg.linear_surrogate else FP

    def theorem():
        out = []
        for b, blk in enumerate(model.blocks):
            st = _block_inputs(model, calib.take(slice(0, 1)), b)
            rng = np.random.default_rng([cfg.seed, 7, b])
            dT, dI = rng.standard_normal(st.tokens.shape), rng.standard_normal(st.image.shape)
            sweep = [analysis.verify_theorem1(blk, st, dT, dI, e, mode).summary() for e in EPS_SWEEP]
            ratio = analysis.richardson_ratio(blk, st, dT, dI, 1e-3, mode)[0]
            out.append({"block": b, "eps_sweep": sweep, "richardson_ratio": ratio})
        return out

    def corollary():
        out = []
        for b, blk in enumerate(model.blocks):
            st = _block_inputs(model, calib.take(slice(0, 2)), b)
            rep = analysis.verify_corollary(blk, st, cfg.bits_w, cfg.bits_a)
            out.append({"block": b, **rep.summary()})
        return out

    t0 = time.perf_counter()
    th = _stage("theorem", theorem)
    co = _stage("corollary", corollary)
    osc = _stage("oscillation", analysis.oscillation_scan, model, calib, cfg.reconstruction())
    report = {
        "schema": REPORT_SCHEMA,
        "command": "analyze",
        "version": __version__,
        "config": cfg.to_dict(),
        "theorem": th,
        "corollary": co,
        "oscillation": osc.summary(),
        "timing": {"analyze_seconds": time.perf_counter() - t0},
    }
    payload = numeric_payload(report)
    _stage("report", _assert_finite, payload)
    if json.loads(json.dumps(report)) != report:
        raise StageFailure("report", ValueError("report does not survive a JSON round trip"))
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_json(os.path.join(cfg.output_dir, "analysis.json"), report)
    return report


def cmd_report(cfg) -> str:
    lines = []
    for fname in ("report.json", "analysis.json"):
        path = os.path.join(cfg.output_dir, fname)
        if not os.path.exists(path):
            continue
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        lines.append(f"== {fname} ({rep.get('command')})")
        if rep.get("command") == "quantize":
            lines.append(f"granularity       {rep['granularity']}")
            lines.append(f"stages            {' -> '.join(rep['stage_log'])}")
            for c in rep["compensation"]:
                lines.append(
                    f"mac {c['layer']:<28} lambda={c['lambda']:.4g}  loss {c['loss_before']:.6g} -> {c['loss_after']:.6g}"
                )
            for t in rep["reconstruction"]:
                lines.append(f"rec {t['name']:<40} {t['initial_loss']:.6g} -> {t['final_loss']:.6g}")
            for k, v in rep["evaluation"].items():
                lines.append(f"{k:<28} {v:.6g}")
        else:
            for th in rep["theorem"]:
                res = ", ".join(f"{s['eps']:g}: {s['relative_residual']:.3e}" for s in th["eps_sweep"])
                lines.append(f"block {th['block']} residuals {res}; ratio {th['richardson_ratio']:.3f}")
            for co in rep["corollary"]:
                lines.append(
                    f"block {co['block']} corollary max rel err {co['max_rel_error']:.2e}, "
                    f"detached zero {co['detached_all_zero']}"
                )
            osc = rep["oscillation"]
            lines.append("oscillation " + ", ".join(f"{k}={v:.3f}" for k, v in osc["scores"].items()))
    if not lines:
        raise FileNotFoundError(f"no report found in {cfg.output_dir}")
    return "\n".join(lines)


VERBS = {"generate": cmd_generate, "quantize": cmd_quantize, "analyze": cmd_analyze, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xattn-ptq", description="Post-training quantization of a two-way cross-attention decoder.")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="flat JSON config file")
    for f in fields(cfgmod.RunConfig):
        p.add_argument(f"--{f.name}", dest=f.name, default=None, metavar=f.type.upper())
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {f.name: getattr(args, f.name) for f in fields(cfgmod.RunConfig) if getattr(args, f.name) is not None}
        cfg = cfgmod.load(args.config, overrides)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        out = VERBS[args.verb](cfg)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"stage failed: {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, tensorfile.TensorFormatError, KeyError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.verb == "report":
        print(out)
    elif args.verb == "generate":
        print(json.dumps(out, sort_keys=True))
    else:
        print(f"wrote {os.path.join(cfg.output_dir, 'report.json' if args.verb == 'quantize' else 'analysis.json')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
