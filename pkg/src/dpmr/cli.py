"""Command-line front end.

Subcommands::

    dpmr simulate  [--config SPEC.json] --out DIR
    dpmr correct   IN_DIR --out DIR [--config SOLVER.json] [--mode pair|stack]
    dpmr mavric    IN_DIR --out DIR
    dpmr evaluate  TEST REF [--mask MASK] [--out FILE]
    dpmr gradcheck [--seed N] [--size N]

Every subcommand that writes files also writes ``manifest.json`` with its
parameters and the SHA-256 of every input and output. Exit status: 0 on
success, 1 on validation or convergence failure, 2 on I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .forward_model import AcquisitionParams
from .io_formats import TensorFormatError, export_image, read_tensor, write_tensor
from .metrics import format_metrics, mean_in_mask, nrmse, psnr
from .phantom import (
    DipoleFieldSpec,
    PhantomSpec,
    SpectralBinSpec,
    SpectralBinStack,
    dipole_field,
    make_bin_stack,
    make_dual_pair,
    make_grid_phantom,
    spec_from_dict,
    spec_to_dict,
)
from .solver import DivergenceError, SolverConfig, gradient_check, solve
from .spectral import correct_stack, distort_stack, rsos

log = logging.getLogger("dpmr")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

DEFAULT_SCENARIO = {
    "phantom": spec_to_dict(PhantomSpec(margin=6)),
    "field": spec_to_dict(DipoleFieldSpec()),
    "bins": spec_to_dict(SpectralBinSpec()),
    "acquisition": {"readout_bandwidth": 780.0},
    "stack": True,
}


class SpecError(ValueError):
    pass


class IOFailure(RuntimeError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _line_of(text: str, needle: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _spec_error(path, text, msg, key=None, lineno=None, colno=None) -> SpecError:
    if lineno is None and key is not None:
        lineno = _line_of(text, f'"{key}"')
    where = f"{path}:{lineno}" if lineno else str(path)
    if colno:
        where += f":{colno}"
    context = ""
    if lineno:
        context = "\n    " + text.splitlines()[lineno - 1].strip()
    return SpecError(f"{where}: {msg}{context}")


def load_json(path) -> tuple[dict, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _spec_error(path, text, exc.msg, lineno=exc.lineno, colno=exc.colno) from exc
    if not isinstance(data, dict):
        raise _spec_error(path, text, "top level must be an object", lineno=1)
    return data, text


def parse_scenario(path=None) -> dict:
    """Merge a scenario file over :data:`DEFAULT_SCENARIO` and build the spec objects."""
    merged = json.loads(json.dumps(DEFAULT_SCENARIO))
    text = ""
    if path is not None:
        data, text = load_json(path)
        unknown = set(data) - set(merged)
        if unknown:
            key = sorted(unknown)[0]
            raise _spec_error(path, text, f"unknown section {key!r}", key=key)
        for section, value in data.items():
            if isinstance(merged[section], dict):
                if not isinstance(value, dict):
                    raise _spec_error(path, text, f"section {section!r} must be an object", key=section)
                merged[section].update(value)
            else:
                merged[section] = value
    built = {}
    for section, cls in (("phantom", PhantomSpec), ("field", DipoleFieldSpec), ("bins", SpectralBinSpec)):
        try:
            built[section] = spec_from_dict(cls, merged[section])
        except (TypeError, ValueError) as exc:
            bad = next((k for k in merged[section] if k in str(exc)), section)
            raise _spec_error(path or "<defaults>", text, f"{section}: {exc}", key=bad) from exc
    acq = merged["acquisition"]
    unknown = set(acq) - {"readout_bandwidth"}
    if unknown:
        key = sorted(unknown)[0]
        raise _spec_error(path, text, f"acquisition: unknown field {key!r}", key=key)
    try:
        built["acquisition"] = AcquisitionParams(float(acq["readout_bandwidth"]))
    except (TypeError, ValueError) as exc:
        raise _spec_error(path or "<defaults>", text, f"acquisition: {exc}", key="readout_bandwidth") from exc
    built["stack"] = bool(merged["stack"])
    built["resolved"] = merged
    return built


class RunWriter:
    """Writes tensors/previews into an output directory and records a manifest."""

    def __init__(self, out_dir, subcommand: str, parameters: dict, seed: int):
        self.out = Path(out_dir)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IOFailure(f"cannot create {out_dir}: {exc}") from exc
        self.manifest = {
            "tool": "dpmr",
            "version": __version__,
            "subcommand": subcommand,
            "seed": seed,
            "parameters": parameters,
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, path):
        path = Path(path)
        self.manifest["inputs"][path.name] = sha256_file(path)

    def _record(self, rel):
        self.manifest["outputs"][rel] = sha256_file(self.out / rel)

    def tensor(self, name, data, meta=None, preview=True, **kw):
        rel = f"{name}.dpmr"
        try:
            write_tensor(self.out / rel, data, meta, **kw)
            self._record(rel)
            if preview and np.ndim(data) == 2:
                (self.out / "previews").mkdir(exist_ok=True)
                prel = f"previews/{name}.pgm"
                export_image(data, self.out / prel)
                self._record(prel)
        except OSError as exc:
            raise IOFailure(f"cannot write {self.out / rel}: {exc}") from exc

    def text(self, rel, content: str):
        path = self.out / rel
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(content, encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc
        self._record(rel)

    def close(self):
        self.manifest["outputs"] = dict(sorted(self.manifest["outputs"].items()))
        path = self.out / "manifest.json"
        try:
            path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc


def _read(path):
    try:
        return read_tensor(path)
    except FileNotFoundError as exc:
        raise IOFailure(f"missing input {path}") from exc
    except (OSError, TensorFormatError) as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def _acq_meta(params: AcquisitionParams) -> dict:
    return {"readout_bandwidth": params.readout_bandwidth}


def cmd_simulate(args) -> int:
    sc = parse_scenario(args.config)
    params = sc["acquisition"]
    I0 = make_grid_phantom(sc["phantom"])
    dv = dipole_field(sc["field"], I0.shape)
    I_pos, I_neg = make_dual_pair(I0, dv, params)

    run = RunWriter(args.out, "simulate", sc["resolved"], args.seed)
    if args.config:
        run.add_input(args.config)
    meta = _acq_meta(params)
    run.tensor("I0", I0, meta, axes=["row", "readout"])
    run.tensor("dv", dv.data, {**meta, "domain_tag": dv.domain_tag.value}, axes=["row", "readout"], units="Hz")
    run.tensor("I_pos", I_pos, {**meta, "polarity": 1}, axes=["row", "readout"])
    run.tensor("I_neg", I_neg, {**meta, "polarity": -1}, axes=["row", "readout"])
    if sc["stack"]:
        bins = sc["bins"]
        stack = make_bin_stack(I0, dv, bins)
        bmeta = {**meta, "bin_centers": list(bins.centers), "fwhm": bins.fwhm}
        axes = ["bin", "row", "readout"]
        run.tensor("stack_ref", stack.bins, bmeta, axes=axes)
        run.tensor("stack_pos", distort_stack(stack, dv, params).bins, {**bmeta, "polarity": 1}, axes=axes)
        run.tensor("stack_neg", distort_stack(stack, dv, params.flipped()).bins, {**bmeta, "polarity": -1}, axes=axes)
        run.tensor("rsos_ref", rsos(stack), meta)
    run.close()
    print(f"wrote {len(run.manifest['outputs'])} files to {args.out}")
    return EXIT_OK


def _solver_config(args) -> tuple[SolverConfig, dict]:
    settings = {}
    if args.config:
        data, text = load_json(args.config)
        try:
            SolverConfig.from_dict(data)
        except (TypeError, ValueError) as exc:
            key = next((k for k in data if k in str(exc)), None)
            raise _spec_error(args.config, text, str(exc), key=key) from exc
        settings.update(data)
    if args.max_iters is not None:
        settings["max_iters"] = args.max_iters
    settings["seed"] = args.seed
    cfg = SolverConfig.from_dict(settings)
    return cfg, cfg.to_dict()


def _load_stack(path):
    data, meta = _read(path)
    return SpectralBinStack(data.astype(np.float64), SpectralBinSpec(meta["bin_centers"], meta["fwhm"])), meta


def cmd_correct(args) -> int:
    cfg, settings = _solver_config(args)
    in_dir = Path(args.in_dir)
    run = RunWriter(args.out, "correct", {"mode": args.mode, "solver": settings, "in_dir": str(args.in_dir)}, args.seed)
    if args.config:
        run.add_input(args.config)
    metrics = {}

    if args.mode == "pair":
        I_pos, meta = _read(in_dir / "I_pos.dpmr")
        I_neg, _ = _read(in_dir / "I_neg.dpmr")
        run.add_input(in_dir / "I_pos.dpmr")
        run.add_input(in_dir / "I_neg.dpmr")
        params = AcquisitionParams(meta.get("readout_bandwidth", 780.0))
        res = solve(I_pos, I_neg, params, cfg)
        ameta = _acq_meta(params)
        run.tensor("dw_pos", res.dw_pos.data, {**ameta, "domain_tag": res.dw_pos.domain_tag.value}, units="Hz")
        run.tensor("dw_neg", res.dw_neg.data, {**ameta, "domain_tag": res.dw_neg.domain_tag.value}, units="Hz")
        run.tensor("dv_hat", res.dv.data, {**ameta, "domain_tag": res.dv.domain_tag.value}, units="Hz")
        run.tensor("rho", res.rho, ameta, preview=True)
        run.tensor("I_pos_to_0", res.from_pos, ameta)
        run.tensor("I_neg_to_0", res.from_neg, ameta)
        run.tensor("I0_hat", res.I0_hat, ameta)
        run.text("loss_trace.csv", "\n".join(res.trace_lines()) + "\n")
        metrics["iterations"] = res.state.iteration
        metrics["loss_initial"] = res.loss_trace[0].total
        metrics["loss_final"] = res.loss_trace[-1].total
        if (in_dir / "I0.dpmr").exists():
            I0, _ = _read(in_dir / "I0.dpmr")
            run.add_input(in_dir / "I0.dpmr")
            metrics["nrmse_I0_hat"] = nrmse(res.I0_hat, I0)
            metrics["nrmse_I_pos"] = nrmse(I_pos, I0)
            metrics["nrmse_I_neg"] = nrmse(I_neg, I0)
    else:
        stack_pos, meta = _load_stack(in_dir / "stack_pos.dpmr")
        stack_neg, _ = _load_stack(in_dir / "stack_neg.dpmr")
        run.add_input(in_dir / "stack_pos.dpmr")
        run.add_input(in_dir / "stack_neg.dpmr")
        params = AcquisitionParams(meta.get("readout_bandwidth", 780.0))
        out = correct_stack(stack_pos, stack_neg, params, cfg, threads=args.threads, full=True)
        bmeta = {**_acq_meta(params), "bin_centers": list(stack_pos.spec.centers), "fwhm": stack_pos.spec.fwhm}
        run.tensor("stack_I0_hat", out.corrected.bins, bmeta, axes=["bin", "row", "readout"])
        run.tensor("I0_hat", out.image, _acq_meta(params))
        for b, res in enumerate(out.results):
            run.text(f"traces/loss_trace_bin{b:02d}.csv", "\n".join(res.trace_lines()) + "\n")
        if (in_dir / "stack_ref.dpmr").exists():
            ref_stack, _ = _load_stack(in_dir / "stack_ref.dpmr")
            run.add_input(in_dir / "stack_ref.dpmr")
            ref = rsos(ref_stack)
            metrics["nrmse_I0_hat"] = nrmse(out.image, ref)
            metrics["nrmse_mavric_pos"] = nrmse(rsos(stack_pos), ref)
            metrics["nrmse_mavric_neg"] = nrmse(rsos(stack_neg), ref)
    text = format_metrics(metrics)
    run.text("metrics.txt", text + "\n")
    run.close()
    print(text)
    return EXIT_OK


def cmd_mavric(args) -> int:
    in_dir = Path(args.in_dir)
    stack_pos, meta = _load_stack(in_dir / "stack_pos.dpmr")
    stack_neg, _ = _load_stack(in_dir / "stack_neg.dpmr")
    run = RunWriter(args.out, "mavric", {"in_dir": str(args.in_dir)}, args.seed)
    run.add_input(in_dir / "stack_pos.dpmr")
    run.add_input(in_dir / "stack_neg.dpmr")
    ameta = {"readout_bandwidth": meta.get("readout_bandwidth", 780.0)}
    m_pos, m_neg = rsos(stack_pos), rsos(stack_neg)
    run.tensor("mavric_pos", m_pos, {**ameta, "polarity": 1})
    run.tensor("mavric_neg", m_neg, {**ameta, "polarity": -1})
    metrics = {}
    if (in_dir / "stack_ref.dpmr").exists():
        ref_stack, _ = _load_stack(in_dir / "stack_ref.dpmr")
        run.add_input(in_dir / "stack_ref.dpmr")
        ref = rsos(ref_stack)
        metrics["nrmse_mavric_pos"] = nrmse(m_pos, ref)
        metrics["nrmse_mavric_neg"] = nrmse(m_neg, ref)
    text = format_metrics(metrics)
    run.text("metrics.txt", text + "\n")
    run.close()
    if text:
        print(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    test, _ = _read(args.test)
    ref, _ = _read(args.ref)
    mask = None
    if args.mask:
        mask_data, _ = _read(args.mask)
        mask = mask_data != 0
    metrics = {"nrmse": nrmse(test, ref, mask), "psnr": psnr(test, ref)}
    if mask is not None:
        metrics["mean_test_in_mask"] = mean_in_mask(test, mask)
        metrics["mean_ref_in_mask"] = mean_in_mask(ref, mask)
    text = format_metrics(metrics)
    if args.out:
        try:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {args.out}: {exc}") from exc
    print(text)
    return EXIT_OK


GRADCHECK_TOL = 1e-3


def cmd_gradcheck(args) -> int:
    if args.size < 4:
        raise ValueError("--size must be >= 4")
    errors = gradient_check(args.seed, args.size, corrupt=args.corrupt)
    ok = True
    for name, err in errors.items():
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{name} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    print(f"result={'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="PRNG seed recorded in the manifest")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dpmr", description="Dual-polarity metal-artifact simulation and correction")
    parser.add_argument("--version", action="version", version=f"dpmr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a phantom, field and dual-polarity data")
    p.add_argument("--config", help="scenario JSON (phantom/field/bins/acquisition sections)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correct", parents=[common], help="estimate fields and the corrected image")
    p.add_argument("in_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="solver settings JSON")
    p.add_argument("--mode", choices=("pair", "stack"), default="pair")
    p.add_argument("--max-iters", type=int)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("mavric", parents=[common], help="RSOS-combine the acquired bin stacks")
    p.add_argument("in_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mavric)

    p = sub.add_parser("evaluate", parents=[common], help="compare an image with a reference")
    p.add_argument("test")
    p.add_argument("ref")
    p.add_argument("--mask")
    p.add_argument("--out", help="also write the metrics to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the loss gradients")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SpecError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
