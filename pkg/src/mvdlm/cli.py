"""Command-line interface: ``mvdlm {design,fit,group,simulate,assess}``.

Every command accepts ``--config FILE.json``; explicit flags override file
values.  Outputs land in ``--out`` together with ``manifest.json`` (version,
resolved configuration and its hash, input and output checksums) and, for
mapping commands, a ``failures.log`` sidecar.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .design import HrfParams, build_design, load_design, load_stimulus, save_design
from .dlm import ModelConfig
from .errors import ConfigurationError, MVDLMError
from .group import group_combine, group_contrast, map_group
from .mapping import default_workers, map_subject
from .nifti import write_nifti
from .simulate import (PARADIGMS, PhantomSpec, assess_fpr, block_design, fictitious_designs,
                       generate_phantom, generate_resting)
from .summary import load_summary
from .trajectories import ALGORITHMS, EffectKind, parse_algorithm
from .volume import build_mask, read_volume, write_volume

log = logging.getLogger("mvdlm")


@dataclass
class RunConfig:
    r: int = 1
    beta: float = 0.95
    algorithm: str = "fest"
    kind: str = "average"
    n_draws: int = 1000
    threshold: float = 0.95
    burn_in: int = 30
    seed: int = 0
    workers: int | None = None
    chunk_size: int = 64
    standardize: bool = True
    v_scale: float = 1.0
    prior_c_scale: float = 100.0
    prior_n: float = 1.0

    def validate(self) -> "RunConfig":
        if int(self.r) != self.r or not 1 <= self.r <= 4:
            raise ConfigurationError(f"r must be an integer in 1..4, got {self.r}")
        if not 0 < self.beta <= 1:
            raise ConfigurationError(f"beta must lie in (0, 1], got {self.beta}")
        if not 0 < self.threshold <= 1:
            raise ConfigurationError(f"threshold must lie in (0, 1], got {self.threshold}")
        if int(self.n_draws) != self.n_draws or self.n_draws < 1:
            raise ConfigurationError(f"n_draws must be a positive integer, got {self.n_draws}")
        if int(self.burn_in) != self.burn_in or self.burn_in < 1:
            raise ConfigurationError(f"burn_in must be a positive integer, got {self.burn_in}")
        if self.workers is not None and self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        if self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be at least 1")
        self.algorithm = parse_algorithm(self.algorithm)
        self.kind = EffectKind.parse(self.kind).value
        return self

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(values, dict):
                raise ConfigurationError(f"{path}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(**values).validate()

    def model(self) -> ModelConfig:
        return ModelConfig(beta=self.beta, v_scale=self.v_scale, prior_c_scale=self.prior_c_scale,
                           prior_n=self.prior_n, burn_in=self.burn_in)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _sha(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _file_hashes(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = _sha(p)
        elif p.is_dir():
            for q in sorted(p.rglob("*")):
                if q.is_file():
                    out[str(q)] = _sha(q)
    return out


def _relative(path, root: Path) -> str:
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


def write_manifest(outdir: Path, command: str, argv, config: dict, seed, inputs, outputs,
                   name: str = "manifest.json") -> Path:
    config_blob = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "tool": "mvdlm",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": json.loads(config_blob),
        "config_hash": hashlib.sha256(config_blob.encode()).hexdigest()[:16],
        "inputs": _file_hashes(inputs),
        "outputs": {_relative(k, outdir): v for k, v in _file_hashes(outputs).items()},
    }
    path = outdir / name
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _write_failures(outdir: Path, failures: dict) -> Path:
    path = outdir / "failures.log"
    with open(path, "w") as fh:
        for idx in sorted(failures):
            fh.write(f"{idx}\t{failures[idx]}\n")
    return path


def _echo(cfg: dict) -> None:
    print(json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def _parse_contrasts(items, task_names) -> list[tuple[int, int]]:
    out = []
    for item in items or ():
        parts = item.split(",")
        if len(parts) != 2:
            raise ConfigurationError(f"contrast {item!r} must look like 'a,b'")
        idx = []
        for part in parts:
            part = part.strip()
            if part in task_names:
                idx.append(task_names.index(part))
            else:
                try:
                    idx.append(int(part))
                except ValueError:
                    raise ConfigurationError(f"unknown task {part!r} in contrast") from None
        out.append(tuple(idx))
    return out


def _run_overrides(args) -> dict:
    keys = ("r", "beta", "algorithm", "kind", "n_draws", "threshold", "burn_in", "seed",
            "workers", "chunk_size")
    return {k: getattr(args, k, None) for k in keys}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_design(args) -> int:
    params = HrfParams(**{k: v for k, v in {
        "peak_delay": args.peak_delay, "undershoot_delay": args.undershoot_delay,
        "undershoot_ratio": args.ratio}.items() if v is not None})
    names = args.names or [None] * len(args.stimulus)
    if len(names) != len(args.stimulus):
        raise ConfigurationError("--names needs one name per stimulus file")
    stimuli = [load_stimulus(p, n) for p, n in zip(args.stimulus, names)]
    design = build_design(stimuli, args.n_scans, args.tr, params, upsample=args.upsample)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_design(design, out)
    cfg = {"tr": args.tr, "n_scans": args.n_scans, "upsample": args.upsample,
           "hrf": asdict(params)}
    _echo(cfg)
    write_manifest(out.parent, "design", args.argv, cfg, None, args.stimulus, [out],
                   name=f"{out.name}.manifest.json")
    return 0


def cmd_fit(args) -> int:
    run = RunConfig.resolve(args.config, _run_overrides(args))
    _echo(run.to_dict())
    vol = read_volume(args.bold)
    design = load_design(args.design, tr=vol.tr)
    vol = vol.with_mask(build_mask(vol, args.mask))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    contrasts = _parse_contrasts(args.contrast, design.task_names)
    summary_path = None if args.no_summary else outdir / "summary.mvdlm"
    ev = map_subject(vol, design, run.model(), run.algorithm, run.kind, run.n_draws,
                     run.threshold, run.seed, run.r, run.standardize, run.workers,
                     summary=summary_path if summary_path else False, contrasts=contrasts,
                     chunk_size=run.chunk_size)
    outputs = ev.save(outdir, header=vol.header)
    outputs.append(_write_failures(outdir, ev.failures))
    if summary_path:
        outputs.append(summary_path)
    write_manifest(outdir, "fit", args.argv, run.to_dict(), run.seed,
                   [args.bold, args.design] + ([args.mask] if Path(str(args.mask)).exists()
                                               else []), outputs)
    log.info("%d in-mask voxels, %d failures", int(ev.mask.sum()), len(ev.failures))
    return 0


def cmd_group(args) -> int:
    run = RunConfig.resolve(args.config, _run_overrides(args))
    if args.algorithm is None and args.config is None:
        run.algorithm = "fsts"
    _echo(run.to_dict())
    group_a = [load_summary(p) for p in args.summaries]
    dist = group_combine(group_a, run.kind)
    inputs = list(args.summaries)
    if args.group_b:
        dist = group_contrast(dist, group_combine([load_summary(p) for p in args.group_b],
                                                  run.kind))
        inputs += list(args.group_b)
    design = None
    if args.design:
        design = load_design(args.design, tr=group_a[0].meta.tr)
        inputs.append(args.design)
    contrasts = _parse_contrasts(args.contrast, list(dist.meta.task_names))
    ev = map_group(dist, design, None, run.algorithm, run.n_draws, run.threshold, run.seed,
                   run.workers, contrasts, run.chunk_size)
    outdir = Path(args.out)
    outputs = ev.save(outdir, prefix="group_")
    outputs.append(_write_failures(outdir, ev.failures))
    write_manifest(outdir, "group", args.argv, run.to_dict(), run.seed, inputs, outputs)
    return 0


def _spec_design(spec_json: dict, args):
    if args.design:
        return load_design(args.design, tr=args.tr or spec_json.get("tr", 2.0))
    d = spec_json.get("design", {})
    return block_design(int(d.get("n_scans", args.n_scans or 160)),
                        float(d.get("tr", args.tr or 2.0)), float(d.get("period", 20.0)))


def cmd_simulate(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{args.spec}: invalid JSON ({exc})") from None
    design = _spec_design(raw, args)
    spec = PhantomSpec.from_json({k: v for k, v in raw.items() if k not in ("design", "tr")})
    if args.seed is not None:
        spec.seed = args.seed
    _echo(spec.to_json())
    vol, truth = generate_phantom(spec, design)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    bold, mask, dpath = outdir / "bold.nii.gz", outdir / "truth.nii.gz", outdir / "design.csv"
    write_volume(vol.data, vol.header, bold)
    write_nifti(truth.astype(np.uint8), mask, header=vol.header, dtype="u1")
    save_design(design, dpath)
    write_manifest(outdir, "simulate", args.argv, spec.to_json(), spec.seed, [args.spec],
                   [bold, mask, dpath])
    return 0


def cmd_assess(args) -> int:
    run = RunConfig.resolve(args.config, _run_overrides(args))
    if args.kind is None and args.config is None:
        run.kind = "marginal"
    _echo(run.to_dict())
    if args.bold:
        vol = read_volume(args.bold)
        inputs = [args.bold]
    else:
        vol = generate_resting(tuple(args.dims), args.n_scans, args.noise, args.phi,
                               args.data_seed, tr=args.tr)
        inputs = []
    tr = args.tr if args.bold is None else vol.tr
    designs = fictitious_designs(vol.n_scans, tr, seed=args.data_seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs, rates = [], {}
    for name in args.paradigm:
        res = assess_fpr(vol, designs[name], run.algorithm, run.kind, run.n_draws, run.threshold,
                         run.seed, run.model(), run.workers, r=run.r, chunk_size=run.chunk_size)
        report = outdir / f"fpr_{name}_{run.algorithm}_{run.kind}.csv"
        res.write_report(report)
        outputs.append(report)
        rates[name] = {"rate": res.rate, "active": res.n_active, "voxels": res.n_voxels}
        print(f"{name}\t{run.algorithm}\t{run.kind}\t{res.rate:.6g}")
    rpath = outdir / "fpr_summary.json"
    rpath.write_text(json.dumps(rates, indent=1, sort_keys=True) + "\n")
    outputs.append(rpath)
    cfg = dict(run.to_dict(), paradigms=list(args.paradigm), dims=args.dims,
               n_scans=args.n_scans, noise=args.noise, phi=args.phi, data_seed=args.data_seed)
    write_manifest(outdir, "assess", args.argv, cfg, run.seed, inputs, outputs)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--algorithm", choices=ALGORITHMS + ("fets",))
    p.add_argument("--kind", choices=[k.value for k in EffectKind])
    p.add_argument("--draws", dest="n_draws", type=int, help="trajectories per voxel")
    p.add_argument("--threshold", type=float)
    p.add_argument("--beta", type=float, help="discount factor in (0, 1]")
    p.add_argument("--radius", dest="r", type=int, help="neighborhood radius r (1..4)")
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int,
                   help=f"worker processes (default $MVDLM_WORKERS or 1; currently "
                        f"{default_workers()})")
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--contrast", action="append", metavar="A,B",
                   help="task contrast A - B, by name or 0-based index; repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvdlm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mvdlm {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="convolve stimulus files into a design CSV")
    p.add_argument("stimulus", nargs="+", help="onset/duration[/amplitude] text files")
    p.add_argument("--tr", type=float, required=True)
    p.add_argument("--n-scans", dest="n_scans", type=int, required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--upsample", type=int, default=16)
    p.add_argument("--peak-delay", dest="peak_delay", type=float)
    p.add_argument("--undershoot-delay", dest="undershoot_delay", type=float)
    p.add_argument("--ratio", type=float, help="undershoot to peak ratio")
    p.add_argument("-o", "--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("fit", help="subject-level evidence maps and posterior summary")
    p.add_argument("bold", help="4-D NIfTI (.nii or .nii.gz)")
    p.add_argument("--design", required=True, help="design CSV")
    p.add_argument("--mask", default="variance",
                   help="'variance', 'threshold' or a NIfTI mask path")
    p.add_argument("--no-summary", action="store_true", help="skip the group-stage summary")
    _add_run_flags(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("group", help="group or two-group contrast evidence maps")
    p.add_argument("summaries", nargs="+", help="summary containers of group A")
    p.add_argument("--group-b", nargs="+", help="summary containers of group B (A - B)")
    p.add_argument("--design", help="shared design CSV (needed by FEST)")
    _add_run_flags(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("simulate", help="phantom volume with spherical activations")
    p.add_argument("spec", help="phantom JSON (dims, regions, snr, noise, phi, seed, design)")
    p.add_argument("--design", help="design CSV to drive the activations")
    p.add_argument("--tr", type=float)
    p.add_argument("--n-scans", dest="n_scans", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("assess", help="false-positive rate under fictitious paradigms")
    p.add_argument("--bold", help="null 4-D NIfTI; omit to generate synthetic noise")
    p.add_argument("--dims", nargs=3, type=int, default=[12, 12, 12])
    p.add_argument("--n-scans", dest="n_scans", type=int, default=200)
    p.add_argument("--noise", choices=["white", "ar1"], default="white")
    p.add_argument("--phi", type=float, default=0.0)
    p.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    p.add_argument("--tr", type=float, default=2.0)
    p.add_argument("--paradigm", nargs="+", choices=PARADIGMS, default=["B1", "B2"])
    _add_run_flags(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_assess)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    args = ap.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MVDLMError as exc:
        print(f"mvdlm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mvdlm {args.command}: cannot access {exc.filename or ''}: {exc.strerror}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
